"""Train the attention decoder on 20 synthetic pairs until it memorises them."""

import time

from graphcap.data import build_vocab, encode_caption, make_training_pairs, tokenize
from graphcap.model import ModelConfig, init_model
from graphcap.scene_graph import reify
from graphcap.synthetic import toy_corpus
from graphcap.training import TrainConfig, train

records, labels = toy_corpus(20)
vocab = build_vocab(c for r in records for c in r.captions)
samples = [(reify(s.graph), encode_caption(vocab, s.caption)) for s in make_training_pairs(records)]
print(len(samples), "pairs,", len(vocab), "tokens")

model = init_model(ModelConfig.for_variant("att", labels.size, len(vocab), embed_dim=32, hidden_dim=64))
t0 = time.time()
result = train(model, samples, labels, TrainConfig(lr=1e-3, epochs=400, batch_size=20, max_steps=2000))
print("final loss %.4f after %d steps (%.0fs)" % (result.step_losses[-1], len(result.step_losses), time.time() - t0))

outputs = model.generate([g for g, _ in samples], labels)
hits = 0
for r, ids in zip(records, outputs):
    got = vocab.decode(ids)
    hits += got == tokenize(r.captions[0])
print("%d/%d captions reproduced" % (hits, len(records)))
print(" ".join(vocab.decode(outputs[0])), "|", records[0].captions[0])
