"""Pick a detector confidence threshold by validation METEOR."""

from graphcap.data import build_vocab, encode_caption, make_training_pairs
from graphcap.evaluation import sweep_thresholds
from graphcap.model import ModelConfig, init_model
from graphcap.scene_graph import reify
from graphcap.synthetic import sweep_fixture
from graphcap.training import TrainConfig, train

train_records, val_records, labels = sweep_fixture()
vocab = build_vocab(c for r in train_records for c in r.captions)
samples = [(reify(s.graph), encode_caption(vocab, s.caption)) for s in make_training_pairs(train_records)]

model = init_model(ModelConfig.for_variant("base", labels.size, len(vocab), embed_dim=32, hidden_dim=64))
train(model, samples, labels, TrainConfig(lr=1e-3, epochs=150, batch_size=8))

# noise objects sit below 0.4, true objects between 0.45 and 0.58
result = sweep_thresholds(model, val_records, labels, vocab, [0.2, 0.4, 0.6, 0.8])
print(result.to_text())
