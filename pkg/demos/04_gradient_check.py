"""Finite-difference check of every model variant, plus a sabotaged backward rule."""

import time

from graphcap import autodiff as ad
from graphcap.gradcheck import TOLERANCE, check_variant

for variant in ("base", "att", "enc", "enc_att"):
    t0 = time.time()
    report = check_variant(variant)
    status = "ok" if report.max_error < TOLERANCE else "FAIL"
    print("%-8s max rel err %.2e on %-10s %s (%.1fs)" % (variant, report.max_error, report.worst, status,
                                                           time.time() - t0))

# a wrong tanh derivative should be caught immediately
good = ad.BACKWARD["tanh"]
ad.BACKWARD["tanh"] = lambda out, g: tuple(0.9 * d for d in good(out, g))
print("sabotaged tanh:", "%.2e" % check_variant("base").max_error)
ad.BACKWARD["tanh"] = good
