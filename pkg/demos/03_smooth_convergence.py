"""Reduced refinement study on the 1D manufactured problem.

Solves the stabilized monodomain equation against a smooth reference and
prints the observed L2 orders (the full study lives in the acceptance suite
and the `monoiga convergence` command).
"""

import tempfile

from monoiga import ExperimentConfig, run_convergence

with tempfile.TemporaryDirectory() as tmp:
    cfg = ExperimentConfig(
        kind="convergence",
        output_dir=tmp,
        conv_degrees=[2],
        conv_h=[2.0**-2, 2.0**-3, 2.0**-4],
        conv_tolerance=1e-9,
    )
    rows, slopes = run_convergence(cfg)
    print("degree  h         rel. L2 error   observed order")
    for p, h, err, order in rows:
        print("%6s  %-8g  %.4e      %s"
              % (p, h, err, "-" if order != order else "%.2f" % order))
    print("regression slope for p=2: %.3f (optimal is 3)" % slopes[2])
