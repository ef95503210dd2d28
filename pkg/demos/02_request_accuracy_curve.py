"""Request-accuracy curve: how system accuracy moves as more inputs go remote."""

from __future__ import annotations

import supcascade as sc
from supcascade.metrics import correctness_arrays, rac_curve, rac_summary, random_auc_baseline


def main() -> None:
    trace = sc.synthesize_trace(1000, 0.7, 0.9, seed=7)
    conf, local_ok, remote_ok = correctness_arrays(trace, sc.make_quantifier("max_softmax"))

    curve = rac_curve(conf, local_ok, remote_ok)
    summary = rac_summary(curve)
    for r in (0.0, 0.1, 0.25, 0.5, 0.75, 1.0):
        i = round(r * curve.n)
        print(f"forward {r:4.0%}  accuracy {curve.accuracy[i]:.3f}")

    print(f"\nAUC-RAC            {summary.auc_rac:.3f}")
    print(f"remote-even at r = {summary.r_remote_even:.3f}")
    print(f"peak {summary.acc_peak:.3f} at r = {summary.r_peak:.3f} (superaccurate: {summary.superaccurate})")

    # a supervisor that ranks inputs at random sits on the straight line
    mean, stderr = random_auc_baseline(local_ok, remote_ok, seed=0, repeats=2000)
    print(f"random ordering    {mean:.3f} +/- {stderr:.3f}")


if __name__ == "__main__":
    main()
