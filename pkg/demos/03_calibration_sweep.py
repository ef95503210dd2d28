"""Pick thresholds from data instead of by hand.

The local threshold is chosen to send a target share of inputs remote. The
remote threshold then spends a false-alarm budget: the share of correct
system predictions we are willing to reject. The local-only baseline gets
the same budget.
"""

from __future__ import annotations

import supcascade as sc
from supcascade.calibration import calibrate_second_level, threshold_for_fpr, threshold_for_remote_fraction
from supcascade.metrics import supervised_report
from supcascade.trace import resolve_correctness


def main() -> None:
    calib = sc.synthesize_trace(2000, 0.7, 0.9, seed=1)
    test = sc.synthesize_trace(2000, 0.7, 0.9, seed=2)
    q = sc.make_quantifier("max_softmax")
    local_conf = [q(r.local) for r in calib]
    correct_local_conf = [c for c, r in zip(local_conf, calib) if resolve_correctness(r)[0]]

    print("fpr   setup         remote   delta  acc    S_0.5  S_1    S_2")
    for fpr in (0.01, 0.05, 0.10):
        t_base = threshold_for_fpr(correct_local_conf, fpr).threshold
        rows = [("local only", sc.run_local_only(test, q, t_base))]
        for share in (0.3, 0.5):
            t_local = threshold_for_remote_fraction(local_conf, share).threshold
            t_remote = calibrate_second_level(calib, t_local, fpr, q, q).threshold
            rows.append((f"cascade {share:.0%}", sc.run_cascade(test, q, q, sc.Thresholds(t_local, t_remote))))
        for label, outcomes in rows:
            rep = supervised_report(outcomes)
            s = rep.s_beta
            print(f"{fpr:<5} {label:<13} {rep.remote_fraction:6.3f}  {rep.delta:.3f}  "
                  f"{rep.supervised_accuracy:.3f}  {s[0.5]:.3f}  {s[1.0]:.3f}  {s[2.0]:.3f}")


if __name__ == "__main__":
    main()
