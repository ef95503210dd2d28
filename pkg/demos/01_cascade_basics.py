"""Run the two-level cascade on a synthetic trace and read the outcome.

A local model that is right 70% of the time sits in front of a remote model
that is right 90% of the time. Every input the local supervisor does not
trust goes remote; every remote answer the second supervisor does not trust
is rejected.
"""

from __future__ import annotations

from collections import Counter

import supcascade as sc
from supcascade.metrics import cost_report, supervised_report


def main() -> None:
    trace = sc.synthesize_trace(1000, local_accuracy=0.7, remote_accuracy=0.9, seed=7,
                                latency_local=0.05, latency_remote=0.32, cost_per_call=0.002)
    q = sc.make_quantifier("max_softmax")

    for t_local, t_remote in [(0.7, 0.6), (0.8, 0.7), (0.9, 0.8)]:
        outcomes = sc.run_cascade(trace, q, q, sc.Thresholds(t_local, t_remote))
        decisions = Counter(o.decision.value for o in outcomes)
        report = supervised_report(outcomes)
        cost = cost_report(outcomes)
        print(f"thresholds ({t_local}, {t_remote})")
        print(f"  decisions         {dict(decisions)}")
        print(f"  remote fraction   {report.remote_fraction:.3f}")
        print(f"  acceptance rate   {report.delta:.3f}")
        print(f"  accuracy accepted {report.supervised_accuracy:.3f}")
        print(f"  remote spend      {cost['total_cost']:.3f} (saved {cost['saved_fraction']:.1%} of calls)")


if __name__ == "__main__":
    main()
