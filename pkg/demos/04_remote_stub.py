"""Drive the cascade through a real HTTP round trip.

The stub serves the remote half of a trace, so the cascade sees the same
answers it would see in-process, plus genuine network latency.
"""

from __future__ import annotations

import time

import supcascade as sc
from supcascade.metrics import LatencyModel, break_even_fraction, mean_latency
from supcascade.remote import RemoteClient, StubConfig, serve_stub


def main() -> None:
    trace = sc.synthesize_trace(300, 0.7, 0.9, seed=3, latency_local=0.005)
    q = sc.make_quantifier("max_softmax")
    thresholds = sc.Thresholds(0.8, 0.7)

    local_run = sc.run_cascade(trace, q, q, thresholds)
    with serve_stub(StubConfig(latency_s=0.02), trace) as stub:
        print(f"stub listening on {stub.url}")
        start = time.perf_counter()
        wire_run = sc.run_cascade(trace, q, q, thresholds, predictor=RemoteClient(stub.url), workers=8)
        wall = time.perf_counter() - start

    same = [o.decision for o in local_run] == [o.decision for o in wire_run]
    remote = [o for o in wire_run if o.remote_called]
    measured = sum(o.latency_s for o in remote) / len(remote) - 0.005
    print(f"decisions identical to in-process replay: {same}")
    print(f"{len(remote)} remote calls, mean round trip {measured * 1000:.1f} ms, wall time {wall:.2f}s")

    model = LatencyModel(0.005, measured)
    r = len(remote) / len(wire_run)
    print(f"expected per-input latency at r={r:.2f}: {mean_latency(r, model) * 1000:.1f} ms "
          f"(all remote: {model.latency_remote * 1000:.1f} ms)")
    print(f"cascade stays faster while fewer than {break_even_fraction(model):.1%} of inputs go remote")


if __name__ == "__main__":
    main()
