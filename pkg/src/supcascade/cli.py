"""Command-line front end.

Subcommands: ``rac``, ``calibrate``, ``evaluate``, ``sweep``, ``replay``,
``serve-stub``. Settings come from flags, then from a JSON/TOML config file
(``--config`` or the ``CASCADE_CONFIG`` environment variable), then from
built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import calibration, metrics
from .cascade import (
    FALLBACK_POLICIES,
    Decision,
    LatencyCostDefaults,
    Thresholds,
    run_cascade,
    remote_fraction,
    run_local_only,
)
from .quantifiers import QUANTIFIER_NAMES, Quantifier, fit_mdsa, load_token_equivalence, make_quantifier
from .remote import ClientConfig, RemoteClient, StubConfig, serve_stub
from .trace import TraceDataset, atomic_write_text, load_trace, observation_correct

log = logging.getLogger("supcascade")

DEFAULTS: dict[str, Any] = {
    "trace": None,
    "calibration_trace": None,
    "quantifier_local": "max_softmax",
    "quantifier_remote": "max_softmax",
    "token_groups": None,
    "threshold_local": None,
    "threshold_remote": None,
    "thresholds": None,
    "target_fpr": None,
    "target_remote_fraction": None,
    "latency_local": None,
    "latency_remote": None,
    "cost_per_call": None,
    "remote_url": None,
    "timeout": 30.0,
    "fallback": "error",
    "seed": 0,
    "out": None,
    "baseline": False,
    "include_baseline": False,
    "normalize_answers": False,
    "repeats": 0,
    "workers": 1,
    "host": "127.0.0.1",
    "port": 8765,
    "latency_ms": 0.0,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _load_config_file(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    p = Path(path)
    if p.suffix == ".toml":
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib
        with p.open("rb") as fh:
            data = tomllib.load(fh)
    else:
        with p.open(encoding="utf-8") as fh:
            data = json.load(fh)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a table/object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    """Merge flags over the config file over defaults."""
    config = _load_config_file(args.config or os.environ.get("CASCADE_CONFIG"))
    unknown = set(config) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    settings = dict(DEFAULTS)
    settings.update(config)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            settings[key] = value
    return settings


def _as_list(value) -> list[float]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(value)]


def _single(value, name: str) -> float | None:
    values = _as_list(value)
    if len(values) > 1:
        raise UsageError(f"--{name.replace('_', '-')} takes a single value for this command")
    return values[0] if values else None


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2) + "\n"


def _read_thresholds_file(path: str) -> tuple[float | None, float | None]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    values = []
    for key in ("threshold_local", "threshold_remote"):
        v = data.get(key)
        values.append(None if v is None else float(v))
    return values[0], values[1]


# ---------------------------------------------------------------------------
# shared plumbing


def _require(settings: Mapping[str, Any], key: str) -> Any:
    if settings.get(key) in (None, ""):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return settings[key]


def _traces(settings) -> tuple[TraceDataset, TraceDataset]:
    test = load_trace(_require(settings, "trace"))
    calib_path = settings.get("calibration_trace")
    calib = load_trace(calib_path) if calib_path else test
    return test, calib


def _quantifier(name: str, level: str, settings, fit_data: TraceDataset) -> Quantifier:
    if name not in QUANTIFIER_NAMES:
        raise UsageError(f"unknown quantifier {name!r}; choose from {', '.join(QUANTIFIER_NAMES)}")
    groups = load_token_equivalence(settings["token_groups"]) if settings.get("token_groups") else None
    model = None
    if name == "mdsa":
        by_class: dict[Any, list] = {}
        for r in fit_data.records:
            obs = r.local if level == "local" else r.remote
            if obs is None or obs.activations is None:
                continue
            label = r.truth.label if r.truth.kind == "class" else obs.resolved_prediction()
            by_class.setdefault(label, []).append(obs.activations)
        if not by_class:
            raise UsageError(f"mdsa needs {level} activations in the calibration trace")
        model = fit_mdsa(by_class)
    return make_quantifier(name, token_groups=groups, mdsa_model=model)


def _quantifiers(settings, calib: TraceDataset) -> tuple[Quantifier, Quantifier]:
    return (
        _quantifier(settings["quantifier_local"], "local", settings, calib),
        _quantifier(settings["quantifier_remote"], "remote", settings, calib),
    )


def _defaults(settings) -> LatencyCostDefaults:
    return LatencyCostDefaults(
        latency_local=settings["latency_local"] or 0.0,
        latency_remote=settings["latency_remote"] or 0.0,
        cost_per_remote_call=settings["cost_per_call"] or 0.0,
    )


def _correct_local_confidences(dataset, quantifier, normalize) -> list[float]:
    return [
        float(quantifier(r.local))
        for r in dataset.records
        if observation_correct(r.local, r.truth, normalize=normalize)
    ]


def resolve_thresholds(
    settings, calib: TraceDataset, q_local: Quantifier, q_remote: Quantifier, *, baseline: bool
) -> tuple[Thresholds, dict[str, Any]]:
    """Thresholds per level, either given explicitly or calibrated on ``calib``."""
    normalize = settings["normalize_answers"]
    t_local = _single(settings.get("threshold_local"), "threshold_local")
    t_remote = _single(settings.get("threshold_remote"), "threshold_remote")
    if settings.get("thresholds"):
        if t_local is not None or t_remote is not None:
            raise UsageError("give either --thresholds or explicit threshold values, not both")
        t_local, t_remote = _read_thresholds_file(settings["thresholds"])
    target_fraction = _single(settings.get("target_remote_fraction"), "target_remote_fraction")
    target_fpr = _single(settings.get("target_fpr"), "target_fpr")
    achieved: dict[str, Any] = {}

    if baseline:
        if target_fraction is not None:
            raise UsageError("baseline mode makes no remote calls; drop --target-remote-fraction")
        if (t_local is None) == (target_fpr is None):
            raise UsageError("baseline mode needs exactly one of --threshold-local and --target-fpr")
        if t_local is None:
            res = calibration.threshold_for_fpr(_correct_local_confidences(calib, q_local, normalize), target_fpr)
            t_local = res.threshold
            achieved["fpr"] = res.achieved
        return Thresholds(t_local, math.inf), achieved

    if (t_local is None) == (target_fraction is None):
        raise UsageError("give exactly one of --threshold-local and --target-remote-fraction")
    if t_local is None:
        res = calibration.threshold_for_remote_fraction([q_local(r.local) for r in calib.records], target_fraction)
        t_local = res.threshold
        achieved["remote_fraction"] = res.achieved
        achieved["forwarded_count"] = res.details["forwarded_count"]
    if (t_remote is None) == (target_fpr is None):
        raise UsageError("give exactly one of --threshold-remote and --target-fpr")
    if t_remote is None:
        res = calibration.calibrate_second_level(
            calib, t_local, target_fpr, q_local, q_remote, normalize_answers=normalize
        )
        t_remote = res.threshold
        achieved["fpr"] = res.achieved
    return Thresholds(t_local, t_remote), achieved


def _latency_section(settings, outcomes) -> dict[str, Any]:
    r = remote_fraction(outcomes)
    if settings["latency_local"] is not None and settings["latency_remote"] is not None:
        model = metrics.LatencyModel(settings["latency_local"], settings["latency_remote"])
        try:
            be = metrics.break_even_fraction(model)
        except metrics.MetricError:
            be = None
        return {"mean_s": metrics.mean_latency(r, model), "break_even_fraction": be}
    return {"mean_s": math.fsum(o.latency_s for o in outcomes) / len(outcomes), "break_even_fraction": None}


def _cost_section(settings, outcomes) -> dict[str, Any]:
    model = metrics.CostModel(settings["cost_per_call"]) if settings["cost_per_call"] is not None else None
    return metrics.cost_report(outcomes, model)


def _run(settings, test, thresholds, q_local, q_remote, *, baseline: bool, predictor=None):
    if baseline:
        return run_local_only(
            test, q_local, thresholds.local, defaults=_defaults(settings),
            normalize_answers=settings["normalize_answers"],
        )
    return run_cascade(
        test, q_local, q_remote, thresholds, predictor=predictor, defaults=_defaults(settings),
        fallback=settings["fallback"], normalize_answers=settings["normalize_answers"],
        workers=int(settings["workers"]),
    )


def _rac_section(test, q_local, normalize) -> dict[str, Any] | None:
    if any(r.remote is None for r in test.records):
        return None
    try:
        curve = metrics.rac_curve_for(test, q_local, normalize_answers=normalize)
        return metrics.rac_summary(curve).to_dict()
    except metrics.MetricError:
        return None


def evaluation_report(settings, *, target_fpr: float | None = None) -> dict[str, Any]:
    test, calib = _traces(settings)
    q_local, q_remote = _quantifiers(settings, calib)
    baseline = bool(settings["baseline"])
    thresholds, achieved = resolve_thresholds(settings, calib, q_local, q_remote, baseline=baseline)
    outcomes = _run(settings, test, thresholds, q_local, q_remote, baseline=baseline)
    report = metrics.supervised_report(outcomes)
    fpr_target = _single(settings.get("target_fpr"), "target_fpr") if target_fpr is None else target_fpr
    return {
        "rac": _rac_section(test, q_local, settings["normalize_answers"]),
        "supervised": report.to_dict(fpr_target),
        "latency": _latency_section(settings, outcomes),
        "cost": _cost_section(settings, outcomes),
        "thresholds": {
            "threshold_local": thresholds.local,
            "threshold_remote": None if baseline else thresholds.remote,
            "achieved_on_calibration": achieved,
        },
        "mode": "baseline" if baseline else "cascade",
    }


# ---------------------------------------------------------------------------
# commands


def cmd_rac(settings) -> None:
    out = Path(_require(settings, "out"))
    test = load_trace(_require(settings, "trace"))
    calib = load_trace(settings["calibration_trace"]) if settings.get("calibration_trace") else test
    q_local = _quantifier(settings["quantifier_local"], "local", settings, calib)
    conf, lc, rc = metrics.correctness_arrays(test, q_local, normalize_answers=settings["normalize_answers"])
    curve = metrics.rac_curve(conf, lc, rc)
    summary: dict[str, Any] = {"rac": metrics.rac_summary(curve).to_dict()}
    if int(settings["repeats"]) > 0:
        mean, stderr = metrics.random_auc_baseline(lc, rc, seed=int(settings["seed"]), repeats=int(settings["repeats"]))
        summary["random_baseline"] = {"mean": mean, "stderr": stderr, "repeats": int(settings["repeats"]), "seed": int(settings["seed"])}
    atomic_write_text(out / "rac.csv", curve.to_csv())
    atomic_write_text(out / "summary.json", _dump_json(summary))


def cmd_calibrate(settings) -> None:
    out = _require(settings, "out")
    test_path = settings.get("calibration_trace") or _require(settings, "trace")
    calib = load_trace(test_path)
    q_local, q_remote = _quantifiers(settings, calib)
    baseline = bool(settings["baseline"])
    thresholds, achieved = resolve_thresholds(settings, calib, q_local, q_remote, baseline=baseline)
    result = {
        "threshold_local": thresholds.local,
        "threshold_remote": None if baseline else thresholds.remote,
        "achieved": achieved,
    }
    atomic_write_text(out, _dump_json(result))


def cmd_evaluate(settings) -> None:
    out = _require(settings, "out")
    atomic_write_text(out, _dump_json(evaluation_report(settings)))


SWEEP_COLUMNS = (
    "target_fpr", "target_remote_fraction", "mode", "threshold_local", "threshold_remote",
    "remote_fraction", "fpr_achieved", "delta", "supervised_accuracy", "s_0.5", "s_1", "s_2",
)


def cmd_sweep(settings) -> None:
    out = _require(settings, "out")
    fprs = _as_list(settings.get("target_fpr"))
    fractions = _as_list(settings.get("target_remote_fraction"))
    if not fprs or not fractions:
        raise UsageError("sweep needs non-empty --target-fpr and --target-remote-fraction lists")
    if settings.get("threshold_local") is not None or settings.get("threshold_remote") is not None:
        raise UsageError("sweep calibrates thresholds; do not pass explicit thresholds")
    rows = []
    for fpr in fprs:
        configs = [(None, True)] if settings["include_baseline"] else []
        configs += [(f, False) for f in fractions]
        for fraction, baseline in configs:
            one = dict(settings, target_fpr=fpr, target_remote_fraction=fraction, baseline=baseline)
            rep = evaluation_report(one)
            sup = rep["supervised"]
            rows.append({
                "target_fpr": fpr,
                "target_remote_fraction": 0.0 if baseline else fraction,
                "mode": rep["mode"],
                "threshold_local": rep["thresholds"]["threshold_local"],
                "threshold_remote": rep["thresholds"]["threshold_remote"],
                "remote_fraction": sup["remote_fraction"],
                "fpr_achieved": sup["fpr_achieved"],
                "delta": sup["delta"],
                "supervised_accuracy": sup["supervised_accuracy"],
                "s_0.5": sup["s_beta"]["0.5"],
                "s_1": sup["s_beta"]["1"],
                "s_2": sup["s_beta"]["2"],
            })
    atomic_write_text(out, metrics.csv_table(rows, SWEEP_COLUMNS))


def cmd_replay(settings) -> None:
    out = Path(_require(settings, "out"))
    test, calib = _traces(settings)
    q_local, q_remote = _quantifiers(settings, calib)
    thresholds, achieved = resolve_thresholds(settings, calib, q_local, q_remote, baseline=False)
    predictor = None
    if settings.get("remote_url"):
        predictor = RemoteClient(ClientConfig(settings["remote_url"], float(settings["timeout"])))
    outcomes = _run(settings, test, thresholds, q_local, q_remote, baseline=False, predictor=predictor)
    counts = {d.value: sum(o.decision is d for o in outcomes) for d in Decision}
    report = {
        "decisions": counts,
        "degraded": sum(o.degraded for o in outcomes),
        "remote_fraction": remote_fraction(outcomes),
        "latency": _latency_section(settings, outcomes),
        "cost": _cost_section(settings, outcomes),
        "thresholds": {"threshold_local": thresholds.local, "threshold_remote": thresholds.remote},
    }
    lines = "".join(json.dumps(_json_safe(o.to_dict())) + "\n" for o in outcomes)
    atomic_write_text(out / "outcomes.jsonl", lines)
    atomic_write_text(out / "report.json", _dump_json(report))


def cmd_serve_stub(settings) -> None:
    config = StubConfig(
        trace_path=_require(settings, "trace"),
        host=settings["host"],
        port=int(settings["port"]),
        latency_s=float(settings["latency_ms"]) / 1000.0,
    )
    handle = serve_stub(config)
    stop = threading.Event()

    def _on_signal(signum, frame):
        stop.set()

    previous = {s: signal.signal(s, _on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    print(f"serving {config.trace_path} on {handle.url}", flush=True)
    try:
        while not stop.wait(0.2):
            pass
    finally:
        handle.stop()
        for s, h in previous.items():
            signal.signal(s, h)


COMMANDS = {
    "rac": cmd_rac,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "replay": cmd_replay,
    "serve-stub": cmd_serve_stub,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML config file (default: $CASCADE_CONFIG)")
    common.add_argument("--trace", help="test trace (JSONL)")
    common.add_argument("--calibration-trace", help="trace used for threshold calibration (default: --trace)")
    common.add_argument("--quantifier-local", choices=QUANTIFIER_NAMES)
    common.add_argument("--quantifier-remote", choices=QUANTIFIER_NAMES)
    common.add_argument("--token-groups", help="JSON map of equivalent-token groups")
    common.add_argument("--normalize-answers", action="store_true", default=None,
                        help="trim and casefold before exact-match comparison")
    common.add_argument("--latency-local", type=float, help="seconds per local prediction")
    common.add_argument("--latency-remote", type=float, help="seconds per remote prediction")
    common.add_argument("--cost-per-call", type=float, help="currency units per remote call")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file (directory for rac and replay)")
    common.add_argument("-v", "--verbose", action="store_true")

    thresholds = argparse.ArgumentParser(add_help=False)
    thresholds.add_argument("--threshold-local", type=float)
    thresholds.add_argument("--threshold-remote", type=float)
    thresholds.add_argument("--thresholds", help="JSON file written by 'calibrate'")
    thresholds.add_argument("--target-remote-fraction", type=float)
    thresholds.add_argument("--target-fpr", type=float)
    thresholds.add_argument("--baseline", action="store_true", default=None,
                            help="supervised local model only; first-level rejections are final")

    parser = argparse.ArgumentParser(prog="supcascade", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    rac = sub.add_parser("rac", parents=[common], help="request-accuracy curve and its summary")
    rac.add_argument("--repeats", type=int, help="random-ordering baseline repeats (0 = skip)")

    sub.add_parser("calibrate", parents=[common, thresholds], help="compute thresholds")
    sub.add_parser("evaluate", parents=[common, thresholds], help="supervised report for one configuration")

    sweep = sub.add_parser("sweep", parents=[common], help="reports over FPR targets x remote fractions")
    sweep.add_argument("--target-fpr", type=float, nargs="+")
    sweep.add_argument("--target-remote-fraction", type=float, nargs="+")
    sweep.add_argument("--include-baseline", action="store_true", default=None)

    replay = sub.add_parser("replay", parents=[common, thresholds], help="run the cascade over a trace")
    replay.add_argument("--remote-url", help="remote prediction service (default: replay in-process)")
    replay.add_argument("--timeout", type=float)
    replay.add_argument("--fallback", choices=FALLBACK_POLICIES)
    replay.add_argument("--workers", type=int)

    stub = sub.add_parser("serve-stub", parents=[common], help="serve a trace's remote blocks over HTTP")
    stub.add_argument("--host")
    stub.add_argument("--port", type=int)
    stub.add_argument("--latency-ms", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
        COMMANDS[args.command](settings)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"supcascade {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
