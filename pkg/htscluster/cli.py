"""Command-line entry point: ``htscluster simulate|cluster|evaluate|forecast``.

Every command writes its outputs atomically into ``--output-dir`` together with a
``manifest.json`` (command, config, seed, input fingerprints, version, hash). Errors are
printed as one JSON line on stderr; exit code 1 means bad input or usage, 2 a numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
import yaml

from . import __version__
from .baselines import METHODS, run_method
from .cluster import ClusterConfig, MultiLevelClusterModel
from .errors import HtsError, LabelsError, ParseError, UsageError
from .forecast import (
    FORECASTERS,
    ForecastConfig,
    evaluate_forecasts,
    forecast_per_series,
    forecast_with_clusters,
    holdout,
    write_forecasts,
    write_timing,
)
from .hierarchy import HtsDataset, dataset_fingerprint, load_dataset, save_dataset
from .metrics import Scores, score_levels, summarize_runs
from .modelio import config_to_dict, load_model, read_json, save_model
from .runs import atomic_write_json, atomic_write_text, build_manifest, derive_seed
from .sdtw import SdtwConfig
from .synth import PRESETS, SynthConfig, generate_benchmark, labels_from_dict, labels_to_dict
from .transport import OtConfig

logger = logging.getLogger("htscluster")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors routed through ``UsageError`` (exit 1)."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(verbosity: int) -> None:
    level = {-1: logging.WARNING, 0: logging.INFO}.get(verbosity, logging.DEBUG)
    if verbosity < -1:
        level = logging.ERROR
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def parse_k_per_level(spec: Any, levels: int) -> Dict[int, int]:
    """``"l1=4,l2=8"``, ``"1=4,2=8"``, a mapping, or one integer for every level."""
    if spec is None:
        raise UsageError("--k-per-level is required")
    if isinstance(spec, int) or (isinstance(spec, str) and spec.strip().isdigit()):
        return {level: int(spec) for level in range(1, levels + 1)}
    if isinstance(spec, dict):
        items = [(str(k), v) for k, v in spec.items()]
    else:
        items = []
        for part in str(spec).split(","):
            if "=" not in part:
                raise UsageError(f"bad --k-per-level entry '{part}' (want l<level>=<k>)")
            name, value = part.split("=", 1)
            items.append((name, value))
    out = {}
    for name, value in items:
        try:
            out[int(name.strip().lstrip("lL"))] = int(value)
        except ValueError:
            raise UsageError(f"bad --k-per-level entry '{name}={value}'")
    return out


def load_config_file(path: str) -> Dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        if path.endswith((".yaml", ".yml")):
            obj = yaml.safe_load(text)
        else:
            obj = json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse config {path}: {exc}", {"path": path}) from exc
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ParseError(f"config {path} must hold a mapping", {"path": path})
    return {str(k).replace("-", "_"): v for k, v in obj.items()}


def overprovisioned_k(truth: Dict[int, Dict[str, Any]]) -> Dict[int, int]:
    """Twice the number of true clusters at every level."""
    return {level: 2 * len({str(v) for v in labels.values()}) for level, labels in sorted(truth.items())}


def cluster_config(args, levels: int, truth: Optional[Dict[int, Dict[str, Any]]] = None) -> ClusterConfig:
    """Clustering config from flags. Without ``--k-per-level`` but with true labels, k is
    over-provisioned and merge/remove post-processing trims the surplus."""
    overprovision = args.k_per_level is None and truth is not None
    if overprovision:
        k_per_level = overprovisioned_k(truth)
        logger.info(f"No --k-per-level given; over-provisioning k={k_per_level} with post-processing")
    else:
        k_per_level = parse_k_per_level(args.k_per_level, levels)
    postprocess = (
        overprovision or args.postprocess or args.merge_eps is not None or args.remove_eps is not None
    )
    return ClusterConfig(
        k_per_level=k_per_level,
        sdtw=SdtwConfig(gamma=args.gamma, band=args.band),
        ot=OtConfig(epsilon=args.epsilon),
        max_outer_iter=args.max_outer_iter,
        seed=args.seed,
        fuzziness=args.fuzziness,
        merge_eps=args.merge_eps,
        remove_eps=1 if args.remove_eps is None else args.remove_eps,
        postprocess=postprocess,
        support_size=args.support_size,
        threads=args.threads,
    )


def _method(args) -> str:
    return "two-level-alt" if args.mode == "two-level-alt" else args.method


def _output_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: str) -> HtsDataset:
    ds = load_dataset(path)
    logger.info(f"Loaded {ds.N} instances with {ds.levels} levels from {path}")
    return ds


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    overrides = {
        name: getattr(args, name)
        for name in ("offsets", "instances_per_cluster", "length_range", "branching", "noise_std", "burnin")
        if getattr(args, name) is not None
    }
    for name in ("offsets", "length_range", "branching"):
        if name in overrides:
            overrides[name] = tuple(overrides[name])
    cfg = SynthConfig.preset(args.preset, seed=args.seed, threads=args.threads, **overrides)
    bench = generate_benchmark(cfg)
    out = _output_dir(args)
    save_dataset(bench.dataset, out / "dataset.json")
    atomic_write_json(out / "labels.json", labels_to_dict(bench.labels))
    body = asdict(cfg)
    body.pop("threads")
    manifest = build_manifest(
        "simulate", {"preset": args.preset, **body}, args.seed,
        {"dataset": dataset_fingerprint(bench.dataset)},
    )
    atomic_write_json(out / "manifest.json", manifest)
    logger.info(f"Wrote dataset and labels to {out}")
    return 0


def loss_trace_frame(model: MultiLevelClusterModel) -> pd.DataFrame:
    rows = [
        (level, it, loss)
        for level, m in sorted(model.per_level.items())
        for it, loss in enumerate(m.loss_trace)
    ]
    return pd.DataFrame(rows, columns=["level", "iteration", "loss"])


def cmd_cluster(args) -> int:
    ds = _load(args.input)
    cfg = cluster_config(args, ds.levels)
    model = run_method(_method(args), ds, cfg)
    out = _output_dir(args)
    manifest = save_model(model, out / "model.json", ds)
    atomic_write_text(
        out / "loss_trace.csv", loss_trace_frame(model).to_csv(index=False, float_format="%.17g")
    )
    atomic_write_json(out / "manifest.json", manifest)
    for level, m in sorted(model.per_level.items()):
        logger.info(
            f"Level {level}: k={m.k}, {m.iterations} iterations, final loss {m.loss_trace[-1]:.6g}"
        )
    return 0


def _truth_for(ds: HtsDataset, truth: Dict[int, Dict[str, Any]]) -> Dict[int, Dict[str, Any]]:
    """Ground truth restricted to the dataset's nodes; every node must be labeled."""
    out = {}
    for level in range(1, ds.levels + 1):
        labels = truth.get(level, {})
        missing = [k for k in ds.node_keys(level) if k not in labels]
        if missing:
            raise LabelsError(
                "labels incomplete",
                {"level": level, "missing": len(missing), "examples": missing[:5]},
            )
        out[level] = {k: labels[k] for k in ds.node_keys(level)}
    return out


def _scores_dict(per_level: Dict[int, Scores]) -> Dict[str, Dict[str, float]]:
    return {str(level): s._asdict() for level, s in sorted(per_level.items())}


def cmd_evaluate(args) -> int:
    ds = _load(args.input)
    truth = _truth_for(ds, labels_from_dict(read_json(args.labels)))
    out = _output_dir(args)
    inputs = {"dataset": dataset_fingerprint(ds)}

    if args.model:
        model = load_model(args.model, ds)
        scores = score_levels(truth, {l: m.label_map() for l, m in model.per_level.items()})
        manifest = build_manifest("evaluate", {"model": args.model}, args.seed, inputs)
        result: Dict[str, Any] = {
            "manifest": manifest["hash"],
            "methods": {model.method: {"levels": _scores_dict(scores)}},
        }
        for level, s in sorted(scores.items()):
            logger.info(f"{model.method} level {level}: NMI {s.nmi:.3f} AMI {s.ami:.3f} ARI {s.ari:.3f}")
        atomic_write_json(out / "metrics.json", result)
        atomic_write_json(out / "manifest.json", manifest)
        return 0

    if args.repeats < 1:
        raise UsageError(f"--repeats must be >= 1, got {args.repeats}")
    base = cluster_config(args, ds.levels, truth)
    methods = args.methods or ["hts-cluster"]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    result = {"repeats": args.repeats, "methods": {}}
    tables = []
    for method in methods:
        runs, seconds = [], []
        for r in range(args.repeats):
            cfg = replace(base, seed=derive_seed(args.seed, "repeat", r))
            model = run_method(method, ds, cfg)
            runs.append(score_levels(truth, {l: m.label_map() for l, m in model.per_level.items()}))
            seconds.append(model.timings)
        summary = summarize_runs(runs)
        timing = pd.DataFrame(seconds).mean(axis=0)
        result["methods"][method] = {
            "levels": {
                str(int(row["level"])): {c: float(row[c]) for c in summary.columns if c != "level"}
                for _, row in summary.iterrows()
            },
            "seconds_per_level": {str(int(l)): float(s) for l, s in sorted(timing.items())},
        }
        summary.insert(0, "method", method)
        summary["seconds"] = summary["level"].map(timing).astype(float)
        tables.append(summary)
        for _, row in summary.iterrows():
            logger.info(
                f"{method} level {int(row['level'])}: "
                f"NMI {row['nmi_mean']:.3f}±{row['nmi_std']:.3f} "
                f"AMI {row['ami_mean']:.3f}±{row['ami_std']:.3f} "
                f"ARI {row['ari_mean']:.3f}±{row['ari_std']:.3f} ({row['seconds']:.2f}s)"
            )
    config = {"methods": methods, "repeats": args.repeats, "cluster": config_to_dict(base)}
    manifest = build_manifest("evaluate", config, args.seed, inputs)
    result["manifest"] = manifest["hash"]
    atomic_write_json(out / "metrics.json", result)
    atomic_write_text(out / "metrics.csv", pd.concat(tables).to_csv(index=False))
    atomic_write_json(out / "manifest.json", manifest)
    return 0


def cmd_forecast(args) -> int:
    ds = _load(args.input)
    history, test, horizons = holdout(ds, args.horizon)
    fcfg = ForecastConfig(fuzziness=args.fuzziness, forecaster=args.forecaster, threads=args.threads)
    if args.model:
        model = load_model(args.model, history)
    else:
        model = run_method(_method(args), history, cluster_config(args, ds.levels))
    result = forecast_with_clusters(
        history, model, fcfg.factory(), horizons, fcfg.fuzziness, model.config.sdtw, fcfg.threads
    )
    mase = evaluate_forecasts(test, result.forecasts, history)

    out = _output_dir(args)
    config = {
        "cluster": config_to_dict(model.config),
        "method": model.method,
        "forecaster": fcfg.forecaster,
        "fuzziness": fcfg.fuzziness,
        "horizon": args.horizon,
        "baseline": args.baseline,
    }
    manifest = build_manifest("forecast", config, args.seed, {"dataset": dataset_fingerprint(ds)})
    write_forecasts(out / "forecasts.csv", history, result.forecasts)
    write_timing(out / "timing.json", result.report, mase, {"manifest": manifest["hash"]})
    logger.info(f"Clustered: {result.report.fits} fits, MASE per level {mase}")

    if args.baseline == "per-series":
        base = forecast_per_series(history, fcfg.factory(), horizons, fcfg.threads)
        base_mase = evaluate_forecasts(test, base.forecasts, history)
        write_forecasts(out / "forecasts_per_series.csv", history, base.forecasts)
        write_timing(out / "timing_per_series.json", base.report, base_mase, {"manifest": manifest["hash"]})
        ratio = result.report.fits / max(base.report.fits, 1)
        logger.info(f"Per-series: {base.report.fits} fits, MASE per level {base_mase}")
        logger.info(f"Fit-count ratio clustered / per-series: {ratio:.3f}")
    atomic_write_json(out / "manifest.json", manifest)
    return 0


# ---------------------------------------------------------------------------
# parser

EPILOG = """
Examples:
  htscluster simulate --preset two-level --seed 7 --output-dir runs/sim
  htscluster cluster --input runs/sim/dataset.json --k-per-level l1=4,l2=4 --output-dir runs/fit
  htscluster evaluate --input runs/sim/dataset.json --labels runs/sim/labels.json \\
      --k-per-level 4 --methods hts-cluster soft-dtw concat --repeats 5
  htscluster forecast --input runs/sim/dataset.json --k-per-level 4 --baseline per-series
"""


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file supplying defaults for any flag")
    common.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: logical cores)")
    common.add_argument("--output-dir", default=".", help="directory for outputs (default: .)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    common.add_argument("-q", "--quiet", action="count", default=0, help="less logging")

    clustering = _Parser(add_help=False)
    clustering.add_argument("--k-per-level", help="clusters per level: l1=4,l2=8 or one integer "
                            "(evaluate default: twice the true clusters, with merge/remove)")
    clustering.add_argument("--mode", choices=["multilevel", "two-level-alt"], default="multilevel")
    clustering.add_argument("--method", choices=sorted(m for m in METHODS if m != "two-level-alt"),
                            default="hts-cluster", help="clustering pipeline for --mode multilevel")
    clustering.add_argument("--gamma", type=float, default=1.0, help="Soft-DTW smoothing (default: 1.0)")
    clustering.add_argument("--band", type=int, default=None, help="Soft-DTW band width")
    clustering.add_argument("--epsilon", type=float, default=0.0,
                            help="Sinkhorn regularization; 0 solves exactly (default: 0)")
    clustering.add_argument("--merge-eps", type=float, default=None, help="merge clusters closer than this")
    clustering.add_argument("--remove-eps", type=int, default=None, help="remove clusters this small")
    clustering.add_argument("--postprocess", action="store_true", help="merge/remove with default thresholds")
    clustering.add_argument("--max-outer-iter", type=int, default=100)
    clustering.add_argument("--support-size", type=int, default=None, help="barycenter support size")
    clustering.add_argument("--fuzziness", type=float, default=2.0, help="fuzzifier m > 1 (default: 2.0)")

    parser = _Parser(
        prog="htscluster",
        description="Hierarchical time series clustering and cluster-accelerated forecasting.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="generate the synthetic ARMA benchmark")
    p.add_argument("--preset", choices=sorted(PRESETS), default="two-level")
    p.add_argument("--offsets", type=float, nargs="+", default=None)
    p.add_argument("--instances-per-cluster", type=int, default=None)
    p.add_argument("--length-range", type=int, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--branching", type=_int_list, default=None, help="e.g. 3,3,2")
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--burnin", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", parents=[common, clustering], help="cluster every level of a dataset")
    p.add_argument("--input", help="dataset (.json or .csv)")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("evaluate", parents=[common, clustering], help="NMI/AMI/ARI against true labels")
    p.add_argument("--input", help="dataset (.json or .csv)")
    p.add_argument("--labels", help="labels sidecar written by simulate")
    p.add_argument("--model", default=None, help="score this model instead of clustering")
    p.add_argument("--methods", nargs="+", default=None, help="pipelines to compare")
    p.add_argument("--repeats", type=int, default=1, help="seeds per method (default: 1)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("forecast", parents=[common, clustering], help="cluster-accelerated forecasting")
    p.add_argument("--input", help="dataset (.json or .csv)")
    p.add_argument("--horizon", type=int, default=None, help="steps held out (default: last 20%%)")
    p.add_argument("--forecaster", choices=sorted(FORECASTERS), default="ar2")
    p.add_argument("--model", default=None, help="model fitted on the history part")
    p.add_argument("--baseline", choices=["none", "per-series"], default="none")
    p.set_defaults(func=cmd_forecast)
    return parser


# checked after --config is merged, so a config file can supply them
REQUIRED = {
    "simulate": (),
    "cluster": ("input",),
    "evaluate": ("input", "labels"),
    "forecast": ("input",),
}


def parse_args(parser: _Parser, argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse twice when ``--config`` is given: config values become subcommand defaults,
    so explicit flags still win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = load_config_file(args.config)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known - {"config"})
    if unknown:
        raise UsageError(f"unknown keys in {args.config}: {unknown}", {"keys": unknown})
    sub.set_defaults(**values)
    args = parser.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
        missing = [f"--{name}" for name in REQUIRED[args.command] if getattr(args, name) is None]
        if missing:
            raise UsageError(f"{args.command}: missing required options {missing}")
        configure_logging(args.verbose - args.quiet)
        return args.func(args)
    except HtsError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True, default=str), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        err = UsageError(f"{exc.filename or ''}: {exc.strerror}".strip(": "))
        print(json.dumps(err.to_dict(), sort_keys=True), file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
