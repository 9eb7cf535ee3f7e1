"""
feasiflow command line.

    python -m feasiflow.app.main <command> [options]

Commands: synth, train, score, threshold, eval, baseline, inspect. Every command writes
its outputs plus a manifest.json into --out (default: $FEASIFLOW_OUTPUT_DIR/<command>).
Exit codes: 0 success, 2 usage, 3 data/parse, 4 numeric/training failure.
"""

import argparse
import json
import logging
import math
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pydantic
import scipy
from pydantic import BaseModel, ValidationError

from feasiflow.app import __version__
from feasiflow.app.base_dist import BaseKind
from feasiflow.app.checkpoint import checkpoint_id, load_checkpoint, save_ocsvm
from feasiflow.app.data_pipeline import (
    Label,
    LabeledDataset,
    SynthSpec,
    load_dataset,
    save_dataset,
    synth_benchmark,
)
from feasiflow.app.errors import ConfigError, FeasiflowError, UsageError
from feasiflow.app.evaluator import (
    cosine_similarity_matrix,
    covariance_distance_to_identity,
    decomposition_summary,
    evaluate_scores,
    latent_norm_score,
    read_score_report,
    roc_curve,
    score_dataset,
    scores_to_report,
    similarity_summary,
    write_latents,
    write_roc_csv,
    write_score_report,
    write_similarity_matrix,
    youden_threshold,
)
from feasiflow.app.ocsvm import (
    DEFAULT_NU,
    DEFAULT_TOL,
    ocsvm_dual_objective,
    ocsvm_feasibility_residual,
    ocsvm_fit,
    ocsvm_score_batch,
    rbf_kernel,
)
from feasiflow.app.schemas import RunManifest, ThresholdRecord, TrainConfig
from feasiflow.app.settings import (
    configure_logging,
    get_default_seed,
    get_default_threads,
    get_output_dir,
    load_config_file,
)
from feasiflow.app.trainer import train

logger = logging.getLogger("feasiflow")

MANIFEST_FILE = "manifest.json"


# ============================================================================
# HELPERS
# ============================================================================

def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def package_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.VERSION,
        "feasiflow": __version__,
    }


def resolve_config(
    model: type, args: argparse.Namespace, overrides: Dict[str, Any], defaults: Optional[Dict[str, Any]] = None
) -> BaseModel:
    """Defaults < config file < command-line flags."""
    values: Dict[str, Any] = dict(defaults or {})
    if args.config:
        values.update(load_config_file(args.config))
    values.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return model(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid {model.__name__} value for {location}: {first['msg']}") from exc


def parse_threshold(value: Optional[str]) -> Optional[float]:
    """A threshold is either a number or the path of a threshold.json written by `threshold`."""
    if value is None:
        return None
    try:
        threshold = float(value)
    except ValueError:
        path = Path(value)
        if not path.is_file():
            raise UsageError(f"threshold is neither a number nor an existing file: {value}") from None
        try:
            threshold = ThresholdRecord.model_validate_json(path.read_text(encoding="utf-8")).threshold
        except ValidationError as exc:
            raise ConfigError(f"invalid threshold file {path}") from exc
    if not math.isfinite(threshold):
        raise UsageError(f"threshold must be a finite number, got {value}")
    return threshold


class Run:
    """Per-invocation context: resolved output dir, seed, threads and the manifest."""

    def __init__(self, args: argparse.Namespace, argv: List[str]):
        self.args = args
        self.argv = argv
        self.seed = get_default_seed(args.seed)
        self.threads = get_default_threads(args.threads)
        self.out = Path(args.out) if args.out else get_output_dir() / args.command
        self.out.mkdir(parents=True, exist_ok=True)

    def finish(self, config: Dict[str, Any]) -> None:
        manifest = RunManifest(
            command=self.args.command,
            argv=self.argv,
            config=config,
            seed=self.seed,
            threads=self.threads,
            versions=package_versions(),
            created_at=datetime.now(timezone.utc).isoformat(),
        )
        write_json(self.out / MANIFEST_FILE, manifest)
        logger.info("wrote outputs to %s", self.out)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_synth(run: Run) -> None:
    args = run.args
    spec = resolve_config(SynthSpec, args, {
        "dim": args.dim, "n_id": args.n_id, "n_ood": args.n_ood,
        "n_components": args.components, "mean_radius": args.mean_radius,
        "sigma_max": args.sigma_max, "shift_distance": args.shift,
        "cov_inflation": args.inflation, "val_frac": args.val_frac, "test_frac": args.test_frac,
    })
    train_set, val_set, test_set = synth_benchmark(spec, run.seed)
    for name, data in (("train", train_set), ("val", val_set), ("test", test_set)):
        save_dataset(data, run.out / f"{name}.csv")
        logger.info("%s: %d rows (%d infeasible)", name, len(data), data.count(Label.INFEASIBLE))
    run.finish({"synth": spec.model_dump(mode="json")})


def cmd_train(run: Run) -> None:
    args = run.args
    config = resolve_config(TrainConfig, args, {
        "seed": args.seed,
        "epochs": args.epochs, "batch_size": args.batch_size, "learning_rate": args.learning_rate,
        "num_coupling_layers": args.layers, "conditioner_depth": args.depth,
        "conditioner_width": args.width, "base_kind": args.base,
        "checkpoint_every": args.checkpoint_every, "early_stop_patience": args.patience,
        "exact_kernels": True if args.exact_kernels else None,
        "progress": True if args.progress else None,
    }, defaults={"seed": run.seed})
    run.seed = config.seed
    train_set = load_dataset(args.train).training_rows()
    val_set = load_dataset(args.val) if args.val else None
    model, report = train(config, train_set, val_set, output_dir=run.out)
    write_json(run.out / "train_summary.json", report.model_dump(
        mode="json", exclude={"history": {"__all__": {"seconds"}}}
    ))
    run.finish({"train": config.model_dump(mode="json"), "train_data": args.train, "val_data": args.val,
                "checkpoint_id": checkpoint_id(report.checkpoint_path)})


def cmd_score(run: Run) -> None:
    args = run.args
    threshold = parse_threshold(args.threshold)
    model = load_checkpoint(args.checkpoint)
    ident = checkpoint_id(args.checkpoint)
    report = score_dataset(model, load_dataset(args.data), threads=run.threads, checkpoint=ident)
    if args.score == "latent":
        report = latent_norm_score(report)
    if threshold is not None:
        report = report.with_threshold(threshold)
    write_score_report(run.out / "scores.csv", report)
    run.finish({"checkpoint": args.checkpoint, "checkpoint_id": ident, "data": args.data,
                "score": args.score, "threshold": threshold})


def cmd_threshold(run: Run) -> None:
    report = read_score_report(run.args.scores)
    record = youden_threshold(report.total, report.labels)
    write_json(run.out / "threshold.json", record)
    logger.info("threshold %.6g (J=%.4f)", record.threshold, record.youden_j)
    run.finish({"scores": run.args.scores})


def cmd_eval(run: Run) -> None:
    args = run.args
    threshold = parse_threshold(args.threshold)
    report = read_score_report(args.scores)
    summary = evaluate_scores(report, threshold)
    write_roc_csv(run.out / "roc.csv", roc_curve(report.total, report.labels))
    write_json(run.out / "metrics.json", summary)
    logger.info("auroc %.6f", summary.auroc)
    run.finish({"scores": args.scores, "threshold": threshold})


def cmd_baseline(run: Run) -> None:
    args = run.args
    train_set = load_dataset(args.train).training_rows()
    test_set = load_dataset(args.test)
    nu = args.nu if args.nu is not None else DEFAULT_NU
    model = ocsvm_fit(train_set.embeddings, nu=nu, gamma=args.gamma, tol=args.tol, max_iter=args.max_iter)
    save_ocsvm(model, run.out / "ocsvm.ffck")

    report = scores_to_report(test_set.ids, test_set.labels, ocsvm_score_batch(model, test_set.embeddings, run.threads))
    write_score_report(run.out / "baseline_scores.csv", report)

    kernel = rbf_kernel(model.support_vectors, model.support_vectors, model.gamma)
    metrics: Dict[str, Any] = {
        "nu": model.nu,
        "gamma": model.gamma,
        "rho": model.rho,
        "n_support": int(model.alphas.size),
        "iterations": model.iterations,
        "dual_objective": ocsvm_dual_objective(kernel, model.alphas),
        "feasibility_residual": ocsvm_feasibility_residual(model.alphas, 1.0 / (model.nu * model.n_train)),
        "kkt_gap": model.kkt_gap,
    }
    if test_set.has_both_labels() and all(label is not None for label in test_set.labels):
        metrics.update(evaluate_scores(report).model_dump(mode="json"))
    else:
        logger.warning("test set lacks labels for both classes; skipping AUROC")
    write_json(run.out / "metrics.json", metrics)
    run.finish({"train_data": args.train, "test_data": args.test, "nu": nu, "gamma": args.gamma,
                "tol": args.tol, "max_iter": args.max_iter})


def cmd_inspect(run: Run) -> None:
    args = run.args
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    report = score_dataset(model, data, threads=run.threads)

    latents = LabeledDataset(report.latents, list(data.labels), list(data.ids))
    write_latents(run.out / "latents.csv", latents, prefix="z")
    write_latents(run.out / "inputs.csv", data, prefix="f")

    limit = min(len(data), args.max_similarity)
    ids = data.ids[:limit]
    sim_inputs = cosine_similarity_matrix(data.embeddings[:limit])
    sim_latents = cosine_similarity_matrix(report.latents[:limit])
    write_similarity_matrix(run.out / "similarity_inputs.csv", sim_inputs, ids)
    write_similarity_matrix(run.out / "similarity_latents.csv", sim_latents, ids)

    feasible = latents.feasible_only()
    summary = {
        "decomposition": decomposition_summary(report),
        "similarity_inputs": similarity_summary(sim_inputs, data.labels[:limit]),
        "similarity_latents": similarity_summary(sim_latents, data.labels[:limit]),
        "covariance_distance": None,
    }
    if len(feasible) >= 2:
        summary["covariance_distance"] = {
            "inputs": covariance_distance_to_identity(data.feasible_only().embeddings, standardize=True),
            "latents": covariance_distance_to_identity(feasible.embeddings, standardize=False),
        }
    write_json(run.out / "inspect_summary.json", summary)
    run.finish({"checkpoint": args.checkpoint, "checkpoint_id": checkpoint_id(args.checkpoint),
                "data": args.data, "max_similarity": args.max_similarity})


COMMANDS: Dict[str, Callable[[Run], None]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "threshold": cmd_threshold,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "inspect": cmd_inspect,
}


# ============================================================================
# PARSER
# ============================================================================

class CommandParser(argparse.ArgumentParser):
    """Argument errors are raised as UsageError so they print the one-line error format."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = CommandParser(add_help=False)
    common.add_argument("--config", help="key=value or .json config file (flags win)")
    common.add_argument("--seed", type=int, help="random seed (default: $FEASIFLOW_SEED or 0)")
    common.add_argument("--threads", type=int, help="worker threads (default: available CPUs)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--out", help="output directory")
    common.add_argument("--progress", action="store_true", help="show a progress bar while training")

    parser = CommandParser(prog="feasiflow", description="Normalizing-flow feasibility scoring")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic ID/OOD benchmark")
    p.add_argument("--dim", type=int)
    p.add_argument("--n-id", type=int)
    p.add_argument("--n-ood", type=int)
    p.add_argument("--components", type=int)
    p.add_argument("--mean-radius", type=float)
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--shift", type=float, help="OOD mean shift in units of sigma_max")
    p.add_argument("--inflation", type=float, help="OOD covariance inflation factor")
    p.add_argument("--val-frac", type=float)
    p.add_argument("--test-frac", type=float)

    p = sub.add_parser("train", parents=[common], help="train a flow on feasible embeddings")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--layers", type=int, help="number of coupling layers")
    p.add_argument("--depth", type=int, help="conditioner depth")
    p.add_argument("--width", type=int, help="conditioner width")
    p.add_argument("--base", choices=[kind.value for kind in BaseKind])
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--exact-kernels", action="store_true")

    p = sub.add_parser("score", parents=[common], help="score a dataset with a trained flow")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", help="number or threshold.json; adds a verdict column")
    p.add_argument("--score", choices=["flow", "latent"], default="flow")

    p = sub.add_parser("threshold", parents=[common], help="select delta on labeled validation scores")
    p.add_argument("--scores", required=True)

    p = sub.add_parser("eval", parents=[common], help="AUROC, ROC curve and confusion counts")
    p.add_argument("--scores", required=True)
    p.add_argument("--threshold", help="number or threshold.json")

    p = sub.add_parser("baseline", parents=[common], help="fit and score the one-class SVM baseline")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--nu", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--max-iter", type=int)

    p = sub.add_parser("inspect", parents=[common], help="export latents and similarity diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-similarity", type=int, default=500, help="rows included in similarity matrices")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        run = Run(args, argv)
        COMMANDS[args.command](run)
    except FeasiflowError as exc:
        print(exc.one_line(), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        error = UsageError(f"{exc.strerror or exc}: {exc.filename or ''}".strip(": "))
        print(error.one_line(), file=sys.stderr)
        return error.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
