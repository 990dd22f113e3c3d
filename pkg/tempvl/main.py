"""Command-line entry point: train, eval, gradcheck, sweep and exports."""
import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tempvl.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_raw_config,
    parse_override,
    settings,
    validate_run_config,
)
from tempvl.core import tensor as T
from tempvl.core.gradcheck import run_gradient_suite
from tempvl.models import TextMergeStrategy, VideoMergeStrategy
from tempvl.services import merging
from tempvl.services.encoders import TVLModel
from tempvl.services.evaluation import Evaluator, export_similarity_heatmap
from tempvl.services.synthdata import generate_batch, stack_frames
from tempvl.services.trainer import run
from tempvl.storage.checkpoints import CheckpointError, load_checkpoint, restore_parameters

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

# public sweep axis -> dotted config path
SWEEP_AXES = {
    "video_merge.strategy": "train.video_merge.strategy",
    "text_merge.strategy": "train.text_merge",
    "train.beta": "train.beta",
    "model.n_layers_fusion": "model.n_layers_fusion",
    "video_merge.K": "train.video_merge.K",
    "video_merge.K_p_max": "train.video_merge.K_p_max",
}

SWEEP_METRICS = [
    "vtc", "mlm", "vl", "tl", "total", "t2v_r1", "v2t_r1", "boundary_acc", "mean_iou",
    "cls_match_acc", "span_match_acc", "alignment_rate",
]


def configure_logging() -> None:
    level = logging.INFO if settings.debug else getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


# ---------------------------------------------------------------------------
# Configuration helpers
# ---------------------------------------------------------------------------

def resolve_config(
    config_path: Optional[str],
    overrides: Sequence[str],
    checkpoint: Optional[str] = None,
    require_output_dir: bool = True,
) -> RunConfig:
    """File config, else the config embedded in a checkpoint, then ``--set`` overrides."""
    if config_path is not None:
        raw = load_raw_config(config_path)
    elif checkpoint is not None:
        raw = load_checkpoint(Path(checkpoint)).config or {}
    else:
        raw = {}
    raw = apply_overrides(deepcopy(raw), overrides)
    if not require_output_dir:
        raw.setdefault("output_dir", settings.runs_root)
    return validate_run_config(raw)


def load_model(config: RunConfig, checkpoint: Optional[str]) -> TVLModel:
    model = TVLModel(config.model, seed=config.train.seed)
    if checkpoint is not None:
        restore_parameters(dict(model.named_parameters()), load_checkpoint(Path(checkpoint)).params)
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args.set)
    result = run(config, resume_from=Path(args.resume) if args.resume else None)
    print(json.dumps({"checkpoint": str(result.checkpoint), "metrics": str(result.metrics)}, indent=2))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args.set, checkpoint=args.checkpoint, require_output_dir=False)
    model = load_model(config, args.checkpoint)
    report = Evaluator(config, split_seed=args.split_seed).evaluate(model)
    summary: Dict[str, Any] = {"split_seed": report.split_seed, **report.summary()}
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_gradient_suite(tolerance=args.tolerance, seed=args.seed)
    failed = [r for r in reports if not r.passed]
    print(json.dumps(
        {
            "passed": not failed,
            "cases": {r.name: {"passed": r.passed, "max_rel_error": r.max_rel_error, "n_checked": r.n_checked}
                      for r in reports},
        },
        indent=2,
    ))
    for report in failed:
        for failure in report.failures:
            print(
                f"FAIL {report.name}: {failure.tensor}{list(failure.index)} {failure.reason} "
                f"analytic={failure.analytic:.6e} numeric={failure.numeric:.6e} rel_err={failure.rel_error:.3e}",
                file=sys.stderr,
            )
    return EXIT_OK if not failed else EXIT_FAILURE


def parse_sweep(axis: str, values: Sequence[str]) -> Tuple[List[str], List[List[Any]]]:
    """``--axis a,b --values 1:2 3:4`` -> (["a", "b"], [[1, 2], [3, 4]])."""
    axes = [a.strip() for a in axis.split(",") if a.strip()]
    unknown = [a for a in axes if a not in SWEEP_AXES]
    if unknown or not axes:
        raise ConfigError(f"unknown sweep axis {unknown or axis!r}; choose from {sorted(SWEEP_AXES)}", unknown)
    points = []
    for value in values:
        parts = value.split(":")
        if len(parts) != len(axes):
            raise ConfigError(f"sweep value '{value}' needs {len(axes)} ':'-separated parts")
        points.append([parse_override(f"v={p}")[1] for p in parts])
    if not points:
        raise ConfigError("sweep needs at least one value")
    return axes, points


def _sweep_slug(axes: Sequence[str], point: Sequence[Any]) -> str:
    return "__".join(f"{a}={v}" for a, v in zip(axes, point)).replace("/", "_")


def _sweep_one(raw: Dict[str, Any]) -> Dict[str, Any]:
    config = validate_run_config(raw)
    result = run(config)
    final = result.history[-1] if result.history else None
    report = result.reports.get(config.train.steps)
    row: Dict[str, Any] = {}
    if final is not None:
        row.update({k: getattr(final, k) for k in ("vtc", "mlm", "vl", "tl", "total")})
    if report is not None:
        summary = report.summary()
        row.update({k: summary.get(k) for k in SWEEP_METRICS if k in summary})
    return row


def cmd_sweep(args: argparse.Namespace) -> int:
    axes, points = parse_sweep(args.axis, args.values)
    base = apply_overrides(load_raw_config(args.config), args.set)
    root = Path(base.get("output_dir") or settings.runs_root)
    raws = []
    for point in points:
        raw = apply_overrides(deepcopy(base), [f"{SWEEP_AXES[a]}={json.dumps(v)}" for a, v in zip(axes, point)])
        raw["output_dir"] = str(root / _sweep_slug(axes, point))
        validate_run_config(raw)
        raws.append(raw)

    logger.info(f"Sweep over {axes}: {len(points)} runs" + (f", {args.parallel} workers" if args.parallel else ""))
    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_sweep_one, raws))
    else:
        rows = [_sweep_one(raw) for raw in raws]

    out = root / "sweep.csv"
    root.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(axes + SWEEP_METRICS)
        for point, row in zip(points, rows):
            cells = [v if not isinstance(v, float) else repr(v) for v in point]
            writer.writerow(cells + ["" if row.get(k) is None else repr(float(row[k])) for k in SWEEP_METRICS])
    print(json.dumps({"sweep": str(out), "runs": len(rows)}, indent=2))
    return EXIT_OK


def cmd_export_plan(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args.set, checkpoint=args.checkpoint, require_output_dir=False)
    pairs = generate_batch(config.data, config.train.batch_size, args.seed)
    video_ids = [p.video_id for p in pairs]
    texts = [p.text for p in pairs]
    text_ids = [t.text_id for t in texts]
    strategy = args.strategy
    t = config.model.frames_per_video

    if strategy in (s.value for s in TextMergeStrategy):
        plan = merging.plan_text_merge(TextMergeStrategy(strategy), texts, args.seed, config.model.max_merged_len, video_ids)
    elif strategy == VideoMergeStrategy.SHUFFLING.value:
        plan = merging.plan_video_shuffle(video_ids, t, args.seed, text_ids)
    else:
        merge = config.train.video_merge.model_copy(update={"strategy": VideoMergeStrategy(strategy)})
        similarity = None
        if merge.strategy == VideoMergeStrategy.HARD_SAMPLING:
            model = load_model(config, args.checkpoint)
            with T.no_grad():
                embeddings = model.project_video(model.encode_videos(stack_frames(pairs)))
            similarity = merging.compute_video_similarity(embeddings).data
        query = args.query or text_ids[0]
        plan = merging.plan_video_sample(video_ids, t, query, merge, args.seed, similarity, text_ids)

    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(plan.model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write plan to {out}: {e}") from e
    logger.info(f"{strategy} plan for seed {args.seed} written to {out}")
    return EXIT_OK


def cmd_export_heatmap(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args.set, checkpoint=args.checkpoint, require_output_dir=False)
    model = load_model(config, args.checkpoint)
    evaluator = Evaluator(config, split_seed=args.split_seed)
    pairs = generate_batch(config.data, config.train.batch_size, evaluator.split_seed)
    video_ids = [p.video_id for p in pairs]
    text_ids = [p.text.text_id for p in pairs]
    plan = merging.plan_video_shuffle(video_ids, config.model.frames_per_video, evaluator.split_seed, text_ids)
    with T.no_grad():
        frames = model.encode_videos(stack_frames(pairs))
        merged = merging.apply_video_plans(frames, [plan], video_ids)
        frame_emb = model.project_frames(merged).data[0]
        words, _ = model.encode_texts([p.text for p in pairs])
        text_emb = model.project_text(words[:, 0, :]).data
    csv_path, sidecar = export_similarity_heatmap(frame_emb, text_emb, Path(args.out), plan.boundaries)
    print(json.dumps({"heatmap": str(csv_path), "boundaries": str(sidecar)}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--config", required=required, help="TOML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempvl", description="Text-video localization pre-training on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and write metrics, checkpoints and a config echo")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a held-out split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--out", help="also write the full report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss path")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="one training run per axis value, combined CSV")
    _add_config_args(p)
    p.add_argument("--axis", required=True, help=f"one of {sorted(SWEEP_AXES)}, or two joined by ','")
    p.add_argument("--values", nargs="+", required=True, help="values; paired axes use v1:v2")
    p.add_argument("--parallel", type=int, default=0, help="worker processes (default: sequential)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-plan", help="write a merge plan as JSON")
    _add_config_args(p)
    p.add_argument("--strategy", required=True,
                   choices=[s.value for s in VideoMergeStrategy] + [s.value for s in TextMergeStrategy])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--query", help="query text id for Sampling/HardSampling")
    p.add_argument("--checkpoint", help="model used for HardSampling similarities")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plan)

    p = sub.add_parser("export-heatmap", help="write a frame-text similarity CSV and boundary sidecar")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_heatmap)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ValueError, FloatingPointError) as e:
        logger.error(f"Command '{args.command}' failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Unexpected error in '{args.command}': {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
