"""Deterministic pre-training loop over the combined objective."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from tempvl.config import RunConfig, write_config_echo
from tempvl.core import tensor as T
from tempvl.core.tensor import Tensor
from tempvl.models import EvalReport, LossBreakdown, MergePlan, TextMergePlan, VideoMergeStrategy
from tempvl.services import merging
from tempvl.services.encoders import TVLModel
from tempvl.services.evaluation import Evaluator
from tempvl.services.objectives import (
    contrastive_term,
    mlm_loss,
    text_localization_loss,
    total_loss,
    video_localization_loss,
    weighted_objective,
)
from tempvl.services.optimizer import OptimizerState, adamw_step, clip_grad_norm, cosine_lr
from tempvl.services.synthdata import SeedLedger, SyntheticPair, generate_batch, stack_frames
from tempvl.storage.checkpoints import (
    checkpoint_path,
    load_checkpoint,
    remove_checkpoints,
    restore_parameters,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "lr", "vtc", "mlm", "vl", "tl", "total", "r1", "boundary_acc", "cls_match_acc"]
METRICS_FILE = "metrics.csv"

# stream codes mixed with the master seed
STREAM_CODES = {"init": 1, "data": 2, "masking": 3, "merging": 4}


class RngStreams:
    """One generator per purpose, each from ``SeedSequence([seed, code])``."""

    def __init__(self, seed: int):
        self.seed = seed
        self.generators: Dict[str, np.random.Generator] = {
            name: np.random.default_rng(np.random.SeedSequence([seed, code])) for name, code in STREAM_CODES.items()
        }

    @property
    def init(self) -> np.random.Generator:
        return self.generators["init"]

    @property
    def data(self) -> np.random.Generator:
        return self.generators["data"]

    @property
    def masking(self) -> np.random.Generator:
        return self.generators["masking"]

    @property
    def merging(self) -> np.random.Generator:
        return self.generators["merging"]

    def state(self) -> Dict[str, Any]:
        return {name: g.bit_generator.state for name, g in self.generators.items()}

    def restore(self, state: Dict[str, Any]) -> None:
        for name, g in self.generators.items():
            g.bit_generator.state = state[name]


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**62))


@dataclass
class RunResult:
    run_dir: Path
    checkpoint: Path
    metrics: Path
    history: List[LossBreakdown] = field(default_factory=list)
    reports: Dict[int, EvalReport] = field(default_factory=dict)


class Trainer:
    """
    Owns the model, optimizer state and RNG streams of one run.

    Each step draws a fresh synthetic batch and builds three batches from it:
    a plain batch (contrastive and MLM terms), a merged-video batch (moment
    localization) and a merged-text batch (text localization). Every batch
    runs its own encoder forward pass.
    """

    def __init__(self, config: RunConfig):
        """Initialize model, optimizer and streams from ``config.train.seed``."""
        self.config = config
        self.streams = RngStreams(config.train.seed)
        self.model = TVLModel(config.model, rng=self.streams.init)
        self.params: Dict[str, Tensor] = dict(self.model.named_parameters())
        self.optimizer = OptimizerState.create(self.params)
        self.ledger = SeedLedger()
        self.evaluator = Evaluator(config, ledger=self.ledger)
        self.step = 0
        self.last_lr = 0.0
        self.last_grad_norm = 0.0
        self.last_grads: Dict[str, np.ndarray] = {}

    # -- batches ---------------------------------------------------------------

    def sample_batch(self) -> List[SyntheticPair]:
        seed = self.ledger.record("train", _draw_seed(self.streams.data))
        return generate_batch(self.config.data, self.config.train.batch_size, seed)

    def video_plans(self, pairs: Sequence[SyntheticPair]) -> List[MergePlan]:
        """One merged video per query caption, from the merging stream."""
        merge = self.config.train.video_merge
        video_ids = [p.video_id for p in pairs]
        text_ids = [p.text.text_id for p in pairs]
        t = self.config.model.frames_per_video
        if merge.strategy == VideoMergeStrategy.SHUFFLING:
            return [merging.plan_video_shuffle(video_ids, t, _draw_seed(self.streams.merging), text_ids) for _ in pairs]
        similarity = None
        if merge.strategy == VideoMergeStrategy.HARD_SAMPLING:
            with T.no_grad():
                frames = self.model.encode_videos(stack_frames(pairs))
                similarity = merging.compute_video_similarity(self.model.project_video(frames)).data
        return [
            merging.plan_video_sample(video_ids, t, tid, merge, _draw_seed(self.streams.merging), similarity, text_ids)
            for tid in text_ids
        ]

    def text_plans(self, pairs: Sequence[SyntheticPair]) -> List[TextMergePlan]:
        """One merged text per query video."""
        texts = [p.text for p in pairs]
        video_ids = [p.video_id for p in pairs]
        return [
            merging.plan_text_merge(
                self.config.train.text_merge,
                texts,
                _draw_seed(self.streams.merging),
                self.config.model.max_merged_len,
                video_ids,
            )
            for _ in pairs
        ]

    # -- one step --------------------------------------------------------------

    def losses(self, pairs: Sequence[SyntheticPair]) -> Dict[str, Tensor]:
        """All four loss terms for one synthetic batch."""
        cfg = self.config.train
        raw = stack_frames(pairs)
        texts = [p.text for p in pairs]
        video_ids = [p.video_id for p in pairs]

        temperature = self.model.temperature(cfg.learnable_temperature, cfg.temperature_init)
        terms = {"vtc": contrastive_term(self.model, raw, texts, temperature)}
        terms["mlm"], _ = mlm_loss(self.model, raw, texts, cfg.mlm, self.streams.masking)

        video_plans = self.video_plans(pairs)
        text_plans = self.text_plans(pairs)
        if cfg.beta == 0.0:
            # still reported, never differentiated
            with T.no_grad():
                terms["vl"] = video_localization_loss(self.model, raw, video_ids, texts, video_plans)
                terms["tl"] = text_localization_loss(self.model, raw, video_ids, texts, text_plans)
        else:
            terms["vl"] = video_localization_loss(self.model, raw, video_ids, texts, video_plans)
            terms["tl"] = text_localization_loss(self.model, raw, video_ids, texts, text_plans)
        return terms

    def train_step(self) -> LossBreakdown:
        """
        Run one optimisation step.

        Returns:
            LossBreakdown of the step's batch, measured before the update
        """
        cfg = self.config.train
        step = self.step + 1
        lr = cosine_lr(step, cfg)
        pairs = self.sample_batch()
        terms = self.losses(pairs)
        breakdown = total_loss(terms["vtc"], terms["mlm"], terms["vl"], terms["tl"], cfg.alpha, cfg.beta)

        self.model.params.zero_grad()
        objective = weighted_objective(terms["vtc"], terms["mlm"], terms["vl"], terms["tl"], cfg.alpha, cfg.beta)
        T.backward(objective)
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in self.params.items()
        }
        grads, norm = clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(self.params, grads, self.optimizer, lr, cfg)

        self.step = step
        self.last_lr = lr
        self.last_grad_norm = norm
        self.last_grads = grads
        logger.debug(
            f"step {step}: lr {lr:.3e} total {breakdown.total:.4f} "
            f"(vtc {breakdown.vtc:.4f}, mlm {breakdown.mlm:.4f}, vl {breakdown.vl:.4f}, tl {breakdown.tl:.4f}) "
            f"grad norm {norm:.3f}"
        )
        return breakdown

    def evaluate(self) -> EvalReport:
        return self.evaluator.evaluate(self.model)

    # -- persistence -------------------------------------------------------------

    def save(self, run_dir: Path) -> Path:
        return save_checkpoint(
            checkpoint_path(run_dir, self.step),
            self.params,
            self.step,
            config=self.config.model_dump(mode="json"),
            optimizer=self.optimizer.to_dict(),
            rng={"streams": self.streams.state(), "ledger": self.ledger.to_dict()},
        )

    def restore(self, path: Path) -> None:
        """Resume parameters, optimizer moments, RNG streams and step from a checkpoint."""
        checkpoint = load_checkpoint(path)
        restore_parameters(self.params, checkpoint.params)
        if checkpoint.optimizer is not None:
            self.optimizer = OptimizerState.from_dict(checkpoint.optimizer)
        if checkpoint.rng is not None:
            self.streams.restore(checkpoint.rng["streams"])
            self.ledger = SeedLedger.from_dict(checkpoint.rng.get("ledger", {}))
            self.evaluator.ledger = self.ledger
        self.step = checkpoint.step
        logger.info(f"Resumed from {path} at step {self.step}")


def _format(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def metric_row(step: int, lr: float, breakdown: LossBreakdown, report: Optional[EvalReport]) -> List[str]:
    row = [str(step), _format(lr), _format(breakdown.vtc), _format(breakdown.mlm), _format(breakdown.vl),
           _format(breakdown.tl), _format(breakdown.total)]
    if report is None:
        return row + ["", "", ""]
    return row + [_format(report.r1), _format(report.localization.both_acc), _format(report.cls_match_acc)]


def _kept_rows(metrics: Path, up_to: int) -> List[List[str]]:
    if not metrics.exists():
        return []
    with metrics.open("r", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return [row for row in rows[1:] if row and int(row[0]) <= up_to]


def run(config: RunConfig, resume_from: Optional[Path] = None) -> RunResult:
    """
    Train for ``config.train.steps`` steps with periodic held-out evaluation.

    Writes ``config.json``, ``metrics.csv`` and ``ckpt_<step>.json`` under
    ``config.output_dir``; evaluation steps also checkpoint. Existing outputs
    are overwritten and checkpoints later than the starting step are removed.

    Args:
        config: validated run configuration
        resume_from: checkpoint to continue from; its trace is reproduced exactly

    Returns:
        RunResult with the final checkpoint and metrics paths
    """
    run_dir = Path(config.output_dir)
    cfg = config.train
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_config_echo(config, run_dir)
    except OSError as e:
        logger.error(f"Error preparing run directory {run_dir}: {e}", exc_info=True)
        raise OSError(f"cannot prepare run directory {run_dir}: {e}") from e

    trainer = Trainer(config)
    metrics = run_dir / METRICS_FILE
    kept: List[List[str]] = []
    if resume_from is not None:
        trainer.restore(Path(resume_from))
        kept = _kept_rows(metrics, trainer.step)
    # checkpoints past the starting step belong to an earlier trajectory
    remove_checkpoints(run_dir, after_step=trainer.step if resume_from is not None else -1)

    logger.info(
        f"Starting run in {run_dir}: {cfg.steps} steps, batch {cfg.batch_size}, "
        f"video merge {cfg.video_merge.strategy.value}, text merge {cfg.text_merge.value}, "
        f"{trainer.model.params.count()} parameters"
    )
    result = RunResult(run_dir=run_dir, checkpoint=checkpoint_path(run_dir, trainer.step), metrics=metrics)
    try:
        with metrics.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(METRIC_COLUMNS)
            writer.writerows(kept)
            if cfg.steps == 0 or trainer.step >= cfg.steps:
                result.checkpoint = trainer.save(run_dir)
            while trainer.step < cfg.steps:
                breakdown = trainer.train_step()
                result.history.append(breakdown)
                report = None
                if trainer.step % cfg.eval_every == 0 or trainer.step == cfg.steps:
                    report = trainer.evaluate()
                    result.reports[trainer.step] = report
                writer.writerow(metric_row(trainer.step, trainer.last_lr, breakdown, report))
                f.flush()
                if report is not None:
                    result.checkpoint = trainer.save(run_dir)
    except OSError as e:
        logger.error(f"Error writing run outputs in {run_dir}: {e}", exc_info=True)
        raise
    trainer.ledger.audit()
    logger.info(f"Run finished at step {trainer.step}; final checkpoint {result.checkpoint}")
    return result
