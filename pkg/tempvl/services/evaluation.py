"""Retrieval recall, boundary localization metrics and similarity exports."""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from tempvl.config import RunConfig
from tempvl.core import tensor as T
from tempvl.core.tensor import ShapeError, Tensor
from tempvl.models import (
    EvalReport,
    LocalizationResult,
    MergePlan,
    RetrievalResult,
    Span,
    TextMergeStrategy,
    VideoMergeStrategy,
)
from tempvl.services import merging
from tempvl.services.encoders import TVLModel
from tempvl.services.objectives import moment_loss_batch
from tempvl.services.synthdata import SeedLedger, SyntheticPair, generate_batch, stack_frames

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)
IOU_THRESHOLDS = (0.3, 0.5, 0.7)
_EVAL_STREAM = 0xE7A1

ArrayLike = Union[np.ndarray, Tensor]


def _array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def recall_at_k(sim: ArrayLike, ground_truth, ks: Iterable[int] = DEFAULT_KS) -> RetrievalResult:
    """Fraction of queries whose ground-truth item ranks within the top k.

    ``ground_truth`` maps query row -> gallery column (a mapping or a sequence).
    Ties are broken in favour of the lower gallery index.
    """
    sim = _array(sim)
    if sim.ndim != 2:
        raise ShapeError(f"similarity must be [Q x G], got {sim.shape}")
    q, g = sim.shape
    truth = dict(ground_truth) if isinstance(ground_truth, Mapping) else dict(enumerate(ground_truth))
    if sorted(truth) != list(range(q)):
        raise ValueError(f"ground truth must name exactly one gallery item for each of {q} queries")
    ks = sorted(set(int(k) for k in ks))
    for k in ks:
        if not 1 <= k <= g:
            raise ValueError(f"k={k} outside 1..{g} for a gallery of {g}")

    ranks = np.empty(q, dtype=np.int64)
    columns = np.arange(g)
    for row in range(q):
        gt = truth[row]
        if not 0 <= gt < g:
            raise IndexError(f"ground truth {gt} out of range for gallery of {g}")
        score = sim[row, gt]
        ranks[row] = np.sum(sim[row] > score) + np.sum((sim[row] == score) & (columns < gt))
    return RetrievalResult(recall_at={k: float(np.mean(ranks < k)) for k in ks}, n_queries=q)


def temporal_iou(a: Span, b: Span) -> float:
    """IoU of two inclusive index intervals."""
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]) + 1)
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def boundary_metrics(
    predictions: Sequence[Span], labels: Sequence[Span], thresholds: Sequence[float] = IOU_THRESHOLDS
) -> LocalizationResult:
    if not predictions:
        raise ValueError("boundary_metrics needs at least one prediction")
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    for st, ed in list(predictions) + list(labels):
        if st > ed:
            raise ValueError(f"interval ({st}, {ed}) has start after end")
    pred = np.array(predictions, dtype=np.int64)
    gold = np.array(labels, dtype=np.int64)
    start = pred[:, 0] == gold[:, 0]
    end = pred[:, 1] == gold[:, 1]
    ious = np.array([temporal_iou(tuple(p), tuple(l)) for p, l in zip(pred, gold)])
    return LocalizationResult(
        start_acc=float(np.mean(start)),
        end_acc=float(np.mean(end)),
        both_acc=float(np.mean(start & end)),
        mean_iou=float(np.mean(ious)),
        recall_at_iou={float(th): float(np.mean(ious >= th)) for th in thresholds},
        n_queries=len(pred),
    )


def decode_boundary(r_vl: ArrayLike) -> Span:
    """argmax of r0[st] + r1[ed] over st <= ed in one prefix-max pass.

    Ties go to the smaller end index, then the smaller start index.
    """
    r = _array(r_vl)
    if r.ndim != 2 or r.shape[1] != 2 or r.shape[0] < 1:
        raise ShapeError(f"expected [M x 2] boundary logits, got {r.shape}")
    best_start = 0
    best = (-math.inf, 0, 0)
    for ed in range(r.shape[0]):
        if r[ed, 0] > r[best_start, 0]:
            best_start = ed
        score = r[best_start, 0] + r[ed, 1]
        if score > best[0]:
            best = (score, best_start, ed)
    return best[1], best[2]


def alignment_rate(sim: ArrayLike, boundaries: Sequence[Span]) -> float:
    """Fraction of text columns whose mean in-boundary frame similarity beats
    the mean similarity of the frames outside the boundary."""
    sim = _array(sim)
    m, b = sim.shape
    if len(boundaries) != b:
        raise ValueError(f"{len(boundaries)} boundaries for {b} text columns")
    hits = 0
    for col, (st, ed) in enumerate(boundaries):
        inside = np.zeros(m, dtype=bool)
        inside[st:ed + 1] = True
        if inside.all():
            raise ValueError(f"boundary ({st}, {ed}) leaves no frames outside it")
        hits += sim[inside, col].mean() > sim[~inside, col].mean()
    return hits / b


def cosine_matrix(frames: ArrayLike, texts: ArrayLike) -> np.ndarray:
    f, t = _array(frames), _array(texts)
    f = f / np.linalg.norm(f, axis=-1, keepdims=True)
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    return f @ t.T


def sidecar_path(out_path: Path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + ".boundaries.json")


def export_similarity_heatmap(
    frame_tokens: ArrayLike,
    text_tokens: ArrayLike,
    out_path: Path,
    boundaries: Optional[Mapping[str, Span]] = None,
) -> Tuple[Path, Path]:
    """Write the [M x B] frame-text cosine matrix (no header, one frame per row)
    and a sidecar ``{"boundaries": {text_id: [st, ed]}}`` JSON."""
    out_path = Path(out_path)
    sim = cosine_matrix(frame_tokens, text_tokens)
    sidecar = sidecar_path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            for row in sim:
                writer.writerow([repr(float(v)) for v in row])
        payload = {"boundaries": {k: list(v) for k, v in (boundaries or {}).items()}}
        sidecar.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    except OSError as e:
        logger.error(f"Error writing heatmap {out_path}: {e}", exc_info=True)
        raise OSError(f"cannot write heatmap to {out_path}: {e}") from e
    logger.info(f"Heatmap written: {out_path} ({sim.shape[0]}x{sim.shape[1]})")
    return out_path, sidecar


class Evaluator:
    """Held-out evaluation on synthetic data drawn from ``split_seed`` only.

    The same split seed always yields the same gallery, merged batches and
    merge plans, so every evaluation of a run scores one fixed held-out set.
    """

    def __init__(self, config: RunConfig, split_seed: Optional[int] = None, ledger: Optional[SeedLedger] = None):
        self.config = config
        self.split_seed = config.train.eval_split_seed if split_seed is None else split_seed
        self.ledger = ledger

    def _rng(self, split_seed: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([split_seed, _EVAL_STREAM]))

    def _draw_seed(self, rng: np.random.Generator) -> int:
        return int(rng.integers(0, 2**62))

    def _data_seed(self, rng: np.random.Generator) -> int:
        seed = self._draw_seed(rng)
        return self.ledger.record("heldout", seed) if self.ledger is not None else seed

    # -- retrieval -----------------------------------------------------------

    def retrieval(self, model: TVLModel, pairs: Sequence[SyntheticPair]) -> Tuple[RetrievalResult, RetrievalResult]:
        with T.no_grad():
            frames = model.encode_videos(stack_frames(pairs))
            words, _ = model.encode_texts([p.text for p in pairs])
            video_emb, text_emb = model.project_for_contrastive(frames, words[:, 0, :])
        sim = text_emb.data @ video_emb.data.T
        g = len(pairs)
        ks = sorted({min(k, g) for k in DEFAULT_KS} | {g})
        truth = list(range(g))
        return recall_at_k(sim, truth, ks), recall_at_k(sim.T, truth, ks)

    # -- localization --------------------------------------------------------

    def _video_plans(
        self, model: TVLModel, pairs: Sequence[SyntheticPair], frames: Tensor, rng: np.random.Generator
    ) -> List[MergePlan]:
        merge = self.config.train.video_merge
        video_ids = [p.video_id for p in pairs]
        text_ids = [p.text.text_id for p in pairs]
        t = self.config.model.frames_per_video
        if merge.strategy == VideoMergeStrategy.SHUFFLING:
            return [merging.plan_video_shuffle(video_ids, t, self._draw_seed(rng), text_ids) for _ in pairs]
        similarity = None
        if merge.strategy == VideoMergeStrategy.HARD_SAMPLING:
            similarity = merging.compute_video_similarity(model.project_video(frames)).data
        return [
            merging.plan_video_sample(video_ids, t, tid, merge, self._draw_seed(rng), similarity, text_ids)
            for tid in text_ids
        ]

    def localize(
        self, model: TVLModel, pairs: Sequence[SyntheticPair], rng: np.random.Generator
    ) -> Tuple[List[Span], List[Span], float]:
        """Decoded and true boundaries for every query of one batch, plus the mean moment loss."""
        texts = [p.text for p in pairs]
        video_ids = [p.video_id for p in pairs]
        with T.no_grad():
            frames = model.encode_videos(stack_frames(pairs))
            words, mask = model.encode_texts(texts)
            plans = self._video_plans(model, pairs, frames, rng)
            merged = merging.apply_video_plans(frames, plans, video_ids)
            fused = model.fuse(model.build_batch(merged, words, mask))
            m = merged.shape[1]
            logits = model.boundary_head(fused[:, :m, :])
        labels = [plan.boundaries[text.text_id] for plan, text in zip(plans, texts)]
        with T.no_grad():
            loss = moment_loss_batch(logits, labels).item()
        predictions = [decode_boundary(logits.data[i]) for i in range(len(pairs))]
        return predictions, labels, loss

    def match(self, model: TVLModel, pairs: Sequence[SyntheticPair], rng: np.random.Generator) -> float:
        """Accuracy of finding the paired sentence in merged text, scored the way the run trains.

        MergeCLS: argmax of the match head over CLS slots. MergeWords: the
        text-span head's decoded span must equal the sentence's span exactly.
        """
        strategy = self.config.train.text_merge
        texts = [p.text for p in pairs]
        video_ids = [p.video_id for p in pairs]
        plans = [
            merging.plan_text_merge(strategy, texts, self._draw_seed(rng), video_ids=video_ids)
            for _ in pairs
        ]
        with T.no_grad():
            frames = model.encode_videos(stack_frames(pairs))
            words, _ = model.encode_texts(texts)
            merged = merging.apply_text_plans(words, plans, [t.text_id for t in texts])
            b, n, _ = merged.shape
            fused = model.fuse(model.build_batch(frames, merged, np.ones((b, n), dtype=bool)))
            word_slots = fused[:, frames.shape[1]:, :]
            if strategy == TextMergeStrategy.MERGE_CLS:
                logits = model.match_head(word_slots).data
            else:
                logits = model.text_span_head(word_slots).data
        if strategy == TextMergeStrategy.MERGE_CLS:
            picked = np.argmax(logits, axis=-1)
            truth = np.array([plan.matched_index[v] for plan, v in zip(plans, video_ids)])
            return float(np.mean(picked == truth))
        hits = [decode_boundary(logits[i]) == tuple(plan.spans[v]) for i, (plan, v) in enumerate(zip(plans, video_ids))]
        return float(np.mean(hits))

    def similarity_map(
        self, model: TVLModel, pairs: Sequence[SyntheticPair], seed: int
    ) -> Tuple[np.ndarray, MergePlan]:
        """[B*T x B] cosine between projected frames of a shuffled merge and projected captions."""
        video_ids = [p.video_id for p in pairs]
        text_ids = [p.text.text_id for p in pairs]
        plan = merging.plan_video_shuffle(video_ids, self.config.model.frames_per_video, seed, text_ids)
        with T.no_grad():
            frames = model.encode_videos(stack_frames(pairs))
            merged = merging.apply_video_plans(frames, [plan], video_ids)
            frame_emb = model.project_frames(merged).data[0]
            words, _ = model.encode_texts([p.text for p in pairs])
            text_emb = model.project_text(words[:, 0, :]).data
        return cosine_matrix(frame_emb, text_emb), plan

    # -- full report -----------------------------------------------------------

    def evaluate(self, model: TVLModel, split_seed: Optional[int] = None) -> EvalReport:
        split_seed = self.split_seed if split_seed is None else split_seed
        cfg = self.config
        for name, norm in model.parameter_norms().items():
            if not math.isfinite(norm):
                raise FloatingPointError(f"parameter '{name}' has a non-finite norm")

        rng = self._rng(split_seed)
        gallery = generate_batch(cfg.data, cfg.train.eval_gallery_size, self._data_seed(rng))
        t2v, v2t = self.retrieval(model, gallery)

        predictions: List[Span] = []
        labels: List[Span] = []
        losses: List[float] = []
        match_scores: List[float] = []
        alignment: List[float] = []
        for _ in range(cfg.train.eval_batches):
            pairs = generate_batch(cfg.data, cfg.train.batch_size, self._data_seed(rng))
            pred, gold, loss = self.localize(model, pairs, rng)
            predictions += pred
            labels += gold
            losses.append(loss)
            match_scores.append(self.match(model, pairs, rng))
            sim, plan = self.similarity_map(model, pairs, self._draw_seed(rng))
            alignment.append(alignment_rate(sim, [plan.boundaries[p.text.text_id] for p in pairs]))

        localization = boundary_metrics(predictions, labels).model_copy(
            update={"moment_loss": float(np.mean(losses))}
        )
        match_key = "cls_match_acc" if cfg.train.text_merge == TextMergeStrategy.MERGE_CLS else "span_match_acc"
        report = EvalReport(
            text_to_video=t2v,
            video_to_text=v2t,
            localization=localization,
            alignment_rate=float(np.mean(alignment)),
            split_seed=split_seed,
            **{match_key: float(np.mean(match_scores))},
        )
        logger.info(
            f"Evaluation (split {split_seed}): R@1 {report.r1:.3f}, "
            f"boundary acc {localization.both_acc:.3f}, IoU {localization.mean_iou:.3f}, "
            f"{match_key} {getattr(report, match_key):.3f}"
        )
        return report
