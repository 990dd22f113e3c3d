"""Localization, contrastive and masked-language-modeling losses."""
import logging
import math
from typing import List, Sequence, Set, Tuple, Union

import numpy as np

from tempvl.config import MlmConfig
from tempvl.core import tensor as T
from tempvl.core.tensor import ShapeError, Tensor
from tempvl.models import LossBreakdown, MergePlan, TextMergePlan, TextMergeStrategy, TokenizedText
from tempvl.services.merging import apply_text_plans, apply_video_plans

logger = logging.getLogger(__name__)

Number = Union[float, Tensor]


def _check_span(st: int, ed: int, m: int) -> None:
    if not 0 <= st <= ed < m:
        raise IndexError(f"span ({st}, {ed}) invalid for {m} positions")


def _span_loss(logits: Tensor, st: int, ed: int) -> Tensor:
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"expected [M x 2] start/end logits, got {logits.shape}")
    _check_span(st, ed, logits.shape[0])
    return T.cross_entropy_from_logits(logits[:, 0], st) + T.cross_entropy_from_logits(logits[:, 1], ed)


def _span_loss_batch(logits: Tensor, spans) -> Tensor:
    spans = np.asarray(spans, dtype=np.int64)
    b, m, _ = logits.shape
    if spans.shape != (b, 2):
        raise ShapeError(f"expected {b} (st, ed) pairs, got array of shape {spans.shape}")
    for st, ed in spans:
        _check_span(int(st), int(ed), m)
    # mean over the b*2 endpoint terms, times 2: per-sequence sum of both, averaged over b
    return T.scale(T.cross_entropy(T.transpose(logits, (0, 2, 1)), spans), 2.0)


def moment_loss(r_vl: Tensor, st: int, ed: int) -> Tensor:
    """-log softmax(r0)[st] - log softmax(r1)[ed] over the merged frame slots."""
    return _span_loss(r_vl, st, ed)


def moment_loss_batch(r_vl: Tensor, spans) -> Tensor:
    """Mean moment loss over [b, M, 2] logits, one (st, ed) per merged sequence."""
    return _span_loss_batch(r_vl, spans)


def text_span_loss(r_tl_span: Tensor, st: int, ed: int) -> Tensor:
    return _span_loss(r_tl_span, st, ed)


def text_span_loss_batch(r_tl_span: Tensor, spans) -> Tensor:
    return _span_loss_batch(r_tl_span, spans)


def text_cls_loss(r_tl: Tensor, m_t: int) -> Tensor:
    """-log softmax(r_tl)[m_t] over the merged CLS slots."""
    return T.cross_entropy_from_logits(r_tl, m_t)


def text_cls_loss_batch(r_tl: Tensor, matched) -> Tensor:
    return T.cross_entropy(r_tl, np.asarray(matched, dtype=np.int64))


def contrastive_loss(video_emb: Tensor, text_emb: Tensor, temperature: Number) -> Tensor:
    """Symmetric InfoNCE over cosine logits / temperature; row i pairs with row i."""
    if video_emb.shape != text_emb.shape or video_emb.ndim != 2:
        raise ShapeError(f"contrastive_loss: shapes {video_emb.shape} and {text_emb.shape} must be equal [B x C_p]")
    b = video_emb.shape[0]
    if b < 2:
        raise ValueError("contrastive_loss needs at least two pairs")
    value = temperature.item() if isinstance(temperature, Tensor) else float(temperature)
    if not value > 0:
        raise ValueError(f"temperature must be positive, got {value}")

    sims = T.matmul(video_emb, T.transpose(text_emb))
    if isinstance(temperature, Tensor):
        logits = T.mul(sims, T.reciprocal(temperature))
    else:
        logits = T.scale(sims, 1.0 / value)
    labels = np.arange(b)
    v2t = T.cross_entropy(logits, labels)
    t2v = T.cross_entropy(T.transpose(logits), labels)
    return T.scale(v2t + t2v, 0.5)


def mask_tokens(
    ids: Sequence[int], config: MlmConfig, rng: np.random.Generator, special_ids: Set[int]
) -> Tuple[List[int], List[int]]:
    """Replace each non-special token by the mask id with ``mask_probability``.

    At least one position is always masked.
    """
    candidates = [i for i, tok in enumerate(ids) if tok not in special_ids]
    if not candidates:
        raise ValueError("text has no maskable (non-special) tokens")
    draws = rng.random(len(candidates))
    positions = [pos for pos, u in zip(candidates, draws) if u < config.mask_probability]
    if not positions:
        positions = [candidates[int(rng.integers(len(candidates)))]]
    masked = list(ids)
    for pos in positions:
        masked[pos] = config.mask_token_id
    return masked, positions


def mlm_loss(
    model,
    raw_frames: Tensor,
    texts: Sequence[TokenizedText],
    config: MlmConfig,
    rng: np.random.Generator,
) -> Tuple[Tensor, List[List[int]]]:
    """Mean vocabulary cross-entropy over masked word slots of unmerged video+text pairs.

    ``raw_frames`` is [b, T, D_raw], paired row-wise with ``texts``.
    """
    cfg = model.config
    specials = set(cfg.special_ids)
    ids, mask = model.pad_texts(texts)
    masked_ids = ids.copy()
    positions: List[List[int]] = []
    for row, text in enumerate(texts):
        masked, picked = mask_tokens(text.ids, config, rng, specials)
        masked_ids[row, : len(masked)] = masked
        positions.append(picked)

    frames = model.encode_videos(raw_frames)
    words = model.encode_ids(masked_ids, mask)
    fused = model.fuse(model.build_batch(frames, words, mask))
    f = frames.shape[1]
    b, width = ids.shape
    logits = model.mlm_logits(fused[:, f:, :])
    flat = T.reshape(logits, (b * width, cfg.text_vocab_size))
    rows = [r * width + p for r, picked in enumerate(positions) for p in picked]
    targets = [int(ids[r, p]) for r, picked in enumerate(positions) for p in picked]
    return T.cross_entropy(T.take_rows(flat, rows), targets), positions


def _value(x: Number) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(vtc: Number, mlm: Number, vl: Number, tl: Number, alpha: float = 1.0, beta: float = 1.0) -> LossBreakdown:
    """L = L_vtc + alpha * L_mlm + beta * (L_vl + L_tl)."""
    values = {"vtc": _value(vtc), "mlm": _value(mlm), "vl": _value(vl), "tl": _value(tl)}
    for name, value in values.items():
        if not math.isfinite(value):
            raise FloatingPointError(f"loss component '{name}' is not finite ({value})")
    total = values["vtc"] + alpha * values["mlm"] + beta * (values["vl"] + values["tl"])
    return LossBreakdown(total=total, alpha=alpha, beta=beta, **values)


def weighted_objective(
    vtc: Tensor, mlm: Tensor, vl: Tensor, tl: Tensor, alpha: float = 1.0, beta: float = 1.0
) -> Tensor:
    """The differentiable counterpart of :func:`total_loss`.

    A zero weight drops its terms from the graph, so they send no gradient.
    """
    objective = vtc
    if alpha != 0.0:
        objective = objective + T.scale(mlm, alpha)
    if beta != 0.0:
        objective = objective + T.scale(vl + tl, beta)
    return objective


# ---------------------------------------------------------------------------
# Batch-level terms: one forward pass of the encoders each
# ---------------------------------------------------------------------------

def contrastive_term(model, raw_frames: Tensor, texts: Sequence[TokenizedText], temperature: Number) -> Tensor:
    """L_vtc over a plain batch of paired videos and captions."""
    frames = model.encode_videos(raw_frames)
    words, _ = model.encode_texts(texts)
    video_emb, text_emb = model.project_for_contrastive(frames, words[:, 0, :])
    return contrastive_loss(video_emb, text_emb, temperature)


def video_localization_loss(
    model,
    raw_frames: Tensor,
    video_ids: Sequence[str],
    texts: Sequence[TokenizedText],
    plans: Sequence[MergePlan],
) -> Tensor:
    """L_vl: ``plans[i]`` is the merged video queried by ``texts[i]``."""
    if len(plans) != len(texts):
        raise ValueError(f"{len(plans)} video plans for {len(texts)} queries")
    frames = model.encode_videos(raw_frames)
    words, mask = model.encode_texts(texts)
    merged = apply_video_plans(frames, plans, video_ids)
    fused = model.fuse(model.build_batch(merged, words, mask))
    m = merged.shape[1]
    logits = model.boundary_head(fused[:, :m, :])
    spans = [plan.boundaries[text.text_id] for plan, text in zip(plans, texts)]
    return moment_loss_batch(logits, spans)


def text_localization_loss(
    model,
    raw_frames: Tensor,
    video_ids: Sequence[str],
    texts: Sequence[TokenizedText],
    plans: Sequence[TextMergePlan],
) -> Tensor:
    """L_tl: ``plans[j]`` is the merged text queried by video ``video_ids[j]``.

    MergeCLS plans are scored by the match head over CLS slots, MergeWords
    plans by the text-span head over every merged word slot.
    """
    if len(plans) != len(video_ids):
        raise ValueError(f"{len(plans)} text plans for {len(video_ids)} videos")
    strategies = {plan.strategy for plan in plans}
    if len(strategies) != 1:
        raise ValueError("text plans of one batch must share a strategy")
    frames = model.encode_videos(raw_frames)
    words, _ = model.encode_texts(texts)
    merged = apply_text_plans(words, plans, [t.text_id for t in texts])
    b, n, _ = merged.shape
    fused = model.fuse(model.build_batch(frames, merged, np.ones((b, n), dtype=bool)))
    f = frames.shape[1]
    if strategies.pop() == TextMergeStrategy.MERGE_CLS:
        logits = model.match_head(fused[:, f:, :])
        return text_cls_loss_batch(logits, [plan.matched_index[v] for plan, v in zip(plans, video_ids)])
    logits = model.text_span_head(fused[:, f:, :])
    return text_span_loss_batch(logits, [plan.spans[v] for plan, v in zip(plans, video_ids)])
