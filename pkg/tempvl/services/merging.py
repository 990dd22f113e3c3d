"""Construct merged video/text sequences and derive their supervision labels.

Plans are pure functions of (ids, seed). Tensors are gathered from stacked
encoder outputs afterwards, so gradients reach the encoders through the
merge.
"""
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tempvl.config import VideoMergeConfig
from tempvl.core import tensor as T
from tempvl.core.tensor import Tensor
from tempvl.models import (
    MergePlan,
    Slot,
    Span,
    TextMergePlan,
    TextMergeStrategy,
    TokenizedText,
    VideoMergeStrategy,
    scan_span,
)
from tempvl.services.encoders import FrameTokenSequence

logger = logging.getLogger(__name__)


class MergeError(ValueError):
    """A merge that cannot be built from the given batch."""


def _pairing(video_ids: Sequence[str], text_ids: Optional[Sequence[str]]) -> Dict[str, str]:
    text_ids = list(video_ids) if text_ids is None else list(text_ids)
    if len(text_ids) != len(video_ids):
        raise MergeError(f"{len(text_ids)} text ids for {len(video_ids)} videos")
    return dict(zip(text_ids, video_ids))


def _check_frames(batch: Sequence[FrameTokenSequence]) -> int:
    if not batch:
        raise MergeError("cannot merge an empty batch")
    lengths = {seq.tokens.shape[0] for seq in batch}
    if len(lengths) != 1:
        raise MergeError(f"inconsistent frame counts in batch: {sorted(lengths)}")
    return lengths.pop()


def _stack(batch: Sequence[FrameTokenSequence]) -> Tensor:
    return T.concat([seq.tokens for seq in batch], axis=0)


# ---------------------------------------------------------------------------
# Video plans
# ---------------------------------------------------------------------------

def plan_video_shuffle(
    video_ids: Sequence[str],
    frames_per_video: int,
    seed: int,
    text_ids: Optional[Sequence[str]] = None,
) -> MergePlan:
    """Concatenate whole videos in a random order; frame order is kept."""
    pairing = _pairing(video_ids, text_ids)
    rng = np.random.default_rng(seed)
    permutation = [int(i) for i in rng.permutation(len(video_ids))]
    slots: List[Slot] = [(video_ids[v], f) for v in permutation for f in range(frames_per_video)]
    rank = {video_ids[v]: r for r, v in enumerate(permutation)}
    boundaries = {
        text: (rank[video] * frames_per_video, rank[video] * frames_per_video + frames_per_video - 1)
        for text, video in pairing.items()
    }
    return MergePlan(
        strategy=VideoMergeStrategy.SHUFFLING,
        seed=seed,
        frames_per_video=frames_per_video,
        slots=slots,
        permutation=permutation,
        pairing=pairing,
        boundaries=boundaries,
    )


def _background_pool(
    paired: int, n_videos: int, config: VideoMergeConfig, similarity: Optional[np.ndarray]
) -> List[int]:
    others = [i for i in range(n_videos) if i != paired]
    if config.strategy != VideoMergeStrategy.HARD_SAMPLING:
        return others
    if similarity is None:
        raise MergeError("HardSampling needs a video similarity matrix")
    if similarity.shape != (n_videos, n_videos):
        raise MergeError(f"similarity shape {similarity.shape} does not match batch of {n_videos}")
    column = similarity[:, paired]
    ranked = sorted(others, key=lambda i: (-column[i], i))
    return ranked[: config.hard_top_m]


def _draw_background(
    rng: np.random.Generator, pool: Sequence[int], frames_per_video: int, count: int
) -> List[Tuple[int, int]]:
    """Pick a source video per slot; within a video, frames are drawn without
    replacement until its frames are exhausted, then the video is refilled."""
    queues: Dict[int, List[int]] = {}
    drawn = []
    for _ in range(count):
        video = pool[int(rng.integers(len(pool)))]
        queue = queues.get(video)
        if not queue:
            queue = [int(f) for f in rng.permutation(frames_per_video)]
            queues[video] = queue
        drawn.append((video, queue.pop()))
    return drawn


def plan_video_sample(
    video_ids: Sequence[str],
    frames_per_video: int,
    query_text_id: str,
    config: VideoMergeConfig,
    seed: int,
    similarity: Optional[np.ndarray] = None,
    text_ids: Optional[Sequence[str]] = None,
) -> MergePlan:
    """K slots: one contiguous run of k positive frames inside K - k background frames."""
    pairing = _pairing(video_ids, text_ids)
    if query_text_id not in pairing:
        raise MergeError(f"query {query_text_id} has no paired video in the batch")
    paired = list(video_ids).index(pairing[query_text_id])

    upper = min(config.K_p_max, frames_per_video, config.K)
    if config.K_p_min > upper:
        raise MergeError(f"K_p_min {config.K_p_min} exceeds the feasible positive count {upper}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(config.K_p_min, upper + 1))
    positives = sorted(int(f) for f in rng.choice(frames_per_video, size=k, replace=False))

    n_background = config.K - k
    pool = _background_pool(paired, len(video_ids), config, similarity)
    if n_background > 0 and not pool:
        raise MergeError("no background source: the batch holds only the paired video")
    background = _draw_background(rng, pool, frames_per_video, n_background)
    offset = int(rng.integers(0, n_background + 1))

    merged = background[:offset] + [(paired, f) for f in positives] + background[offset:]
    slots: List[Slot] = [(video_ids[v], f) for v, f in merged]
    return MergePlan(
        strategy=config.strategy,
        seed=seed,
        frames_per_video=frames_per_video,
        slots=slots,
        pairing={query_text_id: pairing[query_text_id]},
        boundaries={query_text_id: (offset, offset + k - 1)},
    )


def video_plan_index(plan: MergePlan, video_index: Mapping[str, int]) -> np.ndarray:
    """Row indices into the [B*T, C] stack of frame tokens."""
    t = plan.frames_per_video
    return np.array([video_index[v] * t + f for v, f in plan.slots], dtype=np.int64)


def apply_video_plans(stacked_frames: Tensor, plans: Sequence[MergePlan], video_ids: Sequence[str]) -> Tensor:
    """Gather [len(plans), M, C] merged frame tokens from [B, T, C] encoder output."""
    b, t, c = stacked_frames.shape
    video_index = {v: i for i, v in enumerate(video_ids)}
    index = np.stack([video_plan_index(plan, video_index) for plan in plans])
    return T.take_rows(T.reshape(stacked_frames, (b * t, c)), index)


def merge_videos_shuffle(
    batch: Sequence[FrameTokenSequence], seed: int, text_ids: Optional[Sequence[str]] = None
) -> Tuple[Tensor, MergePlan]:
    """Merge whole videos in permuted order -> ([B*T, C], plan)."""
    t = _check_frames(batch)
    video_ids = [seq.video_id for seq in batch]
    plan = plan_video_shuffle(video_ids, t, seed, text_ids)
    index = video_plan_index(plan, {v: i for i, v in enumerate(video_ids)})
    return T.take_rows(_stack(batch), index), plan


def merge_videos_sample(
    batch: Sequence[FrameTokenSequence],
    query_text_id: str,
    config: VideoMergeConfig,
    similarity=None,
    seed: int = 0,
    text_ids: Optional[Sequence[str]] = None,
) -> Tuple[Tensor, MergePlan]:
    """Sampling / HardSampling merge for one query -> ([K, C], plan)."""
    t = _check_frames(batch)
    if config.strategy == VideoMergeStrategy.SHUFFLING:
        raise MergeError("merge_videos_sample needs a Sampling or HardSampling config")
    if isinstance(similarity, Tensor):
        similarity = similarity.data
    video_ids = [seq.video_id for seq in batch]
    plan = plan_video_sample(video_ids, t, query_text_id, config, seed, similarity, text_ids)
    index = video_plan_index(plan, {v: i for i, v in enumerate(video_ids)})
    return T.take_rows(_stack(batch), index), plan


def compute_video_similarity(batch_embeddings: Tensor) -> Tensor:
    """Cosine similarity of L2-normalised rows; the diagonal is exactly 1."""
    data = T.as_tensor(batch_embeddings).data
    sim = data @ data.T
    np.fill_diagonal(sim, 1.0)
    return Tensor(sim)


def derive_boundary(plan: MergePlan, query_text_id: str) -> Optional[Span]:
    """(min, max) slot index of the query's paired video, by scanning slots."""
    return scan_span(plan.slots, plan.pairing[query_text_id])


def invert_plan(plan: MergePlan, slot_index: int) -> Slot:
    """Source (video_id, frame_index) of one merged slot."""
    if not 0 <= slot_index < len(plan.slots):
        raise IndexError(f"slot {slot_index} out of range for a plan of {len(plan.slots)} slots")
    return plan.slots[slot_index]


# ---------------------------------------------------------------------------
# Text plans
# ---------------------------------------------------------------------------

def _text_pairing(texts: Sequence[TokenizedText], video_ids: Optional[Sequence[str]]) -> Dict[str, str]:
    text_ids = [t.text_id for t in texts]
    video_ids = text_ids if video_ids is None else list(video_ids)
    if len(video_ids) != len(text_ids):
        raise MergeError(f"{len(video_ids)} video ids for {len(text_ids)} texts")
    return dict(zip(video_ids, text_ids))


def merge_texts_words(
    batch: Sequence[TokenizedText],
    seed: int,
    max_merged_len: Optional[int] = None,
    video_ids: Optional[Sequence[str]] = None,
) -> Tuple[List[int], TextMergePlan]:
    """Concatenate whole sentences (CLS and SEP kept) in permuted order."""
    if not batch:
        raise MergeError("cannot merge an empty batch")
    pairing = _text_pairing(batch, video_ids)
    total = int(np.sum([len(t) for t in batch]))
    if max_merged_len is not None and total > max_merged_len:
        raise MergeError(f"merged text length {total} exceeds max_merged_len {max_merged_len}")
    rng = np.random.default_rng(seed)
    permutation = [int(i) for i in rng.permutation(len(batch))]
    slots: List[Slot] = []
    merged: List[int] = []
    for i in permutation:
        slots.extend((batch[i].text_id, pos) for pos in range(len(batch[i])))
        merged.extend(batch[i].ids)
    spans = {video: scan_span(slots, text) for video, text in pairing.items()}
    plan = TextMergePlan(
        strategy=TextMergeStrategy.MERGE_WORDS,
        seed=seed,
        slots=slots,
        permutation=permutation,
        pairing=pairing,
        spans=spans,
    )
    return merged, plan


def merge_texts_cls(
    batch: Sequence[TokenizedText], seed: int, video_ids: Optional[Sequence[str]] = None
) -> Tuple[List[Slot], TextMergePlan]:
    """Keep only each sentence's CLS slot, in permuted order."""
    if len(batch) < 2:
        raise MergeError("CLS merging needs at least two sentences")
    pairing = _text_pairing(batch, video_ids)
    rng = np.random.default_rng(seed)
    permutation = [int(i) for i in rng.permutation(len(batch))]
    slots: List[Slot] = [(batch[i].text_id, 0) for i in permutation]
    rank = {text: r for r, (text, _) in enumerate(slots)}
    plan = TextMergePlan(
        strategy=TextMergeStrategy.MERGE_CLS,
        seed=seed,
        slots=slots,
        permutation=permutation,
        pairing=pairing,
        matched_index={video: rank[text] for video, text in pairing.items()},
    )
    return slots, plan


def plan_text_merge(
    strategy: TextMergeStrategy,
    batch: Sequence[TokenizedText],
    seed: int,
    max_merged_len: Optional[int] = None,
    video_ids: Optional[Sequence[str]] = None,
) -> TextMergePlan:
    if strategy == TextMergeStrategy.MERGE_WORDS:
        return merge_texts_words(batch, seed, max_merged_len, video_ids)[1]
    return merge_texts_cls(batch, seed, video_ids)[1]


def apply_text_plans(
    text_features: Tensor, plans: Sequence[TextMergePlan], text_ids: Sequence[str]
) -> Tensor:
    """Gather [len(plans), N, C] merged word tokens from [B, L_max, C] text encoder output."""
    b, width, c = text_features.shape
    text_index = {t: i for i, t in enumerate(text_ids)}
    index = np.array(
        [[text_index[t] * width + pos for t, pos in plan.slots] for plan in plans], dtype=np.int64
    )
    return T.take_rows(T.reshape(text_features, (b * width, c)), index)
