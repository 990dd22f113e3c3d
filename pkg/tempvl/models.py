"""Pydantic models for merge plans, losses, metrics and reports."""
import math
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

Slot = Tuple[str, int]
Span = Tuple[int, int]


class VideoMergeStrategy(str, Enum):
    """How frame tokens of a batch are merged into one long sequence."""
    SHUFFLING = "Shuffling"
    SAMPLING = "Sampling"
    HARD_SAMPLING = "HardSampling"


class TextMergeStrategy(str, Enum):
    """How sentences of a batch are merged for text localization."""
    MERGE_WORDS = "MergeWords"
    MERGE_CLS = "MergeCLS"


class TokenizedText(BaseModel):
    """Token ids of one sentence, wrapped in CLS ... SEP."""
    model_config = ConfigDict(frozen=True)

    text_id: str
    ids: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


def scan_span(slots: Sequence[Slot], source_id: str) -> Optional[Span]:
    """(min, max) slot index whose source is ``source_id``; None if absent."""
    hits = [i for i, (source, _) in enumerate(slots) if source == source_id]
    if not hits:
        return None
    return hits[0], hits[-1]


def _runs(slots: Sequence[Slot]) -> Dict[str, List[int]]:
    positions: Dict[str, List[int]] = {}
    for i, (source, _) in enumerate(slots):
        positions.setdefault(source, []).append(i)
    return positions


def _is_contiguous(indices: List[int]) -> bool:
    return indices == list(range(indices[0], indices[-1] + 1))


class MergePlan(BaseModel):
    """Complete record of one video merge and the boundary labels it implies.

    ``pairing`` maps each query text id to its paired video id; ``boundaries``
    maps query text ids to inclusive (st, ed) slot indices. All invariants are
    re-checked on construction, including when loaded back from JSON.
    """
    model_config = ConfigDict(frozen=True)

    strategy: VideoMergeStrategy
    seed: int
    frames_per_video: int = Field(..., ge=1)
    slots: List[Slot]
    permutation: List[int] = Field(default_factory=list)
    pairing: Dict[str, str]
    boundaries: Dict[str, Span]

    @model_validator(mode="after")
    def _check_invariants(self) -> "MergePlan":
        if not self.slots:
            raise ValueError("merge plan has no slots")
        for source, frame in self.slots:
            if not 0 <= frame < self.frames_per_video:
                raise ValueError(f"slot ({source}, {frame}) frame index out of range")

        runs = _runs(self.slots)
        if self.strategy == VideoMergeStrategy.SHUFFLING:
            for source, indices in runs.items():
                if not _is_contiguous(indices):
                    raise ValueError(f"video {source} slots are not contiguous")
                frames = [self.slots[i][1] for i in indices]
                if any(b <= a for a, b in zip(frames, frames[1:])):
                    raise ValueError(f"video {source} frame order not retained")

        for query, (st, ed) in self.boundaries.items():
            if query not in self.pairing:
                raise ValueError(f"boundary for unknown query {query}")
            if not 0 <= st <= ed < len(self.slots):
                raise ValueError(f"boundary ({st}, {ed}) out of range for query {query}")
            video = self.pairing[query]
            if scan_span(self.slots, video) != (st, ed) or len(runs[video]) != ed - st + 1:
                raise ValueError(f"boundary ({st}, {ed}) disagrees with slots of video {video}")
            frames = [self.slots[i][1] for i in range(st, ed + 1)]
            if any(b <= a for a, b in zip(frames, frames[1:])):
                raise ValueError(f"positive frames for query {query} are not increasing")
        return self


class TextMergePlan(BaseModel):
    """Record of one text merge.

    ``pairing`` maps each query video id to its paired text id. MergeWords
    plans carry ``spans`` (inclusive, covering the sentence's CLS and SEP);
    MergeCLS plans carry ``matched_index``.
    """
    model_config = ConfigDict(frozen=True)

    strategy: TextMergeStrategy
    seed: int
    slots: List[Slot]
    permutation: List[int] = Field(default_factory=list)
    pairing: Dict[str, str]
    spans: Dict[str, Span] = Field(default_factory=dict)
    matched_index: Dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_invariants(self) -> "TextMergePlan":
        runs = _runs(self.slots)
        if self.strategy == TextMergeStrategy.MERGE_WORDS:
            for source, indices in runs.items():
                positions = [self.slots[i][1] for i in indices]
                if not _is_contiguous(indices) or positions != list(range(len(positions))):
                    raise ValueError(f"sentence {source} tokens are not contiguous and in order")
            for query, (st, ed) in self.spans.items():
                text = self.pairing.get(query)
                if text is None or scan_span(self.slots, text) != (st, ed):
                    raise ValueError(f"span ({st}, {ed}) disagrees with slots for query {query}")
        else:
            for source, indices in runs.items():
                if len(indices) != 1 or self.slots[indices[0]][1] != 0:
                    raise ValueError(f"sentence {source} must contribute exactly its CLS slot")
            for query, index in self.matched_index.items():
                text = self.pairing.get(query)
                if text is None or not 0 <= index < len(self.slots) or self.slots[index][0] != text:
                    raise ValueError(f"matched index {index} disagrees with slots for query {query}")
        return self


class LossBreakdown(BaseModel):
    """Per-term losses and their weighted total."""
    vtc: float
    mlm: float
    vl: float
    tl: float
    total: float
    alpha: float = 1.0
    beta: float = 1.0

    @model_validator(mode="after")
    def _check_total(self) -> "LossBreakdown":
        expected = self.vtc + self.alpha * self.mlm + self.beta * (self.vl + self.tl)
        if not math.isclose(self.total, expected, rel_tol=0.0, abs_tol=1e-12 * max(1.0, abs(expected))):
            raise ValueError(f"total {self.total} != weighted sum {expected}")
        return self


class RetrievalResult(BaseModel):
    """Recall@k for one retrieval direction."""
    recall_at: Dict[int, float]
    n_queries: int

    def __getitem__(self, k: int) -> float:
        return self.recall_at[k]


class LocalizationResult(BaseModel):
    """Exact-endpoint accuracies and temporal IoU of decoded boundaries."""
    start_acc: float
    end_acc: float
    both_acc: float
    mean_iou: float
    recall_at_iou: Dict[float, float] = Field(default_factory=dict)
    n_queries: int = 0
    moment_loss: Optional[float] = None


class EvalReport(BaseModel):
    """Held-out evaluation summary.

    Exactly one of ``cls_match_acc`` (MergeCLS runs) and ``span_match_acc``
    (MergeWords runs) is set, matching the text head the run trains.
    """
    text_to_video: RetrievalResult
    video_to_text: RetrievalResult
    localization: LocalizationResult
    alignment_rate: float
    split_seed: int
    cls_match_acc: Optional[float] = None
    span_match_acc: Optional[float] = None

    @property
    def r1(self) -> float:
        return self.text_to_video.recall_at[1]

    def summary(self) -> Dict[str, float]:
        row = {f"t2v_r{k}": v for k, v in self.text_to_video.recall_at.items()}
        row.update({f"v2t_r{k}": v for k, v in self.video_to_text.recall_at.items()})
        row.update(
            {
                "boundary_acc": self.localization.both_acc,
                "start_acc": self.localization.start_acc,
                "end_acc": self.localization.end_acc,
                "mean_iou": self.localization.mean_iou,
                "alignment_rate": self.alignment_rate,
            }
        )
        for key in ("cls_match_acc", "span_match_acc"):
            if getattr(self, key) is not None:
                row[key] = getattr(self, key)
        return row


class CoordinateFailure(BaseModel):
    """One coordinate whose autodiff gradient disagrees with finite differences."""
    tensor: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    reason: str


class GradCheckReport(BaseModel):
    """Outcome of a finite-difference check for one case."""
    name: str
    passed: bool
    max_rel_error: float
    n_checked: int
    failures: List[CoordinateFailure] = Field(default_factory=list)
