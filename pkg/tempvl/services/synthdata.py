"""Procedural paired video-text data with known concept alignment."""
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Set

import numpy as np

from tempvl.config import GeneratorConfig
from tempvl.core.tensor import Tensor
from tempvl.models import TokenizedText

logger = logging.getLogger(__name__)

_ANCHOR_STREAM = 0xA7C


@dataclass(frozen=True)
class SyntheticPair:
    """One video (raw pooled frame features) and its caption."""
    concept_id: int
    video_id: str
    raw_frames: Tensor
    text: TokenizedText


@lru_cache(maxsize=32)
def concept_anchors(config: GeneratorConfig) -> np.ndarray:
    """One fixed random unit vector per concept, [n_concepts x D_raw]."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _ANCHOR_STREAM]))
    anchors = rng.normal(size=(config.n_concepts, config.raw_frame_dim))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    anchors.setflags(write=False)
    return anchors


def generate_pair(concept_id: int, config: GeneratorConfig, seed: int, index: int = 0) -> SyntheticPair:
    """Frames are the concept anchor plus clipped Gaussian noise (each coordinate
    within 6 sigma); the caption mixes concept and distractor tokens."""
    if not 0 <= concept_id < config.n_concepts:
        raise ValueError(f"concept_id {concept_id} out of range for {config.n_concepts} concepts")
    rng = np.random.default_rng(seed)
    anchor = concept_anchors(config)[concept_id]
    sigma = config.noise_sigma
    noise = np.clip(rng.normal(0.0, 1.0, size=(config.frames_per_video, config.raw_frame_dim)), -6.0, 6.0) * sigma
    frames = anchor[None, :] + noise

    concept_ids = np.array(config.concept_vocab[concept_id])
    distractors = np.array(config.distractor_vocab)
    n_concept = config.concept_tokens_per_sentence
    words = np.concatenate(
        [
            rng.choice(concept_ids, size=n_concept, replace=True),
            rng.choice(distractors, size=config.tokens_per_sentence - n_concept, replace=True),
        ]
    )
    rng.shuffle(words)
    ids = (config.cls_token_id, *(int(w) for w in words), config.sep_token_id)
    return SyntheticPair(
        concept_id=concept_id,
        video_id=f"v{index}",
        raw_frames=Tensor(frames),
        text=TokenizedText(text_id=f"t{index}", ids=ids),
    )


def generate_batch(
    config: GeneratorConfig, batch_size: int, seed: int, disjoint_concepts: bool = True
) -> List[SyntheticPair]:
    """``batch_size`` pairs; disjoint concepts keep contrastive pairing unambiguous."""
    if disjoint_concepts and batch_size > config.n_concepts:
        raise ValueError(f"cannot draw {batch_size} disjoint concepts from {config.n_concepts}")
    rng = np.random.default_rng(seed)
    if disjoint_concepts:
        concepts = rng.choice(config.n_concepts, size=batch_size, replace=False)
    else:
        concepts = rng.integers(0, config.n_concepts, size=batch_size)
    pair_seeds = rng.integers(0, 2**62, size=batch_size)
    return [generate_pair(int(c), config, int(s), i) for i, (c, s) in enumerate(zip(concepts, pair_seeds))]


def stack_frames(pairs: Sequence[SyntheticPair]) -> Tensor:
    """Raw frames of a batch as one [b, T, D_raw] tensor."""
    return Tensor(np.stack([p.raw_frames.data for p in pairs]))


class SeedLedger:
    """Records the seeds drawn per split so splits can be audited for overlap."""

    def __init__(self):
        self._seeds: Dict[str, Set[int]] = {}

    def record(self, split: str, seed: int) -> int:
        self._seeds.setdefault(split, set()).add(int(seed))
        return int(seed)

    def seeds(self, split: str) -> Set[int]:
        return set(self._seeds.get(split, set()))

    def to_dict(self) -> Dict[str, List[int]]:
        return {split: sorted(seeds) for split, seeds in self._seeds.items()}

    @classmethod
    def from_dict(cls, payload: Dict[str, List[int]]) -> "SeedLedger":
        ledger = cls()
        for split, seeds in payload.items():
            for seed in seeds:
                ledger.record(split, seed)
        return ledger

    def audit(self) -> None:
        """Raise ValueError if any two splits drew a common seed."""
        splits = sorted(self._seeds)
        for i, a in enumerate(splits):
            for b in splits[i + 1:]:
                shared = self._seeds[a] & self._seeds[b]
                if shared:
                    raise ValueError(f"splits '{a}' and '{b}' share seeds {sorted(shared)[:5]}")


def dump_pairs(pairs: Iterable[SyntheticPair], path: Path) -> Path:
    """Write one JSON object per line; frames as a flat array plus shape."""
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as f:
            for pair in pairs:
                record = {
                    "concept_id": pair.concept_id,
                    "video_id": pair.video_id,
                    "shape": list(pair.raw_frames.shape),
                    "frames": pair.raw_frames.data.ravel().tolist(),
                    "text_id": pair.text.text_id,
                    "ids": list(pair.text.ids),
                }
                f.write(json.dumps(record) + "\n")
    except OSError as e:
        logger.error(f"Error writing dataset to {path}: {e}", exc_info=True)
        raise
    return path


def load_pairs(path: Path) -> List[SyntheticPair]:
    """Read pairs written by :func:`dump_pairs`; frames come back bit-exact."""
    path = Path(path)
    pairs = []
    try:
        with path.open("r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                record = json.loads(line)
                frames = np.array(record["frames"], dtype=np.float64).reshape(record["shape"])
                pairs.append(
                    SyntheticPair(
                        concept_id=record["concept_id"],
                        video_id=record["video_id"],
                        raw_frames=Tensor(frames),
                        text=TokenizedText(text_id=record["text_id"], ids=tuple(record["ids"])),
                    )
                )
    except (OSError, ValueError, KeyError) as e:
        logger.error(f"Error reading dataset from {path}: {e}", exc_info=True)
        raise
    return pairs
