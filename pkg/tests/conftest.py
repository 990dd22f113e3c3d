"""Shared fixtures: small configurations that train in well under a second per step."""
import sys
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from tempvl.config import GeneratorConfig, ModelConfig, RunConfig, validate_run_config  # noqa: E402
from tempvl.services.encoders import TVLModel  # noqa: E402


def small_raw_config(output_dir: Path, **train: Any) -> Dict[str, Any]:
    raw = {
        "output_dir": str(output_dir),
        "model": {
            "d_model": 8,
            "text_vocab_size": 40,
            "max_text_len": 6,
            "frames_per_video": 4,
            "raw_frame_dim": 8,
            "n_layers_text": 1,
            "n_layers_fusion": 1,
            "n_heads": 2,
            "proj_dim": 8,
            "max_merged_len": 64,
        },
        "train": {
            "steps": 6,
            "batch_size": 4,
            "warmup_steps": 2,
            "eval_every": 3,
            "eval_batches": 1,
            "eval_gallery_size": 8,
            "video_merge": {"K": 12, "K_p_min": 1, "K_p_max": 4, "hard_top_m": 2},
        },
        "data": {
            "n_concepts": 8,
            "raw_frame_dim": 8,
            "frames_per_video": 4,
            "tokens_per_sentence": 5,
            "concept_tokens_per_sentence": 2,
            "tokens_per_concept": 2,
            "vocab_size": 40,
        },
    }
    for key, value in train.items():
        raw["train"][key] = value
    return raw


@pytest.fixture
def small_config(tmp_path) -> RunConfig:
    return validate_run_config(small_raw_config(tmp_path / "run"))


@pytest.fixture
def make_config(tmp_path):
    def _make(name: str = "run", **train: Any) -> RunConfig:
        return validate_run_config(small_raw_config(tmp_path / name, **train))

    return _make


@pytest.fixture
def small_model(small_config) -> TVLModel:
    return TVLModel(small_config.model, seed=0)


@pytest.fixture
def generator_config(small_config) -> GeneratorConfig:
    return small_config.data


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig(
        d_model=8,
        text_vocab_size=20,
        max_text_len=4,
        frames_per_video=3,
        raw_frame_dim=5,
        n_layers_text=1,
        n_layers_fusion=1,
        n_heads=2,
        proj_dim=4,
        max_merged_len=40,
    )


SMALL_TOML = """\
{output_dir}
[model]
d_model = 8
text_vocab_size = 40
max_text_len = 6
frames_per_video = 4
raw_frame_dim = 8
n_layers_text = 1
n_layers_fusion = 1
n_heads = 2
proj_dim = 8
max_merged_len = 64

[train]
steps = 6
batch_size = 4
warmup_steps = 2
eval_every = 3
eval_batches = 1
eval_gallery_size = 8

[train.video_merge]
K = 12
K_p_min = 1
K_p_max = 4
hard_top_m = 2

[data]
n_concepts = 8
raw_frame_dim = 8
frames_per_video = 4
tokens_per_sentence = 5
concept_tokens_per_sentence = 2
tokens_per_concept = 2
vocab_size = 40
"""


@pytest.fixture
def config_file(tmp_path):
    """Writes the small configuration as a TOML file; same values as ``small_raw_config``."""

    def _write(name: str = "run", output_dir: bool = True) -> Path:
        line = f"output_dir = '{tmp_path / name}'\n" if output_dir else ""
        path = tmp_path / f"{name}.toml"
        path.write_text(SMALL_TOML.format(output_dir=line), encoding="utf-8")
        return path

    return _write
