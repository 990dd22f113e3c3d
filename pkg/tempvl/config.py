"""Application settings and run configuration."""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from tempvl.models import TextMergeStrategy, VideoMergeStrategy


class Settings(BaseSettings):
    """Process-level settings."""

    debug: bool = False
    log_level: str = "INFO"
    runs_root: str = "./runs"

    model_config = SettingsConfigDict(env_prefix="TEMPVL_", env_file=".env", case_sensitive=False)


settings = Settings()


class ConfigError(ValueError):
    """Invalid run configuration; ``fields`` lists the offending locations."""

    def __init__(self, message: str, fields: Sequence[str] = ()):
        super().__init__(message)
        self.fields = list(fields)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    """Encoder sizes and special token ids."""

    d_model: int = Field(64, ge=1)
    text_vocab_size: int = Field(128, ge=5)
    max_text_len: int = Field(16, ge=1)
    frames_per_video: int = Field(8, ge=1)
    raw_frame_dim: int = Field(32, ge=1)
    n_layers_text: int = Field(2, ge=0)
    n_layers_fusion: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    ffn_dim: Optional[int] = Field(None, ge=1)
    proj_dim: int = Field(32, ge=1)
    max_merged_len: int = Field(256, ge=2)
    causal_text: bool = False
    init_std: float = Field(0.02, gt=0)
    pad_token_id: int = 0
    cls_token_id: int = 1
    sep_token_id: int = 2
    mask_token_id: int = 3

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim or 4 * self.d_model

    @property
    def special_ids(self) -> Tuple[int, int, int, int]:
        return (self.pad_token_id, self.cls_token_id, self.sep_token_id, self.mask_token_id)

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        specials = self.special_ids
        if len(set(specials)) != 4:
            raise ValueError(f"special token ids must be distinct, got {specials}")
        if any(not 0 <= s < self.text_vocab_size for s in specials):
            raise ValueError(f"special token ids {specials} must be < text_vocab_size")
        return self


class VideoMergeConfig(_Section):
    """Video merging strategy and its sampling knobs."""

    strategy: VideoMergeStrategy = VideoMergeStrategy.SHUFFLING
    K: int = Field(128, ge=1)
    K_p_min: int = Field(1, ge=1)
    K_p_max: int = Field(32, ge=1)
    hard_top_m: int = Field(10, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "VideoMergeConfig":
        if not self.K_p_min <= self.K_p_max <= self.K:
            raise ValueError(f"need 1 <= K_p_min <= K_p_max <= K, got {self.K_p_min}, {self.K_p_max}, {self.K}")
        return self


class MlmConfig(_Section):
    """Masked language modeling."""

    mask_probability: float = Field(0.15, gt=0.0, lt=1.0)
    mask_token_id: int = 3
    seed: int = 0


class TrainConfig(_Section):
    """Optimisation schedule, merging and loss weights."""

    steps: int = Field(2000, ge=0)
    batch_size: int = Field(8, ge=2)
    lr_peak: float = Field(3e-3, gt=0)
    weight_decay: float = Field(0.005, ge=0)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = Field(1e-8, gt=0)
    warmup_steps: int = Field(100, ge=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    video_merge: VideoMergeConfig = VideoMergeConfig()
    text_merge: TextMergeStrategy = TextMergeStrategy.MERGE_CLS
    mlm: MlmConfig = MlmConfig()
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    temperature_init: float = Field(0.07, gt=0)
    learnable_temperature: bool = True
    eval_every: int = Field(250, ge=1)
    eval_batches: int = Field(4, ge=1)
    eval_gallery_size: int = Field(32, ge=2)
    eval_split_seed: int = 1_000_003
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        return self

    @property
    def effective_warmup(self) -> int:
        """Warmup shortened so that it always ends before the last step."""
        return min(self.warmup_steps, max(self.steps - 1, 0))


class GeneratorConfig(_Section):
    """Synthetic paired video-text world."""

    n_concepts: int = Field(32, ge=1)
    raw_frame_dim: int = Field(32, ge=1)
    frames_per_video: int = Field(8, ge=1)
    tokens_per_sentence: int = Field(10, ge=1)
    concept_tokens_per_sentence: int = Field(3, ge=1)
    tokens_per_concept: int = Field(2, ge=1)
    noise_sigma: float = Field(0.1, ge=0)
    vocab_size: int = Field(128, ge=6)
    first_content_id: int = Field(4, ge=0)
    cls_token_id: int = 1
    sep_token_id: int = 2
    seed: int = 0

    @property
    def concept_vocab(self) -> Dict[int, range]:
        base, k = self.first_content_id, self.tokens_per_concept
        return {c: range(base + c * k, base + (c + 1) * k) for c in range(self.n_concepts)}

    @property
    def distractor_vocab(self) -> range:
        return range(self.first_content_id + self.n_concepts * self.tokens_per_concept, self.vocab_size)

    @model_validator(mode="after")
    def _check(self) -> "GeneratorConfig":
        if len(self.distractor_vocab) == 0:
            raise ValueError("vocab_size leaves no distractor ids after the concept vocabulary")
        if self.concept_tokens_per_sentence > self.tokens_per_sentence:
            raise ValueError("concept_tokens_per_sentence exceeds tokens_per_sentence")
        if max(self.cls_token_id, self.sep_token_id) >= self.first_content_id:
            raise ValueError("special ids must lie below first_content_id")
        return self


class RunConfig(_Section):
    """Everything one training run needs."""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: GeneratorConfig = GeneratorConfig()
    output_dir: str

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        m, t, d = self.model, self.train, self.data
        if d.frames_per_video != m.frames_per_video:
            raise ValueError(f"data.frames_per_video {d.frames_per_video} != model.frames_per_video {m.frames_per_video}")
        if d.raw_frame_dim != m.raw_frame_dim:
            raise ValueError(f"data.raw_frame_dim {d.raw_frame_dim} != model.raw_frame_dim {m.raw_frame_dim}")
        if d.vocab_size != m.text_vocab_size:
            raise ValueError(f"data.vocab_size {d.vocab_size} != model.text_vocab_size {m.text_vocab_size}")
        if (d.cls_token_id, d.sep_token_id) != (m.cls_token_id, m.sep_token_id):
            raise ValueError("data and model disagree on CLS/SEP ids")
        if t.mlm.mask_token_id != m.mask_token_id:
            raise ValueError("train.mlm.mask_token_id != model.mask_token_id")
        if max(m.special_ids) >= d.first_content_id:
            raise ValueError("model special ids must lie below data.first_content_id")
        if d.tokens_per_sentence > m.max_text_len:
            raise ValueError(f"data.tokens_per_sentence {d.tokens_per_sentence} exceeds model.max_text_len {m.max_text_len}")
        if t.eval_gallery_size > d.n_concepts or t.batch_size > d.n_concepts:
            raise ValueError("batch_size and eval_gallery_size must not exceed data.n_concepts")
        text_len = m.max_text_len + 2
        frames = self.merged_frames()
        longest = max(
            frames + text_len,
            m.frames_per_video + (t.batch_size * text_len if t.text_merge == TextMergeStrategy.MERGE_WORDS else t.batch_size),
        )
        if longest > m.max_merged_len:
            raise ValueError(f"model.max_merged_len {m.max_merged_len} < longest fused sequence {longest}")
        return self

    def merged_frames(self) -> int:
        if self.train.video_merge.strategy == VideoMergeStrategy.SHUFFLING:
            return self.train.batch_size * self.model.frames_per_video
        return self.train.video_merge.K


def parse_override(assignment: str) -> Tuple[List[str], Any]:
    """Split ``a.b.c=value``; the value is read as a TOML literal, else kept as a string."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, raw = assignment.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"override '{assignment}' has an empty key")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for assignment in overrides:
        path, value = parse_override(assignment)
        node = raw
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{assignment}' descends into a non-table value", [".".join(path)])
            node = child
        node[path[-1]] = value
    return raw


def validate_run_config(raw: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        fields = [".".join(str(p) for p in err["loc"]) or "<root>" for err in e.errors()]
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {details}", fields) from e


def load_raw_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config file {path} is not valid TOML: {e}") from e


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    """Read a TOML config, apply ``--set`` overrides and validate."""
    raw = apply_overrides(load_raw_config(path), overrides)
    return validate_run_config(raw)


def write_config_echo(config: RunConfig, run_dir: Path) -> Path:
    path = Path(run_dir) / "config.json"
    path.write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return path
