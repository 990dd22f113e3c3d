"""Dual encoders, multi-modal fusion encoder and prediction heads."""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from tempvl.config import ModelConfig
from tempvl.core import tensor as T
from tempvl.core.tensor import ShapeError, Tensor
from tempvl.models import TokenizedText

logger = logging.getLogger(__name__)

FRAME_SEGMENT = 0
WORD_SEGMENT = 1


@dataclass(frozen=True)
class FrameTokenSequence:
    """Projected frame tokens of one video, [T x C]."""
    video_id: str
    tokens: Tensor


@dataclass
class MultiModalBatch:
    """Frame slots followed by word slots, ready for :meth:`TVLModel.fuse`.

    ``tokens`` is [b, N, C]; ``attention_mask`` is boolean [b, N]; the first
    ``frame_count`` slots of every row are frames.
    """
    tokens: Tensor
    attention_mask: np.ndarray
    segment: np.ndarray
    frame_count: int

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


class ParameterStore:
    """Ordered name -> parameter tensor map."""

    def __init__(self, rng: np.random.Generator, init_std: float):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._rng = rng
        self._init_std = init_std

    def add(self, name: str, shape: Tuple[int, ...], init: str = "normal") -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name} registered twice")
        if init == "normal":
            data = self._rng.normal(0.0, self._init_std, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown initialiser {init}")
        param = Tensor(data, requires_grad=True)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: p.shape for name, p in self._params.items()}


class Linear:
    """x @ W + b over the last axis; a 1-D input maps to a 1-D output."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.weight = store.add(f"{name}.weight", (d_in, d_out))
        self.bias = store.add(f"{name}.bias", (d_out,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 1:
            y = self(T.reshape(x, (1, x.shape[0])))
            return T.reshape(y, (y.shape[-1],))
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm:
    """Learned gain and bias over the last axis."""

    def __init__(self, store: ParameterStore, name: str, d: int, eps: float = 1e-5):
        self.gain = store.add(f"{name}.gain", (d,), "ones")
        self.bias = store.add(f"{name}.bias", (d,), "zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class SelfAttention:
    """Multi-head self-attention over [b, n, C] with a key padding mask."""

    def __init__(self, store: ParameterStore, name: str, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.query = Linear(store, f"{name}.query", d_model, d_model)
        self.key = Linear(store, f"{name}.key", d_model, d_model)
        self.value = Linear(store, f"{name}.value", d_model, d_model)
        self.out = Linear(store, f"{name}.out", d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def weights(self, x: Tensor, key_mask: np.ndarray, causal: bool = False) -> Tuple[Tensor, Tensor]:
        """Attention weights [b, h, n, n] and the split values they apply to."""
        n = x.shape[1]
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        bias = np.where(key_mask[:, None, None, :], 0.0, T.NEG_INF)
        if causal:
            bias = bias + np.triu(np.full((n, n), T.NEG_INF), k=1)[None, None]
        bias = np.broadcast_to(bias, scores.shape)
        return T.softmax(T.add_constant(scores, bias), axis=-1), v

    def __call__(self, x: Tensor, key_mask: np.ndarray, causal: bool = False) -> Tensor:
        b, n, c = x.shape
        attn, v = self.weights(x, key_mask, causal)
        context = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.out(T.reshape(context, (b, n, c)))


class TransformerBlock:
    """Pre-norm block: attention then GELU feed-forward, both residual."""

    def __init__(self, store: ParameterStore, name: str, config: ModelConfig):
        self.norm1 = LayerNorm(store, f"{name}.norm1", config.d_model)
        self.attention = SelfAttention(store, f"{name}.attention", config.d_model, config.n_heads)
        self.norm2 = LayerNorm(store, f"{name}.norm2", config.d_model)
        self.ffn_in = Linear(store, f"{name}.ffn_in", config.d_model, config.hidden_dim)
        self.ffn_out = Linear(store, f"{name}.ffn_out", config.hidden_dim, config.d_model)

    def __call__(self, x: Tensor, key_mask: np.ndarray, causal: bool = False) -> Tensor:
        x = x + self.attention(self.norm1(x), key_mask, causal)
        return x + self.ffn_out(T.gelu(self.ffn_in(self.norm2(x))))


class Encoder:
    """Stack of pre-norm blocks with a final layer norm."""

    def __init__(self, store: ParameterStore, name: str, config: ModelConfig, n_layers: int):
        self.blocks = [TransformerBlock(store, f"{name}.layers.{i}", config) for i in range(n_layers)]
        self.final_norm = LayerNorm(store, f"{name}.final_norm", config.d_model)

    def __call__(self, x: Tensor, key_mask: np.ndarray, causal: bool = False) -> Tensor:
        for block in self.blocks:
            x = block(x, key_mask, causal)
        return self.final_norm(x)


class BoundaryHead:
    """linear(C->C) -> layer norm -> linear(C->2): start and end logits per slot."""

    def __init__(self, store: ParameterStore, name: str, d_model: int):
        self.hidden = Linear(store, f"{name}.hidden", d_model, d_model)
        self.norm = LayerNorm(store, f"{name}.norm", d_model)
        self.logits = Linear(store, f"{name}.logits", d_model, 2)

    def __call__(self, x: Tensor) -> Tensor:
        return self.logits(self.norm(self.hidden(x)))


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    """Promote [n, C] to [1, n, C]; the flag says whether to squeeze back."""
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


class TVLModel:
    """Video encoder, text encoder, fusion encoder and all heads.

    Parameters live in one :class:`ParameterStore` so checkpoints, the
    optimizer and gradient checks address them by name.
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None, seed: int = 0):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(seed)
        c = config.d_model
        self.params = ParameterStore(rng, config.init_std)
        p = self.params

        self.frame_proj = Linear(p, "video.frame_proj", config.raw_frame_dim, c)
        self.temporal_pos = p.add("video.temporal_pos", (config.frames_per_video, c))

        self.word_embed = p.add("text.word_embed", (config.text_vocab_size, c))
        self.text_pos = p.add("text.position", (config.max_text_len + 2, c))
        self.text_encoder = Encoder(p, "text.encoder", config, config.n_layers_text)

        self.merged_pos = p.add("fusion.merged_pos", (config.max_merged_len, c))
        self.segment_embed = p.add("fusion.segment", (2, c))
        self.fusion_encoder = Encoder(p, "fusion.encoder", config, config.n_layers_fusion)

        self.boundary = BoundaryHead(p, "heads.boundary", c)
        self.text_span = BoundaryHead(p, "heads.text_span", c)
        self.match = Linear(p, "heads.match", c, 1)
        self.mlm = Linear(p, "heads.mlm", c, config.text_vocab_size)

        self.video_proj = Linear(p, "contrastive.video_proj", c, config.proj_dim, bias=False)
        self.text_proj = Linear(p, "contrastive.text_proj", c, config.proj_dim, bias=False)
        self.log_temperature = p.add("contrastive.log_temperature", (), "zeros")

        logger.info(f"Model initialised with {self.params.count()} parameters")

    # -- unimodal encoders ---------------------------------------------------

    def encode_videos(self, raw_frames: Tensor) -> Tensor:
        """[b, T, D_raw] pooled frame features -> [b, T, C] frame tokens."""
        raw_frames = T.as_tensor(raw_frames)
        if raw_frames.ndim != 3 or raw_frames.shape[1:] != (self.config.frames_per_video, self.config.raw_frame_dim):
            raise ShapeError(
                f"expected raw frames [b, {self.config.frames_per_video}, {self.config.raw_frame_dim}], "
                f"got {raw_frames.shape}"
            )
        return self.frame_proj(raw_frames) + self.temporal_pos

    def encode_video(self, raw_frames: Tensor, video_id: str = "v0") -> FrameTokenSequence:
        raw_frames = T.as_tensor(raw_frames)
        if raw_frames.ndim != 2 or raw_frames.shape[0] != self.config.frames_per_video:
            raise ShapeError(f"expected {self.config.frames_per_video} frames, got shape {raw_frames.shape}")
        tokens = self.encode_videos(T.reshape(raw_frames, (1,) + raw_frames.shape))
        return FrameTokenSequence(video_id, T.reshape(tokens, tokens.shape[1:]))

    def check_text(self, text: TokenizedText) -> None:
        cfg = self.config
        ids = text.ids
        if len(ids) > cfg.max_text_len + 2:
            raise ValueError(f"text {text.text_id} has {len(ids)} tokens, limit is {cfg.max_text_len + 2}")
        if len(ids) < 2 or ids[0] != cfg.cls_token_id or ids[-1] != cfg.sep_token_id:
            raise ValueError(f"text {text.text_id} must start with CLS and end with SEP")
        if ids.count(cfg.cls_token_id) != 1 or ids.count(cfg.sep_token_id) != 1:
            raise ValueError(f"text {text.text_id} must contain exactly one CLS and one SEP")
        if any(not 0 <= i < cfg.text_vocab_size for i in ids):
            raise ValueError(f"text {text.text_id} has ids outside the vocabulary")

    def pad_texts(self, texts: Sequence[TokenizedText]) -> Tuple[np.ndarray, np.ndarray]:
        for text in texts:
            self.check_text(text)
        width = max(len(t) for t in texts)
        ids = np.full((len(texts), width), self.config.pad_token_id, dtype=np.int64)
        mask = np.zeros((len(texts), width), dtype=bool)
        for i, text in enumerate(texts):
            ids[i, : len(text)] = text.ids
            mask[i, : len(text)] = True
        return ids, mask

    def embed_ids(self, ids: np.ndarray) -> Tensor:
        return T.take_rows(self.word_embed, ids) + self.text_pos[: ids.shape[1]]

    def encode_texts(self, texts: Sequence[TokenizedText], causal: Optional[bool] = None) -> Tuple[Tensor, np.ndarray]:
        """Token features [b, L_max, C] and the padding mask [b, L_max]."""
        ids, mask = self.pad_texts(texts)
        return self.encode_ids(ids, mask, causal), mask

    def encode_ids(self, ids: np.ndarray, mask: np.ndarray, causal: Optional[bool] = None) -> Tensor:
        causal = self.config.causal_text if causal is None else causal
        x = self.embed_ids(ids)
        return self.text_encoder(x, mask, causal)

    def encode_text(self, text: TokenizedText, causal: Optional[bool] = None) -> Tensor:
        features, _ = self.encode_texts([text], causal)
        return T.reshape(features, features.shape[1:])

    # -- fusion --------------------------------------------------------------

    def build_batch(self, frames: Tensor, words: Tensor, word_mask: np.ndarray) -> MultiModalBatch:
        """Concatenate [b, F, C] frames and [b, W, C] words, adding merged positions and segments."""
        frames, _ = _batched(frames)
        words, _ = _batched(words)
        word_mask = np.atleast_2d(np.asarray(word_mask, dtype=bool))
        b, f, _ = frames.shape
        w = words.shape[1]
        if f + w > self.config.max_merged_len:
            raise ShapeError(f"fused length {f + w} exceeds max_merged_len {self.config.max_merged_len}")
        frames = frames + self.merged_pos[:f] + self.segment_embed[FRAME_SEGMENT]
        words = words + self.segment_embed[WORD_SEGMENT]
        tokens = T.concat([frames, words], axis=1)
        mask = np.concatenate([np.ones((b, f), dtype=bool), word_mask], axis=1)
        segment = np.array([FRAME_SEGMENT] * f + [WORD_SEGMENT] * w, dtype=np.int8)
        return MultiModalBatch(tokens, mask, segment, f)

    def fuse(self, batch: MultiModalBatch) -> Tensor:
        """Bidirectional fusion encoder over unmasked slots."""
        if batch.length > self.config.max_merged_len:
            raise ShapeError(f"fused length {batch.length} exceeds max_merged_len {self.config.max_merged_len}")
        tokens, squeeze = _batched(batch.tokens)
        mask = np.atleast_2d(batch.attention_mask)
        return _unbatched(self.fusion_encoder(tokens, mask), squeeze)

    # -- heads ---------------------------------------------------------------

    def boundary_head(self, fused_frames: Tensor) -> Tensor:
        """[..., M, C] -> [..., M, 2]; column 0 start logits, column 1 end logits."""
        return self.boundary(fused_frames)

    def text_span_head(self, fused_words: Tensor) -> Tensor:
        return self.text_span(fused_words)

    def match_head(self, fused_cls: Tensor) -> Tensor:
        """[..., B, C] -> [..., B]: one logit per merged sentence CLS slot."""
        logits = self.match(fused_cls)
        return T.reshape(logits, logits.shape[:-1])

    def mlm_logits(self, fused_words: Tensor) -> Tensor:
        return self.mlm(fused_words)

    # -- contrastive projections ----------------------------------------------

    def project_video(self, video_tokens: Tensor) -> Tensor:
        """Mean over frames, bias-free linear, L2 normalise: [..., T, C] -> [..., C_p]."""
        return T.l2_normalize(self.video_proj(T.mean(video_tokens, axis=-2)))

    def project_text(self, text_cls: Tensor) -> Tensor:
        return T.l2_normalize(self.text_proj(text_cls))

    def project_frames(self, frame_tokens: Tensor) -> Tensor:
        """Per-frame projection into the shared space, used for similarity maps."""
        return T.l2_normalize(self.video_proj(frame_tokens))

    def project_for_contrastive(self, video_tokens: Tensor, text_cls: Tensor) -> Tuple[Tensor, Tensor]:
        """One video [T, C] and one CLS [C] give two unit [C_p] vectors; leading batch axes pass through."""
        return self.project_video(video_tokens), self.project_text(text_cls)

    def temperature(self, learnable: bool = True, init: float = 0.07) -> Tensor:
        """exp(log_temperature) * init; a constant when not learnable."""
        if not learnable:
            return Tensor(init)
        return T.scale(T.exp(self.log_temperature), init)

    def parameter_norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(p.data)) for name, p in self.params.items()}

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())
