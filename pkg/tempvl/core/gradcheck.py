"""Finite-difference verification of autodiff gradients."""
import logging
from typing import Callable, Dict, List, Mapping

import numpy as np

from tempvl.config import MlmConfig, ModelConfig, VideoMergeConfig
from tempvl.core import tensor as T
from tempvl.core.tensor import Tensor
from tempvl.models import CoordinateFailure, GradCheckReport, TextMergeStrategy, TokenizedText, VideoMergeStrategy
from tempvl.services import merging, objectives
from tempvl.services.encoders import TVLModel

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
KINK_TOLERANCE = 1e-2
_REL_FLOOR = 1e-6
_MAX_LISTED_FAILURES = 20


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| over the larger magnitude, floored so tiny gradients are not over-penalised."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _REL_FLOOR)


def check_gradients(
    f: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    name: str = "case",
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    kink_tolerance: float = KINK_TOLERANCE,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` against central differences.

    Every coordinate of every tensor that the graph reaches is perturbed in
    place. A coordinate is also flagged when its forward and backward one-sided
    differences disagree, which marks a non-differentiable point.
    """
    for tensor in tensors.values():
        tensor.zero_grad()
    loss = f()
    T.backward(loss)
    analytic = {key: (t.grad.copy() if t.grad is not None else None) for key, t in tensors.items()}

    with T.no_grad():
        base = f().item()

    failures: List[CoordinateFailure] = []
    max_rel = 0.0
    n_checked = 0
    for key, tensor in tensors.items():
        grad = analytic[key]
        if grad is None:
            continue
        for index in np.ndindex(tensor.shape):
            original = tensor.data[index]
            with T.no_grad():
                tensor.data[index] = original + step
                plus = f().item()
                tensor.data[index] = original - step
                minus = f().item()
                tensor.data[index] = original + 2.0 * step
                plus2 = f().item()
                tensor.data[index] = original - 2.0 * step
                minus2 = f().item()
            tensor.data[index] = original

            # five-point central stencil
            numeric = (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * step)
            gap = (plus - base) / step - (base - minus) / step
            # curvature widens the one-sided gap with the step; a kink does not
            wide_gap = (plus2 - base) / (2.0 * step) - (base - minus2) / (2.0 * step)
            a = float(grad[index])
            rel = relative_error(a, numeric)
            max_rel = max(max_rel, rel)
            n_checked += 1
            reason = None
            if abs(gap) > kink_tolerance * max(1.0, abs(numeric)) and abs(wide_gap - gap) < 0.5 * abs(gap):
                reason = "kink"
            elif rel > tolerance:
                reason = "mismatch"
            if reason:
                failures.append(
                    CoordinateFailure(
                        tensor=key, index=tuple(int(i) for i in index), analytic=a,
                        numeric=numeric, rel_error=rel, reason=reason,
                    )
                )
    for tensor in tensors.values():
        tensor.zero_grad()

    report = GradCheckReport(
        name=name,
        passed=not failures,
        max_rel_error=max_rel,
        n_checked=n_checked,
        failures=failures[:_MAX_LISTED_FAILURES],
    )
    if failures:
        first = failures[0]
        logger.warning(
            f"Gradient check '{name}' failed on {len(failures)} coordinates, "
            f"first {first.tensor}{list(first.index)} ({first.reason}, rel err {first.rel_error:.3e})"
        )
    else:
        logger.debug(f"Gradient check '{name}' passed: {n_checked} coordinates, max rel err {max_rel:.3e}")
    return report


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    name: str = "case",
) -> GradCheckReport:
    """Check d f(x) / d x coordinate by coordinate.

    ``x`` tracks gradients only for the duration of the check; its flag and
    ``grad`` are restored afterwards.
    """
    tracked, grad = x.requires_grad, x.grad
    x.requires_grad = True
    try:
        return check_gradients(lambda: f(x), {"x": x}, name=name, step=step, tolerance=tolerance)
    finally:
        x.requires_grad, x.grad = tracked, grad


def gradcheck_model_config() -> ModelConfig:
    """A 488-parameter model with every component of the full one."""
    return ModelConfig(
        d_model=4,
        text_vocab_size=6,
        max_text_len=2,
        frames_per_video=2,
        raw_frame_dim=2,
        n_layers_text=1,
        n_layers_fusion=1,
        n_heads=2,
        ffn_dim=2,
        proj_dim=2,
        max_merged_len=10,
        init_std=0.5,
    )


def _op_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    w = rng.normal(size=(4, 2))
    readout = rng.normal(size=(3, 2))
    gain, bias = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
    mask = np.where(rng.random((2, 3)) < 0.3, T.NEG_INF, 0.0)
    mask[:, 0] = 0.0
    return {
        "matmul": (lambda x: T.sum(T.matmul(x, Tensor(w)) * Tensor(readout)), leaf(3, 4)),
        "softmax": (lambda x: T.sum(T.softmax(x) * Tensor(np.arange(8.0).reshape(2, 4))), leaf(2, 4)),
        "masked_softmax": (lambda x: T.sum(T.softmax(T.add_constant(x, mask)) * Tensor(np.arange(6.0).reshape(2, 3))), leaf(2, 3)),
        "layer_norm": (lambda x: T.sum(T.layer_norm(x, gain, bias) * Tensor(np.linspace(-1, 1, 12).reshape(2, 6))), leaf(2, 6)),
        "gelu": (lambda x: T.sum(T.gelu(x)), leaf(3, 3)),
        "exp_log": (lambda x: T.sum(T.log(T.exp(x) + Tensor(np.ones((2, 3)))) * T.reciprocal(T.exp(x))), leaf(2, 3)),
        "l2_normalize": (lambda x: T.sum(T.l2_normalize(x) * Tensor(np.arange(8.0).reshape(2, 4))), leaf(2, 4)),
        "cross_entropy": (lambda x: T.cross_entropy(x, [1, 3, 0]), leaf(3, 5)),
        "cross_entropy_from_logits": (lambda x: T.cross_entropy_from_logits(x, 2), leaf(6)),
        "take_rows_concat": (
            lambda x: T.sum(T.concat([T.take_rows(x, [2, 0, 2]), x], axis=0) * Tensor(np.arange(12.0).reshape(6, 2))),
            leaf(3, 2),
        ),
        "mean_transpose": (lambda x: T.sum(T.mean(T.transpose(x), axis=0) * Tensor([1.0, -2.0])), leaf(2, 3)),
    }


def _tiny_batch(config: ModelConfig, rng: np.random.Generator, batch_size: int = 2):
    raw = Tensor(rng.normal(size=(batch_size, config.frames_per_video, config.raw_frame_dim)))
    first_word = max(config.special_ids) + 1
    texts = [
        TokenizedText(
            text_id=f"t{i}",
            ids=(config.cls_token_id,
                 *(int(w) for w in rng.integers(first_word, config.text_vocab_size, size=config.max_text_len)),
                 config.sep_token_id),
        )
        for i in range(batch_size)
    ]
    video_ids = [f"v{i}" for i in range(batch_size)]
    return raw, video_ids, texts


def _loss_cases(seed: int) -> Dict[str, tuple]:
    config = gradcheck_model_config()
    model = TVLModel(config, seed=seed)
    rng = np.random.default_rng(seed)
    raw, video_ids, texts = _tiny_batch(config, rng)
    text_ids = [t.text_id for t in texts]
    t = config.frames_per_video

    shuffle_plans = [merging.plan_video_shuffle(video_ids, t, seed + i, text_ids) for i in range(len(texts))]
    sample_config = VideoMergeConfig(strategy=VideoMergeStrategy.SAMPLING, K=3, K_p_min=1, K_p_max=2)
    sample_plans = [
        merging.plan_video_sample(video_ids, t, text.text_id, sample_config, seed + 10 + i, text_ids=text_ids)
        for i, text in enumerate(texts)
    ]
    cls_plans = [
        merging.plan_text_merge(TextMergeStrategy.MERGE_CLS, texts, seed + 20 + j, video_ids=video_ids)
        for j in range(len(video_ids))
    ]
    word_plans = [
        merging.plan_text_merge(TextMergeStrategy.MERGE_WORDS, texts, seed + 30 + j, config.max_merged_len, video_ids)
        for j in range(len(video_ids))
    ]
    mlm = MlmConfig(mask_probability=0.5, mask_token_id=config.mask_token_id)

    def masked_lm():
        loss, _ = objectives.mlm_loss(model, raw, texts, mlm, np.random.default_rng(seed + 40))
        return loss

    cases = {
        "moment_loss[shuffle]": lambda: objectives.video_localization_loss(model, raw, video_ids, texts, shuffle_plans),
        "moment_loss[sample]": lambda: objectives.video_localization_loss(model, raw, video_ids, texts, sample_plans),
        "text_cls_loss": lambda: objectives.text_localization_loss(model, raw, video_ids, texts, cls_plans),
        "text_span_loss": lambda: objectives.text_localization_loss(model, raw, video_ids, texts, word_plans),
        "contrastive_loss": lambda: objectives.contrastive_term(model, raw, texts, model.temperature(True, 0.07)),
        "mlm_loss": masked_lm,
    }
    params = dict(model.named_parameters())
    return {name: (fn, params) for name, fn in cases.items()}


def run_gradient_suite(
    tolerance: float = DEFAULT_TOLERANCE,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    include_ops: bool = True,
    include_losses: bool = True,
) -> List[GradCheckReport]:
    """Check every primitive op and every loss-to-parameter path of a tiny model."""
    reports: List[GradCheckReport] = []
    rng = np.random.default_rng(seed)
    if include_ops:
        for name, (fn, x) in _op_cases(rng).items():
            reports.append(finite_difference_check(fn, x, step=step, tolerance=tolerance, name=name))
    if include_losses:
        for name, (fn, params) in _loss_cases(seed).items():
            reports.append(check_gradients(fn, params, name=name, step=step, tolerance=tolerance))
    failed = [r.name for r in reports if not r.passed]
    logger.info(f"Gradient suite: {len(reports) - len(failed)}/{len(reports)} cases passed")
    return reports

