"""Finite-difference checks: one small case per primitive op, and the complete training loss on a tiny model."""

from __future__ import annotations

import time
from typing import Callable, Dict

import numpy as np

from . import numerics as nx
from .models import ModelDescriptor, init_params
from .numerics import GradCheckReport, Tensor, grad_check
from .schedules import make_schedule
from .training import TrainBatch, LabeledSample, TrainConfig, total_loss

# One norm group per layer: with single-channel groups a conv bias feeding a
# norm has an identically zero gradient, which relative error cannot score.
TINY = ModelDescriptor(
    image_size=4, in_channels=2, base_channels=2, channel_mult=(1, 1), num_res_blocks=1, attn_resolutions=(2,),
    emb_dim=4, enc_base_channels=2, enc_channel_mult=(1, 2), enc_num_res_blocks=1, enc_attn_resolutions=(),
    max_groups=1,
)


def tiny_setup(dtype=np.float64, seed: int = 0):
    """Tiny params (zero-initialised tails replaced by small noise), a fixed batch and a config."""
    rng = np.random.default_rng(seed)
    with nx.default_dtype(dtype):
        params = init_params(TINY, seed)
        for name, p in params.items():
            if not p.data.any():
                p.data[...] = 0.3 * rng.standard_normal(p.shape)
    imgs = lambda n: rng.uniform(-1, 1, (n, TINY.in_channels, TINY.image_size, TINY.image_size)).astype(dtype)
    batch = TrainBatch(
        [LabeledSample(0, imgs(3), imgs(1)[0]), LabeledSample(1, imgs(2), imgs(1)[0]), LabeledSample(0, imgs(2), imgs(1)[0])],
        imgs(2),
    )
    cfg = TrainConfig(alpha1=0.5, alpha2=0.5, total_steps=10, batch_size=5, labeled_fraction=0.6, p_start=0.3, p_end=0.3)
    return params, batch, cfg


def tiny_model_grad_check(dtype=np.float64, seed: int = 0, eps: float | None = None,
                          max_elements: int | None = None) -> GradCheckReport:
    """Check every parameter of encoder and generator through the full multi-task loss."""
    params, batch, cfg = tiny_setup(dtype, seed)
    schedule = make_schedule("cosine", 10)

    def f():
        return total_loss(batch, params, schedule, 5, cfg, np.random.default_rng(seed))[0]

    # differences are always taken in float64, so one step size serves both dtypes
    return grad_check(f, params, eps=1e-5 if eps is None else eps, max_elements=max_elements)


def _primitive_cases() -> Dict[str, Callable]:
    def case_add(p, c):
        a, b = p(3, 4), p(1, 4)
        return lambda: (nx.add(a, b) * nx.add(a, b)).sum(), [a, b]

    def case_sub_mul_div(p, c):
        a, b = p(2, 3), p(2, 3)
        d = p(2, 3, positive=True)
        return lambda: nx.div(nx.mul(nx.sub(a, b), a), d).sum(), [a, b, d]

    def case_matmul(p, c):
        a, b = p(2, 3, 4), p(4, 5)
        return lambda: nx.square(nx.matmul(a, b)).mean(), [a, b]

    def case_conv(p, c):
        x, w, b = p(2, 3, 5, 5), p(4, 3, 3, 3), p(4)
        return lambda: nx.square(nx.conv2d(x, w, b, padding=1)).mean(), [x, w, b]

    def case_conv_strided(p, c):
        x, w, b = p(1, 2, 6, 6), p(3, 2, 3, 3), p(3)
        return lambda: nx.square(nx.conv2d(x, w, b, stride=2, padding=1)).mean(), [x, w, b]

    def case_conv_pointwise(p, c):
        x, w = p(2, 3, 3, 3), p(2, 3, 1, 1)
        return lambda: nx.square(nx.conv2d(x, w)).sum(), [x, w]

    def case_upsample(p, c):
        x, t = p(1, 2, 3, 3), c(1, 2, 6, 6)
        return lambda: (nx.upsample_nearest(x) * t).sum(), [x]

    def case_avg_pool(p, c):
        x = p(1, 2, 4, 4)
        return lambda: nx.square(nx.avg_pool2d(x, 2)).sum(), [x]

    def case_reductions(p, c):
        x = p(3, 4, 2)
        return lambda: nx.square(x.sum(axis=1)).mean() + nx.square(x.mean(axis=(0, 2), keepdims=True)).sum(), [x]

    def case_softmax(p, c):
        x, t = p(3, 5), c(3, 5)
        return lambda: (nx.softmax(x, axis=-1) * t).sum(), [x]

    def case_logsumexp_masked(p, c):
        x = p(4, 4)
        mask = np.eye(4, dtype=bool) | np.eye(4, k=1, dtype=bool)
        return lambda: nx.logsumexp(x, axis=1, mask=mask).sum(), [x]

    def case_group_norm(p, c):
        x, g, b, t = p(2, 4, 3, 3), p(4), p(4), c(2, 4, 3, 3)
        return lambda: (nx.group_norm(x, g, b, groups=2) * t).sum(), [x, g, b]

    def case_layer_norm(p, c):
        x, g, b, t = p(3, 5), p(5), p(5), c(3, 5)
        return lambda: (nx.layer_norm(x, g, b) * t).sum(), [x, g, b]

    def case_activations(p, c):
        x = p(4, 3)
        return lambda: (nx.silu(x) * nx.sigmoid(x)).sum() + nx.relu(x + 0.05).sum(), [x]

    def case_exp_log_sqrt_pow(p, c):
        x = p(3, 3, positive=True)
        return lambda: (nx.exp(x) + nx.log(x) * nx.sqrt(x) + x ** 1.5).sum(), [x]

    def case_attention(p, c):
        q, k, v = p(2, 4, 3), p(2, 5, 3), p(2, 5, 3)
        return lambda: nx.square(nx.scaled_dot_product_attention(q, k, v)).sum(), [q, k, v]

    def case_shape_ops(p, c):
        x, y = p(2, 3, 4), p(2, 1, 4)
        return lambda: nx.square(nx.concat([x, y], axis=1).transpose(2, 0, 1).reshape(4, -1)[1:3, ::2]).sum(), [x, y]

    def case_where_gather(p, c):
        x, y = p(5), p(5)
        cond = np.array([True, False, True, False, True])
        return lambda: nx.square(nx.where(cond, x, y)[np.array([0, 0, 3])]).sum(), [x, y]

    return {name[5:]: fn for name, fn in locals().items() if name.startswith("case_")}


PRIMITIVE_CASES = _primitive_cases()


def primitive_grad_check(dtype=np.float64, seed: int = 0, eps: float = 1e-5) -> Dict[str, GradCheckReport]:
    """Grad-check every primitive op on small random inputs of ``dtype``."""
    out = {}
    for i, (name, build) in enumerate(PRIMITIVE_CASES.items()):
        rng = np.random.default_rng([seed, i])

        def p(*shape, positive=False):
            v = rng.uniform(0.5, 2.0, shape) if positive else rng.standard_normal(shape)
            return Tensor(v, requires_grad=True, dtype=dtype)

        def c(*shape):
            return Tensor(rng.standard_normal(shape), dtype=dtype)

        with nx.default_dtype(dtype):
            f, params = build(p, c)
            out[name] = grad_check(f, params, eps=eps)
    return out


def full_grad_suite(dtype=np.float64) -> dict:
    """Primitive cases plus the tiny-model loss; returns the worst error overall and the wall time."""
    t0 = time.perf_counter()
    prims = primitive_grad_check(dtype)
    tiny = tiny_model_grad_check(dtype)
    worst = max([("tiny_model", tiny)] + list(prims.items()), key=lambda kv: kv[1].max_rel_err)
    return {"primitives": prims, "tiny_model": tiny, "worst": worst[0], "max_rel_err": worst[1].max_rel_err,
            "seconds": time.perf_counter() - t0}
