"""Degradations and the cross-attention adapter that conditions a frozen
personalized generator on an observed image (super-resolution, inpainting)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import checkpoint as ckpt
from . import diffusion
from . import numerics as nx
from .models import ModelDescriptor, ModelParams, attention_sites, encode, group_count, init_from_shapes, predict_eps
from .numerics import ShapeError, Tensor
from .schedules import NoiseSchedule
from .training import AdamW, clip_grad_norm, lr_at

log = logging.getLogger(__name__)

TASKS = ("sr", "inpaint")


# --- degradations --------------------------------------------------------------------

def degrade_sr(image, factor: int = 8) -> np.ndarray:
    """factor×factor block average; accepts (C, H, W) or (B, C, H, W)."""
    x = np.asarray(image)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    H, W = x.shape[-2:]
    if H % factor or W % factor:
        raise ValueError(f"image {H}x{W} not divisible by factor {factor}")
    lead = x.shape[:-2]
    return x.reshape(*lead, H // factor, factor, W // factor, factor).mean(axis=(-3, -1)).astype(x.dtype, copy=False)


def upsample(image, factor: int) -> np.ndarray:
    x = np.asarray(image)
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def degrade_mask(image, ratio: float = 0.6, rng: Optional[np.random.Generator] = None):
    """Zero a square of side round(ratio·min(H, W)) at a uniformly drawn position.

    Returns (masked image, mask) with mask = 1 on the hidden pixels. A batch
    gets one independent placement per image.
    """
    x = np.asarray(image)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    H, W = x.shape[-2:]
    side = int(round(ratio * min(H, W)))
    if side < 1:
        raise ValueError(f"mask side rounds to {side} < 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = x.reshape(-1, *x.shape[-3:]) if x.ndim >= 3 else x.reshape(1, 1, H, W)
    masks = np.zeros((len(batch), H, W), dtype=x.dtype)
    for i in range(len(batch)):
        top = int(rng.integers(H - side + 1))
        left = int(rng.integers(W - side + 1))
        masks[i, top:top + side, left:left + side] = 1
    out = batch * (1 - masks[:, None])
    return out.reshape(x.shape), masks.reshape(x.shape[:-3] + (H, W)) if x.ndim >= 3 else masks[0]


def condition_input(task: str, observation) -> np.ndarray:
    """Network input for a task: upsampled low-res image (sr) or masked image + mask channel (inpaint).

    For ``sr`` the observation is the low-resolution batch together with the
    target size; for ``inpaint`` it is the (masked image, mask) pair.
    """
    if task == "sr":
        low, size = observation
        low = np.asarray(low, np.float32)
        return upsample(low, size // low.shape[-1])
    if task == "inpaint":
        masked, mask = observation
        masked = np.asarray(masked, np.float32)
        mask = np.asarray(mask, np.float32)
        if masked.ndim == 3:
            masked, mask = masked[None], mask[None]
        return np.concatenate([masked, mask[:, None]], axis=1)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def observe(task: str, images, rng: np.random.Generator, factor: int = 8, ratio: float = 0.6):
    """Degrade clean images into the observation format of ``task``."""
    if task == "sr":
        return degrade_sr(images, factor), np.asarray(images).shape[-1]
    if task == "inpaint":
        return degrade_mask(images, ratio, rng)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


# --- adapter -------------------------------------------------------------------------

@dataclass(frozen=True)
class AdapterDescriptor:
    task: str = "sr"
    width: int = 16
    attn_dim: int = 16
    factor: int = 8
    ratio: float = 0.6

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")

    @property
    def cond_channels(self) -> int:
        return 3 if self.task == "sr" else 4


@dataclass
class ConditionAdapter:
    descriptor: AdapterDescriptor
    base: ModelDescriptor
    params: Dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())


def _levels(base: ModelDescriptor) -> List[int]:
    """Resolutions produced by the condition encoder, full size down to the coarsest attention site."""
    sites = attention_sites(base)
    if not sites:
        raise ValueError("base generator has no attention sites to attach an adapter to")
    low = min(r for _, _, r in sites)
    res, out = base.image_size, []
    while res >= low:
        out.append(res)
        res //= 2
    return out


def adapter_shapes(desc: AdapterDescriptor, base: ModelDescriptor) -> Dict[str, tuple]:
    w, a = desc.width, desc.attn_dim
    shapes = {"cenc.in.w": (w, desc.cond_channels, 3, 3), "cenc.in.b": (w,)}
    for i in range(1, len(_levels(base))):
        shapes[f"cenc.down{i}.w"] = (w, w, 3, 3)
        shapes[f"cenc.down{i}.b"] = (w,)
    for site, c, _ in attention_sites(base):
        shapes[f"x.{site}.norm.g"] = (c,)
        shapes[f"x.{site}.norm.b"] = (c,)
        shapes[f"x.{site}.q.w"] = (a, c)
        shapes[f"x.{site}.k.w"] = (a, w)
        shapes[f"x.{site}.v.w"] = (a, w)
        shapes[f"x.{site}.proj.w"] = (c, a)  # zero at init
        shapes[f"x.{site}.proj.b"] = (c,)
    return shapes


def init_adapter(desc: AdapterDescriptor, base: ModelDescriptor, seed: int) -> ConditionAdapter:
    params = init_from_shapes(base, adapter_shapes(desc, base), seed, 5)
    return ConditionAdapter(desc, base, dict(params))


def condition_features(adapter: ConditionAdapter, cond) -> Dict[int, Tensor]:
    p, d = adapter.params, adapter.base
    c = nx.as_tensor(np.asarray(cond, dtype=np.float32))
    if c.ndim != 4 or c.shape[1] != adapter.descriptor.cond_channels or c.shape[2:] != (d.image_size, d.image_size):
        raise ShapeError("adapter", c.shape, (None, adapter.descriptor.cond_channels, d.image_size, d.image_size),
                         detail="condition resolution must match the base generator")
    levels = _levels(d)
    h = nx.silu(nx.conv2d(c, p["cenc.in.w"], p["cenc.in.b"], padding=1))
    feats = {levels[0]: h}
    for i, res in enumerate(levels[1:], start=1):
        h = nx.silu(nx.conv2d(h, p[f"cenc.down{i}.w"], p[f"cenc.down{i}.b"], stride=2, padding=1))
        feats[res] = h
    return feats


def _tokens(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def _cross(adapter: ConditionAdapter, site: str, h: Tensor, cmap: Tensor) -> Tensor:
    p = adapter.params
    B, C, H, W = h.shape
    if cmap.shape[2:] != (H, W):
        raise ShapeError("adapter", h.shape, cmap.shape, detail=f"no condition features at site {site}")
    hn = nx.group_norm(h, p[f"x.{site}.norm.g"], p[f"x.{site}.norm.b"], group_count(C, adapter.base.max_groups))
    q = nx.linear(_tokens(hn), p[f"x.{site}.q.w"])
    ct = _tokens(cmap)
    k = nx.linear(ct, p[f"x.{site}.k.w"])
    v = nx.linear(ct, p[f"x.{site}.v.w"])
    a = nx.scaled_dot_product_attention(q, k, v)
    out = nx.linear(a, p[f"x.{site}.proj.w"], p[f"x.{site}.proj.b"])
    return h + out.transpose(0, 2, 1).reshape(B, C, H, W)


def adapter_forward(gen_params: ModelParams, adapter: ConditionAdapter, x_t, t, z, cond) -> Tensor:
    """Noise prediction of the base generator with cross-attention to the condition at every attention site."""
    if gen_params.descriptor != adapter.base:
        raise ckpt.DescriptorMismatchError("adapter was built for a different base descriptor")
    feats = condition_features(adapter, cond)
    return predict_eps(gen_params, x_t, t, z, hook=lambda site, h: _cross(adapter, site, h, feats[h.shape[2]]))


# --- training and inference ------------------------------------------------------------

@dataclass(frozen=True)
class AdapterTrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 5e-4
    warmup_steps: int = 50
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    max_refs: int = 8
    width: int = 16
    attn_dim: int = 16
    factor: int = 8
    ratio: float = 0.6
    seed: int = 0


def reference_embeddings(params: ModelParams, groups: Dict[int, np.ndarray]) -> Dict[int, np.ndarray]:
    with nx.no_grad():
        return {k: encode(params, v).data for k, v in groups.items()}


def train_adapter(params: ModelParams, dataset, task: str, config: AdapterTrainConfig, schedule: NoiseSchedule,
                  callback=None):
    """Fit a fresh adapter against the frozen ``params``; returns (adapter, per-step losses).

    Each example reconstructs one image of a training identity from its
    degraded version, conditioned on the mean embedding of that identity's
    other images.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    desc = AdapterDescriptor(task, config.width, config.attn_dim, config.factor, config.ratio)
    adapter = init_adapter(desc, params.descriptor, config.seed)
    flags = {k: v.requires_grad for k, v in params.items()}
    params.set_trainable(False)
    try:
        embs = reference_embeddings(params, dataset.train)
        ids = sorted(dataset.train)
        rng = np.random.default_rng([config.seed, 6])
        opt = AdamW(adapter.parameters(), weight_decay=config.weight_decay)
        losses = []
        for step in range(1, config.steps + 1):
            x0, zs = [], []
            for ident in rng.choice(ids, size=config.batch_size):
                imgs, e = dataset.train[int(ident)], embs[int(ident)]
                j = int(rng.integers(len(imgs)))
                others = np.delete(np.arange(len(imgs)), j)
                n = int(rng.integers(1, min(config.max_refs, len(others)) + 1))
                refs = rng.choice(others, size=n, replace=False)
                x0.append(imgs[j])
                zs.append(e[refs].mean(axis=0))
            x0 = np.stack(x0)
            cond = condition_input(task, observe(task, x0, rng, config.factor, config.ratio))
            t = rng.integers(1, schedule.T + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            pred = adapter_forward(params, adapter, diffusion.q_sample(x0, t, eps, schedule), t, np.stack(zs), cond)
            loss = diffusion.diffusion_loss(pred, eps)
            if not math.isfinite(loss.item()):
                raise RuntimeError(f"non-finite adapter loss at step {step}")
            loss.backward()
            clip_grad_norm(opt.params, config.grad_clip)
            opt.step(lr_at(step, config.lr, config.warmup_steps))
            opt.zero_grad()
            losses.append(loss.item())
            if callback is not None:
                callback(step, losses[-1])
    finally:
        for k, v in params.items():
            v.requires_grad = flags[k]
    for v in adapter.params.values():
        v.requires_grad = False
    return adapter, losses


def enhance(params: ModelParams, adapter: Optional[ConditionAdapter], references, observation, task: str,
            seed: int, schedule: NoiseSchedule, variance: str = "posterior", clip_x0: Optional[float] = 1.0) -> np.ndarray:
    """Sample one clean image per observation, conditioned on the mean embedding of ``references``."""
    if adapter is None:
        raise ValueError("enhance needs a trained adapter")
    if adapter.descriptor.task != task:
        raise ValueError(f"adapter was trained for {adapter.descriptor.task!r}, not {task!r}")
    cond = condition_input(task, observation)
    with nx.no_grad():
        z = encode(params, np.asarray(references, np.float32)).data.mean(axis=0, keepdims=True)
    d = params.descriptor

    def model(x, t, c):
        return adapter_forward(params, adapter, x, t, z, c)

    return diffusion.sample(model, cond, schedule, (len(cond), d.in_channels, d.image_size, d.image_size), seed, variance,
                            clip_x0=clip_x0)


def save_adapter(adapter: ConditionAdapter, path, step: int = 0, seed: int = 0):
    header = {"kind": "adapter", "model": asdict(adapter.base), "adapter": asdict(adapter.descriptor)}
    return ckpt.save_checkpoint({k: v.data for k, v in adapter.params.items()}, header, path, step, seed)


def load_adapter(path, base: ModelDescriptor) -> ConditionAdapter:
    """Load an adapter checkpoint, refusing one built for a different base generator."""
    c = ckpt.load_checkpoint(path, asdict(base))
    if c.header.get("kind") != "adapter":
        raise ckpt.CheckpointError(f"{path} is not an adapter checkpoint")
    desc = AdapterDescriptor(**c.header["adapter"])
    expected = adapter_shapes(desc, base)
    if set(expected) != set(c.tensors) or any(tuple(c.tensors[k].shape) != v for k, v in expected.items()):
        raise ckpt.DescriptorMismatchError("adapter tensors do not match the base descriptor")
    params = {k: Tensor(c.tensors[k], dtype=np.float32, name=k) for k in expected}
    return ConditionAdapter(desc, base, params)
