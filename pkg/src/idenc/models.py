"""Identity encoder and conditional U-Net noise predictor.

Both networks are plain functions of a :class:`ModelParams` mapping and their
inputs. Parameter names and shapes are fully determined by a
:class:`ModelDescriptor` via :func:`param_shapes`; :func:`init_params` fills
them deterministically from a seed.

The identity embedding ``z`` enters the generator through the timestep
pathway: ``emb = time_mlp(sinusoid(t)) + W_z z`` (no bias on ``W_z``), and
every residual block modulates its second normalisation with a per-channel
scale/shift computed from ``emb``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

from . import checkpoint as ckpt
from . import numerics as nx
from .numerics import ShapeError, Tensor

GEN = "gen."
ENC = "enc."


@dataclass(frozen=True)
class ModelDescriptor:
    image_size: int = 16
    in_channels: int = 3
    base_channels: int = 32
    channel_mult: Tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 2
    attn_resolutions: Tuple[int, ...] = (8, 4)
    heads: int = 1
    emb_dim: int = 64
    enc_base_channels: int = 32
    enc_channel_mult: Tuple[int, ...] = (1, 2, 2)
    enc_num_res_blocks: int = 1
    enc_attn_resolutions: Tuple[int, ...] = (4,)
    max_groups: int = 8

    def __post_init__(self):
        for f in ("channel_mult", "attn_resolutions", "enc_channel_mult", "enc_attn_resolutions"):
            object.__setattr__(self, f, tuple(int(v) for v in getattr(self, f)))
        if self.image_size % (2 ** max(len(self.channel_mult) - 1, 0)):
            raise ValueError(f"image_size {self.image_size} not divisible by U-Net downsampling")
        if self.enc_channel_mult and self.image_size % (2 ** (len(self.enc_channel_mult) - 1)):
            raise ValueError(f"image_size {self.image_size} not divisible by encoder downsampling")
        if not self.channel_mult:
            raise ValueError("channel_mult must have at least one level")

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelDescriptor":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDescriptor":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown descriptor fields: {sorted(unknown)}")
        return cls(**d)


def group_count(channels: int, max_groups: int = 8) -> int:
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class ModelParams(dict):
    """Ordered name -> Tensor mapping carrying its architecture descriptor."""

    def __init__(self, descriptor: ModelDescriptor, tensors=()):
        super().__init__(tensors)
        self.descriptor = descriptor

    def parameters(self) -> list:
        return list(self.values())

    def subset(self, prefix: str) -> "ModelParams":
        return ModelParams(self.descriptor, ((k, v) for k, v in self.items() if k.startswith(prefix)))

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def clone(self) -> "ModelParams":
        out = ModelParams(self.descriptor)
        for k, v in self.items():
            out[k] = Tensor(v.data, requires_grad=v.requires_grad, dtype=v.dtype, name=k)
        return out

    def set_trainable(self, flag: bool) -> None:
        for v in self.values():
            v.requires_grad = flag
            if not flag:
                v.grad = None

    def is_finite(self) -> bool:
        return all(v.is_finite() for v in self.values())


# ---------------------------------------------------------------------------
# shape enumeration


def _conv_shapes(name: str, cin: int, cout: int, k: int = 3, bias: bool = True) -> Iterator:
    yield f"{name}.w", (cout, cin, k, k)
    if bias:
        yield f"{name}.b", (cout,)


def _norm_shapes(name: str, c: int) -> Iterator:
    yield f"{name}.g", (c,)
    yield f"{name}.b", (c,)


def _res_shapes(name: str, cin: int, cout: int, emb_dim: Optional[int]) -> Iterator:
    yield from _norm_shapes(f"{name}.norm1", cin)
    yield from _conv_shapes(f"{name}.conv1", cin, cout)
    if emb_dim is not None:
        yield f"{name}.emb.w", (2 * cout, emb_dim)
        yield f"{name}.emb.b", (2 * cout,)
    yield from _norm_shapes(f"{name}.norm2", cout)
    yield from _conv_shapes(f"{name}.conv2", cout, cout)
    if cin != cout:
        yield from _conv_shapes(f"{name}.skip", cin, cout, k=1)


def _attn_shapes(name: str, c: int) -> Iterator:
    yield from _norm_shapes(f"{name}.norm", c)
    yield from _conv_shapes(f"{name}.qkv", c, 3 * c, k=1, bias=False)
    yield from _conv_shapes(f"{name}.proj", c, c, k=1)


def _unet_plan(d: ModelDescriptor):
    """Yield (kind, name, cin, cout, resolution) for the U-Net in forward order."""
    ch = d.base_channels
    res = d.image_size
    skips = [ch]
    cur = ch
    plan = [("conv_in", "conv_in", d.in_channels, ch, res)]
    last = len(d.channel_mult) - 1
    for level, mult in enumerate(d.channel_mult):
        out = ch * mult
        for i in range(d.num_res_blocks):
            plan.append(("res", f"down{level}.res{i}", cur, out, res))
            cur = out
            if res in d.attn_resolutions:
                plan.append(("attn", f"down{level}.attn{i}", cur, cur, res))
            skips.append(cur)
        if level != last:
            plan.append(("down", f"down{level}.downsample", cur, cur, res))
            res //= 2
            skips.append(cur)
    plan.append(("res", "mid.res0", cur, cur, res))
    plan.append(("attn", "mid.attn", cur, cur, res))
    plan.append(("res", "mid.res1", cur, cur, res))
    for level in range(last, -1, -1):
        out = ch * d.channel_mult[level]
        for i in range(d.num_res_blocks + 1):
            plan.append(("res_cat", f"up{level}.res{i}", cur + skips.pop(), out, res))
            cur = out
            if res in d.attn_resolutions:
                plan.append(("attn", f"up{level}.attn{i}", cur, cur, res))
        if level != 0:
            plan.append(("up", f"up{level}.upsample", cur, cur, res))
            res *= 2
    plan.append(("out", "out", cur, d.in_channels, res))
    return plan


def _encoder_plan(d: ModelDescriptor):
    ch = d.enc_base_channels
    res = d.image_size
    plan = [("conv_in", "conv_in", d.in_channels, ch, res)]
    cur = ch
    last = len(d.enc_channel_mult) - 1
    for level, mult in enumerate(d.enc_channel_mult):
        out = ch * mult
        for i in range(d.enc_num_res_blocks):
            plan.append(("res", f"level{level}.res{i}", cur, out, res))
            cur = out
            if res in d.enc_attn_resolutions:
                plan.append(("attn", f"level{level}.attn{i}", cur, cur, res))
        if level != last:
            plan.append(("down", f"level{level}.downsample", cur, cur, res))
            res //= 2
    plan.append(("head", "head", cur, d.emb_dim, res))
    return plan


def generator_shapes(d: ModelDescriptor) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    tdim = d.time_dim
    shapes["time.l1.w"] = (tdim, d.base_channels)
    shapes["time.l1.b"] = (tdim,)
    shapes["time.l2.w"] = (tdim, tdim)
    shapes["time.l2.b"] = (tdim,)
    shapes["zproj.w"] = (tdim, d.emb_dim)
    for kind, name, cin, cout, _ in _unet_plan(d):
        if kind == "conv_in":
            shapes.update(_conv_shapes(name, cin, cout))
        elif kind in ("res", "res_cat"):
            shapes.update(_res_shapes(name, cin, cout, tdim))
        elif kind == "attn":
            shapes.update(_attn_shapes(name, cin))
        elif kind in ("down", "up"):
            shapes.update(_conv_shapes(name, cin, cout))
        elif kind == "out":
            shapes.update(_norm_shapes("out.norm", cin))
            shapes.update(_conv_shapes("out.conv", cin, cout))
    return shapes


def encoder_shapes(d: ModelDescriptor) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    for kind, name, cin, cout, _ in _encoder_plan(d):
        if kind == "conv_in":
            shapes.update(_conv_shapes(name, cin, cout))
        elif kind == "res":
            shapes.update(_res_shapes(name, cin, cout, None))
        elif kind == "attn":
            shapes.update(_attn_shapes(name, cin))
        elif kind == "down":
            shapes.update(_conv_shapes(name, cin, cout))
        elif kind == "head":
            if d.enc_channel_mult:
                shapes.update(_norm_shapes("head.norm", cin))
            shapes["head.w"] = (cout, cin)
            shapes["head.b"] = (cout,)
    return shapes


def param_shapes(d: ModelDescriptor) -> Dict[str, tuple]:
    out = {ENC + k: v for k, v in encoder_shapes(d).items()}
    out.update({GEN + k: v for k, v in generator_shapes(d).items()})
    return out


# ---------------------------------------------------------------------------
# initialisation

_ZERO_INIT = (".conv2.", ".proj.", "out.conv.")


def _init_tensor(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf == "b" or any(z in name for z in _ZERO_INIT):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) / math.sqrt(fan_in)


def init_from_shapes(descriptor, shapes: Dict[str, tuple], seed: int, stream: int = 0) -> ModelParams:
    rng = np.random.default_rng([int(seed), stream])
    params = ModelParams(descriptor)
    for name, shape in shapes.items():
        params[name] = Tensor(_init_tensor(name, shape, rng), requires_grad=True, name=name)
    return params


def init_params(descriptor: ModelDescriptor, seed: int) -> ModelParams:
    """Encoder (``enc.*``) and generator (``gen.*``) parameters.

    Residual-branch tails (second conv of each block, attention output
    projections and the final output conv) start at zero.
    """
    enc = init_from_shapes(descriptor, {ENC + k: v for k, v in encoder_shapes(descriptor).items()}, seed, 1)
    gen = init_from_shapes(descriptor, {GEN + k: v for k, v in generator_shapes(descriptor).items()}, seed, 0)
    params = ModelParams(descriptor)
    params.update(enc)
    params.update(gen)
    return params


# ---------------------------------------------------------------------------
# layers


class _Scope:
    """Prefix-qualified view onto a params mapping."""

    __slots__ = ("params", "prefix", "max_groups")

    def __init__(self, params, prefix: str, max_groups: int):
        self.params = params
        self.prefix = prefix
        self.max_groups = max_groups

    def __getitem__(self, name):
        return self.params[self.prefix + name]

    def __contains__(self, name):
        return (self.prefix + name) in self.params

    def conv(self, name, x, stride=1):
        w = self[f"{name}.w"]
        b = self[f"{name}.b"] if f"{name}.b" in self else None
        k = w.shape[-1]
        return nx.conv2d(x, w, b, stride=stride, padding=k // 2)

    def linear(self, name, x):
        b = self[f"{name}.b"] if f"{name}.b" in self else None
        return nx.linear(x, self[f"{name}.w"], b)

    def norm(self, name, x):
        return nx.group_norm(x, self[f"{name}.g"], self[f"{name}.b"], group_count(x.shape[1], self.max_groups))

    def res(self, name, x, emb_act=None):
        h = self.conv(f"{name}.conv1", nx.silu(self.norm(f"{name}.norm1", x)))
        h = self.norm(f"{name}.norm2", h)
        if emb_act is not None:
            c = h.shape[1]
            ss = self.linear(f"{name}.emb", emb_act)
            scale = ss[:, :c].reshape(-1, c, 1, 1)
            shift = ss[:, c:].reshape(-1, c, 1, 1)
            h = h * (scale + 1.0) + shift
        h = self.conv(f"{name}.conv2", nx.silu(h))
        skip = self.conv(f"{name}.skip", x) if f"{name}.skip.w" in self else x
        return skip + h

    def attn(self, name, x, heads: int):
        B, C, H, W = x.shape
        qkv = self.conv(f"{name}.qkv", self.norm(f"{name}.norm", x))
        qkv = qkv.reshape(B, 3, heads, C // heads, H * W).transpose(1, 0, 2, 4, 3)
        a = nx.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        a = a.transpose(0, 1, 3, 2).reshape(B, C, H, W)
        return x + self.conv(f"{name}.proj", a)


def timestep_embedding(t, dim: int, dtype=None) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(dtype or nx.get_default_dtype())


def _check_images(x: Tensor, d: ModelDescriptor, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != d.in_channels or x.shape[2] != d.image_size or x.shape[3] != d.image_size:
        raise ShapeError(what, x.shape, (None, d.in_channels, d.image_size, d.image_size),
                         detail="resolution/channels must match the model descriptor")


def _param_dtype(params) -> np.dtype:
    return next(iter(params.values())).dtype


def encode(params: ModelParams, images) -> Tensor:
    """Identity embedding per image: (B, C, H, W) -> (B, D); a single CHW image gives (1, D)."""
    d = params.descriptor
    x = nx.as_tensor(images)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.dtype != _param_dtype(params):
        x = Tensor._wrap(x.data.astype(_param_dtype(params)))
    _check_images(x, d, "encode")
    s = _Scope(params, ENC, d.max_groups)
    h = None
    for kind, name, cin, cout, res in _encoder_plan(d):
        if kind == "conv_in":
            h = s.conv(name, x)
        elif kind == "res":
            h = s.res(name, h)
        elif kind == "attn":
            h = s.attn(name, h, d.heads)
        elif kind == "down":
            h = s.conv(name, h, stride=2)
        elif kind == "head":
            if "head.norm.g" in s:
                h = s.norm("head.norm", h)
            h = nx.silu(h).mean(axis=(2, 3))
            h = s.linear("head", h)
    return h


CrossHook = Callable[[str, Tensor], Tensor]


def predict_eps(params: ModelParams, x_t, t, z=None, hook: Optional[CrossHook] = None) -> Tensor:
    """ε_θ(x_t, t, z). ``z`` may be None (equivalent to the zero embedding).

    ``hook(site, h)`` is applied after every attention block; the conditioning
    adapters use it to add cross-attention to a condition feature map.
    """
    d = params.descriptor
    dtype = _param_dtype(params)
    x = nx.as_tensor(x_t)
    if x.dtype != dtype:
        x = Tensor._wrap(x.data.astype(dtype))
    _check_images(x, d, "predict_eps")
    B = x.shape[0]
    t = np.asarray(t).reshape(-1)
    if t.size == 1 and B > 1:
        t = np.full(B, t.item())
    if t.shape != (B,):
        raise ShapeError("predict_eps", x.shape, t.shape, detail="one timestep per batch element")
    s = _Scope(params, GEN, d.max_groups)

    emb = s.linear("time.l2", nx.silu(s.linear("time.l1", timestep_embedding(t, d.base_channels, dtype))))
    if z is not None:
        z = nx.as_tensor(z)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if z.shape[-1] != d.emb_dim or z.shape[0] not in (1, B):
            raise ShapeError("predict_eps", z.shape, (B, d.emb_dim), detail="identity embedding dimension")
        emb = emb + s.linear("zproj", z)
    emb_act = nx.silu(emb)

    hs = []
    h = None
    for kind, name, cin, cout, res in _unet_plan(d):
        if kind == "conv_in":
            h = s.conv(name, x)
            hs.append(h)
        elif kind == "res":
            h = s.res(name, h, emb_act)
            if name.startswith("down") and res not in d.attn_resolutions:
                hs.append(h)
        elif kind == "res_cat":
            h = s.res(name, nx.concat([h, hs.pop()], axis=1), emb_act)
        elif kind == "attn":
            h = s.attn(name, h, d.heads)
            if hook is not None:
                h = hook(name, h)
            if name.startswith("down"):
                hs.append(h)
        elif kind == "down":
            h = s.conv(name, h, stride=2)
            hs.append(h)
        elif kind == "up":
            h = s.conv(name, nx.upsample_nearest(h, 2))
        elif kind == "out":
            h = s.conv("out.conv", nx.silu(s.norm("out.norm", h)))
    return h


def attention_sites(d: ModelDescriptor) -> list:
    """(site name, channels, resolution) for every generator attention block."""
    return [(name, cin, res) for kind, name, cin, _, res in _unet_plan(d) if kind == "attn"]


def save_params(params: ModelParams, path, step: int = 0, seed: int = 0, extra: Optional[dict] = None):
    header = {"kind": "model", "model": asdict(params.descriptor)}
    header.update(extra or {})
    return ckpt.save_checkpoint({k: v.data for k, v in params.items()}, header, path, step, seed)


def params_from_checkpoint(c: "ckpt.Checkpoint") -> ModelParams:
    desc = ModelDescriptor.from_dict(c.model)
    expected = param_shapes(desc)
    if set(expected) != set(c.tensors) or any(tuple(c.tensors[k].shape) != v for k, v in expected.items()):
        raise ckpt.DescriptorMismatchError("checkpoint tensors do not match the descriptor's parameter set")
    params = ModelParams(desc)
    for name in expected:
        params[name] = Tensor(c.tensors[name], requires_grad=True, dtype=np.float32, name=name)
    return params


def load_params(path, descriptor: Optional[ModelDescriptor] = None) -> ModelParams:
    c = ckpt.load_checkpoint(path, asdict(descriptor) if descriptor is not None else None)
    return params_from_checkpoint(c)
