"""Multi-task training: identity-conditioned reconstruction, the identity loss
and unlabeled self-reconstruction, with curriculum identity dropout."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import diffusion
from . import numerics as nx
from .embedding import DegenerateBatchError, IdentityLossConfig, aggregate, draw_reference_count, identity_loss, sample_convex_weights
from .models import ModelDescriptor, ModelParams, encode, init_params, predict_eps, save_params
from .numerics import Tensor
from .schedules import NoiseSchedule

log = logging.getLogger(__name__)

DROP_MODES = ("self", "zero")
LOG_FIELDS = ("step", "l_diff_id", "l_id", "l_diff_g", "total", "p", "lr")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha1: float = 0.01
    alpha2: float = 0.01
    total_steps: int = 5000
    batch_size: int = 16
    labeled_fraction: float = 0.5
    lr: float = 5e-5
    warmup_steps: int = 500
    p_start: float = 1.0
    p_end: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    max_refs: int = 8
    min_refs: int = 2
    temperature: float = 1.0
    drop_mode: str = "self"
    loss_norm: str = "l2sq"
    pretrain_steps: int = 0
    checkpoint_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must be in [0, 1], got {self.labeled_fraction}")
        for name in ("p_start", "p_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")
        if self.warmup_steps < 0 or self.pretrain_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.drop_mode not in DROP_MODES:
            raise ValueError(f"drop_mode must be one of {DROP_MODES}")
        if self.min_refs < 2 or self.max_refs < self.min_refs:
            raise ValueError("need 2 <= min_refs <= max_refs")
        IdentityLossConfig(self.temperature)


def curriculum_p(step: int, total_steps: int, p_start: float = 1.0, p_end: float = 0.05) -> float:
    """Linear decay from p_start at step 0 to p_end at total_steps (clamped after)."""
    if step <= 0:
        return float(p_start)
    if step >= total_steps:
        return float(p_end)
    return p_start + (p_end - p_start) * step / total_steps


def lr_at(step: int, lr: float, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return float(lr)
    return lr * min(1.0, step / warmup_steps)


# --- batches -----------------------------------------------------------------------

@dataclass
class LabeledSample:
    label: int
    refs: np.ndarray  # (n, C, H, W)
    target: np.ndarray  # (C, H, W)


@dataclass
class TrainBatch:
    labeled: List[LabeledSample]
    unlabeled: np.ndarray  # (m, C, H, W)

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


def compose_batch(dataset, config: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """Draw ⌊B·fraction⌋ labeled samples (distinct identities where possible) and fill the rest from the unlabeled pool.

    Each labeled sample takes a random subset of its identity's images as
    references and reconstructs one of them.
    """
    n_lab = int(math.floor(config.batch_size * config.labeled_fraction))
    n_unl = config.batch_size - n_lab
    groups = {k: v for k, v in dataset.train.items() if len(v) >= config.min_refs}
    if n_lab and not groups:
        raise ValueError(f"no labeled identity has at least {config.min_refs} images")
    if n_unl and len(dataset.unlabeled) == 0:
        raise ValueError("labeled_fraction < 1 needs a nonempty unlabeled pool")
    ids = sorted(groups)
    chosen = rng.choice(ids, size=n_lab, replace=n_lab > len(ids)) if n_lab else []
    labeled = []
    for ident in chosen:
        imgs = groups[int(ident)]
        n = draw_reference_count(len(imgs), rng, config.max_refs, config.min_refs)
        pick = rng.choice(len(imgs), size=n, replace=False)
        target = int(pick[rng.integers(n)])
        labeled.append(LabeledSample(int(ident), imgs[pick], imgs[target]))
    unl_idx = rng.integers(len(dataset.unlabeled), size=n_unl) if n_unl else np.zeros(0, int)
    unlabeled = dataset.unlabeled[unl_idx] if n_unl else np.zeros((0,) + dataset.unlabeled.shape[1:], np.float32)
    return TrainBatch(labeled, unlabeled)


# --- loss --------------------------------------------------------------------------

@dataclass
class LossReport:
    l_diff_id: float
    l_id: Optional[float]  # None when the pool was degenerate
    l_diff_g: float
    total: float
    p: float
    n_dropped: int

    @property
    def id_omitted(self) -> bool:
        return self.l_id is None


def total_loss(batch: TrainBatch, params: ModelParams, schedule: NoiseSchedule, step: int,
               config: TrainConfig, rng: np.random.Generator):
    """Return (loss tensor, LossReport).

    The reported total is recomposed from the reported terms in float64, so it
    equals l_diff_id + α1·l_id + α2·l_diff_g exactly; the returned tensor is the
    same combination carried out in the parameter dtype.
    """
    p = curriculum_p(step, config.total_steps, config.p_start, config.p_end)
    n_lab, n_unl = len(batch.labeled), len(batch.unlabeled)
    dropped = [bool(rng.random() < p) for _ in batch.labeled]
    weights = [None if d else sample_convex_weights(len(s.refs), rng) for s, d in zip(batch.labeled, dropped)]

    # one encoder pass over every image that needs an embedding
    enc_inputs, spans = [], []
    pos = 0
    for s, d in zip(batch.labeled, dropped):
        if not d:
            imgs = s.refs
        elif config.drop_mode == "self":
            imgs = s.target[None]
        else:
            imgs = np.zeros((0,) + s.target.shape, s.target.dtype)
        enc_inputs.append(imgs)
        spans.append((pos, pos + len(imgs)))
        pos += len(imgs)
    if n_unl:
        enc_inputs.append(batch.unlabeled)
        unl_span = (pos, pos + n_unl)
        pos += n_unl
    emb = encode(params, np.concatenate(enc_inputs)) if pos else None

    zs, pool_idx, pool_labels = [], [], []
    D = params.descriptor.emb_dim
    for (a, b), s, d, w in zip(spans, batch.labeled, dropped, weights):
        if d and config.drop_mode == "zero":
            zs.append(Tensor(np.zeros((1, D))))
        elif d:
            zs.append(emb[a:b])
        else:
            zs.append(aggregate(emb[a:b], w).reshape(1, D))
            pool_idx.extend(range(a, b))
            pool_labels.extend([s.label] * (b - a))
    if n_unl:
        zs.append(emb[unl_span[0]:unl_span[1]])
    z = nx.concat(zs, axis=0)

    x0 = np.concatenate([s.target[None] for s in batch.labeled] + [batch.unlabeled])
    B = len(x0)
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = diffusion.q_sample(x0, t, eps, schedule)
    eps_pred = predict_eps(params, x_t, t, z)

    zero = Tensor(np.zeros(()))
    l_diff_id = diffusion.diffusion_loss(eps_pred[:n_lab], eps[:n_lab], config.loss_norm) if n_lab else zero
    l_diff_g = diffusion.diffusion_loss(eps_pred[n_lab:], eps[n_lab:], config.loss_norm) if n_unl else zero
    l_id = None
    if len(pool_idx) >= 2:
        try:
            l_id = identity_loss(emb[np.asarray(pool_idx)], pool_labels, IdentityLossConfig(config.temperature))
        except DegenerateBatchError:
            log.debug("step %d: identity-loss pool degenerate, term omitted", step)
    loss = l_diff_id + config.alpha2 * l_diff_g
    if l_id is not None:
        loss = loss + config.alpha1 * l_id

    r_diff_id, r_diff_g = float(l_diff_id.item()), float(l_diff_g.item())
    r_id = None if l_id is None else float(l_id.item())
    total = r_diff_id + (config.alpha1 * r_id if r_id is not None else 0.0) + config.alpha2 * r_diff_g
    return loss, LossReport(r_diff_id, r_id, r_diff_g, total, p, sum(dropped))


# --- optimiser -----------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay: w ← w − lr·(m̂/(√v̂+ε) + λ·w)."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        nx.zero_grad(self.params)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {"t": np.array([self.t], np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# --- loop ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    history: List[dict] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def _check_report(report: LossReport, step: int) -> None:
    for term in ("l_diff_id", "l_id", "l_diff_g", "total"):
        v = getattr(report, term)
        if v is not None and not math.isfinite(v):
            raise TrainingDivergedError(f"non-finite {term} = {v} at step {step}")


def _pretrain(params: ModelParams, dataset, schedule: NoiseSchedule, config: TrainConfig, rng, opt) -> None:
    """Unconditional denoising on the unlabeled pool (z = 0), generator only."""
    pool = dataset.unlabeled if len(dataset.unlabeled) else dataset.all_train_images()
    for step in range(1, config.pretrain_steps + 1):
        x0 = pool[rng.integers(len(pool), size=config.batch_size)]
        t = rng.integers(1, schedule.T + 1, size=len(x0))
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        loss = diffusion.diffusion_loss(predict_eps(params, diffusion.q_sample(x0, t, eps, schedule), t), eps, config.loss_norm)
        if not math.isfinite(loss.item()):
            raise TrainingDivergedError(f"non-finite pretrain loss at step {step}")
        loss.backward()
        clip_grad_norm(opt.params, config.grad_clip)
        opt.step(lr_at(step, config.lr, config.warmup_steps))
        opt.zero_grad()


def train(dataset, descriptor: ModelDescriptor, config: TrainConfig, schedule: NoiseSchedule,
          out_dir=None, params: Optional[ModelParams] = None,
          callback: Optional[Callable[[int, LossReport], None]] = None) -> TrainResult:
    """Run the full optimisation; reproducible from ``config.seed``.

    With ``out_dir`` set, writes ``train_log.csv`` and a checkpoint every
    ``checkpoint_interval`` steps plus ``final.ckpt``.
    """
    params = params if params is not None else init_params(descriptor, config.seed)
    if params.descriptor.image_size != dataset.resolution:
        raise ValueError(f"model resolution {params.descriptor.image_size} != dataset resolution {dataset.resolution}")
    rng = np.random.default_rng([config.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(params)

    if config.pretrain_steps:
        gen = [v for k, v in params.items() if k.startswith("gen.")]
        _pretrain(params, dataset, schedule, config,
                  np.random.default_rng([config.seed, 2]),
                  AdamW(gen, (config.beta1, config.beta2), config.adam_eps, config.weight_decay))

    opt = AdamW(params.parameters(), (config.beta1, config.beta2), config.adam_eps, config.weight_decay)
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        for step in range(1, config.total_steps + 1):
            batch = compose_batch(dataset, config, rng)
            loss, report = total_loss(batch, params, schedule, step, config, rng)
            _check_report(report, step)
            loss.backward()
            clip_grad_norm(opt.params, config.grad_clip)
            lr = lr_at(step, config.lr, config.warmup_steps)
            opt.step(lr)
            opt.zero_grad()
            row = {"step": step, "l_diff_id": report.l_diff_id, "l_id": report.l_id, "l_diff_g": report.l_diff_g,
                   "total": report.total, "p": report.p, "lr": lr}
            result.history.append(row)
            if writer is not None:
                writer.writerow(["" if row[k] is None else repr(row[k]) for k in LOG_FIELDS])
            if callback is not None:
                callback(step, report)
            if out is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
                result.checkpoints.append(save_params(params, out / f"step_{step:06d}.ckpt", step, config.seed))
        if out is not None:
            result.checkpoints.append(save_params(params, out / "final.ckpt", config.total_steps, config.seed,
                                                  {"train": asdict(config)}))
    finally:
        if fh is not None:
            fh.close()
    if not params.is_finite():
        raise TrainingDivergedError("parameters became non-finite")
    return result
