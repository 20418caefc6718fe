"""Evaluation: a small recognition network and the ID / Fréchet / perceptual /
diversity scores built on it."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .models import init_from_shapes
from .numerics import Tensor
from .training import AdamW

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractorConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 32)
    feature_dim: int = 16
    steps: int = 400
    batch_size: int = 32
    lr: float = 3e-3
    val_fraction: float = 0.25
    seed: int = 0


def _extractor_shapes(cfg: ExtractorConfig, n_classes: int) -> dict:
    shapes, cin = {}, cfg.in_channels
    for i, w in enumerate(cfg.widths):
        shapes[f"conv{i}.w"] = (w, cin, 3, 3)
        shapes[f"conv{i}.b"] = (w,)
        cin = w
    shapes["feat.w"] = (cfg.feature_dim, cin)
    shapes["feat.b"] = (cfg.feature_dim,)
    shapes["cls.w"] = (n_classes, cfg.feature_dim)
    shapes["cls.b"] = (n_classes,)
    return shapes


@dataclass
class FeatureExtractor:
    """conv-silu-pool stack, global mean, linear to F features, linear classifier head."""

    config: ExtractorConfig
    params: Dict[str, Tensor]
    classes: List[int]
    val_accuracy: float = float("nan")

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _trunk(self, x) -> tuple:
        h = nx.as_tensor(np.asarray(x, dtype=np.float32))
        if h.ndim == 3:
            h = h.reshape(1, *h.shape)
        maps = []
        for i in range(len(self.config.widths)):
            h = nx.silu(nx.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], padding=1))
            maps.append(h)
            if i < len(self.config.widths) - 1 and h.shape[2] % 2 == 0:
                h = nx.avg_pool2d(h, 2)
        f = nx.linear(h.mean(axis=(2, 3)), self.params["feat.w"], self.params["feat.b"])
        return f, maps

    def logits(self, x) -> Tensor:
        f, _ = self._trunk(x)
        return nx.linear(nx.silu(f), self.params["cls.w"], self.params["cls.b"])

    def features(self, x, batch: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        with nx.no_grad():
            return np.concatenate([self._trunk(x[i:i + batch])[0].data for i in range(0, len(x), batch)])

    def feature_maps(self, x) -> List[np.ndarray]:
        with nx.no_grad():
            return [m.data for m in self._trunk(x)[1]]

    def predict(self, x) -> np.ndarray:
        with nx.no_grad():
            return np.asarray(self.classes)[self.logits(x).data.argmax(axis=1)]


def fit_feature_extractor(groups: Dict[int, np.ndarray], config: ExtractorConfig = ExtractorConfig()) -> FeatureExtractor:
    """Train an identity classifier on ``{identity: images}``; the penultimate layer is the feature space.

    The last ``val_fraction`` of each identity's images are held out and the
    resulting accuracy is stored on the extractor.
    """
    classes = sorted(groups)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 identities, got {len(classes)}")
    xs_tr, ys_tr, xs_va, ys_va = [], [], [], []
    for ci, k in enumerate(classes):
        imgs = np.asarray(groups[k], dtype=np.float32)
        n_val = int(round(len(imgs) * config.val_fraction))
        n_val = min(n_val, len(imgs) - 1)
        xs_tr.append(imgs[:len(imgs) - n_val])
        ys_tr += [ci] * (len(imgs) - n_val)
        xs_va.append(imgs[len(imgs) - n_val:])
        ys_va += [ci] * n_val
    x_tr, y_tr = np.concatenate(xs_tr), np.asarray(ys_tr)
    x_va, y_va = np.concatenate(xs_va), np.asarray(ys_va)

    params = init_from_shapes(None, _extractor_shapes(config, len(classes)), config.seed, 3)
    ext = FeatureExtractor(config, params, classes)
    opt = AdamW(list(params.values()), weight_decay=0.0)
    rng = np.random.default_rng([config.seed, 4])
    for step in range(config.steps):
        idx = rng.integers(len(x_tr), size=config.batch_size)
        xb = x_tr[idx]
        flip = rng.random(len(xb)) < 0.5  # mirror augmentation
        xb = np.where(flip[:, None, None, None], xb[..., ::-1], xb)
        logp = nx.log_softmax(ext.logits(xb), axis=1)
        onehot = np.zeros(logp.shape, np.float32)
        onehot[np.arange(len(idx)), y_tr[idx]] = 1.0
        loss = -(logp * onehot).sum() * (1.0 / len(idx))
        loss.backward()
        opt.step(config.lr * min(1.0, (step + 1) / 50))
        opt.zero_grad()
    for p in params.values():
        p.requires_grad = False
    if len(x_va):
        ext.val_accuracy = float((ext.predict(x_va) == np.asarray(classes)[y_va]).mean())
    log.info("feature extractor: %d classes, validation accuracy %.3f", len(classes), ext.val_accuracy)
    return ext


# --- scores ------------------------------------------------------------------------

def cosine_distance_to_centroid(feats: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    fn = np.linalg.norm(feats, axis=1)
    cn = np.linalg.norm(centroid)
    if cn == 0 or np.any(fn == 0):
        raise ValueError("zero-norm feature vector; cosine distance undefined")
    return 1.0 - feats @ centroid / (fn * cn)


def id_score(generated, real, extractor: Optional[FeatureExtractor] = None) -> float:
    """Mean cosine distance from each generated feature to the centroid of the real features.

    With ``extractor=None`` both inputs are taken to be feature matrices already.
    """
    fg = extractor.features(generated) if extractor is not None else np.asarray(generated, dtype=np.float64)
    fr = extractor.features(real) if extractor is not None else np.asarray(real, dtype=np.float64)
    if len(fg) == 0 or len(fr) == 0:
        raise ValueError("id_score needs nonempty generated and real sets")
    return float(cosine_distance_to_centroid(fg, fr.mean(axis=0)).mean())


def gaussian_stats(features) -> tuple:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"expected (N, F) features, got {f.shape}")
    n, d = f.shape
    if n < d + 1:
        raise ValueError(f"need at least F+1 = {d + 1} samples for a covariance, got {n}")
    return f.mean(axis=0), np.cov(f, rowvar=False).reshape(d, d)


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((s + s.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b, neg_tol: float = 1e-8) -> float:
    """‖μa−μb‖² + Tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½).

    Eigenvalues of the inner product below −neg_tol·max(1, λmax) indicate a
    non-PSD input and raise; smaller negatives are rounding and clamp to 0.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(mu_b, float))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    ra = _psd_sqrt(cov_a)
    m = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    if w.size and w.min() < -neg_tol * max(1.0, float(np.abs(w).max())):
        raise ValueError(f"covariance product has negative eigenvalue {w.min():.3e}")
    tr_sqrt = float(np.sqrt(np.clip(w, 0, None)).sum())
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt, 0.0))


def frechet_distance(features_a, features_b) -> float:
    return frechet_from_stats(*gaussian_stats(features_a), *gaussian_stats(features_b))


def perceptual_distance(img_a, img_b, extractor: FeatureExtractor) -> np.ndarray | float:
    """Mean over extractor layers of the squared distance between unit-normalised feature maps.

    Each pixel's channel vector is scaled to unit length before differencing.
    Batched inputs give one distance per pair.
    """
    a, b = np.asarray(img_a, np.float32), np.asarray(img_b, np.float32)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    single = a.ndim == 3
    if single:
        a, b = a[None], b[None]
    total = np.zeros(len(a))
    maps_a, maps_b = extractor.feature_maps(a), extractor.feature_maps(b)
    for fa, fb in zip(maps_a, maps_b):
        na = fa / (np.sqrt((fa * fa).sum(axis=1, keepdims=True)) + 1e-10)
        nb = fb / (np.sqrt((fb * fb).sum(axis=1, keepdims=True)) + 1e-10)
        total += ((na - nb) ** 2).sum(axis=1).mean(axis=(1, 2))
    out = total / len(maps_a)
    return float(out[0]) if single else out


def generation_diversity(images) -> float:
    """Population standard deviation of per-image means."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 0 or len(x) == 0:
        raise ValueError("generation_diversity needs at least one image")
    means = x.reshape(len(x), -1).mean(axis=1)
    # shifting by one member keeps identical means exactly zero after rounding
    return float((means - means[0]).std())


@dataclass
class MetricReport:
    id_score: float
    fid: float
    diversity: float
    lpips: Optional[float] = None
    n_generated: int = 0
    n_real: int = 0
    config_digest: str = ""

    def __post_init__(self):
        for k in ("id_score", "fid", "diversity", "lpips"):
            v = getattr(self, k)
            if v is not None and not (np.isfinite(v) and v >= -1e-12):
                raise ValueError(f"{k} must be finite and >= 0, got {v}")

    def as_row(self) -> dict:
        return asdict(self)
