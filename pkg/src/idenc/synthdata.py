"""Procedural identity glyphs: every identity is a small parameter vector and
every image a deterministic render of it under a random nuisance variation."""

from __future__ import annotations

import colorsys
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "diamond")
RESOLUTIONS = (16, 32)
SUPERSAMPLE = 4

EYE_SPACING = (0.2, 0.5)
FACE_ASPECT = (0.7, 1.3)
MAX_SHIFT = 0.15
SCALE = (0.85, 1.15)
MAX_BRIGHTNESS = 0.15
MAX_ANGLE = 25.0
FACE_RADIUS = 0.55  # fraction of the image width at scale 1


@dataclass(frozen=True)
class SynthIdentity:
    id: int
    hue: float
    base_shape: str
    eye_spacing: float
    face_aspect: float
    marking_seed: int

    def __post_init__(self):
        if not 0.0 <= self.hue < 1.0:
            raise ValueError(f"hue out of range: {self.hue}")
        if self.base_shape not in SHAPES:
            raise ValueError(f"unknown shape {self.base_shape!r}")
        if not EYE_SPACING[0] <= self.eye_spacing <= EYE_SPACING[1]:
            raise ValueError(f"eye_spacing out of range: {self.eye_spacing}")
        if not FACE_ASPECT[0] <= self.face_aspect <= FACE_ASPECT[1]:
            raise ValueError(f"face_aspect out of range: {self.face_aspect}")


@dataclass(frozen=True)
class Variation:
    dx: float
    dy: float
    scale: float
    brightness: float
    background_seed: int
    angle: float  # degrees

    def __post_init__(self):
        if abs(self.dx) > MAX_SHIFT or abs(self.dy) > MAX_SHIFT:
            raise ValueError("translation out of range")
        if not SCALE[0] <= self.scale <= SCALE[1]:
            raise ValueError(f"scale out of range: {self.scale}")
        if abs(self.brightness) > MAX_BRIGHTNESS:
            raise ValueError(f"brightness out of range: {self.brightness}")
        if abs(self.angle) > MAX_ANGLE:
            raise ValueError(f"angle out of range: {self.angle}")


def sample_identity(rng: np.random.Generator, id: int = 0) -> SynthIdentity:
    return SynthIdentity(
        id=int(id),
        hue=float(rng.uniform(0.0, 1.0)),
        base_shape=SHAPES[int(rng.integers(len(SHAPES)))],
        eye_spacing=float(rng.uniform(*EYE_SPACING)),
        face_aspect=float(rng.uniform(*FACE_ASPECT)),
        marking_seed=int(rng.integers(2**31)),
    )


def sample_variation(rng: np.random.Generator) -> Variation:
    return Variation(
        dx=float(rng.uniform(-MAX_SHIFT, MAX_SHIFT)),
        dy=float(rng.uniform(-MAX_SHIFT, MAX_SHIFT)),
        scale=float(rng.uniform(*SCALE)),
        brightness=float(rng.uniform(-MAX_BRIGHTNESS, MAX_BRIGHTNESS)),
        background_seed=int(rng.integers(2**31)),
        angle=float(rng.uniform(-MAX_ANGLE, MAX_ANGLE)),
    )


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.15
    # upward triangle with its centroid at the origin
    return (v <= 0.75) & (v >= 1.6 * np.abs(u) - 1.05)


def _markings(seed: int) -> tuple:
    """Spot layout (u, v, radius) and spot hue, both fixed by the marking seed."""
    r = np.random.default_rng(seed)
    n = 2 + int(r.integers(3))
    spots = [(float(r.uniform(-0.5, 0.5)), float(r.uniform(-0.1, 0.55)), float(r.uniform(0.18, 0.32))) for _ in range(n)]
    return spots, float(r.uniform(0.0, 1.0))


def _background(seed: int, res: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    r = np.random.default_rng(seed)
    c0 = r.uniform(-0.8, -0.6, 3)
    c1 = c0 + r.uniform(-0.1, 0.1, 3)
    theta = r.uniform(0, 2 * math.pi)
    ramp = (np.cos(theta) * xs + np.sin(theta) * ys) / res + 0.5
    return c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]


def render(identity: SynthIdentity, variation: Variation, resolution: int) -> np.ndarray:
    """Rasterise one glyph as a (3, R, R) float32 array in [-1, 1]."""
    if resolution not in RESOLUTIONS:
        raise ValueError(f"unsupported resolution {resolution}; expected one of {RESOLUTIONS}")
    n = resolution * SUPERSAMPLE
    coords = (np.arange(n, dtype=np.float64) + 0.5) / SUPERSAMPLE
    ys, xs = np.meshgrid(coords, coords, indexing="ij")

    cx = resolution * (0.5 + variation.dx)
    cy = resolution * (0.5 + variation.dy)
    radius = FACE_RADIUS * resolution * variation.scale
    a = math.radians(variation.angle)
    px, py = (xs - cx) / radius, (ys - cy) / radius
    u = math.cos(a) * px + math.sin(a) * py
    v = -math.sin(a) * px + math.cos(a) * py
    u = u / identity.face_aspect

    face = _shape_mask(identity.base_shape, u, v)
    half = identity.eye_spacing
    eyes = ((u - half) ** 2 + (v + 0.25) ** 2 <= 0.15**2) | ((u + half) ** 2 + (v + 0.25) ** 2 <= 0.15**2)
    marks = np.zeros_like(face)
    spots, mark_hue = _markings(identity.marking_seed)
    for mu, mv, mr in spots:
        marks |= (u - mu) ** 2 + (v - mv) ** 2 <= mr * mr

    face_rgb = np.array(colorsys.hsv_to_rgb(identity.hue, 0.85, 0.95)) * 2.0 - 1.0
    mark_rgb = np.array(colorsys.hsv_to_rgb(mark_hue, 0.5, 1.0)) * 2.0 - 1.0
    eye_rgb = np.array([-0.9, -0.9, -0.9])

    img = _background(variation.background_seed, resolution, ys, xs)
    for mask, rgb in ((face, face_rgb), (face & marks, mark_rgb), (face & eyes, eye_rgb)):
        img = np.where(mask[None], rgb[:, None, None], img)
    img = img + variation.brightness
    img = img.reshape(3, resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(2, 4))
    return np.clip(img, -1.0, 1.0).astype(np.float32)


# --- PPM -----------------------------------------------------------------------

def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """The [-1, 1] values an image takes after a PPM round trip."""
    return (to_bytes(img).astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    data = to_bytes(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data)


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos + 1:pos + 1 + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


# --- datasets ------------------------------------------------------------------

@dataclass
class SynthDataset:
    resolution: int
    identities: Dict[int, SynthIdentity]
    train: Dict[int, np.ndarray]  # id -> (n, 3, R, R)
    test: Dict[int, np.ndarray]
    unlabeled: np.ndarray  # (m, 3, R, R)
    stats: dict = field(default_factory=dict)

    @property
    def train_ids(self) -> List[int]:
        return sorted(self.train)

    @property
    def test_ids(self) -> List[int]:
        return sorted(self.test)

    def all_train_images(self) -> np.ndarray:
        parts = [self.train[i] for i in self.train_ids]
        if len(self.unlabeled):
            parts.append(self.unlabeled)
        return np.concatenate(parts)


def _render_identity(ident: SynthIdentity, n: int, resolution: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, ident.id])
    return np.stack([render(ident, sample_variation(rng), resolution) for _ in range(n)])


def separation_stats(groups: Dict[int, np.ndarray]) -> dict:
    cents = {k: g.reshape(len(g), -1).mean(0) for k, g in groups.items()}
    intra = float(np.mean([np.linalg.norm(g.reshape(len(g), -1) - cents[k], axis=1).mean() for k, g in groups.items()]))
    keys = sorted(cents)
    inter = [np.linalg.norm(cents[a] - cents[b]) for i, a in enumerate(keys) for b in keys[i + 1:]]
    var = float(np.mean([g.var(axis=0).mean() for g in groups.values()]))
    return {"intra_pixel_variance": var, "intra_spread": intra, "inter_centroid_distance": float(np.mean(inter)) if inter else 0.0}


def generate_dataset(n_train_ids: int, n_test_ids: int, imgs_per_id: int, n_unlabeled: int,
                     resolution: int = 32, seed: int = 0) -> SynthDataset:
    """Render a dataset in memory. Unlabeled images each come from a fresh identity."""
    if n_train_ids < 1 or n_test_ids < 1:
        raise ValueError("need at least one train and one test identity")
    if imgs_per_id < 4:
        raise ValueError(f"imgs_per_id must be >= 4, got {imgs_per_id}")
    if n_unlabeled < 0:
        raise ValueError("n_unlabeled must be >= 0")
    if resolution not in RESOLUTIONS:
        raise ValueError(f"unsupported resolution {resolution}")
    rng = np.random.default_rng(seed)
    n_total = n_train_ids + n_test_ids + n_unlabeled
    idents = {i: sample_identity(rng, i) for i in range(n_total)}
    train = {i: _render_identity(idents[i], imgs_per_id, resolution, seed) for i in range(n_train_ids)}
    test = {i: _render_identity(idents[i], imgs_per_id, resolution, seed)
            for i in range(n_train_ids, n_train_ids + n_test_ids)}
    unl_ids = range(n_train_ids + n_test_ids, n_total)
    unlabeled = (np.concatenate([_render_identity(idents[i], 1, resolution, seed) for i in unl_ids])
                 if n_unlabeled else np.zeros((0, 3, resolution, resolution), np.float32))
    stats = separation_stats(train)
    log.info("synthetic dataset: %s", stats)
    return SynthDataset(resolution, idents, train, test, unlabeled, stats)


MANIFEST_FIELDS = ("path", "identity_id", "split", "labeled")


def save_dataset(ds: SynthDataset, out_dir) -> Path:
    """Write PPM images, ``manifest.csv`` and ``identities.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_FIELDS)
    for split, groups in (("train", ds.train), ("test", ds.test)):
        for i in sorted(groups):
            for k, img in enumerate(groups[i]):
                rel = f"images/{split}_{i:04d}_{k:02d}.ppm"
                write_ppm(out / rel, img)
                writer.writerow((rel, i, split, 1))
    for k, img in enumerate(ds.unlabeled):
        rel = f"images/unlabeled_{k:05d}.ppm"
        write_ppm(out / rel, img)
        writer.writerow((rel, -1, "train", 0))
    manifest = out / "manifest.csv"
    manifest.write_text(buf.getvalue())
    labeled = {i: asdict(ds.identities[i]) for i in sorted(set(ds.train) | set(ds.test))}
    meta = {"resolution": ds.resolution, "identities": labeled, "stats": ds.stats}
    (out / "identities.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return manifest


def build_dataset(n_train_ids: int, n_test_ids: int, imgs_per_id: int, n_unlabeled: int,
                  resolution: int, seed: int, out_dir) -> SynthDataset:
    ds = generate_dataset(n_train_ids, n_test_ids, imgs_per_id, n_unlabeled, resolution, seed)
    save_dataset(ds, out_dir)
    return ds


def load_dataset(root) -> SynthDataset:
    """Read a saved dataset back; pixel values are the PPM-quantised ones."""
    root = Path(root)
    meta = json.loads((root / "identities.json").read_text())
    idents = {int(k): SynthIdentity(**v) for k, v in meta["identities"].items()}
    train: Dict[int, list] = {}
    test: Dict[int, list] = {}
    unlabeled = []
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            img = read_ppm(root / row["path"])
            ident = int(row["identity_id"])
            if row["labeled"] == "0":
                unlabeled.append(img)
            else:
                (train if row["split"] == "train" else test).setdefault(ident, []).append(img)
    res = int(meta["resolution"])
    return SynthDataset(
        res, idents,
        {k: np.stack(v) for k, v in train.items()},
        {k: np.stack(v) for k, v in test.items()},
        np.stack(unlabeled) if unlabeled else np.zeros((0, 3, res, res), np.float32),
        meta.get("stats", {}),
    )


def nearest_centroid_accuracy(groups: Dict[int, np.ndarray]) -> float:
    """Leave-one-out nearest-centroid classification accuracy on raw pixels."""
    keys = sorted(groups)
    flat = {k: groups[k].reshape(len(groups[k]), -1).astype(np.float64) for k in keys}
    sums = {k: v.sum(0) for k, v in flat.items()}
    correct = total = 0
    for k in keys:
        for x in flat[k]:
            best, best_d = None, np.inf
            for j in keys:
                n = len(flat[j])
                c = (sums[j] - x) / (n - 1) if j == k else sums[j] / n
                d = float(((x - c) ** 2).sum())
                if d < best_d:
                    best, best_d = j, d
            correct += best == k
            total += 1
    return correct / total
