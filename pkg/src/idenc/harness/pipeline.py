"""End-to-end entry points: personalized generation, evaluation and the ablation table."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .. import diffusion
from .. import numerics as nx
from ..metrics import FeatureExtractor, MetricReport, fit_feature_extractor, frechet_distance, generation_diversity, id_score
from ..models import ModelParams, encode, predict_eps
from ..schedules import NoiseSchedule
from ..synthdata import SynthDataset, generate_dataset
from ..training import TrainConfig, train
from .config import RunConfig, dump_config, schedule_from

log = logging.getLogger(__name__)


def identity_embedding(params: ModelParams, references) -> np.ndarray:
    """Uniform average of the per-reference embeddings, shape (1, D)."""
    refs = np.asarray(references, dtype=np.float32)
    if refs.ndim == 3:
        refs = refs[None]
    if len(refs) == 0:
        raise ValueError("need at least one reference image")
    with nx.no_grad():
        return encode(params, refs).data.mean(axis=0, keepdims=True)


def personalize_generate(params: ModelParams, references, count: int, seed: int, schedule: NoiseSchedule,
                         variance: str = "posterior", batch: int = 32, clip_x0: Optional[float] = 1.0) -> np.ndarray:
    """``count`` samples conditioned on the averaged reference embedding.

    Images live in [-1, 1], so each step's x_0 prediction is clamped to
    ``clip_x0`` by default (``None`` runs the plain chain).

    Chain ``i`` is seeded from (seed, i), so the output for a given chain does
    not depend on ``batch``.
    """
    d = params.descriptor
    refs = np.asarray(references, dtype=np.float32)
    if refs.ndim == 3:
        refs = refs[None]
    if refs.shape[1:] != (d.in_channels, d.image_size, d.image_size):
        raise ValueError(f"reference shape {refs.shape[1:]} does not match model resolution {d.image_size}")
    z = identity_embedding(params, refs)

    def model(x, t, c):
        return predict_eps(params, x, t, c)

    out = []
    for start in range(0, count, batch):
        n = min(batch, count - start)
        out.append(diffusion.sample(model, z, schedule, (n, d.in_channels, d.image_size, d.image_size), seed,
                                    variance, chain_offset=start, clip_x0=clip_x0))
    return np.concatenate(out) if out else np.zeros((0, d.in_channels, d.image_size, d.image_size), np.float32)


def extractor_for(cfg: RunConfig) -> FeatureExtractor:
    """Recognition network trained on its own freshly rendered identities (disjoint seed)."""
    e = cfg.eval
    ds = generate_dataset(e.extractor_ids, 1, e.extractor_imgs_per_id, 0, cfg.data.resolution, e.extractor_seed)
    return fit_feature_extractor(ds.train, cfg.metrics)


@dataclass
class IdentityEvaluation:
    ids: List[int]
    samples: Dict[int, np.ndarray]
    score_matrix: np.ndarray  # [generated identity, reference centroid]
    report: MetricReport

    @property
    def correct_fraction(self) -> float:
        m = self.score_matrix
        wins = [all(m[i, i] < m[i, j] for j in range(len(m)) if j != i) for i in range(len(m))]
        return float(np.mean(wins))


def config_digest(cfg: RunConfig) -> str:
    """Hash of the resolved config with filesystem locations blanked, so moving a run keeps its digest."""
    located = cfg.replace(data=dataclasses.replace(cfg.data, root=""), run=dataclasses.replace(cfg.run, out_dir=""))
    return hashlib.sha256(dump_config(located).encode()).hexdigest()[:16]


def evaluate_identities(params: ModelParams, dataset: SynthDataset, extractor: FeatureExtractor,
                        schedule: NoiseSchedule, samples_per_id: int, seed: int, digest: str = "",
                        variance: str = "posterior") -> IdentityEvaluation:
    """Generate for every test identity from all of its images and score against every identity's centroid."""
    ids = dataset.test_ids
    samples = {i: personalize_generate(params, dataset.test[i], samples_per_id, seed + i, schedule, variance) for i in ids}
    feats = {i: extractor.features(samples[i]) for i in ids}
    real = {i: extractor.features(dataset.test[i]) for i in ids}
    m = np.array([[id_score(feats[i], real[j]) for j in ids] for i in ids])
    gen_all = np.concatenate([feats[i] for i in ids])
    real_all = np.concatenate([real[i] for i in ids])
    report = MetricReport(
        id_score=float(np.mean(np.diag(m))),
        fid=frechet_distance(gen_all, real_all),
        diversity=float(np.mean([generation_diversity(samples[i]) for i in ids])),
        n_generated=int(sum(len(s) for s in samples.values())),
        n_real=int(len(real_all)),
        config_digest=digest,
    )
    return IdentityEvaluation(ids, samples, m, report)


REPORT_FIELDS = ("id_score", "fid", "lpips", "diversity", "n_generated", "n_real", "config_digest")


def report_csv(rows: List[dict], fields=REPORT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in fields])
    return buf.getvalue()


def report_table(rows: List[dict], label_key: Optional[str] = None) -> str:
    cols = ([label_key] if label_key else []) + ["ID", "FID", "Diversity"]
    lines = [" | ".join(f"{c:>24}" if i == 0 and label_key else f"{c:>10}" for i, c in enumerate(cols))]
    for r in rows:
        cells = ([f"{r[label_key]:>24}"] if label_key else []) + [
            f"{r['id_score']:>10.4f}", f"{r['fid']:>10.4f}", f"{r['diversity']:>10.4f}"]
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


ABLATION_ROWS = (
    ("DiffAE", dict(p_start=1.0, p_end=1.0, alpha1=0.0, labeled_fraction=1.0)),
    ("+ random average embedding", dict(alpha1=0.0, labeled_fraction=1.0)),
    ("+ multi-task", dict(alpha1=0.0, labeled_fraction=0.5)),
    ("+ identity loss", dict(alpha1=0.01, labeled_fraction=0.5)),
)


def ablation_train_config(base: TrainConfig, row: int) -> TrainConfig:
    return dataclasses.replace(base, **ABLATION_ROWS[row][1])


def run_ablation(cfg: RunConfig, dataset: SynthDataset, extractor: Optional[FeatureExtractor] = None,
                 out_dir=None, rows=range(len(ABLATION_ROWS))) -> List[dict]:
    """Train and evaluate the cumulative configurations; one result row per configuration."""
    extractor = extractor or extractor_for(cfg)
    schedule = schedule_from(cfg)
    results = []
    for r in rows:
        name = ABLATION_ROWS[r][0]
        tcfg = ablation_train_config(cfg.training, r)
        sub = Path(out_dir) / f"row{r + 1}" if out_dir is not None else None
        log.info("ablation row %d (%s)", r + 1, name)
        res = train(dataset, cfg.model, tcfg, schedule, out_dir=sub)
        ev = evaluate_identities(res.params, dataset, extractor, schedule, cfg.eval.samples_per_id, cfg.eval.seed,
                                 config_digest(cfg.replace(training=tcfg)), cfg.diffusion.variance)
        row = {"row": r + 1, "name": name, **ev.report.as_row(), "correct_fraction": ev.correct_fraction}
        results.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(report_csv(results, ("row", "name") + REPORT_FIELDS + ("correct_fraction",)))
        (out / "ablation.txt").write_text(report_table(results, "name"))
    return results
