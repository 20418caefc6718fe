"""Run configuration: ``key = value`` files with ``[section]`` headers.

Every section maps onto a frozen dataclass, so every key has a default and
an inferred type. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, Optional

from ..conditioning import AdapterTrainConfig
from ..metrics import ExtractorConfig
from ..models import ModelDescriptor
from ..training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    n_train_ids: int = 20
    n_test_ids: int = 4
    imgs_per_id: int = 8
    n_unlabeled: int = 400
    resolution: int = 32
    seed: int = 0


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: str = "cosine"
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "posterior"


@dataclass(frozen=True)
class EvalConfig:
    samples_per_id: int = 16
    seed: int = 1234
    extractor_ids: int = 20
    extractor_imgs_per_id: int = 24
    extractor_seed: int = 99


@dataclass(frozen=True)
class RunSection:
    out_dir: str = "runs/default"


DESK_MODEL_32 = ModelDescriptor(
    image_size=32, base_channels=16, channel_mult=(1, 2, 2, 2), num_res_blocks=1, attn_resolutions=(8, 4),
    emb_dim=32, enc_base_channels=8, enc_channel_mult=(1, 2, 4, 4), enc_num_res_blocks=1, enc_attn_resolutions=(),
)

DESK_MODEL_16 = ModelDescriptor(
    image_size=16, base_channels=16, channel_mult=(1, 2, 2), num_res_blocks=1, attn_resolutions=(8, 4),
    emb_dim=32, enc_base_channels=8, enc_channel_mult=(1, 2, 4), enc_num_res_blocks=1, enc_attn_resolutions=(),
)

DESK_TRAIN = TrainConfig(total_steps=3000, lr=2e-3, warmup_steps=100, max_refs=4, grad_clip=1.0, checkpoint_interval=1000)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    model: ModelDescriptor = DESK_MODEL_32
    diffusion: DiffusionConfig = DiffusionConfig()
    training: TrainConfig = DESK_TRAIN
    adapter: AdapterTrainConfig = AdapterTrainConfig()
    metrics: ExtractorConfig = ExtractorConfig()
    eval: EvalConfig = EvalConfig()
    run: RunSection = RunSection()

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


SECTIONS = tuple(f.name for f in fields(RunConfig))


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _apply(section_obj, values: Dict[str, str], section: str):
    known = {f.name: getattr(section_obj, f.name) for f in fields(section_obj)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        updates[key] = _parse(raw, known[key], f"{section}.{key}")
    if not updates:
        return section_obj
    try:
        return dataclasses.replace(section_obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def apply_overrides(cfg: RunConfig, items: Dict[str, Dict[str, str]]) -> RunConfig:
    out = {}
    for section, values in items.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        out[section] = _apply(getattr(cfg, section), values, section)
    return cfg.replace(**out)


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return apply_overrides(base or RunConfig(), {s: dict(cp[s]) for s in cp.sections()})


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def parse_set(items: Iterable[str]) -> Dict[str, Dict[str, str]]:
    """``section.key=value`` strings -> nested mapping."""
    out: Dict[str, Dict[str, str]] = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        out.setdefault(section, {})[key] = value
    return out


def dump_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    for section in SECTIONS:
        obj = getattr(cfg, section)
        buf.write(f"[{section}]\n")
        for f in fields(obj):
            buf.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def schedule_from(cfg: RunConfig):
    from ..schedules import make_schedule

    d = cfg.diffusion
    return make_schedule(d.schedule, d.T, d.beta_start, d.beta_end)
