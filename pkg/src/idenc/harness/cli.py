"""Command-line interface: ``python -m idenc <command> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .. import synthdata
from ..checkpoint import CheckpointError
from ..conditioning import (AdapterTrainConfig, enhance, load_adapter, observe, save_adapter, train_adapter)
from ..models import init_params, load_params
from ..training import train
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config, parse_set, schedule_from
from .pipeline import config_digest, evaluate_identities, extractor_for, personalize_generate, report_csv, report_table, run_ablation

log = logging.getLogger("idenc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file with [section] headers")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--out", help="output directory or file")

    p = _Parser(prog="idenc", description="Identity-encoder diffusion toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("dataset", parents=[common], help="render the synthetic identity dataset")
    sub.add_parser("train", parents=[common], help="train encoder + generator")

    g = sub.add_parser("gen", parents=[common], help="generate images of the identity shown in --refs")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--refs", required=True, help="directory of reference PPM images")
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("adapt", parents=[common], help="train a conditioning adapter on a frozen model")
    a.add_argument("--task", choices=("sr", "inpaint"), required=True)
    a.add_argument("--base", required=True)

    e = sub.add_parser("enhance", parents=[common], help="super-resolve or inpaint an image of a known identity")
    e.add_argument("--task", choices=("sr", "inpaint"), required=True)
    e.add_argument("--base", required=True)
    e.add_argument("--adapter", required=True)
    e.add_argument("--refs", required=True)
    e.add_argument("--input", required=True, help="clean PPM image; degraded before enhancement")
    e.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("eval", parents=[common], help="score a checkpoint on the unseen test identities")
    v.add_argument("--ckpt", required=True)

    sub.add_parser("ablate", parents=[common], help="train and score the four ablation configurations")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive and a tiny model loss")
    gc.add_argument("--threshold", type=float, default=1e-4)
    gc.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, parse_set(args.overrides))


def _out(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.run.out_dir) / default


def _write_dump(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "resolved_config.ini").write_text(dump_config(cfg))


def _dataset(cfg: RunConfig):
    root = Path(cfg.data.root)
    if (root / "manifest.csv").exists():
        return synthdata.load_dataset(root)
    d = cfg.data
    return synthdata.build_dataset(d.n_train_ids, d.n_test_ids, d.imgs_per_id, d.n_unlabeled, d.resolution, d.seed, root)


def _read_dir(path) -> np.ndarray:
    files = sorted(Path(path).glob("*.ppm"))
    if not files:
        raise FileNotFoundError(f"no .ppm images in {path}")
    return np.stack([synthdata.read_ppm(f) for f in files])


def cmd_dataset(args, cfg):
    d = cfg.data
    root = Path(args.out or d.root)
    synthdata.build_dataset(d.n_train_ids, d.n_test_ids, d.imgs_per_id, d.n_unlabeled, d.resolution, d.seed, root)
    _write_dump(cfg, root)
    print(f"dataset written to {root}")


def cmd_train(args, cfg):
    out = Path(args.out or cfg.run.out_dir)
    _write_dump(cfg, out)
    res = train(_dataset(cfg), cfg.model, cfg.training, schedule_from(cfg), out_dir=out)
    print(f"trained {cfg.training.total_steps} steps; checkpoint {res.checkpoints[-1]}")


def cmd_gen(args, cfg):
    params = load_params(args.ckpt)
    imgs = personalize_generate(params, _read_dir(args.refs), args.count, args.seed, schedule_from(cfg), cfg.diffusion.variance)
    out = _out(args, cfg, "samples")
    _write_dump(cfg, out)
    for i, img in enumerate(imgs):
        synthdata.write_ppm(out / f"sample_{i:04d}.ppm", img)
    print(f"wrote {len(imgs)} images to {out}")


def cmd_adapt(args, cfg):
    params = load_params(args.base)
    adapter, losses = train_adapter(params, _dataset(cfg), args.task, cfg.adapter, schedule_from(cfg))
    out = _out(args, cfg, f"adapter_{args.task}.ckpt")
    _write_dump(cfg, out.parent)
    save_adapter(adapter, out, cfg.adapter.steps, cfg.adapter.seed)
    print(f"adapter saved to {out} (final loss {losses[-1]:.4f})")


def cmd_enhance(args, cfg):
    params = load_params(args.base)
    adapter = load_adapter(args.adapter, params.descriptor)
    clean = synthdata.read_ppm(args.input)[None]
    rng = np.random.default_rng(args.seed)
    obs = observe(args.task, clean, rng, adapter.descriptor.factor, adapter.descriptor.ratio)
    out_img = enhance(params, adapter, _read_dir(args.refs), obs, args.task, args.seed, schedule_from(cfg), cfg.diffusion.variance)
    out = _out(args, cfg, "enhanced")
    _write_dump(cfg, out)
    synthdata.write_ppm(out / "enhanced.ppm", out_img[0])
    print(f"wrote {out / 'enhanced.ppm'}")


def cmd_eval(args, cfg):
    params = load_params(args.ckpt)
    ev = evaluate_identities(params, _dataset(cfg), extractor_for(cfg), schedule_from(cfg), cfg.eval.samples_per_id,
                             cfg.eval.seed, config_digest(cfg), cfg.diffusion.variance)
    out = _out(args, cfg, "eval")
    _write_dump(cfg, out)
    row = ev.report.as_row()
    (out / "metrics.csv").write_text(report_csv([row]))
    table = report_table([row])
    (out / "metrics.txt").write_text(table)
    print(table, end="")


def cmd_ablate(args, cfg):
    out = _out(args, cfg, "ablation")
    _write_dump(cfg, out)
    rows = run_ablation(cfg, _dataset(cfg), out_dir=out)
    print(report_table(rows, "name"), end="")


def cmd_gradcheck(args, cfg):
    from ..diagnostics import full_grad_suite

    suite = full_grad_suite(np.dtype(args.dtype))
    for name, rep in list(suite["primitives"].items()) + [("tiny_model", suite["tiny_model"])]:
        print(f"{name:>20}  {rep.max_rel_err:.3e}  {'ok' if rep.max_rel_err < args.threshold else 'FAIL'}")
    tiny = suite["tiny_model"]
    ok = suite["max_rel_err"] < args.threshold
    print(f"max relative error {suite['max_rel_err']:.3e} ({suite['worst']}; tiny model worst at "
          f"{tiny.worst_param}{list(tiny.worst_index)}) in {suite['seconds']:.0f}s: "
          f"{'PASS' if ok else 'FAIL'} (threshold {args.threshold:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "dataset": cmd_dataset, "train": cmd_train, "gen": cmd_gen, "adapt": cmd_adapt, "enhance": cmd_enhance,
    "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        cfg = resolve_config(args)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        code = COMMANDS[args.command](args, cfg)
    except (CheckpointError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
