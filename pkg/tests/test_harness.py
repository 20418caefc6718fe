import struct

import numpy as np
import pytest

from idenc import checkpoint as ck
from idenc import synthdata
from idenc.harness import cli
from idenc.harness.config import (ConfigError, RunConfig, apply_overrides, dump_config, load_config, parse_config,
                                  parse_set)
from idenc.harness.pipeline import ABLATION_ROWS, ablation_train_config, report_csv, report_table
from idenc.models import ModelDescriptor, init_params, save_params

SMALL = ModelDescriptor(
    image_size=8, base_channels=4, channel_mult=(1, 2), num_res_blocks=1, attn_resolutions=(4,),
    emb_dim=6, enc_base_channels=4, enc_channel_mult=(1, 2), enc_attn_resolutions=(), max_groups=2,
)


def test_config_dump_round_trip():
    cfg = apply_overrides(RunConfig(), parse_set(["training.lr=0.002", "model.channel_mult=1,2", "data.seed=7"]))
    back = parse_config(dump_config(cfg))
    assert back == cfg
    assert back.training.lr == 0.002 and back.model.channel_mult == (1, 2) and back.data.seed == 7


def test_config_file_with_comments(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("# desk run\n[diffusion]\nT = 50\nschedule = linear\n\n[eval]\nsamples_per_id = 4\n")
    cfg = load_config(path)
    assert (cfg.diffusion.T, cfg.diffusion.schedule, cfg.eval.samples_per_id) == (50, "linear", 4)
    assert cfg.training == RunConfig().training


@pytest.mark.parametrize("text, match", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[training]\nlearning_rate = 1\n", "unknown key"),
    ("[training]\nlr = fast\n", "cannot parse"),
    ("[training]\nlabeled_fraction = 2.0\n", "training"),
    ("no header line\n", "header"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_parse_set_rejects_malformed():
    with pytest.raises(ConfigError):
        parse_set(["lr=1"])
    with pytest.raises(ConfigError):
        parse_set(["training.lr"])


def test_ablation_rows_cumulative():
    base = RunConfig().training
    rows = [ablation_train_config(base, r) for r in range(len(ABLATION_ROWS))]
    assert rows[0].p_start == rows[0].p_end == 1.0 and rows[0].alpha1 == 0.0
    assert (rows[1].p_start, rows[1].p_end, rows[1].labeled_fraction) == (1.0, 0.05, 1.0)
    assert rows[2].labeled_fraction == 0.5 and rows[2].alpha1 == 0.0
    assert rows[3].alpha1 == 0.01 and rows[3].labeled_fraction == 0.5


def test_report_formats():
    rows = [{"name": "a", "id_score": 0.25, "fid": 1.5, "diversity": 0.1, "n_generated": 4, "n_real": 8}]
    text = report_csv(rows)
    assert text.splitlines()[0] == "id_score,fid,lpips,diversity,n_generated,n_real,config_digest"
    assert text.splitlines()[1] == "0.25,1.5,,0.1,4,8,"
    assert "0.2500" in report_table(rows, "name")


# --- checkpoints ---------------------------------------------------------------------------

@pytest.fixture
def ckpt(tmp_path):
    return save_params(init_params(SMALL, 0), tmp_path / "m.ckpt", step=5, seed=2)


def test_checkpoint_header_fields(ckpt):
    c = ck.load_checkpoint(ckpt)
    assert (c.step, c.seed) == (5, 2)
    assert ModelDescriptor.from_dict(c.model) == SMALL


def test_checkpoint_corruptions(ckpt, tmp_path):
    raw = ckpt.read_bytes()
    bad = tmp_path / "bad.ckpt"
    cases = [
        (b"XXXX" + raw[4:], ck.BadMagicError),
        (raw[:len(raw) // 2], ck.TruncatedCheckpointError),
        (raw[:4] + struct.pack("<I", 99) + raw[8:], ck.VersionMismatchError),
        (raw + b"\0", ck.CheckpointError),
    ]
    for blob, err in cases:
        bad.write_bytes(blob)
        with pytest.raises(err):
            ck.load_checkpoint(bad)
    with pytest.raises(ck.DescriptorMismatchError):
        ck.load_checkpoint(ckpt, expect_model={"image_size": 16})


def test_checkpoint_write_is_atomic(tmp_path):
    path = ck.save_checkpoint({"w": np.ones(3)}, {"model": {}}, tmp_path / "c.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["c.ckpt"]
    np.testing.assert_array_equal(ck.load_checkpoint(path).tensors["w"], np.ones(3, np.float32))


# --- command line ------------------------------------------------------------------------

@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["gen"], ["train", "--set", "training.nope=1"],
                                  ["train", "--config", "/nonexistent/run.ini"], ["eval", "--ckpt", "x", "--set", "bad"]])
def test_cli_usage_errors(argv, capsys):
    assert cli.main(argv) == cli.EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_cli_runtime_error_on_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    refs = tmp_path / "refs"
    refs.mkdir()
    assert cli.main(["gen", "--ckpt", str(bad), "--refs", str(refs)]) == cli.EXIT_RUNTIME
    assert "bad magic" in capsys.readouterr().err


def test_cli_gen_single_reference(ckpt, tmp_path):
    refs = tmp_path / "refs"
    refs.mkdir()
    ref = np.random.default_rng(0).uniform(-1, 1, (3, 8, 8)).astype(np.float32)
    synthdata.write_ppm(refs / "r0.ppm", ref)
    out = tmp_path / "samples"
    argv = ["gen", "--ckpt", str(ckpt), "--refs", str(refs), "--count", "3", "--out", str(out),
            "--set", "diffusion.T=5"]
    assert cli.main(argv) == cli.EXIT_OK
    imgs = sorted(out.glob("*.ppm"))
    assert [p.name for p in imgs] == ["sample_0000.ppm", "sample_0001.ppm", "sample_0002.ppm"]
    assert synthdata.read_ppm(imgs[0]).shape == (3, 8, 8)
    resolved = load_config(out / "resolved_config.ini")
    assert resolved.diffusion.T == 5
    first = [p.read_bytes() for p in imgs]
    assert cli.main(argv) == cli.EXIT_OK
    assert [p.read_bytes() for p in sorted(out.glob("*.ppm"))] == first


def test_cli_gen_resolution_mismatch(ckpt, tmp_path):
    refs = tmp_path / "refs"
    refs.mkdir()
    synthdata.write_ppm(refs / "r0.ppm", np.zeros((3, 16, 16), np.float32))
    assert cli.main(["gen", "--ckpt", str(ckpt), "--refs", str(refs), "--set", "diffusion.T=5"]) == cli.EXIT_RUNTIME


def test_cli_dataset_and_train(tmp_path):
    data = tmp_path / "data"
    sets = ["--set", f"data.root={data}", "--set", "data.resolution=16", "--set", "data.n_train_ids=3",
            "--set", "data.n_test_ids=1", "--set", "data.imgs_per_id=4", "--set", "data.n_unlabeled=6"]
    assert cli.main(["dataset", *sets]) == cli.EXIT_OK
    assert (data / "manifest.csv").exists()
    run = tmp_path / "run"
    model = ["--set", "model.image_size=16", "--set", "model.base_channels=4", "--set", "model.channel_mult=1,2",
             "--set", "model.attn_resolutions=8", "--set", "model.emb_dim=4", "--set", "model.enc_base_channels=4",
             "--set", "model.enc_channel_mult=1,2", "--set", "model.max_groups=2"]
    train = ["--set", "training.total_steps=2", "--set", "training.batch_size=4", "--set", "training.warmup_steps=1",
             "--set", "training.checkpoint_interval=2", "--set", "diffusion.T=5"]
    assert cli.main(["train", *sets, *model, *train, "--out", str(run)]) == cli.EXIT_OK
    assert (run / "final.ckpt").exists() and (run / "train_log.csv").exists()
    assert load_config(run / "resolved_config.ini").training.total_steps == 2


def test_config_digest_ignores_locations():
    from idenc.harness.pipeline import config_digest

    base = RunConfig()
    moved = apply_overrides(base, parse_set(["data.root=/elsewhere", "run.out_dir=/tmp/x"]))
    assert config_digest(moved) == config_digest(base)
    assert config_digest(apply_overrides(base, parse_set(["data.seed=3"]))) != config_digest(base)
