import subprocess
import sys

import pytest

from mtscene import cli
from mtscene.config import KEYS, Config, ConfigError, help_text, parse_config

QUICK = "train.iterations = 2  # keep the test fast\ntrain.batch_size = 4\n"


def test_parse_comments_and_values():
    cfg = parse_config("# header\n\nscheduler.mode = fixed   # trailing\nencoder.depths = 1,1,1,1\n"
                       "instance.pyramid_supervision = false\n")
    assert cfg["scheduler.mode"] == "fixed" and cfg["encoder.depths"] == (1, 1, 1, 1)
    assert cfg["instance.pyramid_supervision"] is False
    assert cfg["train.lr"] == 0.03


@pytest.mark.parametrize("text, message", [
    ("bogus.key = 1\n", "x.cfg:1: unknown config key: bogus.key"),
    ("train.lr = 1\ntrain.lr = 2\n", "x.cfg:2: duplicate key train.lr"),
    ("train.lr\n", "x.cfg:1: expected 'key = value'"),
    ("train.batch_size = many\n", "x.cfg:1: bad value for train.batch_size"),
    ("train.lr = -1\n", "train.lr must be positive"),
    ("semantic.num_classes = 7\n", "semantic.num_classes must equal"),
])
def test_parse_errors_name_the_line(text, message):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "x.cfg")
    assert message in str(err.value)


def test_config_text_round_trip():
    cfg = Config().replace(**{"scheduler.base_weights": (1.0, 0.5, 2.0, 0.3, 1.2), "semantic.nfcl_layers": ()})
    assert parse_config(cfg.to_text()).values == cfg.values


def test_help_lists_every_key_with_its_default():
    text = help_text()
    for key in KEYS:
        assert key.name in text
    assert "train.lr" in text and "0.03" in text


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "quick.cfg").write_text(QUICK)
    assert run("gen", "--out", root / "data", "--count", 4, "--seed", 3) == 0
    assert run("train", "--config", root / "quick.cfg", "--data", root / "data", "--out", root / "run") == 0
    return root


def test_train_writes_its_outputs(workspace):
    run_dir = workspace / "run"
    assert sorted(p.name for p in run_dir.iterdir()) == ["config.cfg", "model.ckpt", "train_log.tsv"]
    assert len((run_dir / "train_log.tsv").read_text().splitlines()) == 3
    assert "train.iterations = 2" in (run_dir / "config.cfg").read_text()


def test_gen_is_deterministic(workspace, tmp_path):
    assert run("gen", "--out", tmp_path / "again", "--count", 4, "--seed", 3) == 0
    for name in ("rgb.mt", "instance.mt", "orient.mt"):
        a = (workspace / "data" / "sample_00002" / name).read_bytes()
        assert a == (tmp_path / "again" / "sample_00002" / name).read_bytes()


def test_eval_and_infer_are_idempotent(workspace, tmp_path):
    ckpt = workspace / "run" / "model.ckpt"
    for out in ("a", "b"):
        assert run("eval", "--checkpoint", ckpt, "--data", workspace / "data", "--out", tmp_path / out) == 0
        assert run("infer", "--checkpoint", ckpt, "--sample", workspace / "data" / "sample_00000",
                   "--out", tmp_path / out / "infer") == 0
    for name in ("metrics.txt", "metrics.kv", "infer/category.mt", "infer/instance.mt", "infer/orient.txt",
                 "infer/scene.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "metrics.kv").read_text().startswith("semantic_miou=")


def test_report_shows_exact_ratios(tmp_path, capsys):
    assert run("report", "--out", tmp_path) == 0
    shown = capsys.readouterr().out
    assert "1/16 = 0.0625" in shown and "2/3" in shown
    kv = dict(line.split("=", 1) for line in (tmp_path / "report.kv").read_text().splitlines())
    assert kv["flop_ratio"] == "1/16" and kv["nb1d_param_ratio"] == "2/3"


def test_bench_scheduler_outputs(tmp_path):
    (tmp_path / "b.cfg").write_text("bench.epochs = 4\nbench.batches_per_epoch = 3\n")
    assert run("bench-scheduler", "--config", tmp_path / "b.cfg", "--seeds", 2, "--out", tmp_path) == 0
    assert len((tmp_path / "bench_scheduler.tsv").read_text().splitlines()) == 5
    assert "min_adaptive_weight=" in (tmp_path / "bench_scheduler.kv").read_text()


def test_gradcheck_exit_codes(tmp_path):
    assert run("gradcheck", "--seeds", 1, "--only", "add", "relu") == 0
    (tmp_path / "strict.cfg").write_text("gradcheck.tolerance = 1e-30\n")
    assert run("gradcheck", "--config", tmp_path / "strict.cfg", "--seeds", 1, "--only", "exp") == 2


def test_invalid_input_exit_codes(workspace, tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("bogus.key = 1\n")
    assert run("report", "--config", tmp_path / "bad.cfg") == 1
    assert "bad.cfg:1: unknown config key: bogus.key" in capsys.readouterr().err
    assert run("frobnicate") == 1
    assert run("gen", "--out", tmp_path / "x", "--count", 0) == 1
    assert run("eval", "--checkpoint", workspace / "run" / "model.ckpt", "--data", tmp_path / "missing") == 1
    (tmp_path / "narrow.cfg").write_text("instance.blocks_per_layer = 2\n")
    assert run("eval", "--config", tmp_path / "narrow.cfg", "--checkpoint", workspace / "run" / "model.ckpt",
               "--data", workspace / "data") == 1


def test_runtime_failure_exit_code(workspace, tmp_path):
    (tmp_path / "wild.cfg").write_text(QUICK.replace("= 2", "= 30") + "train.lr = 1e8\n")
    assert run("train", "--config", tmp_path / "wild.cfg", "--data", workspace / "data", "--out", tmp_path) == 2


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "mtscene", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "bench-scheduler" in out.stdout and "gradcheck.tolerance" in out.stdout
