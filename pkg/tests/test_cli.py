import re

import numpy as np
import pytest

from mule import autodiff as ad
from mule.cli import main
from mule.config import RunConfig
from mule.data.formats import load_split
from mule.evaluator import read_report

SMALL = ["--preset", "desk", "--set", "n_train=24", "--set", "n_val=12", "--set", "n_test=12",
         "--set", "img_dim=16", "--set", "epochs=2", "--set", "pretrain_epochs=1"]


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", *SMALL, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert main(["train", *SMALL, "--data", str(data_dir), "--out", str(out)]) == 0
    return out


def test_gen_writes_three_splits(data_dir, capsys):
    sizes = RunConfig.preset("desk").override(["n_train=24", "n_val=12", "n_test=12"]).split_sizes()
    for split, n in sizes.items():
        assert len(load_split(data_dir, split)) == n
        for name in ("features.bin", "ids.txt", "sentences.tsv"):
            assert (data_dir / split / name).is_file()


def test_gen_same_seed_byte_identical(data_dir, tmp_path):
    assert main(["gen", *SMALL, "--out", str(tmp_path)]) == 0
    assert files(tmp_path) == files(data_dir)


def test_gen_seed_env_changes_output(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("MULE_SEED", "5")
    assert main(["gen", *SMALL, "--out", str(tmp_path)]) == 0
    assert "seed=5" in (tmp_path / "config.txt").read_text()
    assert files(tmp_path / "train") != files(data_dir / "train")


def test_gen_translate_flags_machine_sentences(tmp_path, capsys):
    assert main(["gen", *SMALL, "--set", "languages=en,de,cs", "--set", "reduce_lang=cs",
                 "--set", "reduce_fraction=0.25", "--out", str(tmp_path),
                 "--translate", "src=en", "dst=cs", "p=0.1"]) == 0
    train = load_split(tmp_path, "train")
    # every English sentence without a human Czech counterpart gains a machine one
    assert train.sentence_count("cs", machine=False) == 12
    assert train.sentence_count("cs") == train.sentence_count("en") == 48
    assert train.sentence_count("en", machine=True) == 0
    assert train.sentence_count("de", machine=True) == 0
    assert load_split(tmp_path, "test").sentence_count("cs", machine=True) == 0
    assert "machine" in capsys.readouterr().out


def test_gen_bad_translate_argument(tmp_path, capsys):
    assert main(["gen", *SMALL, "--out", str(tmp_path), "--translate", "lang=cs"]) == 1
    assert "--translate" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path, capsys):
    assert main(["train", "--set", "warp=9", "--data", str(tmp_path), "--out", str(tmp_path)]) == 1
    assert "warp" in capsys.readouterr().err


def test_print_config_resolves_everything(capsys):
    assert main(["train", "--preset", "desk", "--ablate", "embn", "--parallel", "--set", "seed=7",
                 "--print-config"]) == 0
    cfg = RunConfig().override(capsys.readouterr().out.splitlines())
    assert cfg["seed"] == 7 and cfg["parallel"] and not (cfg["nc"] or cfg["lc"] or cfg["lp"])
    assert cfg["n_train"] == 200


def test_flag_overrides_config_file(tmp_path, capsys):
    (tmp_path / "run.cfg").write_text("seed=3\nepochs=4\n")
    assert main(["train", "--config", str(tmp_path / "run.cfg"), "--set", "seed=8", "--print-config"]) == 0
    cfg = RunConfig().override(capsys.readouterr().out.splitlines())
    assert (cfg["seed"], cfg["epochs"]) == (8, 4)


def banner_counts(out):
    line = next(l for l in out.splitlines() if l.startswith("parameters:"))
    return int(re.search(r"encoder (\d+)", line).group(1)), line


def test_parallel_banner_multiplies_encoder(data_dir, tmp_path, capsys):
    assert main(["train", *SMALL, "--set", "epochs=1", "--set", "pretrain_epochs=0", "--no-val",
                 "--data", str(data_dir), "--out", str(tmp_path / "a")]) == 0
    shared, line = banner_counts(capsys.readouterr().out)
    assert "shared encoder" in line
    assert main(["train", *SMALL, "--set", "epochs=1", "--set", "pretrain_epochs=0", "--no-val", "--parallel",
                 "--data", str(data_dir), "--out", str(tmp_path / "b")]) == 0
    parallel, line = banner_counts(capsys.readouterr().out)
    assert "parallel encoders" in line
    assert parallel == 2 * shared


def test_self_test_passes(data_dir, tmp_path, capsys):
    assert main(["train", *SMALL, "--set", "epochs=1", "--set", "pretrain_epochs=0", "--self-test",
                 "--data", str(data_dir), "--out", str(tmp_path)]) == 0
    assert "self-test:" in capsys.readouterr().out


def test_self_test_aborts_on_broken_gradient(data_dir, tmp_path, monkeypatch, capsys):
    def bad_backward(x):
        y = np.tanh(x.value)
        return ad._make(y, (x,), lambda g: (g * 0.5 * (1 - y**2),))

    monkeypatch.setattr(ad, "tanh", bad_backward)
    assert main(["train", *SMALL, "--self-test", "--data", str(data_dir), "--out", str(tmp_path / "ck")]) == 1
    assert "self-test failed" in capsys.readouterr().err
    assert not (tmp_path / "ck").exists()


def test_train_writes_checkpoint(checkpoint):
    for name in ("manifest.tsv", "history.tsv", "model.txt", "config.txt"):
        assert (checkpoint / name).is_file()


def test_train_twice_bit_identical(data_dir, checkpoint, tmp_path):
    assert main(["train", *SMALL, "--data", str(data_dir), "--out", str(tmp_path)]) == 0
    assert files(tmp_path) == files(checkpoint)


def test_eval_deterministic_and_consistent(data_dir, checkpoint, tmp_path, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(data_dir),
                 "--report", str(tmp_path / "a.tsv")]) == 0
    console = capsys.readouterr().out
    assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(data_dir),
                 "--report", str(tmp_path / "b.tsv")]) == 0
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    table = read_report(tmp_path / "a.tsv")
    for line in console.splitlines()[1:]:
        lang, *vals = line.split()
        assert float(vals[-1]) == table[lang]["mR"]


def test_eval_dump_nearest(data_dir, checkpoint, tmp_path, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(data_dir),
                 "--report", str(tmp_path / "r.tsv"), "--dump-nearest", "2"]) == 0
    dumped = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("en\t", "de\t"))]
    assert len(dumped) == 2 * 12
    assert all(len(l.split("\t")[2].split(" | ")) == 2 for l in dumped)


def test_eval_missing_tensor_is_checkpoint_error(data_dir, checkpoint, tmp_path, capsys):
    import shutil

    broken = tmp_path / "ck"
    shutil.copytree(checkpoint, broken)
    victim = next((broken / "tensors").iterdir())
    victim.unlink()
    assert main(["eval", "--checkpoint", str(broken), "--data", str(data_dir),
                 "--report", str(tmp_path / "r.tsv")]) == 1
    assert victim.name in capsys.readouterr().err


def test_eval_missing_checkpoint_names_path(data_dir, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", str(data_dir)]) == 1
    assert "nope" in capsys.readouterr().err
