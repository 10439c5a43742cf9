import csv
import subprocess
import sys

import numpy as np
import pytest

from d2c.cli import run
from d2c.data import load_archive
from d2c.trainer import tables_from_bytes

from conftest import CONFIGS


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _report(path):
    return {r["key"]: r["value"] for r in _csv(path)}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny model with a held-out split large enough for toy FID."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text((CONFIGS / "tiny.cfg").read_text() + "n_images = 640\n")
    assert run(["train", "--config", str(cfg), "--out", str(root / "run"), "--quiet"]) == 0
    return root, cfg, root / "run" / "model.ckpt"


class TestExitCodes:
    def test_usage_errors(self, tmp_path, capsys):
        assert run([]) == 2
        assert run(["priorhole"]) == 2
        assert run(["nonsense", "--out", str(tmp_path)]) == 2
        assert run(["priorhole", "--out", str(tmp_path / "p"), "--n", "x"]) == 2
        assert run(["priorhole", "--out", str(tmp_path / "p"), "--threads", "0"]) == 2

    def test_existing_out_needs_force(self, tmp_path):
        out = tmp_path / "p"
        assert run(["priorhole", "--out", str(out), "--n", "1"]) == 0
        assert run(["priorhole", "--out", str(out), "--n", "1"]) == 2
        assert run(["priorhole", "--out", str(out), "--n", "1,2", "--force"]) == 0
        assert len(_csv(out / "priorhole.csv")) == 2

    def test_runtime_error_names_component(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junk" * 10)
        assert run(["sample", "--ckpt", str(bad), "--out", str(tmp_path / "s")]) == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("nonsense = 1\n")
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 1

    def test_condition_requires_label(self, trained, tmp_path):
        _, _, ckpt = trained
        assert run(["condition", "--ckpt", str(ckpt), "--out", str(tmp_path / "c")]) == 2


def test_priorhole_csv(tmp_path):
    out = tmp_path / "ph"
    assert run(["priorhole", "--delta", "0.49", "--n", "1,2,4,8", "--out", str(out)]) == 0
    rows = _csv(out / "priorhole.csv")
    kl = [float(r["kl"]) for r in rows]
    w2 = [float(r["w2"]) for r in rows]
    assert np.allclose(kl, 0.6793, atol=1e-4)
    assert all(a > b for a, b in zip(w2[:-1], w2[1:]))


def test_gen_data(tmp_path):
    out = tmp_path / "g"
    assert run(["gen-data", "--out", str(out), "--n", "50", "--seed", "3"]) == 0
    arc = load_archive(out / "data.d2cd")
    assert arc.images.shape == (50, 16, 16, 3)
    assert (out / "preview.ppm").read_bytes().startswith(b"P6")


def test_train_is_deterministic(trained, tmp_path):
    root, cfg, ckpt = trained
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "again"), "--quiet"]) == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (root / "run" / "metrics.csv").read_bytes()
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == ckpt.read_bytes()


def test_sample_and_invert(trained, tmp_path):
    _, _, ckpt = trained
    assert run(["sample", "--ckpt", str(ckpt), "--out", str(tmp_path / "s"), "--n", "12", "--steps", "10"]) == 0
    assert load_archive(tmp_path / "s" / "samples.d2cd").images.shape[0] == 12
    assert run(["invert", "--ckpt", str(ckpt), "--out", str(tmp_path / "i"), "--n", "8", "--steps", "50"]) == 0
    errs = [float(r["latent_rel_err"]) for r in _csv(tmp_path / "i" / "invert.csv")]
    assert len(errs) == 8 and max(errs) < 0.1


def test_condition(trained, tmp_path):
    _, _, ckpt = trained
    out = tmp_path / "c"
    assert run(["condition", "--ckpt", str(ckpt), "--out", str(out), "--label", "hue=warm",
                "--n", "20", "--steps", "10", "--n-labels", "40"]) == 0
    rep = _report(out / "report.csv")
    assert int(rep["n"]) == 20 and 0 <= float(rep["purity"]) <= 1
    tables = tables_from_bytes((out / "classifier.ckpt").read_bytes())
    assert set(tables) == {"classifier/w", "classifier/b", "classifier/c_pu"}


def test_condition_from_label_file(trained, tmp_path):
    _, _, ckpt = trained
    labels = tmp_path / "labels.csv"
    labels.write_text("index,label\n" + "".join(f"{i},{i % 2}\n" for i in range(40)))
    assert run(["condition", "--ckpt", str(ckpt), "--out", str(tmp_path / "c"), "--labels", str(labels),
                "--n", "5", "--steps", "10", "--mode", "bernoulli"]) == 0


def test_manipulate(trained, tmp_path):
    _, _, ckpt = trained
    out = tmp_path / "m"
    assert run(["manipulate", "--ckpt", str(ckpt), "--out", str(out), "--label", "hue=warm", "--n", "10",
                "--n-labels", "40"]) == 0
    rep = _report(out / "report.csv")
    assert float(rep["eta"]) == 1.0 and float(rep["alpha"]) == 0.9
    assert len(_csv(out / "manipulate.csv")) == 10
    assert run(["manipulate", "--ckpt", str(ckpt), "--out", str(out), "--force", "--label", "hue=warm",
                "--alpha", "0.3"]) == 1


def test_eval(trained, tmp_path):
    _, _, ckpt = trained
    out = tmp_path / "e"
    assert run(["eval", "--ckpt", str(ckpt), "--out", str(out), "--n", "100", "--steps", "5,20", "--n-labels", "20"]) == 0
    rows = _csv(out / "eval.csv")
    assert [int(r["steps"]) for r in rows] == [5, 20]
    assert all(float(r["toy_fid"]) >= 0 for r in rows)


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "d2c", "priorhole", "--n", "1", "--out", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "x" / "priorhole.csv").exists()
