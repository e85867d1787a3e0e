import csv
import subprocess
import sys

import numpy as np
import pytest

from varbench.cli import main
from varbench.dataio import load_images
from varbench.ife import ConvClassifier
from varbench.recsys import FeatureStore, read_rankings

from test_pipeline import TINY


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "exp.ini").write_text(TINY)
    return d


def run(workdir, *argv):
    return main([*argv, "--config", str(workdir / "exp.ini")])


def test_verb_chain(workdir, capsys):
    d = workdir
    assert run(d, "synth", "--out", str(d / "data")) == 0
    assert (d / "data" / "interactions.csv").exists() and (d / "data" / "synth.json").exists()
    n_images = len(list((d / "data" / "images").glob("*.png")))
    assert n_images == 45

    assert run(d, "train-ife", "--data", str(d / "data"), "--regime", "traditional", "--out", str(d / "ife")) == 0
    assert (d / "ife" / "traditional.bin").exists() and (d / "ife" / "traditional.json").exists()

    ife = str(d / "ife" / "traditional.bin")
    assert run(d, "extract", "--data", str(d / "data"), "--ife", ife, "--out", str(d / "feat.bin")) == 0
    store = FeatureStore.load(d / "feat.bin")
    catalog = {r["item_id"] for r in csv.DictReader(open(d / "data" / "interactions.csv"))}
    assert len(store) == len(catalog) and store.gamma == 16

    model = ConvClassifier.load(ife)
    pred = model.predict_class(load_images(d / "data" / "images").pixels)
    source = int(np.bincount(pred).argmax())
    target = (source + 1) % 3
    assert run(d, "attack", "--data", str(d / "data"), "--ife", ife, "--attack", "fgsm",
               "--source-class", str(source), "--target", str(target), "--out", str(d / "adv")) == 0
    rows = list(csv.DictReader(open(d / "adv" / "manifest.csv")))
    assert rows and all(r["target_class"] == str(target) for r in rows)
    assert len(list((d / "adv").glob("*.png"))) == len(rows)

    assert run(d, "recommend", "--data", str(d / "data"), "--features", str(d / "feat.bin"),
               "--recommender", "vbpr", "-k", "7", "--out", str(d / "rank.csv")) == 0
    lists = read_rankings(d / "rank.csv")
    assert len(lists) == 40 and all(len(r.items) == 7 for r in lists.values())
    assert "AUC" in capsys.readouterr().out

    assert run(d, "evaluate", "--data", str(d / "data"), "--rankings", str(d / "rank.csv"),
               "--category", "0", "--ife", ife, "--out", str(d / "m.csv")) == 0
    metrics = list(csv.DictReader(open(d / "m.csv")))
    assert len(metrics) == 8 * 2
    assert all(np.isfinite(float(r["value"])) for r in metrics)


def test_run_verb_writes_report(workdir):
    out = workdir / "run"
    assert run(workdir, "run", "--out", str(out)) == 0
    assert (out / "report.csv").exists() and (out / "summary.md").exists()
    assert not (out / "failures.csv").exists()


def test_seed_override_changes_the_data(workdir):
    a, b = workdir / "s1", workdir / "s2"
    assert run(workdir, "synth", "--seed", "1", "--out", str(a)) == 0
    assert run(workdir, "synth", "--seed", "2", "--out", str(b)) == 0
    assert (a / "interactions.csv").read_bytes() != (b / "interactions.csv").read_bytes()


def test_failed_cell_gives_exit_code_one(tmp_path, monkeypatch):
    from varbench import recsys as R
    real = R.train_recommender

    def flaky(kind, *a, **kw):
        if kind == "fm":
            raise RuntimeError("boom")
        return real(kind, *a, **kw)

    (tmp_path / "exp.ini").write_text(TINY + "\n[recommender.fm]\nepochs = 2\n")
    monkeypatch.setattr(R, "train_recommender", flaky)
    assert run(tmp_path, "run", "--out", str(tmp_path / "bad")) == 1
    assert (tmp_path / "bad" / "failures.csv").exists()


def test_every_clean_cell_failing_is_reported(workdir, monkeypatch):
    from varbench import recsys as R

    def boom(*a, **kw):
        raise RuntimeError("boom")

    monkeypatch.setattr(R, "train_recommender", boom)
    with pytest.raises(RuntimeError, match="every clean recommender failed"):
        run(workdir, "run", "--out", str(workdir / "bad"))


@pytest.mark.parametrize("argv", [
    ["attack", "--ife", "missing.bin", "--attack", "fgsm", "--source-class", "0", "--target", "1"],
    ["recommend", "--features", "missing.bin", "--recommender", "fm"],
    ["train-ife", "--data", "/nonexistent/dir"],
])
def test_known_errors_give_exit_code_two(workdir, argv, capsys):
    assert run(workdir, *argv) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_bad_config_gives_exit_code_two(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[ife]\nepoch = 3\n")
    assert main(["synth", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_unknown_attack_label(workdir):
    assert run(workdir, "attack", "--ife", "x.bin", "--attack", "nope", "--source-class", "0", "--target", "1") == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "varbench.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for verb in ("synth", "train-ife", "extract", "attack", "recommend", "evaluate", "run"):
        assert verb in out.stdout
