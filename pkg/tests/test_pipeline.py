import dataclasses
import logging
import math

import numpy as np
import pytest

from varbench import metrics as M
from varbench import pipeline as P
from varbench import recsys as R
from varbench.attacks import AttackSpec
from varbench.config import ConfigError, default_config, parse_config
from varbench.report import REPORT_COLUMNS, emit_report, markdown_summary

from oracles import plan_oracle

TINY = """
[dataset]
name = synthetic
num_users = 40
images_per_class = 15
interactions_per_user = 5
image_size = 8

[ife]
regimes = traditional
epochs = 15
feature_dim = 16
hidden_channels = 8

[attack.fgsm]
kind = fgsm
epsilon = 8

[recommender.vbpr]
epochs = 5

[evaluation]
ks = 5, 10
plan_k = 10
"""


def tiny_config(**sections):
    text = TINY
    for name, body in sections.items():
        text += f"\n[{name}]\n{body}\n"
    return parse_config(text)


# --------------------------------------------------------------- planning


def test_plan_exact_pair():
    plan = P.plan_from_chr({0: 1.0, 1: 4.0})
    assert (plan.origin, plan.target) == (0, 1)
    assert plan.ratio == 4.0 and plan.within_tolerance


def test_plan_picks_sandal_to_running_shoe():
    chr50 = {0: 1.0310, 1: 4.7852, 2: 2.0}  # Sandal, Running Shoe, a distractor
    plan = P.plan_from_chr(chr50, tolerance=0.5)
    assert (plan.origin, plan.target) == (0, 1)
    assert plan.ratio == pytest.approx(4.7852 / 1.0310)


@pytest.mark.parametrize("origin,target", [(1.2573, 4.2672), (0.8951, 3.6955)])
def test_plan_other_reported_pairs_are_about_four(origin, target):
    assert abs(math.log(target / origin / 4.0)) < 0.25
    plan = P.plan_from_chr({0: origin, 1: target})
    assert (plan.origin, plan.target) == (0, 1)


def test_plan_matches_exhaustive_oracle_on_random_tables():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = int(rng.integers(2, 8))
        table = {c: float(v) for c, v in enumerate(rng.uniform(0.01, 10, m))}
        plan = P.plan_from_chr(table)
        assert (plan.origin, plan.target) == plan_oracle(table)


def test_plan_tie_break_by_class_id():
    plan = P.plan_from_chr({3: 1.0, 1: 1.0, 2: 4.0, 0: 4.0})
    assert (plan.origin, plan.target) == (1, 0)


def test_plan_needs_two_live_classes():
    with pytest.raises(ValueError, match="two classes"):
        P.plan_from_chr({0: 0.0, 1: 3.0})


def test_plan_out_of_tolerance_warns(caplog):
    with caplog.at_level(logging.WARNING):
        plan = P.plan_from_chr({0: 1.0, 1: 1.1}, tolerance=0.5)
    assert not plan.within_tolerance
    assert "closest ratio" in caplog.text


def test_select_categories_from_lists():
    lists = {0: [1, 2, 3, 4], 1: [1, 2, 5, 6]}
    sets = {0: M.CategorySet(0, frozenset({3})), 1: M.CategorySet(1, frozenset({1, 2, 4, 5}))}
    plan = P.select_categories(lists, sets, K=4)
    assert (plan.origin, plan.target) == (0, 1)
    assert plan.origin_chr == pytest.approx(0.125) and plan.target_chr == pytest.approx(0.75)


# ----------------------------------------------------------------- config


def test_default_config_grid():
    cfg = default_config()
    assert set(cfg.attacks) == {"fgsm_eps4", "pgd_eps8", "cw"}
    assert set(cfg.recommenders) == {"fm", "vbpr", "amr"}
    assert cfg.regimes == ("traditional", "adv_train", "free_adv_train")
    assert len(cfg.attacks) * len(cfg.recommenders) * len(cfg.regimes) == 27


def test_config_parsing():
    cfg = tiny_config()
    assert cfg.dataset.synth.num_users == 40 and cfg.dataset.synth.image_size == 8
    assert cfg.regimes == ("traditional",)
    assert cfg.ife.epochs == 15
    assert cfg.attacks["fgsm"] == AttackSpec("fgsm", target=0, epsilon=8.0)
    assert cfg.recommenders["vbpr"].epochs == 5
    assert cfg.evaluation.ks == (5, 10)


def test_config_docstring_example_parses():
    from varbench import config
    text = config.__doc__.split("Example::", 1)[1]
    cfg = parse_config("\n".join(line[4:] for line in text.splitlines()))
    assert cfg.attacks["pgd"].epsilon == 8


@pytest.mark.parametrize("text,msg", [
    ("[ife]\nepoch = 3\n", "unknown key"),
    ("[ife]\nregimes = magic\n", "regime"),
    ("[recommender.mf]\n", "recommender"),
    ("[evaluation]\nks = 0\n", "positive"),
    ("[ife]\nepochs = many\n", "parse"),
    ("[dataset]\nname = amazon\n", "path"),
    ("not an ini", "section"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_empty_attacks_section_clears_the_grid():
    cfg = parse_config("[attacks]\n")
    assert cfg.attacks == {}


def test_with_seed_sets_every_seed():
    cfg = tiny_config().with_seed(7)
    assert cfg.dataset.synth.seed == cfg.ife.seed == cfg.evaluation.seed == 7
    assert all(a.seed == 7 for a in cfg.attacks.values())
    assert all(r.seed == 7 for r in cfg.recommenders.values())


# ------------------------------------------------------------------ runs


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    return cfg, P.run_experiment(cfg, out), out


def test_one_cell_grid_completes_and_emits_every_metric_row(tiny_run):
    cfg, result, out = tiny_run
    assert not result.failed
    lines = (out / "report.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == REPORT_COLUMNS
    n_cells = len(result.cells)
    assert n_cells == 2  # clean + fgsm
    assert len(lines) - 1 == n_cells * len(P.METRICS) * len(cfg.evaluation.ks)
    for name in ("attack_report.csv", "summary.md", "figures/chr_at_5.png", "figures/chr_at_10.png",
                 "figures/attacks.png", "ife/traditional.bin", "ife/traditional.json"):
        assert (out / name).exists(), name


def test_rows_of_cells_differing_only_in_attack_share_key_fields(tiny_run):
    _, _, out = tiny_run
    rows = [line.split(",") for line in (out / "report.csv").read_text().splitlines()[1:]]
    by_attack = {}
    for r in rows:
        by_attack.setdefault(r[3], []).append((r[0], r[1], r[2], r[4], r[5]))
    assert set(by_attack) == {"none", "fgsm"}
    assert by_attack["none"] == by_attack["fgsm"]


def test_chr_is_reported_raw_and_scaled(tiny_run):
    _, result, _ = tiny_run
    for c in result.cells:
        for K in (5, 10):
            assert c.values[("CHR_x100", K)] == pytest.approx(100 * c.values[("CHR", K)])
            assert 0.0 <= c.values[("CHR", K)] <= 1.0


def test_attacked_items_are_exactly_the_origin_class(tiny_run):
    cfg, result, _ = tiny_run
    ws = P.load_workspace(cfg)
    from varbench.ife import ConvClassifier
    model = ConvClassifier.load(tiny_run[2] / "ife" / "traditional.bin")
    pred = model.predict_class(ws.images.pixels)
    (summary,) = result.attacks
    assert summary.origin == result.plan.origin and summary.target == result.plan.target
    assert summary.n_items == int((pred == result.plan.origin).sum())


def test_emit_twice_is_byte_identical(tiny_run, tmp_path):
    _, result, out = tiny_run
    emit_report(result, tmp_path)
    for name in ("report.csv", "attack_report.csv", "summary.md", "figures/chr_at_5.png", "figures/attacks.png"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_markdown_has_one_table_per_group_and_bolds_maxima(tiny_run):
    _, result, _ = tiny_run
    md = markdown_summary(result)
    assert md.count("## synthetic / vbpr / traditional") == 1
    table = [line for line in md.splitlines() if line.startswith("| none") or line.startswith("| fgsm")]
    assert len(table) == 2
    col = 1  # CHR_x100@5
    vals = [float(r.split("|")[col + 1].strip().strip("*")) for r in table]
    bold = [r.split("|")[col + 1].strip().startswith("**") for r in table]
    assert bold == [v == max(vals) for v in vals]


def test_clean_only_run(tmp_path):
    cfg = dataclasses.replace(tiny_config(), attacks={})
    result = P.run_experiment(cfg, tmp_path)
    assert [c.attack for c in result.cells] == ["none"]
    assert (tmp_path / "attack_report.csv").read_text().count("\n") == 1


def test_failed_cell_is_recorded_and_others_proceed(tmp_path, monkeypatch):
    cfg = tiny_config()
    cfg.recommenders["fm"] = R.RecConfig(epochs=3)
    real = R.train_recommender

    def flaky(kind, *a, **kw):
        if kind == "fm":
            raise RuntimeError("boom")
        return real(kind, *a, **kw)

    monkeypatch.setattr(R, "train_recommender", flaky)
    result = P.run_experiment(cfg, tmp_path)
    assert {c.recommender for c in result.failed} == {"fm"}
    assert all(c.ok for c in result.cells if c.recommender == "vbpr")
    assert "RuntimeError: boom" in (tmp_path / "failures.csv").read_text()
    rows = (tmp_path / "report.csv").read_text().splitlines()[1:]
    assert len(rows) == 2 * len(P.METRICS) * 2


def test_clean_store_is_extracted_once_per_defense(tmp_path, monkeypatch):
    from varbench.ife import ConvClassifier
    calls = []
    real = ConvClassifier.extract_features

    def counting(self, pixels, *a, **kw):
        calls.append(len(pixels))
        return real(self, pixels, *a, **kw)

    monkeypatch.setattr(ConvClassifier, "extract_features", counting)
    cfg = tiny_config(**{"attack.pgd": "kind = pgd\nepsilon = 8"})
    result = P.run_experiment(cfg, tmp_path, emit=False)
    n_items = cfg.dataset.synth.num_classes * cfg.dataset.synth.images_per_class
    # one full clean extraction, then only the origin items per attack
    assert calls[0] == n_items
    assert calls[1:] == [result.attacks[0].n_items] * 2


def test_parallel_matches_sequential(tmp_path):
    cfg = tiny_config()
    cfg.recommenders["fm"] = R.RecConfig(epochs=3)
    seq = P.run_experiment(cfg, tmp_path / "a")
    par = P.run_experiment(dataclasses.replace(cfg, parallel=2), tmp_path / "b")
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    assert len(seq.cells) == len(par.cells) == 4


def test_emit_requires_a_completed_cell(tiny_run, tmp_path):
    _, result, _ = tiny_run
    broken = dataclasses.replace(result, cells=[dataclasses.replace(c, error="x") for c in result.cells])
    with pytest.raises(ValueError, match="no completed cell"):
        emit_report(broken, tmp_path)


def test_inline_comments_are_ignored():
    cfg = parse_config("[ife]\nepochs = 7 ; short run\n")
    assert cfg.ife.epochs == 7
