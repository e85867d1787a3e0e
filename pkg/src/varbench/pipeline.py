"""End-to-end runs over the defense x attack x recommender grid."""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import metrics as M
from . import recsys as R
from .attacks import AttackResult, run_attack
from .config import ExperimentConfig
from .dataio import (
    DataError, ImageSet, InteractionDataset, SplitDataset, kcore_filter, leave_one_out,
    load_images, load_interactions, quantize, synthesize_dataset,
)
from .ife import ConvClassifier, train

log = logging.getLogger(__name__)

METRICS = ("CHR", "CHR_x100", "nCDCG", "Recall", "nDCG", "ICov", "Gini", "EFD")
CLEAN = "none"


# ----------------------------------------------------------- category plan


@dataclass(frozen=True)
class CategoryPlan:
    origin: int
    target: int
    origin_chr: float
    target_chr: float
    within_tolerance: bool = True

    @property
    def ratio(self) -> float:
        return self.target_chr / self.origin_chr


def plan_from_chr(chr_by_class: Mapping[int, float], ratio: float = 4.0, tolerance: float = math.inf) -> CategoryPlan:
    """Pick the (origin, target) pair whose CHR ratio target/origin is closest to ``ratio``.

    Closeness is |log(r / ratio)|; ties go to the smaller (origin, target) ids.
    """
    live = sorted(c for c, v in chr_by_class.items() if v > 0)
    if len(live) < 2:
        raise ValueError("category selection needs at least two classes with nonzero CHR")
    best = None
    for o, t in itertools.permutations(live, 2):
        r = chr_by_class[t] / chr_by_class[o]
        if r <= 1.0:
            continue
        key = (abs(math.log(r / ratio)), o, t)
        if best is None or key < best:
            best = key
    if best is None:
        # every live class has the same CHR
        o, t = live[0], live[1]
        best = (abs(math.log(1.0 / ratio)), o, t)
    dist, o, t = best
    ok = dist <= tolerance
    if not ok:
        log.warning("no origin/target pair within tolerance; closest ratio is %.3f",
                    chr_by_class[t] / chr_by_class[o])
    return CategoryPlan(int(o), int(t), float(chr_by_class[o]), float(chr_by_class[t]), ok)


def select_categories(lists, category_sets: Mapping[int, M.CategorySet], K: int = 50,
                      ratio: float = 4.0, tolerance: float = math.inf) -> CategoryPlan:
    """CategoryPlan from clean ranking lists (one mapping, or a list of them to average)."""
    many = lists if isinstance(lists, (list, tuple)) else [lists]
    sets = category_sets if isinstance(category_sets, (list, tuple)) else [category_sets] * len(many)
    chr_by_class = {}
    for c in sets[0]:
        chr_by_class[c] = float(np.mean([M.chr_at_k(l, s[c], K).mean for l, s in zip(many, sets)]))
    return plan_from_chr(chr_by_class, ratio, tolerance)


# ------------------------------------------------------------------ results


@dataclass
class CellResult:
    dataset: str
    recommender: str
    defense: str
    attack: str
    values: dict = field(default_factory=dict)  # (metric, K) -> value
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.dataset, self.recommender, self.defense, self.attack)

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class AttackSummary:
    dataset: str
    defense: str
    attack: str
    origin: int
    target: int
    n_items: int
    sr: float
    fl: float
    mean_l2: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    plan: CategoryPlan | None
    cells: list = field(default_factory=list)
    attacks: list = field(default_factory=list)
    ife_accuracy: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [c for c in self.cells if not c.ok]

    def value(self, recommender, defense, attack, metric, K):
        for c in self.cells:
            if c.ok and (c.recommender, c.defense, c.attack) == (recommender, defense, attack):
                return c.values[(metric, K)]
        raise KeyError((recommender, defense, attack, metric, K))


def cell_metrics(lists, split: SplitDataset, cat: M.CategorySet, ks, rc: M.RelevanceConfig, catalog) -> dict:
    out = {}
    for K in ks:
        chr_k = M.chr_at_k(lists, cat, K).mean
        out[("CHR", K)] = chr_k
        out[("CHR_x100", K)] = chr_k * 100.0
        out[("nCDCG", K)] = M.ncdcg_at_k(lists, cat, K, rc).mean
        acc = M.accuracy_metrics(lists, split, K)
        out[("Recall", K)] = acc["Recall"]
        out[("nDCG", K)] = acc["nDCG"]
        beyond = M.beyond_accuracy(lists, split, K, catalog)
        for name in ("ICov", "Gini", "EFD"):
            out[(name, K)] = beyond[name]
    return out


# ------------------------------------------------------------------ dataset


@dataclass
class Workspace:
    name: str
    interactions: InteractionDataset
    split: SplitDataset
    images: ImageSet  # one image per catalog item, in catalog order


def load_workspace(cfg: ExperimentConfig) -> Workspace:
    d = cfg.dataset
    if d.name == "synthetic":
        ds, images = synthesize_dataset(d.synth)
    else:
        root = Path(d.path)
        ds = load_interactions(root / "interactions.csv")
        images = load_images(root / "images")
        if (images.labels < 0).any():
            raise DataError(f"{root / 'images'}: labels.csv is required to train the IFE")
    if d.kcore > 0:
        ds = kcore_filter(ds, d.kcore)
        if len(ds) == 0:
            raise DataError(f"{d.kcore}-core filter left no interactions")
    missing = np.setdiff1d(ds.item_ids, images.item_ids)
    if len(missing):
        raise DataError(f"no image for items {missing[:5].tolist()}")
    images = images.select(ds.item_ids)
    return Workspace(d.name, ds, leave_one_out(ds), images)


# ------------------------------------------------------------------- runner


@dataclass
class _Defense:
    regime: str
    model: ConvClassifier
    store: R.FeatureStore
    predicted: np.ndarray
    categories: dict


def _map(fn, jobs, parallel: int):
    if parallel > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _train_and_rank(kind, split, store, rec_cfg, K):
    model = R.train_recommender(kind, split, store, rec_cfg)
    return R.recommend_all(model, store, split, K)


def run_experiment(cfg: ExperimentConfig, out_dir=None, emit: bool = True) -> ExperimentResult:
    """Run the full grid; failures are recorded per cell and the rest proceed."""
    from .report import emit_report  # noqa: PLC0415 - matplotlib import kept off the library path

    cfg.validate()
    out = Path(out_dir or cfg.out)
    ws = load_workspace(cfg)
    ev = cfg.evaluation
    kmax = max(ev.ks)
    rc = M.RelevanceConfig(ev.tau, ev.s_max)
    catalog = ws.images.item_ids
    num_classes = int(ws.images.labels.max()) + 1
    result = ExperimentResult(cfg, None)

    # 1-2: one IFE and one clean feature store per defense
    defenses: dict[str, _Defense] = {}
    for regime in cfg.regimes:
        model, hist = train(ws.images, cfg.ife, regime)
        result.ife_accuracy[regime] = hist.holdout_accuracy
        store = R.FeatureStore(catalog, model.extract_features(ws.images.pixels))
        pred = model.predict_class(ws.images.pixels)
        cats = {c: M.CategorySet.from_predictions(catalog, pred, c) for c in range(num_classes)}
        defenses[regime] = _Defense(regime, model, store, pred, cats)
        if emit:
            (out / "ife").mkdir(parents=True, exist_ok=True)
            model.save(out / "ife" / f"{regime}.bin")

    # 3: clean recommenders
    jobs = [(regime, kind) for regime in cfg.regimes for kind in cfg.recommenders]

    def clean_job(job):
        regime, kind = job
        try:
            return job, _train_and_rank(kind, ws.split, defenses[regime].store, cfg.recommenders[kind], kmax), None
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            log.error("clean cell %s failed: %s", job, exc)
            return job, None, f"{type(exc).__name__}: {exc}"

    clean = {job: (lists, err) for job, lists, err in _map(clean_job, jobs, cfg.parallel)}
    ok_lists = [(clean[j][0], defenses[j[0]].categories) for j in jobs if clean[j][1] is None]
    if not ok_lists:
        raise RuntimeError("every clean recommender failed; nothing to plan from")
    chr_by_class = {
        c: float(np.mean([M.chr_at_k(l, cats[c], ev.plan_k).mean for l, cats in ok_lists]))
        for c in range(num_classes)
    }
    plan = plan_from_chr(chr_by_class, ev.plan_ratio, ev.plan_tolerance)
    result.plan = plan
    log.info("category plan: origin %d (CHR %.4f) -> target %d (CHR %.4f)",
             plan.origin, plan.origin_chr, plan.target, plan.target_chr)

    def finish(job, attack, lists, err):
        regime, kind = job
        cell = CellResult(ws.name, kind, regime, attack, error=err)
        if err is None:
            try:
                cell.values = cell_metrics(lists, ws.split, defenses[regime].categories[plan.origin], ev.ks, rc, catalog)
            except Exception as exc:  # noqa: BLE001
                cell.error = f"{type(exc).__name__}: {exc}"
        return cell

    cells = [finish(j, CLEAN, *clean[j]) for j in jobs]

    # 4-7: attack origin images, re-extract, retrain from scratch
    for regime, (label, spec) in itertools.product(cfg.regimes, cfg.attacks.items()):
        d = defenses[regime]
        origin_ids = np.array(sorted(d.categories[plan.origin].items), dtype=np.int64)
        try:
            if len(origin_ids) == 0:
                raise ValueError(f"the {regime} IFE assigns no item to origin class {plan.origin}")
            spec = dataclasses.replace(spec, target=plan.target, quantize=True)
            x = ws.images.select(origin_ids).pixels
            res: AttackResult = run_attack(d.model, x, spec).quantized(d.model)
            attacked = d.store.replace(origin_ids, d.model.extract_features(res.perturbed))
            result.attacks.append(AttackSummary(
                ws.name, regime, label, plan.origin, plan.target, len(origin_ids),
                M.success_rate(res.achieved, plan.target), M.feature_loss(d.store, attacked, origin_ids),
                float(res.l2.mean()),
            ))
            attack_err = None
        except Exception as exc:  # noqa: BLE001
            log.error("attack %s on %s failed: %s", label, regime, exc)
            log.debug(traceback.format_exc())
            attack_err = f"{type(exc).__name__}: {exc}"
            attacked = None

        kinds = list(cfg.recommenders)

        def attacked_job(kind):
            if attack_err is not None:
                return None, attack_err
            try:
                return _train_and_rank(kind, ws.split, attacked, cfg.recommenders[kind], kmax), None
            except Exception as exc:  # noqa: BLE001
                return None, f"{type(exc).__name__}: {exc}"

        for kind, (lists, err) in zip(kinds, _map(attacked_job, kinds, cfg.parallel)):
            cells.append(finish((regime, kind), label, lists, err))

    result.cells = cells
    if emit:
        emit_report(result, out)
    return result
