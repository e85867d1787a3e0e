"""Command line entry point: ``varbench <verb> --config exp.ini --out DIR``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import metrics as M
from . import recsys as R
from .attacks import run_attack, write_attack_outputs
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .dataio import DataError, save_images, save_interactions
from .ife import ConvClassifier, train

log = logging.getLogger("varbench")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "data", None):
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, name=Path(args.data).name, path=args.data))
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    from .dataio import synthesize_dataset

    cfg = _config(args)
    out = _out(args, cfg)
    ds, images = synthesize_dataset(cfg.dataset.synth)
    save_interactions(out / "interactions.csv", ds)
    save_images(out / "images", images)
    spec = {k: v for k, v in dataclasses.asdict(cfg.dataset.synth).items()}
    (out / "synth.json").write_text(json.dumps(spec, indent=2, sort_keys=True, default=list) + "\n")
    print(f"wrote {len(ds)} interactions, {len(images)} images to {out}")
    return 0


def cmd_train_ife(args) -> int:
    from .pipeline import load_workspace

    cfg = _config(args)
    out = _out(args, cfg)
    ws = load_workspace(cfg)
    regimes = [args.regime] if args.regime else list(cfg.regimes)
    for regime in regimes:
        model, hist = train(ws.images, cfg.ife, regime)
        model.save(out / f"{regime}.bin")
        print(f"{regime}: holdout accuracy {hist.holdout_accuracy:.4f} -> {out / (regime + '.bin')}")
    return 0


def cmd_extract(args) -> int:
    from .pipeline import load_workspace

    cfg = _config(args)
    ws = load_workspace(cfg)
    model = ConvClassifier.load(args.ife)
    store = R.FeatureStore(ws.images.item_ids, model.extract_features(ws.images.pixels))
    out = Path(args.out or "features.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    store.save(out)
    print(f"wrote {len(store)} feature vectors (gamma={store.gamma}) to {out}")
    return 0


def cmd_attack(args) -> int:
    from .pipeline import load_workspace

    cfg = _config(args)
    out = _out(args, cfg)
    ws = load_workspace(cfg)
    model = ConvClassifier.load(args.ife)
    if args.attack not in cfg.attacks:
        raise ConfigError(f"attack {args.attack!r} is not in the config (have {sorted(cfg.attacks)})")
    spec = dataclasses.replace(cfg.attacks[args.attack], target=args.target, quantize=True)
    pred = model.predict_class(ws.images.pixels)
    ids = ws.images.item_ids[pred == args.source_class]
    if len(ids) == 0:
        raise DataError(f"the IFE assigns no item to class {args.source_class}")
    res = run_attack(model, ws.images.select(ids).pixels, spec).quantized(model)
    res = dataclasses.replace(res, item_ids=ids)
    write_attack_outputs(out, res)
    print(f"{spec.label}: {len(ids)} images, SR {M.success_rate(res.achieved, args.target):.4f} -> {out}")
    return 0


def cmd_recommend(args) -> int:
    from .pipeline import load_workspace

    cfg = _config(args)
    ws = load_workspace(cfg)
    store = R.FeatureStore.load(args.features)
    rec_cfg = cfg.recommenders.get(args.recommender, R.RecConfig(seed=cfg.evaluation.seed))
    model = R.train_recommender(args.recommender, ws.split, store, rec_cfg)
    lists = R.recommend_all(model, store, ws.split, args.k or max(cfg.evaluation.ks))
    out = Path(args.out or "rankings.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    R.write_rankings(out, lists)
    print(f"{args.recommender}: AUC {R.pairwise_auc(model, store, ws.split):.4f}; rankings -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import METRICS, cell_metrics, load_workspace

    cfg = _config(args)
    ws = load_workspace(cfg)
    lists = R.read_rankings(args.rankings)
    if args.ife:
        pred = ConvClassifier.load(args.ife).predict_class(ws.images.pixels)
    else:
        pred = ws.images.labels
    cat = M.CategorySet.from_predictions(ws.images.item_ids, pred, args.category)
    rc = M.RelevanceConfig(cfg.evaluation.tau, cfg.evaluation.s_max)
    values = cell_metrics(lists, ws.split, cat, cfg.evaluation.ks, rc, ws.images.item_ids)
    out = Path(args.out or "metrics.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "K", "value"])
        for m in METRICS:
            for K in sorted(cfg.evaluation.ks):
                w.writerow([m, K, repr(float(values[(m, K)]))])
    print(f"wrote metrics for category {args.category} to {out}")
    return 0


def cmd_run(args) -> int:
    from .pipeline import run_experiment

    cfg = _config(args)
    if args.parallel:
        cfg = dataclasses.replace(cfg, parallel=args.parallel)
    out = _out(args, cfg)
    result = run_experiment(cfg, out)
    n_ok = sum(c.ok for c in result.cells)
    print(f"{n_ok}/{len(result.cells)} cells completed; report in {out}")
    for c in result.failed:
        print(f"FAILED {c.key}: {c.error}", file=sys.stderr)
    return 0 if not result.failed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varbench", description="Adversarial attacks against visual recommenders.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI experiment file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--out", help="output directory or file")
        sp.add_argument("--data", help="dataset directory with interactions.csv and images/")
        sp.set_defaults(fn=fn)
        return sp

    verb("synth", cmd_synth, "generate the synthetic dataset")
    sp = verb("train-ife", cmd_train_ife, "train image feature extractors")
    sp.add_argument("--regime", choices=("traditional", "adv_train", "free_adv_train"))
    sp = verb("extract", cmd_extract, "write a feature store for every catalog image")
    sp.add_argument("--ife", required=True, help="classifier checkpoint")
    sp = verb("attack", cmd_attack, "attack the images of one class toward a target")
    sp.add_argument("--ife", required=True)
    sp.add_argument("--attack", required=True, help="attack label from the config, e.g. pgd_eps8")
    sp.add_argument("--source-class", type=int, required=True)
    sp.add_argument("--target", type=int, required=True)
    sp = verb("recommend", cmd_recommend, "train a recommender and write top-K rankings")
    sp.add_argument("--features", required=True)
    sp.add_argument("--recommender", choices=("fm", "vbpr", "amr"), required=True)
    sp.add_argument("-k", type=int)
    sp = verb("evaluate", cmd_evaluate, "compute metrics for a rankings file")
    sp.add_argument("--rankings", required=True)
    sp.add_argument("--category", type=int, required=True)
    sp.add_argument("--ife", help="checkpoint whose clean predictions define the category (default: labels)")
    sp = verb("run", cmd_run, "full pipeline over the experiment grid")
    sp.add_argument("--parallel", type=int, default=0, help="worker threads for independent cells")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DataError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
