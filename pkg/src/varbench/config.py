"""Experiment configuration read from an INI file.

Example::

    [dataset]
    name = synthetic
    kcore = 0
    seed = 0

    [ife]
    regimes = traditional, adv_train, free_adv_train
    epochs = 80

    [attack.pgd]
    kind = pgd
    epsilon = 8

    [recommender.vbpr]
    epochs = 100

    [evaluation]
    ks = 20, 50
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attacks import AttackSpec
from .dataio import SynthSpec
from .ife import REGIMES, TrainConfig
from .recsys import RecConfig

RECOMMENDERS = ("fm", "vbpr", "amr")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    path: str | None = None  # directory with interactions.csv and images/
    kcore: int = 0
    synth: SynthSpec = field(default_factory=SynthSpec)


@dataclass
class EvalConfig:
    ks: tuple = (20, 50)
    tau: float = 1.0
    s_max: float = 1.0
    seed: int = 0
    plan_ratio: float = 4.0
    plan_tolerance: float = 0.5  # allowed |log(ratio / plan_ratio)| before warning
    plan_k: int = 50


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    regimes: tuple = REGIMES
    ife: TrainConfig = field(default_factory=TrainConfig)
    attacks: dict = field(default_factory=dict)  # label -> AttackSpec (target set at run time)
    recommenders: dict = field(default_factory=dict)  # kind -> RecConfig
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    out: str = "out"
    parallel: int = 1

    def validate(self) -> None:
        for r in self.regimes:
            if r not in REGIMES:
                raise ConfigError(f"unknown IFE regime {r!r}")
        if not self.regimes:
            raise ConfigError("at least one IFE regime is required")
        if not self.recommenders:
            raise ConfigError("at least one recommender is required")
        for k in self.recommenders:
            if k not in RECOMMENDERS:
                raise ConfigError(f"unknown recommender {k!r}")
        if not self.evaluation.ks or min(self.evaluation.ks) < 1:
            raise ConfigError("evaluation ks must be positive")
        if self.dataset.name != "synthetic":
            if not self.dataset.path:
                raise ConfigError("a non-synthetic dataset needs a path")

    def with_seed(self, seed: int) -> ExperimentConfig:
        """Same experiment with every seed field set to ``seed``."""
        ds = dataclasses.replace(self.dataset, synth=dataclasses.replace(self.dataset.synth, seed=seed))
        return dataclasses.replace(
            self,
            dataset=ds,
            ife=dataclasses.replace(self.ife, seed=seed),
            attacks={k: dataclasses.replace(a, seed=seed) for k, a in self.attacks.items()},
            recommenders={k: dataclasses.replace(r, seed=seed) for k, r in self.recommenders.items()},
            evaluation=dataclasses.replace(self.evaluation, seed=seed),
        )


def default_attacks() -> dict:
    specs = [AttackSpec("fgsm", epsilon=4), AttackSpec("pgd", epsilon=8), AttackSpec("cw_l2", target=0)]
    return {s.label: s for s in specs}


def default_config() -> ExperimentConfig:
    return ExperimentConfig(attacks=default_attacks(), recommenders={k: RecConfig() for k in RECOMMENDERS})


# ------------------------------------------------------------------ parsing


def _coerce(raw: str, like, name: str):
    raw = raw.strip()
    if isinstance(like, bool):
        v = raw.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if like is None and raw.lower() in ("", "none"):
        return None
    if "," in raw and not isinstance(like, str):
        return tuple(_number(v) for v in raw.split(",") if v.strip())
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(_number(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    if like is None:
        return _number(raw)
    return raw


def _number(v: str):
    v = v.strip()
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def _fill(cls, section, defaults, skip=()):
    """Build dataclass ``cls`` from ``defaults`` overridden by keys of ``section``."""
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        kwargs[key] = _coerce(raw, getattr(defaults, key), f"[{section.name}] {key}")
    try:
        return dataclasses.replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from None


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = default_config()

    if cp.has_section("dataset"):
        sec = cp["dataset"]
        synth = _fill(SynthSpec, sec, SynthSpec(), skip=("name", "path", "kcore"))
        name = sec.get("name", "synthetic").strip()
        path = sec.get("path")
        if path and base_dir is not None and not Path(path).is_absolute():
            path = str(base_dir / path)
        cfg.dataset = DatasetConfig(name=name, path=path, kcore=int(sec.get("kcore", 0)), synth=synth)

    if cp.has_section("ife"):
        sec = cp["ife"]
        if "regimes" in sec:
            cfg.regimes = tuple(r.strip() for r in sec["regimes"].split(",") if r.strip())
        cfg.ife = _fill(TrainConfig, sec, TrainConfig(), skip=("regimes",))

    attack_secs = [s for s in cp.sections() if s.startswith("attack.")]
    if attack_secs or cp.has_section("attacks"):
        cfg.attacks = {}
    for name in attack_secs:
        sec = cp[name]
        kind = sec.get("kind", name.split(".", 1)[1]).strip()
        # the target is filled in from the category plan; a placeholder keeps C&W valid
        spec = _fill(AttackSpec, sec, AttackSpec(kind, target=0), skip=("kind",))
        cfg.attacks[name.split(".", 1)[1]] = spec

    rec_secs = [s for s in cp.sections() if s.startswith("recommender.")]
    if rec_secs:
        cfg.recommenders = {}
    for name in rec_secs:
        kind = name.split(".", 1)[1]
        cfg.recommenders[kind] = _fill(RecConfig, cp[name], RecConfig())

    if cp.has_section("evaluation"):
        cfg.evaluation = _fill(EvalConfig, cp["evaluation"], EvalConfig())
        cfg.evaluation.ks = tuple(int(k) for k in cfg.evaluation.ks)

    if cp.has_section("output"):
        cfg.out = cp["output"].get("dir", cfg.out)
        cfg.parallel = int(cp["output"].get("parallel", cfg.parallel))

    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)
