"""Image feature extractor: a small conv classifier and its three training regimes.

Architecture: conv(3x3, stride 2) -> ReLU -> conv(3x3, stride 2) -> ReLU
-> global average pool (the extraction layer, gamma channels) -> dense head.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, pgd
from .dataio import ImageSet

log = logging.getLogger(__name__)

REGIMES = ("traditional", "adv_train", "free_adv_train")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    lr: float = 5e-3
    eps_def: float = 4.0  # pixel units / 255
    replays: int = 4  # free training: passes per minibatch
    inner_steps: int = 7  # PGD steps for adversarial training
    inner_alpha: float | None = None  # defaults to eps_def / 4
    holdout: float = 0.2
    hidden_channels: int = 16
    feature_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.eps_def < 0:
            raise ValueError("eps_def must be >= 0")
        if self.replays < 1:
            raise ValueError("replays (m) must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")

    @property
    def free_epochs(self) -> int:
        return math.ceil(self.epochs / self.replays)


class ConvClassifier:
    """Classifier F with feature extractor F^(e) = global-average-pool output."""

    PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")

    def __init__(self, params: dict[str, np.ndarray], regime: str = "traditional", meta: dict | None = None):
        self.params = {k: np.ascontiguousarray(params[k], dtype=np.float64) for k in self.PARAM_NAMES}
        self.regime = regime
        self.meta = dict(meta or {})

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int, num_classes: int,
             hidden: int = 16, gamma: int = 64, regime: str = "traditional") -> ConvClassifier:
        params = {
            "conv1_w": T.fan_in_uniform(rng, (hidden, in_channels, 3, 3)),
            "conv1_b": np.zeros(hidden),
            "conv2_w": T.fan_in_uniform(rng, (gamma, hidden, 3, 3)),
            "conv2_b": np.zeros(gamma),
            "fc_w": T.fan_in_uniform(rng, (gamma, num_classes), gain=1.0, fan_in=gamma),
            "fc_b": np.zeros(num_classes),
        }
        return cls(params, regime)

    @property
    def gamma(self) -> int:
        return self.params["conv2_w"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.params["fc_w"].shape[1]

    @property
    def in_channels(self) -> int:
        return self.params["conv1_w"].shape[1]

    def _tensors(self, trainable: bool) -> dict[str, T.Tensor]:
        return {k: T.Tensor.view(v, requires_grad=trainable, name=k) for k, v in self.params.items()}

    def forward(self, x: T.Tensor, p: dict[str, T.Tensor] | None = None) -> tuple[T.Tensor, T.Tensor]:
        """Return (features, logits) for an NCHW batch."""
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise T.ShapeError(f"expected (N, {self.in_channels}, H, W) images, got {x.shape}")
        p = p or self._tensors(False)
        h = T.relu(T.add(T.conv2d(x, p["conv1_w"], stride=2, padding=1), p["conv1_b"]))
        h = T.relu(T.add(T.conv2d(h, p["conv2_w"], stride=2, padding=1), p["conv2_b"]))
        feats = T.global_avg_pool(h)
        logits = T.add(T.matmul(feats, p["fc_w"]), p["fc_b"])
        return feats, logits

    def logits(self, x: T.Tensor) -> T.Tensor:
        return self.forward(x)[1]

    def head(self, features: np.ndarray) -> np.ndarray:
        return features @ self.params["fc_w"] + self.params["fc_b"]

    def extract_features(self, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
        pixels = _as_batch(pixels)
        out = [self.forward(T.Tensor.view(pixels[s:s + batch_size]))[0].data for s in range(0, len(pixels), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.gamma))

    def predict_logits(self, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
        pixels = _as_batch(pixels)
        out = [self.forward(T.Tensor.view(pixels[s:s + batch_size]))[1].data for s in range(0, len(pixels), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def predict_class(self, pixels: np.ndarray) -> np.ndarray:
        # argmax keeps the first maximum, so ties resolve to the smallest class id
        return np.argmax(self.predict_logits(pixels), axis=1)

    def accuracy(self, images: ImageSet) -> float:
        if len(images) == 0:
            return float("nan")
        return float((self.predict_class(images.pixels) == images.labels).mean())

    # -------------------------------------------------------------- persistence

    def save(self, path) -> None:
        path = Path(path)
        T.save_tensors(path, self.params)
        meta = {"regime": self.regime, "gamma": self.gamma, "num_classes": self.num_classes, **self.meta}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> ConvClassifier:
        path = Path(path)
        params = T.load_tensors(path)
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        regime = meta.pop("regime", "traditional")
        meta.pop("gamma", None)
        meta.pop("num_classes", None)
        return cls(params, regime, meta)


class LinearClassifier:
    """Logits = flatten(x) @ W + b. Handy when an attack needs an analytic optimum."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    def logits(self, x: T.Tensor) -> T.Tensor:
        flat = T.reshape(x, (x.shape[0], -1))
        return T.add(T.matmul(flat, T.Tensor.view(self.weight)), T.Tensor.view(self.bias))


def _as_batch(pixels) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr)


def predict_class(model: ConvClassifier, x) -> int | np.ndarray:
    """Class of one image (C, H, W) or of each image in a batch."""
    single = np.asarray(x).ndim == 3
    out = model.predict_class(x)
    return int(out[0]) if single else out


def extract_features(model: ConvClassifier, x) -> np.ndarray:
    single = np.asarray(x).ndim == 3
    out = model.extract_features(x)
    return out[0] if single else out


# ------------------------------------------------------------------- training


@dataclass
class TrainHistory:
    regime: str
    epochs_run: int = 0
    backward_passes: int = 0
    losses: list[float] = field(default_factory=list)
    holdout_accuracy: float = float("nan")
    train_accuracy: float = float("nan")


def _check_data(data: ImageSet) -> None:
    classes = np.unique(data.labels)
    if len(classes) < 2:
        raise ValueError("training needs at least 2 classes")
    if classes.min() < 0:
        raise ValueError("unlabeled images (label -1) cannot be used for training")
    if data.pixels.min() < 0.0 or data.pixels.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1]")


def _split(n: int, holdout: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_hold = int(round(n * holdout))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _train(data: ImageSet, cfg: TrainConfig, regime: str) -> tuple[ConvClassifier, TrainHistory]:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    _check_data(data)
    if regime != "traditional" and cfg.eps_def < 0:
        raise ValueError("eps_def must be >= 0")
    rng = np.random.default_rng(cfg.seed)
    attack_rng = np.random.default_rng([cfg.seed, 7919])
    num_classes = int(data.labels.max()) + 1
    model = ConvClassifier.init(rng, data.pixels.shape[1], num_classes, cfg.hidden_channels, cfg.feature_dim, regime)
    train_idx, hold_idx = _split(len(data), cfg.holdout, rng)
    opt = T.Adam(cfg.lr)
    names = ConvClassifier.PARAM_NAMES
    hist = TrainHistory(regime)

    eps = cfg.eps_def / 255.0
    inner = AttackSpec(
        "pgd", target=None, epsilon=cfg.eps_def,
        alpha=cfg.eps_def / 4.0 if cfg.inner_alpha is None else cfg.inner_alpha,
        iterations=cfg.inner_steps, random_start=True, early_stop=False,
    ) if regime == "adv_train" else None

    epochs = cfg.free_epochs if regime == "free_adv_train" else cfg.epochs
    replays = cfg.replays if regime == "free_adv_train" else 1
    delta = np.zeros((cfg.batch_size,) + data.pixels.shape[1:]) if regime == "free_adv_train" else None

    def step(x: np.ndarray, y: np.ndarray, want_input_grad: bool):
        p = model._tensors(True)
        xt = T.Tensor(x, requires_grad=want_input_grad)
        _, logits = model.forward(xt, p)
        loss = T.softmax_cross_entropy(logits, y)
        T.backward(loss)
        hist.backward_passes += 1
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"{regime}: loss became {value} at epoch {hist.epochs_run + 1} "
                f"(lr={cfg.lr}, batch={cfg.batch_size}, max|param|="
                f"{max(float(np.abs(v).max()) for v in model.params.values()):.3g})"
            )
        opt.step([model.params[k] for k in names], [p[k].grad for k in names])
        return value, (xt.grad if want_input_grad else None)

    for _ in range(epochs):
        order = rng.permutation(train_idx)
        epoch_losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x, y = data.pixels[idx], data.labels[idx]
            if regime == "traditional":
                value, _ = step(x, y, False)
                epoch_losses.append(value)
            elif regime == "adv_train":
                x_adv = pgd(model, x, inner, y_true=y, rng=attack_rng).perturbed
                value, _ = step(x_adv, y, False)
                epoch_losses.append(value)
            else:
                b = len(idx)
                for _r in range(replays):
                    x_adv = np.clip(x + delta[:b], 0.0, 1.0)
                    value, gx = step(x_adv, y, True)
                    delta[:b] = np.clip(delta[:b] + eps * np.sign(gx), -eps, eps)
                    epoch_losses.append(value)
        hist.epochs_run += 1
        hist.losses.append(float(np.mean(epoch_losses)))
        log.debug("%s epoch %d loss %.4f", regime, hist.epochs_run, hist.losses[-1])

    sub = lambda idx: ImageSet(data.item_ids[idx], data.pixels[idx], data.labels[idx])  # noqa: E731
    hist.train_accuracy = model.accuracy(sub(train_idx))
    hist.holdout_accuracy = model.accuracy(sub(hold_idx)) if len(hold_idx) else float("nan")
    model.meta.update({
        "eps_def": cfg.eps_def if regime != "traditional" else 0.0,
        "replays": cfg.replays if regime == "free_adv_train" else 1,
        "seed": cfg.seed,
        "epochs_run": hist.epochs_run,
        "holdout_accuracy": hist.holdout_accuracy,
        "config": asdict(cfg),
    })
    log.info("%s classifier: holdout accuracy %.3f", regime, hist.holdout_accuracy)
    return model, hist


def train_standard(data: ImageSet, cfg: TrainConfig) -> tuple[ConvClassifier, TrainHistory]:
    return _train(data, cfg, "traditional")


def train_adversarial(data: ImageSet, cfg: TrainConfig) -> tuple[ConvClassifier, TrainHistory]:
    """Madry-style training: every minibatch is swapped for its untargeted PGD version."""
    return _train(data, cfg, "adv_train")


def train_free(data: ImageSet, cfg: TrainConfig) -> tuple[ConvClassifier, TrainHistory]:
    """Free adversarial training.

    Each minibatch is replayed ``cfg.replays`` times. One backward per replay
    yields both the weight gradient (applied by the optimizer) and the input
    gradient, which advances a perturbation that persists across replays and
    minibatches. The epoch count is divided by the replay count.
    """
    return _train(data, cfg, "free_adv_train")


def train(data: ImageSet, cfg: TrainConfig, regime: str) -> tuple[ConvClassifier, TrainHistory]:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    return {"traditional": train_standard, "adv_train": train_adversarial, "free_adv_train": train_free}[regime](data, cfg)
