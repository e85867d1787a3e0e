"""White-box attacks on the feature extractor: FGSM, PGD and Carlini-Wagner L2.

Every attack works on a batch ``x`` of shape (N, ...) with values in [0, 1]
and a model exposing ``logits(x: Tensor) -> Tensor``. Budgets ``epsilon``
and ``alpha`` are given in 8-bit pixel units, i.e. divided by 255 before use.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from . import tensor as T
from .dataio import quantize, save_image


class Differentiable(Protocol):
    def logits(self, x: T.Tensor) -> T.Tensor: ...


@dataclass(frozen=True)
class AttackSpec:
    kind: str  # fgsm | pgd | cw_l2
    target: int | None = None
    epsilon: float = 4.0
    alpha: float | None = None  # PGD step; defaults to epsilon / 6
    iterations: int = 10
    random_start: bool = True
    early_stop: bool = True
    # C&W L2
    kappa: float = 0.0
    binary_search_steps: int = 5
    initial_const: float = 1e-2
    learning_rate: float = 5e-3
    max_iterations: int = 1000
    abort_early: bool = True
    search_growth: float = 10.0
    # check success on the 8-bit image that would actually be uploaded
    quantize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "cw_l2"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1 or self.max_iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.kind == "pgd" and self.step > self.eps + 1e-15:
            raise ValueError("PGD step alpha must not exceed epsilon")
        if self.kind == "cw_l2" and self.target is None:
            raise ValueError("the C&W L2 attack is targeted; set target")

    @property
    def eps(self) -> float:
        return self.epsilon / 255.0

    @property
    def step(self) -> float:
        alpha = self.epsilon / 6.0 if self.alpha is None else self.alpha
        return alpha / 255.0

    @property
    def label(self) -> str:
        if self.kind == "cw_l2":
            return "cw"
        return f"{self.kind}_eps{self.epsilon:g}"


@dataclass
class AttackedImage:
    original: np.ndarray
    perturbed: np.ndarray
    achieved: int
    success: bool

    @property
    def delta(self) -> np.ndarray:
        return self.perturbed - self.original


@dataclass
class AttackResult:
    """Batched attack output; index it for a single ``AttackedImage``."""

    original: np.ndarray
    perturbed: np.ndarray
    achieved: np.ndarray
    success: np.ndarray
    spec: AttackSpec
    item_ids: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.original)

    def __getitem__(self, k: int) -> AttackedImage:
        return AttackedImage(self.original[k], self.perturbed[k], int(self.achieved[k]), bool(self.success[k]))

    @property
    def delta(self) -> np.ndarray:
        return self.perturbed - self.original

    @property
    def l2(self) -> np.ndarray:
        return np.sqrt((self.delta.reshape(len(self), -1) ** 2).sum(axis=1))

    @property
    def linf(self) -> np.ndarray:
        return np.abs(self.delta.reshape(len(self), -1)).max(axis=1)

    def quantized(self, model: Differentiable) -> AttackResult:
        """The 8-bit version the adversary would upload, re-scored by ``model``."""
        px = quantize(self.perturbed)
        achieved = predict(model, px)
        return replace(self, perturbed=px, achieved=achieved, success=_hits(achieved, self.spec.target, self.extra.get("true")))


# ----------------------------------------------------------------- utilities


def logits_of(model: Differentiable, x: np.ndarray) -> np.ndarray:
    return model.logits(T.Tensor.view(np.ascontiguousarray(x, dtype=np.float64))).data


def predict(model: Differentiable, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the smallest class id
    return np.argmax(logits_of(model, x), axis=1)


def input_gradient(model: Differentiable, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the mean cross-entropy w.r.t. the input batch, plus the logits."""
    xt = T.Tensor(x, requires_grad=True)
    z = model.logits(xt)
    loss = T.softmax_cross_entropy(z, labels)
    T.backward(loss)
    return xt.grad, z.data


def target_margin_met(z: np.ndarray, targets: np.ndarray, kappa: float) -> np.ndarray:
    """Rows whose predicted class is the target with a logit lead of at least ``kappa``."""
    rows = np.arange(len(z))
    other = z.copy()
    other[rows, targets] = -np.inf
    lead = z[rows, targets] - other.max(axis=1)
    return (np.argmax(z, axis=1) == targets) & (lead >= kappa)


def _hits(achieved: np.ndarray, target, true) -> np.ndarray:
    if target is not None:
        return achieved == np.asarray(target)
    if true is None:
        return np.zeros(len(achieved), dtype=bool)
    return achieved != np.asarray(true)


def _labels(model, x, spec: AttackSpec, y_true):
    n = len(x)
    if spec.target is not None:
        return np.broadcast_to(np.asarray(spec.target, dtype=np.int64), (n,)).copy(), -1.0
    if y_true is None:
        y_true = predict(model, x)
    return np.asarray(y_true, dtype=np.int64), 1.0


def _finish(model, x, adv, spec, y_true, **extra) -> AttackResult:
    achieved = predict(model, adv)
    true = None if y_true is None else np.asarray(y_true)
    res = AttackResult(x.copy(), adv, achieved, _hits(achieved, spec.target, true), spec, extra={"true": true, **extra})
    return res


# -------------------------------------------------------------------- attacks


def fgsm(model: Differentiable, x: np.ndarray, spec: AttackSpec, y_true=None) -> AttackResult:
    """One signed-gradient step of size epsilon.

    Untargeted: ascend the loss of the true label. Targeted: descend the
    loss of ``spec.target``.
    """
    x = np.asarray(x, dtype=np.float64)
    labels, direction = _labels(model, x, spec, y_true)
    grad, _ = input_gradient(model, x, labels)
    adv = np.clip(x + direction * spec.eps * np.sign(grad), 0.0, 1.0)
    return _finish(model, x, adv, spec, y_true)


def pgd(model: Differentiable, x: np.ndarray, spec: AttackSpec, y_true=None, rng: np.random.Generator | None = None) -> AttackResult:
    """Iterated sign steps of size alpha, projected onto the epsilon-ball and [0, 1].

    Targeted runs freeze an image as soon as it reaches the target class
    (judged on the 8-bit image when ``spec.quantize`` is set).
    """
    x = np.asarray(x, dtype=np.float64)
    labels, direction = _labels(model, x, spec, y_true)
    eps, alpha = spec.eps, spec.step
    lo, hi = x - eps, x + eps
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.random_start and eps > 0:
        adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    else:
        adv = x.copy()
    active = np.ones(len(x), dtype=bool)
    steps_taken = np.zeros(len(x), dtype=np.int64)
    stop_on_target = spec.early_stop and spec.target is not None
    for _ in range(spec.iterations):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        grad, _ = input_gradient(model, adv[idx], labels[idx])
        step = adv[idx] + direction * alpha * np.sign(grad)
        step = np.minimum(np.maximum(step, lo[idx]), hi[idx])
        adv[idx] = np.clip(step, 0.0, 1.0)
        steps_taken[idx] += 1
        if stop_on_target:
            probe = quantize(adv[idx]) if spec.quantize else adv[idx]
            reached = predict(model, probe) == labels[idx]
            active[idx[reached]] = False
    return _finish(model, x, adv, spec, y_true, steps=steps_taken)


def cw_l2(model: Differentiable, x: np.ndarray, spec: AttackSpec) -> AttackResult:
    """Targeted Carlini-Wagner L2 attack.

    Minimises ``||x* - x||^2 + a * max(max_{j!=t} Z_j - Z_t, -kappa)`` over
    ``x* = (tanh(w) + 1) / 2`` with Adam, binary-searching the trade-off
    constant ``a`` per image. Keeps the smallest-L2 successful iterate; images
    that never succeed return the last iterate with ``success=False``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    flat = x.reshape(n, -1)
    t = np.broadcast_to(np.asarray(spec.target, dtype=np.int64), (n,)).copy()
    kappa = spec.kappa

    def succeeds(candidates: np.ndarray, targets: np.ndarray) -> np.ndarray:
        px = quantize(candidates) if spec.quantize else candidates
        return target_margin_met(logits_of(model, px), targets, kappa)

    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()
    last_adv = x.copy()
    found = succeeds(x, t)
    best_l2[found] = 0.0

    w0 = np.arctanh(np.clip(2.0 * x - 1.0, -1.0 + 1e-12, 1.0 - 1e-12) * (1.0 - 1e-6))
    const = np.full(n, spec.initial_const)
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    todo = np.flatnonzero(~found)
    iterations_run = 0

    for _ in range(spec.binary_search_steps):
        if len(todo) == 0:
            break
        w = w0[todo].copy()
        xs = x[todo]
        ts = t[todo]
        cs = const[todo]
        opt = T.Adam(spec.learning_rate)
        step_success = np.zeros(len(todo), dtype=bool)
        prev = np.inf
        check_every = max(spec.max_iterations // 10, 1)
        for it in range(spec.max_iterations):
            wt = T.Tensor.view(w.copy(), requires_grad=True)
            adv_t = T.shift(T.scale(T.tanh(wt), 0.5), 0.5)
            z_t = model.logits(adv_t)
            z = z_t.data
            rows = np.arange(len(todo))
            other = z.copy()
            other[rows, ts] = -np.inf
            j = np.argmax(other, axis=1)
            gap = z[rows, j] - z[rows, ts]
            active = gap > -kappa
            coef = np.zeros_like(z)
            coef[rows, j] = cs * active
            coef[rows, ts] -= cs * active
            d = T.sub(adv_t, T.Tensor.view(xs))
            loss = T.add(T.tensor_sum(T.mul(d, d)), T.tensor_sum(T.mul(z_t, T.Tensor.view(coef))))
            T.backward(loss)
            iterations_run += 1

            adv = adv_t.data
            l2 = np.sqrt(((adv - xs).reshape(len(todo), -1) ** 2).sum(axis=1))
            float_ok = target_margin_met(z, ts, kappa)
            cand = float_ok & (l2 < best_l2[todo])
            if spec.quantize and cand.any():
                cand[cand] = succeeds(adv[cand], ts[cand])
            step_success |= float_ok
            if cand.any():
                g = todo[cand]
                best_l2[g] = l2[cand]
                best_adv[g] = adv[cand]
            last_adv[todo] = adv

            total = float(loss.data)
            if spec.abort_early and it % check_every == 0:
                if total > prev * 0.9999:
                    break
                prev = total
            opt.step([w], [wt.grad])

        succ_rows = step_success
        tw = todo
        upper[tw[succ_rows]] = np.minimum(upper[tw[succ_rows]], const[tw[succ_rows]])
        fail = tw[~succ_rows]
        lower[fail] = np.maximum(lower[fail], const[fail])
        bracketed = upper[tw] < 1e9
        const[tw[bracketed]] = (lower[tw[bracketed]] + upper[tw[bracketed]]) / 2.0
        grow = tw[~bracketed]
        const[grow] = const[grow] * spec.search_growth

    success = np.isfinite(best_l2)
    out = np.where(success[:, None], best_adv.reshape(n, -1), last_adv.reshape(n, -1)).reshape(x.shape)
    achieved = predict(model, quantize(out) if spec.quantize else out)
    return AttackResult(x.copy(), out, achieved, success, spec,
                        extra={"true": None, "const": const, "iterations": iterations_run, "l2_float": np.where(success, best_l2, np.nan)})


def run_attack(model: Differentiable, x: np.ndarray, spec: AttackSpec, y_true=None, rng=None) -> AttackResult:
    if spec.kind == "fgsm":
        return fgsm(model, x, spec, y_true)
    if spec.kind == "pgd":
        return pgd(model, x, spec, y_true, rng=rng)
    return cw_l2(model, x, spec)


# ----------------------------------------------------------------- batch I/O

MANIFEST_COLUMNS = ["item_id", "kind", "epsilon", "target_class", "success", "l2_norm", "linf_norm"]


def write_attack_outputs(out_dir, result: AttackResult) -> Path:
    """Write perturbed images as ``<item_id>.png`` plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = result.item_ids if result.item_ids is not None else np.arange(len(result))
    for iid, px in zip(ids, result.perturbed):
        save_image(out_dir / f"{int(iid)}.png", px)
    manifest = out_dir / "manifest.csv"
    spec = result.spec
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for k, iid in enumerate(ids):
            w.writerow([
                int(iid), spec.kind, f"{spec.epsilon:g}" if spec.kind != "cw_l2" else "",
                "" if spec.target is None else int(spec.target),
                int(bool(result.success[k])), f"{result.l2[k]:.10g}", f"{result.linf[k]:.10g}",
            ])
    return manifest
