"""Independent reference implementations used as test oracles.

Everything here is written in plain Python/numpy without calling into the
package code it checks, so an agreement is a real cross-check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from varbench import tensor as T


# ------------------------------------------------------------------ gradients


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return g


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|); coordinates where both sides are below ``floor`` count as exact."""
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    denom = np.maximum(np.abs(a), np.abs(n))
    err = np.abs(a - n) / np.where(denom > 0, denom, 1.0)
    err[denom < floor] = 0.0
    return err


def random_network(rng: np.random.Generator):
    """A random small conv net with a random loss head.

    Returns (leaves, loss_fn) where ``leaves`` maps names to float64 arrays
    (parameters and the input batch) and ``loss_fn()`` rebuilds the graph on
    the current array values and returns the scalar loss Tensor plus the leaf
    Tensors keyed like ``leaves``.
    """
    n = int(rng.integers(1, 4))
    c_in = int(rng.integers(1, 3))
    size = int(rng.integers(4, 7))
    c_mid = int(rng.integers(2, 5))
    c_out = int(rng.integers(2, 6))
    m = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    head = rng.choice(["xent", "mse", "l2", "sigmoid"])
    leaves = {
        "x": rng.uniform(0, 1, (n, c_in, size, size)),
        "k1": rng.normal(0, 0.5, (c_mid, c_in, 3, 3)),
        "b1": rng.normal(0, 0.1, c_mid),
        "k2": rng.normal(0, 0.5, (c_out, c_mid, 3, 3)),
        "W": rng.normal(0, 0.5, (c_out, m)),
        "b": rng.normal(0, 0.1, m),
    }
    labels = rng.integers(0, m, n)
    target = rng.normal(0, 1, (n, m))

    def loss_fn():
        t = {k: T.Tensor.view(v, requires_grad=True, name=k) for k, v in leaves.items()}
        h = T.relu(T.add(T.conv2d(t["x"], t["k1"], stride=1, padding=padding), t["b1"]))
        h = T.relu(T.conv2d(h, t["k2"], stride=stride, padding=1))
        z = T.add(T.matmul(T.global_avg_pool(h), t["W"]), t["b"])
        if head == "xent":
            loss = T.softmax_cross_entropy(z, labels)
        elif head == "mse":
            loss = T.mse(z, T.Tensor(target))
        elif head == "l2":
            loss = T.l2_norm(T.scale(z, 0.7))
        else:
            loss = T.tensor_sum(T.sigmoid(z))
        return loss, t

    return leaves, loss_fn


def gradcheck_network(rng: np.random.Generator, h: float = 1e-5) -> tuple[np.ndarray, int]:
    """Relative errors over every coordinate of one random network, and its parameter count."""
    leaves, loss_fn = random_network(rng)
    loss, t = loss_fn()
    T.backward(loss)
    errs = []
    for name, arr in leaves.items():
        num = numeric_grad(lambda: float(loss_fn()[0].data), arr, h)
        errs.append(relative_errors(t[name].grad, num))
    n_params = sum(v.size for k, v in leaves.items() if k != "x")
    return np.concatenate(errs), n_params


# -------------------------------------------------------------------- metrics


def chr_oracle(ranked: list, cat: set, K: int) -> float:
    hits = 0
    for pos in range(K):
        if pos < len(ranked) and ranked[pos] in cat:
            hits += 1
    return hits / K


def ncdcg_oracle(ranked: list, cat: set, K: int, tau: float = 1.0, s_max: float = 1.0) -> float:
    rel = 2 ** (s_max - tau + 1) - 1
    cdcg = 0.0
    for pos in range(min(K, len(ranked))):
        if ranked[pos] in cat:
            cdcg += rel / math.log2(pos + 2)
    icdcg = sum(rel / math.log2(k + 1) for k in range(1, min(K, len(cat)) + 1))
    return cdcg / icdcg


def recall_ndcg_oracle(ranked: list, test_item: int, K: int) -> tuple[float, float]:
    for pos, item in enumerate(ranked[:K]):
        if item == test_item:
            return 1.0, 1.0 / math.log2(pos + 2)
    return 0.0, 0.0


def gini_oracle(freq) -> float:
    """Mean absolute difference form: sum_ij |x_i - x_j| / (2 n sum x)."""
    x = [float(v) for v in freq]
    n, total = len(x), sum(x)
    if n == 0 or total == 0:
        return 0.0
    return sum(abs(a - b) for a in x for b in x) / (2 * n * total)


# --------------------------------------------------------------------- graphs


def kcore_oracle(edges: list[tuple[int, int]], k: int) -> set[tuple[int, int]]:
    """Repeatedly delete any edge touching a user or item of degree < k."""
    alive = set(edges)
    while True:
        udeg, ideg = {}, {}
        for u, i in alive:
            udeg[u] = udeg.get(u, 0) + 1
            ideg[i] = ideg.get(i, 0) + 1
        drop = {(u, i) for u, i in alive if udeg[u] < k or ideg[i] < k}
        if not drop:
            return alive
        alive -= drop


def loo_oracle(rows: list[tuple[int, int, int]]) -> dict[int, int]:
    """User -> held-out item: latest timestamp, larger item id on ties."""
    best: dict[int, tuple[int, int]] = {}
    for u, i, t in rows:
        if u not in best or (t, i) > best[u]:
            best[u] = (t, i)
    return {u: i for u, (t, i) in best.items()}


def topk_oracle(scores: dict[int, float], exclude: set, K: int) -> list[int]:
    cands = [(-s, i) for i, s in scores.items() if i not in exclude]
    cands.sort()
    return [i for _, i in cands[:K]]


def plan_oracle(chr_by_class: dict[int, float], ratio: float = 4.0) -> tuple[int, int]:
    """Exhaustive scan of ordered pairs with target CHR above origin CHR."""
    best = None
    for o, t in itertools.permutations(sorted(chr_by_class), 2):
        co, ct = chr_by_class[o], chr_by_class[t]
        if co <= 0 or ct <= co:
            continue
        d = abs(math.log(ct / co) - math.log(ratio))
        if best is None or d < best[0] - 1e-15 or (abs(d - best[0]) <= 1e-15 and (o, t) < best[1:]):
            best = (d, o, t)
    return best[1], best[2]


# -------------------------------------------------------------------- attacks


def linear_fgsm_corner_oracle(W: np.ndarray, b: np.ndarray, x: np.ndarray, eps: float, target: int) -> np.ndarray:
    """Best corner of the eps-box for a targeted linear-softmax loss, by enumerating sign patterns."""
    best, best_loss = None, np.inf
    for signs in itertools.product((-1.0, 1.0), repeat=x.size):
        cand = np.clip(x + eps * np.array(signs), 0, 1)
        z = cand @ W + b
        loss = -(z[target] - np.log(np.exp(z - z.max()).sum()) - z.max())
        if loss < best_loss - 1e-15:
            best, best_loss = cand, loss
    return best


def boundary_distance(W: np.ndarray, b: np.ndarray, x: np.ndarray, target: int) -> float:
    """L2 distance from ``x`` to the half-space where the target logit wins (two-class linear model)."""
    other = 1 - target
    w = W[:, target] - W[:, other]
    margin = x @ w + b[target] - b[other]
    return max(-margin, 0.0) / np.linalg.norm(w)
