"""Visual recommenders trained with BPR: FM, VBPR and AMR.

Scores are linear in the item feature vector phi_i, so the BPR gradients
are written out in closed form; see ``tests/test_recsys.py`` for the
finite-difference checks.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import InteractionDataset, SplitDataset

log = logging.getLogger(__name__)


class FeatureStore:
    """Item id -> gamma-dimensional feature vector."""

    MAGIC = b"VBFS"
    VERSION = 1

    def __init__(self, item_ids, vectors):
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.item_ids):
            raise ValueError("FeatureStore needs one row per item")
        if len(np.unique(self.item_ids)) != len(self.item_ids):
            raise ValueError("FeatureStore item ids must be unique")
        self._pos = {int(i): k for k, i in enumerate(self.item_ids)}

    @property
    def gamma(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._pos

    def __getitem__(self, item_id) -> np.ndarray:
        return self.vectors[self._pos[int(item_id)]]

    def matrix(self, item_ids) -> np.ndarray:
        try:
            return self.vectors[[self._pos[int(i)] for i in item_ids]]
        except KeyError as exc:
            raise KeyError(f"feature store has no vector for item {exc.args[0]}") from None

    def replace(self, item_ids, vectors) -> FeatureStore:
        out = self.vectors.copy()
        for iid, v in zip(item_ids, np.asarray(vectors)):
            if len(v) != self.gamma:
                raise ValueError(f"replacement vector has length {len(v)}, store gamma is {self.gamma}")
            out[self._pos[int(iid)]] = v
        return FeatureStore(self.item_ids.copy(), out)

    def save(self, path) -> None:
        """header: magic(4s) version(u32) gamma(u32) count(u64); per item: id(i64) + gamma f64."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIIQ", self.MAGIC, self.VERSION, self.gamma, len(self)))
            for iid, vec in zip(self.item_ids, self.vectors):
                fh.write(struct.pack("<q", int(iid)))
                fh.write(np.asarray(vec, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> FeatureStore:
        blob = Path(path).read_bytes()
        magic, version, gamma, count = struct.unpack_from("<4sIIQ", blob, 0)
        if magic != cls.MAGIC:
            raise ValueError(f"{path}: not a feature store (magic {magic!r})")
        if version != cls.VERSION:
            raise ValueError(f"{path}: unsupported feature store version {version}")
        off = struct.calcsize("<4sIIQ")
        rec = np.dtype([("id", "<i8"), ("vec", "<f8", (gamma,))])
        arr = np.frombuffer(blob, dtype=rec, count=count, offset=off)
        return cls(arr["id"].astype(np.int64), arr["vec"].astype(np.float64).reshape(count, gamma))


# ------------------------------------------------------------------- models


@dataclass
class RecConfig:
    epochs: int = 100
    lr: float = 0.05
    reg: float = 1e-4
    h: int = 16
    upsilon: int = 16
    batch_size: int = 32
    eps_adv: float = 0.5
    lambda_adv: float = 1.0
    init_std: float = 0.1
    optimizer: str = "sgd"  # sgd on the batch-summed loss, or adam on the batch-mean loss
    seed: int = 0


class _Indexed:
    """Maps raw user/item ids onto dense rows."""

    def _index(self, user_ids, item_ids) -> None:
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self._u = {int(u): k for k, u in enumerate(self.user_ids)}
        self._i = {int(i): k for k, i in enumerate(self.item_ids)}

    def urow(self, users) -> np.ndarray:
        return np.array([self._u[int(u)] for u in np.atleast_1d(users)], dtype=np.int64)

    def irow(self, items) -> np.ndarray:
        return np.array([self._i[int(i)] for i in np.atleast_1d(items)], dtype=np.int64)


class VBPRModel(_Indexed):
    """s_ui = p_u.q_i + theta_u.(E phi_i) + beta_ui,
    beta_ui = offset + b_u + b_i + beta_vis.phi_i."""

    kind = "vbpr"

    def __init__(self, user_ids, item_ids, gamma: int, h: int, upsilon: int, rng: np.random.Generator | None = None, std: float = 0.1):
        self._index(user_ids, item_ids)
        nu, ni = len(self.user_ids), len(self.item_ids)
        if rng is None:
            self.P, self.Q = np.zeros((nu, h)), np.zeros((ni, h))
            self.Theta, self.E = np.zeros((nu, upsilon)), np.zeros((upsilon, gamma))
        else:
            self.P = rng.normal(0.0, std, (nu, h))
            self.Q = rng.normal(0.0, std, (ni, h))
            self.Theta = rng.normal(0.0, std, (nu, upsilon))
            self.E = rng.normal(0.0, std / np.sqrt(gamma), (upsilon, gamma))
        self.offset = np.zeros(1)
        self.user_bias = np.zeros(nu)
        self.item_bias = np.zeros(ni)
        self.visual_bias = np.zeros(gamma)

    @property
    def gamma(self) -> int:
        return self.E.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.P, self.Q, self.Theta, self.E, self.offset, self.user_bias, self.item_bias, self.visual_bias]

    def terms(self, u: np.ndarray, i: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The three summands (latent, visual, bias) for row indices ``u``, ``i``."""
        latent = (self.P[u] * self.Q[i]).sum(-1)
        visual = (self.Theta[u] * (phi @ self.E.T)).sum(-1)
        bias = self.offset[0] + self.user_bias[u] + self.item_bias[i] + phi @ self.visual_bias
        return latent, visual, bias

    def score_rows(self, u, i, phi) -> np.ndarray:
        latent, visual, bias = self.terms(u, i, phi)
        return latent + visual + bias

    def score_all(self, u: int, phi_all: np.ndarray) -> np.ndarray:
        """Scores of user row ``u`` against every catalog item (``phi_all`` in item-row order)."""
        return (
            self.Q @ self.P[u]
            + phi_all @ (self.E.T @ self.Theta[u])
            + self.offset[0] + self.user_bias[u] + self.item_bias + phi_all @ self.visual_bias
        )

    def feature_direction(self, u: np.ndarray) -> np.ndarray:
        """d s_ui / d phi_i for each user row in ``u``."""
        return self.Theta[u] @ self.E + self.visual_bias

    def bpr_grads(self, u, i, j, phi_i, phi_j, weight: float | np.ndarray = 1.0):
        """Gradients of mean_k weight * -ln sigma(s_ui - s_uj) over the batch."""
        x = self.score_rows(u, i, phi_i) - self.score_rows(u, j, phi_j)
        n = len(u)
        coef = -_sigmoid(-x) * weight / n  # dL/dx per triple
        dphi = phi_i - phi_j
        gP = np.zeros_like(self.P)
        gQ = np.zeros_like(self.Q)
        gTheta = np.zeros_like(self.Theta)
        gub = np.zeros_like(self.user_bias)
        gib = np.zeros_like(self.item_bias)
        np.add.at(gP, u, coef[:, None] * (self.Q[i] - self.Q[j]))
        np.add.at(gQ, i, coef[:, None] * self.P[u])
        np.add.at(gQ, j, -coef[:, None] * self.P[u])
        np.add.at(gTheta, u, coef[:, None] * (dphi @ self.E.T))
        gE = (coef[:, None] * self.Theta[u]).T @ dphi
        np.add.at(gib, i, coef)
        np.add.at(gib, j, -coef)
        gvb = coef @ dphi
        return [gP, gQ, gTheta, gE, np.zeros(1), gub, gib, gvb], x


class FMModel(_Indexed):
    """BPR factorisation machine over user ids, item ids and item features.

    Item embedding = q_i + W phi_i and item bias = b_i + w.phi_i, so
    s_ui = p_u.(q_i + W phi_i) + b_u + b_i + w.phi_i.
    """

    kind = "fm"

    def __init__(self, user_ids, item_ids, gamma: int, h: int, rng: np.random.Generator | None = None, std: float = 0.1):
        self._index(user_ids, item_ids)
        nu, ni = len(self.user_ids), len(self.item_ids)
        if rng is None:
            self.P, self.Q, self.W = np.zeros((nu, h)), np.zeros((ni, h)), np.zeros((h, gamma))
        else:
            self.P = rng.normal(0.0, std, (nu, h))
            self.Q = rng.normal(0.0, std, (ni, h))
            self.W = rng.normal(0.0, std / np.sqrt(gamma), (h, gamma))
        self.user_bias = np.zeros(nu)
        self.item_bias = np.zeros(ni)
        self.feature_bias = np.zeros(gamma)

    @property
    def gamma(self) -> int:
        return self.W.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.P, self.Q, self.W, self.user_bias, self.item_bias, self.feature_bias]

    def score_rows(self, u, i, phi) -> np.ndarray:
        emb = self.Q[i] + phi @ self.W.T
        return (self.P[u] * emb).sum(-1) + self.user_bias[u] + self.item_bias[i] + phi @ self.feature_bias

    def score_all(self, u: int, phi_all: np.ndarray) -> np.ndarray:
        emb = self.Q + phi_all @ self.W.T
        return emb @ self.P[u] + self.user_bias[u] + self.item_bias + phi_all @ self.feature_bias

    def feature_direction(self, u: np.ndarray) -> np.ndarray:
        return self.P[u] @ self.W + self.feature_bias

    def bpr_grads(self, u, i, j, phi_i, phi_j, weight: float | np.ndarray = 1.0):
        x = self.score_rows(u, i, phi_i) - self.score_rows(u, j, phi_j)
        n = len(u)
        coef = -_sigmoid(-x) * weight / n
        emb_i = self.Q[i] + phi_i @ self.W.T
        emb_j = self.Q[j] + phi_j @ self.W.T
        dphi = phi_i - phi_j
        gP = np.zeros_like(self.P)
        gQ = np.zeros_like(self.Q)
        gub = np.zeros_like(self.user_bias)
        gib = np.zeros_like(self.item_bias)
        np.add.at(gP, u, coef[:, None] * (emb_i - emb_j))
        np.add.at(gQ, i, coef[:, None] * self.P[u])
        np.add.at(gQ, j, -coef[:, None] * self.P[u])
        gW = (coef[:, None] * self.P[u]).T @ dphi
        np.add.at(gib, i, coef)
        np.add.at(gib, j, -coef)
        gfb = coef @ dphi
        return [gP, gQ, gW, gub, gib, gfb], x


class AMRModel(VBPRModel):
    """VBPR scoring trained with adversarial regularisation on item features."""

    kind = "amr"

    def __init__(self, *args, eps_adv: float = 0.5, lambda_adv: float = 1.0, **kwargs):
        super().__init__(*args, **kwargs)
        self.eps_adv = eps_adv
        self.lambda_adv = lambda_adv


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return T._stable_sigmoid(np.asarray(z, dtype=np.float64))


def bpr_loss(x: np.ndarray) -> np.ndarray:
    """Per-triple -ln sigma(x); equals ln 2 at x = 0."""
    return np.logaddexp(0.0, -x)


def score_vbpr(model: VBPRModel, u, i, phi_i) -> float:
    phi_i = np.asarray(phi_i, dtype=np.float64)
    if phi_i.shape != (model.gamma,):
        raise ValueError(f"phi_i has shape {phi_i.shape}, model expects ({model.gamma},)")
    return float(model.score_rows(model.urow(u), model.irow(i), phi_i[None])[0])


def feature_perturbation(grad: np.ndarray, eps: float) -> np.ndarray:
    """eps * g / ||g||_2 row-wise; zero rows stay zero."""
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, eps * grad / safe, 0.0)


# ------------------------------------------------------------------ training


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    skipped_users: list[int] = field(default_factory=list)


class _Sampler:
    """Uniform negative sampling over items a user has not interacted with in train."""

    def __init__(self, model, train: InteractionDataset):
        self.u = model.urow(train.users)
        self.i = model.irow(train.items)
        n_items = len(model.item_ids)
        self.seen = np.zeros((len(model.user_ids), n_items), dtype=bool)
        self.seen[self.u, self.i] = True
        full = self.seen.all(axis=1)
        self.skipped = [int(model.user_ids[r]) for r in np.flatnonzero(full & self.seen.any(axis=1))]
        if self.skipped:
            log.warning("skipping %d users with no negative items", len(self.skipped))
            keep = ~full[self.u]
            self.u, self.i = self.u[keep], self.i[keep]
        self.n_items = n_items

    def negatives(self, u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        j = rng.integers(0, self.n_items, size=len(u))
        bad = self.seen[u, j]
        while bad.any():
            j[bad] = rng.integers(0, self.n_items, size=int(bad.sum()))
            bad = self.seen[u, j]
        return j


def _catalog_phi(model, store: FeatureStore) -> np.ndarray:
    missing = [int(i) for i in model.item_ids if int(i) not in store]
    if missing:
        raise KeyError(f"feature store lacks items {missing[:5]}")
    return store.matrix(model.item_ids)


def _fit(model, split: SplitDataset, store: FeatureStore, cfg: RecConfig, adversarial: bool = False) -> TrainTrace:
    if len(split.train) == 0:
        raise ValueError("empty training split")
    phi_all = _catalog_phi(model, store)
    rng = np.random.default_rng(cfg.seed)
    sampler = _Sampler(model, split.train)
    params = model.params()
    if cfg.optimizer == "adam":
        opt = T.Adam(cfg.lr)
    elif cfg.optimizer == "sgd":
        opt = T.SGD(cfg.lr)
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    trace = TrainTrace(skipped_users=sampler.skipped)
    n = len(sampler.u)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            u, i = sampler.u[idx], sampler.i[idx]
            j = sampler.negatives(u, rng)
            phi_i, phi_j = phi_all[i], phi_all[j]
            grads, x = model.bpr_grads(u, i, j, phi_i, phi_j)
            loss = bpr_loss(x).mean()
            if adversarial:
                adv_grads, adv_x = _adversarial_term(model, u, i, j, phi_i, phi_j, x)
                grads = [g + ga for g, ga in zip(grads, adv_grads)]
                loss = loss + model.lambda_adv * bpr_loss(adv_x).mean()
            for g, p in zip(grads, params):
                g += cfg.reg * p
                if cfg.optimizer == "sgd":
                    g *= len(idx)
            opt.step(params, grads)
            total += float(loss) * len(idx)
        trace.losses.append(total / n)
    return trace


def _adversarial_term(model: AMRModel, u, i, j, phi_i, phi_j, x):
    """Gradient of lambda * BPR on features pushed along their own loss gradient.

    The perturbation of each item is eps * g / ||g|| where g sums the batch's
    BPR-loss gradient w.r.t. that item's feature vector.
    """
    coef = -_sigmoid(-x) / len(u)
    direction = model.feature_direction(u)
    n_items = len(model.item_ids)
    g = np.zeros((n_items, model.gamma))
    np.add.at(g, i, coef[:, None] * direction)
    np.add.at(g, j, -coef[:, None] * direction)
    delta = feature_perturbation(g, model.eps_adv)
    return model.bpr_grads(u, i, j, phi_i + delta[i], phi_j + delta[j], weight=model.lambda_adv)


def make_model(kind: str, split: SplitDataset, store: FeatureStore, cfg: RecConfig):
    rng = np.random.default_rng([cfg.seed, 1])
    users = split.train.user_ids
    items = split.train.item_ids
    if kind == "fm":
        return FMModel(users, items, store.gamma, cfg.h, rng, cfg.init_std)
    if kind == "vbpr":
        return VBPRModel(users, items, store.gamma, cfg.h, cfg.upsilon, rng, cfg.init_std)
    if kind == "amr":
        return AMRModel(users, items, store.gamma, cfg.h, cfg.upsilon, rng, cfg.init_std,
                        eps_adv=cfg.eps_adv, lambda_adv=cfg.lambda_adv)
    raise ValueError(f"unknown recommender {kind!r}")


def train_bpr(kind: str, split: SplitDataset, store: FeatureStore, cfg: RecConfig):
    """Train FM or VBPR with BPR on (user, positive, sampled negative) triples."""
    if kind not in ("fm", "vbpr"):
        raise ValueError("train_bpr handles fm and vbpr; use train_amr for amr")
    model = make_model(kind, split, store, cfg)
    model.trace = _fit(model, split, store, cfg)
    return model


def train_amr(split: SplitDataset, store: FeatureStore, cfg: RecConfig) -> AMRModel:
    model = make_model("amr", split, store, cfg)
    model.trace = _fit(model, split, store, cfg, adversarial=True)
    return model


def train_recommender(kind: str, split: SplitDataset, store: FeatureStore, cfg: RecConfig):
    return train_amr(split, store, cfg) if kind == "amr" else train_bpr(kind, split, store, cfg)


# ------------------------------------------------------------------ ranking


@dataclass
class RankingList:
    user_id: int
    items: np.ndarray
    scores: np.ndarray
    truncated: bool = False  # fewer than K candidates were available

    def __len__(self) -> int:
        return len(self.items)


def _top_k(scores: np.ndarray, item_ids: np.ndarray, k: int) -> np.ndarray:
    # descending score, ascending item id on ties
    return np.lexsort((item_ids, -scores))[:k]


def recommend_topk(model, store: FeatureStore, split: SplitDataset, u: int, K: int) -> RankingList:
    return recommend_all(model, store, split, K, users=[u])[int(u)]


def recommend_all(model, store: FeatureStore, split: SplitDataset, K: int, users=None) -> dict[int, RankingList]:
    if K < 1:
        raise ValueError("K must be >= 1")
    phi_all = _catalog_phi(model, store)
    seen = split.train.by_user()
    users = model.user_ids if users is None else users
    out: dict[int, RankingList] = {}
    for uid in users:
        u = model.urow(uid)[0]
        scores = model.score_all(u, phi_all)
        mask = np.ones(len(model.item_ids), dtype=bool)
        if int(uid) in seen:
            mask[model.irow(seen[int(uid)])] = False
        cand_ids = model.item_ids[mask]
        cand_scores = scores[mask]
        top = _top_k(cand_scores, cand_ids, K)
        out[int(uid)] = RankingList(int(uid), cand_ids[top], cand_scores[top], truncated=len(cand_ids) < K)
    return out


def pairwise_auc(model, store: FeatureStore, split: SplitDataset) -> float:
    """Mean over test users of P(score(test item) > score(unseen item))."""
    phi_all = _catalog_phi(model, store)
    seen = split.train.by_user()
    aucs = []
    for uid, test_item in zip(split.test.users, split.test.items):
        u = model.urow(uid)[0]
        scores = model.score_all(u, phi_all)
        mask = np.ones(len(model.item_ids), dtype=bool)
        if int(uid) in seen:
            mask[model.irow(seen[int(uid)])] = False
        t = model.irow(test_item)[0]
        mask[t] = False
        others = scores[mask]
        if len(others) == 0:
            continue
        aucs.append(((scores[t] > others).sum() + 0.5 * (scores[t] == others).sum()) / len(others))
    return float(np.mean(aucs))


def feature_attack_loss(model, split: SplitDataset, store: FeatureStore, eps: float, seed: int = 0, n_triples: int | None = None) -> tuple[float, float]:
    """Mean BPR loss on fixed triples, clean and with FGSM-style L2 feature perturbations.

    Each item's feature vector moves by ``eps`` along the normalised gradient
    of the total loss, the same perturbation family AMR trains against.
    """
    rng = np.random.default_rng(seed)
    phi_all = _catalog_phi(model, store)
    sampler = _Sampler(model, split.train)
    u, i = sampler.u, sampler.i
    if n_triples is not None and n_triples < len(u):
        pick = rng.choice(len(u), n_triples, replace=False)
        u, i = u[pick], i[pick]
    j = sampler.negatives(u, rng)
    x = model.score_rows(u, i, phi_all[i]) - model.score_rows(u, j, phi_all[j])
    coef = -_sigmoid(-x)
    direction = model.feature_direction(u)
    g = np.zeros_like(phi_all)
    np.add.at(g, i, coef[:, None] * direction)
    np.add.at(g, j, -coef[:, None] * direction)
    delta = feature_perturbation(g, eps)
    x_adv = model.score_rows(u, i, phi_all[i] + delta[i]) - model.score_rows(u, j, phi_all[j] + delta[j])
    return float(bpr_loss(x).mean()), float(bpr_loss(x_adv).mean())


def write_rankings(path, lists: dict[int, RankingList]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "rank", "item_id", "score"])
        for uid in sorted(lists):
            rl = lists[uid]
            for r, (iid, s) in enumerate(zip(rl.items, rl.scores), start=1):
                w.writerow([uid, r, int(iid), repr(float(s))])


def read_rankings(path) -> dict[int, RankingList]:
    rows: dict[int, list[tuple[int, int, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["user_id"]), []).append((int(row["rank"]), int(row["item_id"]), float(row["score"])))
    out = {}
    for uid, entries in rows.items():
        entries.sort()
        out[uid] = RankingList(uid, np.array([e[1] for e in entries], dtype=np.int64), np.array([e[2] for e in entries]))
    return out
