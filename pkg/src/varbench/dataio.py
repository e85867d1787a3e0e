"""Interaction data, item images, k-core filtering, splits and the synthetic generator."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

# k-core presets used for the public fashion datasets
KCORE_PRESETS = {"amazon_men": 5, "amazon_women": 10, "tradesy": 10}

# published post-filter statistics: (users, items, interactions, density)
DATASET_STATISTICS = {
    "amazon_men": (24_379, 7_371, 89_020, 0.000495),
    "amazon_women": (16_668, 2_981, 54_473, 0.001096),
    "tradesy": (6_253, 1_670, 21_533, 0.002062),
}


class DataError(ValueError):
    pass


def density(n_interactions: int, n_users: int, n_items: int) -> float:
    return n_interactions / (n_users * n_items)


@dataclass(frozen=True)
class InteractionDataset:
    """Implicit feedback: one row per (user, item) pair with the interaction time.

    ``item_ids`` is the catalog; it may hold items nobody interacted with
    (the synthetic generator produces an image for every catalog item).
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray = field(default=None)  # type: ignore[assignment]
    item_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if not (users.shape == items.shape == ts.shape) or users.ndim != 1:
            raise DataError("users, items and timestamps must be 1-d arrays of equal length")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "timestamps", ts)
        uids = np.unique(users) if self.user_ids is None else np.unique(np.asarray(self.user_ids, dtype=np.int64))
        iids = np.unique(items) if self.item_ids is None else np.unique(np.asarray(self.item_ids, dtype=np.int64))
        if not np.isin(users, uids).all() or not np.isin(items, iids).all():
            raise DataError("interaction references an unknown user or item")
        if len(users):
            if len(np.unique(np.stack([users, items], axis=1), axis=0)) != len(users):
                raise DataError("duplicate (user, item) interaction")
        object.__setattr__(self, "user_ids", uids)
        object.__setattr__(self, "item_ids", iids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def density(self) -> float:
        if self.n_users == 0 or self.n_items == 0:
            return 0.0
        return density(len(self), self.n_users, self.n_items)

    def subset(self, mask: np.ndarray, keep_catalog: bool = False) -> InteractionDataset:
        return InteractionDataset(
            self.users[mask],
            self.items[mask],
            self.timestamps[mask],
            user_ids=None,
            item_ids=self.item_ids if keep_catalog else None,
        )

    def by_user(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.users, kind="stable")
        u_sorted = self.users[order]
        bounds = np.flatnonzero(np.diff(u_sorted)) + 1
        groups = np.split(self.items[order], bounds)
        keys = u_sorted[np.r_[0, bounds]] if len(u_sorted) else []
        return {int(k): g for k, g in zip(keys, groups)}


@dataclass(frozen=True)
class SplitDataset:
    train: InteractionDataset
    test: InteractionDataset


@dataclass
class ImageSample:
    item_id: int
    pixels: np.ndarray  # (C, H, W), values in [0, 1]
    label: int = -1

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise DataError(f"image {self.item_id}: expected (C, H, W) pixels, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(f"image {self.item_id}: pixels outside [0, 1]")


@dataclass
class ImageSet:
    """A batch of item images sharing one shape, indexed in parallel arrays."""

    item_ids: np.ndarray
    pixels: np.ndarray  # (N, C, H, W)
    labels: np.ndarray

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or len(self.pixels) != len(self.item_ids) or len(self.labels) != len(self.item_ids):
            raise DataError("ImageSet arrays are inconsistent")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError("pixels outside [0, 1]")

    def __len__(self) -> int:
        return len(self.item_ids)

    def __getitem__(self, idx: int) -> ImageSample:
        return ImageSample(int(self.item_ids[idx]), self.pixels[idx], int(self.labels[idx]))

    def select(self, item_ids) -> ImageSet:
        pos = {int(i): k for k, i in enumerate(self.item_ids)}
        idx = np.array([pos[int(i)] for i in item_ids], dtype=np.int64)
        return ImageSet(self.item_ids[idx], self.pixels[idx], self.labels[idx])

    def replace(self, item_ids, pixels) -> ImageSet:
        """Copy with the images of ``item_ids`` swapped for ``pixels``."""
        pos = {int(i): k for k, i in enumerate(self.item_ids)}
        out = self.pixels.copy()
        for iid, px in zip(item_ids, pixels):
            out[pos[int(iid)]] = px
        return ImageSet(self.item_ids.copy(), out, self.labels.copy())


# --------------------------------------------------------------------- loading


def load_interactions(path) -> InteractionDataset:
    """Read ``user_id,item_id,timestamp`` rows; duplicates keep the latest timestamp."""
    path = Path(path)
    latest: dict[tuple[int, int], int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if [h.strip() for h in header[:3]] != ["user_id", "item_id", "timestamp"]:
            raise DataError(f"{path}: header must be user_id,item_id,timestamp (got {header})")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                u, i, t = (int(c.strip()) for c in row)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field in {row}") from None
            key = (u, i)
            if key not in latest or t > latest[key]:
                latest[key] = t
    if not latest:
        raise DataError(f"{path}: no interactions")
    keys = sorted(latest)
    users = np.array([k[0] for k in keys], dtype=np.int64)
    items = np.array([k[1] for k in keys], dtype=np.int64)
    ts = np.array([latest[k] for k in keys], dtype=np.int64)
    return InteractionDataset(users, items, ts)


def save_interactions(path, ds: InteractionDataset) -> None:
    order = np.lexsort((ds.items, ds.users))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "timestamp"])
        for k in order:
            w.writerow([int(ds.users[k]), int(ds.items[k]), int(ds.timestamps[k])])


def kcore_filter(ds: InteractionDataset, k: int) -> InteractionDataset:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    mask = np.ones(len(ds), dtype=bool)
    while True:
        u, i = ds.users[mask], ds.items[mask]
        uvals, ucounts = np.unique(u, return_counts=True)
        ivals, icounts = np.unique(i, return_counts=True)
        bad_u = uvals[ucounts < k]
        bad_i = ivals[icounts < k]
        if len(bad_u) == 0 and len(bad_i) == 0:
            break
        drop = np.isin(ds.users, bad_u) | np.isin(ds.items, bad_i)
        mask &= ~drop
    if not mask.any():
        log.warning("k-core filter with k=%d removed every interaction", k)
    return ds.subset(mask)


def leave_one_out(ds: InteractionDataset) -> SplitDataset:
    """Hold out each user's latest interaction; ties go to the larger item id."""
    uvals, counts = np.unique(ds.users, return_counts=True)
    single = uvals[counts < 2]
    if len(single):
        raise DataError(f"user {int(single[0])} has a single interaction; leave-one-out needs at least 2")
    # sort by user, then timestamp, then item id; the last row per user is the test pick
    order = np.lexsort((ds.items, ds.timestamps, ds.users))
    users_sorted = ds.users[order]
    last = np.r_[users_sorted[1:] != users_sorted[:-1], True]
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[order[last]] = True
    train = InteractionDataset(
        ds.users[~test_mask], ds.items[~test_mask], ds.timestamps[~test_mask],
        user_ids=ds.user_ids, item_ids=ds.item_ids,
    )
    test = InteractionDataset(
        ds.users[test_mask], ds.items[test_mask], ds.timestamps[test_mask],
        user_ids=ds.user_ids, item_ids=ds.item_ids,
    )
    return SplitDataset(train, test)


# ------------------------------------------------------------------ images I/O


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid a PNG round trip would produce."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


def save_image(path, pixels: np.ndarray) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path, format="PNG")
    elif arr.shape[0] == 3:
        Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path, format="PNG")
    else:
        raise DataError(f"cannot write a PNG with {arr.shape[0]} channels")


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.transpose(arr[..., :3], (2, 0, 1))
    return arr.astype(np.float64) / 255.0


def save_images(directory, images: ImageSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for iid, px in zip(images.item_ids, images.pixels):
        save_image(directory / f"{int(iid)}.png", px)
    with open(directory / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "label"])
        for iid, lab in zip(images.item_ids, images.labels):
            w.writerow([int(iid), int(lab)])


def load_images(directory, item_ids=None) -> ImageSet:
    """Load ``<item_id>.png`` files; labels come from ``labels.csv`` when present (else -1)."""
    directory = Path(directory)
    if item_ids is None:
        item_ids = sorted(int(p.stem) for p in directory.glob("*.png") if p.stem.lstrip("-").isdigit())
    if not item_ids:
        raise DataError(f"{directory}: no <item_id>.png images found")
    labels_path = directory / "labels.csv"
    labels: dict[int, int] = {}
    if labels_path.exists():
        with open(labels_path, newline="") as fh:
            for row in csv.DictReader(fh):
                labels[int(row["item_id"])] = int(row["label"])
    pixels = np.stack([load_image(directory / f"{int(i)}.png") for i in item_ids])
    return ImageSet(np.array(item_ids), pixels, np.array([labels.get(int(i), -1) for i in item_ids]))


# ------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 3
    # an int, or one count per class
    images_per_class: int | tuple = 100
    image_size: int = 16
    num_users: int = 300
    interactions_per_user: int = 10
    class_preference_skew: float = 0.8
    seed: int = 0
    # pattern amplitude and pixel noise of the generated images
    contrast: float = 0.15
    noise: float = 0.03
    popular_class: int = 0
    # amplitude of a fine per-class checker texture, and the probability that
    # the coarse pattern is drawn from a different class than the label
    texture: float = 5.0 / 255.0
    cue_flip: float = 0.4
    # share of a user's interactions drawn from their favourite class
    loyalty: float = 0.0
    # explicit class popularity; overrides class_preference_skew when set
    class_weights: tuple | None = None

    def validate(self) -> None:
        for name in ("num_classes", "image_size", "num_users", "interactions_per_user"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if len(self.class_sizes) != self.num_classes:
            raise DataError(f"images_per_class lists {len(self.class_sizes)} sizes for {self.num_classes} classes")
        if min(self.class_sizes) <= 0:
            raise DataError("images_per_class must be positive")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.shape != (self.num_classes,) or (w < 0).any() or w.sum() <= 0:
                raise DataError("class_weights needs one non-negative weight per class")
        if not 0.0 <= self.loyalty <= 1.0:
            raise DataError("loyalty must lie in [0, 1]")
        if not 0.0 <= self.cue_flip < 1.0:
            raise DataError("cue_flip must lie in [0, 1)")
        if not 0.0 <= self.class_preference_skew <= 1.0:
            raise DataError("class_preference_skew must lie in [0, 1]")
        if not 0 <= self.popular_class < self.num_classes:
            raise DataError("popular_class out of range")
        if self.interactions_per_user > sum(self.class_sizes):
            raise DataError(
                f"infeasible: {self.interactions_per_user} interactions per user "
                f"but only {sum(self.class_sizes)} items"
            )

    @property
    def class_sizes(self) -> tuple:
        if isinstance(self.images_per_class, (int, np.integer)):
            return (int(self.images_per_class),) * self.num_classes
        return tuple(int(v) for v in self.images_per_class)


_PALETTE = np.array([
    [1.0, 0.25, 0.25],
    [0.25, 1.0, 0.25],
    [0.25, 0.25, 1.0],
    [1.0, 1.0, 0.25],
    [1.0, 0.25, 1.0],
    [0.25, 1.0, 1.0],
])


def _class_pattern(c: int, size: int, phase: tuple[int, int]) -> np.ndarray:
    """A +-1 geometric texture: stripes of a class-specific orientation and period."""
    yy, xx = np.mgrid[0:size, 0:size]
    py, px = phase
    kind = c % 4
    period = 4 + 2 * (c // 4)
    if kind == 0:
        coord = yy + py
    elif kind == 1:
        coord = xx + px
    elif kind == 2:
        coord = xx + yy + px
    else:
        return np.where(((yy + py) // (period // 2) + (xx + px) // (period // 2)) % 2 == 0, 1.0, -1.0)
    return np.where((coord % period) < period // 2, 1.0, -1.0)


def _texture_color(c: int) -> np.ndarray:
    # zero-mean colour direction, distinct per class
    angle = 2.0 * np.pi * c / 3.0 + (c // 3) * np.pi / 3.0
    return np.cos(angle + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0)


def synthesize_images(spec: SynthSpec, rng: np.random.Generator) -> ImageSet:
    """Images carry two class cues.

    The coarse cue is a high-contrast stripe pattern which, with probability
    ``cue_flip``, belongs to another class. The fine cue is a low-amplitude
    period-2 checker tinted along a class colour direction; it always
    matches the label.
    """
    sizes = spec.class_sizes
    n = sum(sizes)
    size = spec.image_size
    labels = np.repeat(np.arange(spec.num_classes), sizes)
    pixels = np.empty((n, 3, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for k, c in enumerate(labels):
        base = rng.uniform(0.35, 0.65, size=3)
        phase = tuple(int(v) for v in rng.integers(0, 8, size=2))
        shown = int(c)
        if spec.num_classes > 1 and rng.random() < spec.cue_flip:
            shown = int((c + rng.integers(1, spec.num_classes)) % spec.num_classes)
        color = _PALETTE[shown % len(_PALETTE)]
        pattern = _class_pattern(shown, size, phase)
        img = base[:, None, None] + spec.contrast * color[:, None, None] * pattern[None]
        if spec.texture:
            checker = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
            img += spec.texture * _texture_color(int(c))[:, None, None] * checker[None]
        img += rng.normal(0.0, spec.noise, size=img.shape)
        pixels[k] = img
    pixels = quantize(pixels)
    return ImageSet(np.arange(n), pixels, labels)


def class_mass(spec: SynthSpec) -> np.ndarray:
    if spec.class_weights is not None:
        w = np.asarray(spec.class_weights, dtype=np.float64)
        return w / w.sum()
    c = spec.num_classes
    mass = np.full(c, (1.0 - spec.class_preference_skew) / c)
    mass[spec.popular_class] += spec.class_preference_skew
    return mass


def synthesize_dataset(spec: SynthSpec) -> tuple[InteractionDataset, ImageSet]:
    """Desk-scale stand-in for a fashion catalog.

    Each item is one generated image whose class is its category. Every
    user gets a favourite class drawn from ``class_mass`` (skewed toward the
    popular class). Interactions are drawn class-first, from the favourite
    with probability ``loyalty`` and from ``class_mass`` otherwise, then
    uniformly within the class without repeats.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    images = synthesize_images(spec, rng)
    by_class = [np.flatnonzero(images.labels == c) for c in range(spec.num_classes)]
    mass = class_mass(spec)

    users, items, ts = [], [], []
    for u in range(spec.num_users):
        taken: set[int] = set()
        clock = int(rng.integers(0, 1000))
        fav = int(rng.choice(spec.num_classes, p=mass))
        user_mass = (1.0 - spec.loyalty) * mass
        user_mass[fav] += spec.loyalty
        while len(taken) < spec.interactions_per_user:
            avail = user_mass.copy()
            for c in range(spec.num_classes):
                if all(int(i) in taken for i in by_class[c]):
                    avail[c] = 0.0
            c = int(rng.choice(spec.num_classes, p=avail / avail.sum()))
            pool = [int(i) for i in by_class[c] if int(i) not in taken]
            item = pool[int(rng.integers(len(pool)))]
            taken.add(item)
            clock += int(rng.integers(1, 1000))
            users.append(u)
            items.append(item)
            ts.append(clock)
    ds = InteractionDataset(np.array(users), np.array(items), np.array(ts), item_ids=images.item_ids)
    return ds, images
