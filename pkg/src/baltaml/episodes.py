"""Imbalanced few-shot episode distributions and the pools they draw from.

A *pool* is a class-indexed source of instances. Generator pools hold class
parameters (one distribution per class) and draw fresh instances for every
episode; array pools hold finite instance sets loaded from disk.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "IN_DISTRIBUTION",
    "OUT_OF_DISTRIBUTION",
    "Episode",
    "EpisodeDistribution",
    "GeneratorPool",
    "ArrayPool",
    "PoolError",
    "InsufficientPoolError",
    "PoolFormatError",
    "sample_episode",
    "synth_task_family",
    "make_ood_pool",
    "load_pool",
    "write_csv_pool",
    "write_idx_pool",
    "split_pool",
    "pool_manifest",
    "episode_to_dict",
    "episode_from_dict",
    "distribution_to_dict",
]

IN_DISTRIBUTION = "in_distribution"
OUT_OF_DISTRIBUTION = "out_of_distribution"
CLASS_IMBALANCE = "class_imbalance"
TASK_IMBALANCE = "task_imbalance"


class PoolError(ValueError):
    pass


class InsufficientPoolError(PoolError):
    pass


class PoolFormatError(PoolError):
    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        self.line = line
        self.offset = offset
        where = f" (line {line})" if line is not None else f" (byte offset {offset})" if offset is not None else ""
        super().__init__(message + where)


@dataclass
class Episode:
    """One few-shot task. Support rows are grouped by class, labels 0..C-1."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    origin: str = IN_DISTRIBUTION
    regime: str = TASK_IMBALANCE
    class_ids: np.ndarray | None = None
    support_ids: np.ndarray | None = None
    query_ids: np.ndarray | None = None

    def __post_init__(self):
        self.support_x = np.asarray(self.support_x, dtype=np.float64)
        self.query_x = np.asarray(self.query_x, dtype=np.float64)
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        self.query_y = np.asarray(self.query_y, dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return int(max(self.support_y.max(), self.query_y.max())) + 1

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.support_y, minlength=self.n_classes)

    @property
    def n_support(self) -> int:
        return len(self.support_y)

    @property
    def n_query(self) -> int:
        return len(self.query_y)

    def support_class(self, c: int) -> np.ndarray:
        return self.support_x[self.support_y == c]

    def permuted(self, perm) -> "Episode":
        """Relabel classes: old class ``perm[j]`` becomes label ``j``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        s_order = np.concatenate([np.flatnonzero(self.support_y == p) for p in perm])
        q_order = np.concatenate([np.flatnonzero(self.query_y == p) for p in perm])
        return Episode(
            self.support_x[s_order],
            inv[self.support_y[s_order]],
            self.query_x[q_order],
            inv[self.query_y[q_order]],
            self.origin,
            self.regime,
            None if self.class_ids is None else self.class_ids[perm],
        )


@dataclass
class EpisodeDistribution:
    n_classes: int = 5
    shot_range: tuple[int, int] = (1, 50)
    class_imbalance_prob: float = 0.5
    queries_per_class: int = 15
    source: str = "gaussian_blobs"

    def __post_init__(self):
        self.shot_range = tuple(int(s) for s in self.shot_range)
        lo, hi = self.shot_range
        if lo < 1 or hi < lo:
            raise ValueError(f"shot_range must satisfy 1 <= min <= max, got {self.shot_range}")
        if not 0.0 <= self.class_imbalance_prob <= 1.0:
            raise ValueError("class_imbalance_prob must lie in [0, 1]")
        if self.n_classes < 2:
            raise ValueError("episodes need at least 2 classes")
        if self.queries_per_class < 1:
            raise ValueError("queries_per_class must be positive")


# ---------------------------------------------------------------------------
# pools


class GeneratorPool:
    """Classes defined by parametric distributions; instances drawn on demand.

    ``gaussian_blobs`` classes are ``mean + A @ n`` with ``n ~ N(0, I)``.
    ``ring_mixtures`` classes place points on a noisy circle of given radius in
    the plane of the first two features, with gaussian noise elsewhere.
    """

    def __init__(self, family: str, classes: list[dict], origin: str = IN_DISTRIBUTION):
        if family not in ("gaussian_blobs", "ring_mixtures"):
            raise PoolError(f"unknown family {family!r}")
        self.family = family
        self.classes = classes
        self.origin = origin

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return len(self.classes[0]["mean"])

    def capacity(self, c: int) -> float:
        return float("inf")

    def draw(self, c: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        p = self.classes[c]
        mean = np.asarray(p["mean"])
        noise = rng.standard_normal((n, len(mean)))
        if self.family == "gaussian_blobs":
            x = mean + noise @ np.asarray(p["transform"]).T
        else:
            angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
            x = mean + noise * p["width"]
            x[:, 0] += p["radius"] * np.cos(angle)
            x[:, 1] += p["radius"] * np.sin(angle)
            x = mean + (x - mean) @ np.asarray(p["rotation"]).T
        return x, np.arange(n)


class ArrayPool:
    """Finite pool: one array of feature rows per class."""

    def __init__(self, classes: list[np.ndarray], labels=None, origin: str = IN_DISTRIBUTION):
        self.classes = [np.asarray(c, dtype=np.float64) for c in classes]
        self.labels = list(range(len(classes))) if labels is None else [int(l) for l in labels]
        self.origin = origin

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.classes[0].shape[1]

    def capacity(self, c: int) -> float:
        return len(self.classes[c])

    def draw(self, c: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.choice(len(self.classes[c]), size=n, replace=False)
        return self.classes[c][idx], idx


# ---------------------------------------------------------------------------
# sampling


def sample_episode(
    dist: EpisodeDistribution,
    pool,
    rng: np.random.Generator,
    regime: str | None = None,
    shots=None,
) -> Episode:
    """Draw one episode.

    With probability ``class_imbalance_prob`` every class gets its own shot
    count from the inclusive integer range; otherwise one count is drawn and
    shared by all classes. ``regime`` forces one branch and ``shots`` fixes
    the counts outright (scalar or one per class).
    """
    C, Q = dist.n_classes, dist.queries_per_class
    if pool.n_classes < C:
        raise InsufficientPoolError(f"pool has {pool.n_classes} classes, episode needs {C}")
    lo, hi = dist.shot_range
    chosen = rng.choice(pool.n_classes, size=C, replace=False)
    u = rng.random()
    if regime is None:
        regime = CLASS_IMBALANCE if u < dist.class_imbalance_prob else TASK_IMBALANCE
    if shots is not None:
        counts = np.broadcast_to(np.asarray(shots, dtype=np.int64), (C,)).copy()
    elif regime == CLASS_IMBALANCE:
        counts = rng.integers(lo, hi + 1, size=C)
    elif regime == TASK_IMBALANCE:
        counts = np.full(C, rng.integers(lo, hi + 1))
    else:
        raise ValueError(f"unknown regime {regime!r}")

    sx, sy, qx, qy, sid, qid = [], [], [], [], [], []
    for label, c in enumerate(chosen):
        need = int(counts[label]) + Q
        cap = pool.capacity(c)
        if cap < need:
            name = pool.labels[c] if hasattr(pool, "labels") else c
            raise InsufficientPoolError(
                f"class {name} has {int(cap)} instances, episode needs {need} (short by {need - int(cap)})"
            )
        x, ids = pool.draw(c, need, rng)
        n = int(counts[label])
        sx.append(x[:n])
        qx.append(x[n:])
        sy.append(np.full(n, label))
        qy.append(np.full(Q, label))
        sid.append(np.stack([np.full(n, c), ids[:n]], axis=1))
        qid.append(np.stack([np.full(Q, c), ids[n:]], axis=1))
    return Episode(
        np.concatenate(sx),
        np.concatenate(sy),
        np.concatenate(qx),
        np.concatenate(qy),
        origin=pool.origin,
        regime=regime,
        class_ids=np.asarray(chosen),
        support_ids=np.concatenate(sid),
        query_ids=np.concatenate(qid),
    )


# ---------------------------------------------------------------------------
# synthetic families

DEFAULT_FAMILY = {
    "dim": 4,
    "spread": 3.0,
    "std_range": [0.3, 1.0],
    "radius_range": [0.5, 2.0],
    "n_classes": {"train": 64, "val": 16, "test": 20},
}


def _family_params(params: dict | None) -> dict:
    p = {**DEFAULT_FAMILY, **(params or {})}
    p["n_classes"] = {**DEFAULT_FAMILY["n_classes"], **p.get("n_classes", {})}
    if p["dim"] < 2:
        raise PoolError(f"family dimension must be >= 2, got {p['dim']}")
    lo, hi = p["std_range"]
    if not 0 < lo <= hi:
        raise PoolError(f"invalid std_range {p['std_range']}")
    if p["spread"] <= 0:
        raise PoolError("spread must be positive")
    return p


def _random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _draw_class(family: str, p: dict, rng: np.random.Generator) -> dict:
    d = p["dim"]
    mean = rng.normal(0.0, p["spread"], size=d)
    if family == "gaussian_blobs":
        std = rng.uniform(*p["std_range"], size=d)
        return {"mean": mean, "transform": np.diag(std)}
    return {
        "mean": mean,
        "radius": float(rng.uniform(*p["radius_range"])),
        "width": float(rng.uniform(*p["std_range"])) * 0.5,
        "rotation": _random_rotation(d, rng),
    }


def synth_task_family(family: str, params: dict | None, rng: np.random.Generator) -> dict[str, GeneratorPool]:
    """Meta-train/val/test pools with disjoint class-parameter draws."""
    if family not in ("gaussian_blobs", "ring_mixtures"):
        raise PoolError(f"unknown family {family!r}")
    p = _family_params(params)
    out = {}
    for split in ("train", "val", "test"):
        n = int(p["n_classes"][split])
        if n < 1:
            raise PoolError(f"split {split} needs at least one class")
        out[split] = GeneratorPool(family, [_draw_class(family, p, rng) for _ in range(n)])
    return out


def make_ood_pool(
    base_family_params: dict | None,
    shift: dict,
    rng: np.random.Generator,
    family: str = "gaussian_blobs",
    n_classes: int = 20,
) -> GeneratorPool:
    """Fresh classes from the base family, moved by a distribution shift.

    ``shift = {"kind": "scale" | "rotate" | "translate" | "family_swap", ...}``
    with ``factor`` for scale, ``offset`` (scalar or vector) for translate.
    ``family_swap`` draws ring-mixture classes recentred ``offset`` (default
    ``4 * spread``) away from the origin in every feature.
    """
    p = _family_params(base_family_params)
    kind = shift.get("kind", "scale")
    d = p["dim"]
    if kind == "family_swap":
        other = "ring_mixtures" if family == "gaussian_blobs" else "gaussian_blobs"
        offset = np.broadcast_to(np.asarray(shift.get("offset", 4.0 * p["spread"]), float), (d,))
        classes = []
        for _ in range(n_classes):
            c = _draw_class(other, p, rng)
            c["mean"] = c["mean"] + offset
            classes.append(c)
        return GeneratorPool(other, classes, origin=OUT_OF_DISTRIBUTION)

    classes = [_draw_class(family, p, rng) for _ in range(n_classes)]
    if kind == "scale":
        factor = float(shift.get("factor", 2.0))
        if factor <= 0:
            raise PoolError("scale factor must be positive")
        for c in classes:
            c["mean"] = c["mean"] * factor
            if family == "gaussian_blobs":
                c["transform"] = c["transform"] * factor
            else:
                c["radius"] *= factor
                c["width"] *= factor
    elif kind == "rotate":
        R = np.asarray(shift["rotation"]) if "rotation" in shift else _random_rotation(d, rng)
        for c in classes:
            c["mean"] = R @ c["mean"]
            if family == "gaussian_blobs":
                c["transform"] = R @ c["transform"]
            else:
                c["rotation"] = R @ c["rotation"]
    elif kind == "translate":
        offset = np.broadcast_to(np.asarray(shift.get("offset", 0.0), float), (d,))
        for c in classes:
            c["mean"] = c["mean"] + offset
    else:
        raise PoolError(f"unknown shift kind {kind!r}")
    return GeneratorPool(family, classes, origin=OUT_OF_DISTRIBUTION)


# ---------------------------------------------------------------------------
# disk pools

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MIN_CLASS_SIZE = 16


def _group(labels: np.ndarray, features: np.ndarray, origin: str) -> ArrayPool:
    uniq = np.unique(labels)
    classes = [features[labels == u] for u in uniq]
    for u, c in zip(uniq, classes):
        if len(c) < MIN_CLASS_SIZE:
            warnings.warn(f"class {u} has only {len(c)} instances", stacklevel=3)
    return ArrayPool(classes, uniq, origin)


def _load_csv(path: Path, origin: str) -> ArrayPool:
    labels, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise PoolFormatError("missing or short header row", line=1)
        width = len(header) - 1
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width + 1:
                raise PoolFormatError(f"expected {width + 1} fields, got {len(rec)}", line=lineno)
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise PoolFormatError(str(exc), line=lineno) from None
    if not rows:
        raise PoolFormatError("no data rows", line=2)
    return _group(np.asarray(labels), np.asarray(rows, dtype=np.float64), origin)


def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise PoolFormatError("file shorter than IDX header", offset=0)
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise PoolFormatError(f"IDX magic 0x{got:08x} != expected 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise PoolFormatError("truncated IDX dimension header", offset=4)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header != n:
        raise PoolFormatError(f"expected {n} data bytes, found {len(raw) - header}", offset=header)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_pool(path, fmt: str, labels_path=None, origin: str = IN_DISTRIBUTION) -> ArrayPool:
    """Read a class-indexed pool from ``csv_labeled`` or ``idx_images`` files.

    For IDX, ``path`` is the image file and ``labels_path`` the label file
    (defaults to ``path`` with ``images`` replaced by ``labels``). Pixels are
    scaled to [0, 1] and flattened.
    """
    path = Path(path)
    if fmt == "csv_labeled":
        return _load_csv(path, origin)
    if fmt == "idx_images":
        if labels_path is None:
            labels_path = path.with_name(path.name.replace("images", "labels"))
        images = _read_idx(path, IDX_IMAGES_MAGIC)
        labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
        if len(labels) != len(images):
            raise PoolFormatError(f"{len(images)} images but {len(labels)} labels", offset=4)
        feats = images.reshape(len(images), -1).astype(np.float64) / 255.0
        return _group(labels.astype(np.int64), feats, origin)
    raise PoolFormatError(f"unknown pool format {fmt!r}")


def write_csv_pool(pool: ArrayPool, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(pool.dim)])
        for label, rows in zip(pool.labels, pool.classes):
            for r in rows:
                w.writerow([label] + [repr(float(v)) for v in r])


def write_idx_pool(pool: ArrayPool, images_path, labels_path, image_shape: tuple[int, int]) -> None:
    """Quantize features in [0, 1] to bytes and write IDX image/label files."""
    feats = np.concatenate(pool.classes)
    labels = np.concatenate([np.full(len(c), l) for l, c in zip(pool.labels, pool.classes)])
    if feats.min() < 0 or feats.max() > 1:
        raise PoolError("IDX export needs features in [0, 1]")
    pix = np.rint(feats * 255.0).astype(np.uint8).reshape((len(feats),) + tuple(image_shape))
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *pix.shape))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def split_pool(pool: ArrayPool, fractions=(0.6, 0.2, 0.2), rng=None, standardize: bool = True):
    """Split classes into train/val/test and standardize with train stats only.

    Returns ``(splits, normalization)``.
    """
    rng = rng or np.random.default_rng(0)
    order = rng.permutation(pool.n_classes)
    n_tr = int(round(fractions[0] * len(order)))
    n_va = int(round(fractions[1] * len(order)))
    parts = {"train": order[:n_tr], "val": order[n_tr : n_tr + n_va], "test": order[n_tr + n_va :]}
    train_rows = np.concatenate([pool.classes[i] for i in parts["train"]])
    mean = train_rows.mean(axis=0) if standardize else np.zeros(pool.dim)
    std = train_rows.std(axis=0) if standardize else np.ones(pool.dim)
    std = np.where(std > 0, std, 1.0)
    splits = {
        k: ArrayPool([(pool.classes[i] - mean) / std for i in v], [pool.labels[i] for i in v], pool.origin)
        for k, v in parts.items()
    }
    return splits, {"mean": mean.tolist(), "std": std.tolist()}


MANIFEST_VERSION = 1


def pool_manifest(splits: dict, normalization: dict | None = None) -> dict:
    """JSON-ready description of a split pool."""
    dim = next(iter(splits.values())).dim
    counts = {}
    for pool in splits.values():
        labels = getattr(pool, "labels", range(pool.n_classes))
        for l, c in zip(labels, range(pool.n_classes)):
            cap = pool.capacity(c)
            counts[str(l)] = None if cap == float("inf") else int(cap)
    norm = normalization or {"mean": [0.0] * dim, "std": [1.0] * dim}
    return {
        "format_version": MANIFEST_VERSION,
        "splits": {k: [int(l) for l in getattr(p, "labels", range(p.n_classes))] for k, p in splits.items()},
        "class_counts": counts,
        "normalization": {"mean": list(norm["mean"]), "std": list(norm["std"])},
    }


def episode_to_dict(ep: Episode) -> dict:
    return {
        "origin": ep.origin,
        "regime": ep.regime,
        "counts": ep.counts.tolist(),
        "class_ids": None if ep.class_ids is None else ep.class_ids.tolist(),
        "support": {"x": ep.support_x.tolist(), "y": ep.support_y.tolist()},
        "query": {"x": ep.query_x.tolist(), "y": ep.query_y.tolist()},
    }


def episode_from_dict(d: dict) -> Episode:
    return Episode(
        np.asarray(d["support"]["x"]),
        np.asarray(d["support"]["y"]),
        np.asarray(d["query"]["x"]),
        np.asarray(d["query"]["y"]),
        origin=d["origin"],
        regime=d.get("regime", TASK_IMBALANCE),
        class_ids=None if d.get("class_ids") is None else np.asarray(d["class_ids"]),
    )


def distribution_to_dict(dist: EpisodeDistribution) -> dict:
    d = asdict(dist)
    d["shot_range"] = list(dist.shot_range)
    return d
