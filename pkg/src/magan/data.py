"""Domain datasets: synthetic generators, IDX digit images and CSV tables."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, ParseError

CLASS_COLUMN = "__class"
PAIR_COLUMN = "__pair_id"
RESERVED_COLUMNS = (CLASS_COLUMN, PAIR_COLUMN)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class DomainDataset:
    """One domain's samples: an ``n x d`` matrix plus per-row metadata.

    ``pair_ids`` link rows across domains. They are ground truth for
    evaluation and never reach training unless a row is named as a labeled
    pair in the config.
    """

    matrix: np.ndarray
    feature_names: list[str]
    class_labels: Optional[np.ndarray] = None
    pair_ids: Optional[list[str]] = None

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DimensionError(f"matrix must be 2-D, got shape {self.matrix.shape}")
        self.feature_names = [str(n) for n in self.feature_names]
        n, d = self.matrix.shape
        if len(self.feature_names) != d:
            raise DimensionError(f"{len(self.feature_names)} feature names for {d} columns")
        if len(set(self.feature_names)) != d:
            dup = sorted({x for x in self.feature_names if self.feature_names.count(x) > 1})
            raise FormatError(f"duplicate feature names: {dup}")
        if self.class_labels is not None:
            self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
            if self.class_labels.shape != (n,):
                raise DimensionError(f"{len(self.class_labels)} class labels for {n} rows")
        if self.pair_ids is not None:
            self.pair_ids = [str(p) for p in self.pair_ids]
            if len(self.pair_ids) != n:
                raise DimensionError(f"{len(self.pair_ids)} pair ids for {n} rows")
            if len(set(self.pair_ids)) != n:
                raise FormatError("pair ids must be unique within a dataset")

    @classmethod
    def from_array(cls, matrix, feature_names=None, **kwargs) -> "DomainDataset":
        matrix = np.asarray(matrix, dtype=np.float64)
        if feature_names is None:
            feature_names = [f"f{i}" for i in range(matrix.shape[1])]
        return cls(matrix, list(feature_names), **kwargs)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_features(self) -> int:
        return self.matrix.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.matrix[:, self.feature_index(name)]

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"unknown feature {name!r}; available: {self.feature_names}") from None

    def subset(self, rows) -> "DomainDataset":
        rows = np.asarray(rows, dtype=np.intp)
        return DomainDataset(
            self.matrix[rows],
            list(self.feature_names),
            None if self.class_labels is None else self.class_labels[rows],
            None if self.pair_ids is None else [self.pair_ids[i] for i in rows],
        )

    def with_matrix(self, matrix, feature_names=None) -> "DomainDataset":
        return replace(
            self,
            matrix=np.asarray(matrix, dtype=np.float64),
            feature_names=list(feature_names if feature_names is not None else self.feature_names),
        )


# ---------------------------------------------------------------------------
# Gaussian clusters


@dataclass
class GaussianSpec:
    """Cluster means (``k x dim`` per domain), isotropic stds and cluster size."""

    means1: np.ndarray
    means2: np.ndarray
    std1: Sequence[float] | float = 0.5
    std2: Sequence[float] | float = 0.5
    points_per_cluster: int = 500

    def __post_init__(self):
        self.means1 = np.atleast_2d(np.asarray(self.means1, dtype=np.float64))
        self.means2 = np.atleast_2d(np.asarray(self.means2, dtype=np.float64))
        if self.means1.shape[0] != self.means2.shape[0]:
            raise ConfigError(
                f"domains need the same number of clusters: {self.means1.shape[0]} vs {self.means2.shape[0]}"
            )

    @property
    def n_clusters(self) -> int:
        return self.means1.shape[0]


def default_gaussian_spec(points_per_cluster: int = 500) -> GaussianSpec:
    """Three 2-D clusters per domain on a line, domain 2 shifted up by 2."""
    return GaussianSpec(
        means1=[[0.0, 0.0], [4.0, 0.0], [8.0, 0.0]],
        means2=[[0.0, 2.0], [4.0, 2.0], [8.0, 2.0]],
        std1=0.5,
        std2=0.5,
        points_per_cluster=points_per_cluster,
    )


def _sample_clusters(means, std, count, rng) -> tuple[np.ndarray, np.ndarray]:
    k, dim = means.shape
    stds = np.broadcast_to(np.asarray(std, dtype=np.float64), (k,))
    if np.any(stds < 0) or not np.all(np.isfinite(stds)):
        raise ConfigError(f"cluster std must be non-negative, got {list(stds)}")
    parts = [means[i] + stds[i] * rng.standard_normal((count, dim)) for i in range(k)]
    labels = np.repeat(np.arange(k), count)
    return np.concatenate(parts), labels


def gen_gaussian_domains(
    spec: GaussianSpec | None = None, seed: int = 0
) -> tuple[DomainDataset, DomainDataset]:
    spec = spec or default_gaussian_spec()
    if spec.points_per_cluster <= 0:
        raise ConfigError(f"points_per_cluster must be positive, got {spec.points_per_cluster}")
    if spec.means1.shape[1] != spec.means2.shape[1]:
        raise ConfigError("both domains must have the same dimensionality")
    rng = np.random.default_rng(seed)
    x1, y1 = _sample_clusters(spec.means1, spec.std1, spec.points_per_cluster, rng)
    x2, y2 = _sample_clusters(spec.means2, spec.std2, spec.points_per_cluster, rng)
    names = [f"x{i}" for i in range(spec.means1.shape[1])]
    return (
        DomainDataset(x1, names, class_labels=y1),
        DomainDataset(x2, list(names), class_labels=y2),
    )


# ---------------------------------------------------------------------------
# IDX digit images


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 4:
        raise FormatError(f"{what}: truncated header at byte offset {len(raw)}")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what}: bad magic number 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = header + math.prod(dims)
    if len(raw) < need:
        raise FormatError(
            f"{what}: truncated payload at byte offset {len(raw)}, expected {need} bytes"
        )
    return dims, raw[header:need]


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_digits(
    images_path,
    labels_path,
    keep_classes: Sequence[int] | None = (3, 7),
) -> DomainDataset:
    """Flattened IDX images scaled to [0, 1], filtered to ``keep_classes``.

    Gzip-compressed files are accepted. ``pair_ids`` hold each image's row
    index in the source file.
    """
    (n, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    (n_lab,), label_bytes = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if n_lab != n:
        raise FormatError(f"{n} images but {n_lab} labels")
    X = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    keep = np.arange(n) if keep_classes is None else np.flatnonzero(np.isin(y, list(keep_classes)))
    names = [f"px{i}" for i in range(rows * cols)]
    return DomainDataset(X[keep], names, class_labels=y[keep], pair_ids=[str(i) for i in keep])


def bundled_digits_paths() -> tuple[Path, Path]:
    """Paths of the bundled MNIST 3s/7s subset (images, labels)."""
    root = resources.files("magan") / "datasets"
    return (
        Path(str(root / "mnist37-images-idx3-ubyte.gz")),
        Path(str(root / "mnist37-labels-idx1-ubyte.gz")),
    )


def rotation_matrix(side: int, degrees: float) -> np.ndarray:
    """``side^2 x side^2`` bilinear resampling operator for an image rotation.

    Rotation is counter-clockwise about the image center; samples falling
    outside the source image read as 0. Apply as ``flat_images @ R.T``.
    """
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    center = (side - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    # output (row, col) -> source position via the inverse rotation; rows grow downward
    y = center - rr
    x = cc - center
    src_x = c * x + s * y
    src_y = -s * x + c * y
    src_r = (center - src_y).ravel()
    src_c = (src_x + center).ravel()
    # snap away float noise so exact grid positions stay exact
    src_r = np.where(np.abs(src_r - np.round(src_r)) < 1e-9, np.round(src_r), src_r)
    src_c = np.where(np.abs(src_c - np.round(src_c)) < 1e-9, np.round(src_c), src_c)

    R = np.zeros((side * side, side * side))
    r0, c0 = np.floor(src_r).astype(int), np.floor(src_c).astype(int)
    fr, fc = src_r - r0, src_c - c0
    out_idx = np.arange(side * side)
    for dr, dc, w in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        r, col = r0 + dr, c0 + dc
        ok = (r >= 0) & (r < side) & (col >= 0) & (col < side) & (w > 0)
        np.add.at(R, (out_idx[ok], r[ok] * side + col[ok]), w[ok])
    return R


def rotate_images(ds: DomainDataset, degrees: float, side: int | None = None) -> DomainDataset:
    """Rotate every flattened square image; labels and pair ids carry over."""
    d = ds.n_features
    if side is None:
        side = math.isqrt(d)
    if side * side != d:
        raise DimensionError(f"row length {d} is not a square image of side {side}")
    if degrees % 360 == 0:
        return ds.with_matrix(ds.matrix.copy())
    R = rotation_matrix(side, degrees)
    return ds.with_matrix(ds.matrix @ R.T)



def pool_images(ds: DomainDataset, factor: int) -> DomainDataset:
    """Average-pool flattened square images by ``factor`` along each side."""
    side = math.isqrt(ds.n_features)
    if side * side != ds.n_features or factor < 1 or side % factor:
        raise DimensionError(f"cannot pool {ds.n_features}-pixel images by {factor}")
    s = side // factor
    pooled = ds.matrix.reshape(-1, s, factor, s, factor).mean(axis=(2, 4)).reshape(-1, s * s)
    return ds.with_matrix(pooled, [f"px{i}" for i in range(s * s)])

def rotated_digit_domains(
    images_path=None,
    labels_path=None,
    degrees: float = 120.0,
    keep_classes: Sequence[int] | None = (3, 7),
    pool: int = 1,
) -> tuple[DomainDataset, DomainDataset]:
    """Upright digits and their rotations as two domains.

    Defaults to the bundled 3s/7s subset. ``pool > 1`` average-pools the
    images first. Rotated pixels get their own names (``rpx*``) because
    they are not the same measurements; rows share ``pair_ids`` with the
    image they came from.
    """
    if images_path is None or labels_path is None:
        images_path, labels_path = bundled_digits_paths()
    upright = load_digits(images_path, labels_path, keep_classes)
    if pool > 1:
        upright = pool_images(upright, pool)
    rotated = rotate_images(upright, degrees)
    return upright, rotated.with_matrix(rotated.matrix, [f"r{n}" for n in upright.feature_names])

# ---------------------------------------------------------------------------
# CSV tables


def load_table_csv(path) -> DomainDataset:
    """Read a headered numeric CSV; ``__class`` and ``__pair_id`` become metadata."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: missing header row") from None
        rows = list(reader)
    rows = [r for r in rows if r]
    ncol = len(header)
    cls_col = header.index(CLASS_COLUMN) if CLASS_COLUMN in header else None
    pair_col = header.index(PAIR_COLUMN) if PAIR_COLUMN in header else None
    feat_cols = [i for i, h in enumerate(header) if h not in RESERVED_COLUMNS]

    matrix = np.empty((len(rows), len(feat_cols)))
    labels = [] if cls_col is not None else None
    pairs = [] if pair_col is not None else None
    for r, row in enumerate(rows, start=2):
        if len(row) != ncol:
            raise FormatError(f"{path}: row {r} has {len(row)} fields, header has {ncol}")
        for j, c in enumerate(feat_cols):
            try:
                v = float(row[c])
            except ValueError:
                raise ParseError(
                    f"{path}: row {r}, column {header[c]!r}: non-numeric value {row[c]!r}"
                ) from None
            if not math.isfinite(v):
                raise ParseError(f"{path}: row {r}, column {header[c]!r}: non-finite value {row[c]!r}")
            matrix[r - 2, j] = v
        if labels is not None:
            try:
                labels.append(int(row[cls_col]))
            except ValueError:
                raise ParseError(f"{path}: row {r}, column {CLASS_COLUMN!r}: not an integer {row[cls_col]!r}") from None
        if pairs is not None:
            pairs.append(row[pair_col])
    return DomainDataset(
        matrix,
        [header[c] for c in feat_cols],
        class_labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        pair_ids=pairs,
    )


def write_table_csv(ds: DomainDataset, path) -> None:
    """Write ``ds`` so that :func:`load_table_csv` reads back the exact values."""
    header = list(ds.feature_names)
    if ds.class_labels is not None:
        header.append(CLASS_COLUMN)
    if ds.pair_ids is not None:
        header.append(PAIR_COLUMN)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(ds.matrix):
            out = [repr(float(v)) for v in row]
            if ds.class_labels is not None:
                out.append(str(int(ds.class_labels[i])))
            if ds.pair_ids is not None:
                out.append(ds.pair_ids[i])
            w.writerow(out)


# ---------------------------------------------------------------------------
# transforms and feature bookkeeping


def arcsinh_transform(ds: DomainDataset, cofactor: float = 5.0) -> DomainDataset:
    if not cofactor > 0:
        raise ConfigError(f"arcsinh cofactor must be positive, got {cofactor}")
    return ds.with_matrix(np.arcsinh(ds.matrix / cofactor))


def shared_feature_index(ds1: DomainDataset, ds2: DomainDataset) -> tuple[list[int], list[int]]:
    """Positions of identically named features, in ``ds1``'s column order."""
    where2 = {name: j for j, name in enumerate(ds2.feature_names)}
    idx1, idx2 = [], []
    for i, name in enumerate(ds1.feature_names):
        if name in where2:
            idx1.append(i)
            idx2.append(where2[name])
    return idx1, idx2


def holdout_split(ds: DomainDataset, feature_name: str) -> tuple[DomainDataset, np.ndarray]:
    """Drop one column; return the reduced dataset and the removed values."""
    j = ds.feature_index(feature_name)
    values = ds.matrix[:, j].copy()
    names = ds.feature_names[:j] + ds.feature_names[j + 1 :]
    return ds.with_matrix(np.delete(ds.matrix, j, axis=1), names), values


def insert_feature(ds: DomainDataset, name: str, values, position: int) -> DomainDataset:
    """Inverse of :func:`holdout_split`."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (ds.n_rows,):
        raise DimensionError(f"{values.shape[0]} values for {ds.n_rows} rows")
    names = ds.feature_names[:position] + [name] + ds.feature_names[position:]
    return ds.with_matrix(np.insert(ds.matrix, position, values, axis=1), names)


# ---------------------------------------------------------------------------
# paired synthetic tables


@dataclass
class DistortionSpec:
    """How each view warps the latent representation.

    ``kind="identity"`` leaves the clean representation untouched;
    ``"nonlinear"`` applies a random linear map followed by ``tanh`` to the
    view-specific columns. ``noise`` is the std of independent Gaussian
    noise added to each view's shared columns.
    """

    kind: str = "nonlinear"
    noise: float = 0.05
    strength: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "nonlinear"):
            raise ConfigError(f"unknown distortion kind {self.kind!r}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")


def _standardize(a: np.ndarray) -> np.ndarray:
    sd = a.std(axis=0)
    return (a - a.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def gen_paired_tabular(
    seed: int,
    n: int = 2000,
    d: int = 20,
    d_shared: int = 10,
    distortion: DistortionSpec | str | None = None,
    latent_dim: int = 4,
    n_clusters: int = 4,
) -> tuple[DomainDataset, DomainDataset]:
    """Two views of one latent Gaussian mixture with ``d_shared`` common columns.

    A latent ``n x latent_dim`` sample goes through a shared random smooth
    map to a clean ``d``-column representation. The first ``d_shared``
    columns (named ``s0``, ``s1``, ...) appear in both views, each with its
    own small noise; the remaining columns pass through a view-specific
    distortion and get view-specific names (``a*`` in view 1, ``b*`` in
    view 2). Row ``i`` of both views comes from the same latent point.
    """
    if isinstance(distortion, str):
        distortion = DistortionSpec(kind=distortion)
    dist = distortion or DistortionSpec()
    if n <= 0 or d <= 0 or latent_dim <= 0 or n_clusters <= 0:
        raise ConfigError(f"sizes must be positive: n={n}, d={d}, latent_dim={latent_dim}")
    if not 0 <= d_shared <= d:
        raise ConfigError(f"d_shared must lie in [0, d], got {d_shared} for d={d}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 2.0, size=(n_clusters, latent_dim))
    member = rng.integers(0, n_clusters, size=n)
    z = centers[member] + rng.standard_normal((n, latent_dim))
    lift = rng.standard_normal((latent_dim, d)) / math.sqrt(latent_dim)
    clean = _standardize(np.tanh(_standardize(z) @ lift) + 0.5 * (_standardize(z) @ lift))

    views = []
    for _ in range(2):
        shared = clean[:, :d_shared]
        own = clean[:, d_shared:]
        if dist.kind == "nonlinear" and own.shape[1]:
            k = own.shape[1]
            mix = np.linalg.qr(rng.standard_normal((k, k)))[0]
            shift = rng.normal(0.0, 0.5, size=k)
            own = _standardize(np.tanh(dist.strength * own @ mix + shift))
        if dist.noise > 0:
            shared = shared + dist.noise * rng.standard_normal(shared.shape)
        views.append(np.concatenate([shared, own], axis=1))

    shared_names = [f"s{i}" for i in range(d_shared)]
    names1 = shared_names + [f"a{i}" for i in range(d - d_shared)]
    names2 = shared_names + [f"b{i}" for i in range(d - d_shared)]
    pair_ids = [str(i) for i in range(n)]
    return (
        DomainDataset(views[0], names1, class_labels=member, pair_ids=pair_ids),
        DomainDataset(views[1], names2, class_labels=member, pair_ids=list(pair_ids)),
    )
