"""Dataset generators, loaders, and every on-disk format the package emits.

All generators are deterministic under their seed. Emitted files are
byte-stable: floats are written with 17 significant digits (enough to
round-trip float64 exactly), JSON is written with sorted keys, and nothing
embeds wall-clock time.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import derived_rng


class ParseError(ValueError):
    """Malformed input file; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    """Input matrix plus targets. Classification targets are class indices."""

    X: np.ndarray
    y: np.ndarray
    task: str  # "classification" | "regression"
    name: str = ""
    seed: int = 0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        object.__setattr__(self, "X", X)
        if self.task == "classification":
            y = np.asarray(self.y, dtype=np.int64)
            if y.size and (y.min() < 0):
                raise ValueError("class indices must be non-negative")
        elif self.task == "regression":
            y = np.asarray(self.y, dtype=np.float64)
        else:
            raise ValueError(f"unknown task {self.task!r}")
        object.__setattr__(self, "y", y)
        if X.ndim != 2 or len(y) != X.shape[0] or X.shape[0] < 1:
            raise ValueError("X must be (n, d) with one target per row")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        if self.task != "classification":
            raise ValueError("n_classes only defined for classification")
        return int(self.y.max()) + 1 if self.y.size else 0

    def split(self, n_train: int, seed: int):
        """Seeded disjoint train/test split by permutation."""
        if not 0 < n_train < self.n:
            raise ValueError("n_train must be strictly inside (0, n)")
        perm = derived_rng(seed, 0xD15).permutation(self.n)
        tr, te = perm[:n_train], perm[n_train:]
        return (
            replace(self, X=self.X[tr], y=self.y[tr], name=self.name + "/train"),
            replace(self, X=self.X[te], y=self.y[te], name=self.name + "/test"),
        )


def standardize(train: Dataset, *others: Dataset):
    """Shift/scale features to mean 0, std 1 using the training split's stats."""
    mu = train.X.mean(axis=0)
    sd = train.X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = [replace(train, X=(train.X - mu) / sd)]
    out.extend(replace(d, X=(d.X - mu) / sd) for d in others)
    return out[0] if not others else tuple(out)


def two_moons(n: int, noise_std: float = 0.0, seed: int = 0) -> Dataset:
    """Two interleaving half circles; labels split ceil(n/2) / floor(n/2).

    The outer circle is the unit half circle over [0, pi]; the inner one is
    its reflection shifted by (1, -0.5). With noise_std 0 every point lies
    exactly on its locus.
    """
    if n < 2:
        raise ValueError("need at least 2 points")
    n_outer = (n + 1) // 2
    n_inner = n // 2
    t_out = np.linspace(0.0, np.pi, n_outer)
    t_in = np.linspace(0.0, np.pi, n_inner)
    X = np.concatenate(
        [
            np.column_stack([np.cos(t_out), np.sin(t_out)]),
            np.column_stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)]),
        ]
    )
    y = np.concatenate([np.zeros(n_outer, dtype=int), np.ones(n_inner, dtype=int)])
    if noise_std > 0:
        X = X + derived_rng(seed, 0x300A).normal(scale=noise_std, size=X.shape)
    return Dataset(X, y, "classification", name="two_moons", seed=seed)


def toy_sine(seed: int = 0) -> Dataset:
    """1-D regression with two separated input clusters.

    y = sin(4 (x - 4.3)) + eps with eps ~ N(0, 0.05^2); 750 points uniform in
    [-2, -1.4] and 750 in [1.0, 1.8].
    """
    rng = derived_rng(seed, 0x51E)
    x = np.concatenate(
        [rng.uniform(-2.0, -1.4, size=750), rng.uniform(1.0, 1.8, size=750)]
    )
    y = np.sin(4.0 * (x - 4.3)) + rng.normal(scale=0.05, size=x.shape)
    return Dataset(x[:, None], y, "regression", name="toy_sine", seed=seed)


def toy_sine_mean(x):
    return np.sin(4.0 * (np.asarray(x) - 4.3))


def gaussian_blobs(
    n: int, dim: int, n_classes: int, sep: float = 3.0, seed: int = 0
) -> Dataset:
    """Balanced isotropic Gaussian clusters with random class means."""
    rng = derived_rng(seed, 0xB10B)
    centers = rng.normal(scale=sep, size=(n_classes, dim))
    y = np.arange(n) % n_classes
    X = centers[y] + rng.normal(size=(n, dim))
    return Dataset(X, y, "classification", name="blobs", seed=seed)


def load_csv_labeled(path, label_col: int = -1, task: str = "classification") -> Dataset:
    """Load a labeled CSV; the last column is the target unless told otherwise.

    A single non-numeric leading row is treated as a header. String class
    labels are mapped to indices in sorted order.
    """
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append(row)
    if not rows:
        raise ParseError(f"{path}: empty file", offset=0)

    def numeric(row):
        try:
            [float(v) for v in row]
            return True
        except ValueError:
            return False

    start = 0
    if not numeric(rows[0][:label_col] if label_col != -1 else rows[0][:-1]):
        start = 1
    body = rows[start:]
    if not body:
        raise ParseError(f"{path}: no data rows", offset=0)
    width = len(body[0])
    if any(len(r) != width for r in body):
        raise ParseError(f"{path}: ragged rows")
    labels_raw = [r[label_col] for r in body]
    feats = [
        [v for i, v in enumerate(r) if i != (label_col % width)] for r in body
    ]
    X = np.array([[float(v) for v in r] for r in feats])
    if task == "classification":
        try:
            vals = [int(float(v)) for v in labels_raw]
            y = np.array(vals)
        except ValueError:
            classes = sorted(set(labels_raw))
            index = {c: i for i, c in enumerate(classes)}
            y = np.array([index[v] for v in labels_raw])
    else:
        y = np.array([float(v) for v in labels_raw])
    return Dataset(X, y, task, name=str(path))


_IDX_MAGIC_IMAGES = 0x00000803
_IDX_MAGIC_LABELS = 0x00000801


def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}",
            offset=0,
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated dimension block", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) != header + count:
        raise ParseError(
            f"{path}: payload length {len(raw) - header}, expected {count}",
            offset=header,
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels are standardized to mean 0, std 1."""
    images = _read_idx(images_path, _IDX_MAGIC_IMAGES)
    labels = _read_idx(labels_path, _IDX_MAGIC_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    mu, sd = X.mean(), X.std()
    X = (X - mu) / (sd if sd > 0 else 1.0)
    return Dataset(X, labels.astype(np.int64), "classification", name=str(images_path))


# ---------------------------------------------------------------------------
# Emission formats


def fmt_float(x: float) -> str:
    return f"{float(x):.17g}"


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_sidecar(path, config: dict, seed) -> None:
    """Every emitted artifact gets `<name>.json` describing how it was made."""
    write_json(
        str(path) + ".json",
        {"config": config, "seed": seed, "version": __version__},
    )


def write_matrix_csv(path, matrix, header=None) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in matrix:
            w.writerow([fmt_float(v) for v in row])


def read_matrix_csv(path, skip_header: bool = False) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if skip_header:
        rows = rows[1:]
    return np.array([[float(v) for v in r] for r in rows])


def write_dataset_csv(path, dataset: Dataset) -> None:
    data = np.column_stack([dataset.X, dataset.y.astype(np.float64)])
    write_matrix_csv(path, data)


def write_histogram_csv(path, samples, bins: int = 200, value_range=None) -> None:
    density, edges = np.histogram(samples, bins=bins, range=value_range, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    write_matrix_csv(
        path, np.column_stack([centers, density]), header=["bin_center", "density"]
    )


def write_ppm_heatmap(path, matrix, scale=None) -> None:
    """Binary P6 heatmap with a diverging blue-white-red map centered at 0."""
    M = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if scale is None:
        scale = float(np.max(np.abs(M)))
    if scale <= 0:
        scale = 1.0
    t = np.clip(M / scale, -1.0, 1.0)
    h, w = t.shape
    rgb = np.empty((h, w, 3), dtype=np.float64)
    pos = t >= 0
    rgb[..., 0] = np.where(pos, 1.0, 1.0 + t)
    rgb[..., 1] = 1.0 - np.abs(t)
    rgb[..., 2] = np.where(pos, 1.0 - t, 1.0)
    data = np.rint(rgb * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM", offset=0)
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise ParseError(f"{path}: unsupported maxval", offset=len(parts[0]) + len(parts[1]) + 2)
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    return pixels.reshape(h, w, 3)


_DUMP_MAGIC = b"BNNS"


def write_sample_dump(path, samples, layout: dict) -> None:
    """Flat binary sample matrix: magic, u32 n, u32 dim, layout JSON, f64 rows."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    blob = json.dumps(layout, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<III", samples.shape[0], samples.shape[1], len(blob)))
        fh.write(blob)
        fh.write(samples.astype("<f8").tobytes())


def read_sample_dump(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _DUMP_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    n, dim, blen = struct.unpack("<III", raw[4:16])
    layout = json.loads(raw[16 : 16 + blen].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f8", offset=16 + blen)
    if data.size != n * dim:
        raise ParseError(f"{path}: payload size mismatch", offset=16 + blen)
    return data.reshape(n, dim).copy(), layout
