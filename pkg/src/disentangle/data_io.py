"""MNIST IDX images, a bundled procedural digit set, and the canvas localisation dataset."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as _rng
from .generative import MixingModel

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
_HEADER = struct.Struct(">IIII")
MAX_IDX_BYTES = 1 << 34

CANVAS = 40
DIGIT = 28
MAX_OFFSET = CANVAS - DIGIT
CENTER_OFFSET = 6
DATASET_FIELDS = ("s0", "s1", "p0", "p1", "row_offset", "col_offset", "digit_index")


class IdxError(ValueError):
    pass


class IdxWrongType(IdxError):
    """Magic number is not that of an unsigned-byte image file."""


class IdxTruncated(IdxError):
    pass


@dataclass(frozen=True)
class IdxImages:
    count: int
    rows: int
    cols: int
    pixels: np.ndarray  # uint8, (count, rows, cols)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError("pixels must be uint8")
        if px.shape != (self.count, self.rows, self.cols):
            raise ValueError(f"pixels shape {px.shape} != {(self.count, self.rows, self.cols)}")

    def to_bytes(self) -> bytes:
        return _HEADER.pack(IDX_IMAGE_MAGIC, self.count, self.rows, self.cols) + self.pixels.tobytes(order="C")


def parse_idx_images(buf: bytes) -> IdxImages:
    if len(buf) < _HEADER.size:
        raise IdxTruncated(f"file has {len(buf)} bytes, header needs {_HEADER.size}")
    magic, count, rows, cols = _HEADER.unpack_from(buf)
    if magic == IDX_LABEL_MAGIC:
        raise IdxWrongType("this is an IDX label file (magic 0x00000801), not an image file")
    if magic != IDX_IMAGE_MAGIC:
        raise IdxWrongType(f"bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    n_bytes = count * rows * cols
    if n_bytes > MAX_IDX_BYTES:
        raise IdxError(f"dimensions {count}x{rows}x{cols} are implausibly large")
    body = len(buf) - _HEADER.size
    if body < n_bytes:
        raise IdxTruncated(f"expected {n_bytes} pixel bytes, found {body}")
    if body > n_bytes:
        raise IdxError(f"{body - n_bytes} trailing bytes after pixel data")
    px = np.frombuffer(buf, dtype=np.uint8, count=n_bytes, offset=_HEADER.size)
    return IdxImages(count, rows, cols, px.reshape(count, rows, cols).copy())


def load_idx_images(path) -> IdxImages:
    """Read an uncompressed (or ``.gz``) IDX3 unsigned-byte image file."""
    path = Path(path)
    if path.suffix == ".gz":
        import gzip

        with gzip.open(path, "rb") as fh:
            return parse_idx_images(fh.read())
    return parse_idx_images(path.read_bytes())


def save_idx_images(images: IdxImages, path) -> None:
    Path(path).write_bytes(images.to_bytes())


# Stroke skeletons in a unit box (x to the right, y downwards).
_STROKES = {
    0: [[(0.5, 0.05), (0.2, 0.2), (0.15, 0.5), (0.2, 0.8), (0.5, 0.95), (0.8, 0.8),
         (0.85, 0.5), (0.8, 0.2), (0.5, 0.05)]],
    1: [[(0.35, 0.2), (0.55, 0.05), (0.55, 0.95)], [(0.35, 0.95), (0.75, 0.95)]],
    2: [[(0.2, 0.25), (0.4, 0.07), (0.7, 0.1), (0.8, 0.3), (0.2, 0.93), (0.85, 0.93)]],
    3: [[(0.2, 0.1), (0.75, 0.1), (0.45, 0.45), (0.8, 0.65), (0.65, 0.92), (0.2, 0.88)]],
    4: [[(0.65, 0.95), (0.65, 0.05), (0.15, 0.65), (0.85, 0.65)]],
    5: [[(0.8, 0.07), (0.25, 0.07), (0.22, 0.45), (0.65, 0.42), (0.8, 0.68), (0.6, 0.93),
         (0.2, 0.88)]],
    6: [[(0.75, 0.08), (0.35, 0.25), (0.2, 0.65), (0.4, 0.93), (0.75, 0.8), (0.7, 0.55),
         (0.3, 0.55)]],
    7: [[(0.15, 0.08), (0.85, 0.08), (0.4, 0.95)], [(0.35, 0.5), (0.7, 0.5)]],
    8: [[(0.5, 0.48), (0.25, 0.28), (0.5, 0.06), (0.75, 0.28), (0.5, 0.48), (0.2, 0.72),
         (0.5, 0.94), (0.8, 0.72), (0.5, 0.48)]],
    9: [[(0.7, 0.45), (0.3, 0.45), (0.25, 0.2), (0.5, 0.06), (0.75, 0.2), (0.7, 0.45),
         (0.6, 0.95)]],
}


def _render(segments: list[tuple[np.ndarray, np.ndarray]], radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:DIGIT, 0:DIGIT] + 0.5
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dist = np.full(len(pts), np.inf)
    for a, b in segments:
        ab = b - a
        t = np.clip(((pts - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
        proj = a + t[:, None] * ab
        dist = np.minimum(dist, np.linalg.norm(pts - proj, axis=1))
    ink = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return np.round(255.0 * ink).astype(np.uint8).reshape(DIGIT, DIGIT)


def synthetic_digits(count: int = 64, seed: int = 0) -> IdxImages:
    """Procedurally drawn 28x28 digit glyphs, cycling 0..9 with random jitter.

    Stands in for MNIST so nothing has to be downloaded.
    """
    g = _rng.stream(seed, "synthetic_digits")
    out = np.zeros((count, DIGIT, DIGIT), dtype=np.uint8)
    for i in range(count):
        u = _rng.uniform_open(g, 6)
        scale = 17.0 + 4.0 * u[0]
        slant = -0.25 + 0.5 * u[1]
        radius = 0.9 + 0.9 * u[2]
        shift = np.array([DIGIT / 2 + 2.0 * (u[3] - 0.5), DIGIT / 2 + 2.0 * (u[4] - 0.5)])
        aspect = 0.8 + 0.3 * u[5]
        segs = []
        for stroke in _STROKES[i % 10]:
            p = np.asarray(stroke) - 0.5
            x = (p[:, 0] * aspect - slant * p[:, 1]) * scale + shift[0]
            y = p[:, 1] * scale + shift[1]
            q = np.stack([x, y], axis=1)
            segs += list(zip(q[:-1], q[1:]))
        out[i] = _render(segs, radius)
    return IdxImages(count, DIGIT, DIGIT, out)


@dataclass(frozen=True)
class CanvasDataset:
    images: np.ndarray      # (n, 1600) float, raw 0..255 digit pixels
    sources: np.ndarray     # (n, 2)
    positions: np.ndarray   # (n, 2) = sources @ A^T + noise
    offsets: np.ndarray     # (n, 2) int paste offsets (row, col)
    digit_index: np.ndarray  # (n,) int
    mixing: MixingModel
    seed: int

    @property
    def n(self) -> int:
        return self.images.shape[0]


def position_to_offset(p: np.ndarray) -> np.ndarray:
    """Continuous position -> integer paste offset, clamped so the digit stays on canvas."""
    return np.clip(np.floor(CENTER_OFFSET + np.asarray(p, dtype=float) + 0.5), 0, MAX_OFFSET).astype(int)


def paste(digit: np.ndarray, offset) -> np.ndarray:
    canvas = np.zeros((CANVAS, CANVAS))
    r, c = int(offset[0]), int(offset[1])
    canvas[r:r + DIGIT, c:c + DIGIT] = digit
    return canvas


def make_localization_dataset(
    digits: IdxImages, n: int, seed: int, mixing: MixingModel | None = None,
) -> CanvasDataset:
    """Paste one digit per example on a blank 40x40 canvas at a mixed-source position.

    s ~ N(0, I_2), position = A s + eta, and the (row, col) paste offset is
    the position rounded around the centre offset 6 and clamped to [0, 12].
    """
    if (digits.rows, digits.cols) != (DIGIT, DIGIT):
        raise ValueError(f"digits must be {DIGIT}x{DIGIT}, got {digits.rows}x{digits.cols}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if digits.count < 1:
        raise ValueError("need at least one digit image")
    m = mixing if mixing is not None else MixingModel.localization()
    if m.N != 2:
        raise ValueError("canvas positions are two-dimensional")
    g = _rng.stream(seed, "localization")
    S = _rng.normal(g, (n, m.k))
    P = S @ m.A.T + _rng.normal(g, (n, 2))
    idx = g.integers(0, digits.count, size=n)
    offsets = position_to_offset(P)
    images = np.empty((n, CANVAS * CANVAS))
    for i in range(n):
        images[i] = paste(digits.pixels[idx[i]], offsets[i]).ravel()
    return CanvasDataset(images, S, P, offsets, idx.astype(int), m, int(seed))


def standardize(data: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Shift and scale by one global mean and std; a constant input maps to zeros with std 1."""
    data = np.asarray(data, dtype=float)
    if data.size == 0:
        raise ValueError("cannot standardize an empty array")
    mean = float(np.mean(data))
    std = float(np.std(data))
    if std < 1e-12:
        return np.zeros_like(data), mean, 1.0
    return (data - mean) / std, mean, std


def save_dataset(ds: CanvasDataset, out_dir) -> None:
    """Write ``dataset.csv``, ``images.bin`` (float64 LE, row-major) and ``meta.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "dataset.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_FIELDS)
        for s, p, o, d in zip(ds.sources, ds.positions, ds.offsets, ds.digit_index):
            w.writerow([format(float(s[0]), ".17g"), format(float(s[1]), ".17g"),
                        format(float(p[0]), ".17g"), format(float(p[1]), ".17g"),
                        int(o[0]), int(o[1]), int(d)])
    ds.images.astype("<f8").tofile(out / "images.bin")
    A = ",".join(format(float(a), ".17g") for a in ds.mixing.A.ravel())
    (out / "meta.txt").write_text(
        f"n = {ds.n}\nseed = {ds.seed}\nA = {A}\nA_shape = {ds.mixing.N},{ds.mixing.k}\n",
        encoding="utf-8",
    )


def load_dataset(in_dir) -> CanvasDataset:
    d = Path(in_dir)
    meta = {}
    for line in (d / "meta.txt").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            meta[key.strip()] = val.strip()
    shape = tuple(int(v) for v in meta["A_shape"].split(","))
    A = np.array([float(v) for v in meta["A"].split(",")]).reshape(shape)
    with (d / "dataset.csv").open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != DATASET_FIELDS:
            raise ValueError(f"unexpected dataset header {header}")
        rows = list(reader)
    n = int(meta["n"])
    if len(rows) != n:
        raise ValueError(f"meta says n={n} but dataset.csv has {len(rows)} rows")
    arr = np.array([[float(v) for v in r] for r in rows]).reshape(n, len(DATASET_FIELDS))
    images = np.fromfile(d / "images.bin", dtype="<f8")
    if images.size != n * CANVAS * CANVAS:
        raise ValueError(f"images.bin holds {images.size} values, expected {n * CANVAS * CANVAS}")
    return CanvasDataset(
        images=images.reshape(n, CANVAS * CANVAS).astype(float),
        sources=arr[:, 0:2],
        positions=arr[:, 2:4],
        offsets=arr[:, 4:6].astype(int),
        digit_index=arr[:, 6].astype(int),
        mixing=MixingModel(A),
        seed=int(meta["seed"]),
    )
