"""Synthetic union-of-orthogonal-subspaces "images" and their file formats.

Embedding file (little-endian)::

    b"DEPR" | u32 version=1 | u32 D | u32 N | u32 g
    | f64 x D*N embeddings, column-major | u16 x N labels

Label maps are plain-text PGM (P2) with gray level = class id.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConfigInvalid,
    ShapeCorrupt,
    TooManyClasses,
    VersionMismatch,
)
from .matcore import derive_seed, qr_orthonormalize, rng

EMBED_MAGIC = b"DEPR"
EMBED_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    Patch coefficients in a class subspace are ``N(mean_offset * e1, I_d)``;
    per image, each class's coordinates are rotated by an angle drawn from
    ``[-max_angle, max_angle]`` when ``rotate`` is set.
    """

    ambient_dim: int = 16
    classes: int = 4
    subspace_dim: int = 2
    grid: int = 8
    noise: float = 0.1
    min_classes: int = 2
    max_classes: int = 4
    rotate: bool = True
    max_angle: float = math.pi / 2
    mean_offset: float = 2.0
    seed: int = 0

    def validate(self):
        if self.classes < 1 or self.subspace_dim < 1:
            raise ConfigInvalid("classes and subspace_dim must be >= 1")
        if self.classes * self.subspace_dim > self.ambient_dim:
            raise ConfigInvalid("classes * subspace_dim must be <= ambient_dim")
        if self.grid < 2:
            raise ConfigInvalid("grid must be >= 2")
        if self.noise < 0:
            raise ConfigInvalid("noise must be >= 0")
        hi = min(self.max_classes, self.classes)
        if not 1 <= self.min_classes <= hi:
            raise ConfigInvalid("need 1 <= min_classes <= max_classes")
        if hi > self.grid:
            raise ConfigInvalid("cannot fit more classes than grid bands")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class LabeledImage:
    embeddings: np.ndarray  # D x N
    labels: np.ndarray  # N, int
    grid: int

    @property
    def N(self):
        return self.embeddings.shape[1]


def class_bases(cfg):
    """List of C mutually orthogonal D x d bases, drawn once per dataset."""
    cfg.validate()
    gen = rng(derive_seed(cfg.seed, "bases"))
    G = gen.standard_normal((cfg.ambient_dim, cfg.classes * cfg.subspace_dim))
    Q = qr_orthonormalize(G)
    d = cfg.subspace_dim
    return [Q[:, c * d : (c + 1) * d] for c in range(cfg.classes)]


def _rotation(d, angle, gen):
    if d == 1:
        return np.eye(1)
    # rotate by `angle` inside a random plane of the d-dim coordinate space
    plane = qr_orthonormalize(gen.standard_normal((d, 2)))
    u, v = plane[:, 0], plane[:, 1]
    c, s = math.cos(angle), math.sin(angle)
    R = np.eye(d) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
    R += s * (np.outer(v, u) - np.outer(u, v))
    return R


def band_layout(g, present, gen):
    """g*g row-major labels: contiguous vertical or horizontal bands."""
    k = len(present)
    cuts = np.sort(gen.choice(np.arange(1, g), size=k - 1, replace=False))
    edges = np.concatenate([[0], cuts, [g]])
    strip = np.empty(g, dtype=np.int64)
    for i, c in enumerate(present):
        strip[edges[i] : edges[i + 1]] = c
    vertical = bool(gen.integers(2))
    grid = np.tile(strip, (g, 1)) if vertical else np.tile(strip[:, None], (1, g))
    return grid.reshape(-1)


def gen_image(cfg, bases, index, centered=True):
    """Image number ``index``; generation is pure in (cfg, index)."""
    gen = rng(derive_seed(cfg.seed, f"image:{index}"))
    g, d, D = cfg.grid, cfg.subspace_dim, cfg.ambient_dim
    hi = min(cfg.max_classes, cfg.classes)
    k = int(gen.integers(cfg.min_classes, hi + 1))
    present = gen.permutation(cfg.classes)[:k]
    labels = band_layout(g, present, gen)
    N = g * g
    Z = np.empty((D, N))
    mean = np.zeros(d)
    mean[0] = cfg.mean_offset
    for c in present:
        B = bases[c]
        if cfg.rotate and d > 1:
            B = B @ _rotation(d, gen.uniform(-cfg.max_angle, cfg.max_angle), gen)
        idx = np.flatnonzero(labels == c)
        coef = mean[:, None] + gen.standard_normal((d, len(idx)))
        Z[:, idx] = B @ coef
    Z += cfg.noise * gen.standard_normal((D, N))
    if centered:
        Z -= Z.mean(axis=1, keepdims=True)
    return LabeledImage(Z, labels, g)


def gen_dataset(cfg, count, start=0, centered=True):
    """``count`` images sharing one set of class subspaces."""
    cfg.validate()
    bases = class_bases(cfg)
    return [gen_image(cfg, bases, start + i, centered) for i in range(count)]


def stack(images):
    """(B, D, N) embeddings and (B, N) labels."""
    Z = np.stack([im.embeddings for im in images])
    y = np.stack([im.labels for im in images])
    return Z, y


def write_embeddings(path, image):
    D, N = image.embeddings.shape
    if image.grid * image.grid != N:
        raise ShapeCorrupt("grid does not match N")
    payload = _HEADER.pack(EMBED_MAGIC, EMBED_VERSION, D, N, image.grid)
    payload += np.asarray(image.embeddings, dtype="<f8").tobytes(order="F")
    payload += np.asarray(image.labels, dtype="<u2").tobytes()
    Path(path).write_bytes(payload)


def read_embeddings(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ShapeCorrupt("file shorter than header")
    magic, version, D, N, g = _HEADER.unpack_from(raw)
    if magic != EMBED_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != EMBED_VERSION:
        raise VersionMismatch(f"unsupported version {version}")
    need = _HEADER.size + 8 * D * N + 2 * N
    if len(raw) != need or g * g != N:
        raise ShapeCorrupt(f"expected {need} bytes for D={D}, N={N}, got {len(raw)}")
    off = _HEADER.size
    Z = np.frombuffer(raw, dtype="<f8", count=D * N, offset=off)
    Z = Z.reshape((D, N), order="F").astype(np.float64)
    labels = np.frombuffer(raw, dtype="<u2", count=N, offset=off + 8 * D * N)
    return LabeledImage(Z, labels.astype(np.int64), g)


def write_label_map(path, labels, g):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (g * g,):
        raise ShapeCorrupt(f"need {g * g} labels, got {labels.shape}")
    if labels.size and (labels.max() > 255 or labels.min() < 0):
        raise TooManyClasses("PGM gray levels hold class ids 0..255 only")
    maxval = max(int(labels.max()) if labels.size else 0, 1)
    rows = labels.reshape(g, g)
    lines = ["P2", f"{g} {g}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")
