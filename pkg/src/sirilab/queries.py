"""Decoder object queries: learnable Xavier queries and constant sine-cosine grid queries."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

QUERY_KINDS = ("learnable", "constant")


class QuerySpecError(ValueError):
    pass


@dataclass(frozen=True)
class QuerySpec:
    kind: str
    n: int
    dim: int

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise QuerySpecError(f"unknown query kind {self.kind!r}")
        if self.n < 1 or self.dim < 1:
            raise QuerySpecError(f"query count and dim must be positive, got n={self.n}, dim={self.dim}")
        if self.kind == "constant":
            _check_square(self.n)
            _check_dim(self.dim)


def _check_square(n: int) -> int:
    side = math.isqrt(n) if n >= 0 else -1
    if n < 1 or side * side != n:
        raise QuerySpecError(f"constant queries need a perfect-square count, got {n}")
    return side


def _check_dim(dim: int) -> None:
    if dim < 4 or dim % 4:
        raise QuerySpecError(f"constant query dim must be a positive multiple of 4, got {dim}")


def grid_points(n: int) -> np.ndarray:
    """Interior intersections of a sqrt(n) x sqrt(n) grid on the unit square.

    Row-major over (k1, k2): point k is (k1 / (s + 1), k2 / (s + 1)) with
    k = (k1 - 1) * s + (k2 - 1), s = sqrt(n).
    """
    side = _check_square(n)
    ticks = np.arange(1, side + 1, dtype=np.float64) / (side + 1)
    k1, k2 = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([k1.ravel(), k2.ravel()], axis=1)


def sinusoidal_encode(points: np.ndarray, dim: int) -> np.ndarray:
    """Encode 2-D points into ``dim`` channels.

    Each coordinate gets dim/2 channels laid out as interleaved (sin, cos)
    pairs with frequency 1 / 10000^(2i / (dim/2)); the x block comes first,
    then the y block.
    """
    _check_dim(dim)
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise QuerySpecError(f"points must be (n, 2), got {points.shape}")
    half = dim // 2
    i = np.arange(half // 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, 2.0 * i / half)
    blocks = []
    for axis in range(2):
        phase = points[:, axis : axis + 1] * freq[None, :]
        block = np.empty((points.shape[0], half), dtype=np.float64)
        block[:, 0::2] = np.sin(phase)
        block[:, 1::2] = np.cos(phase)
        blocks.append(block)
    return np.concatenate(blocks, axis=1)


def constant_queries(n: int, dim: int) -> np.ndarray:
    return sinusoidal_encode(grid_points(n), dim)


def make_queries(spec: QuerySpec, seed: int = 0) -> tuple[torch.Tensor, bool]:
    """Build the query tensor and whether it is trainable.

    Constant queries do not depend on ``seed``.
    """
    if spec.kind == "constant":
        q = torch.from_numpy(constant_queries(spec.n, spec.dim)).to(torch.float32)
        return q, False
    g = torch.Generator().manual_seed(seed)
    q = torch.empty(spec.n, spec.dim)
    torch.nn.init.xavier_uniform_(q, generator=g)
    return q, True
