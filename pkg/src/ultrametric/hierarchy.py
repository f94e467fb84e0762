"""Dyadic hierarchy on the sites ``B_n = {1, ..., 2**n}``.

Sites are 1-based throughout the public API.  The partition ``P_r`` cuts the
positive integers into consecutive blocks of length ``2**r``; two sites are at
ultrametric distance ``d`` when ``d`` is the smallest level whose partition
puts them in the same block.
"""
from __future__ import annotations

import numpy as np


def _check_site(x: int) -> None:
    if x < 1:
        raise ValueError(f"site labels are 1-based, got {x}")


def ultrametric_distance(x: int, y: int) -> int:
    """Smallest level ``r`` such that ``x`` and ``y`` share a block of ``P_r``.

    Computed as the bit length of ``(x - 1) ^ (y - 1)``.
    """
    _check_site(x)
    _check_site(y)
    return ((x - 1) ^ (y - 1)).bit_length()


def block_range(r: int, x: int) -> tuple[int, int]:
    """Inclusive 1-based range of the ``P_r`` block containing ``x``."""
    if r < 0:
        raise ValueError("level must be non-negative")
    _check_site(x)
    k = -(-x // 2**r)  # ceil(x / 2**r)
    return (k - 1) * 2**r + 1, k * 2**r


def layer_variance(x: int, y: int, r: int) -> float:
    """Variance of the ``(x, y)`` entry of the layer matrix of level ``r``."""
    d = ultrametric_distance(x, y)
    if d == 0:
        return 2.0 * 2.0**-r
    if d <= r:
        return 2.0**-r
    return 0.0


def distance_matrix(n: int) -> np.ndarray:
    """All pairwise distances on ``B_n`` as an ``(N, N)`` integer array (0-based storage)."""
    idx = np.arange(2**n, dtype=np.int64)
    xor = idx[:, None] ^ idx[None, :]
    # bit_length via frexp: for v > 0, frexp(v)[1] == v.bit_length()
    out = np.frexp(xor.astype(np.float64))[1].astype(np.int64)
    out[xor == 0] = 0
    return out


def layer_variance_matrix(n: int, r: int) -> np.ndarray:
    """Entry variances of the level-``r`` layer on ``B_n``."""
    d = distance_matrix(n)
    out = np.where(d <= r, 2.0**-r, 0.0)
    out[d == 0] = 2.0 * 2.0**-r
    return out
