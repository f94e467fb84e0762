"""Sampling the ultrametric ensemble and matrix Brownian paths.

Random streams
--------------
Every stream is a :class:`numpy.random.Generator` driven by the counter-based
``Philox`` bit generator.  Substreams are keyed by a tuple of non-negative
integers through :class:`numpy.random.SeedSequence` (``spawn_key``), so the
stream of ``(seed, realization, layer)`` never depends on what else was drawn.
Normal variates come from ``Generator.standard_normal`` (numpy's ziggurat
transform of the uniform Philox output), which is reproducible across
platforms for a fixed numpy release.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

MAX_LEVEL = 14
MATRIX_MAGIC = b"UMRMAT01"

Normalization = Literal["raw", "mean_field"]


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent random stream for ``seed`` and an integer key path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class EnsembleParams:
    epsilon: float
    n: int
    normalization: Normalization = "raw"
    seed: int = 0
    max_level: int = MAX_LEVEL

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if not 0 <= self.n <= self.max_level:
            out.append(f"n={self.n} outside [0, {self.max_level}]")
        if self.normalization not in ("raw", "mean_field"):
            out.append(f"unknown normalization {self.normalization!r}")
        elif self.normalization == "raw" and not self.epsilon > -1:
            out.append(f"raw ensemble needs epsilon > -1, got {self.epsilon}")
        if not 0 <= self.seed < 2**64:
            out.append("seed must be a 64-bit unsigned integer")
        return out

    @property
    def dim(self) -> int:
        return 2**self.n


def coupling_weight(r: int, epsilon: float) -> float:
    """Layer weight ``t_r = 2**(-(1 + epsilon) r)``."""
    return float(np.exp2(-(1.0 + epsilon) * r))


def _goe_blocks(count: int, size: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    # (g + g.T) is bit-exactly symmetric; off-diagonal variance 2*s^2, diagonal 4*s^2.
    g = rng.standard_normal((count, size, size))
    g += g.transpose(0, 2, 1).copy()
    g *= np.sqrt(variance / 2.0)
    return g


def _add_block_diagonal(H: np.ndarray, blocks: np.ndarray) -> None:
    count, size, _ = blocks.shape
    view = H.reshape(count, size, count, size)
    idx = np.arange(count)
    view[idx, :, idx, :] += blocks


def sample_layer(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Layer matrix of level ``r`` on ``B_n``.

    Block diagonal with ``2**(n - r)`` independent GOE blocks of size ``2**r``,
    entry variance ``(1 + delta_xy) 2**-r``.  Entries outside the blocks are
    exactly zero.
    """
    if not 0 <= r <= n:
        raise ValueError(f"need 0 <= r <= n, got r={r}, n={n}")
    H = np.zeros((2**n, 2**n))
    _add_block_diagonal(H, _goe_blocks(2 ** (n - r), 2**r, 2.0**-r, rng))
    return H


def normalization_constant(n: int, epsilon: float) -> float:
    """``Z_n``: square root of the row sum of entry variances of ``H_n``.

    A level-``r`` block contributes ``2 * 2**-r`` on the diagonal and
    ``(2**r - 1) * 2**-r`` off it, so ``Z_n**2 = sum_r t_r (1 + 2**-r)``.
    """
    return float(np.sqrt(sum(coupling_weight(r, epsilon) * (1.0 + 2.0**-r) for r in range(n + 1))))


def _layer_stream(params: EnsembleParams, realization: int, r: int, rng):
    return rng if rng is not None else substream(params.seed, realization, r)


def sample_layers(params: EnsembleParams, realization: int = 0, rng=None, upto: int | None = None) -> np.ndarray:
    """Partial sum ``sum_{r < upto} sqrt(t_r) Phi_{n,r}`` in the same order as :func:`sample_direct`."""
    n = params.n
    upto = n + 1 if upto is None else upto
    H = np.zeros((2**n, 2**n))
    for r in range(upto):
        blocks = _goe_blocks(2 ** (n - r), 2**r, 2.0**-r, _layer_stream(params, realization, r, rng))
        blocks *= np.sqrt(coupling_weight(r, params.epsilon))
        _add_block_diagonal(H, blocks)
    return H


def sample_direct(params: EnsembleParams, realization: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample ``H_n = sum_{r=0}^n sqrt(t_r) Phi_{n,r}``.

    Parameters
    ----------
    params : EnsembleParams
        Model knobs; ``params.seed`` keys the layer substreams.
    realization : int
        Realization index, part of every substream key.
    rng : Generator, optional
        If given, all layers are drawn sequentially from it instead of from
        per-layer substreams.

    Returns
    -------
    ndarray
        Exactly symmetric ``(2**n, 2**n)`` array, divided by ``Z_n`` in
        ``mean_field`` mode.
    """
    H = sample_layers(params, realization, rng)
    if params.normalization == "mean_field":
        H /= normalization_constant(params.n, params.epsilon)
    return H


def split_top_layer(params: EnsembleParams, realization: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(base, top)`` with ``base = H_{n-1} (+) H'_{n-1}`` and ``top = sqrt(t_n) Phi_{n,n}``.

    Uses the substreams of :func:`sample_direct`, and ``base + top`` reproduces
    the raw ``sample_direct`` output bit for bit.
    """
    if params.normalization != "raw":
        raise ValueError("split_top_layer is defined for the raw ensemble")
    n = params.n
    base = sample_layers(params, realization, upto=n)
    top = _goe_blocks(1, 2**n, 2.0**-n, substream(params.seed, realization, n))[0]
    top *= np.sqrt(coupling_weight(n, params.epsilon))
    return base, top


def sample_goe(dim: int, rng: np.random.Generator, t: float = 1.0) -> np.ndarray:
    """``Phi_dim(t)``: symmetric Gaussian matrix with entry variance ``(1 + delta_xy) t / dim``."""
    return _goe_blocks(1, dim, t / dim, rng)[0]


def sample_recursive(params: EnsembleParams, realization: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample ``H_n`` by ``H_k = H_{k-1} (+) H'_{k-1} + Phi_{N_k}(t_k)`` from a ``N(0, 2)`` seed.

    Equal in distribution to :func:`sample_direct`, not bitwise.
    """
    if params.normalization != "raw":
        raise ValueError("the recursive construction is only defined for the raw ensemble")
    if rng is None:
        rng = substream(params.seed, realization, 2**32)
    n = params.n
    # level-k state: 2**(n-k) independent copies of H_k, stored as (copies, N_k, N_k)
    H = np.sqrt(2.0) * rng.standard_normal((2**n, 1, 1))
    for k in range(1, n + 1):
        size = 2**k
        half = size // 2
        copies = 2 ** (n - k)
        nxt = np.zeros((copies, size, size))
        nxt[:, :half, :half] = H[0::2]
        nxt[:, half:, half:] = H[1::2]
        nxt += _goe_blocks(copies, size, coupling_weight(k, params.epsilon) / size, rng)
        H = nxt
    return H[0]


@dataclass(frozen=True)
class DbmPath:
    """Independent increments of ``Phi_dim(t)`` on a time grid starting at 0."""

    dim: int
    times: np.ndarray
    increments: tuple[np.ndarray, ...]

    def cumulative(self) -> list[np.ndarray]:
        """``Phi_dim(t_k)`` for every grid time, starting with the zero matrix."""
        out = [np.zeros((self.dim, self.dim))]
        for inc in self.increments:
            out.append(out[-1] + inc)
        return out

    @classmethod
    def zero(cls, dim: int, times: Sequence[float]) -> "DbmPath":
        times = _check_grid(times)
        return cls(dim, times, tuple(np.zeros((dim, dim)) for _ in range(len(times) - 1)))


def _check_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1 or times[0] != 0.0:
        raise ValueError("time grid must be one-dimensional and start at 0")
    if np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly ascending")
    return times


def sample_dbm_path(dim: int, times: Sequence[float], rng: np.random.Generator) -> DbmPath:
    """Sample the increments of a symmetric matrix Brownian motion on ``times``."""
    times = _check_grid(times)
    incs = tuple(sample_goe(dim, rng, t=dt) for dt in np.diff(times))
    return DbmPath(dim, times, incs)


def write_matrix(path: str | Path, H: np.ndarray) -> None:
    """Dump ``H`` as: 8-byte magic, uint64 dim, then little-endian float64 row-major."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("expected a square matrix")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC + struct.pack("<Q", H.shape[0]))
        fh.write(np.ascontiguousarray(H).astype("<f8").tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:8] != MATRIX_MAGIC:
            raise ValueError(f"{path}: not a matrix dump")
        (dim,) = struct.unpack("<Q", header[8:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != dim * dim:
        raise ValueError(f"{path}: truncated payload ({data.size} of {dim * dim} values)")
    return data.reshape(dim, dim).astype(np.float64)
