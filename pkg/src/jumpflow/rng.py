"""Counter-based random streams keyed by (seed, path, index, purpose).

Every random number used by the simulators is a pure function of the master
seed and a counter ``(path, index, tag, sub)``.  Paths therefore own
independent streams, and results do not depend on how paths are chunked or
scheduled across threads.

The cipher is Philox4x64-10.  Contiguous path ranges are generated with
numpy's C implementation; arbitrary subsets go through a vectorized numpy
port that produces bit-identical output.
"""
from __future__ import annotations

import enum

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_LANES = 4

STREAM_RULE = "philox4x64-10:(path//4+1, index, tag, sub)[path%4]"


class Tag(enum.IntEnum):
    """Purpose tags; each tag addresses a disjoint family of counters."""

    GAUSSIAN = 1
    CLOCK = 2
    MARK = 3
    THINNING = 4
    TILT = 5
    INIT = 6
    INIT_SMOOTH = 7
    PROBE = 8


def _mulhilo(a, b):
    a_lo, a_hi = a & _LO32, a >> _S32
    b_lo, b_hi = b & _LO32, b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    carry = ((ll >> _S32) + (lh & _LO32) + (hl & _LO32)) >> _S32
    hi = hh + (lh >> _S32) + (hl >> _S32) + carry
    return hi, a * b


def philox4x64(counter, key, rounds: int = 10) -> np.ndarray:
    """Vectorized Philox4x64 block function.

    ``counter`` has shape (..., 4) and ``key`` shape (2,); returns (..., 4)
    uint64 words.
    """
    c = np.asarray(counter, dtype=np.uint64)
    c0, c1, c2, c3 = (c[..., i].copy() for i in range(4))
    k0, k1 = np.uint64(key[0]), np.uint64(key[1])
    with np.errstate(over="ignore"):
        for r in range(rounds):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


def _to_unit(raw: np.ndarray) -> np.ndarray:
    # 53 random bits, centred in their cell: strictly inside (0, 1)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


class PathStreams:
    """Per-path random streams derived from a master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.key = np.random.SeedSequence(self.seed).generate_state(2, dtype=np.uint64)

    def raw(self, paths, index, tag: int, sub=0) -> np.ndarray:
        """One uint64 per entry of ``paths`` at counter (index, tag, sub)."""
        paths = np.asarray(paths, dtype=np.int64)
        if paths.size == 0:
            return np.empty(0, dtype=np.uint64)
        if np.ndim(index) == 0 and np.ndim(sub) == 0 and _is_contiguous(paths):
            return self._bulk(int(paths[0]), paths.size, int(index), int(tag), int(sub))
        index, sub = np.broadcast_to(index, paths.shape), np.broadcast_to(sub, paths.shape)
        ctr = np.empty(paths.shape + (4,), dtype=np.uint64)
        ctr[..., 0] = (paths // _LANES + 1).astype(np.uint64)
        ctr[..., 1] = np.asarray(index, dtype=np.int64).astype(np.uint64)
        ctr[..., 2] = np.uint64(int(tag))
        ctr[..., 3] = np.asarray(sub, dtype=np.int64).astype(np.uint64)
        words = philox4x64(ctr, self.key)
        return np.take_along_axis(words, (paths % _LANES)[..., None], axis=-1)[..., 0]

    def _bulk(self, first: int, n: int, index: int, tag: int, sub: int) -> np.ndarray:
        b0 = first // _LANES
        nblocks = (first + n - 1) // _LANES - b0 + 1
        # numpy increments the counter before each block, so start one below
        bg = np.random.Philox(
            key=self.key, counter=np.array([b0, index, tag, sub], dtype=np.uint64)
        )
        out = bg.random_raw(nblocks * _LANES)
        start = first - b0 * _LANES
        return out[start : start + n]

    def uniform(self, paths, index, tag: int, sub=0) -> np.ndarray:
        return _to_unit(self.raw(paths, index, tag, sub))

    def uniform_many(self, requests) -> list:
        """Several (paths, index, tag, sub) requests served by one cipher call."""
        requests = [
            tuple(np.broadcast_to(np.asarray(v, dtype=np.int64), np.shape(r[0])) for v in r)
            for r in ((req[0], req[1], req[2], req[3] if len(req) > 3 else 0) for req in requests)
        ]
        sizes = [r[0].size for r in requests]
        cat = [np.concatenate([r[i].reshape(-1) for r in requests]) for i in range(4)]
        if cat[0].size == 0:
            return [np.empty(0) for _ in requests]
        ctr = np.empty((cat[0].size, 4), dtype=np.uint64)
        ctr[:, 0] = (cat[0] // _LANES + 1).astype(np.uint64)
        ctr[:, 1] = cat[1].astype(np.uint64)
        ctr[:, 2] = cat[2].astype(np.uint64)
        ctr[:, 3] = cat[3].astype(np.uint64)
        words = philox4x64(ctr, self.key)
        raw = words[np.arange(cat[0].size), cat[0] % _LANES]
        return np.split(_to_unit(raw), np.cumsum(sizes)[:-1])

    def normal(self, paths, index, tag: int, sub=0) -> np.ndarray:
        return ndtri(self.uniform(paths, index, tag, sub))

    def exponential(self, paths, index, tag: int, sub=0) -> np.ndarray:
        return -np.log(self.uniform(paths, index, tag, sub))

    def normal_vectors(self, paths, index, tag: int, dim: int, sub=0) -> np.ndarray:
        """(n, dim) standard normals; coordinate k uses sub-counter sub*dim + k."""
        sub = np.asarray(sub, dtype=np.int64)
        cols = [self.normal(paths, index, tag, sub * dim + k) for k in range(dim)]
        return np.stack(cols, axis=-1)

    def uniform_vectors(self, paths, index, tag: int, dim: int, sub=0) -> np.ndarray:
        sub = np.asarray(sub, dtype=np.int64)
        cols = [self.uniform(paths, index, tag, sub * dim + k) for k in range(dim)]
        return np.stack(cols, axis=-1)


def _is_contiguous(paths: np.ndarray) -> bool:
    if paths.ndim != 1:
        return False
    if paths.size == 1:
        return True
    return bool(paths[-1] - paths[0] == paths.size - 1 and np.all(np.diff(paths) == 1))
