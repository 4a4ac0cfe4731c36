"""Low-rank tiles: truncated QR with column pivoting and per-vector precision."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

U_MID = 2.0**-24          # IEEE single
U_LOW = 2.0**-11          # IEEE half
FULL, MID, LOW = 0, 1, 2
WEIGHTS = {FULL: 1.0, MID: 0.5, LOW: 0.25}          # 64 / 32 / 16-bit reals
WEIGHTS_ALT = {FULL: 1.0, MID: 0.75, LOW: 0.5}      # 32 / 24 / 16-bit reals


@dataclass(eq=False)
class Tile:
    """Dense block or low-rank pair with ``tile ~= X @ Y.T``.

    ``sigma`` holds the per-vector magnitude estimates (row norms of the
    triangular QR factor) and ``tags`` the storage precision of each vector.
    Demoted vectors are kept in their storage format and promoted on use.
    """

    shape: tuple
    dense: Optional[np.ndarray] = None
    X: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    tags: Optional[np.ndarray] = None
    _stored: Optional[dict] = None

    @property
    def is_lowrank(self) -> bool:
        return self.dense is None

    @property
    def rank(self) -> int:
        return min(self.shape) if self.dense is not None else self.sigma.size

    @property
    def entries(self) -> int:
        m, n = self.shape
        return m * n if self.dense is not None else self.rank * (m + n)

    def weighted_entries(self, weights=WEIGHTS) -> float:
        if self.dense is not None:
            return float(self.entries)
        m, n = self.shape
        tags = self.tags if self.tags is not None else np.zeros(self.rank, dtype=int)
        return float(sum(weights[int(t)] for t in tags) * (m + n))

    def factors(self):
        """(X, Y) in double complex, promoting demoted vectors."""
        if self._stored is None:
            return self.X, self.Y
        return _promote(self._stored, 0), _promote(self._stored, 1)

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        X, Y = self.factors()
        return X @ Y.T

    def nbytes(self) -> int:
        if self.dense is not None:
            return self.dense.size * 16
        if self._stored is None:
            return (self.X.size + self.Y.size) * 16
        return sum(a.nbytes for part in self._stored["parts"] for a in part if a is not None)


def max_admissible_rank(m: int, n: int) -> int:
    """Largest rank for which X Y^T is smaller than the dense tile."""
    return (m * n - 1) // (m + n)


def compression_flops(m: int, n: int, k: int) -> float:
    """Truncated QRCP cost; the sweep stops one step past the kept rank.

    An incompressible tile is detected once the rank passes the admissible
    maximum, so it is charged that many steps rather than min(m, n).
    """
    steps = min(k + 1, max_admissible_rank(m, n) + 1, min(m, n))
    return 4.0 * m * n * steps


def compress_tile(tile: np.ndarray, eps: float) -> Tile:
    """Truncated QR with column pivoting, ``||tile - X Y^T||_F <= eps ||tile||_F``.

    The tile stays dense when the low-rank form would not save storage.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    tile = np.asarray(tile)
    m, n = tile.shape
    norm = np.linalg.norm(tile)
    if norm == 0.0:
        return Tile((m, n), X=np.zeros((m, 0), tile.dtype), Y=np.zeros((n, 0), tile.dtype),
                    sigma=np.zeros(0))
    Q, R, P = sla.qr(tile, mode="economic", pivoting=True, check_finite=False)
    rown = np.linalg.norm(R, axis=1)
    # tail[k] = ||R[k:, k:]||_F
    tail = np.sqrt(np.concatenate([np.cumsum((rown**2)[::-1])[::-1], [0.0]]))
    k = int(np.argmax(tail <= eps * norm))
    if k * (m + n) >= m * n:
        return Tile((m, n), dense=np.array(tile, copy=True))
    Yt = np.empty((k, n), dtype=R.dtype)
    Yt[:, P] = R[:k]
    return Tile((m, n), X=Q[:, :k].copy(), Y=Yt.T.copy(), sigma=rown[:k].copy())


def precision_tags(sigma, eps: float, u_mid: float = U_MID, u_low: float = U_LOW) -> np.ndarray:
    """full if s/s1 > eps/u_mid, mid if above eps/u_low, low otherwise."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.size == 0:
        return np.zeros(0, dtype=int)
    ratio = sigma / sigma.max() if sigma.max() > 0 else np.zeros_like(sigma)
    tags = np.full(sigma.size, LOW, dtype=int)
    tags[ratio > eps / u_low] = MID
    tags[ratio > eps / u_mid] = FULL
    return tags


def _store(v, tag):
    if tag == FULL:
        return (v, None, None)
    s = max(np.abs(v.real).max(initial=0.0), np.abs(v.imag).max(initial=0.0))
    s = s if s > 0 else 1.0
    if tag == MID:
        return (None, (v / s).astype(np.complex64), np.float64(s))
    pair = np.stack([(v.real / s).astype(np.float16), (v.imag / s).astype(np.float16)], axis=-1)
    return (None, pair, np.float64(s))


def _promote(stored, side):
    cols = []
    for full, low, s in stored["cols"][side]:
        if full is not None:
            cols.append(full)
        elif low.dtype == np.complex64:
            cols.append(low.astype(np.complex128) * s)
        else:
            cols.append((low[..., 0].astype(np.float64) + 1j * low[..., 1].astype(np.float64)) * s)
    n = stored["shape"][side]
    return np.stack(cols, axis=1) if cols else np.zeros((n, 0), dtype=complex)


def demote_precision(tile: Tile, eps: float, u_mid: float = U_MID, u_low: float = U_LOW) -> Tile:
    """Tag each low-rank vector by its relative magnitude and store it accordingly.

    Dense tiles are returned unchanged.  The X and Y columns of a demoted
    vector are both rounded, each with its own double-precision scale.
    """
    if not tile.is_lowrank or tile.rank == 0:
        return tile
    tags = precision_tags(tile.sigma, eps, u_mid, u_low)
    xs = [_store(tile.X[:, i], t) for i, t in enumerate(tags)]
    ys = [_store(tile.Y[:, i], t) for i, t in enumerate(tags)]
    stored = {"cols": (xs, ys), "shape": tile.shape,
              "parts": [p for pair in zip(xs, ys) for p in pair]}
    return Tile(tile.shape, X=None, Y=None, sigma=tile.sigma, tags=tags, _stored=stored)
