"""3D sphere Hough transform over (cx, cy, cz, r).

Every candidate point votes once per centre-grid triple, into the radius bin nearest to
its distance from that centre, provided the distance lies in ``[r_min, r_max]``. The
maximal bin is the estimated sphere.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from numba import jit

from .errors import ConfigError, NoConsensusError
from .frame_ingest import ObjectCloud

logger = logging.getLogger(__name__)

DENSE_LIMIT = 1 << 24
SPARSE_CHUNK = 256
_EPS = 1e-9
_WINDOW_SLACK = 1e-6
_NO_VOTES = np.empty(0, dtype=np.int64)


@dataclass(frozen=True)
class Sphere:
    cx: float
    cy: float
    cz: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"sphere radius must be positive, got {self.r}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)


@dataclass(frozen=True)
class HoughConfig:
    center_step: float = 0.005
    radius_step: float = 0.005
    r_min: float = 0.025
    r_max: float = 0.060
    center_margin: float = 0.060

    def __post_init__(self):
        for name in ("center_step", "radius_step", "r_min", "r_max", "center_margin"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.r_min < self.r_max:
            raise ConfigError(f"r_accept must satisfy r_min < r_max, got [{self.r_min}, {self.r_max}]")
        if self.radius_step > self.r_max - self.r_min + _EPS:
            raise ConfigError("radius_step exceeds the r_accept interval")
        if self.center_step > self.r_max - self.r_min + _EPS:
            raise ConfigError("center_step exceeds the r_accept interval")


@dataclass(frozen=True)
class SearchRange:
    """Grid values per axis: centre x, y, z and radius (all ascending)."""
    cx: np.ndarray
    cy: np.ndarray
    cz: np.ndarray
    r: np.ndarray

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (len(self.cx), len(self.cy), len(self.cz), len(self.r))

    @property
    def size(self) -> int:
        nx, ny, nz, nr = self.shape
        return nx * ny * nz * nr


def _grid(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(np.floor((hi - lo) / step + _EPS)) + 1
    return lo + step * np.arange(n, dtype=np.float64)


def search_range(points: ObjectCloud | np.ndarray, cfg: HoughConfig) -> SearchRange:
    pts = points.points if isinstance(points, ObjectCloud) else np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("search_range needs at least one point")
    lo = pts.min(axis=0) - cfg.center_margin
    hi = pts.max(axis=0) + cfg.center_margin
    axes = [_grid(lo[a], hi[a], cfg.center_step) for a in range(3)]
    return SearchRange(*axes, _grid(cfg.r_min, cfg.r_max, cfg.radius_step))


class HoughGrid:
    """4-D vote accumulator, dense up to 2**24 bins and sparse beyond."""

    def __init__(self, axes: SearchRange, flat_votes: Optional[np.ndarray] = None,
                 dense: Optional[bool] = None):
        self.axes = axes
        self.dense = axes.size <= DENSE_LIMIT if dense is None else dense
        if self.dense:
            self._votes = np.zeros(axes.size, dtype=np.int64)
            self._sparse = None
        else:
            self._votes = None
            self._sparse = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
        if flat_votes is not None and flat_votes.size:
            self._accumulate(flat_votes)

    def _accumulate(self, flat: np.ndarray) -> None:
        if self.dense:
            self._votes += np.bincount(flat, minlength=self.axes.size)
        else:
            idx, cnt = self._sparse
            merged, inverse = np.unique(np.concatenate([idx, flat]), return_inverse=True)
            weights = np.concatenate([cnt, np.ones(len(flat), dtype=np.int64)])
            self._sparse = (merged, np.bincount(inverse.ravel(), weights=weights).astype(np.int64))

    def _items(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.dense:
            idx = np.flatnonzero(self._votes)
            return idx, self._votes[idx]
        return self._sparse

    @property
    def votes(self) -> np.ndarray:
        """Dense (nx, ny, nz, nr) view of the accumulator."""
        if self.dense:
            return self._votes.reshape(self.axes.shape)
        full = np.zeros(self.axes.size, dtype=np.int64)
        idx, cnt = self._sparse
        full[idx] = cnt
        return full.reshape(self.axes.shape)

    def count(self, ix: int, iy: int, iz: int, ir: int) -> int:
        flat = int(np.ravel_multi_index((ix, iy, iz, ir), self.axes.shape))
        if self.dense:
            return int(self._votes[flat])
        idx, cnt = self._sparse
        pos = np.searchsorted(idx, flat)
        return int(cnt[pos]) if pos < len(idx) and idx[pos] == flat else 0

    def total(self) -> int:
        return int(self._items()[1].sum())

    def merge(self, other: "HoughGrid") -> "HoughGrid":
        """Bin-wise sum; associative and commutative."""
        if other.axes.shape != self.axes.shape:
            raise ValueError("cannot merge grids over different search ranges")
        out = HoughGrid(self.axes, dense=self.dense)
        if self.dense and other.dense:
            out._votes = self._votes + other._votes
            return out
        for grid in (self, other):
            idx, cnt = grid._items()
            if idx.size:
                out._accumulate(np.repeat(idx, cnt))
        return out

    __add__ = merge

    def __eq__(self, other) -> bool:
        if not isinstance(other, HoughGrid):
            return NotImplemented
        a_idx, a_cnt = self._items()
        b_idx, b_cnt = other._items()
        return (self.axes.shape == other.axes.shape
                and np.array_equal(a_idx, b_idx) and np.array_equal(a_cnt, b_cnt))


# --- voting kernel ---
@jit(nopython=True, cache=True)
def _first_at_least(grid, value):
    lo, hi = 0, grid.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if grid[mid] < value:
            lo = mid + 1
        else:
            hi = mid
    return lo


@jit(nopython=True, cache=True)
def _first_above(grid, value):
    lo, hi = 0, grid.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if grid[mid] <= value:
            lo = mid + 1
        else:
            hi = mid
    return lo


@jit(nopython=True, cache=True)
def _round_half_even(x):
    q = np.floor(x)
    d = x - q
    if d > 0.5 or (d == 0.5 and q % 2.0 == 1.0):
        q += 1.0
    return int(q)


@jit(nopython=True, nogil=True, cache=True)
def _hough_kernel(pts, cx, cy, cz, r_min, r_max, radius_step, nr, votes, flat_out):
    """Increment ``votes`` in place, or append flat bin indices to ``flat_out`` when
    ``votes`` is empty. Returns the number of indices appended."""
    ny = cy.shape[0]
    nz = cz.shape[0]
    emit = votes.shape[0] == 0
    dx2 = np.empty(cx.shape[0])
    dy2 = np.empty(ny)
    dz2 = np.empty(nz)
    n_out = 0
    for k in range(pts.shape[0]):
        px, py, pz = pts[k, 0], pts[k, 1], pts[k, 2]
        x0 = _first_at_least(cx, px - r_max - _WINDOW_SLACK)
        x1 = _first_above(cx, px + r_max + _WINDOW_SLACK)
        y0 = _first_at_least(cy, py - r_max - _WINDOW_SLACK)
        y1 = _first_above(cy, py + r_max + _WINDOW_SLACK)
        z0 = _first_at_least(cz, pz - r_max - _WINDOW_SLACK)
        z1 = _first_above(cz, pz + r_max + _WINDOW_SLACK)
        for ix in range(x0, x1):
            dx2[ix] = (px - cx[ix]) ** 2
        for iy in range(y0, y1):
            dy2[iy] = (py - cy[iy]) ** 2
        for iz in range(z0, z1):
            dz2[iz] = (pz - cz[iz]) ** 2
        for ix in range(x0, x1):
            for iy in range(y0, y1):
                dxy2 = dx2[ix] + dy2[iy]
                if math.sqrt(dxy2) > r_max:
                    continue
                # only centres inside the r_max ball around the point can vote
                h = math.sqrt(max(r_max * r_max - dxy2, 0.0)) + _WINDOW_SLACK
                za = max(z0, _first_at_least(cz, pz - h))
                zb = min(z1, _first_above(cz, pz + h))
                base = (ix * ny + iy) * nz
                for iz in range(za, zb):
                    r_est = math.sqrt(dxy2 + dz2[iz])
                    if r_est < r_min or r_est > r_max:
                        continue
                    ir = _round_half_even((r_est - r_min) / radius_step)
                    if ir >= nr:
                        ir = nr - 1
                    flat = (base + iz) * nr + ir
                    if emit:
                        flat_out[n_out] = flat
                        n_out += 1
                    else:
                        votes[flat] += 1
    return n_out


def _window_bound(pts: np.ndarray, axes: SearchRange, cfg: HoughConfig) -> int:
    """Upper bound on the votes ``pts`` can cast."""
    sizes = np.ones(len(pts), dtype=np.int64)
    for a, grid in enumerate((axes.cx, axes.cy, axes.cz)):
        lo = np.searchsorted(grid, pts[:, a] - cfg.r_max - _WINDOW_SLACK, side="left")
        hi = np.searchsorted(grid, pts[:, a] + cfg.r_max + _WINDOW_SLACK, side="right")
        sizes *= np.maximum(hi - lo, 0)
    return int(sizes.sum())


def _vote_chunk(pts: np.ndarray, axes: SearchRange, cfg: HoughConfig) -> HoughGrid:
    grid = HoughGrid(axes)
    if len(pts) == 0:
        return grid
    args = (np.ascontiguousarray(pts, dtype=np.float64),
            np.ascontiguousarray(axes.cx, dtype=np.float64),
            np.ascontiguousarray(axes.cy, dtype=np.float64),
            np.ascontiguousarray(axes.cz, dtype=np.float64),
            float(cfg.r_min), float(cfg.r_max), float(cfg.radius_step), len(axes.r))
    if grid.dense:
        _hough_kernel(*args, grid._votes, _NO_VOTES)
        return grid
    for start in range(0, len(pts), SPARSE_CHUNK):
        chunk = args[0][start:start + SPARSE_CHUNK]
        buf = np.empty(_window_bound(chunk, axes, cfg), dtype=np.int64)
        n = _hough_kernel(chunk, *args[1:], _NO_VOTES, buf)
        grid._accumulate(buf[:n])
    return grid


def vote(points: ObjectCloud | np.ndarray, cfg: HoughConfig,
         axes: Optional[SearchRange] = None, workers: int = 1) -> HoughGrid:
    """Accumulate votes of every point; the result is independent of point order and
    of how the points are split across ``workers``."""
    pts = points.points if isinstance(points, ObjectCloud) else np.asarray(points, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if axes is None:
        if len(pts) == 0:
            # no points: an empty grid over the radius axis only
            r = _grid(cfg.r_min, cfg.r_max, cfg.radius_step)
            empty = np.zeros(1)
            return HoughGrid(SearchRange(empty, empty, empty, r))
        axes = search_range(pts, cfg)
    if workers <= 1 or len(pts) < 2 * workers:
        return _vote_chunk(pts, axes, cfg)
    chunks = np.array_split(pts, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        grids = list(pool.map(lambda c: _vote_chunk(c, axes, cfg), chunks))
    total = grids[0]
    for g in grids[1:]:
        total = total.merge(g)
    return total


def estimate_sphere(grid: HoughGrid) -> Tuple[Sphere, int]:
    """Bin-centre sphere of the maximal bin.

    Ties go to the smallest radius, then the lexicographically smallest centre.
    """
    idx, cnt = grid._items()
    if idx.size == 0 or cnt.max() <= 0:
        raise NoConsensusError("Hough grid holds no votes")
    best = int(cnt.max())
    winners = idx[cnt == best]
    ix, iy, iz, ir = np.unravel_index(winners, grid.axes.shape)
    pick = np.lexsort((iz, iy, ix, ir))[0]
    a = grid.axes
    sphere = Sphere(float(a.cx[ix[pick]]), float(a.cy[iy[pick]]), float(a.cz[iz[pick]]),
                    float(a.r[ir[pick]]))
    logger.debug("sphere %s with %d votes (%d tied bins)", sphere, best, len(winners))
    return sphere, best


def fit_sphere(points: ObjectCloud | np.ndarray, cfg: HoughConfig,
               workers: int = 1) -> Tuple[Sphere, int]:
    return estimate_sphere(vote(points, cfg, workers=workers))


__all__ = [
    "Sphere",
    "HoughConfig",
    "SearchRange",
    "HoughGrid",
    "search_range",
    "vote",
    "estimate_sphere",
    "fit_sphere",
]
