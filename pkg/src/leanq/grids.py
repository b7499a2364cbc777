"""Quantization grids: min-max affine, searched loss-aware affine, and
clustered loss-aware non-uniform codebooks.

A grid maps a real weight to one of 2^bits representable values. The
min-max affine grid spans the exact dynamic range of a weight group. The
loss-aware variants instead minimize a weighted squared error where each
weight's contribution is scaled by its clustering weight (derived from
inverse-Hessian diagonals), so weights whose quantization error hurts the
layer loss most get placed closest to grid points:

  * affine: enumerate scale/zero-point candidates obtained by shrinking
    the min-max range from both ends in discrete steps, keep the best;
  * non-uniform: weighted Lloyd clustering of a row's weights, seeded
    with uniformly spaced levels over the dynamic range.

Rounding is half-to-even everywhere (np.rint) so packed artifacts are
reproducible and rounding bias cancels. Nearest-level ties in non-uniform
quantization break toward the lower level.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._kernels import search_affine_range
from .errors import DataError
from .parallel import resolve_workers

DEGENERATE_SCALE = 1e-12
LEVEL_JITTER = 1e-12

AFFINE_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class AffineGridParams:
    """Evenly spaced grid: value = (code - zero) * scale, code in [0, 2^bits - 1]."""

    scale: float
    zero: int
    bits: int

    def __post_init__(self):
        if self.bits not in AFFINE_BITS:
            raise DataError(f"affine bits must be one of {AFFINE_BITS}, got {self.bits}")
        if not self.scale > 0:
            raise DataError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero <= self.maxq:
            raise DataError(f"zero-point {self.zero} outside [0, {self.maxq}]")

    @property
    def maxq(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class NonUniformGrid:
    """Sorted codebook of 2^bits levels; weights map to the nearest level."""

    levels: np.ndarray
    bits: int

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        if self.bits < 1:
            raise DataError(f"bits must be >= 1, got {self.bits}")
        if levels.ndim != 1 or levels.shape[0] != (1 << self.bits):
            raise DataError(
                f"expected {1 << self.bits} levels for {self.bits}-bit grid, "
                f"got shape {levels.shape}"
            )
        if np.any(np.diff(levels) <= 0):
            raise DataError("levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)


@dataclass(frozen=True)
class GridSearchConfig:
    """Granularity of the affine search: the dynamic range is cut into
    `steps` partitions and each end may shrink by up to steps/2 - 1 of them."""

    steps: int = 2048

    def __post_init__(self):
        if self.steps < 2 or self.steps % 2 != 0:
            raise DataError(f"search steps must be an even integer >= 2, got {self.steps}")


@dataclass(frozen=True)
class LloydResult:
    """Outcome of weighted k-means: the grid, its objective, and the
    per-iteration objective trace (index 0 is the initial grid)."""

    grid: NonUniformGrid
    objective: float
    objective_trace: np.ndarray
    n_iter: int


def _as_weight_vector(w, name: str = "weights") -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64).ravel()
    if arr.size < 1:
        raise DataError(f"{name} must contain at least one value")
    return arr


def ensure_strictly_increasing(levels: np.ndarray, jitter: float = LEVEL_JITTER) -> np.ndarray:
    """Sort and bump duplicate levels by multiples of the jitter so every
    code denotes a distinct value (bit packing needs distinct indices)."""
    out = np.sort(np.asarray(levels, dtype=np.float64))
    for i in range(1, out.size):
        if out[i] <= out[i - 1]:
            bumped = out[i - 1] + jitter
            if bumped <= out[i - 1]:  # jitter lost to rounding at large magnitudes
                bumped = np.nextafter(out[i - 1], np.inf)
            out[i] = bumped
    return out


def minmax_affine(w, bits: int) -> AffineGridParams:
    """Affine grid spanning [min(w), max(w)] exactly."""
    arr = _as_weight_vector(w)
    wmin = float(arr.min())
    wmax = float(arr.max())
    maxq = (1 << bits) - 1
    if wmax == wmin:
        return AffineGridParams(scale=DEGENERATE_SCALE, zero=0, bits=bits)
    scale = (wmax - wmin) / maxq
    zero = int(np.clip(-np.rint(wmin / scale), 0, maxq))
    return AffineGridParams(scale=scale, zero=zero, bits=bits)


def quant_aff(w, g: AffineGridParams):
    """Quantize against an affine grid. Returns (code, value); arrays in,
    arrays out."""
    arr = np.asarray(w, dtype=np.float64)
    codes = np.clip(np.rint(arr / g.scale) + g.zero, 0, g.maxq)
    values = (codes - g.zero) * g.scale
    if arr.ndim == 0:
        return int(codes), float(values)
    return codes.astype(np.int64), values


def quant_nu(w, g: NonUniformGrid):
    """Quantize against a codebook; midpoint ties go to the lower level.
    Returns (index, value); arrays in, arrays out."""
    arr = np.asarray(w, dtype=np.float64)
    idx = nearest_level_index(arr, g.levels)
    values = g.levels[idx]
    if arr.ndim == 0:
        return int(idx), float(values)
    return idx, values


def nearest_level_index(values: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the nearest level for each value; equal distances pick the
    lower index. `levels` must be sorted ascending (duplicates allowed)."""
    arr = np.asarray(values, dtype=np.float64)
    dist = np.abs(arr[..., None] - levels)
    return np.argmin(dist, axis=-1)  # argmin takes the first (lower) on ties


def uniform_init(w, bits: int) -> np.ndarray:
    """Uniformly spaced initial levels over the dynamic range of w; a zero
    range yields copies of min(w) jittered into distinct values."""
    arr = _as_weight_vector(w)
    n_levels = 1 << bits
    wmin = float(arr.min())
    wmax = float(arr.max())
    t = np.arange(n_levels, dtype=np.float64)
    if wmax == wmin:
        return wmin + t * LEVEL_JITTER
    return wmin + (wmax - wmin) / (n_levels - 1) * t


def grid_objective(w, cw, grid) -> float:
    """Weighted squared quantization error of w against the grid."""
    arr = _as_weight_vector(w)
    weights = _as_weight_vector(cw, "cluster weights")
    if arr.shape != weights.shape:
        raise DataError(f"length mismatch: {arr.shape} weights vs {weights.shape} cluster weights")
    if isinstance(grid, AffineGridParams):
        _, values = quant_aff(arr, grid)
    elif isinstance(grid, NonUniformGrid):
        _, values = quant_nu(arr, grid)
    else:
        raise DataError(f"unsupported grid type: {type(grid).__name__}")
    return float(np.sum(weights * (values - arr) ** 2))


def _levels_objective(w, cw, levels) -> float:
    """Objective against a raw (possibly duplicate-valued) level vector."""
    idx = nearest_level_index(w, levels)
    return float(np.sum(cw * (levels[idx] - w) ** 2))


def weighted_kmeans(
    w,
    cw,
    bits: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    init_levels: Optional[np.ndarray] = None,
) -> LloydResult:
    """Learn a non-uniform grid by weighted Lloyd iterations.

    Assignment maps each weight to its nearest level; the update step moves
    each level to the cluster-weighted mean of its assigned weights. Empty
    clusters are reseeded at the weight with the largest weighted squared
    error to its current level, so the codebook always keeps 2^bits levels.
    Iteration stops at max_iter or when the relative objective improvement
    drops below tol.
    """
    arr = _as_weight_vector(w)
    weights = _as_weight_vector(cw, "cluster weights")
    if arr.shape != weights.shape:
        raise DataError(f"length mismatch: {arr.size} weights vs {weights.size} cluster weights")
    if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
        raise DataError("cluster weights must be positive and finite")

    n_levels = 1 << bits
    if init_levels is None:
        levels = uniform_init(arr, bits)
    else:
        levels = np.sort(np.asarray(init_levels, dtype=np.float64))
        if levels.size != n_levels:
            raise DataError(f"expected {n_levels} initial levels, got {levels.size}")

    trace = [_levels_objective(arr, weights, levels)]
    n_iter = 0
    for _ in range(max_iter):
        prev = trace[-1]
        if prev == 0.0:
            break
        assign = nearest_level_index(arr, levels)
        wsum = np.bincount(assign, weights=weights, minlength=n_levels)
        vsum = np.bincount(assign, weights=weights * arr, minlength=n_levels)
        nonempty = wsum > 0
        new_levels = levels.copy()
        new_levels[nonempty] = vsum[nonempty] / wsum[nonempty]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            err = weights * (arr - new_levels[assign]) ** 2
            for lvl in empty:
                worst = int(np.argmax(err))
                new_levels[lvl] = arr[worst]
                err[worst] = -1.0  # claimed; the next empty level picks elsewhere
        levels = np.sort(new_levels)
        n_iter += 1
        cur = _levels_objective(arr, weights, levels)
        trace.append(cur)
        if cur == 0.0 or (prev - cur) < tol * prev:
            break

    final_levels = ensure_strictly_increasing(levels)
    grid = NonUniformGrid(levels=final_levels, bits=bits)
    return LloydResult(
        grid=grid,
        objective=grid_objective(arr, weights, grid),
        objective_trace=np.asarray(trace),
        n_iter=n_iter,
    )


def kmeanspp_init(w, cw, bits: int, seed: int) -> np.ndarray:
    """Distance-squared sampling of initial levels, with cluster weights
    multiplied into the sampling probabilities. Deterministic per seed."""
    arr = _as_weight_vector(w)
    weights = _as_weight_vector(cw, "cluster weights")
    if arr.shape != weights.shape:
        raise DataError(f"length mismatch: {arr.size} weights vs {weights.size} cluster weights")
    rng = np.random.default_rng(seed)
    n_levels = 1 << bits
    probs = weights / weights.sum()
    centers = [float(arr[rng.choice(arr.size, p=probs)])]
    d2 = (arr - centers[0]) ** 2
    while len(centers) < n_levels:
        mass = weights * d2
        total = mass.sum()
        if total <= 0.0:
            # every distinct value is already a center; pad with copies
            centers.append(float(arr.min()))
            continue
        pick = rng.choice(arr.size, p=mass / total)
        centers.append(float(arr[pick]))
        d2 = np.minimum(d2, (arr - arr[pick]) ** 2)
    return np.sort(np.asarray(centers))


def _reduce_candidates(parts: Sequence[tuple[float, int, int]]) -> tuple[float, int, int]:
    """Combine per-chunk (error, t_min, t_max) triples. Chunks arrive in
    ascending t_min order, so strict less-than keeps the lexicographically
    smallest winner among ties."""
    best = (np.inf, -1, -1)
    for err, t_min, t_max in parts:
        if t_min >= 0 and err < best[0]:
            best = (err, t_min, t_max)
    return best


def affine_grid_search(
    w,
    cw,
    bits: int,
    cfg: GridSearchConfig = GridSearchConfig(),
    workers: int = 1,
) -> AffineGridParams:
    """Search scale/zero-point candidates formed by shrinking the min-max
    range of w from both ends in steps of range/steps.

    All candidates are scored with the cluster-weighted squared error;
    ties break to the lexicographically smallest (t_min, t_max). With
    workers > 1 the t_min axis is partitioned; results are identical to
    the serial scan for any worker count.
    """
    arr = _as_weight_vector(w)
    weights = _as_weight_vector(cw, "cluster weights")
    if arr.shape != weights.shape:
        raise DataError(f"length mismatch: {arr.size} weights vs {weights.size} cluster weights")
    wmin = float(arr.min())
    wmax = float(arr.max())
    if wmax == wmin:
        return minmax_affine(arr, bits)
    maxq = float((1 << bits) - 1)
    t_half = cfg.steps // 2
    workers = resolve_workers(workers)

    if workers <= 1 or t_half < 2 * workers:
        parts = [search_affine_range(arr, weights, maxq, wmin, wmax, t_half, cfg.steps, 0, t_half)]
    else:
        bounds = np.linspace(0, t_half, workers + 1, dtype=np.int64)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    search_affine_range,
                    arr, weights, maxq, wmin, wmax, t_half, cfg.steps,
                    int(bounds[k]), int(bounds[k + 1]),
                )
                for k in range(workers)
            ]
            parts = [f.result() for f in futures]

    _, t_min, t_max = _reduce_candidates(parts)
    if t_min < 0:
        return minmax_affine(arr, bits)
    return affine_params_from_steps(wmin, wmax, bits, cfg.steps, t_min, t_max)


def affine_params_from_steps(
    wmin: float, wmax: float, bits: int, t_steps: int, t_min: int, t_max: int
) -> AffineGridParams:
    """Materialize the (scale, zero) pair a (t_min, t_max) candidate denotes.

    Uses the same expressions as the search kernel so the returned params
    are bit-identical to the scored candidate.
    """
    rng = wmax - wmin
    maxq = float((1 << bits) - 1)
    lo = wmin + (t_min * rng) / t_steps
    hi = wmax - (t_max * rng) / t_steps
    scale = (hi - lo) / maxq
    zero = float(np.clip(-np.rint(lo / scale), 0.0, maxq))
    return AffineGridParams(scale=scale, zero=int(zero), bits=bits)


def affine_grid_search_many(
    groups: Sequence[tuple[np.ndarray, np.ndarray]],
    bits: int,
    cfg: GridSearchConfig = GridSearchConfig(),
    workers: int = 1,
) -> list[AffineGridParams]:
    """Run the affine search over many weight groups, one task per group.

    Groups are independent, so results are gathered in input order and do
    not depend on the worker count.
    """
    workers = resolve_workers(workers)
    if workers <= 1 or len(groups) <= 1:
        return [affine_grid_search(w, cw, bits, cfg) for w, cw in groups]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(affine_grid_search, w, cw, bits, cfg) for w, cw in groups]
        return [f.result() for f in futures]
