"""Hessian calibration: accumulate Gram sums from activation batches and
finalize them into the second-order state the quantizer consumes.

The finalized state bundles the dampened Hessian, its inverse, the upper
Cholesky factor of the inverse, the inverse diagonals, and the clustering
weights ``clamp(diag(Hinv))**(-p)`` that make grid learning sensitive to
inverse-diagonal outliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import linalg
from .errors import DataError
from .linalg import CholeskyFactor, SymMatrix

# Clamp on inverse diagonals before raising to -p: with p=4 a 1e-12
# diagonal would send the weight to 1e48 and overflow downstream sums.
INV_DIAG_CLAMP = 1e-10

# Absolute dampening floor for degenerate (all-zero-activation) Hessians.
ABS_DAMPENING_FLOOR = 1e-6

DEFAULT_DAMPENING = 0.01
DEFAULT_OUTLIER_STRENGTH = 4.0


@dataclass(frozen=True)
class CalibrationBatch:
    """One batch of layer-input activations, features x tokens."""

    layer_id: str
    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(
                f"calibration batch for {self.layer_id!r} must be a nonempty "
                f"features x tokens matrix, got shape {x.shape}"
            )
        object.__setattr__(self, "x", x)

    @property
    def features(self) -> int:
        return self.x.shape[0]

    @property
    def tokens(self) -> int:
        return self.x.shape[1]


@dataclass
class HessianAccumulator:
    """Running sum of per-batch Gram matrices plus a token counter.

    An empty accumulator adopts the feature dimension of its first batch.
    """

    dim: Optional[int] = None
    gram_sum: Optional[np.ndarray] = None
    token_count: int = 0

    def is_empty(self) -> bool:
        return self.dim is None


@dataclass(frozen=True)
class HessianState:
    """Finalized second-order information for one layer."""

    h: SymMatrix  # dampened Hessian (the matrix actually inverted)
    hinv: SymMatrix
    chol: CholeskyFactor  # upper factor of hinv
    inv_diag: np.ndarray
    cluster_weights: np.ndarray
    outlier_strength: float
    damp: float
    token_count: int

    @property
    def dim(self) -> int:
        return self.h.dim


def accumulate(acc: HessianAccumulator, batch: CalibrationBatch) -> HessianAccumulator:
    """Fold one batch into the running Gram sum (in place; returns acc)."""
    gram = linalg.gram_from_inputs(np.asarray(batch.x, dtype=np.float64))
    if acc.is_empty():
        acc.dim = batch.features
        acc.gram_sum = gram.a.copy()
    else:
        if batch.features != acc.dim:
            raise DataError(
                f"batch feature dim {batch.features} does not match "
                f"accumulator dim {acc.dim}"
            )
        acc.gram_sum += gram.a
    acc.token_count += batch.tokens
    return acc


def merge_accumulators(parts: Iterable[HessianAccumulator]) -> HessianAccumulator:
    """Merge per-worker partial sums; callers pass parts in worker-id order
    so the float addition order (and thus the result) is reproducible."""
    merged = HessianAccumulator()
    for part in parts:
        if part.is_empty():
            continue
        if merged.is_empty():
            merged.dim = part.dim
            merged.gram_sum = part.gram_sum.copy()
        else:
            if part.dim != merged.dim:
                raise DataError(
                    f"cannot merge accumulators of dims {merged.dim} and {part.dim}"
                )
            merged.gram_sum += part.gram_sum
        merged.token_count += part.token_count
    return merged


def finalize(
    acc: HessianAccumulator,
    damp: float = DEFAULT_DAMPENING,
    outlier_strength: float = DEFAULT_OUTLIER_STRENGTH,
) -> HessianState:
    """Dampen, invert, factor, and derive clustering weights.

    If the accumulated diagonal is too small for relative dampening to
    help (mean below 1e-12), an absolute floor of 1e-6 is added instead so
    the inversion cannot abort on degenerate calibration data.
    """
    if acc.is_empty() or acc.token_count < 1:
        raise DataError("cannot finalize an empty accumulator")
    if outlier_strength < 0:
        raise DataError("outlier strength must be nonnegative")
    h = SymMatrix(acc.gram_sum.copy())
    avg_diag = float(np.mean(np.diag(h.a)))
    if damp > 0 and avg_diag < 1e-12:
        damped = linalg.add_absolute_dampening(h, ABS_DAMPENING_FLOOR)
    else:
        damped = linalg.dampen(h, damp)
    hinv = linalg.invert_pd(damped)
    chol = linalg.cholesky_upper(hinv)
    inv_diag = hinv.diag()
    cluster_weights = np.maximum(inv_diag, INV_DIAG_CLAMP) ** (-outlier_strength)
    return HessianState(
        h=damped,
        hinv=hinv,
        chol=chol,
        inv_diag=inv_diag,
        cluster_weights=cluster_weights,
        outlier_strength=outlier_strength,
        damp=damp,
        token_count=acc.token_count,
    )


def hessian_state_from_activations(
    x: np.ndarray,
    damp: float = DEFAULT_DAMPENING,
    outlier_strength: float = DEFAULT_OUTLIER_STRENGTH,
    layer_id: str = "layer",
) -> HessianState:
    """One-shot helper: accumulate a single activation matrix and finalize."""
    acc = accumulate(HessianAccumulator(), CalibrationBatch(layer_id, x))
    return finalize(acc, damp=damp, outlier_strength=outlier_strength)
