"""Synthetic benchmark distributions with closed-form mutual information.

Every family pairs coordinate ``i`` of X with coordinate ``i`` of Y and
splits the target MI equally over ``min(dim_x, dim_y)`` pairs. Unpaired
coordinates are independent noise.

Per-pair ground truth:

* Gaussian-copula families: ``-0.5 * log(1 - rho**2)``; the half-cube and
  uniform-marginal variants apply elementwise monotone maps, which leave
  MI unchanged.
* smoothed uniform ``Y = X + eps * U``: ``eps / 2 - log(eps)`` for
  ``eps in (0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .errors import InfeasibleTargetError, ValidationError

FAMILIES = ("correlated_normal", "halfcube_normal", "correlated_uniform", "smoothed_uniform")
GAUSSIAN_FAMILIES = ("correlated_normal", "halfcube_normal", "correlated_uniform")

# per-pair MI of the smoothed uniform at its widest admissible noise (eps = 1)
SMOOTHED_UNIFORM_MIN_MI = 0.5


def gaussian_pair_mi(rho):
    return -0.5 * np.log1p(-np.square(rho))


def smoothed_uniform_pair_mi(eps):
    return 0.5 * eps - np.log(eps)


def halfcube(t):
    """Elementwise ``sign(t) * |t|**1.5``."""
    t = np.asarray(t, dtype=np.float64)
    return np.sign(t) * np.abs(t) ** 1.5


def halfcube_inverse(u):
    u = np.asarray(u, dtype=np.float64)
    return np.sign(u) * np.abs(u) ** (2.0 / 3.0)


def _n_pairs(dim_x, dim_y):
    return min(dim_x, dim_y)


def solve_params(family: str, dim: int | tuple[int, int], target_mi_nats: float) -> np.ndarray:
    """Per-pair dependence parameters (``rho`` or ``eps``) realising ``target_mi_nats``."""
    if family not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}")
    dim_x, dim_y = (dim, dim) if np.isscalar(dim) else dim
    if min(dim_x, dim_y) < 1:
        raise ValidationError("dimensions must be >= 1")
    if not target_mi_nats >= 0 or not np.isfinite(target_mi_nats):
        raise ValidationError("target MI must be a finite non-negative number")
    pairs = _n_pairs(dim_x, dim_y)
    per_pair = target_mi_nats / pairs
    if family in GAUSSIAN_FAMILIES:
        rho = np.sqrt(-np.expm1(-2.0 * per_pair))
        return np.full(pairs, rho)
    if per_pair < SMOOTHED_UNIFORM_MIN_MI:
        raise InfeasibleTargetError(
            f"smoothed_uniform needs at least {SMOOTHED_UNIFORM_MIN_MI} nats per pair, "
            f"asked for {per_pair:.6g} ({target_mi_nats} over {pairs} pairs)"
        )
    if per_pair == SMOOTHED_UNIFORM_MIN_MI:
        return np.ones(pairs)
    # the pair MI is strictly decreasing on (0, 1]
    eps = brentq(lambda e: smoothed_uniform_pair_mi(e) - per_pair,
                 np.exp(-per_pair - 1.0), 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                 maxiter=500)
    return np.full(pairs, eps)


@dataclass
class DatasetSpec:
    family: str
    dim_x: int
    dim_y: int
    target_mi_nats: float
    derived_params: np.ndarray = field(default=None, repr=False)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        if self.derived_params is None:
            self.derived_params = solve_params(self.family, (self.dim_x, self.dim_y),
                                               self.target_mi_nats)
        self.derived_params = np.asarray(self.derived_params, dtype=np.float64)
        if self.derived_params.shape != (_n_pairs(self.dim_x, self.dim_y),):
            raise ValidationError("derived_params must hold one value per coordinate pair")
        p = self.derived_params
        if self.family in GAUSSIAN_FAMILIES and not np.all(np.abs(p) < 1.0):
            raise ValidationError("correlations must lie strictly inside (-1, 1)")
        if self.family == "smoothed_uniform" and not np.all((p > 0.0) & (p <= 1.0)):
            raise ValidationError("smoothing widths must lie in (0, 1]")

    @classmethod
    def from_params(cls, family, dim_x, dim_y, params, seed=0) -> "DatasetSpec":
        """Build a spec from explicit per-pair parameters instead of a target."""
        params = np.broadcast_to(np.asarray(params, dtype=np.float64),
                                 (_n_pairs(dim_x, dim_y),)).copy()
        spec = cls(family, dim_x, dim_y, 0.0, params, seed)
        spec.target_mi_nats = ground_truth_mi(spec)
        return spec


def ground_truth_mi(spec: DatasetSpec) -> float:
    """Analytic I(X; Y) in nats reconstructed from the per-pair parameters."""
    p = spec.derived_params
    if spec.family in GAUSSIAN_FAMILIES:
        return float(np.sum(gaussian_pair_mi(p)))
    return float(np.sum(smoothed_uniform_pair_mi(p)))


def sample(spec: DatasetSpec, n: int, rng=None) -> np.ndarray:
    """Draw ``n`` rows laid out as ``[x (dim_x columns), y (dim_y columns)]``."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    dx, dy = spec.dim_x, spec.dim_y
    pairs = _n_pairs(dx, dy)
    p = spec.derived_params

    if spec.family == "smoothed_uniform":
        x = rng.uniform(0.0, 1.0, size=(n, dx))
        y = rng.uniform(0.0, 1.0, size=(n, dy))
        y[:, :pairs] = x[:, :pairs] + p * rng.uniform(0.0, 1.0, size=(n, pairs))
        return np.hstack([x, y])

    x = rng.standard_normal((n, dx))
    noise = rng.standard_normal((n, dy))
    y = noise.copy()
    y[:, :pairs] = p * x[:, :pairs] + np.sqrt(1.0 - p * p) * noise[:, :pairs]
    z = np.hstack([x, y])
    if spec.family == "halfcube_normal":
        return halfcube(z)
    if spec.family == "correlated_uniform":
        return ndtr(z)
    return z
