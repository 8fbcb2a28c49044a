"""Independent cross-checks for the flow-based estimators.

* :func:`ksg_estimate` -- Kraskov k-nearest-neighbour MI (variant 1).
* :func:`quad_entropy_1d` -- differential entropy of a 1-D density by quadrature.
* :func:`bound_check` -- Monte-Carlo form of the divergence/score bound
  ``|E div eps| <= sqrt(E L^2 * E ||eps||^2)`` on a Gaussian path, with the
  Lipschitz constant replaced by the largest score norm seen in the sample.
  This is a sanity harness, not a proof: Gaussian scores are unbounded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import simpson
from scipy.spatial import cKDTree
from scipy.special import digamma, xlogy

from .diffkernel import divergence_exact, mlp_forward
from .errors import DegenerateSampleError, DimensionError, ValidationError
from .flowmatch import VelocityModel


def _as_2d(a):
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def ksg_estimate(x, y, k: int = 5) -> float:
    """KSG estimate of I(X; Y) in nats with max-norm neighbourhoods.

    ``psi(k) + psi(N) - < psi(n_x + 1) + psi(n_y + 1) >`` where ``n_x`` counts
    points strictly closer in x than the k-th joint neighbour.

    Raises :class:`DegenerateSampleError` when a k-th neighbour distance is
    zero (duplicate points) or the k-th neighbour sits at that distance in
    both marginals at once, which happens when y is a deterministic copy of x.
    """
    x = _as_2d(x)
    y = _as_2d(y)
    n = x.shape[0]
    if y.shape[0] != n:
        raise DimensionError(f"x has {n} rows, y has {y.shape[0]}")
    if not 1 <= k < n:
        raise ValidationError(f"k={k} must satisfy 1 <= k < N={n}")
    joint = np.hstack([x, y])
    dist, idx = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    eps = dist[:, k]
    zero = np.flatnonzero(eps == 0.0)
    if zero.size:
        raise DegenerateSampleError(f"zero k-NN distance at row {zero[0]} (duplicate points)")
    nb = idx[:, k]
    dxn = np.max(np.abs(x - x[nb]), axis=1)
    dyn = np.max(np.abs(y - y[nb]), axis=1)
    tied = np.flatnonzero((dxn == eps) & (dyn == eps))
    if tied.size > max(1, n // 100):
        raise DegenerateSampleError(
            f"k-th neighbour distance attained in both marginals at {tied.size} rows "
            f"(first: row {tied[0]}); y looks like a deterministic copy of x"
        )
    r = np.nextafter(eps, 0.0)
    nx = cKDTree(x).query_ball_point(x, r, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, r, p=np.inf, return_length=True) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


def quad_entropy_1d(density: Callable[[np.ndarray], np.ndarray], support: tuple[float, float],
                    n_nodes: int = 10_001, norm_tol: float = 1e-6) -> float:
    """``-integral p log p`` over ``support`` by composite Simpson quadrature."""
    lo, hi = support
    if not hi > lo:
        raise ValidationError("support must be a non-empty interval")
    if n_nodes < 3:
        raise ValidationError("need at least 3 nodes")
    s = np.linspace(lo, hi, n_nodes)
    p = np.asarray(density(s), dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError("density must be finite and non-negative on the support")
    mass = simpson(p, x=s)
    if abs(mass - 1.0) > norm_tol:
        raise ValidationError(f"density integrates to {mass:.9g} on the support, not 1")
    return float(-simpson(xlogy(p, p), x=s))


@dataclass
class GaussianPathSpec:
    """Isotropic Gaussian path ``X_t ~ N(mean_t(t), scale_t(t)^2 I)``."""

    mean_t: Callable[[np.ndarray], np.ndarray]
    scale_t: Callable[[np.ndarray], np.ndarray]
    dim: int = 1
    # filled from the evaluation sample when left as None
    score_bound_emp: Optional[float] = None

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(x, t, score)`` for ``n`` draws with ``t ~ U[0, 1]``."""
        t = rng.uniform(0.0, 1.0, size=n)
        mu = np.broadcast_to(np.asarray(self.mean_t(t), dtype=np.float64).reshape(n, -1), (n, self.dim))
        sd = np.asarray(self.scale_t(t), dtype=np.float64).reshape(n, 1)
        if np.any(sd <= 0):
            raise ValidationError("scale_t must be positive")
        x = mu + sd * rng.standard_normal((n, self.dim))
        return x, t, -(x - mu) / sd**2


def interpolation_path(mu0: float, s0: float, mu1: float, s1: float, dim: int = 1) -> GaussianPathSpec:
    """Marginal path of ``(1-t) X0 + t X1`` for independent Gaussian endpoints."""
    return GaussianPathSpec(
        mean_t=lambda t: (1.0 - t) * mu0 + t * mu1,
        scale_t=lambda t: np.sqrt((1.0 - t) ** 2 * s0**2 + t**2 * s1**2),
        dim=dim,
    )


def bound_check(path: GaussianPathSpec, field, n_mc: int, rng) -> tuple[float, float]:
    """Monte-Carlo ``(lhs, rhs)`` of the divergence bound along ``path``.

    ``field`` is a :class:`VelocityModel` (input ``[x, t]``) or a pair
    ``(fn, div_fn)`` of callables taking ``(x, t)``.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x, t, score = path.sample(n_mc, rng)
    if isinstance(field, VelocityModel):
        if field.d_spatial != path.dim or field.d_cond:
            raise DimensionError("field does not match the path dimension")
        inputs = field.inputs(x, t)
        values = mlp_forward(field.params, inputs)
        div = divergence_exact(field.params, inputs, field.d_spatial)
    else:
        fn, div_fn = field
        values = _as_2d(fn(x, t))
        div = np.asarray(div_fn(x, t), dtype=np.float64)
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(div))):
        raise ValidationError("field produced non-finite values")
    lip = path.score_bound_emp
    if lip is None:
        lip = float(np.max(np.linalg.norm(score, axis=1)))
    lhs = abs(float(np.mean(div)))
    rhs = float(np.sqrt(lip**2 * np.mean(np.sum(values**2, axis=1))))
    return lhs, rhs


def gaussian_entropy_gap_bound(mu0: float, s0: float, mu1: float, s1: float,
                               n: int, rng) -> tuple[float, float]:
    """``(|h(X1) - h(X0)|, L_emp * W2)`` for two 1-D Gaussians.

    Entropies and ``W2`` are analytic; ``L_emp`` is the largest score norm
    over ``n`` draws from each endpoint.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x0 = mu0 + s0 * rng.standard_normal(n)
    x1 = mu1 + s1 * rng.standard_normal(n)
    lip = max(np.max(np.abs(x0 - mu0)) / s0**2, np.max(np.abs(x1 - mu1)) / s1**2)
    w2 = np.hypot(mu1 - mu0, s1 - s0)
    return abs(np.log(s1 / s0)), float(lip * w2)
