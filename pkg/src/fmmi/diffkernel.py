"""Small dense MLP with exact gradients and spatial divergences.

Batches are ``float64`` arrays of shape ``(N, width)``. A network maps
``[x, cond, t]`` rows to velocities; the *spatial* block is the leading
``d_spatial`` input columns, and divergences are taken with respect to
that block only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

ACTIVATIONS = ("tanh",)

# rows per chunk when materialising per-row Jacobians
_JAC_CHUNK = 2048


@dataclass
class MlpParams:
    """Weights ``[out x in]`` and biases ``[out]`` for each layer.

    The activation is applied after every layer except the last.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("an MLP needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        layers = []
        prev_out = None
        for k, (w, b) in enumerate(self.layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(
                    f"layer {k}: weight {w.shape} incompatible with bias {b.shape}"
                )
            if prev_out is not None and w.shape[1] != prev_out:
                raise DimensionError(
                    f"layer {k} expects width {w.shape[1]}, previous layer gives {prev_out}"
                )
            prev_out = w.shape[0]
            layers.append((w, b))
        self.layers = layers

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def d_out(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)

    def flat(self) -> np.ndarray:
        """All parameters as one vector (weights row-major, then bias, per layer)."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        """Inverse of :meth:`flat`."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} values, got {vec.shape}")
        layers = []
        pos = 0
        for w, b in self.layers:
            nw = w.size
            layers.append((vec[pos:pos + nw].reshape(w.shape).copy(),
                           vec[pos + nw:pos + nw + b.size].copy()))
            pos += nw + b.size
        return MlpParams(layers, self.activation)


@dataclass
class GradBuffer:
    """Partial derivatives laid out exactly like ``MlpParams.layers``."""

    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in self.layers])


def init_mlp(d_in: int, d_out: int, hidden_width: int, hidden_depth: int,
             rng: np.random.Generator, activation: str = "tanh") -> MlpParams:
    """Random network with ``hidden_depth`` hidden layers of ``hidden_width`` units.

    Uses the uniform fan-in initialisation ``U(-1/sqrt(in), 1/sqrt(in))``.
    ``hidden_depth=0`` gives a single affine layer.
    """
    if min(d_in, d_out) < 1 or hidden_depth < 0 or (hidden_depth and hidden_width < 1):
        raise ValidationError("layer widths must be positive")
    widths = [d_in] + [hidden_width] * hidden_depth + [d_out]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                       rng.uniform(-bound, bound, size=fan_out)))
    return MlpParams(layers, activation)


def zeros_like_params(params: MlpParams) -> GradBuffer:
    return GradBuffer([(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers])


def _check_inputs(params: MlpParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise DimensionError(f"inputs of shape {x.shape} do not match d_in={params.d_in}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("inputs contain non-finite values")
    return x


def _forward_cache(params: MlpParams, x: np.ndarray):
    """Return the output plus post-activation hidden states (input first)."""
    hs = [x]
    h = x
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        z = h @ w.T + b
        if k == last:
            return z, hs
        h = np.tanh(z)
        hs.append(h)
    raise AssertionError("unreachable")


def mlp_forward(params: MlpParams, inputs) -> np.ndarray:
    """Evaluate the network on every row of ``inputs``."""
    x = _check_inputs(params, inputs)
    out, _ = _forward_cache(params, x)
    return out


def fm_loss_and_grads(params: MlpParams, inputs, targets) -> tuple[float, GradBuffer]:
    """Mean squared 2-norm residual and its exact parameter gradient.

    ``loss = (1/N) * sum_n ||f(x_n) - target_n||^2``.
    """
    x = _check_inputs(params, inputs)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValidationError("empty batch")
    if y.shape != (x.shape[0], params.d_out):
        raise DimensionError(
            f"targets of shape {y.shape}, expected {(x.shape[0], params.d_out)}"
        )
    out, hs = _forward_cache(params, x)
    resid = out - y
    n = x.shape[0]
    loss = float(np.sum(resid * resid) / n)

    grads = [None] * len(params.layers)
    delta = (2.0 / n) * resid  # dL/dz for the last layer
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        h_in = hs[k]
        grads[k] = (delta.T @ h_in, delta.sum(axis=0))
        if k > 0:
            delta = (delta @ w) * (1.0 - h_in * h_in)
    return loss, GradBuffer(grads)


def _check_spatial(params: MlpParams, d_spatial: int):
    if d_spatial != params.d_out or d_spatial > params.d_in or d_spatial < 1:
        raise ValidationError(
            f"d_spatial={d_spatial} must equal d_out={params.d_out} and not exceed d_in={params.d_in}"
        )


def divergence_exact(params: MlpParams, inputs, d_spatial: int) -> np.ndarray:
    """Trace of the spatial Jacobian ``dv/dx`` for every row.

    Propagates the full ``(width x d_spatial)`` tangent through the layer
    chain, then contracts the last layer against it diagonally.
    """
    _check_spatial(params, d_spatial)
    x = _check_inputs(params, inputs)
    n = x.shape[0]
    div = np.empty(n)
    layers = params.layers
    w0 = layers[0][0][:, :d_spatial]
    if len(layers) == 1:
        div[:] = np.trace(w0)
        return div
    for lo in range(0, n, _JAC_CHUNK):
        xs = x[lo:lo + _JAC_CHUNK]
        h = xs
        jac = None  # d(hidden)/dx, shape (rows, width, d_spatial)
        for k, (w, b) in enumerate(layers[:-1]):
            z = h @ w.T + b
            h = np.tanh(z)
            dact = 1.0 - h * h
            if jac is None:
                jac = dact[:, :, None] * w0[None, :, :]
            else:
                jac = dact[:, :, None] * np.einsum("ij,njk->nik", w, jac)
        w_last = layers[-1][0]
        # tr(W_last @ J_n) = sum_ij W_last[i, j] J_n[j, i]
        div[lo:lo + len(xs)] = np.einsum("ij,nji->n", w_last, jac)
    return div


def jvp_spatial(params: MlpParams, inputs, probes) -> np.ndarray:
    """Directional derivatives ``(dv/dx) a`` for per-row spatial directions ``a``."""
    x = _check_inputs(params, inputs)
    a = np.asarray(probes, dtype=np.float64)
    d_spatial = a.shape[1]
    if a.shape[0] != x.shape[0]:
        raise DimensionError("one probe row per input row is required")
    h = x
    tangent = a @ params.layers[0][0][:, :d_spatial].T
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        if k > 0:
            tangent = tangent @ w.T
        if k == last:
            return tangent
        h = np.tanh(h @ w.T + b)
        tangent = tangent * (1.0 - h * h)
    raise AssertionError("unreachable")


def hutchinson_samples(params: MlpParams, inputs, d_spatial: int, n_probes: int,
                       rng: np.random.Generator | None = None,
                       probes: str = "rademacher") -> np.ndarray:
    """Per-probe quadratic forms ``a^T (dv/dx) a``, shape ``(n_probes, N)``.

    ``probes="rademacher"`` draws independent +-1 entries. ``probes="basis"``
    uses the scaled basis ``sqrt(d) e_i`` for ``i < d`` (``n_probes`` is then
    ignored), whose average is exactly the trace.
    """
    _check_spatial(params, d_spatial)
    x = _check_inputs(params, inputs)
    n = x.shape[0]
    if probes == "basis":
        out = np.empty((d_spatial, n))
        for i in range(d_spatial):
            a = np.zeros((n, d_spatial))
            a[:, i] = 1.0
            out[i] = d_spatial * jvp_spatial(params, x, a)[:, i]
        return out
    if probes != "rademacher":
        raise ValidationError(f"unknown probe kind {probes!r}")
    if n_probes < 1:
        raise ValidationError("n_probes must be >= 1")
    if rng is None:
        raise ValidationError("Rademacher probes need an rng")
    out = np.empty((n_probes, n))
    for p in range(n_probes):
        a = rng.integers(0, 2, size=(n, d_spatial)).astype(np.float64) * 2.0 - 1.0
        out[p] = np.sum(a * jvp_spatial(params, x, a), axis=1)
    return out


def divergence_hutchinson(params: MlpParams, inputs, d_spatial: int, n_probes: int,
                          rng: np.random.Generator | None = None,
                          probes: str = "rademacher") -> np.ndarray:
    """Unbiased stochastic estimate of :func:`divergence_exact`."""
    return hutchinson_samples(params, inputs, d_spatial, n_probes, rng, probes).mean(axis=0)
