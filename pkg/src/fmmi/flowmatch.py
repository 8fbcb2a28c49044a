"""Linear-path flow matching: interpolation, targets, AdamW and the training loop."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diffkernel import GradBuffer, MlpParams, fm_loss_and_grads, init_mlp
from .errors import DimensionError, TrainingDivergenceError, ValidationError

log = logging.getLogger(__name__)

# above this many spatial dimensions the exact divergence gets replaced by Hutchinson
EXACT_DIVERGENCE_MAX_DIM = 64
DEFAULT_HUTCHINSON_PROBES = 16


@dataclass
class CouplingBatch:
    """Paired endpoint samples with an optional conditioning block."""

    x0: np.ndarray
    x1: np.ndarray
    cond: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.ndim != 2 or self.x0.shape != self.x1.shape:
            raise DimensionError(f"x0 {self.x0.shape} and x1 {self.x1.shape} must share a 2-D shape")
        if self.cond is not None:
            self.cond = np.asarray(self.cond, dtype=np.float64)
            if self.cond.ndim != 2 or self.cond.shape[0] != self.x0.shape[0]:
                raise DimensionError("cond must be 2-D with one row per pair")

    def __len__(self):
        return self.x0.shape[0]

    @property
    def d_spatial(self) -> int:
        return self.x0.shape[1]

    @property
    def d_cond(self) -> int:
        return 0 if self.cond is None else self.cond.shape[1]

    def reversed(self) -> "CouplingBatch":
        return CouplingBatch(self.x1, self.x0, self.cond)


@dataclass
class TrainConfig:
    hidden_width: int = 512
    hidden_depth: int = 1
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 512
    n_iters: int = 10_000
    seed: int = 0
    # "auto" | "exact" | "hutchinson"
    divergence_mode: str = "auto"
    n_probes: int = DEFAULT_HUTCHINSON_PROBES
    # "pair": x1 - x0; "literal": x1 - x_t
    target: str = "pair"
    # decay of an exponential moving average of the weights; 0 keeps the last iterate
    ema_decay: float = 0.0
    trace_path: Optional[str] = None

    def __post_init__(self):
        for name in ("hidden_width", "batch_size", "n_iters", "n_probes"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.hidden_depth < 0:
            raise ValidationError("hidden_depth must be >= 0")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.divergence_mode not in ("auto", "exact", "hutchinson"):
            raise ValidationError(f"unknown divergence_mode {self.divergence_mode!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError("ema_decay must lie in [0, 1)")
        if self.target not in ("pair", "literal"):
            raise ValidationError(f"unknown target {self.target!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def resolved_divergence(self, d_spatial: int) -> str:
        if self.divergence_mode != "auto":
            return self.divergence_mode
        return "exact" if d_spatial <= EXACT_DIVERGENCE_MAX_DIM else "hutchinson"


@dataclass
class OptimizerState:
    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    step: int = 0

    @classmethod
    def zeros(cls, params: MlpParams) -> "OptimizerState":
        z = lambda: [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        return cls(z(), z(), 0)


@dataclass
class VelocityModel:
    """A trained field ``v(x, cond, t)`` with input layout ``[x, cond, t]``."""

    params: MlpParams
    d_spatial: int
    d_cond: int = 0
    direction: str = "forward"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params.d_out != self.d_spatial:
            raise DimensionError(f"network outputs {self.params.d_out} values, d_spatial={self.d_spatial}")
        if self.params.d_in != self.d_spatial + self.d_cond + 1:
            raise DimensionError(
                f"network takes {self.params.d_in} inputs, expected d_spatial + d_cond + 1 = "
                f"{self.d_spatial + self.d_cond + 1}"
            )
        if self.direction not in ("forward", "reverse"):
            raise ValidationError(f"unknown direction {self.direction!r}")

    def inputs(self, x, t, cond=None) -> np.ndarray:
        """Assemble network input rows ``[x, cond, t]``."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        blocks = [x]
        if self.d_cond:
            if cond is None:
                raise DimensionError("this model needs a conditioning block")
            blocks.append(np.asarray(cond, dtype=np.float64))
        elif cond is not None and np.asarray(cond).shape[1] != 0:
            raise DimensionError("unconditional model given a conditioning block")
        blocks.append(t[:, None])
        return np.hstack(blocks)


def sample_path(x0, x1, t):
    """Point ``(1 - t) x0 + t x1`` on the straight segment between endpoints.

    ``t`` may be a scalar or one value per row of 2-D endpoints.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValidationError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0, x1):
    """Pair-conditioned velocity of the straight path; constant in t."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return x1 - x0


def adamw_step(params: MlpParams, state: OptimizerState, grads: GradBuffer,
               cfg: TrainConfig) -> tuple[MlpParams, OptimizerState]:
    """One AdamW update with bias correction; returns fresh params and state."""
    if len(grads.layers) != len(params.layers):
        raise DimensionError("gradient buffer does not mirror the parameters")
    step = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    lr, wd = cfg.learning_rate, cfg.weight_decay
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_layers, new_m, new_v = [], [], []
    for k, ((w, b), (gw, gb), mk, vk) in enumerate(zip(params.layers, grads.layers, state.m, state.v)):
        updated = []
        for name, p, g, m, v in (("weight", w, gw, mk[0], vk[0]), ("bias", b, gb, mk[1], vk[1])):
            if g.shape != p.shape:
                raise DimensionError(f"layer {k} {name}: gradient {g.shape} vs parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"non-finite gradient in layer {k} {name} at step {step}")
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            p = p * (1.0 - lr * wd) - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            updated.append((p, m, v))
        (pw, mw, vw), (pb, mb, vb) = updated
        new_layers.append((pw, pb))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    return MlpParams(new_layers, params.activation), OptimizerState(new_m, new_v, step)


def regression_batch(batch: CouplingBatch, t: np.ndarray, target: str = "pair"):
    """Path points ``x_t`` and regression targets for one coupling batch."""
    xt = sample_path(batch.x0, batch.x1, t)
    if target == "pair":
        v = target_velocity(batch.x0, batch.x1)
    else:
        v = batch.x1 - xt
    return xt, v


def train(coupling_sampler: Callable[[int], CouplingBatch], cfg: TrainConfig,
          init_params: MlpParams | None = None,
          direction: str = "forward") -> tuple[VelocityModel, np.ndarray]:
    """Fit a velocity network by flow matching on fresh batches from ``coupling_sampler``.

    Returns the model and the per-iteration loss trace. With
    ``cfg.ema_decay > 0`` the returned weights are the moving average, whose
    decay ramps up as ``min(decay, (1 + k) / (10 + k))``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7a11]))
    params = init_params
    state = None
    losses = np.empty(cfg.n_iters)
    trace = open(cfg.trace_path, "w") if cfg.trace_path else None
    d_spatial = d_cond = None
    ema = None
    try:
        for it in range(cfg.n_iters):
            try:
                batch = coupling_sampler(cfg.batch_size)
            except Exception as exc:
                raise RuntimeError(f"coupling sampler failed at iteration {it}: {exc}") from exc
            if d_spatial is None:
                d_spatial, d_cond = batch.d_spatial, batch.d_cond
                if params is None:
                    params = init_mlp(d_spatial + d_cond + 1, d_spatial, cfg.hidden_width,
                                      cfg.hidden_depth, rng)
                elif params.d_in != d_spatial + d_cond + 1 or params.d_out != d_spatial:
                    raise DimensionError("initial parameters do not fit the coupling batches")
                state = OptimizerState.zeros(params)
            elif (batch.d_spatial, batch.d_cond) != (d_spatial, d_cond):
                raise DimensionError(f"sampler changed batch layout at iteration {it}")
            t = rng.uniform(0.0, 1.0, size=len(batch))
            xt, v = regression_batch(batch, t, cfg.target)
            blocks = [xt] + ([batch.cond] if d_cond else []) + [t[:, None]]
            loss, grads = fm_loss_and_grads(params, np.hstack(blocks), v)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss at iteration {it}")
            losses[it] = loss
            if trace is not None:
                trace.write(f"{it},{loss!r}\n")
            params, state = adamw_step(params, state, grads, cfg)
            if cfg.ema_decay > 0:
                flat = params.flat()
                if ema is None:
                    ema = flat
                else:
                    decay = min(cfg.ema_decay, (1.0 + it) / (10.0 + it))
                    ema = decay * ema + (1.0 - decay) * flat
    finally:
        if trace is not None:
            trace.close()
    if ema is not None:
        params = params.with_flat(ema)
    meta = dataclasses.asdict(cfg)
    meta["final_loss"] = float(losses[-1])
    model = VelocityModel(params, d_spatial, d_cond, direction, meta)
    log.debug("trained %d iterations, final loss %.4g", cfg.n_iters, losses[-1])
    return model, losses
