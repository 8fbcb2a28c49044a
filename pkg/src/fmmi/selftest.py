"""Offline self-checks: analytic velocity fields and the classical oracles.

Everything here is seeded and self-contained; no data files or network.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from .benchdist import DatasetSpec, ground_truth_mi, sample
from .diffkernel import (MlpParams, divergence_exact, fm_loss_and_grads, hutchinson_samples,
                         init_mlp)
from .estimators import fmdoe_estimate, ode_push
from .flowmatch import CouplingBatch, VelocityModel
from .oracle import (bound_check, gaussian_entropy_gap_bound, interpolation_path, ksg_estimate,
                     quad_entropy_1d)


def _identity_field(d):
    """v(x, t) = x as a single affine layer over the [x, t] input."""
    w = np.hstack([np.eye(d), np.zeros((d, 1))])
    return VelocityModel(MlpParams([(w, np.zeros(d))]), d, 0)


def check_scaled_gaussian():
    rng = np.random.default_rng(0)
    out = []
    for d in (1, 4):
        x0 = rng.normal(size=(10_000, d))
        res = fmdoe_estimate(_identity_field(d), CouplingBatch(x0, np.e * x0), rng)
        out.append(abs(res.value_nats - d) <= 3 * res.stderr_nats + 1e-12)
    return all(out), "identity field recovers h(e X) - h(X) = d for d in {1, 4}"


def check_ode_exponential():
    x0 = np.random.default_rng(1).normal(size=(100, 3))
    x1 = ode_push(_identity_field(3), x0, n_steps=100)
    err = np.max(np.abs(x1 - np.e * x0) / np.abs(np.e * x0))
    return err < 1e-6, f"RK4 push of v = x matches e * x0 (max rel err {err:.1e})"


def check_gradients():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(5):
        params = init_mlp(3, 2, 6, 2, rng)
        inputs = rng.normal(size=(8, 3))
        targets = rng.normal(size=(8, 2))
        _, grads = fm_loss_and_grads(params, inputs, targets)
        theta = params.flat()
        g = grads.flat()
        h = 1e-6
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fd = (fm_loss_and_grads(params.with_flat(theta + e), inputs, targets)[0]
                  - fm_loss_and_grads(params.with_flat(theta - e), inputs, targets)[0]) / (2 * h)
            worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-8))
    return worst < 1e-5, f"backprop vs central differences (worst rel err {worst:.1e})"


def check_basis_probes():
    rng = np.random.default_rng(3)
    params = init_mlp(5, 4, 16, 1, rng)
    inputs = rng.normal(size=(64, 5))
    exact = divergence_exact(params, inputs, 4)
    basis = hutchinson_samples(params, inputs, 4, 4, rng, probes="basis").mean(axis=0)
    err = np.max(np.abs(basis - exact))
    return err < 1e-12, f"basis-probe trace equals exact divergence (max abs diff {err:.1e})"


def check_quadrature():
    def std_normal(s):
        return np.exp(-0.5 * s**2) / np.sqrt(2 * np.pi)
    h = quad_entropy_1d(std_normal, (-10.0, 10.0), 10_001)
    ok = abs(h - 0.5 * np.log(2 * np.pi * np.e)) < 1e-6
    return ok, f"quadrature entropy of N(0, 1) = {h:.9f}"


def check_ksg():
    spec = DatasetSpec.from_params("correlated_normal", 1, 1, [0.5])
    z = sample(spec, 10_000, np.random.default_rng(4))
    est = ksg_estimate(z[:, 0], z[:, 1], k=5)
    truth = ground_truth_mi(spec)
    return abs(est - truth) <= 0.05, f"KSG {est:.4f} vs analytic {truth:.4f} on a rho = 0.5 Gaussian"


def check_bounds():
    rng = np.random.default_rng(5)
    path = interpolation_path(0.0, 1.0, 0.0, np.e)
    n_ok = 0
    for _ in range(20):
        lhs, rhs = bound_check(path, VelocityModel(init_mlp(2, 1, 8, 1, rng), 1, 0), 2000, rng)
        n_ok += lhs <= rhs
    n_gap = 0
    for _ in range(10):
        mu0, mu1 = rng.normal(size=2)
        s0, s1 = np.exp(rng.uniform(-1, 1, size=2))
        lhs, rhs = gaussian_entropy_gap_bound(mu0, s0, mu1, s1, 5000, rng)
        n_gap += lhs <= rhs
    return n_ok == 20 and n_gap == 10, f"score bound on {n_ok}/20 random fields, entropy-gap bound on {n_gap}/10 pairs"


CHECKS = (check_scaled_gaussian, check_ode_exponential, check_gradients, check_basis_probes,
          check_quadrature, check_ksg, check_bounds)


def run(stdout=None) -> int:
    """Run every check, print one line each; returns 0 only if all pass."""
    stdout = stdout or sys.stdout
    failed = 0
    for check in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {check.__name__[6:]}: {detail} [{time.perf_counter() - t0:.2f}s]",
              file=stdout)
    print(f"{len(CHECKS) - failed}/{len(CHECKS)} checks passed", file=stdout)
    return 0 if failed == 0 else 1
