"""Shared oracles and fixtures."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import linprog, nnls

from spotr import numerics as nx
from spotr.model import ModelConfig, StageConfig

ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def grad_check(build_loss, params, h=1e-5, floor=1e-5, rng=None, per_param=None):
    """Compare backward() against central differences on every coordinate
    (or ``per_param`` random coordinates of each tensor).

    Relative error uses ``max(|analytic|, |numeric|, floor * max(1, |loss|))``
    as denominator: central differences carry about ``eps * |loss| / h`` of
    roundoff (1e-10 per unit loss at h=1e-5), so gradients below the scaled
    floor are effectively compared at ``1e-4`` of it in absolute terms.

    Coordinates whose +-h stencil changes a ReLU sign or a max argmax are
    skipped: the loss is not differentiable there. Returns
    ``(max relative error, coordinates checked, coordinates skipped)``.
    """
    for p in params:
        p.grad = None
    with nx.record_branches() as base:
        loss = build_loss()
    base = list(base)
    loss.backward()
    floor = floor * max(1.0, abs(loss.item()))
    worst, checked, kinks = 0.0, 0, 0
    for p in params:
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)
        coords = np.arange(p.data.size)
        if per_param is not None and p.data.size > per_param:
            coords = rng.choice(p.data.size, per_param, replace=False)
        for i in coords:
            patterns = []

            def f(_):
                with nx.no_grad(), nx.record_branches() as br:
                    v = build_loss().item()
                patterns.append(list(br))
                return v

            num = nx.fd_gradient(f, p, h, index=[int(i)]).reshape(-1)[i]
            if any(pt != base for pt in patterns):
                kinks += 1
                continue
            a = analytic[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
            checked += 1
    return worst, checked, kinks


def randomize_biases(module, rng, scale=0.1):
    """Zero-initialized biases put the self-pair (zero input) exactly on a
    ReLU kink; random instances should not sit on one."""
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data[:] = rng.normal(0.0, scale, size=p.shape)


def _simplex_residual(points, q, lam):
    lam = np.clip(lam, 0.0, None)
    if lam.sum() <= 0:
        return np.inf
    return float(np.linalg.norm(points.T @ (lam / lam.sum()) - q))


def hull_residual(points: np.ndarray, q: np.ndarray) -> float:
    """Upper bound on the distance from ``q`` to the convex hull of ``points``.

    Candidate barycentric weights come from a feasibility LP (exact
    sum-to-one row) and from NNLS with a weighted sum row; each candidate's
    support is also re-solved exactly by least squares. Every candidate is
    clipped, rescaled onto the simplex and its residual measured directly,
    so the result certifies membership and never undercuts the true distance.
    """
    n = len(points)
    a_exact = np.vstack([points.T, np.ones(n)])
    b_exact = np.r_[q, 1.0]
    cands = []
    lp = linprog(np.zeros(n), A_eq=a_exact, b_eq=b_exact, bounds=(0, None), method="highs")
    if lp.x is not None:
        cands.append(lp.x)
    for w in (1.0, 1000.0):
        cands.append(nnls(np.vstack([points.T, w * np.ones(n)]), np.r_[q, w], maxiter=100 * n)[0])
    best = np.inf
    for lam in cands:
        support = np.flatnonzero(lam > 0)
        exact = np.zeros(n)
        exact[support] = np.linalg.lstsq(a_exact[:, support], b_exact, rcond=None)[0]
        best = min(best, _simplex_residual(points, q, lam), _simplex_residual(points, q, exact))
    return best


def tiny_config(task="classify", **kw) -> ModelConfig:
    stages = [StageConfig(6, 0.5, 6, 3, 8.0), StageConfig(8, 1.0, 6, 3, 4.0)]
    base = dict(stages=stages, embed_width=4, head_widths=(8,), task=task)
    base.update(kw)
    return ModelConfig(**base)


def small_config(task="classify", **kw) -> ModelConfig:
    stages = [StageConfig(16, 0.3, 8, 8, 16.0), StageConfig(32, 0.6, 8, 8, 8.0)]
    base = dict(stages=stages, embed_width=16, head_widths=(32,), task=task)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
