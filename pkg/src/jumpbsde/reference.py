"""Regression-based backward scheme and error functionals.

The backward scheme computes the conditional expectations of

    Z_n   = E[Y_{n+1} dW_n | X_n] / dt
    Psi_n = E[Y_{n+1} dN~_n | X_n] / dt
    Y_n   = E[Y_{n+1} | X_n] + f(t_n, X_n, Y_n, Z_n, Psi_n) dt

by global polynomial least squares on the simulated states, solving the
implicit Y equation by fixed-point iteration.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, PicardDivergence

log = logging.getLogger(__name__)

PICARD_MAX_ITER = 50
PICARD_TOL = 1e-10
COND_LIMIT = 1e12
RIDGE = 1e-10
SUBGRID = 4


# ---------------------------------------------------------------------------
# regression


@dataclass
class Projection:
    """A fitted least-squares projection onto standardized monomials."""

    keep: np.ndarray  # coordinates that vary across the sample
    center: np.ndarray
    scale: np.ndarray
    exponents: list
    coefficients: np.ndarray  # (n_terms, k) for k regressed targets
    condition: float
    ridge: bool

    def design(self, x):
        return _monomials((x[:, self.keep] - self.center) / self.scale, self.exponents)

    def __call__(self, x):
        return self.design(x) @ self.coefficients


def _monomials(u, exponents):
    cols = [np.prod(u ** np.asarray(e), axis=1) if any(e) else np.ones(len(u)) for e in exponents]
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class RegressionBasis:
    """Monomials of total degree at most ``degree`` in the standardized state."""

    degree: int = 3

    def exponents(self, k):
        out = []
        for total in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(k), total):
                e = [0] * k
                for i in combo:
                    e[i] += 1
                out.append(tuple(e))
        return out

    def fit(self, x, targets):
        """Project the columns of ``targets`` (n, k) on the basis evaluated at ``x``."""
        targets = np.asarray(targets, dtype=float)
        squeeze = targets.ndim == 1
        if squeeze:
            targets = targets[:, None]
        spread = x.std(axis=0)
        scale_ref = np.maximum(np.abs(x).max(axis=0), 1.0)
        keep = np.flatnonzero(spread > 1e-12 * scale_ref)
        center = x[:, keep].mean(axis=0)
        scale = spread[keep]
        exponents = self.exponents(len(keep))
        A = _monomials((x[:, keep] - center) / scale, exponents)
        singular = np.linalg.svd(A, compute_uv=False)
        condition = float(singular[0] / singular[-1]) if singular[-1] > 0 else np.inf
        ridge = condition > COND_LIMIT
        if ridge:
            log.warning("regression design has condition %.3g; applying ridge %.0e", condition, RIDGE)
            gram = A.T @ A
            coef = np.linalg.solve(gram + RIDGE * np.eye(len(gram)), A.T @ targets)
        else:
            coef = np.linalg.lstsq(A, targets, rcond=None)[0]
        proj = Projection(keep, center, scale, exponents, coef, condition, ridge)
        fitted = A @ coef
        return proj, (fitted[:, 0] if squeeze else fitted)


# ---------------------------------------------------------------------------
# backward scheme


@dataclass
class StepFit:
    n: int
    mean_next: Projection  # E[Y_{n+1} | X_n]
    z: Projection  # E[Y_{n+1} dW_n | X_n] / dt
    psi: Projection  # E[Y_{n+1} dN~_n | X_n] / dt
    picard_iterations: int


@dataclass
class BackwardSolution:
    """Backward-scheme values along the regression batch and the fitted maps."""

    grid: object
    X: np.ndarray  # (B, M+1, d)
    Y: np.ndarray  # (B, M+1)
    Z: np.ndarray  # (B, M+1, d), zero at M
    Psi: np.ndarray  # (B, M+1), zero at M
    steps: list
    Y0_se: float
    flags: dict = field(default_factory=dict)

    @property
    def Y0(self):
        return float(self.Y[0, 0])

    def coefficient_table(self):
        """Rows (n, target, term, coefficient) for every fitted projection."""
        rows = []
        for step in self.steps:
            for name, proj in (("EY", step.mean_next), ("Z", step.z), ("Psi", step.psi)):
                for term, exps in enumerate(proj.exponents):
                    for col in range(proj.coefficients.shape[1]):
                        label = name if proj.coefficients.shape[1] == 1 else f"{name}{col}"
                        rows.append((step.n, label, "".join(map(str, exps)) or "1", float(proj.coefficients[term, col])))
        return rows

    def discrete(self):
        return DiscreteSolution(self.grid, self.X, self.Y, self.Z, self.Psi)


def _picard(problem, t, x, mean_next, Z, Psi, dt):
    Y = mean_next.copy()
    for k in range(1, PICARD_MAX_ITER + 1):
        new = mean_next + problem.f(t, x, Y, Z, Psi) * dt
        change = float(np.max(np.abs(new - Y))) if len(Y) else 0.0
        Y = new
        if not np.isfinite(change):
            break
        if change <= PICARD_TOL * (1.0 + float(np.max(np.abs(Y)))):
            return Y, k
    raise PicardDivergence(
        f"fixed-point iteration for Y at t={t:g} did not reach {PICARD_TOL:g} in {PICARD_MAX_ITER} "
        f"iterations (needs dt * K_f < 1; here dt * K_f = {dt * problem.constants.K_f:g})")


def solve_backward(problem, grid, batch, basis=None):
    """Run the backward scheme on the paths of ``batch``."""
    basis = RegressionBasis() if basis is None else basis
    if batch.grid != grid:
        raise GridMismatch("batch grid differs from the requested grid")
    dt = grid.dt
    M = grid.M
    B, d = batch.B, batch.d
    Y = np.zeros((B, M + 1))
    Z = np.zeros((B, M + 1, d))
    Psi = np.zeros((B, M + 1))
    Y[:, M] = problem.g(batch.X[:, M])
    steps = []
    ridge_steps = []
    conditions = []
    se0 = 0.0
    for n in range(M - 1, -1, -1):
        x = batch.X[:, n]
        nxt = Y[:, n + 1]
        targets = np.column_stack([nxt, nxt[:, None] * batch.dW[:, n] / dt, nxt * batch.compensated_count(n) / dt])
        proj, fitted = basis.fit(x, targets)
        Z[:, n] = fitted[:, 1:1 + d]
        Psi[:, n] = fitted[:, 1 + d]
        Y[:, n], iters = _picard(problem, grid.times[n], x, fitted[:, 0], Z[:, n], Psi[:, n], dt)
        split = [Projection(proj.keep, proj.center, proj.scale, proj.exponents, proj.coefficients[:, cols],
                            proj.condition, proj.ridge)
                 for cols in (slice(0, 1), slice(1, 1 + d), slice(1 + d, 2 + d))]
        steps.append(StepFit(n, split[0], split[1], split[2], iters))
        conditions.append(proj.condition)
        if proj.ridge:
            ridge_steps.append(n)
        if n == 0:
            se0 = float(np.std(nxt, ddof=1) / np.sqrt(B)) if B > 1 else np.inf
    steps.reverse()
    flags = {"ridge_steps": sorted(ridge_steps), "max_condition": float(np.max(conditions)),
             "degree": basis.degree}
    return BackwardSolution(grid, batch.X, Y, Z, Psi, steps, se0, flags)


# ---------------------------------------------------------------------------
# error functional


@dataclass
class DiscreteSolution:
    """Piecewise-constant values on the coarse grid (deep rollout or backward scheme)."""

    grid: object
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    Psi: np.ndarray

    def on_subgrid(self, batch, s):
        rep = lambda a: np.concatenate([np.repeat(a[:, :-1], s, axis=1), a[:, -1:]], axis=1)
        return rep(self.X), rep(self.Y), rep(self.Z), rep(self.Psi)


@dataclass
class ExactSolution:
    """Closed-form (Y, Z, Psi) evaluated along the sub-grid states of the batch."""

    ms: object

    def on_subgrid(self, batch, s):
        from .model import exact_triple

        if batch.fine_states is None or batch.substeps != s:
            raise GridMismatch(f"exact solution needs a batch simulated with substeps={s}")
        X = batch.fine_states
        B, steps, d = X.shape
        h = batch.grid.dt / s
        Y = np.empty((B, steps))
        Z = np.empty((B, steps, d))
        P = np.empty((B, steps))
        for j in range(steps):
            triple = exact_triple(self.ms, j * h, X[:, j])
            Y[:, j], Z[:, j], P[:, j] = triple.y, triple.z, triple.psi
        return X, Y, Z, P


def from_rollout(batch, result):
    if result.Y is None:
        raise ValueError("the rollout did not keep per-step values; call rollout(..., keep=True)")
    return DiscreteSolution(batch.grid, batch.X, result.Y, result.Z, result.Psi)


def error_functional(left, right, batch, substeps=SUBGRID):
    """(errX, errY, errZ, errPsi) between two solutions along ``batch``.

    errX and errY are max over n of the mean over paths of the sup over the
    closed sub-grid of [t_n, t_{n+1}] of the squared gap; errZ and errPsi are
    left Riemann sums over the sub-grid of the mean squared gap.
    """
    s = int(substeps)
    for side in (left, right):
        grid = getattr(side, "grid", None)
        if grid is not None and grid != batch.grid:
            raise GridMismatch("solution grid differs from the batch grid")
        X = getattr(side, "X", None)
        if X is not None and X.shape[0] != batch.B:
            raise GridMismatch("solution was computed on a different batch")
    a = left.on_subgrid(batch, s)
    b = right.on_subgrid(batch, s)
    M = batch.grid.M
    h = batch.grid.dt / s
    gaps = []
    for k in range(2):
        diff = a[k] - b[k]
        sq = diff * diff if diff.ndim == 2 else np.sum(diff * diff, axis=2)
        per_step = [sq[:, n * s:(n + 1) * s + 1].max(axis=1).mean() for n in range(M)]
        gaps.append(float(max(per_step)))
    for k in range(2, 4):
        diff = (a[k] - b[k])[:, :M * s]
        sq = diff * diff if diff.ndim == 2 else np.sum(diff * diff, axis=2)
        gaps.append(float(h * sq.mean(axis=0).sum()))
    return tuple(gaps)


# ---------------------------------------------------------------------------
# time-averaged controls


@dataclass
class TildeTilde:
    """Per-step estimates of the time-averaged controls given X~_n."""

    Z: np.ndarray  # (B, M, d)
    Psi: np.ndarray  # (B, M)
    projections: list


def tilde_tilde(ms, grid, batch, basis=None):
    """E[(1/dt) int_{t_n}^{t_{n+1}} (Z_s, Psi_s) ds | X~_n] along the batch.

    The time integral is a left Riemann sum of the closed forms on the batch
    sub-grid; the conditional expectation is a polynomial regression on X~_n.
    """
    basis = RegressionBasis(degree=2) if basis is None else basis
    _, _, Zf, Pf = ExactSolution(ms).on_subgrid(batch, batch.substeps)
    s = batch.substeps
    B, d = batch.B, batch.d
    Zbar = np.empty((B, grid.M, d))
    Pbar = np.empty((B, grid.M))
    projections = []
    for n in range(grid.M):
        z_avg = Zf[:, n * s:(n + 1) * s].mean(axis=1)
        p_avg = Pf[:, n * s:(n + 1) * s].mean(axis=1)
        proj, fitted = basis.fit(batch.X[:, n], np.column_stack([z_avg, p_avg]))
        Zbar[:, n] = fitted[:, :d]
        Pbar[:, n] = fitted[:, d]
        projections.append(proj)
    return TildeTilde(Zbar, Pbar, projections)
