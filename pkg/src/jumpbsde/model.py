"""Decoupled FBSDE problems with jumps and manufactured closed-form solutions.

Coefficients act on rows: ``b(x)`` maps (n, d) to (n, d), ``sigma`` and
``gamma`` map (n, d) to (n, d, d), the driver maps ``(t, x, y, z, psi)`` with
shapes ((), (n, d), (n,), (n, d), (n,)) to (n,); ``t`` may also be an
(n,) array, and ``g`` maps (n, d) to (n,).
The forward increment uses ``sigma(x)^T dW`` and the jump ``gamma(x) z``.

Drivers are written with plain arithmetic so they also accept tensors for
``y``, ``z`` and ``psi`` during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import levy
from .errors import ConfigError, ConstructionUnavailable


@dataclass(frozen=True)
class Constants:
    """Declared Lipschitz / Hölder constants of the data."""

    K_b: float = 0.0
    K_sigma: float = 0.0
    K_gamma: float = 0.0
    K_f: float = 0.0
    K_ft: float = 0.0
    K_g: float = 0.0


@dataclass(frozen=True)
class Skeleton:
    """Everything but the driver and terminal condition."""

    d: int
    T: float
    x0: np.ndarray
    b: Callable
    sigma: Callable
    gamma: Callable
    measure: levy.LevyMeasure
    K_b: float = 0.0
    K_sigma: float = 0.0
    K_gamma: float = 0.0
    constant: dict | None = None  # {"b": vec, "sigma": mat, "gamma": mat} when coefficients are constant


def constant_skeleton(d, T, x0, measure, b=0.0, sigma=1.0, gamma=1.0):
    """Skeleton with constant drift vector, diffusion and jump matrices.

    Scalars for ``sigma``/``gamma`` mean multiples of the identity.
    """
    if measure.dim != d:
        raise ConfigError(f"measure dimension {measure.dim} does not match the state dimension {d}")
    b_vec = np.broadcast_to(np.asarray(b, dtype=float), (d,)).copy()
    sig = _as_matrix(sigma, d)
    gam = _as_matrix(gamma, d)
    return Skeleton(
        d=d, T=float(T), x0=np.broadcast_to(np.asarray(x0, dtype=float), (d,)).copy(),
        b=lambda x: np.broadcast_to(b_vec, x.shape),
        sigma=lambda x: np.broadcast_to(sig, (len(x), d, d)),
        gamma=lambda x: np.broadcast_to(gam, (len(x), d, d)),
        measure=measure,
        constant={"b": b_vec, "sigma": sig, "gamma": gam},
    )


def _as_matrix(value, d):
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        return value * np.eye(d)
    if value.shape != (d, d):
        raise ValueError(f"expected a scalar or a {d}x{d} matrix, got shape {value.shape}")
    return value


@dataclass(frozen=True)
class FbsdeProblem:
    d: int
    T: float
    x0: np.ndarray
    b: Callable
    sigma: Callable
    gamma: Callable
    f: Callable
    g: Callable
    measure: levy.LevyMeasure
    constants: Constants
    name: str = "custom"
    constant: dict | None = None
    small_jumps: object = None  # TruncationStats when built by the epsilon pipeline

    @classmethod
    def from_skeleton(cls, skeleton, f, g, K_f, K_ft, K_g, name="custom"):
        return cls(
            d=skeleton.d, T=skeleton.T, x0=skeleton.x0, b=skeleton.b, sigma=skeleton.sigma,
            gamma=skeleton.gamma, f=f, g=g, measure=skeleton.measure,
            constants=Constants(skeleton.K_b, skeleton.K_sigma, skeleton.K_gamma, K_f, K_ft, K_g),
            name=name, constant=skeleton.constant,
        )

    def skeleton(self):
        return Skeleton(self.d, self.T, self.x0, self.b, self.sigma, self.gamma, self.measure,
                        self.constants.K_b, self.constants.K_sigma, self.constants.K_gamma, self.constant)

    def with_measure(self, measure, sigma=None, K_sigma=None, constant=None, small_jumps=None):
        return replace(
            self,
            measure=measure,
            sigma=self.sigma if sigma is None else sigma,
            constants=self.constants if K_sigma is None else replace(self.constants, K_sigma=K_sigma),
            constant=self.constant if constant is None else constant,
            small_jumps=small_jumps,
        )


# ---------------------------------------------------------------------------
# manufactured solutions


@dataclass(frozen=True)
class ExactTriple:
    y: np.ndarray
    z: np.ndarray
    psi: np.ndarray


@dataclass(frozen=True)
class ManufacturedSolution:
    """A problem together with the closed-form solution u of its PIDE.

    ``u``, ``grad_u``, ``hess_u`` and ``u_t`` take (t, x) with x of shape
    (n, d) and return (n,), (n, d), (n, d, d) and (n,).
    """

    problem: FbsdeProblem
    u: Callable
    grad_u: Callable
    hess_u: Callable
    u_t: Callable
    psi_closed: Callable | None = None
    meta: dict = field(default_factory=dict)

    @property
    def Y0(self):
        return float(self.u(0.0, self.problem.x0[None, :])[0])


def _rows(x, d):
    return np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, d)


def jump_integral(problem, func, t, x):
    """Quadrature of ``func(t, x + gamma(x) z) - func(t, x)`` against the measure, per row of x."""
    z, w = problem.measure.quadrature()
    if len(w) == 0:
        return np.zeros(len(x))
    shifts = np.einsum("nij,qj->nqi", problem.gamma(x), z)
    shifted = (x[:, None, :] + shifts).reshape(-1, problem.d)
    values = func(t, shifted).reshape(len(x), len(w))
    return (values - func(t, x)[:, None]) @ w


def exact_triple(ms, t, x):
    """(Y, Z, Psi) of the exact solution at time ``t`` and states ``x``."""
    p = ms.problem
    x = _rows(x, p.d)
    y = ms.u(t, x)
    z = np.einsum("nji,nj->ni", p.sigma(x), ms.grad_u(t, x))
    if len(x) == 1:
        psi = np.atleast_1d(p.measure.nu_integral(
            lambda zz: ms.u(t, x + (p.gamma(x)[0] @ zz.T).T) - y[0]))
    else:
        psi = jump_integral(p, ms.u, t, x)
    return ExactTriple(y, z, psi)


def pide_residual(ms, t, x):
    """u_t + L u + f(t, x, u, sigma^T D u, J u) at the rows of x (zero for a solution)."""
    p = ms.problem
    x = _rows(x, p.d)
    grad = ms.grad_u(t, x)
    sig = p.sigma(x)
    second = 0.5 * np.einsum("nki,nij,nkj->n", sig, ms.hess_u(t, x), sig)
    jump = jump_integral(p, ms.u, t, x)
    z_nodes, w = p.measure.quadrature()
    mean_shift = np.einsum("nij,j->ni", p.gamma(x), w @ z_nodes if len(w) else np.zeros(p.d))
    generator = np.sum(p.b(x) * grad, axis=1) + second + jump - np.sum(mean_shift * grad, axis=1)
    triple = ExactTriple(ms.u(t, x), np.einsum("nji,nj->ni", sig, grad), jump)
    return ms.u_t(t, x) + generator + p.f(t, x, triple.y, triple.z, triple.psi)


@dataclass(frozen=True)
class LinearProfile:
    """beta(t) = beta0 + slope (T - t) + curvature (T - t)^2."""

    T: float
    beta0: float = 0.0
    slope: float = 0.0
    curvature: float = 0.0

    def value(self, t):
        tau = self.T - t
        return self.beta0 + self.slope * tau + self.curvature * tau * tau

    def derivative(self, t):
        return -self.slope - 2.0 * self.curvature * (self.T - t)


def make_linear_manufactured(alpha, beta0, skeleton, kappa=0.5, slope=0.0, curvature=0.0,
                             zeta=0.0, eta=0.0, name="linear"):
    """u(t, x) = alpha^T x + beta(t) with a driver built so that u solves the PIDE.

    The driver is -beta'(t) - alpha^T b(x) + kappa (y - u(t, x)) plus the
    optional couplings zeta * sum(z - sigma^T alpha) and
    eta (psi - alpha^T gamma int z nu), all of which vanish on the solution.
    """
    d = skeleton.d
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (d,)).copy()
    beta = LinearProfile(skeleton.T, float(beta0), float(slope), float(curvature))
    measure = skeleton.measure
    mean_jump = measure.mean_jump() if measure.finite_activity else np.zeros(d)

    def u(t, x):
        return x @ alpha + beta.value(t)

    def f(t, x, y, z, psi):
        out = -beta.derivative(t) - skeleton.b(x) @ alpha + kappa * (y - u(t, x))
        if zeta:
            target = np.einsum("nji,j->ni", skeleton.sigma(x), alpha)
            out = out + zeta * (z - target).sum(axis=1)
        if eta:
            out = out + eta * (psi - np.einsum("nij,j->ni", skeleton.gamma(x), mean_jump) @ alpha)
        return out

    def g(x):
        return x @ alpha + beta0

    a_norm = float(np.linalg.norm(alpha))
    K_f = max(kappa, abs(zeta) * np.sqrt(d), abs(eta), a_norm * (skeleton.K_b + kappa)
              + abs(zeta) * np.sqrt(d) * skeleton.K_sigma * a_norm
              + abs(eta) * skeleton.K_gamma * a_norm * float(np.linalg.norm(mean_jump)))
    T = skeleton.T
    K_ft = (2.0 * abs(curvature) + kappa * (abs(slope) + 2.0 * abs(curvature) * T)) * np.sqrt(T)
    problem = FbsdeProblem.from_skeleton(skeleton, f, g, K_f=float(K_f), K_ft=float(K_ft), K_g=a_norm, name=name)
    return ManufacturedSolution(
        problem=problem,
        u=u,
        grad_u=lambda t, x: np.broadcast_to(alpha, x.shape),
        hess_u=lambda t, x: np.zeros((len(x), d, d)),
        u_t=lambda t, x: np.full(len(x), beta.derivative(t)),
        psi_closed=lambda t, x: np.einsum("nij,j->ni", skeleton.gamma(x), mean_jump) @ alpha,
        meta={"alpha": alpha.tolist(), "beta0": float(beta0), "slope": float(slope),
              "curvature": float(curvature), "kappa": float(kappa), "zeta": float(zeta), "eta": float(eta)},
    )


def make_levy_quadratic_manufactured(skeleton, name="levy_quadratic"):
    """u(t, x) = E|x + L_{T-t}|^2 for constant coefficients and zero driver.

    With tau = T - t and S2 = int z z^T nu:
    u = |x + b tau|^2 + tau (|sigma|_F^2 + tr(gamma S2 gamma^T)).
    """
    if skeleton.constant is None:
        raise ConstructionUnavailable("levy_quadratic needs constant b, sigma and gamma")
    d, T = skeleton.d, skeleton.T
    b = skeleton.constant["b"]
    sig = skeleton.constant["sigma"]
    gam = skeleton.constant["gamma"]
    measure = skeleton.measure
    second = measure.moment_matrix()
    mean_jump = measure.mean_jump()
    rate = float(np.sum(sig * sig) + np.trace(gam @ second @ gam.T))

    def u(t, x):
        shifted = x + b * (T - t)
        return np.sum(shifted * shifted, axis=1) + rate * (T - t)

    def grad_u(t, x):
        return 2.0 * (x + b * (T - t))

    def u_t(t, x):
        return -2.0 * (x + b * (T - t)) @ b - rate

    def psi_closed(t, x):
        return 2.0 * (x + b * (T - t)) @ (gam @ mean_jump) + np.trace(gam @ second @ gam.T)

    box = np.abs(skeleton.x0).max() + 5.0
    problem = FbsdeProblem.from_skeleton(
        skeleton,
        f=lambda t, x, y, z, psi: 0.0 * y,
        g=lambda x: np.sum(x * x, axis=1),
        K_f=0.0, K_ft=0.0, K_g=float(2.0 * box * np.sqrt(d)), name=name,
    )
    return ManufacturedSolution(problem, u, grad_u, lambda t, x: np.broadcast_to(2.0 * np.eye(d), (len(x), d, d)),
                                u_t, psi_closed, {"rate": rate})


# ---------------------------------------------------------------------------
# sampled checks of the declared constants


@dataclass(frozen=True)
class Check:
    name: str
    constant: float
    worst_ratio: float
    passed: bool


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def as_dict(self):
        return {c.name: {"constant": c.constant, "worst_ratio": c.worst_ratio, "passed": c.passed} for c in self.checks}


def _ratio(change, distance, constant):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(change <= 1e-12 * (1.0 + distance), 0.0, change / (constant * distance))
    return float(np.nanmax(r)) if r.size else 0.0


def validate(problem, samples=10_000, box=None, rng=None, ms=None):
    """Sample the declared constants on a box around x0 and report worst-case ratios.

    A ratio above one means the declared constant is violated somewhere.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d, c = problem.d, problem.constants
    lo, hi = (problem.x0 - 5.0, problem.x0 + 5.0) if box is None else (np.full(d, box[0]), np.full(d, box[1]))
    x = rng.uniform(lo, hi, size=(samples, d))
    x2 = rng.uniform(lo, hi, size=(samples, d))
    dist = np.linalg.norm(x - x2, axis=1)
    checks = []

    def add(name, constant, ratio):
        checks.append(Check(name, float(constant), ratio, bool(ratio <= 1.0 + 1e-9)))

    add("b_lipschitz", c.K_b, _ratio(np.linalg.norm(problem.b(x) - problem.b(x2), axis=1), dist, c.K_b))
    add("sigma_lipschitz", c.K_sigma, _ratio(
        np.linalg.norm((problem.sigma(x) - problem.sigma(x2)).reshape(samples, -1), axis=1), dist, c.K_sigma))
    add("gamma_lipschitz", c.K_gamma, _ratio(
        np.linalg.norm((problem.gamma(x) - problem.gamma(x2)).reshape(samples, -1), axis=1), dist, c.K_gamma))
    add("g_lipschitz", c.K_g, _ratio(np.abs(problem.g(x) - problem.g(x2)), dist, c.K_g))

    y, y2 = rng.uniform(-5, 5, samples), rng.uniform(-5, 5, samples)
    z, z2 = rng.uniform(-5, 5, (samples, d)), rng.uniform(-5, 5, (samples, d))
    p, p2 = rng.uniform(-5, 5, samples), rng.uniform(-5, 5, samples)
    t = rng.uniform(0, problem.T, samples)
    t2 = rng.uniform(0, problem.T, samples)
    state_dist = dist + np.abs(y - y2) + np.linalg.norm(z - z2, axis=1) + np.abs(p - p2)
    same_t_change = np.abs(problem.f(t, x, y, z, p) - problem.f(t, x2, y2, z2, p2))
    add("f_lipschitz", c.K_f, _ratio(same_t_change, state_dist, c.K_f))
    time_change = np.abs(problem.f(t, x, y, z, p) - problem.f(t2, x, y, z, p))
    add("f_time_holder", c.K_ft, _ratio(time_change, np.sqrt(np.abs(t - t2)), c.K_ft))

    if ms is not None:
        tt = rng.uniform(0, problem.T, min(samples, 1000))
        xs = x[: len(tt)]
        residual = np.array([pide_residual(ms, ti, xi[None, :])[0] for ti, xi in zip(tt[:200], xs[:200])])
        worst = float(np.max(np.abs(residual))) / 1e-6
        checks.append(Check("pide_residual", 1e-6, worst, bool(worst <= 1.0)))
        growth = np.abs(ms.u(0.0, x)) / (1.0 + np.linalg.norm(x, axis=1))
        checks.append(Check("u_linear_growth_sup", float(np.max(growth)), float(np.max(growth)), True))
    return ValidationReport(tuple(checks))


# ---------------------------------------------------------------------------
# catalog


def make_jump_ou(skeleton, theta=1.0, rate=0.1, jump_weight=0.1, name="jump_ou"):
    """Mean-reverting drift -theta x, driver -rate y + jump_weight psi, g = sum sin(x).

    No closed-form solution is known; used to exercise non-constant drift.
    """
    d = skeleton.d
    base = replace(skeleton, b=lambda x: -theta * x, K_b=float(theta), constant=None)
    problem = FbsdeProblem.from_skeleton(
        base,
        f=lambda t, x, y, z, psi: -rate * y + jump_weight * psi,
        g=lambda x: np.sin(x).sum(axis=1),
        K_f=float(max(abs(rate), abs(jump_weight))), K_ft=0.0, K_g=float(np.sqrt(d)), name=name,
    )
    return problem


MANUFACTURED = ("linear", "levy_quadratic", "pure_jump_linear")
CATALOG = MANUFACTURED + ("jump_ou",)


def build_catalog(name, params):
    """(problem, manufactured solution or None) for a catalog entry."""
    if name == "jump_ou":
        params = dict(params)
        theta = float(params.pop("theta", 1.0))
        rate = float(params.pop("rate", 0.1))
        jump_weight = float(params.pop("jump_weight", 0.1))
        params.setdefault("sigma", 0.2)
        skeleton = _catalog_skeleton(name, params)
        if params:
            raise ConfigError(f"unknown parameters {sorted(params)} for problem {name!r}")
        return make_jump_ou(skeleton, theta, rate, jump_weight), None
    ms = build_problem(name, params)
    return ms.problem, ms


def _catalog_skeleton(name, params):
    """Pops the shared skeleton keys from ``params``."""
    d = int(params.pop("d", 1))
    T = float(params.pop("T", 1.0))
    x0 = params.pop("x0", 1.0)
    measure_spec = params.pop("measure", {"family": "atoms", "atoms": [[0.5, 0.5], [-0.5, 0.5]]})
    measure = levy.build_measure(measure_spec, dim=d)
    b = params.pop("b", 0.0)
    sigma = params.pop("sigma", 0.0 if name == "pure_jump_linear" else 1.0)
    gamma = params.pop("gamma", 1.0)
    return constant_skeleton(d, T, x0, measure, b=b, sigma=sigma, gamma=gamma)


def build_problem(name, params):
    """Manufactured catalog entry by name; returns a ManufacturedSolution."""
    if name not in MANUFACTURED:
        raise ConfigError(f"unknown manufactured problem {name!r}; use one of {', '.join(MANUFACTURED)}")
    params = dict(params)
    skeleton = _catalog_skeleton(name, params)
    if name in ("linear", "pure_jump_linear"):
        ms = make_linear_manufactured(
            alpha=params.pop("alpha", 1.0),
            beta0=float(params.pop("beta0", 0.0)),
            skeleton=skeleton,
            kappa=float(params.pop("kappa", 0.5)),
            slope=float(params.pop("slope", 0.0)),
            curvature=float(params.pop("curvature", 0.0)),
            zeta=float(params.pop("zeta", 0.0)),
            eta=float(params.pop("eta", 0.5 if name == "pure_jump_linear" else 0.0)),
            name=name,
        )
    elif name == "levy_quadratic":
        ms = make_levy_quadratic_manufactured(skeleton)
    else:
        raise ConfigError(f"unknown problem {name!r}; use linear, levy_quadratic or pure_jump_linear")
    if params:
        raise ConfigError(f"unknown parameters {sorted(params)} for problem {name!r}")
    return ms
