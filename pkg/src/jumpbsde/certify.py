"""Explicit bound constants, a posteriori certificates and a priori reports.

All constant evaluators are pure functions of their arguments.  Minimizers
scan a 64-point logarithmic grid and refine the best bracket by
golden-section search to 1e-10 relative width, so their output is
reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import rng as rngs
from .errors import ArgOutOfDomain, DenominatorNonpositive, Infeasible, NonpositiveX

GRID_POINTS = 64
GOLDEN_TOL = 1e-10
LAMBDABAR_MAX = 10.0
H_X_RANGE = (1e-8, 1e3)
F1_COEFFICIENT = 3

FORMULAS = {
    "lambda_interval": "max((1 v K_nu) K_f, (1 - sqrt(1 - 12 (dt K_f)^2)) / (6 dt K_f)) <= l2 <= "
                       "(1 + sqrt(1 - 12 (dt K_f)^2)) / (6 dt K_f)",
    "F1": "-log(1 - dt K_f (c l2 + 1/l2)) / dt",
    "F1bar": "K_f (c l2 + 1/l2) + lb",
    "C": "2 (1 + 1/lb) exp(F1bar T) [1 + (1 + T K_f (c l2 + 1/l2)) / ((1 ^ 1/K_nu) - K_f / l2)]",
    "posteriori_bound": "C(l2*, lb*) (loss + 1.96 SE)",
    "epsilon_bound": "2 C_eps(l2*, lb*) (loss + 1.96 SE)",
    "H": "(1 + K_g)^2 (1 + 5 K_f^2 / x) exp(T (x + 5 Kbar^2 / x + Kbar^2 max(1/x + 1 + m2, 5/x)))",
    "Kbar": "max(K_b, K_sigma, K_gamma, K_f, K_nu)",
    "error_rho": "max_n E[int (u - U_n)^2(X_n + gamma z) nu(dz)] + K_nu E[(u - U_n)^2(X_n)]",
    "apriori": "3 Hbar (1 + l3) w4 (4 C dt + sum_n E|E[Z~~_n | X_n] - Z_n|^2 + sum_n E|E[Psi~~_n | X_n] - Psi_n|^2)"
               " + (1 + K_g)^2 C(l3) (|Y_0 - y|^2 + dt + Error_rho)",
}


# ---------------------------------------------------------------------------
# minimization


def _golden(func, a, b, tol=GOLDEN_TOL):
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc, fd = func(c), func(d)
    while abs(b - a) > tol * max(abs(a), abs(b)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = func(d)
    return (c, fc) if fc <= fd else (d, fd)


def minimize_scalar(func, lo, hi, points=GRID_POINTS):
    """Minimize on [lo, hi] (lo > 0): log-grid scan, then golden section in the best bracket.

    Returns (argmin, min, clamped) where ``clamped`` says the minimum sits on
    an end of the search range.
    """
    grid = np.geomspace(lo, hi, points)
    values = np.array([func(float(x)) for x in grid])
    i = int(np.argmin(values))
    a = float(grid[max(i - 1, 0)])
    b = float(grid[min(i + 1, points - 1)])
    x, fx = _golden(func, a, b)
    if values[i] < fx:
        x, fx = float(grid[i]), float(values[i])
    clamped = bool(x <= grid[0] * (1 + 1e-6) or x >= grid[-1] * (1 - 1e-6))
    return x, fx, clamped


# ---------------------------------------------------------------------------
# a posteriori constants


@dataclass(frozen=True)
class LambdaInterval:
    lo: float
    hi: float
    feasible: bool
    reason: str = ""


def lambda_feasible_interval(K_f, K_nu, dt):
    """Admissible range of lambda^2, or an infeasible interval with the reason."""
    if K_f <= 0 or dt <= 0:
        raise ArgOutOfDomain("the lambda constraint needs K_f > 0 and dt > 0")
    q = 12.0 * (dt * K_f) ** 2
    if q > 1.0:
        return LambdaInterval(math.nan, math.nan, False, f"12 (dt K_f)^2 = {q:.6g} > 1")
    root = math.sqrt(1.0 - q)
    lo = max(max(1.0, K_nu) * K_f, (1.0 - root) / (6.0 * dt * K_f))
    hi = (1.0 + root) / (6.0 * dt * K_f)
    if lo > hi:
        return LambdaInterval(lo, hi, False, f"lower end {lo:.6g} exceeds upper end {hi:.6g}")
    return LambdaInterval(lo, hi, True)


def _mix(lambda_sq, coefficient):
    return coefficient * lambda_sq + 1.0 / lambda_sq


def f1(lambda_sq, K_f, dt, coefficient=F1_COEFFICIENT):
    rate = dt * K_f * _mix(lambda_sq, coefficient)
    if rate >= 1.0 or lambda_sq <= 0 or dt <= 0:
        raise ArgOutOfDomain(f"log argument 1 - dt K_f (c l2 + 1/l2) = {1.0 - rate:.6g} is not positive")
    return -math.log1p(-rate) / dt


def posteriori_constant(lambda_sq, lambdabar, K_f, K_nu, T, coefficient=F1_COEFFICIENT):
    if lambdabar <= 0 or lambda_sq <= 0:
        raise ArgOutOfDomain("lambda^2 and lambdabar must be positive")
    cap = 1.0 if K_nu <= 1.0 else 1.0 / K_nu
    denominator = cap - K_f / lambda_sq
    if denominator <= 0:
        raise DenominatorNonpositive(
            f"(1 ^ 1/K_nu) - K_f/l2 = {denominator:.6g}; need l2 > (1 v K_nu) K_f = {max(1.0, K_nu) * K_f:.6g}")
    mix = K_f * _mix(lambda_sq, coefficient)
    F1bar = mix + lambdabar
    log_C = math.log(2.0 * (1.0 + 1.0 / lambdabar)) + F1bar * T + math.log1p((1.0 + T * mix) / denominator)
    # very large values are legitimate at the edges of the feasible range
    return math.exp(log_C) if log_C < 700.0 else math.inf


def epsilon_constant(lambda_sq, lambdabar, K_f, K_nu_eps, T, coefficient=F1_COEFFICIENT):
    """The truncated-problem constant: same form with the big-jump mass."""
    return posteriori_constant(lambda_sq, lambdabar, K_f, K_nu_eps, T, coefficient)


@dataclass(frozen=True)
class PosterioriOptimum:
    lambda_sq: float
    lambdabar: float
    C: float
    interval: LambdaInterval
    clamped: dict = field(default_factory=dict)


def minimize_posteriori(K_f, K_nu, T, dt, coefficient=F1_COEFFICIENT, points=GRID_POINTS):
    """Minimize C(l2, lb) over the admissible l2 and lb in (0, 10].

    The constant factors into a lb part and an l2 part, so each is minimized
    on its own.  With K_f = 0 the l2 part is constant and l2 = 1 is reported.
    """
    lb, _, lb_clamped = minimize_scalar(
        lambda v: math.log(1.0 + 1.0 / v) + v * T, LAMBDABAR_MAX * 1e-6, LAMBDABAR_MAX, points)
    if K_f == 0:
        interval = LambdaInterval(0.0, math.inf, True, "K_f = 0: lambda plays no role")
        l2, l2_clamped = 1.0, False
    else:
        interval = lambda_feasible_interval(K_f, K_nu, dt)
        if not interval.feasible:
            raise Infeasible(f"no admissible lambda: {interval.reason}")
        strict = max(1.0, K_nu) * K_f
        lo = max(interval.lo, strict * (1.0 + 1e-9))
        if lo >= interval.hi:
            raise Infeasible("admissible lambda interval is empty under the strict constraint")

        def log_part(l2):
            mix = K_f * _mix(l2, coefficient)
            cap = 1.0 if K_nu <= 1.0 else 1.0 / K_nu
            return mix * T + math.log1p((1.0 + T * mix) / (cap - K_f / l2))

        l2, _, l2_clamped = minimize_scalar(log_part, lo, interval.hi, points)
    C = posteriori_constant(l2, lb, K_f, K_nu, T, coefficient)
    return PosterioriOptimum(l2, lb, C, interval, {"lambda_sq": l2_clamped, "lambdabar": lb_clamped})


def check_lambda_override(lambda_sq, lambdabar, K_f, K_nu, dt):
    """Raise Infeasible unless (l2, lb) satisfies the admissibility constraints."""
    if lambdabar <= 0:
        raise Infeasible("lambdabar must be positive")
    if K_f == 0:
        return
    interval = lambda_feasible_interval(K_f, K_nu, dt)
    strict = max(1.0, K_nu) * K_f
    if not interval.feasible or not (interval.lo <= lambda_sq <= interval.hi) or lambda_sq <= strict:
        raise Infeasible(
            f"lambda^2 = {lambda_sq:g} violates the admissibility constraint "
            f"{FORMULAS['lambda_interval']} with strict lower end (1 v K_nu) K_f = {strict:g}; "
            f"admissible range here is [{interval.lo:g}, {interval.hi:g}]")


# ---------------------------------------------------------------------------
# certificates


@dataclass
class Certificate:
    kind: str  # "posteriori" or "epsilon"
    lambda_sq: float
    lambdabar: float
    F1: float | None
    constant: float
    factor: float  # multiplier of the constant in the bound (1 or 2)
    loss: float
    loss_se: float
    ci: float
    bound_value: float
    remainder: dict
    inputs: dict
    provenance: dict
    config_hash: str | None = None
    seed: int | None = None

    def recompute(self):
        """Bound value from the stored inputs only."""
        i = self.inputs
        C = posteriori_constant(self.lambda_sq, self.lambdabar, i["K_f"], i["K_nu"], i["T"], i["f1_coefficient"])
        return self.factor * C * (self.loss + self.ci)

    def as_dict(self):
        return asdict(self)


def terminal_loss(family, problem, grid, B_eval, master, threads=1):
    """Terminal loss on a fresh evaluation batch, with its standard error."""
    from .solver import evaluate_loss, simulate_forward

    batch = simulate_forward(problem, grid, B_eval, master, rngs.EVAL, 0, threads=threads)
    loss, result = evaluate_loss(family, problem, batch)
    sq = result.residual ** 2
    se = float(sq.std(ddof=1) / math.sqrt(len(sq))) if len(sq) > 1 else math.inf
    return loss, se


def _certificate(kind, family, problem, grid, B_eval, master, coefficient, override, threads):
    K_f = problem.constants.K_f
    K_nu = problem.measure.total_mass()
    if override is not None:
        lambda_sq, lambdabar = override
        check_lambda_override(lambda_sq, lambdabar, K_f, K_nu, grid.dt)
        C = posteriori_constant(lambda_sq, lambdabar, K_f, K_nu, grid.T, coefficient)
        clamped = {}
    else:
        opt = minimize_posteriori(K_f, K_nu, grid.T, grid.dt, coefficient)
        lambda_sq, lambdabar, C, clamped = opt.lambda_sq, opt.lambdabar, opt.C, opt.clamped
    try:
        F1 = f1(lambda_sq, K_f, grid.dt, coefficient)
    except ArgOutOfDomain:
        F1 = None
    loss, se = terminal_loss(family, problem, grid, B_eval, master, threads)
    ci = 1.96 * se
    factor = 2.0 if kind == "epsilon" else 1.0
    remainder = {"dt": grid.dt, "dt_term": "uncertified O(dt) remainder with unknown constant"}
    if kind == "epsilon":
        remainder["small_jump_second_moment"] = problem.small_jumps.small_second_moment
        remainder["small_jump_term"] = "uncertified C_eps (dt + int |z|^2 nu_eps(dz)) remainder"
    inputs = {"K_f": K_f, "K_nu": K_nu, "T": grid.T, "dt": grid.dt, "M": grid.M, "B_eval": int(B_eval),
              "master": int(master), "f1_coefficient": coefficient, "lambda_override": override is not None,
              "problem": problem.name}
    provenance = {"lambda_interval": FORMULAS["lambda_interval"], "F1": FORMULAS["F1"],
                  "F1bar": FORMULAS["F1bar"], "constant": FORMULAS["C"],
                  "bound": FORMULAS["epsilon_bound" if kind == "epsilon" else "posteriori_bound"],
                  "clamped": clamped, "loss": "mean of (g(X_M) - Y_M)^2 over B_eval fresh paths"}
    return Certificate(kind, lambda_sq, lambdabar, F1, C, factor, loss, se, ci, factor * C * (loss + ci),
                       remainder, inputs, provenance)


def posteriori_certificate(family, problem, grid, B_eval=100_000, master=0, coefficient=F1_COEFFICIENT,
                           override=None, threads=1):
    """Certified bound C*(loss + CI) for a finite-activity problem.

    Truncated problems (carrying small-jump statistics) route to
    :func:`epsilon_certificate`.
    """
    if problem.small_jumps is not None:
        return epsilon_certificate(family, problem, grid, B_eval, master, coefficient, override, threads)
    return _certificate("posteriori", family, problem, grid, B_eval, master, coefficient, override, threads)


def epsilon_certificate(family, problem, grid, B_eval=100_000, master=0, coefficient=F1_COEFFICIENT,
                        override=None, threads=1):
    """Certified bound 2 C_eps*(loss + CI) for a truncated problem."""
    problem = getattr(problem, "problem", problem)  # accept an EpsilonPipeline
    if problem.small_jumps is None:
        raise ArgOutOfDomain("epsilon certificates need a truncated problem")
    return _certificate("epsilon", family, problem, grid, B_eval, master, coefficient, override, threads)


def fit_remainder_constant(measured_error, constant, loss, dt):
    """Smallest C with measured_error <= C dt + constant * loss (clamped at 0)."""
    return max(0.0, (measured_error - constant * loss) / dt)


# ---------------------------------------------------------------------------
# a priori constants


@dataclass(frozen=True)
class BoundInputs:
    K_b: float = 0.0
    K_sigma: float = 0.0
    K_gamma: float = 0.0
    K_f: float = 0.0
    K_ft: float = 0.0
    K_g: float = 0.0
    K_nu: float = 0.0
    T: float = 1.0
    dt: float = 0.1
    second_moment: float = 0.0
    C_path: float | None = None

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value is not None and value < 0:
                raise ArgOutOfDomain(f"{name} must be nonnegative")

    @property
    def K_bar(self):
        return max(self.K_b, self.K_sigma, self.K_gamma, self.K_f, self.K_nu)


def bound_inputs(problem, dt, C_path=None):
    """Inputs read off a problem; truncated problems give the big-jump quantities."""
    c = problem.constants
    m = problem.measure
    return BoundInputs(c.K_b, c.K_sigma, c.K_gamma, c.K_f, c.K_ft, c.K_g, m.total_mass(), problem.T, dt,
                       m.second_moment(), C_path)


def log_apriori_H(x, inputs):
    if x <= 0:
        raise NonpositiveX(f"H needs x > 0, got {x!r}")
    i = inputs
    K2 = i.K_bar ** 2
    exponent = i.T * (x + 5.0 * K2 / x + K2 * max(1.0 / x + 1.0 + i.second_moment, 5.0 / x))
    return 2.0 * math.log1p(i.K_g) + math.log1p(5.0 * i.K_f ** 2 / x) + exponent


def apriori_H(x, inputs):
    return math.exp(log_apriori_H(x, inputs))


def minimize_H(inputs, points=GRID_POINTS):
    """(argmin x, H-bar) over x in [1e-8, 1e3]."""
    x, logH, _ = minimize_scalar(lambda v: log_apriori_H(v, inputs), *H_X_RANGE, points=points)
    return x, math.exp(logH)


def apriori_H_eps(x, inputs_eps):
    """H for the truncated problem: pass inputs built from the truncated problem."""
    return apriori_H(x, inputs_eps)


def error_rho(family, ms, batch, anchored=False):
    """(max over n, per-step values) of the network approximation error.

    The loss only sees U_n through gradients and jump differences for n >= 1, so the
    level of those nets is never trained. ``anchored=True`` subtracts the mean gap at
    X_n from every gap of step n, which measures the part the scheme can identify.
    """
    from .solver import as_evaluator

    nets = as_evaluator(family)
    problem = ms.problem
    z, w = problem.measure.quadrature()
    K_nu = problem.measure.total_mass()
    grid = batch.grid
    B, d = batch.B, batch.d
    per_step = []
    for n in range(grid.M):
        t = grid.times[n]
        x = batch.X[:, n]
        residual = ms.u(t, x) - nets.evaluate(n, x)
        shift = residual.mean() if anchored else 0.0
        total = K_nu * ((residual - shift) ** 2).mean()
        if len(w):
            shifted = (x[:, None, :] + np.einsum("nij,qj->nqi", problem.gamma(x), z)).reshape(-1, d)
            jump_gap = ((ms.u(t, shifted) - nets.evaluate(n, shifted) - shift) ** 2).reshape(B, len(w))
            total += (jump_gap @ w).mean()
        per_step.append(float(total))
    return max(per_step), per_step


@dataclass
class AprioriTerm:
    name: str
    value: float | None
    dt_tagged: bool
    note: str = ""


@dataclass
class AprioriReport:
    H_bar: float
    H_argmin: float
    lead: float
    terms: list
    total: float
    excluded: list
    measured: dict
    inputs: dict
    labels: dict

    def as_dict(self):
        return asdict(self)


def assemble_apriori(measured, inputs, lambda3=0.1, lambda4=0.1, C_lambda3=None, truncated=False,
                     malliavin=False):
    """Right-hand side of the a priori bound from measured quantities.

    ``measured`` holds gap_Z, gap_Psi, y0_gap (|Y_0 - y|^2) and error_rho.
    The finite-activity form uses the weight (1 + lambda4) and the truncated
    form (1 + 1/lambda4), as stated for each case.
    """
    x_star, H_bar = minimize_H(inputs)
    w4 = 1.0 + (1.0 / lambda4 if truncated else lambda4)
    lead = 3.0 * H_bar * (1.0 + lambda3) * w4
    tail = (1.0 + inputs.K_g) ** 2
    z_label = "Z(t_n)" if malliavin else "E[Z~~_n | X~_n]"
    psi_label = "Psi(t_n)" if malliavin else "E[Psi~~_n | X~_n]"
    terms = [
        AprioriTerm("path_regularity", None if inputs.C_path is None else lead * 4.0 * inputs.C_path * inputs.dt,
                    True, "4 C dt with C fitted or supplied" if inputs.C_path is not None
                    else "C unknown (depends only on the data); not included"),
        AprioriTerm("gap_Z", lead * measured["gap_Z"], False, f"sum_n E|{z_label} - Z~_n|^2"),
        AprioriTerm("gap_Psi", lead * measured["gap_Psi"], False, f"sum_n E|{psi_label} - Psi~_n|^2"),
    ]
    for name, value, tagged in (("y0_gap", measured["y0_gap"], False), ("dt", inputs.dt, True),
                                ("error_rho", measured["error_rho"], False)):
        if C_lambda3 is None:
            terms.append(AprioriTerm(name, None, tagged,
                                     f"(1 + K_g)^2 C(l3) x {value:.6g}; C(l3) unquantified, not included"))
        else:
            terms.append(AprioriTerm(name, tail * C_lambda3 * value, tagged, "(1 + K_g)^2 C(l3) x measured"))
    numeric = [t.value for t in terms if t.value is not None]
    excluded = [t.name for t in terms if t.value is None]
    labels = {"Z": z_label, "Psi": psi_label}
    return AprioriReport(H_bar, x_star, lead, terms, float(sum(numeric)), excluded, dict(measured),
                         asdict(inputs), labels)


def apriori_report(family, ms, grid, batch, lambda3=0.1, lambda4=0.1, C_path=None, C_lambda3=None,
                   malliavin=False, basis=None):
    """Measure the network-dependent quantities on ``batch`` and assemble the bound.

    ``batch`` must carry sub-grid states (``substeps`` > 1) for the
    time-averaged controls.
    """
    from .reference import tilde_tilde
    from .solver import rollout
    from . import tape

    problem = ms.problem
    with tape.no_grad():
        result = rollout(family, problem, batch, keep=True)
    tt = tilde_tilde(ms, grid, batch, basis)
    M = grid.M
    gap_Z = float(np.sum(np.mean(np.sum((tt.Z - result.Z[:, :M]) ** 2, axis=2), axis=0)))
    gap_Psi = float(np.sum(np.mean((tt.Psi - result.Psi[:, :M]) ** 2, axis=0)))
    rho, _ = error_rho(family, ms, batch)
    y = float(getattr(family, "y0"))
    measured = {"gap_Z": gap_Z, "gap_Psi": gap_Psi, "y0_gap": (ms.Y0 - y) ** 2, "error_rho": rho,
                "terminal_loss": float(tape.value_of(result.loss))}
    inputs = bound_inputs(problem, grid.dt, C_path)
    return assemble_apriori(measured, inputs, lambda3, lambda4, C_lambda3, problem.small_jumps is not None,
                            malliavin)
