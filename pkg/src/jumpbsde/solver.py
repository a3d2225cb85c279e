"""Forward Euler simulation with jumps, the deep BSDE rollout and training.

Paths are simulated once per training iteration from counter-based seeds:
the block of paths ``[256 j, 256 (j + 1))`` of iteration ``k`` draws its
Brownian increments, Poisson jump counts over [0, T], jump times and jump
sizes from its own generator.  Binning the jump times into grid cells gives
per-interval jump counts with the same law as independent Poisson draws per
interval.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import levy, rng as rngs, tape
from .errors import ConfigError, FiniteActivityInput, NonFiniteLoss, NonFiniteState
from .levy import JumpRecord
from .nets import NetFamily, backprop_params, evaluate
from .optim import SGD, Adam, PiecewiseConstant, clip_by_norm

log = logging.getLogger(__name__)

BLOCK = 256


@dataclass(frozen=True)
class TimeGrid:
    M: int
    T: float

    def __post_init__(self):
        if self.M < 1 or self.T <= 0:
            raise ConfigError("the grid needs M >= 1 steps and T > 0")

    @property
    def dt(self):
        return self.T / self.M

    @property
    def times(self):
        return np.arange(self.M + 1) * self.dt


# ---------------------------------------------------------------------------
# noise and forward paths


@dataclass
class Noise:
    """Brownian increments and binned jumps on ``cells`` equal subintervals of [0, T]."""

    dW: np.ndarray  # (B, cells, d)
    counts: np.ndarray  # (B, cells)
    sums: np.ndarray  # (B, cells, d) raw sums of jump sizes
    sizes: np.ndarray  # (J, d) all jump sizes, ordered by path then time
    offsets: np.ndarray  # (B * cells + 1,) start of each (path, cell) block in ``sizes``


def _draw_block(measure, T, cells, d, gen, mass, size):
    dW = gen.standard_normal((size, cells, d)) * np.sqrt(T / cells)
    per_path = gen.poisson(mass * T, size) if mass > 0 else np.zeros(size, np.int64)
    total = int(per_path.sum())
    owner = np.repeat(np.arange(size), per_path)
    times = gen.uniform(0.0, T, total)
    sizes = measure.sample(total, gen) if total else np.zeros((0, d))
    order = np.lexsort((times, owner))
    cell = np.minimum((times[order] * (cells / T)).astype(np.int64), cells - 1)
    return dW, owner * cells + cell, sizes[order]


def draw_noise(measure, T, cells, d, master, stream, iteration, first_path, B, threads=1):
    """Noise for paths ``first_path .. first_path + B - 1``.

    Paths are generated in fixed blocks of ``BLOCK`` absolute indices, each
    from its own counter-based seed, so any path's noise is independent of
    how the batch is split across calls or threads.
    """
    mass = measure.total_mass()
    lo, hi = first_path // BLOCK, (first_path + B - 1) // BLOCK if B else first_path // BLOCK - 1

    def work(block):
        gen = rngs.generator(master, stream, iteration, block)
        return _draw_block(measure, T, cells, d, gen, mass, BLOCK)

    blocks = list(range(lo, hi + 1))
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    skip = first_path - lo * BLOCK
    dW = np.concatenate([p[0] for p in parts])[skip:skip + B] if parts else np.zeros((0, cells, d))
    flat_cell = np.concatenate([p[1] + k * BLOCK * cells for k, p in enumerate(parts)]) if parts else np.zeros(0, np.int64)
    sizes = np.concatenate([p[2] for p in parts]) if parts else np.zeros((0, d))
    keep = (flat_cell >= skip * cells) & (flat_cell < (skip + B) * cells)
    flat_cell = flat_cell[keep] - skip * cells
    sizes = sizes[keep]
    counts = np.bincount(flat_cell, minlength=B * cells).reshape(B, cells)
    sums = np.zeros((B * cells, d))
    np.add.at(sums, flat_cell, sizes)
    offsets = np.concatenate([[0], np.cumsum(counts.ravel())])
    return Noise(dW, counts, sums.reshape(B, cells, d), sizes, offsets)


@dataclass
class PathBatch:
    """Simulated Euler paths on a uniform grid.

    With ``substeps`` > 1 the batch also carries the sub-grid states
    ``fine_states`` driven by the same noise.
    """

    grid: TimeGrid
    X: np.ndarray  # (B, M+1, d)
    dW: np.ndarray  # (B, M, d)
    counts: np.ndarray  # (B, M)
    sums: np.ndarray  # (B, M, d)
    noise: Noise
    substeps: int
    lineage: dict
    mass: float
    fine_states: np.ndarray | None = None

    @property
    def B(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[2]

    def compensated_count(self, n):
        """Integral of the compensated jump measure over interval n."""
        return self.counts[:, n] - self.mass * self.grid.dt

    def jump_record(self, path, n):
        s = self.substeps
        cells = self.grid.M * s
        lo = self.noise.offsets[path * cells + n * s]
        hi = self.noise.offsets[path * cells + (n + 1) * s]
        return JumpRecord(int(hi - lo), self.noise.sizes[lo:hi], n)


def euler(problem, X0, dt, dW, counts, sums, mean_jump):
    """Euler states (B, steps+1, d) for increments on a uniform grid of step dt."""
    B, steps, d = dW.shape
    X = np.empty((B, steps + 1, d))
    X[:, 0] = X0
    const = problem.constant
    if const is not None:
        b, sig, gam = const["b"], const["sigma"], const["gamma"]
        drift = b * dt - dt * (gam @ mean_jump)
        inc = drift + dW @ sig + sums @ gam.T
        X[:, 1:] = X0 + np.cumsum(inc, axis=1)
    else:
        for n in range(steps):
            x = X[:, n]
            gam = problem.gamma(x)
            X[:, n + 1] = (x + problem.b(x) * dt + np.einsum("nji,nj->ni", problem.sigma(x), dW[:, n])
                           + np.einsum("nij,nj->ni", gam, sums[:, n] - dt * mean_jump))
    bad = ~np.isfinite(X)
    if bad.any():
        path, step, _ = np.argwhere(bad)[0]
        raise NonFiniteState(f"non-finite state on path {path} at step {step}", int(path), int(step))
    return X


def simulate_forward(problem, grid, B, master=0, stream=rngs.TRAIN, iteration=0, substeps=1, threads=1, first_path=0):
    """Simulate ``B`` Euler paths with compensated jumps."""
    measure = problem.measure
    if not measure.finite_activity:
        raise FiniteActivityInput("simulation needs a finite-activity measure; build an epsilon pipeline first")
    if problem.T != grid.T:
        raise ConfigError("grid horizon differs from the problem horizon")
    s = int(substeps)
    noise = draw_noise(measure, grid.T, grid.M * s, problem.d, master, stream, iteration, first_path, B, threads)
    dW = noise.dW.reshape(B, grid.M, s, problem.d).sum(axis=2)
    counts = noise.counts.reshape(B, grid.M, s).sum(axis=2)
    sums = noise.sums.reshape(B, grid.M, s, problem.d).sum(axis=2)
    mean_jump = measure.mean_jump()
    X = euler(problem, problem.x0, grid.dt, dW, counts, sums, mean_jump)
    fine = None
    if s > 1:
        fine = euler(problem, problem.x0, grid.dt / s, noise.dW, noise.counts, noise.sums, mean_jump)
    lineage = {"master": int(master), "stream": int(stream), "iteration": int(iteration),
               "first_path": int(first_path)}
    return PathBatch(grid, X, dW, counts, sums, noise, s, lineage, measure.total_mass(), fine)


# ---------------------------------------------------------------------------
# rollout


class ExactNets:
    """Stand-in for a family that evaluates a closed-form function of (t_n, x)."""

    def __init__(self, u, grad_u, grid, y0):
        self.u, self.grad_u, self.grid, self.y0 = u, grad_u, grid, y0

    def evaluate(self, n, x, with_grad=False):
        t = self.grid.times[n]
        if with_grad:
            return self.u(t, x), self.grad_u(t, x)
        return self.u(t, x)


class PlainFamily:
    """Array-valued evaluation of a :class:`NetFamily` (no recording)."""

    def __init__(self, family):
        self.family = family
        self.y0 = family.y0

    def evaluate(self, n, x, with_grad=False):
        net = self.family.nets[n]
        return evaluate(net.weights, net.biases, x, net.activation, with_grad)


def as_evaluator(family):
    return PlainFamily(family) if isinstance(family, NetFamily) else family


@dataclass
class RolloutResult:
    loss: object  # Tensor when recorded, float otherwise
    Y_M: np.ndarray
    Y: np.ndarray | None = None  # (B, M+1)
    Z: np.ndarray | None = None  # (B, M+1, d), zero at M
    Psi: np.ndarray | None = None  # (B, M+1), zero at M
    residual: np.ndarray | None = None  # g(X_M) - Y_M per path


def rollout(family, problem, batch, keep=False):
    """Run the deep scheme along ``batch`` and return the terminal loss.

    ``family`` is a :class:`NetFamily`, a recorded family (tensor parameters,
    the loss is then differentiable) or any object with ``evaluate(n, x,
    with_grad)`` and ``y0``.
    """
    nets = as_evaluator(family)
    grid = batch.grid
    dt = grid.dt
    B, d = batch.B, batch.d
    if len(getattr(family, "nets", range(grid.M))) < grid.M and isinstance(family, NetFamily):
        raise ConfigError("family has fewer networks than time steps")
    z_nodes, w = problem.measure.quadrature()
    Q = len(w)
    y0 = nets.y0
    Y = y0 * np.ones(B) if isinstance(y0, tape.Tensor) else np.full(B, float(y0))
    keep_Y, keep_Z, keep_P = [], [], []
    const = problem.constant
    for n in range(grid.M):
        t = grid.times[n]
        x = batch.X[:, n]
        gam = const["gamma"][None] if const is not None else problem.gamma(x)
        u_x, grad = nets.evaluate(n, x, with_grad=True)
        if const is not None:
            Z = grad @ const["sigma"]
        else:
            Z = (grad.reshape(B, d, 1) * problem.sigma(x)).sum(axis=1)
        if Q:
            offsets = z_nodes @ gam[0].T if const is not None else np.swapaxes(gam @ z_nodes.T, 1, 2)
            shifted = (x[:, None, :] + offsets).reshape(B * Q, d)
            u_shift = nets.evaluate(n, shifted).reshape(B, Q)
            Psi = ((u_shift - u_x.reshape(B, 1)) * w).sum(axis=1)
        else:
            Psi = 0.0 * u_x
        jump_pos = x + (batch.sums[:, n] @ gam[0].T if const is not None else (gam @ batch.sums[:, n, :, None])[..., 0])
        jumped = batch.counts[:, n] > 0
        u_jump = nets.evaluate(n, jump_pos)
        jump_term = (u_jump - u_x) * jumped.astype(float)
        if keep:
            keep_Y.append(tape.value_of(Y))
            keep_Z.append(tape.value_of(Z))
            keep_P.append(tape.value_of(Psi))
        f = problem.f(t, x, Y, Z, Psi)
        Y = Y - f * dt + (Z * batch.dW[:, n]).sum(axis=1) + jump_term - dt * Psi
    residual = problem.g(batch.X[:, -1]) - Y
    loss = (residual * residual).mean()
    result = RolloutResult(loss=loss, Y_M=tape.value_of(Y).copy(), residual=tape.value_of(residual).copy())
    if keep:
        keep_Y.append(tape.value_of(Y))
        keep_Z.append(np.zeros((B, d)))
        keep_P.append(np.zeros(B))
        result.Y = np.stack([np.broadcast_to(v, (B,)) for v in keep_Y], axis=1)
        result.Z = np.stack([np.broadcast_to(v, (B, d)) for v in keep_Z], axis=1)
        result.Psi = np.stack([np.broadcast_to(v, (B,)) for v in keep_P], axis=1)
    if not np.isfinite(tape.value_of(loss)).all():
        raise NonFiniteLoss("rollout produced a non-finite loss")
    return result


def evaluate_loss(family, problem, batch):
    with tape.no_grad():
        result = rollout(family, problem, batch)
    return float(tape.value_of(result.loss)), result


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 256
    optimizer: str = "adam"
    learning_rates: tuple = (1e-2,)
    boundaries: tuple = ()
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    clip_norm: float | None = 10.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if len(self.learning_rates) != len(self.boundaries) + 1:
            raise ConfigError("learning_rates needs one more entry than boundaries")
        if any(lr <= 0 for lr in self.learning_rates):
            raise ConfigError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; use adam or sgd")

    def make_optimizer(self):
        schedule = PiecewiseConstant(tuple(self.learning_rates), tuple(self.boundaries))
        if self.optimizer == "sgd":
            return SGD(schedule)
        return Adam(schedule, self.beta1, self.beta2, self.eps_adam)


@dataclass
class TrainedSolver:
    family: NetFamily
    losses: np.ndarray
    y0_history: np.ndarray
    grid: TimeGrid
    config: TrainConfig
    wall_time: float = 0.0
    checkpoints: dict = field(default_factory=dict)


def init_family(problem, grid, seed, hidden=None, width=None, y0=0.0, activation="sigmoid"):
    """Xavier-initialized family with default width d + 10 and two hidden layers."""
    width = problem.d + 10 if width is None else int(width)
    hidden = 2 if hidden is None else int(hidden)
    dims = [problem.d] + [width] * hidden + [1]
    return NetFamily.initialize(grid.M, dims, lambda n: rngs.generator(seed, rngs.INIT, n), y0, activation)


def train(problem, grid, config, family, callback=None, checkpoint_every=None):
    """Minimize the terminal loss with a fresh batch every iteration."""
    family = family.copy()
    optimizer = config.make_optimizer()
    params = family.flat()
    losses, y0s = [], []
    checkpoints = {}
    start = time.perf_counter()
    for k in range(config.iterations):
        batch = simulate_forward(problem, grid, config.batch_size, config.seed, rngs.TRAIN, k, threads=config.threads)
        recorded = family.record()
        result = rollout(recorded, problem, batch)
        loss = float(result.loss.value)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss at iteration {k}", k)
        grad = backprop_params(recorded, result.loss)
        params = optimizer.step(params, clip_by_norm(grad, config.clip_norm))
        family.load_flat(params)
        losses.append(loss)
        y0s.append(family.y0)
        if checkpoint_every and (k + 1) % checkpoint_every == 0:
            checkpoints[k + 1] = family.flat().copy()
        if callback is not None:
            callback(k, loss, family)
    wall = time.perf_counter() - start
    log.info("trained %d iterations in %.1f s", config.iterations, wall)
    return TrainedSolver(family, np.array(losses), np.array(y0s), grid, config, wall, checkpoints)


# ---------------------------------------------------------------------------
# infinite activity


@dataclass(frozen=True)
class EpsilonPipeline:
    epsilon: float
    problem: object  # truncated FbsdeProblem (finite activity, sigma_eps)
    stats: levy.TruncationStats
    K_sigma_eps: float


def build_epsilon_pipeline(problem, epsilon, allow_finite=False):
    """Replace jumps below ``epsilon`` by the diffusion sigma + gamma sqrt(Sigma_eps)."""
    if problem.measure.finite_activity and not allow_finite:
        raise FiniteActivityInput("truncation targets infinite-activity measures (pass allow_finite to override)")
    big, stats = levy.truncate(problem.measure, epsilon)
    root = stats.sigma_eps_sqrt
    base_sigma, base_gamma = problem.sigma, problem.gamma

    def sigma_eps(x):
        return base_sigma(x) + base_gamma(x) @ root

    K_sigma_eps = problem.constants.K_sigma + problem.constants.K_gamma * stats.sqrt_norm
    constant = None
    if problem.constant is not None:
        constant = dict(problem.constant)
        constant["sigma"] = problem.constant["sigma"] + problem.constant["gamma"] @ root
    truncated = problem.with_measure(big, sigma=sigma_eps, K_sigma=K_sigma_eps, constant=constant, small_jumps=stats)
    return EpsilonPipeline(float(epsilon), truncated, stats, float(K_sigma_eps))


# ---------------------------------------------------------------------------
# statistics


def strong_error_study(problem, T, M_list, fine_M=4096, B=100_000, master=0, chunk=2048, threads=1):
    """max_n E[sup_{t in [t_n, t_{n+1}]} |X_t - X~_n|^2] against a fine Euler coupling.

    Returns a list of (M, dt, error) rows.
    """
    measure = problem.measure
    mean_jump = measure.mean_jump()
    d = problem.d
    for M in M_list:
        if fine_M % M:
            raise ConfigError(f"fine grid {fine_M} is not a multiple of {M}")
    totals = {M: np.zeros(M) for M in M_list}
    for start in range(0, B, chunk):
        size = min(chunk, B - start)
        noise = draw_noise(measure, T, fine_M, d, master, rngs.STUDY, 0, start, size, threads)
        fine = euler(problem, problem.x0, T / fine_M, noise.dW, noise.counts, noise.sums, mean_jump)
        for M in M_list:
            s = fine_M // M
            dW = noise.dW.reshape(size, M, s, d).sum(axis=2)
            counts = noise.counts.reshape(size, M, s).sum(axis=2)
            sums = noise.sums.reshape(size, M, s, d).sum(axis=2)
            coarse = euler(problem, problem.x0, T / M, dW, counts, sums, mean_jump)
            for n in range(M):
                window = fine[:, n * s:(n + 1) * s + 1]
                gap = np.sum((window - coarse[:, n:n + 1]) ** 2, axis=2).max(axis=1)
                totals[M][n] += gap.sum()
    return [(M, T / M, float(np.max(totals[M] / B))) for M in M_list]


def loglog_slope(dts, errors):
    """Least-squares slope of log(error) against log(dt)."""
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])


def consistency_statistics(problem, batch, result, degree=2):
    """Studentized sample means of the three conditional-moment identities.

    For each step n and each test function h in {1, x_1, x_1^2, x_d, x_1 x_d}
    returns |mean| / SE for
    (Y_{n+1} - Y_n + f dt) h, (Y_{n+1} dW_n - dt Z_n) h and
    (Y_{n+1} dN~_n - dt Psi_n) h.  Output shape (3, M, number of h).
    """
    grid = batch.grid
    dt = grid.dt
    M = grid.M
    Y, Z, P = result.Y, result.Z, result.Psi
    out = []
    for n in range(M):
        x = batch.X[:, n]
        tests = _test_functions(x)
        f = problem.f(grid.times[n], x, Y[:, n], Z[:, n], P[:, n])
        a = Y[:, n + 1] - Y[:, n] + f * dt
        b = Y[:, n + 1][:, None] * batch.dW[:, n] - dt * Z[:, n]
        c = Y[:, n + 1] * batch.compensated_count(n) - dt * P[:, n]
        rows = []
        for quantity in (a, b, c):
            if quantity.ndim == 1:
                quantity = quantity[:, None]
            stats_ = []
            for h in tests:
                sample = quantity * h[:, None]
                mean = sample.mean(axis=0)
                se = sample.std(axis=0, ddof=1) / np.sqrt(len(sample))
                with np.errstate(divide="ignore", invalid="ignore"):
                    z = np.where(se > 0, np.abs(mean) / se, np.where(np.abs(mean) > 1e-12, np.inf, 0.0))
                stats_.append(float(np.max(z)))
            rows.append(stats_)
        out.append(rows)
    return np.transpose(np.array(out), (1, 0, 2))


def _test_functions(x):
    first, last = x[:, 0], x[:, -1]
    return [np.ones(len(x)), first, first * first, last, first * last]
