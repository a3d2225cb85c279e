"""Lévy measures: moments, quadrature, compound Poisson sampling, truncation.

Three families are built in:

* ``atoms``  finitely many weighted jump sizes,
* ``merton`` ``lam`` times a centred Gaussian N(0, delta^2 I), optionally cut at ``z_max``,
* ``power``  the one-dimensional density c/|z|^(1+alpha) on 0 < |z| <= z_max (infinite activity).

Every measure may carry a radial restriction ``r_lo < |z| <= r_hi``; the
big-jump part produced by :func:`truncate` is the same family with ``r_lo``
raised to epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError, EpsilonOutOfRange, InfiniteActivityMass, QuadratureDivergence

DOUBLING_TOL = 1e-6
MC_NODES = 100_000
MC_SUBSEED = 0x5EED
CDF_TABLE_SIZE = 4096
_LOG_FLOOR = 1e-14  # inner cutoff, relative to the outer radius, for moments of singular densities


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Radial shell ``lo < |z| <= hi`` (``lo`` may be 0, ``hi`` may be inf)."""

    lo: float = 0.0
    hi: float = np.inf

    @staticmethod
    def all():
        return Region()

    @staticmethod
    def ball(eps):
        _check_eps(eps)
        return Region(0.0, float(eps))

    @staticmethod
    def complement(eps):
        _check_eps(eps)
        return Region(float(eps), np.inf)

    def intersect(self, other):
        return Region(max(self.lo, other.lo), min(self.hi, other.hi))

    @property
    def empty(self):
        return self.hi <= self.lo


def _check_eps(eps):
    if not (0.0 < float(eps) <= 1.0):
        raise EpsilonOutOfRange(f"epsilon must lie in (0, 1], got {eps}")


def _mask(z, region):
    r = np.linalg.norm(z, axis=-1)
    return (r > region.lo) & (r <= region.hi)


# ---------------------------------------------------------------------------
# one-dimensional Gauss-Legendre panels


def _gauss_legendre(n):
    x, w = np.polynomial.legendre.leggauss(int(n))
    return x, w


def _panel_rule(edges, n):
    """Nodes and weights of n-point Gauss-Legendre on each panel between consecutive edges."""
    x, w = _gauss_legendre(n)
    lo, hi = edges[:-1, None], edges[1:, None]
    half = 0.5 * (hi - lo)
    nodes = (lo + hi) * 0.5 + half * x[None, :]
    weights = half * w[None, :]
    return nodes.ravel(), weights.ravel()


def _sphere_rule(dim, n):
    """Directions and surface weights on the unit sphere in 2 or 3 dimensions."""
    if dim == 2:
        phi = 2.0 * np.pi * (np.arange(4 * n) + 0.5) / (4 * n)
        return np.stack([np.cos(phi), np.sin(phi)], axis=1), np.full(4 * n, 2.0 * np.pi / (4 * n))
    c, wc = _gauss_legendre(n)
    phi = 2.0 * np.pi * (np.arange(2 * n) + 0.5) / (2 * n)
    s = np.sqrt(1.0 - c * c)
    u = np.stack([
        (s[:, None] * np.cos(phi)[None, :]).ravel(),
        (s[:, None] * np.sin(phi)[None, :]).ravel(),
        np.repeat(c, 2 * n),
    ], axis=1)
    w = np.repeat(wc, 2 * n) * (2.0 * np.pi / (2 * n))
    return u, w


def _radial_edges(lo, hi, log_scale, panels):
    if log_scale:
        lo_eff = lo if lo > 0 else hi * _LOG_FLOOR
        count = max(1, int(np.ceil(np.log2(hi / lo_eff))))
        return np.geomspace(lo_eff, hi, count + 1)
    return np.linspace(lo, hi, panels + 1)


# ---------------------------------------------------------------------------
# measures


class LevyMeasure:
    """Base class.  Subclasses provide ``density`` or ``atoms`` and a family spec."""

    family = "abstract"
    finite_activity = True

    def __init__(self, dim, nodes=8, r_lo=0.0, r_hi=np.inf):
        self.dim = int(dim)
        if self.dim < 1:
            raise ConfigError("measure dimension must be positive")
        self.nodes = int(nodes)
        if self.nodes < 2:
            raise ConfigError("quadrature_hint nodes must be at least 2")
        self.support = Region(float(r_lo), float(r_hi))
        self._rule = None
        self._sampler = None

    # family description -------------------------------------------------
    def params(self):
        raise NotImplementedError

    def describe(self):
        spec = {"family": self.family, "dim": self.dim, "nodes": self.nodes}
        spec.update(self.params())
        spec["r_lo"] = self.support.lo
        spec["r_hi"] = None if np.isinf(self.support.hi) else self.support.hi
        return spec

    def __eq__(self, other):
        return isinstance(other, LevyMeasure) and self.describe() == other.describe()

    def __hash__(self):
        return hash(repr(sorted(self.describe().items())))

    def __repr__(self):
        return f"{type(self).__name__}({self.describe()})"

    def restricted(self, lo):
        """Same family with the inner radius raised to ``lo``."""
        raise NotImplementedError

    # basic integrals ----------------------------------------------------
    def total_mass(self):
        if not self.finite_activity:
            raise InfiniteActivityMass(f"{self.family} measure has infinite total mass")
        return self._stored_mass()

    def _stored_mass(self):
        return float(self.quadrature()[1].sum())

    def integrate(self, integrand, region=None, check=True):
        """Integral of ``integrand(z)`` (rows of z) over ``region``.

        For infinite-activity measures the integrand must vanish fast
        enough at the origin; moments of order two qualify.
        """
        region = self.support if region is None else self.support.intersect(region)
        if region.empty:
            return 0.0 * np.asarray(integrand(np.zeros((1, self.dim))))[0]
        coarse = self._integrate(integrand, region, self.nodes)
        if not check or not self._checkable():
            return coarse
        fine = self._integrate(integrand, region, 2 * self.nodes)
        scale = max(np.max(np.abs(fine)), 1e-300)
        if np.max(np.abs(fine - coarse)) > DOUBLING_TOL * scale:
            raise QuadratureDivergence(
                f"{self.family}: node doubling changed the integral by "
                f"{np.max(np.abs(fine - coarse)) / scale:.2e} (relative)"
            )
        return fine

    def _checkable(self):
        return True

    def second_moment(self, region=None):
        """Integral of |z|^2 over ``region`` (default: the whole support)."""
        return float(self.integrate(lambda z: np.sum(z * z, axis=1), region))

    def moment_matrix(self, region=None):
        """Integral of z z^T over ``region``."""
        value = self.integrate(lambda z: z[:, :, None] * z[:, None, :], region)
        return np.asarray(value, dtype=float).reshape(self.dim, self.dim)

    def mean_jump(self):
        """Integral of z (finite activity)."""
        if not self.finite_activity:
            raise InfiniteActivityMass("the first moment needs finite activity")
        z, w = self.quadrature()
        return w @ z

    def mass_in(self, region):
        if not self.finite_activity and region.intersect(self.support).lo <= 0.0:
            raise InfiniteActivityMass("infinite mass near the origin")
        return float(self.integrate(lambda z: np.ones(len(z)), region))

    def quadrature(self):
        """Fixed nodes and weights (Q x d, Q) representing the whole measure."""
        if not self.finite_activity:
            raise InfiniteActivityMass("quadrature nodes exist only for finite activity")
        if self._rule is None:
            self._rule = self._build_rule(self.support, self.nodes)
        return self._rule

    def nu_integral(self, integrand, check=True):
        """Integral of ``integrand`` against the (finite) measure."""
        if not self.finite_activity:
            raise InfiniteActivityMass("nu_integral requires finite activity")
        z, w = self.quadrature()
        value = np.tensordot(w, np.asarray(integrand(z), dtype=float), axes=(0, 0))
        if check and self._checkable():
            self.integrate(integrand)
        return value

    def _integrate(self, integrand, region, n):
        z, w = self._build_rule(region, n)
        if len(w) == 0:
            return 0.0 * np.asarray(integrand(np.zeros((1, self.dim))))[0]
        return np.tensordot(w, np.asarray(integrand(z), dtype=float), axes=(0, 0))

    def _build_rule(self, region, n):
        raise NotImplementedError

    # sampling -------------------------------------------------------------
    def sample(self, size, rng):
        """Draw ``size`` jump sizes from the normalized measure, shape (size, d)."""
        if not self.finite_activity:
            raise InfiniteActivityMass("cannot sample an infinite-activity measure directly")
        if size == 0:
            return np.zeros((0, self.dim))
        return self._sample(int(size), rng)

    def _sample(self, size, rng):
        raise NotImplementedError

    # construction checks ----------------------------------------------------
    def _validate(self):
        # split at |z| = 1 so every integrand is smooth on its panels
        near = self.integrate(lambda z: np.sum(z * z, axis=1), Region(0.0, 1.0))
        near = near + self.integrate(lambda z: np.ones(len(z)), Region(1.0, np.inf)) if self.finite_activity or self.support.lo > 0 else near
        far = self.integrate(lambda z: np.sum(z * z, axis=1), Region(1.0, np.inf))
        if not (np.isfinite(near) and np.isfinite(far)):
            raise ConfigError(f"{self.family}: the integrability conditions of a Levy measure fail")
        if self.finite_activity:
            z, w = self.quadrature()
            if len(z) and np.any(np.linalg.norm(z, axis=1) == 0.0):
                raise ConfigError("a Levy measure may not charge the origin")
            stored = self._stored_mass()
            check = float(self.integrate(lambda z: np.ones(len(z))))
            if abs(check - stored) > DOUBLING_TOL * max(stored, 1e-300):
                raise QuadratureDivergence(f"{self.family}: quadrature mass {check} disagrees with {stored}")


class AtomMeasure(LevyMeasure):
    """Finitely many atoms ``sizes[i]`` with weights ``weights[i]``."""

    family = "atoms"

    def __init__(self, sizes, weights, nodes=8, r_lo=0.0, r_hi=np.inf):
        sizes = np.asarray(sizes, dtype=float)
        if sizes.ndim == 1:
            sizes = sizes[:, None]
        weights = np.asarray(weights, dtype=float)
        if len(sizes) != len(weights):
            raise ConfigError("atoms need one weight per size")
        if np.any(weights < 0):
            raise ConfigError("atom weights must be nonnegative")
        super().__init__(sizes.shape[1], nodes, r_lo, r_hi)
        if np.any((np.linalg.norm(sizes, axis=1) == 0) & (weights > 0)):
            raise ConfigError("a Levy measure may not charge the origin")
        keep = _mask(sizes, self.support) & (weights > 0)
        self.all_sizes, self.all_weights = sizes, weights
        self.sizes, self.weights = sizes[keep], weights[keep]
        self._validate()

    def params(self):
        return {"atoms": [[list(map(float, z)), float(w)] for z, w in zip(self.all_sizes, self.all_weights)]}

    def describe(self):
        spec = super().describe()
        # atoms outside the support are irrelevant to the law
        spec["atoms"] = [[list(map(float, z)), float(w)] for z, w in zip(self.sizes, self.weights)]
        spec["r_lo"] = 0.0
        spec["r_hi"] = None
        return spec

    def _checkable(self):
        return False  # atom sums are exact

    def _stored_mass(self):
        return float(self.weights.sum())

    def _build_rule(self, region, n):
        keep = _mask(self.sizes, region)
        return self.sizes[keep], self.weights[keep]

    def restricted(self, lo):
        return AtomMeasure(self.all_sizes, self.all_weights, self.nodes, max(lo, self.support.lo), self.support.hi)

    def _sample(self, size, rng):
        p = self.weights / self.weights.sum()
        return self.sizes[rng.choice(len(p), size=size, p=p)]


class DensityMeasure(LevyMeasure):
    """Measure with a Lebesgue density; subclasses supply ``density`` and metadata."""

    singular = False  # density blows up at the origin

    def density(self, z):
        raise NotImplementedError

    def _outer(self):
        return self.support.hi

    def _build_rule(self, region, n):
        hi = min(region.hi, self._outer())
        lo = region.lo
        if hi <= lo:
            return np.zeros((0, self.dim)), np.zeros(0)
        if self.dim == 1:
            r, w = _panel_rule(_radial_edges(lo, hi, self.singular or (lo > 0 and hi / lo > 8), 4), n)
            z = np.concatenate([-r[::-1], r])[:, None]
            w = np.concatenate([w[::-1], w])
            return z, w * self.density(z)
        if self.singular:
            raise ConfigError("singular densities are supported in one dimension only")
        if self.dim <= 3:
            # radial density: Gauss-Legendre in the radius, spherical rule for directions
            r, wr = _panel_rule(_radial_edges(lo, hi, lo > 0 and hi / lo > 8, 4), n)
            u, wu = _sphere_rule(self.dim, n)
            z = (r[:, None, None] * u[None, :, :]).reshape(-1, self.dim)
            w = (wr[:, None] * r[:, None] ** (self.dim - 1) * wu[None, :]).ravel()
            return z, w * self.density(z)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(MC_SUBSEED, spawn_key=(n,))))
        z = self._sample(MC_NODES, rng)
        keep = _mask(z, region)
        return z[keep], np.full(keep.sum(), self._stored_mass() / MC_NODES)

    def _checkable(self):
        return self.dim <= 3


class MertonMeasure(DensityMeasure):
    """``lam`` times the N(0, delta^2 I) law, optionally restricted to a shell."""

    family = "merton"

    def __init__(self, lam, delta, dim=1, z_max=None, nodes=8, r_lo=0.0):
        if lam < 0 or delta <= 0:
            raise ConfigError("merton needs lambda >= 0 and delta > 0")
        self.lam, self.delta = float(lam), float(delta)
        self._mass = None
        super().__init__(dim, nodes, r_lo, np.inf if z_max is None else float(z_max))
        self._validate()

    def params(self):
        return {"lambda": self.lam, "delta": self.delta}

    def restricted(self, lo):
        z_max = None if np.isinf(self.support.hi) else self.support.hi
        return MertonMeasure(self.lam, self.delta, self.dim, z_max, self.nodes, max(lo, self.support.lo))

    def density(self, z):
        r2 = np.sum(z * z, axis=1)
        norm = (2.0 * np.pi * self.delta ** 2) ** (-self.dim / 2.0)
        return self.lam * norm * np.exp(-0.5 * r2 / self.delta ** 2) * _mask(z, self.support)

    def _outer(self):
        # the Gaussian tail beyond 10 delta is below double precision
        return min(self.support.hi, 10.0 * self.delta)

    def _stored_mass(self):
        if self._mass is None:
            law = stats.chi(self.dim)
            hi = law.cdf(self.support.hi / self.delta) if np.isfinite(self.support.hi) else 1.0
            self._mass = float(self.lam * (hi - law.cdf(self.support.lo / self.delta)))
        return self._mass

    def _sample(self, size, rng):
        out = np.empty((0, self.dim))
        while len(out) < size:
            draw = self.delta * rng.standard_normal((max(2 * (size - len(out)), 16), self.dim))
            out = np.concatenate([out, draw[_mask(draw, self.support)]])
        return out[:size]


class PowerMeasure(DensityMeasure):
    """Density c/|z|^(1+alpha) on r_lo < |z| <= z_max in one dimension."""

    family = "power"
    singular = True

    def __init__(self, c, alpha, z_max=1.0, nodes=8, r_lo=0.0):
        if c <= 0 or not (0.0 < alpha < 2.0):
            raise ConfigError("power needs c > 0 and alpha in (0, 2)")
        if z_max is None or not np.isfinite(z_max) or z_max <= 0:
            raise ConfigError("power needs a finite z_max: its tail second moment diverges otherwise")
        self.c, self.alpha = float(c), float(alpha)
        super().__init__(1, nodes, r_lo, float(z_max))
        self.finite_activity = self.support.lo > 0.0
        self._validate()

    def params(self):
        return {"c": self.c, "alpha": self.alpha}

    def restricted(self, lo):
        return PowerMeasure(self.c, self.alpha, self.support.hi, self.nodes, max(lo, self.support.lo))

    def density(self, z):
        r = np.abs(z[:, 0])
        with np.errstate(divide="ignore"):
            return np.where(_mask(z, self.support), self.c * r ** (-1.0 - self.alpha), 0.0)

    def _sample(self, size, rng):
        if self._sampler is None:
            self._sampler = InverseCdfTable(self)
        return self._sampler(size, rng)


class InverseCdfTable:
    """Inverse-CDF sampler for a one-dimensional radial shell, tabulated in log radius."""

    def __init__(self, measure, size=CDF_TABLE_SIZE):
        lo, hi = measure.support.lo, min(measure.support.hi, measure._outer())
        s = np.linspace(np.log(lo), np.log(hi), size)
        x, w = _gauss_legendre(4)
        a, b = s[:-1, None], s[1:, None]
        nodes = 0.5 * (a + b) + 0.5 * (b - a) * x
        # side masses, radial density symmetric in sign only if the density is
        r = np.exp(nodes)
        plus = (measure.density(r.reshape(-1, 1)).reshape(r.shape) * r * 0.5 * (b - a) * w).sum(axis=1)
        minus = (measure.density(-r.reshape(-1, 1)).reshape(r.shape) * r * 0.5 * (b - a) * w).sum(axis=1)
        self.s = s
        self.cdf_plus = np.concatenate([[0.0], np.cumsum(plus)])
        self.cdf_minus = np.concatenate([[0.0], np.cumsum(minus)])

    def __call__(self, size, rng):
        u = rng.random(size)
        side = rng.random(size)
        total_plus, total_minus = self.cdf_plus[-1], self.cdf_minus[-1]
        positive = side * (total_plus + total_minus) < total_plus
        radius = np.where(
            positive,
            np.interp(u * total_plus, self.cdf_plus, self.s),
            np.interp(u * total_minus, self.cdf_minus, self.s),
        )
        return (np.where(positive, 1.0, -1.0) * np.exp(radius))[:, None]


# ---------------------------------------------------------------------------
# operations


def total_mass(measure):
    return measure.total_mass()


def second_moment(measure, region=None):
    return measure.second_moment(region)


def nu_integral(measure, integrand):
    return measure.nu_integral(integrand)


@dataclass(frozen=True)
class JumpRecord:
    """Jumps arriving in one interval."""

    count: int
    sizes: np.ndarray
    interval_index: int = 0

    def __post_init__(self):
        if self.count != len(self.sizes):
            raise ValueError("count must equal the number of jump sizes")


def sample_jumps(measure, dt, rng, interval_index=0):
    """Compound Poisson jumps on an interval of length ``dt``."""
    if dt == 0:
        return JumpRecord(0, np.zeros((0, measure.dim)), interval_index)
    count = int(rng.poisson(measure.total_mass() * dt))
    return JumpRecord(count, measure.sample(count, rng), interval_index)


def psd_sqrt(matrix):
    """Symmetric square root with negative eigenvalues clamped to zero."""
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


@dataclass(frozen=True)
class TruncationStats:
    epsilon: float
    big_mass: float
    small_second_moment: float
    sigma_eps: np.ndarray = field(repr=False)
    sigma_eps_sqrt: np.ndarray = field(repr=False)

    @property
    def sigma_eps_trace(self):
        return float(np.trace(self.sigma_eps))

    @property
    def sqrt_norm(self):
        """Operator norm of the square root, the factor entering the sigma Lipschitz constant."""
        return float(np.linalg.norm(self.sigma_eps_sqrt, 2))


def truncate(measure, epsilon):
    """Split ``measure`` at ``|z| = epsilon`` into a finite big part and small-jump statistics."""
    _check_eps(epsilon)
    big = measure.restricted(float(epsilon))
    small = Region.ball(epsilon)
    sigma = measure.moment_matrix(small)
    sigma = 0.5 * (sigma + sigma.T)
    stats_ = TruncationStats(
        epsilon=float(epsilon),
        big_mass=big.total_mass(),
        small_second_moment=measure.second_moment(small),
        sigma_eps=sigma,
        sigma_eps_sqrt=psd_sqrt(sigma),
    )
    return big, stats_


def build_measure(spec, dim=1):
    """Construct a measure from a config mapping with a ``family`` key."""
    spec = dict(spec)
    family = spec.pop("family", None)
    nodes = int(spec.pop("nodes", 8))
    z_max = spec.pop("z_max", None)
    try:
        if family == "atoms":
            atoms = spec.pop("atoms")
            sizes = [np.atleast_1d(np.asarray(z, dtype=float)) for z, _ in atoms]
            sizes = [np.full(dim, s[0]) if s.size == 1 and dim > 1 else s for s in sizes]
            weights = [float(w) for _, w in atoms]
            measure = AtomMeasure(sizes, weights, nodes, 0.0, np.inf if z_max is None else z_max)
        elif family == "merton":
            measure = MertonMeasure(spec.pop("lambda"), spec.pop("delta"), dim, z_max, nodes)
        elif family == "power":
            if dim != 1:
                raise ConfigError("the power family is one-dimensional")
            measure = PowerMeasure(spec.pop("c"), spec.pop("alpha"), 1.0 if z_max is None else z_max, nodes)
        else:
            raise ConfigError(f"unknown measure family {family!r}; use atoms, merton or power")
    except KeyError as exc:
        raise ConfigError(f"measure family {family!r} is missing parameter {exc.args[0]!r}") from None
    if spec:
        raise ConfigError(f"unknown measure parameters {sorted(spec)} for family {family!r}")
    if measure.dim != dim:
        raise ConfigError(f"measure dimension {measure.dim} does not match problem dimension {dim}")
    return measure


__all__ = [
    "AtomMeasure", "MertonMeasure", "PowerMeasure", "LevyMeasure", "Region", "JumpRecord",
    "TruncationStats", "total_mass", "second_moment", "nu_integral", "sample_jumps", "truncate",
    "psd_sqrt", "build_measure",
]
