"""Levy measures for the driving noise and for the observation random measure.

Two concrete representations are supported:

* finite atomic measures (list of marks with non-negative masses), for which
  every annulus query and every jump-operator sum is exact, and

* parametric radial measures on the line, given by one-sided densities with
  analytic (or quadrature) annulus masses and exact inverse-CDF samplers.

All annulus conventions are half-open: region(r_lo, r_hi) means
{z : r_lo < |z| <= r_hi}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate


class LevyConfigError(ValueError):
    """Raised for ill-posed measure or truncation configurations."""


class InfiniteMassError(LevyConfigError):
    """Raised when an operation needs a finite mass on a region that has none."""


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mark: np.ndarray


class JumpEvents:
    """Jump events of one path, stored as arrays, viewable as JumpEvent items.

    Times are strictly increasing; marks are (n, dim).
    """

    def __init__(self, times: np.ndarray, marks: np.ndarray):
        times = np.asarray(times, dtype=float)
        marks = np.asarray(marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        if times.shape[0] != marks.shape[0]:
            raise LevyConfigError("times and marks length mismatch")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise LevyConfigError("jump times must be strictly increasing")
        self.times = times
        self.marks = marks

    def __len__(self) -> int:
        return self.times.shape[0]

    def __getitem__(self, i: int) -> JumpEvent:
        return JumpEvent(float(self.times[i]), self.marks[i].copy())

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @staticmethod
    def empty(dim: int) -> "JumpEvents":
        return JumpEvents(np.empty(0), np.empty((0, dim)))


@dataclass(frozen=True)
class TruncationConfig:
    """Big/small jump handling for the simulation of the driver.

    level: the cutoff l > 0 separating compensated from raw jumps.
    small_jump_mode: 'exact_compound_poisson' samples every atom of the
        driver (requires the measure to have finite total activity);
        'discard_below_eps' drops atoms with |z| <= eps and reports the
        discarded variance so experiments can bound the bias.
    """

    level: float
    small_jump_mode: str = "exact_compound_poisson"
    eps: float | None = None

    def __post_init__(self):
        if not self.level > 0:
            raise LevyConfigError("truncation level must be strictly positive")
        if self.small_jump_mode not in ("exact_compound_poisson", "discard_below_eps"):
            raise LevyConfigError(f"unknown small_jump_mode: {self.small_jump_mode!r}")
        if self.small_jump_mode == "discard_below_eps":
            if self.eps is None or not 0 < self.eps <= self.level:
                raise LevyConfigError("discard_below_eps requires 0 < eps <= level")

    @property
    def sampling_floor(self) -> float:
        """Radius below which driver atoms are not sampled."""
        return self.eps if self.small_jump_mode == "discard_below_eps" else 0.0


class LevyMeasure:
    """Base class: annulus mass/moment queries plus restricted sampling."""

    dim: int
    max_radius: float = math.inf

    # -- queries ---------------------------------------------------------

    def mass(self, r_lo: float = 0.0, r_hi: float = math.inf) -> float:
        raise NotImplementedError

    def first_moment(self, r_lo: float, r_hi: float) -> np.ndarray:
        """Vector integral of z over the annulus."""
        raise NotImplementedError

    def second_moment(self, r_lo: float, r_hi: float) -> float:
        """Integral of |z|^2 over the annulus (may be inf)."""
        raise NotImplementedError

    def radial_integral(self, fn, r_lo: float, r_hi: float) -> float:
        """Integral of fn(|z|) over the annulus."""
        raise NotImplementedError

    def first_moment_upper(self, r_lo: float, r_hi: np.ndarray) -> np.ndarray:
        """Vectorized first_moment(r_lo, r) for an array of upper radii.

        Returns shape (len(r_hi), dim).  Used by the SDE engine, whose
        compensated region has a state-dependent upper radius.
        """
        r_hi = np.asarray(r_hi, dtype=float)
        out = np.empty((r_hi.size, self.dim))
        for i, r in enumerate(r_hi.ravel()):
            out[i] = self.first_moment(r_lo, float(r))
        return out

    def second_moment_upper(self, r_lo: float, r_hi: np.ndarray) -> np.ndarray:
        """Vectorized second_moment(r_lo, r) for an array of upper radii."""
        r_hi = np.asarray(r_hi, dtype=float)
        return np.array([self.second_moment(r_lo, float(r)) for r in r_hi.ravel()])

    def mass_lower(self, r_lo: np.ndarray, r_hi: float) -> np.ndarray:
        """Vectorized mass(r, r_hi) for an array of lower radii."""
        r_lo = np.asarray(r_lo, dtype=float)
        return np.array([self.mass(float(r), r_hi) for r in r_lo.ravel()])

    # -- sampling --------------------------------------------------------

    def sample(self, rng: np.random.Generator, n: int, r_lo: float = 0.0,
               r_hi: float = math.inf) -> np.ndarray:
        """n i.i.d. marks from the measure restricted to the annulus, normalized."""
        raise NotImplementedError

    # -- helpers ---------------------------------------------------------

    def require_finite(self, r_lo: float, r_hi: float) -> float:
        m = self.mass(r_lo, r_hi)
        if not math.isfinite(m):
            raise InfiniteMassError(
                f"measure has infinite mass on region {r_lo} < |z| <= {r_hi}")
        if m < 0:
            raise LevyConfigError(f"negative mass on region {r_lo} < |z| <= {r_hi}")
        return m


class AtomicLevyMeasure(LevyMeasure):
    """Finite measure supported on finitely many marks; every query is exact."""

    def __init__(self, atoms, masses):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        masses = np.asarray(masses, dtype=float)
        if atoms.shape[0] != masses.shape[0]:
            raise LevyConfigError("atoms and masses length mismatch")
        if np.any(masses < 0):
            raise LevyConfigError("atom masses must be non-negative")
        if atoms.shape[0] and np.any(np.linalg.norm(atoms, axis=1) == 0.0):
            raise LevyConfigError("marks must be nonzero")
        self.atoms = atoms
        self.masses = masses
        self.dim = atoms.shape[1] if atoms.size else 1
        self._radii = np.linalg.norm(atoms, axis=1) if atoms.size else np.empty(0)
        self.max_radius = float(self._radii.max()) if self._radii.size else 0.0

    def _sel(self, r_lo, r_hi):
        return (self._radii > r_lo) & (self._radii <= r_hi)

    def mass(self, r_lo=0.0, r_hi=math.inf):
        return float(self.masses[self._sel(r_lo, r_hi)].sum())

    def first_moment(self, r_lo, r_hi):
        sel = self._sel(r_lo, r_hi)
        if not sel.any():
            return np.zeros(self.dim)
        return self.masses[sel] @ self.atoms[sel]

    def second_moment(self, r_lo, r_hi):
        sel = self._sel(r_lo, r_hi)
        return float(np.sum(self.masses[sel] * self._radii[sel] ** 2))

    def radial_integral(self, fn, r_lo, r_hi):
        sel = self._sel(r_lo, r_hi)
        if not sel.any():
            return 0.0
        return float(np.sum(self.masses[sel] * fn(self._radii[sel])))

    def first_moment_upper(self, r_lo, r_hi):
        r_hi = np.asarray(r_hi, dtype=float)
        # indicator (n, k): atom k inside (r_lo, r_hi[n]]
        ind = (self._radii[None, :] > r_lo) & (self._radii[None, :] <= r_hi[:, None])
        return (ind * self.masses[None, :]) @ self.atoms

    def second_moment_upper(self, r_lo, r_hi):
        r_hi = np.asarray(r_hi, dtype=float)
        ind = (self._radii[None, :] > r_lo) & (self._radii[None, :] <= r_hi[:, None])
        return ind @ (self.masses * self._radii ** 2)

    def mass_lower(self, r_lo, r_hi):
        r_lo = np.asarray(r_lo, dtype=float)
        ind = (self._radii[None, :] > r_lo[:, None]) & (self._radii[None, :] <= r_hi)
        return ind @ self.masses

    def sample(self, rng, n, r_lo=0.0, r_hi=math.inf):
        sel = self._sel(r_lo, r_hi)
        total = self.masses[sel].sum()
        if total <= 0:
            if n == 0:
                return np.empty((0, self.dim))
            raise LevyConfigError("cannot sample from a zero-mass region")
        atoms = self.atoms[sel]
        cum = np.cumsum(self.masses[sel]) / total
        idx = np.searchsorted(cum, rng.random(n), side="right")
        idx = np.minimum(idx, atoms.shape[0] - 1)
        return atoms[idx]




class _RadialSide:
    """One half-line component of a 1-d radial measure: analytic kernels."""

    def moment(self, k: int, a: float, b: float) -> float:
        raise NotImplementedError

    def inverse_cdf(self, u, a: float, b: float):
        raise NotImplementedError


class _ExpSide(_RadialSide):
    def __init__(self, intensity: float, rate: float):
        if intensity < 0 or rate <= 0:
            raise LevyConfigError("exponential side needs intensity >= 0, rate > 0")
        self.i = intensity
        self.rate = rate

    def moment(self, k, a, b):
        # broadcasts over a and b; np.exp(-inf) underflows to 0, the limit value
        i, lam = self.i, self.rate
        if i == 0.0:
            shape = np.broadcast_shapes(np.shape(a), np.shape(b))
            return 0.0 if shape == () else np.zeros(shape)

        def anti(r):  # -antiderivative of r^k e^{-lam r}
            r = np.asarray(r, dtype=float)
            er = np.exp(-lam * np.minimum(r, 1e306))
            r0 = np.where(np.isinf(r), 0.0, r)
            if k == 0:
                return er / lam
            if k == 1:
                return (r0 / lam + 1.0 / lam ** 2) * er
            return (r0 * r0 / lam + 2.0 * r0 / lam ** 2 + 2.0 / lam ** 3) * er

        out = i * (anti(a) - anti(b))
        return float(out) if out.ndim == 0 else out

    def inverse_cdf(self, u, a, b):
        lam = self.rate
        ea = math.exp(-lam * a)
        eb = 0.0 if math.isinf(b) else math.exp(-lam * b)
        return -np.log(ea - u * (ea - eb)) / lam


class _PowerSide(_RadialSide):
    def __init__(self, coef: float, exponent: float, r_max: float):
        if coef < 0 or r_max <= 0:
            raise LevyConfigError("power side needs coef >= 0 and r_max > 0")
        self.c = coef
        self.beta = exponent
        self.r_max = r_max

    def moment(self, k, a, b):
        # broadcasts over a and b; divergence at a lower endpoint of 0 yields inf
        shape = np.broadcast_shapes(np.shape(a), np.shape(b))
        if self.c == 0.0:
            return 0.0 if shape == () else np.zeros(shape)
        p = k + 1.0 - self.beta
        a_arr = np.broadcast_to(np.asarray(a, dtype=float), shape).ravel()
        b_arr = np.broadcast_to(np.minimum(np.asarray(b, dtype=float), self.r_max),
                                shape).ravel()
        out = np.zeros(a_arr.shape)
        ok = b_arr > a_arr
        zero_lo = ok & (a_arr == 0.0)
        pos_lo = ok & (a_arr > 0.0)
        if p <= 0.0:
            out[zero_lo] = math.inf
        else:
            out[zero_lo] = self.c * b_arr[zero_lo] ** p / p
        if pos_lo.any():
            if p == 0.0:
                out[pos_lo] = self.c * np.log(b_arr[pos_lo] / a_arr[pos_lo])
            else:
                out[pos_lo] = self.c * (b_arr[pos_lo] ** p - a_arr[pos_lo] ** p) / p
        out = out.reshape(shape)
        return float(out) if shape == () else out

    def inverse_cdf(self, u, a, b):
        b = min(b, self.r_max)
        p = 1.0 - self.beta
        if p == 0.0:
            return a * (b / a) ** u
        return (a ** p + u * (b ** p - a ** p)) ** (1.0 / p)


class Radial1DMeasure(LevyMeasure):
    """1-d measure with independent positive and negative radial components."""

    dim = 1

    def __init__(self, pos: _RadialSide | None, neg: _RadialSide | None,
                 max_radius: float = math.inf):
        self.pos = pos
        self.neg = neg
        self.max_radius = max_radius

    def _side_moment(self, k, r_lo, r_hi):
        p = self.pos.moment(k, r_lo, r_hi) if self.pos else 0.0
        n = self.neg.moment(k, r_lo, r_hi) if self.neg else 0.0
        return p, n

    def mass(self, r_lo=0.0, r_hi=math.inf):
        p, n = self._side_moment(0, r_lo, r_hi)
        return float(p + n)

    def first_moment(self, r_lo, r_hi):
        p, n = self._side_moment(1, r_lo, r_hi)
        return np.array([p - n])

    def second_moment(self, r_lo, r_hi):
        p, n = self._side_moment(2, r_lo, r_hi)
        return float(p + n)

    def first_moment_upper(self, r_lo, r_hi):
        r_hi = np.asarray(r_hi, dtype=float)
        p, n = self._side_moment(1, r_lo, r_hi)
        return np.asarray(p - n, dtype=float)[:, None]

    def second_moment_upper(self, r_lo, r_hi):
        r_hi = np.asarray(r_hi, dtype=float)
        p, n = self._side_moment(2, r_lo, r_hi)
        return np.asarray(p + n, dtype=float)

    def mass_lower(self, r_lo, r_hi):
        r_lo = np.asarray(r_lo, dtype=float)
        p, n = self._side_moment(0, r_lo, r_hi)
        return np.asarray(p + n, dtype=float)

    def radial_integral(self, fn, r_lo, r_hi):
        total = 0.0
        for side, sign in ((self.pos, +1), (self.neg, -1)):
            if side is None:
                continue
            if isinstance(side, _ExpSide):
                dens = lambda r, s=side: s.i * math.exp(-s.rate * r)
                hi = min(r_hi, 60.0 / side.rate + r_lo)  # density underflows beyond
            else:
                dens = lambda r, s=side: s.c * r ** (-s.beta)
                hi = min(r_hi, side.r_max)
            if hi <= r_lo:
                continue
            val, _ = integrate.quad(lambda r: fn(r) * dens(r), r_lo, hi, limit=200)
            total += val
        return total

    def sample(self, rng, n, r_lo=0.0, r_hi=math.inf):
        mp, mn = self._side_moment(0, r_lo, r_hi)
        total = mp + mn
        if not math.isfinite(total):
            raise InfiniteMassError(
                f"measure has infinite mass on region {r_lo} < |z| <= {r_hi}")
        if total <= 0:
            if n == 0:
                return np.empty((0, 1))
            raise LevyConfigError("cannot sample from a zero-mass region")
        u = rng.random(n)
        p_pos = mp / total
        out = np.empty(n)
        take_pos = u < p_pos
        if take_pos.any():
            u_pos = u[take_pos] / p_pos
            out[take_pos] = self.pos.inverse_cdf(u_pos, r_lo, r_hi)
        if (~take_pos).any():
            u_neg = (u[~take_pos] - p_pos) / (1.0 - p_pos)
            out[~take_pos] = -self.neg.inverse_cdf(u_neg, r_lo, r_hi)
        return out[:, None]


def exponential_tails_1d(intensity_pos=1.0, rate_pos=1.0,
                         intensity_neg=None, rate_neg=None) -> Radial1DMeasure:
    """Density intensity*exp(-rate*|z|) per side; symmetric unless told otherwise."""
    if intensity_neg is None:
        intensity_neg = intensity_pos
    if rate_neg is None:
        rate_neg = rate_pos
    pos = _ExpSide(intensity_pos, rate_pos) if intensity_pos > 0 else None
    neg = _ExpSide(intensity_neg, rate_neg) if intensity_neg > 0 else None
    return Radial1DMeasure(pos, neg)


def power_law_tails_1d(coef=1.0, exponent=1.5, r_max=1.0, two_sided=True) -> Radial1DMeasure:
    """Density coef*|z|^(-exponent) on 0 < |z| <= r_max.

    exponent in (1, 3) gives an infinite-activity Levy measure (finite
    second moment near zero); exponent >= 3 deliberately breaks the
    small-jump square-integrability and is used to build counterexamples.
    """
    pos = _PowerSide(coef, exponent, r_max)
    neg = _PowerSide(coef, exponent, r_max) if two_sided else None
    return Radial1DMeasure(pos, neg, max_radius=r_max)


def zero_measure(dim: int = 1) -> AtomicLevyMeasure:
    m = AtomicLevyMeasure(np.empty((0, dim)), np.empty(0))
    m.dim = dim
    return m


# ---------------------------------------------------------------------------
# driver-level operations
# ---------------------------------------------------------------------------

def sample_jump_events(spec: LevyMeasure, region: tuple[float, float],
                       t_max: float, rng: np.random.Generator) -> JumpEvents:
    """Atoms of the Poisson random measure with intensity dt x nu on a region.

    The event count is Poisson(nu(region) * t_max), times are uniform on
    (0, t_max] and sorted, marks are i.i.d. from the normalized restriction.
    """
    r_lo, r_hi = region
    if t_max < 0:
        raise LevyConfigError("horizon must be non-negative")
    total = spec.require_finite(r_lo, r_hi)
    if total == 0.0 or t_max == 0.0:
        return JumpEvents.empty(spec.dim)
    n = int(rng.poisson(total * t_max))
    times = np.sort(t_max * (1.0 - rng.random(n)))  # in (0, t_max]
    marks = spec.sample(rng, n, r_lo, r_hi)
    # ties have probability zero but would break strict ordering; nudge them
    for i in range(1, n):
        if times[i] <= times[i - 1]:
            times[i] = np.nextafter(times[i - 1], math.inf)
    return JumpEvents(times, marks)


def compensator_drift(spec: LevyMeasure, trunc: TruncationConfig, dt: float) -> np.ndarray:
    """Drift correction -dt * integral of z over {eps < |z| <= level}.

    This is the compensator of the small-jump band that the sampler actually
    produces atoms for; adding it keeps a run with discarded sub-eps jumps
    consistent with the compensated jump integral.
    """
    eps = trunc.sampling_floor
    fm = spec.first_moment(eps, trunc.level)
    if not np.all(np.isfinite(fm)):
        raise InfiniteMassError(
            f"first moment not integrable on {eps} < |z| <= {trunc.level}")
    return -dt * fm


def discarded_second_moment(spec: LevyMeasure, trunc: TruncationConfig) -> float:
    """Variance integral of the jumps dropped below the sampling floor."""
    eps = trunc.sampling_floor
    if eps == 0.0:
        return 0.0
    return spec.second_moment(0.0, eps)


# registry for manifest-driven construction ---------------------------------

def _build_atomic(params):
    return AtomicLevyMeasure(params["atoms"], params["masses"])


def _build_exponential(params):
    return exponential_tails_1d(**params)


def _build_power_law(params):
    return power_law_tails_1d(**params)


def _build_zero(params):
    return zero_measure(int(params.get("dim", 1)))


MEASURE_REGISTRY = {
    "atomic": _build_atomic,
    "exponential_tails_1d": _build_exponential,
    "power_law_tails_1d": _build_power_law,
    "zero": _build_zero,
}


def measure_from_config(cfg: dict) -> LevyMeasure:
    name = cfg["name"]
    if name not in MEASURE_REGISTRY:
        raise LevyConfigError(f"unknown measure {name!r}; known: {sorted(MEASURE_REGISTRY)}")
    return MEASURE_REGISTRY[name](cfg.get("params", {}))
