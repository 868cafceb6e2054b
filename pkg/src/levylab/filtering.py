"""Jump-contaminated nonlinear filtering.

The observation has a Brownian part, a drift h(X_t) dt, and a marked point
process whose intensity is lambda(X_t, u) dt nu2(du): simulated by thinning
proposals of a dominating Poisson measure.  The filter is a weighted
particle implementation of the reference-measure formula: particles evolve
under the signal law, independent of the observations, and accumulate the
log-likelihood

    log S_t = int h(X) . dY_cont - 1/2 int |h(X)|^2 dt
              + sum over small-band events of log lambda(X_-, u)
              + int int_band (1 - lambda(X, u)) nu2(du) dt

with left-point (predictable) evaluation of h and lambda.  The normalized
filter is the ratio of weighted means, computed with log-sum-exp.

Coupling for the robustness experiment: family members share the Brownian
observation noise, the proposal atoms, and one thinning uniform per atom
(member n accepts iff the shared uniform is below lambda(X^n, u)), so runs
with identical coefficients are bitwise identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .coefficients import CoefficientSet
from .engine import (BlockMarch, InitialLaw, PathEnsemble, _prepare_block,
                     make_base_grid, simulate_coupled_family)
from .measures import (AtomicLevyMeasure, JumpEvents, LevyMeasure,
                       TruncationConfig, sample_jump_events)


class FilterError(RuntimeError):
    pass


def _logsumexp(v):
    m = float(np.max(v))
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.sum(np.exp(v - m))))


# ---------------------------------------------------------------------------
# observation model
# ---------------------------------------------------------------------------

@dataclass
class ObservationModel:
    """Sensor h, thinning intensity lambda, driving measure nu2, small band U0.

    u0_region is (lo, hi]: the band whose jumps are compensated in the
    observation and enter the likelihood.  lambda_floor is the positive
    lower envelope L(u) with infimum iota.  eps_obs is the sampling floor
    inside the band when nu2 has infinite activity there.
    """

    h: callable                       # (n, d) -> (n, k)
    lam: callable                     # ((n, d), (k,)) -> (n,)
    nu2: LevyMeasure
    u0_region: tuple = (0.0, 1.0)
    lambda_floor: callable = None     # (m, k) -> (m,)
    iota: float = None
    eps_obs: float = 0.0
    n_quad: int = 2000
    quad_seed: int = 77
    config: dict | None = None

    def __post_init__(self):
        lo, hi = self.u0_region
        if not 0 <= lo < hi:
            raise FilterError("u0_region must be (lo, hi] with 0 <= lo < hi")
        if self.eps_obs and not lo < self.eps_obs < hi:
            raise FilterError("eps_obs must lie inside the band")
        self._quad = None

    @property
    def dim_obs(self):
        return self.nu2.dim

    def band_floor(self) -> float:
        lo, _ = self.u0_region
        return max(lo, self.eps_obs)

    def outside_regions(self):
        lo, hi = self.u0_region
        out = []
        if lo > 0:
            out.append((0.0, lo))
        if math.isfinite(hi) or True:
            out.append((hi, math.inf))
        return out

    def check_measure_invariants(self):
        lo, hi = self.u0_region
        for r in self.outside_regions():
            m = self.nu2.mass(*r)
            if not math.isfinite(m):
                raise FilterError(
                    f"nu2 must have finite mass outside the band; region {r} fails")
        sm = self.nu2.second_moment(lo, hi)
        if not math.isfinite(sm):
            raise FilterError("nu2 must have a finite second moment on the band")
        return {"outside_mass": sum(self.nu2.mass(*r) for r in self.outside_regions()),
                "band_second_moment": sm}

    def _quad_nodes(self):
        """Fixed nodes and weights for integrals of g(x, u) over the band."""
        if self._quad is None:
            lo, hi = self.u0_region
            if isinstance(self.nu2, AtomicLevyMeasure):
                radii = np.linalg.norm(self.nu2.atoms, axis=1)
                sel = (radii > lo) & (radii <= hi)
                self._quad = (self.nu2.atoms[sel], self.nu2.masses[sel], True)
            else:
                mass = self.nu2.mass(lo, hi)
                if not math.isfinite(mass):
                    raise FilterError(
                        "band quadrature needs finite nu2 mass on the band; "
                        "set eps_obs > 0 for infinite-activity nu2")
                rng = rngmod.stream(self.quad_seed, rngmod.QUADRATURE,
                                    namespace=rngmod.OBSERVATION)
                nodes = (self.nu2.sample(rng, self.n_quad, lo, hi)
                         if mass > 0 else np.empty((0, self.nu2.dim)))
                w = np.full(nodes.shape[0], mass / max(nodes.shape[0], 1))
                self._quad = (nodes, w, False)
        return self._quad

    def band_integral(self, x: np.ndarray, integrand: str) -> np.ndarray:
        """Integral over the band of a function of lambda(x, u) against nu2.

        integrand: 'one_minus_lambda' or 'log_lambda'.  Exact for atomic
        nu2; fixed-node Monte Carlo quadrature otherwise.
        """
        x = np.atleast_2d(x)
        nodes, weights, _ = self._quad_nodes()
        out = np.zeros(x.shape[0])
        for u, w in zip(nodes, weights):
            lamv = self._lambda_checked(x, u)
            out += w * ((1.0 - lamv) if integrand == "one_minus_lambda"
                        else np.log(lamv))
        return out

    def band_integral_sq_log_gap(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Integral over the band of |log lam(x1,u) - log lam(x2,u)|^2 nu2(du)."""
        nodes, weights, _ = self._quad_nodes()
        out = np.zeros(np.atleast_2d(x1).shape[0])
        for u, w in zip(nodes, weights):
            gap = np.log(self._lambda_checked(x1, u)) - np.log(self._lambda_checked(x2, u))
            out += w * gap ** 2
        return out

    def _lambda_checked(self, x, u):
        lamv = np.asarray(self.lam(np.atleast_2d(x), np.asarray(u, dtype=float)))
        if np.any(lamv <= 0.0) or np.any(lamv >= 1.0):
            i = int(np.argmax((lamv <= 0.0) | (lamv >= 1.0)))
            raise FilterError(
                f"lambda outside (0,1): value {lamv[i]} at x={np.atleast_2d(x)[i]}, u={u}")
        return lamv

    def validate_envelope(self, x_probes: np.ndarray, n_marks: int = 64) -> dict:
        """Probe the envelope 0 < iota <= L(u) < lambda(x,u) < 1 and the
        square-integrability of (1 - L)^2 / L over the band."""
        if self.lambda_floor is None:
            raise FilterError("no lambda_floor declared")
        nodes, weights, _ = self._quad_nodes()
        marks = nodes[:n_marks] if nodes.shape[0] else np.empty((0, self.nu2.dim))
        worst = None
        for u in marks:
            Lv = float(np.atleast_1d(self.lambda_floor(u[None, :]))[0])
            if self.iota is not None and Lv < self.iota - 1e-12:
                worst = ("L(u) < iota", u)
                break
            lamv = self._lambda_checked(x_probes, u)
            if np.any(lamv <= Lv):
                worst = ("lambda <= L", u)
                break
        ratio = 0.0
        for u, w in zip(nodes, weights):
            Lv = float(np.atleast_1d(self.lambda_floor(u[None, :]))[0])
            ratio += w * (1.0 - Lv) ** 2 / Lv
        return {"witness": worst, "floor_square_integral": float(ratio)}


# registries ----------------------------------------------------------------

def sensor_from_config(cfg: dict):
    name, params = cfg["name"], cfg.get("params", {})
    if name == "identity":
        return lambda x: np.atleast_2d(x)
    if name == "zero":
        k = int(params.get("k", 1))
        return lambda x: np.zeros((np.atleast_2d(x).shape[0], k))
    if name == "tanh":
        scale = float(params.get("scale", 1.0))
        return lambda x: np.tanh(scale * np.atleast_2d(x))
    if name == "linear":
        H = np.atleast_2d(np.asarray(params["H"], dtype=float))
        return lambda x: np.atleast_2d(x) @ H.T
    raise FilterError(f"unknown sensor {name!r}")


def lambda_from_config(cfg: dict):
    """Returns (lam, lambda_floor, iota)."""
    name, params = cfg["name"], cfg.get("params", {})
    if name == "constant":
        c = float(params.get("c", 0.5))
        if not 0 < c < 1:
            raise FilterError("constant lambda needs c in (0,1)")
        return (lambda x, u: np.full(np.atleast_2d(x).shape[0], c),
                lambda u: np.full(np.atleast_2d(u).shape[0], 0.5 * c),
                0.5 * c)
    if name == "state_logistic":
        # lambda(x, u) = Lbar(u) / (1 + exp(-|x|)), in (Lbar/2, Lbar)
        base = float(params.get("base", 0.8))
        decay = float(params.get("decay", 0.0))
        if not 0 < base < 1:
            raise FilterError("state_logistic needs base in (0,1)")

        def lbar(u):
            u = np.atleast_2d(u)
            return base * np.exp(-decay * np.linalg.norm(u, axis=1))

        def lam(x, u):
            x = np.atleast_2d(x)
            s = 1.0 / (1.0 + np.exp(-np.linalg.norm(x, axis=1)))
            return float(lbar(u[None, :])[0]) * s

        return lam, (lambda u: 0.49 * lbar(u)), None
    raise FilterError(f"unknown lambda {name!r}")


def observation_model_from_config(cfg: dict) -> ObservationModel:
    from .measures import measure_from_config

    lam, floor, iota = lambda_from_config(cfg["lambda"])
    return ObservationModel(
        h=sensor_from_config(cfg["sensor"]),
        lam=lam, lambda_floor=floor, iota=iota,
        nu2=measure_from_config(cfg["nu2"]),
        u0_region=tuple(cfg.get("u0_region", (0.0, 1.0))),
        eps_obs=float(cfg.get("eps_obs", 0.0)),
        config=cfg)


# ---------------------------------------------------------------------------
# observation records
# ---------------------------------------------------------------------------

@dataclass
class ObservationRecord:
    """What the filter is allowed to see, plus a truth link for diagnostics.

    cont_increments are the per-cell continuous-part increments
    (Brownian plus sensor drift); the band and big jump events are the
    accepted atoms.  truth_link is never read by the filter.
    """

    grid: np.ndarray
    cont_increments: np.ndarray
    events_band: JumpEvents
    events_big: JumpEvents
    truth_link: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "grid": self.grid.tolist(),
            "cont_increments": self.cont_increments.tolist(),
            "band_times": self.events_band.times.tolist(),
            "band_marks": self.events_band.marks.tolist(),
            "big_times": self.events_big.times.tolist(),
            "big_marks": self.events_big.marks.tolist(),
            "truth_link": self.truth_link,
        })

    @classmethod
    def from_json(cls, s: str) -> "ObservationRecord":
        d = json.loads(s)
        k = np.asarray(d["cont_increments"]).shape[1] if d["cont_increments"] else 1
        return cls(
            grid=np.asarray(d["grid"]),
            cont_increments=np.asarray(d["cont_increments"]).reshape(-1, k),
            events_band=JumpEvents(np.asarray(d["band_times"]),
                                   np.asarray(d["band_marks"]).reshape(len(d["band_times"]), -1)
                                   if d["band_times"] else np.empty((0, k))),
            events_big=JumpEvents(np.asarray(d["big_times"]),
                                  np.asarray(d["big_marks"]).reshape(len(d["big_times"]), -1)
                                  if d["big_times"] else np.empty((0, k))),
            truth_link=d["truth_link"])


class ObservationSetup:
    """Shared observation randomness: proposals, thinning uniforms, Brownian.

    Drawing this once and thinning per member realizes the coupled
    observations: same W, same proposal atoms, one shared uniform per atom.
    """

    def __init__(self, model: ObservationModel, T: float, grid_step: float,
                 seed: int, signal_extra_times=()):
        self.model = model
        self.T = T
        self.seed = seed
        lo, hi = model.u0_region
        rng_prop = rngmod.stream(seed, rngmod.OBS_PROPOSAL, namespace=rngmod.OBSERVATION)
        band = sample_jump_events(model.nu2, (model.band_floor(), hi), T, rng_prop)
        outs = [sample_jump_events(model.nu2, r, T, rng_prop)
                for r in model.outside_regions()]
        times = np.concatenate([band.times] + [o.times for o in outs])
        marks = np.vstack([band.marks] + [o.marks for o in outs]) if times.size else \
            np.empty((0, model.nu2.dim))
        in_band = np.concatenate([np.ones(len(band), dtype=bool)]
                                 + [np.zeros(len(o), dtype=bool) for o in outs])
        order = np.argsort(times, kind="stable")
        self.prop_times = times[order]
        self.prop_marks = marks[order]
        self.prop_in_band = in_band[order]
        rng_thin = rngmod.stream(seed, rngmod.OBS_THIN, namespace=rngmod.OBSERVATION)
        self.uniforms = rng_thin.random(self.prop_times.size)
        extra = np.unique(np.concatenate([self.prop_times,
                                          np.asarray(signal_extra_times, dtype=float)])) \
            if (self.prop_times.size or len(signal_extra_times)) else ()
        self.grid = make_base_grid(T, grid_step, extra)
        rng_w = rngmod.stream(seed, rngmod.OBS_W, namespace=rngmod.OBSERVATION)
        dts = np.diff(self.grid)
        self.w_increments = (rng_w.standard_normal((dts.size, model.nu2.dim))
                             * np.sqrt(dts)[:, None])
        self._prop_idx = np.searchsorted(self.grid, self.prop_times, side="left")

    def record_for(self, signal_values: np.ndarray, truth_link: str = "") -> ObservationRecord:
        """Thin the shared proposals against one signal path on self.grid."""
        model = self.model
        accept = np.zeros(self.prop_times.size, dtype=bool)
        for i, (ti, u, v) in enumerate(zip(self._prop_idx, self.prop_marks,
                                           self.uniforms)):
            lamv = model._lambda_checked(signal_values[ti][None, :], u)
            accept[i] = v < float(lamv[0])
        dts = np.diff(self.grid)
        hv = model.h(signal_values[:-1])
        cont = self.w_increments + hv * dts[:, None]
        band = accept & self.prop_in_band
        big = accept & ~self.prop_in_band
        return ObservationRecord(
            grid=self.grid, cont_increments=cont,
            events_band=JumpEvents(self.prop_times[band], self.prop_marks[band]),
            events_big=JumpEvents(self.prop_times[big], self.prop_marks[big]),
            truth_link=truth_link)


def simulate_observation(signal_path, model: ObservationModel, T: float,
                         grid_step: float, seed: int,
                         truth_link: str = "") -> ObservationRecord:
    """Observation record for a signal given as a CadlagPath-like object.

    The signal must be defined on (at least) the setup grid; values are
    taken by left lookup.
    """
    setup = ObservationSetup(model, T, grid_step, seed)
    vals = np.vstack([signal_path.value_at(float(t)) for t in setup.grid])
    return setup.record_for(vals, truth_link)


# ---------------------------------------------------------------------------
# log-likelihood
# ---------------------------------------------------------------------------

def loglik_cell_increments(values: np.ndarray, record: ObservationRecord,
                           model: ObservationModel) -> np.ndarray:
    """Per-cell increments of log S_t for every particle, shape (n, M).

    values must be aligned with record.grid (particle paths recorded at its
    points).  Band events at a grid point t contribute log lambda(X_t-, u)
    to the cell ending at t.
    """
    grid = record.grid
    n, M1, d = values.shape
    if M1 != grid.size:
        raise FilterError("particle values are not aligned with the record grid")
    dts = np.diff(grid)
    out = np.zeros((n, dts.size))
    for i in range(dts.size):
        x = values[:, i, :]
        hv = model.h(x)
        out[:, i] = (hv @ record.cont_increments[i]
                     - 0.5 * np.sum(hv * hv, axis=1) * dts[i]
                     + model.band_integral(x, "one_minus_lambda") * dts[i])
    for t_ev, u in zip(record.events_band.times, record.events_band.marks):
        j = int(np.searchsorted(grid, t_ev, side="left"))
        if j >= grid.size or grid[j] != t_ev:
            raise FilterError(f"band event at t={t_ev} is not aligned with the grid")
        lamv = model._lambda_checked(values[:, j, :], u)
        out[:, j - 1] += np.log(lamv)
    return out


def log_likelihood(path_values: np.ndarray, record: ObservationRecord,
                   model: ObservationModel) -> float:
    """log S_T for one particle path aligned with the record grid."""
    inc = loglik_cell_increments(path_values[None, :, :], record, model)
    return float(inc.sum())


def compensated_log_jump_statistic(values: np.ndarray, record: ObservationRecord,
                                   model: ObservationModel) -> np.ndarray:
    """Running compensated band statistic per grid time, shape (n, M+1):
    sum of log lambda over band events minus its reference compensator."""
    grid = record.grid
    n = values.shape[0]
    out = np.zeros((n, grid.size))
    dts = np.diff(grid)
    for i in range(dts.size):
        out[:, i + 1] = out[:, i] - model.band_integral(values[:, i, :],
                                                        "log_lambda") * dts[i]
    for t_ev, u in zip(record.events_band.times, record.events_band.marks):
        j = int(np.searchsorted(grid, t_ev, side="left"))
        lamv = model._lambda_checked(values[:, j, :], u)
        out[:, j:] += np.log(lamv)[:, None]
    return out


# ---------------------------------------------------------------------------
# the particle filter
# ---------------------------------------------------------------------------

@dataclass
class FilterState:
    t: float
    particles: np.ndarray
    log_weights: np.ndarray
    log_normalizer: float
    ess: float

    def estimate(self, fn) -> float:
        w = self.normalized_weights()
        return float(w @ fn(self.particles))

    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights
        m = float(np.max(lw))
        w = np.exp(lw - m)
        return w / w.sum()

    def mean(self) -> np.ndarray:
        return self.normalized_weights() @ self.particles

    def variance(self) -> np.ndarray:
        w = self.normalized_weights()
        mu = w @ self.particles
        return w @ (self.particles - mu) ** 2


@dataclass
class FilterResult:
    states: list
    checkpoint_times: np.ndarray
    resampled_at: list = field(default_factory=list)

    def state_at(self, t: float) -> FilterState:
        i = int(np.argmin(np.abs(self.checkpoint_times - t)))
        return self.states[i]


def filter_run(model: ObservationModel, coeffs: CoefficientSet,
               driver: LevyMeasure, trunc: TruncationConfig, mu0: InitialLaw,
               record: ObservationRecord, n_particles: int, seed: int,
               ess_threshold: float | None = None,
               checkpoints=None) -> FilterResult:
    """Reference-measure particle filter against one observation record.

    Particles evolve under the signal law on the record grid (so the band
    event times are cell boundaries); weights accumulate the per-cell
    log-likelihood increments.  Optional multinomial resampling fires when
    ESS < ess_threshold * n (disabled when ess_threshold is None: exactness
    tests need weight paths uncontaminated by resampling noise).
    """
    grid = record.grid
    inputs = _prepare_block(driver, trunc, mu0, grid, coeffs.m,
                            range(n_particles), seed, rngmod.FILTER)
    march = BlockMarch(coeffs, driver, trunc, grid, inputs)
    rng_rs = rngmod.stream(seed, rngmod.RESAMPLE, namespace=rngmod.FILTER)
    if checkpoints is None:
        checkpoints = grid[np.linspace(0, grid.size - 1, min(21, grid.size)).astype(int)]
    checkpoints = np.asarray(checkpoints, dtype=float)
    dts = np.diff(grid)
    lw = np.zeros(n_particles)
    log_norm = 0.0
    # band events indexed by the cell they close
    ev_cell = {}
    for t_ev, u in zip(record.events_band.times, record.events_band.marks):
        j = int(np.searchsorted(grid, t_ev, side="left"))
        if j >= grid.size or grid[j] != t_ev:
            raise FilterError(f"band event at t={t_ev} is not aligned with the grid")
        ev_cell.setdefault(j - 1, []).append(u)
    states = []
    resampled_at = []

    def snapshot(t):
        ln = log_norm + _logsumexp(lw) - math.log(n_particles)
        if not math.isfinite(ln):
            raise FilterError(f"filter collapsed: all weights vanished by t={t:.6g}")
        w = np.exp(lw - np.max(lw))
        ess = float(w.sum() ** 2 / np.sum(w * w))
        states.append(FilterState(t=float(t), particles=march.x.copy(),
                                  log_weights=lw.copy(), log_normalizer=ln,
                                  ess=ess))

    ck = 0
    if ck < checkpoints.size and abs(grid[0] - checkpoints[ck]) < 1e-12:
        snapshot(grid[0])
        ck += 1
    for i in range(dts.size):
        x = march.x
        hv = model.h(x)
        lw += (hv @ record.cont_increments[i]
               - 0.5 * np.sum(hv * hv, axis=1) * dts[i]
               + model.band_integral(x, "one_minus_lambda") * dts[i])
        march.advance_cell(i)
        for u in ev_cell.get(i, ()):
            lw += np.log(model._lambda_checked(march.x, u))
        if not np.any(np.isfinite(lw)):
            raise FilterError(f"filter collapsed: all weights -inf at t={grid[i+1]:.6g}")
        if ess_threshold is not None:
            w = np.exp(lw - np.max(lw))
            ess = float(w.sum() ** 2 / np.sum(w * w))
            if ess < ess_threshold * n_particles:
                probs = w / w.sum()
                parents = rng_rs.choice(n_particles, size=n_particles, p=probs)
                march.x[:] = march.x[parents]
                log_norm += _logsumexp(lw) - math.log(n_particles)
                lw[:] = 0.0
                resampled_at.append(float(grid[i + 1]))
        while ck < checkpoints.size and grid[i + 1] >= checkpoints[ck] - 1e-12:
            snapshot(grid[i + 1])
            ck += 1
    return FilterResult(states=states, checkpoint_times=checkpoints,
                        resampled_at=resampled_at)


# ---------------------------------------------------------------------------
# the robustness experiment
# ---------------------------------------------------------------------------

@dataclass
class RobustnessReport:
    rows: list             # dicts: n, distance, se
    checkpoint_times: np.ndarray
    non_increasing: bool
    ratio: float | None
    passed: bool


def robustness_experiment(family, model: ObservationModel, driver, trunc,
                          mu0, schedule, n_particles: int, h: float, T: float,
                          seed: int, phis=None, n_checkpoints: int = 10,
                          reps: int = 3,
                          ess_threshold: float | None = None) -> RobustnessReport:
    """Distance table n -> D(pi^n, pi) under fully coupled randomness.

    D averages |pi^n_t(phi) - pi_t(phi)| over checkpoint times and a test
    dictionary; signals, observations (shared W / proposals / thinning
    uniforms) and filter particles are all coupled across members, so a
    member equal to the limit reproduces it bitwise and D = 0.
    """
    from .convergence import enforce_level_bound

    enforce_level_bound(trunc.level, family.gamma_sup)
    if phis is None:
        phis = [("tanh", lambda x: np.tanh(np.atleast_2d(x)[:, 0])),
                ("first", lambda x: np.atleast_2d(x)[:, 0]),
                ("bump", lambda x: np.exp(-0.5 * np.sum(np.atleast_2d(x) ** 2, axis=1)))]
    keys = sorted(int(n) for n in schedule)
    dists = np.zeros((reps, len(keys)))
    checkpoints = np.linspace(T / n_checkpoints, T, n_checkpoints)
    for r in range(reps):
        rep_seed = seed + 1000 * r
        setup = ObservationSetup(model, T, h, rep_seed)
        sig_members, sig_limit = simulate_coupled_family(
            family, driver, trunc, mu0, 1, h, T, rep_seed,
            extra_times=setup.prop_times, validate=(r == 0))
        records = {n: setup.record_for(sig_members[n].values[0], f"member-{n}")
                   for n in keys}
        record_lim = setup.record_for(sig_limit.values[0], "limit")
        run_lim = filter_run(model, family.limit, driver, trunc, mu0,
                             record_lim, n_particles, rep_seed,
                             ess_threshold=ess_threshold,
                             checkpoints=checkpoints)
        for jn, n in enumerate(keys):
            run_n = filter_run(model, family.members[n], driver, trunc, mu0,
                               records[n], n_particles, rep_seed,
                               ess_threshold=ess_threshold,
                               checkpoints=checkpoints)
            gaps = []
            for st_n, st_l in zip(run_n.states, run_lim.states):
                for _, fn in phis:
                    gaps.append(abs(st_n.estimate(fn) - st_l.estimate(fn)))
            dists[r, jn] = float(np.mean(gaps))
    mean_d = dists.mean(axis=0)
    se_d = dists.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.zeros(len(keys))
    rows = [{"n": n, "distance": float(mean_d[j]), "se": float(se_d[j])}
            for j, n in enumerate(keys)]
    non_inc = True
    for a, b in zip(rows, rows[1:]):
        if b["distance"] > a["distance"] + 2.0 * (a["se"] + b["se"]):
            non_inc = False
    d0, d1 = rows[0]["distance"], rows[-1]["distance"]
    if d0 <= 1e-14:
        ratio, passed = None, non_inc and d1 <= 1e-14
    else:
        ratio = d1 / d0
        passed = non_inc and ratio <= 0.25
    return RobustnessReport(rows=rows, checkpoint_times=checkpoints,
                            non_increasing=non_inc, ratio=ratio, passed=passed)


def hypothesis_checks_h_lambda(member_ensembles: dict, limit_ensemble: PathEnsemble,
                               model: ObservationModel) -> list:
    """Coupled trend diagnostics for the sensor and thinning-intensity gaps:
    per member n, Monte Carlo estimates of

        E int |h(X^n_t) - h(X_t)|^2 dt
        E int int_band |log lam(X^n, u) - log lam(X, u)|^2 nu2(du) dt
    """
    times = limit_ensemble.times
    dts = np.diff(times)
    rows = []
    for n in sorted(member_ensembles):
        ens = member_ensembles[n]
        h_gap = 0.0
        lam_gap = 0.0
        for i in range(dts.size):
            xn = ens.values[:, i, :]
            xl = limit_ensemble.values[:, i, :]
            dh = model.h(xn) - model.h(xl)
            h_gap += float(np.mean(np.sum(dh * dh, axis=1))) * dts[i]
            lam_gap += float(np.mean(model.band_integral_sq_log_gap(xn, xl))) * dts[i]
        rows.append({"n": n, "sensor_l2_gap": h_gap, "log_lambda_l2_gap": lam_gap})
    return rows
