"""Jump-adapted Euler simulation of coupled jump-diffusion ensembles.

The marching scheme between driver jumps is Euler with left-point
coefficients; driver jumps are applied exactly at their sampled times, which
are inserted into the time grid.  The compensated small-jump band is handled
by a state-dependent drift correction: the dynamics compensate exactly the
jump images u = f(t, x) z with |u| <= level that the sampler produces atoms
for, so the simulated process matches the non-local generator evaluated by
the generator module, with no hidden drift mismatch.

Randomness protocol (the contract that makes runs schedule-independent):
every particle p owns three streams keyed by (seed, namespace, purpose, p) --
one for its initial condition, one for its driver atoms, one for its Brownian
rows.  Brownian rows are consumed one row per positive-length sub-interval of
the particle's own grid (base grid plus its jump times), in time order.
Block partitioning and worker counts cannot change any drawn number.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .coefficients import CoefficientFamily, CoefficientSet, require_linear_growth
from .measures import (JumpEvents, LevyConfigError, LevyMeasure,
                       TruncationConfig, discarded_second_moment,
                       sample_jump_events)


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# initial-condition samplers
# ---------------------------------------------------------------------------

class InitialLaw:
    """Initial distribution: one draw per particle from its own stream.

    density_sup is an optional declared bound on the Lebesgue density; the
    engine cannot verify it and experiments record it as an assumption.
    """

    dim: int
    density_sup: float | None = None

    def sample_one(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class PointMass(InitialLaw):
    def __init__(self, x0):
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        self.dim = self.x0.shape[0]
        self.density_sup = None

    def sample_one(self, rng):
        return self.x0


class GaussianLaw(InitialLaw):
    def __init__(self, mean, std, density_sup=None):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.std = np.broadcast_to(np.asarray(std, dtype=float), self.mean.shape)
        self.dim = self.mean.shape[0]
        if density_sup is None:
            density_sup = float(np.prod(1.0 / (math.sqrt(2 * math.pi) * self.std)))
        self.density_sup = density_sup

    def sample_one(self, rng):
        return self.mean + self.std * rng.standard_normal(self.dim)


class UniformBallLaw(InitialLaw):
    def __init__(self, center, radius):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)
        self.dim = self.center.shape[0]

    def sample_one(self, rng):
        while True:
            v = rng.uniform(-1.0, 1.0, self.dim)
            if np.dot(v, v) <= 1.0:
                return self.center + self.radius * v


class AtomicLaw(InitialLaw):
    def __init__(self, points, weights):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        w = np.asarray(weights, dtype=float)
        self.cum = np.cumsum(w) / w.sum()
        self.dim = self.points.shape[1]

    def sample_one(self, rng):
        i = int(np.searchsorted(self.cum, rng.random(), side="right"))
        return self.points[min(i, len(self.points) - 1)]


INITIAL_LAW_REGISTRY = {
    "point": lambda p: PointMass(p["x0"]),
    "gaussian": lambda p: GaussianLaw(p["mean"], p["std"], p.get("density_sup")),
    "uniform_ball": lambda p: UniformBallLaw(p["center"], p["radius"]),
    "atomic": lambda p: AtomicLaw(p["points"], p["weights"]),
}


def initial_law_from_config(cfg: dict) -> InitialLaw:
    return INITIAL_LAW_REGISTRY[cfg["name"]](cfg.get("params", {}))


# ---------------------------------------------------------------------------
# path containers
# ---------------------------------------------------------------------------

@dataclass
class CadlagPath:
    """One path: values on a strictly increasing grid that contains its jump times."""

    grid: np.ndarray
    values: np.ndarray
    jumps: JumpEvents

    def __post_init__(self):
        if not np.all(np.diff(self.grid) > 0):
            raise SimulationError("path grid must be strictly increasing")
        if len(self.jumps) and not np.all(np.isin(self.jumps.times, self.grid)):
            raise SimulationError("jump times must be grid points")

    @property
    def dim(self):
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.grid, t, side="right")) - 1
        return self.values[max(i, 0)]


@dataclass
class EnsembleLaw:
    """Weighted particle cloud representing a law on R^d at one time."""

    points: np.ndarray
    weights: np.ndarray
    t: float

    @classmethod
    def equal_weight(cls, points, t):
        points = np.atleast_2d(points)
        n = points.shape[0]
        return cls(points=points, weights=np.full(n, 1.0 / n), t=t)

    @property
    def dim(self):
        return self.points.shape[1]

    def mean(self, fn) -> float:
        return float(self.weights @ fn(self.points))


class PathEnsemble:
    """Ensemble of paths recorded on a shared base grid.

    values has shape (n, M+1, d); per-particle jump events are kept for
    diagnostics.  Values at a grid time are post-jump (cadlag convention).
    """

    def __init__(self, times, values, jump_times, jump_marks, seed=None,
                 trunc_report=None):
        self.times = np.asarray(times, dtype=float)
        self.values = values
        self.jump_times = jump_times
        self.jump_marks = jump_marks
        self.seed = seed
        self.trunc_report = trunc_report or {}

    @property
    def n_particles(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[2]

    def index_at(self, t: float) -> int:
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise SimulationError(f"time {t} outside [{self.times[0]}, {self.times[-1]}]")
        return max(int(np.searchsorted(self.times, t, side="right")) - 1, 0)

    def marginal(self, t: float) -> EnsembleLaw:
        if self.n_particles == 0:
            raise SimulationError("empty ensemble has no marginal law")
        i = self.index_at(t)
        return EnsembleLaw.equal_weight(self.values[:, i, :], float(self.times[i]))

    def sup_norm_per_path(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=2).max(axis=1)

    # -- persistence: columnar binary, header + particle-major float64 body --

    _MAGIC = b"LVLB0001"

    def save(self, path: str):
        header = {
            "n": int(self.values.shape[0]),
            "grid": [float(t) for t in self.times],
            "dim": int(self.values.shape[2]),
        }
        hb = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<q", len(hb)))
            fh.write(hb)
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "PathEnsemble":
        with open(path, "rb") as fh:
            if fh.read(8) != cls._MAGIC:
                raise SimulationError("not an ensemble file")
            (hlen,) = struct.unpack("<q", fh.read(8))
            header = json.loads(fh.read(hlen).decode())
            body = np.frombuffer(fh.read(), dtype="<f8")
        n, dim = header["n"], header["dim"]
        grid = np.asarray(header["grid"])
        values = body.reshape(n, grid.size, dim).copy()
        return cls(grid, values, [None] * n, [None] * n)


def marginal_law(ensemble: PathEnsemble, t: float) -> EnsembleLaw:
    """Equal-weight cloud of path values at the grid point left of t."""
    return ensemble.marginal(t)


# ---------------------------------------------------------------------------
# the block march
# ---------------------------------------------------------------------------

def make_base_grid(T: float, grid_step: float, extra_times=()) -> np.ndarray:
    n_cells = max(1, int(round(T / grid_step)))
    grid = np.linspace(0.0, T, n_cells + 1)
    if len(extra_times):
        extra = np.asarray(extra_times, dtype=float)
        extra = extra[(extra > 0) & (extra < T)]
        grid = np.unique(np.concatenate([grid, extra]))
    return grid


class _BlockInputs:
    """Pre-drawn randomness for one block of particles, reusable across a family."""

    def __init__(self, x0, ev_particle, ev_time, ev_mark, ev_cell, noise, offsets,
                 jump_times, jump_marks):
        self.x0 = x0
        self.ev_particle = ev_particle
        self.ev_time = ev_time
        self.ev_mark = ev_mark
        self.ev_cell = ev_cell
        self.noise = noise
        self.offsets = offsets
        self.jump_times = jump_times
        self.jump_marks = jump_marks


def _prepare_block(driver: LevyMeasure, trunc: TruncationConfig, mu0: InitialLaw,
                   grid: np.ndarray, m: int, particles, seed: int,
                   namespace: int) -> _BlockInputs:
    T = float(grid[-1])
    floor = trunc.sampling_floor
    sampled_mass = driver.mass(floor, math.inf)
    if not math.isfinite(sampled_mass):
        raise LevyConfigError(
            "driver has infinite activity above the sampling floor; use "
            "discard_below_eps with a positive eps")
    B = len(particles)
    d = mu0.dim
    x0 = np.empty((B, d))
    jt_list, jm_list = [], []
    n_cells = grid.size - 1
    rows = np.empty(B, dtype=np.int64)
    for j, p in enumerate(particles):
        x0[j] = mu0.sample_one(rngmod.stream(seed, rngmod.INIT, p, namespace))
        if sampled_mass > 0.0:
            ev = sample_jump_events(driver, (floor, math.inf), T,
                                    rngmod.stream(seed, rngmod.DRIVER, p, namespace))
        else:
            ev = JumpEvents.empty(driver.dim)
        jt_list.append(ev.times)
        jm_list.append(ev.marks)
        interior = np.count_nonzero(~np.isin(ev.times, grid)) if len(ev) else 0
        rows[j] = n_cells + interior
    offsets = np.zeros(B + 1, dtype=np.int64)
    np.cumsum(rows, out=offsets[1:])
    noise = np.empty((int(offsets[-1]), m))
    for j, p in enumerate(particles):
        g = rngmod.stream(seed, rngmod.BROWNIAN, p, namespace)
        noise[offsets[j]:offsets[j + 1]] = g.standard_normal((int(rows[j]), m))
    # flatten events, sorted by (cell, particle, time)
    if jt_list and any(len(t) for t in jt_list):
        ev_p = np.concatenate([np.full(len(t), j, dtype=np.int64)
                               for j, t in enumerate(jt_list)])
        ev_t = np.concatenate(jt_list)
        ev_z = np.vstack([mk for mk in jm_list if mk.shape[0]])
        ev_c = np.searchsorted(grid, ev_t, side="left") - 1
        order = np.lexsort((ev_t, ev_p, ev_c))
        ev_p, ev_t, ev_z, ev_c = ev_p[order], ev_t[order], ev_z[order], ev_c[order]
    else:
        ev_p = np.empty(0, dtype=np.int64)
        ev_t = np.empty(0)
        ev_z = np.empty((0, driver.dim))
        ev_c = np.empty(0, dtype=np.int64)
    return _BlockInputs(x0, ev_p, ev_t, ev_z, ev_c, noise, offsets[:-1],
                        jt_list, jm_list)


class BlockMarch:
    """Marches one block of particles cell by cell over a shared base grid.

    Used directly by the particle filter, which interleaves weight updates
    and resampling between cells; whole-path simulation just runs all cells.
    Resampling may overwrite `x` between cells: a particle slot keeps its own
    future noise and driver atoms, which is a valid branching of the dynamics.
    """

    def __init__(self, coeffs: CoefficientSet, driver: LevyMeasure,
                 trunc: TruncationConfig, grid: np.ndarray, inputs: _BlockInputs,
                 record_union: bool = False):
        self.coeffs = coeffs
        self.driver = driver
        self.trunc = trunc
        self.grid = grid
        self.inp = inputs
        self.x = inputs.x0.copy()
        self.cursor = np.zeros(len(inputs.offsets), dtype=np.int64)
        self.cell = 0
        self._ev_cell_starts = np.searchsorted(inputs.ev_cell, np.arange(grid.size))
        self._has_jumps = inputs.ev_time.size > 0
        self._needs_comp = driver.mass(trunc.sampling_floor, math.inf) > 0.0
        self.record_union = record_union
        self.union_records = [(float(grid[0]), self.x.copy())] if record_union else None

    # -- pieces ----------------------------------------------------------

    def _compensator(self, t, xs):
        """Drift of the compensated jump band: -f * int_{floor<|z|<=l/|f|} z nu(dz)."""
        if not self._needs_comp:
            return 0.0
        fv = self.coeffs.f(t, xs)
        out = np.zeros_like(xs)
        nz = fv != 0.0
        if nz.any():
            r_hi = self.trunc.level / np.abs(fv[nz])
            fm = self.driver.first_moment_upper(self.trunc.sampling_floor, r_hi)
            out[nz] = -fv[nz, None] * fm
        return out

    def _euler(self, idx, t0, dt, record_t=None):
        xs = self.x[idx]
        rows = self.inp.offsets[idx] + self.cursor[idx]
        dw = self.inp.noise[rows] * np.sqrt(np.asarray(dt))[..., None]
        bv = self.coeffs.b(t0, xs)
        sv = self.coeffs.sigma(t0, xs)
        comp = self._compensator(t0, xs)
        dtc = np.asarray(dt)[..., None]
        self.x[idx] = xs + (bv + comp) * dtc + np.einsum("kim,km->ki", sv, dw)
        self.cursor[idx] += 1
        if self.record_union and record_t is not None:
            self.union_records.append((record_t, self.x.copy()))

    def _apply_jumps(self, idx, t, marks, record_t=None):
        fv = self.coeffs.f(t, self.x[idx])
        self.x[idx] = self.x[idx] + fv[:, None] * marks
        if self.record_union and record_t is not None:
            self.union_records.append((record_t, self.x.copy()))

    # -- one cell --------------------------------------------------------

    def advance_cell(self, i: int):
        grid = self.grid
        t0, t1 = grid[i], grid[i + 1]
        e0, e1 = self._ev_cell_starts[i], self._ev_cell_starts[i + 1]
        if e0 == e1:
            self._euler(slice(None), float(t0), t1 - t0)
        else:
            inp = self.inp
            jp = inp.ev_particle[e0:e1]
            jt = inp.ev_time[e0:e1]
            jz = inp.ev_mark[e0:e1]
            involved, counts = np.unique(jp, return_counts=True)
            quiet = np.ones(self.x.shape[0], dtype=bool)
            quiet[involved] = False
            qi = np.nonzero(quiet)[0]
            if qi.size:
                self._euler(qi, float(t0), t1 - t0)
            # events are contiguous per particle and time-ordered within it
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            cur_t = np.full(involved.size, float(t0))
            for k in range(int(counts.max())):
                has = counts > k
                rows = starts[has] + k
                pk = involved[has]
                tk = jt[rows]
                self._euler(pk, cur_t[has], tk - cur_t[has])
                self._apply_jumps(pk, tk, jz[rows])
                cur_t[has] = tk
                if self.record_union:
                    self.union_records.append((float(tk[-1]), self.x.copy()))
            last = cur_t < t1
            if last.any():
                pk = involved[last]
                self._euler(pk, cur_t[last], t1 - cur_t[last])
        if self.record_union:
            self.union_records.append((float(t1), self.x.copy()))
        if not np.all(np.isfinite(self.x)):
            bad = np.nonzero(~np.isfinite(self.x).all(axis=1))[0][0]
            raise SimulationError(
                f"non-finite state first reached at t={float(t1):.6g} "
                f"(block particle {int(bad)})")
        self.cell = i + 1

    def run(self, record_values: bool = True):
        n_cells = self.grid.size - 1
        vals = None
        if record_values:
            vals = np.empty((self.x.shape[0], n_cells + 1, self.x.shape[1]))
            vals[:, 0] = self.x
        for i in range(n_cells):
            self.advance_cell(i)
            if record_values:
                vals[:, i + 1] = self.x
        return vals


# ---------------------------------------------------------------------------
# public simulation entry points
# ---------------------------------------------------------------------------

DEFAULT_BLOCK = 4096


def _block_ranges(n: int, block_size: int = DEFAULT_BLOCK):
    return [range(lo, min(lo + block_size, n)) for lo in range(0, n, block_size)]


def _simulate_one_block(coeffs, driver, trunc, mu0, grid, particles, seed, namespace):
    inputs = _prepare_block(driver, trunc, mu0, grid, coeffs.m, particles, seed, namespace)
    march = BlockMarch(coeffs, driver, trunc, grid, inputs)
    vals = march.run()
    return vals, inputs.jump_times, inputs.jump_marks


def _worker_task(args):
    # runs in a worker process: rebuild everything from registry configs
    from .coefficients import coefficients_from_config
    from .measures import measure_from_config

    cfg, lo, hi, seed, namespace = args
    coeffs = coefficients_from_config(cfg["coefficients"])
    driver = measure_from_config(cfg["driver"])
    trunc = TruncationConfig(**cfg["truncation"])
    mu0 = initial_law_from_config(cfg["mu0"])
    grid = np.asarray(cfg["grid"])
    vals, jt, jm = _simulate_one_block(coeffs, driver, trunc, mu0, grid,
                                       range(lo, hi), seed, namespace)
    return vals, jt, jm


def simulate_ensemble(coeffs: CoefficientSet, driver: LevyMeasure,
                      trunc: TruncationConfig, mu0: InitialLaw, n_particles: int,
                      grid_step: float, T: float, seed: int,
                      namespace: int = rngmod.SIGNAL, extra_times=(),
                      workers: int = 1, parallel_cfg: dict | None = None,
                      block_size: int = DEFAULT_BLOCK,
                      validate: bool = True) -> PathEnsemble:
    """Simulate n_particles independent paths on a uniform grid of step h.

    Worker processes are only used when parallel_cfg (a registry description
    of the dynamics) is given; results are identical for any worker count
    because blocks are fixed and each particle owns its streams.
    """
    if validate and coeffs.growth_bound is not None:
        require_linear_growth(coeffs)
    grid = make_base_grid(T, grid_step, extra_times)
    ranges = _block_ranges(n_particles, block_size)
    if workers > 1 and parallel_cfg is not None:
        cfg = dict(parallel_cfg)
        cfg["grid"] = [float(t) for t in grid]
        tasks = [(cfg, r.start, r.stop, seed, namespace) for r in ranges]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker_task, tasks))
    else:
        results = [_simulate_one_block(coeffs, driver, trunc, mu0, grid, r,
                                       seed, namespace) for r in ranges]
    values = np.concatenate([r[0] for r in results], axis=0) if results else \
        np.empty((0, grid.size, coeffs.d))
    jump_times = [t for r in results for t in r[1]]
    jump_marks = [z for r in results for z in r[2]]
    report = {
        "sampling_floor": trunc.sampling_floor,
        "discarded_second_moment": discarded_second_moment(driver, trunc),
    }
    return PathEnsemble(grid, values, jump_times, jump_marks, seed=seed,
                        trunc_report=report)


def simulate_path(coeffs: CoefficientSet, driver: LevyMeasure,
                  trunc: TruncationConfig, x0, grid_step: float, T: float,
                  seed: int, particle_index: int = 0,
                  namespace: int = rngmod.SIGNAL, extra_times=()) -> CadlagPath:
    """One path, on its own grid with the driver jump times inserted."""
    if coeffs.growth_bound is not None:
        require_linear_growth(coeffs)
    mu0 = x0 if isinstance(x0, InitialLaw) else PointMass(x0)
    grid = make_base_grid(T, grid_step, extra_times)
    inputs = _prepare_block(driver, trunc, mu0, grid, coeffs.m,
                            [particle_index], seed, namespace)
    march = BlockMarch(coeffs, driver, trunc, grid, inputs, record_union=True)
    march.run(record_values=False)
    times = np.array([t for t, _ in march.union_records])
    vals = np.vstack([v[0][None, :] for _, v in march.union_records])
    # the union records may contain duplicate timestamps (pre/post jump);
    # keep the last record at each time (cadlag: value includes the jump)
    keep = np.ones(times.size, dtype=bool)
    keep[:-1] = np.diff(times) > 0
    jumps = JumpEvents(inputs.jump_times[0], inputs.jump_marks[0])
    return CadlagPath(times[keep], vals[keep], jumps)


def simulate_coupled_family(family: CoefficientFamily, driver: LevyMeasure,
                            trunc: TruncationConfig, mu0: InitialLaw,
                            n_particles: int, grid_step: float, T: float,
                            seed: int, namespace: int = rngmod.SIGNAL,
                            extra_times=(), block_size: int = DEFAULT_BLOCK,
                            validate: bool = True):
    """Simulate every family member and the limit under the same randomness.

    For each particle index the same initial draw, the same driver atoms and
    the same Brownian rows feed every member; only coefficients differ.
    Returns (members: dict n -> PathEnsemble, limit: PathEnsemble).
    """
    if validate:
        for n, cs in family.members.items():
            rep = require_linear_growth(cs)
            del rep
        require_linear_growth(family.limit)
    grid = make_base_grid(T, grid_step, extra_times)
    keys = list(family.members.keys())
    all_sets = [family.members[k] for k in keys] + [family.limit]
    n_sets = len(all_sets)
    values = [np.empty((n_particles, grid.size, family.limit.d)) for _ in range(n_sets)]
    jump_times, jump_marks = [], []
    for r in _block_ranges(n_particles, block_size):
        inputs = _prepare_block(driver, trunc, mu0, grid, family.limit.m,
                                r, seed, namespace)
        jump_times.extend(inputs.jump_times)
        jump_marks.extend(inputs.jump_marks)
        for si, cs in enumerate(all_sets):
            march = BlockMarch(cs, driver, trunc, grid, inputs)
            values[si][r.start:r.stop] = march.run()
    report = {
        "sampling_floor": trunc.sampling_floor,
        "discarded_second_moment": discarded_second_moment(driver, trunc),
    }
    members = {}
    for i, k in enumerate(keys):
        members[k] = PathEnsemble(grid, values[i], jump_times, jump_marks,
                                  seed=seed, trunc_report=report)
    limit = PathEnsemble(grid, values[-1], jump_times, jump_marks, seed=seed,
                         trunc_report=report)
    return members, limit
