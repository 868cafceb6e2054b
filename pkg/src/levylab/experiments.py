"""Experiment orchestration: manifest -> artifact bundle, and bitwise replay.

A bundle directory holds the manifest, one CSV per table, a deterministic
summary.json with the verdicts, and run_info.json with wall-clock metadata
(the only file excluded from replay comparison).  All reductions happen in
fixed particle/block order, so a bundle reproduces bit-for-bit for any
worker count.
"""

from __future__ import annotations

import csv
import filecmp
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .coefficients import coefficients_from_config, family_from_config
from .convergence import (default_bl_dictionary, density_sup_estimate,
                          enforce_level_bound, limit_experiment, lyapunov_moment,
                          tightness_diagnostics)
from .engine import initial_law_from_config, simulate_coupled_family, simulate_ensemble
from .filtering import observation_model_from_config, robustness_experiment, filter_run
from .generator import (GeneratorContext, fpe_weak_residual, martingale_residual,
                        superposition_crosscheck, validate_hypotheses)
from .manifests import ManifestError, RunManifest
from .measures import TruncationConfig, measure_from_config
from .psi import construct_psi, weighted_big_psi_sum
from .testfunctions import default_dictionary


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: str, header: list, rows: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _context_from(man: RunManifest):
    coeffs = coefficients_from_config(man.spec["coefficients"])
    driver = measure_from_config(man.spec["driver"])
    trunc = TruncationConfig(**man.spec["truncation"])
    mu0 = initial_law_from_config(man.spec["mu0"])
    return coeffs, driver, trunc, mu0


# ---------------------------------------------------------------------------
# kind: superposition
# ---------------------------------------------------------------------------

def run_superposition(man: RunManifest, seed: int, workers: int):
    coeffs, driver, trunc, mu0 = _context_from(man)
    ctx = GeneratorContext(coeffs, driver, trunc)
    dictionary = default_dictionary(coeffs.d)
    parallel_cfg = {
        "coefficients": man.spec["coefficients"],
        "driver": man.spec["driver"],
        "truncation": man.spec["truncation"],
        "mu0": man.spec["mu0"],
    }
    hyp = validate_hypotheses(ctx, T=man.T)
    block = int(man.spec.get("block_size", 4096))
    ens = simulate_ensemble(coeffs, driver, trunc, mu0, man.n_particles, man.h,
                            man.T, seed, workers=workers, parallel_cfg=parallel_cfg,
                            block_size=block)
    ens_half = simulate_ensemble(coeffs, driver, trunc, mu0, man.n_particles,
                                 man.h / 2, man.T, seed + 1, workers=workers,
                                 parallel_cfg=parallel_cfg, block_size=block)
    fpe_rows = []
    all_pass = True
    halving_ok = True
    run_guards = True
    for phi in dictionary:
        rep = fpe_weak_residual(ens, ctx, phi, run_guards=run_guards)
        run_guards = False
        rep_half = fpe_weak_residual(ens_half, ctx, phi, run_guards=False)
        slope = 2.5 * abs(rep.sup_abs - rep_half.sup_abs) / (man.h / 2)
        combined = 3.0 * (rep_half.sup_se + 0.5 * rep.sup_se)
        if rep_half.sup_abs > 0.5 * rep.sup_abs + combined:
            halving_ok = False
        for k, t in enumerate(rep.times):
            budget = 3.0 * rep.mc_se[k] + slope * man.h
            ok = abs(rep.residual[k]) <= budget
            all_pass = all_pass and ok
            fpe_rows.append([float(t), phi.name, rep.residual[k], rep.mc_se[k],
                             budget, ok])
    # martingale residual on a sub-window, all dictionary entries
    s_win = man.spec.get("martingale_window", [0.25 * man.T, 0.5 * man.T])
    mart_rows = []
    mart_pass = True
    for phi in dictionary:
        mrep = martingale_residual(ens, ctx, phi, float(s_win[0]), float(s_win[1]))
        mart_pass = mart_pass and mrep.within
        for b in mrep.bins:
            mart_rows.append([phi.name, b["bin"], b["count"], b["estimate"],
                              b["se"], b["scored"],
                              (not b["scored"]) or abs(b["estimate"]) <= 3 * b["se"]])
    tables = {
        "fpe_residuals": (["t", "phi_id", "residual", "mc_se", "budget", "pass"],
                          fpe_rows),
        "martingale_residuals": (["phi_id", "bin", "count", "estimate", "se",
                                  "scored", "pass"], mart_rows),
    }
    verdicts = {
        "fpe_within_budget": bool(all_pass),
        "fpe_halving": bool(halving_ok),
        "martingale_within_3se": bool(mart_pass),
        "hypotheses_ok": bool(hyp.ok),
    }
    return tables, verdicts


# ---------------------------------------------------------------------------
# kind: limit
# ---------------------------------------------------------------------------

def _limit_member_values(args):
    """Worker task: one coupled member's value array, re-derived bitwise."""
    man_dict, member_key, seed = args
    man = RunManifest.from_dict(man_dict)
    family = family_from_config(man.spec["family"])
    driver = measure_from_config(man.spec["driver"])
    trunc = TruncationConfig(**man.spec["truncation"])
    mu0 = initial_law_from_config(man.spec["mu0"])
    cs = family.limit if member_key is None else family.members[member_key]
    ens = simulate_ensemble(cs, driver, trunc, mu0, man.n_particles, man.h,
                            man.T, seed, validate=False)
    return ens.values


def run_limit(man: RunManifest, seed: int, workers: int):
    family = family_from_config(man.spec["family"])
    driver = measure_from_config(man.spec["driver"])
    trunc = TruncationConfig(**man.spec["truncation"])
    mu0 = initial_law_from_config(man.spec["mu0"])
    enforce_level_bound(trunc.level, family.gamma_sup)
    keys = sorted(family.members)
    cfg = default_bl_dictionary(family.limit.d)
    n_checkpoints = int(man.spec.get("n_checkpoints", 10))
    if workers > 1:
        tasks = [(man.to_dict(), k, seed) for k in keys + [None]]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(_limit_member_values, tasks))
        member_values = dict(zip(keys, values[:-1]))
        limit_values = values[-1]
    else:
        members, limit = simulate_coupled_family(
            family, driver, trunc, mu0, man.n_particles, man.h, man.T, seed)
        member_values = {k: members[k].values for k in keys}
        limit_values = limit.values
    from .engine import make_base_grid
    times = make_base_grid(man.T, man.h)
    checkpoints = np.linspace(man.T / n_checkpoints, man.T, n_checkpoints)
    from .convergence import bl_distance_coupled
    rows = []
    for n in keys:
        vals = member_values[n]
        best, best_se = 0.0, 0.0
        dens = 0.0
        for tc in checkpoints:
            i = max(int(np.searchsorted(times, tc, side="right")) - 1, 0)
            gap, se = bl_distance_coupled(vals[:, i, :], limit_values[:, i, :], cfg)
            if gap >= best:
                best, best_se = gap, se
            dens = max(dens, density_sup_estimate(vals[:, i, :]))
        rows.append([n, best, best_se, dens])
    non_inc = True
    for a, b in zip(rows, rows[1:]):
        if b[1] > a[1] + 2.0 * (a[2] + b[2]):
            non_inc = False
    d0, d1 = rows[0][1], rows[-1][1]
    ratio = (d1 / d0) if d0 > 1e-14 else None
    passed = non_inc and ((ratio is not None and ratio <= 0.25)
                          or (ratio is None and d1 <= 1e-14))
    tables = {"distances": (["n", "distance", "se", "density_sup"], rows)}
    verdicts = {"non_increasing": bool(non_inc),
                "final_to_initial_ratio": ratio if ratio is None else float(ratio),
                "limit_pass": bool(passed)}
    return tables, verdicts


# ---------------------------------------------------------------------------
# kind: filter_robustness
# ---------------------------------------------------------------------------

def run_filter_robustness(man: RunManifest, seed: int, workers: int):
    family = family_from_config(man.spec["family"])
    driver = measure_from_config(man.spec["driver"])
    trunc = TruncationConfig(**man.spec["truncation"])
    mu0 = initial_law_from_config(man.spec["mu0"])
    model = observation_model_from_config(man.spec["observation"])
    model.check_measure_invariants()
    reps = int(man.spec.get("reps", 3))
    schedule = sorted(family.members)
    rep = robustness_experiment(family, model, driver, trunc, mu0, schedule,
                                man.n_particles, man.h, man.T, seed, reps=reps)
    rows = [[r["n"], r["distance"], r["se"]] for r in rep.rows]
    # one filter table for the limit dynamics, per the CSV interface
    from .filtering import ObservationSetup
    setup = ObservationSetup(model, man.T, man.h, seed)
    sig_members, sig_limit = simulate_coupled_family(
        family, driver, trunc, mu0, 1, man.h, man.T, seed,
        extra_times=setup.prop_times, validate=False)
    record = setup.record_for(sig_limit.values[0], "limit")
    run = filter_run(model, family.limit, driver, trunc, mu0, record,
                     min(man.n_particles, 2000), seed)
    phi_list = [("mean", lambda x: x[:, 0]),
                ("second_moment", lambda x: x[:, 0] ** 2)]
    ftable = []
    for st in run.states:
        for name, fn in phi_list:
            ftable.append([st.t, name, st.estimate(fn),
                           math.exp(st.log_normalizer), st.ess])
    tables = {
        "robustness": (["n", "distance", "se"], rows),
        "filter_limit": (["t", "phi_id", "pi_t", "rho_t_1", "ess"], ftable),
    }
    verdicts = {"non_increasing": bool(rep.non_increasing),
                "final_to_initial_ratio": rep.ratio if rep.ratio is None else float(rep.ratio),
                "robustness_pass": bool(rep.passed)}
    return tables, verdicts


# ---------------------------------------------------------------------------
# kind: diagnostics
# ---------------------------------------------------------------------------

def run_diagnostics(man: RunManifest, seed: int, workers: int):
    coeffs, driver, trunc, mu0 = _context_from(man)
    ctx = GeneratorContext(coeffs, driver, trunc)
    hyp = validate_hypotheses(ctx, T=man.T)
    ens = simulate_ensemble(coeffs, driver, trunc, mu0, man.n_particles, man.h,
                            man.T, seed)
    x0 = ens.values[:, 0, :]
    psi = construct_psi(x0)
    moment, moment_se = lyapunov_moment(ens, psi)
    tight = tightness_diagnostics({"0": ens}, psi,
                                  K_grid=man.spec.get("K_grid", [1, 2, 4, 8, 16]),
                                  theta_grid=man.spec.get("theta_grid",
                                                          [0.2, 0.1, 0.05]),
                                  N_threshold=man.spec.get("N_threshold", 1.0))
    hyp_rows = [
        ["linear_growth_C1", hyp.linear_growth["constant"],
         hyp.linear_growth["witness"] is None],
        ["small_jump_C2", hyp.small_jump["constant"],
         hyp.small_jump["witness"] is None],
        ["large_jump_C3", hyp.large_jump["constant"],
         hyp.large_jump["witness"] is None],
    ]
    tight_rows = [["sup_tail", K, p] for K, p in tight.sup_tail]
    tight_rows += [["increment_tail", th, p] for th, p in tight.increment_tail]
    tables = {
        "hypotheses": (["name", "constant", "ok"], hyp_rows),
        "tightness": (["kind", "parameter", "probability"], tight_rows),
    }
    verdicts = {
        "hypotheses_ok": bool(hyp.ok),
        "lyapunov_moment": float(moment),
        "lyapunov_moment_se": float(moment_se),
        "psi_weighted_sum": float(weighted_big_psi_sum(psi, x0)),
        "psi_profile": psi.to_dict(),
        "sup_tail_decays": bool(tight.sup_tail_decays),
        "diagnostics_pass": bool(hyp.ok),
    }
    return tables, verdicts


_RUNNERS = {
    "superposition": run_superposition,
    "limit": run_limit,
    "filter_robustness": run_filter_robustness,
    "diagnostics": run_diagnostics,
}


# ---------------------------------------------------------------------------
# bundle production and replay
# ---------------------------------------------------------------------------

def run(manifest: RunManifest, out_dir: str, seed: int | None = None,
        workers: int = 1) -> dict:
    """Execute a manifest into a bundle directory; returns the summary."""
    manifest.require_valid()
    seed = manifest.seed if seed is None else int(seed)
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    tables, verdicts = _RUNNERS[manifest.kind](manifest, seed, workers)
    elapsed = time.perf_counter() - t0
    effective = RunManifest.from_dict(manifest.to_dict())
    effective.seed = seed
    effective.save(os.path.join(out_dir, "manifest.json"))
    for name, (header, rows) in tables.items():
        write_csv(os.path.join(out_dir, f"{name}.csv"), header, rows)
    summary = {
        "kind": manifest.kind,
        "seed": seed,
        "verdicts": verdicts,
        "tables": sorted(tables),
        "assumptions": manifest.assumptions,
        "overall_pass": all(v for k, v in verdicts.items()
                            if isinstance(v, bool)),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "run_info.json"), "w") as fh:
        json.dump({"elapsed_seconds": elapsed, "workers": workers}, fh)
        fh.write("\n")
    return summary


def replay(bundle_dir: str, workers: int = 1) -> dict:
    """Re-run a bundle's manifest and compare every table bit-for-bit."""
    man_path = os.path.join(bundle_dir, "manifest.json")
    if not os.path.exists(man_path):
        raise ManifestError(["bundle has no manifest.json"])
    manifest = RunManifest.load(man_path)
    with tempfile.TemporaryDirectory() as tmp:
        run(manifest, tmp, seed=manifest.seed, workers=workers)
        compared = ["summary.json"] + sorted(
            f for f in os.listdir(bundle_dir) if f.endswith(".csv"))
        diffs = []
        for name in compared:
            a, b = os.path.join(bundle_dir, name), os.path.join(tmp, name)
            if not os.path.exists(b):
                diffs.append(f"{name}: missing in replay")
            elif not filecmp.cmp(a, b, shallow=False):
                diffs.append(f"{name}: contents differ")
    return {"identical": not diffs, "diffs": diffs, "compared": compared}
