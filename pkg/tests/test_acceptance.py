"""End-to-end acceptance checks, one test per criterion.

Each test stores ``(passed, detail)`` in ``conftest.ACCEPTANCE`` before it
asserts, and the terminal summary prints one line per criterion. Tolerances
are the fixed targets of the project; none of them is tuned to the results.
Offline runs on the synthetic grid are cached for the session because
criteria 4, 5, 6 and 7 share cells.
"""
import time
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import coupled_message, probit_link_tilted, random_spd, spike_slab_tilted
from stsparse import cli, ep, io, stream
from stsparse.expfam import GaussianNat, bernoulli_product, bernoulli_quotient, log_odds
from stsparse.metrics import score, support
from stsparse.model import Dataset, Hyperparams, synthetic_dataset

# fixed targets
ALGEBRA_TRIALS, ALGEBRA_TOL, ALGEBRA_SECONDS = 1000, 1e-10, 5.0
TILTED_DRAWS, TILTED_TOL, TILTED_SECONDS = 100, 1e-6, 30.0
CHAIN_TRIALS, CHAIN_TOL, CHAIN_MAX_DIM = 100, 1e-8, 5
RECON_RATIO, RECON_SEEDS, RECON_F, RECON_NMSE, RECON_SECONDS = 0.3, range(5), 0.95, 1e-2, 600.0
GAP_RATIO, GAP_SEEDS, GAP_MIN = 0.15, range(5), 0.10
ONLINE_RATIO, ONLINE_SEEDS, ONLINE_TOL, ONLINE_T_INIT, ONLINE_BLOCK = 0.3, range(5), 0.05, 10, 1
BUDGET_RATIOS = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55]
BUDGET_SEEDS, BUDGET_SWEEPS = range(10), 100
SCALING_TS, SCALING_N, SCALING_SLACK = (10, 20, 40), 100, 1.5
FLAT_STEPS, FLAT_WINDOW, FLAT_MAX_RATIO, FLAT_REPEATS = 100, 20, 1.5, 3

PROFILE = io.load_profile("synthetic")


def _record(k: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(passed), detail)


@lru_cache(maxsize=None)
def offline_cell(ratio: float, seed: int) -> io.ResultRecord:
    return cli.run_cell(PROFILE, "twolevel", ratio, seed)


@lru_cache(maxsize=None)
def budget_cell(ratio: float, seed: int) -> io.ResultRecord:
    # sweeps past the budget cannot change the verdict
    cfg = replace(PROFILE, hyper=PROFILE.hyper.with_(max_iter=BUDGET_SWEEPS))
    return cli.run_cell(cfg, "twolevel", ratio, seed)


@lru_cache(maxsize=None)
def online_cell(ratio: float, seed: int) -> io.ResultRecord:
    cfg = io.RunConfig(PROFILE.hyper, t_init=ONLINE_T_INIT, block=ONLINE_BLOCK)
    return cli.run_cell(cfg, "twolevel_online", ratio, seed)


def test_criterion_1_exponential_family_algebra():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for trial in range(ALGEBRA_TRIALS):
        if trial % 2 == 0:
            n = int(rng.integers(1, 6))
            a = GaussianNat(random_spd(rng, n), rng.standard_normal(n))
            b = GaussianNat(random_spd(rng, n), rng.standard_normal(n))
            back = (a * b) / b
            err = max(np.max(np.abs(back.precision - a.precision)),
                      np.max(np.abs(back.shift - a.shift)))
        else:
            z1, z2 = rng.uniform(-3, 3, 2)
            back = bernoulli_quotient(bernoulli_product(z1, z2), z2)
            # natural parameter of the Bernoulli family is the log-odds
            err = abs(log_odds(back) - log_odds(z1))
        worst = max(worst, float(err))
    seconds = time.perf_counter() - start
    ok = worst < ALGEBRA_TOL and seconds < ALGEBRA_SECONDS
    _record(1, ok, f"{ALGEBRA_TRIALS} round trips, worst error {worst:.2e} (tol {ALGEBRA_TOL:g}), "
                   f"{seconds:.2f} s (limit {ALGEBRA_SECONDS:g} s)")
    assert ok


def test_criterion_2_tilted_moments_against_quadrature():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = {"spike-slab": 0.0, "probit-link": 0.0}
    for _ in range(TILTED_DRAWS):
        m, v, z = rng.uniform(-3, 3), rng.uniform(0.1, 10), rng.uniform(-3, 3)
        s2 = rng.uniform(0.1, 10)
        ref = spike_slab_tilted(m, v, z, s2)
        tm = ep.spike_slab_moments(m, v, z, s2)
        worst["spike-slab"] = max(worst["spike-slab"], *(abs(float(getattr(tm, k)) - ref[k])
                                                         for k in ("Z", "mean", "second", "p_omega")))
        ref = probit_link_tilted(m, v, z)
        tm = ep.probit_link_moments(m, v, z)
        worst["probit-link"] = max(worst["probit-link"], *(abs(float(getattr(tm, k)) - ref[k])
                                                           for k in ("Z", "mean", "second", "p_omega")))
    seconds = time.perf_counter() - start
    ok = max(worst.values()) < TILTED_TOL and seconds < TILTED_SECONDS
    _record(2, ok, f"{TILTED_DRAWS} draws each, worst abs error spike-slab {worst['spike-slab']:.1e}, "
                   f"probit-link {worst['probit-link']:.1e} (tol {TILTED_TOL:g}), {seconds:.1f} s")
    assert ok


def _moments(prec, shift):
    cov = np.linalg.inv(prec)
    return cov @ shift, cov


def test_criterion_3_chain_updates_against_joint_gaussian():
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(CHAIN_TRIALS):
        n = int(rng.integers(1, CHAIN_MAX_DIM + 1))
        A = rng.standard_normal((n + 1, n))
        h = Hyperparams(ell_w=rng.uniform(0.5, 3), ell_sigma=rng.uniform(0.5, 3),
                        alpha_w=rng.uniform(0.5, 2), alpha_sigma=rng.uniform(0.5, 2), eta=1.0, xi=1.0)
        prior = GaussianNat(random_spd(rng, n), rng.standard_normal(n))
        st = ep.init_state(Dataset(A, rng.standard_normal((n + 1, 2))), h, prior)
        st.h_prec[0] = np.diag(random_spd(rng, n))
        st.h_shift[0] = rng.standard_normal(n)
        for t in range(2):
            st.rm_prec[t] = random_spd(rng, n)
            st.rm_shift[t] = rng.standard_normal(n)
            st.rg_prec[t] = random_spd(rng, n)
            st.rg_shift[t] = rng.standard_normal(n)
        st.uf_prec[1], st.ub_prec[1] = random_spd(rng, n), random_spd(rng, n)
        st.uf_shift[1], st.ub_shift[1] = rng.standard_normal((2, n))

        # r-factor at t = 0: cavities are the h-factor and prior * u-backward
        cav_g = (np.diag(st.h_prec[0]), st.h_shift[0].copy())
        cav_m = (prior.precision + st.ub_prec[1], prior.shift + st.ub_shift[1])
        ep.update_r(st, 0)
        for got, (a, b) in (((st.rg_prec[0], st.rg_shift[0]), (cav_m, cav_g)),
                            ((st.rm_prec[0], st.rm_shift[0]), (cav_g, cav_m))):
            mean, cov = coupled_message(*a, *b, st.Sigma0)
            gm, gc = _moments(*got)
            worst = max(worst, np.max(np.abs(gm - mean)), np.max(np.abs(gc - cov)))

        # u-factor between t = 0 and t = 1
        cav_prev = (st.rm_prec[0] + prior.precision, st.rm_shift[0] + prior.shift)
        cav_cur = (st.rm_prec[1].copy(), st.rm_shift[1].copy())
        ep.update_u(st, 1)
        for got, (a, b) in (((st.uf_prec[1], st.uf_shift[1]), (cav_prev, cav_cur)),
                            ((st.ub_prec[1], st.ub_shift[1]), (cav_cur, cav_prev))):
            mean, cov = coupled_message(*a, *b, st.W)
            gm, gc = _moments(*got)
            worst = max(worst, np.max(np.abs(gm - mean)), np.max(np.abs(gc - cov)))
    ok = worst < CHAIN_TOL
    _record(3, ok, f"{CHAIN_TRIALS} random cavity sets, dim <= {CHAIN_MAX_DIM}, "
                   f"worst error {worst:.1e} (tol {CHAIN_TOL:g})")
    assert ok


def test_criterion_4_synthetic_reconstruction():
    recs = [offline_cell(RECON_RATIO, s) for s in RECON_SEEDS]
    f = np.mean([r.f_measure for r in recs])
    e = np.mean([r.nmse for r in recs])
    seconds = sum(r.seconds for r in recs)
    ok = f >= RECON_F and e <= RECON_NMSE and seconds <= RECON_SECONDS
    per_seed = ", ".join(f"{r.f_measure:.3f}" for r in recs)
    _record(4, ok, f"ratio {RECON_RATIO}: mean F {f:.3f} (>= {RECON_F}), mean NMSE {e:.2e} "
                   f"(<= {RECON_NMSE:g}), {seconds:.0f} s (<= {RECON_SECONDS:g}); F per seed {per_seed}")
    assert ok


def test_criterion_5_gap_over_admm():
    lam = cli.admm_lambda(PROFILE, GAP_RATIO)
    ours = np.mean([offline_cell(GAP_RATIO, s).f_measure for s in GAP_SEEDS])
    admm = np.mean([cli.run_cell(PROFILE, "admm", GAP_RATIO, s, lam).f_measure for s in GAP_SEEDS])
    ok = ours - admm >= GAP_MIN
    _record(5, ok, f"ratio {GAP_RATIO}: F two-level {ours:.3f}, ADMM {admm:.3f} "
                   f"(lambda {lam:.3g}), gap {ours - admm:.3f} (>= {GAP_MIN})")
    assert ok


def test_criterion_6_online_tracks_offline():
    diffs = []
    for s in ONLINE_SEEDS:
        diffs.append(abs(online_cell(ONLINE_RATIO, s).f_measure - offline_cell(ONLINE_RATIO, s).f_measure))
    ok = max(diffs) <= ONLINE_TOL
    _record(6, ok, f"ratio {ONLINE_RATIO}, T_init {ONLINE_T_INIT}, block {ONLINE_BLOCK}: "
                   f"|F_online - F_offline| per seed {', '.join(f'{d:.3f}' for d in diffs)} "
                   f"(each <= {ONLINE_TOL})")
    assert ok


def test_criterion_7_convergence_budget():
    failures = []
    for ratio in BUDGET_RATIOS:
        for s in BUDGET_SEEDS:
            rec = budget_cell(ratio, s)
            if not (rec.converged and rec.iterations <= BUDGET_SWEEPS):
                failures.append(f"{ratio:g}/s{s}")
    cells = len(BUDGET_RATIOS) * len(BUDGET_SEEDS)
    ok = not failures
    _record(7, ok, f"{cells - len(failures)}/{cells} cells converge within {BUDGET_SWEEPS} sweeps; "
                   f"failing (ratio/seed): {' '.join(failures) or 'none'}")
    assert ok


def _per_sweep_seconds(Ts, warmup: int = 3, rounds: int = 9) -> dict:
    """Median sweep time per T, timing the sizes round-robin so slow spells hit all alike."""
    states = {}
    for T in Ts:
        states[T] = ep.init_state(synthetic_dataset(SCALING_N, T, 0.3, 0), PROFILE.hyper)
        for _ in range(warmup):  # early sweeps take the cheaper parallel path
            ep.sweep(states[T])
    times = {T: [] for T in Ts}
    for _ in range(rounds):
        for T in Ts:
            t0 = time.perf_counter()
            ep.sweep(states[T])
            times[T].append(time.perf_counter() - t0)
    return {T: float(np.median(v)) for T, v in times.items()}


def test_criterion_8_complexity_shape():
    per = _per_sweep_seconds(SCALING_TS)
    base = SCALING_TS[0]
    ratios = {T: (per[T] / per[base]) / (T / base) for T in SCALING_TS[1:]}
    offline_ok = all(1 / SCALING_SLACK <= r <= SCALING_SLACK for r in ratios.values())

    d = synthetic_dataset(SCALING_N, ONLINE_T_INIT + FLAT_STEPS, 0.3, 0)
    # the stream is deterministic, so repeat it and keep each step's fastest time
    runs = [stream.run_stream(d, PROFILE.hyper, t_init=ONLINE_T_INIT, block=1) for _ in range(FLAT_REPEATS)]
    per_step = np.min([[g.wall_time for g in st.diagnostics[1:]] for st in runs], axis=0)
    # window medians: millisecond timings on a shared CPU have isolated spikes
    windows = np.median(per_step.reshape(-1, FLAT_WINDOW), axis=1)
    flat = float(windows.max() / windows.min())
    ok = offline_ok and flat <= FLAT_MAX_RATIO
    _record(8, ok, "per-sweep seconds " + ", ".join(f"T={T}: {per[T]:.3f}" for T in SCALING_TS)
            + "; time/linear " + ", ".join(f"{r:.2f}" for r in ratios.values())
            + f" (within {SCALING_SLACK}x); online step time over {FLAT_STEPS} steps, medians of "
              f"{FLAT_WINDOW}-step windows " + ", ".join(f"{w * 1e3:.1f}" for w in windows)
            + f" ms, max/min {flat:.2f} (<= {FLAT_MAX_RATIO})")
    assert ok


def test_criterion_9_manifest_replay(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(io.profile_text("synthetic").replace("t = 50", "t = 15"))
    data, rec, strm, score_file = (tmp_path / p for p in ("data", "rec", "str", "score.json"))
    assert cli.main(["generate", "--config", str(cfg), "--out", str(data), "--seed", "4"]) == 0
    assert cli.main(["recover", "--config", str(cfg), "--data", str(data), "--out", str(rec)]) == 0
    assert cli.main(["stream", "--config", str(cfg), "--data", str(data), "--out", str(strm)]) == 0
    assert cli.main(["eval", "--config", str(cfg), "--truth", str(data), "--estimate", str(rec),
                     "--out", str(score_file)]) == 0
    checks = [(data / "manifest.json", ["A.txt", "Y.txt", "X.txt", "Omega.txt"]),
              (rec / "manifest.json", ["X_hat.txt", "z.txt"]),
              (strm / "manifest.json", ["X_hat.txt", "z.txt"])]
    mismatched = []
    for manifest, files in checks:
        again = tmp_path / ("re_" + manifest.parent.name)
        assert cli.main(["replay", str(manifest), "--out", str(again)]) == 0
        mismatched += [f"{manifest.parent.name}/{f}" for f in files
                       if (manifest.parent / f).read_bytes() != (again / f).read_bytes()]
    again = tmp_path / "re_score.json"
    assert cli.main(["replay", str(tmp_path / "score.json.manifest.json"), "--out", str(again)]) == 0
    same_score = again.read_text() == score_file.read_text()
    ok = not mismatched and same_score
    _record(9, ok, "replayed generate, recover, stream and eval manifests; "
                   f"byte mismatches: {', '.join(mismatched) or 'none'}; score identical: {same_score}")
    assert ok
