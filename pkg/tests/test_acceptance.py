"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import os
import time

import numpy as np
import pytest
from scipy.linalg import toeplitz

from ambirir.echoes import extract_echoes
from ambirir.evalkit import ground_truth_from_scene, score
from ambirir.gfvv import (acausal_energy_fraction, analytic_gfvv, closed_form_gtvv, estimate_gtvv,
                          gfvv_to_gtvv, pseudointensity, refine_doa, scene_taylor_margin)
from ambirir.ism_sim import IsmScene, render_recording, scene_from_relative, white_noise
from ambirir.pipeline import PipelineConfig, estimate_gtvv_stage, run_pipeline
from ambirir.rdrir import (AdmmConfig, lp_normal_coefficients, project_window, group_soft_threshold,
                           solve, solve_ac, solve_admm, solve_cov)
from ambirir.sh_ambi import (Direction, angular_distance, build_grid, max_directivity_beamformer,
                             omni_beamformer)
from ambirir.spectral import cross_periodograms, stft

from conftest import FS, random_direction, random_scene

D0 = Direction.from_degrees(30, 10)
D1 = Direction.from_degrees(-80, 30)


@pytest.fixture(scope="module")
def grid3():
    return build_grid(2.0, 3)


def _report(criterion, n, ok, detail):
    criterion(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


# 1 -------------------------------------------------------------------------------------

def test_criterion_1_closed_form_matches_spectral_division(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    J = 2048
    worst = 0.0
    for _ in range(100):
        kappa = rng.uniform(0.05, 0.8)
        tau = int(rng.integers(1, 60))
        sc = scene_from_relative(int(rng.integers(1, 4)), random_direction(rng),
                                 [(tau / FS, kappa, random_direction(rng))], FS)
        w = omni_beamformer(sc.order)
        K = int(np.ceil(np.log(1e-8) / np.log(kappa)))
        g, _ = closed_form_gtvv(sc, w, K, J)
        ref = gfvv_to_gtvv(analytic_gfvv(sc, w, J))
        worst = max(worst, np.abs(g.m - ref.m).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 10
    _report(criterion, 1, ok, f"max abs diff {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-6
    assert elapsed < 10


# 2 -------------------------------------------------------------------------------------

def _brute_cov(V, j_max):
    C, J = V.m.shape
    X = np.zeros((j_max + 1, C, J))
    for j in range(j_max + 1):
        X[j, :, j:] = V.m[:, : J - j]
    lags = V.lags
    rows = [c for c in range(J) if lags[c] - j_max >= lags[0] and not 0 <= lags[c] <= j_max]
    A = X[:, :, rows].reshape(j_max + 1, -1).T
    return np.concatenate([[1.0], np.linalg.lstsq(A[:, 1:], -A[:, 0], rcond=None)[0]])


def test_criterion_2_linear_prediction_oracles(criterion):
    from ambirir.gfvv import GtvvMatrix
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    ac_err = cov_err = 0.0
    for _ in range(40):
        J = int(rng.choice([64, 128, 256]))
        j_max = int(rng.integers(1, 17))
        V = GtvvMatrix(rng.standard_normal((int(rng.choice([1, 4, 9, 16])), J)), FS)
        r = lp_normal_coefficients(V, j_max, "ac").r
        dense = np.linalg.solve(toeplitz(r[0, :-1]), -r[0, 1:])
        ac_err = max(ac_err, np.abs(solve_ac(V, j_max).filter.a[1:] - dense).max())
        # the Toeplitz oracle is built from the first row only; check the full matrix agrees
        assert np.allclose(r[:-1, :-1], toeplitz(r[0, :-1]))
        cov_err = max(cov_err, np.abs(solve_cov(V, j_max).filter.a - _brute_cov(V, j_max)).max())
    elapsed = time.perf_counter() - t0
    ok = ac_err < 1e-8 and cov_err < 1e-6 and elapsed < 5
    _report(criterion, 2, ok, f"AC vs dense {ac_err:.1e}, COV vs lstsq {cov_err:.1e}, {elapsed:.1f} s")
    assert ac_err < 1e-8 and cov_err < 1e-6
    assert elapsed < 5


# 3 -------------------------------------------------------------------------------------

def test_criterion_3_geometric_cancellation(criterion, grid3):
    sc = scene_from_relative(3, D0, [(25 / FS, 0.5, D1)], FS, direct_toa=0.005)
    V = gfvv_to_gtvv(analytic_gfvv(sc, omni_beamformer(3), 2048))
    taps, delays = {}, {}
    for m in ("ac", "cov", "admm"):
        est = solve(V, 30, m)
        taps[m] = est.filter.a[25]
        delays[m] = [e.delay for e in extract_echoes(est, grid3, P=15)]
    ok = all(abs(t - 0.5) <= 1e-3 for t in taps.values()) and all(d == [0, 25] for d in delays.values())
    _report(criterion, 3, ok, ", ".join(f"{m} a[25]={taps[m]:.6f} echoes {delays[m]}" for m in taps))
    for m in taps:
        assert taps[m] == pytest.approx(0.5, abs=1e-3)
        assert delays[m] == [0, 25]


# 4 -------------------------------------------------------------------------------------

def test_criterion_4_synthetic_benchmark(criterion, grid3):
    cfg = PipelineConfig.from_dict({"peaks": {"P": 6}})
    x = white_noise(10.0, FS, 0)
    worst_det, worst_med, worst_t = 1.0, 0.0, 0.0
    lines = []
    for seed in range(3):
        t0 = time.perf_counter()
        sc = random_scene(np.random.default_rng(seed), order=3, n_reflections=5)
        gt = ground_truth_from_scene(sc)
        sig = render_recording(sc, x).signal
        doa = estimate_gtvv_stage(sig, cfg, grid3)
        for m in ("ac", "cov", "admm"):
            rep = score(gt, run_pipeline(sig, cfg, m, grid3, doa).echoes, tolerance=2, P=6)
            worst_det = min(worst_det, rep.detection_rate)
            worst_med = max(worst_med, rep.median_angular_error_deg)
            lines.append(f"s{seed}/{m} {rep.detection_rate:.2f}/{rep.median_angular_error_deg:.1f}deg")
        worst_t = max(worst_t, time.perf_counter() - t0)
    ok = worst_det >= 5 / 6 - 1e-12 and worst_med <= 5.0 and worst_t < 60
    _report(criterion, 4, ok, f"min detection {worst_det:.2f}, max median error {worst_med:.2f} deg, "
                              f"max {worst_t:.1f} s per scene; " + " ".join(lines))
    assert worst_det >= 5 / 6 - 1e-12
    assert worst_med <= 5.0
    assert worst_t < 60


# 5 -------------------------------------------------------------------------------------

def test_criterion_5_causality_contrast(criterion):
    refl = [(37 / FS, 0.8, Direction.from_degrees(120, 0)), (90 / FS, 0.6, Direction.from_degrees(-60, 20)),
            (201 / FS, 0.5, Direction.from_degrees(-160, -30)), (350 / FS, 0.45, Direction.from_degrees(10, 60))]
    sc = scene_from_relative(3, D0, refl, FS, direct_toa=0.005)
    steered, omni = max_directivity_beamformer(D0, 3), omni_beamformer(3)
    assert scene_taylor_margin(sc, steered).satisfied
    assert not scene_taylor_margin(sc, omni).strong_satisfied
    cs = cross_periodograms(stft(render_recording(sc, white_noise(10.0, FS, 1)).signal))
    f_steer = acausal_energy_fraction(estimate_gtvv(cs, steered, 16, 8))
    f_omni = acausal_energy_fraction(estimate_gtvv(cs, omni, 16, 8))
    # an echo louder than the direct path makes the omni-referenced GTVV acausal
    strong = scene_from_relative(3, D0, [(25 / FS, 1.5, D1)], FS, direct_toa=0.005)
    V = gfvv_to_gtvv(analytic_gfvv(strong, omni, 2048))
    est = solve_admm(V, 100, AdmmConfig(max_iter=300))
    oow = est.out_of_window_fraction()
    ok = f_steer < 0.01 and f_omni > f_steer and oow < 0.01
    _report(criterion, 5, ok, f"acausal steered {f_steer:.2e}, omni {f_omni:.2e}; GTVV acausal "
                              f"{acausal_energy_fraction(V):.2f}, RdRIR out-of-window {oow:.1e}")
    assert f_steer < 0.01
    assert f_omni > f_steer
    assert oow < 0.01


# 6 -------------------------------------------------------------------------------------

def test_criterion_6_piv_bias_and_refinement(criterion, grid3):
    sc = scene_from_relative(3, D0, [(60 / FS, 0.5, D1)], FS, direct_toa=0.005)
    S = stft(render_recording(sc, white_noise(5.0, FS, 0)).signal)
    cs = cross_periodograms(S)
    e_piv = angular_distance(pseudointensity(S, cs.active).direction, D0)
    e_ref = angular_distance(refine_doa(cs, 3, grid3, buffer_frames=16, stride_frames=8).direction, D0)
    converged, n, seed = 0, 0, 0
    while n < 50:
        rng = np.random.default_rng(1000 + seed)
        seed += 1
        sc = random_scene(rng, order=3, n_reflections=int(rng.integers(1, 6)), direct_toa=0.005)
        if not scene_taylor_margin(sc, max_directivity_beamformer(sc.direct.direction, 3)).satisfied:
            continue
        n += 1
        cs = cross_periodograms(stft(render_recording(sc, white_noise(3.0, FS, seed)).signal))
        converged += refine_doa(cs, 3, grid3, max_iter=10, buffer_frames=16, stride_frames=8).converged
    ok = e_piv > e_ref and converged >= 48
    _report(criterion, 6, ok, f"PIV error {e_piv:.1f} deg vs refined {e_ref:.1f} deg; "
                              f"converged {converged}/50 within 10 iterations")
    assert e_piv > e_ref
    assert converged >= 48


# 7 -------------------------------------------------------------------------------------

def test_criterion_7_admm_constraints(criterion):
    from ambirir.gfvv import GtvvMatrix
    rng = np.random.default_rng(3)
    exact, trend = True, []
    for _ in range(5):
        V = GtvvMatrix(rng.standard_normal((16, 256)), FS)
        est = solve_admm(V, 16, AdmmConfig(max_iter=100))
        out = np.ones(V.J, bool)
        out[V.zero:V.zero + 17] = False
        exact &= bool(np.all(est.h[:, out] == 0.0) and np.all(est.h[0] >= 0.0) and est.filter.a[0] == 1.0)
        p = np.asarray(est.diagnostics["history"]["primal"])
        half = p[p.size // 2:]
        trend.append(float(np.max(half[1:] / half[:-1])))
    units = (np.array_equal(group_soft_threshold(np.array([[3.0], [4.0]]), 2.5), [[1.5], [2.0]])
             and project_window(np.full((4, 16), -0.2), 7, 3)[0].max() == 0.0
             and not project_window(np.ones((4, 16)), 7, 3)[:, :7].any())
    ok = exact and max(trend) <= 1.05 and units
    _report(criterion, 7, ok, f"constraints exact {exact}, worst step ratio in second half {max(trend):.4f}, "
                              f"unit examples {units}")
    assert exact and units
    assert max(trend) <= 1.05


# 8 -------------------------------------------------------------------------------------

def test_criterion_8_order_trend(criterion):
    cfg = PipelineConfig.from_dict({"peaks": {"P": 6}})
    grids = {1: build_grid(2.0, 1), 3: build_grid(2.0, 3)}
    err = {(L, m): [] for L in (1, 3) for m in ("ac", "cov", "admm")}
    for seed in range(20):
        sc3 = random_scene(np.random.default_rng(500 + seed), order=3, n_reflections=5)
        gt = ground_truth_from_scene(sc3)
        x = white_noise(5.0, FS, seed)
        for L in (1, 3):
            sc = IsmScene(sc3.wavefronts, L, FS)
            sig = render_recording(sc, x, snr_db=20.0, seed=seed).signal
            doa = estimate_gtvv_stage(sig, cfg, grids[L])
            for m in ("ac", "cov", "admm"):
                rep = score(gt, run_pipeline(sig, cfg, m, grids[L], doa).echoes, tolerance=2, P=6)
                err[(L, m)].append(rep.angular_error_deg)
    med = {k: float(np.nanmedian(v)) for k, v in err.items()}
    ok = all(med[(3, m)] <= med[(1, m)] for m in ("ac", "cov", "admm"))
    _report(criterion, 8, ok, ", ".join(f"{m} L1 {med[(1, m)]:.1f} / L3 {med[(3, m)]:.1f} deg"
                                        for m in ("ac", "cov", "admm")))
    for m in ("ac", "cov", "admm"):
        assert med[(3, m)] <= med[(1, m)]


# 9 -------------------------------------------------------------------------------------

@pytest.mark.skipif(not os.environ.get("AMBIRIR_DATASET"),
                    reason="set AMBIRIR_DATASET to a directory of measured RIR WAVs with sidecars")
def test_criterion_9_measured_dataset_ordering(criterion, tmp_path):
    import csv
    from ambirir.cli import main
    table = tmp_path / "table.csv"
    assert main(["evaluate", "--dataset", os.environ["AMBIRIR_DATASET"], "--orders", "3",
                 "--excitation", os.environ.get("AMBIRIR_EXCITATION", "speech"),
                 "--table", str(table)]) == 0
    rows = list(csv.DictReader(table.open()))
    mean = {m: np.nanmean([float(r["angular_error_deg"]) for r in rows if r["method"] == m])
            for m in ("ac", "cov", "admm", "gtvv", "tdvv")}
    ok = max(mean["ac"], mean["cov"], mean["admm"]) < mean["gtvv"] < mean["tdvv"]
    _report(criterion, 9, ok, ", ".join(f"{m} {v:.2f} deg" for m, v in mean.items()))
    assert ok
