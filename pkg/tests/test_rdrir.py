import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.linalg import toeplitz

from ambirir.gfvv import GtvvMatrix, analytic_gfvv, estimate_gtvv, gfvv_to_gtvv
from ambirir.ism_sim import render_recording, scene_from_relative, white_noise
from ambirir.rdrir import (AdmmConfig, AdmmDivergence, NumericalError, ReferenceFilter, _axis_gram,
                           apply_filter, cov_residual, group_soft_threshold, levinson_durbin,
                           lp_normal_coefficients, project_window, solve, solve_ac, solve_admm,
                           solve_cov)
from ambirir.sh_ambi import Direction, encode, max_directivity_beamformer, omni_beamformer
from ambirir.spectral import cross_periodograms, stft

from conftest import FS

D0 = Direction.from_degrees(30, 10)
D1 = Direction.from_degrees(-100, 20)


def _delta(order=1, J=64):
    m = np.zeros(((order + 1) ** 2, J))
    m[:, J // 2 - 1] = encode(D0, order).coeffs
    return GtvvMatrix(m, FS)


def _geometric(J=64, ratio=0.5):
    m = np.zeros((1, J))
    m[0, J // 2 - 1:] = ratio ** np.arange(J // 2 + 1)
    return GtvvMatrix(m, FS)


def _random(seed, C=4, J=64):
    return GtvvMatrix(np.random.default_rng(seed).standard_normal((C, J)), FS)


def _shifted_rows(V, j_max):
    """X[j][l, c] = v_{l, c - j} on the axis (zero outside), by explicit loops."""
    C, J = V.m.shape
    X = np.zeros((j_max + 1, C, J))
    for j in range(j_max + 1):
        for c in range(J):
            if 0 <= c - j < J:
                X[j, :, c] = V.m[:, c - j]
    return X


def _brute_cov(V, j_max):
    """Constrained least squares over the residual window, from the definition."""
    X = _shifted_rows(V, j_max)
    lags = V.lags
    rows = [c for c in range(V.J) if lags[c] - j_max >= lags[0] and not 0 <= lags[c] <= j_max]
    A = X[:, :, rows].reshape(j_max + 1, -1).T
    sol = np.linalg.lstsq(A[:, 1:], -A[:, 0], rcond=None)[0]
    return np.concatenate([[1.0], sol])


# --- coefficients and direct solvers ---------------------------------------------

def test_ac_coefficients_for_delta_vanish():
    eq = lp_normal_coefficients(_delta(), 5, "ac")
    assert_allclose(eq.r[1:, 1:], 0.0)
    assert_allclose(solve_ac(_delta(), 5).filter.a, np.eye(1, 6)[0])


def test_cov_geometric_example():
    est = solve_cov(_geometric(), 1)
    assert_allclose(est.filter.a, [1.0, -0.5], atol=1e-10)
    assert_allclose(_brute_cov(_geometric(), 1), [1.0, -0.5], atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10), st.sampled_from(["ac", "cov"]))
def test_coefficients_symmetric(seed, j_max, method):
    r = lp_normal_coefficients(_random(seed), j_max, method).r
    assert_allclose(r, r.T, atol=1e-10)


def test_coefficients_match_definition():
    V = _random(3)
    j_max = 6
    X = _shifted_rows(V, j_max)
    # AC: protected samples zeroed before shifting
    Vz = V.m.copy()
    Vz[:, V.zero:V.zero + j_max + 1] = 0
    Xz = _shifted_rows(GtvvMatrix(Vz, FS), j_max)
    pad = np.zeros((j_max + 1, 4, V.J + j_max))
    for j in range(j_max + 1):
        pad[j, :, j:j + V.J] = Vz
    ref_ac = np.einsum("jlc,slc->js", pad, pad)
    assert_allclose(lp_normal_coefficients(V, j_max, "ac").r, ref_ac, atol=1e-10)
    # the full-axis Gram used by the ADMM filter step
    assert_allclose(_axis_gram(V.m, j_max), np.einsum("jlc,slc->js", X, X), atol=1e-10)
    assert Xz.shape == X.shape


def test_levinson_matches_dense_solve():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(300)
    R = np.array([x[: x.size - k] @ x[k:] for k in range(13)])
    a, k, err = levinson_durbin(R)
    dense = np.linalg.solve(toeplitz(R[:-1]), -R[1:])
    assert_allclose(a[1:], dense, atol=1e-10)
    assert np.all(np.abs(k) < 1) and err > 0


def test_levinson_singular_reports_condition():
    R = np.array([1.0, 1.0, 1.0])
    with pytest.raises(NumericalError, match="condition"):
        levinson_durbin(R)


def test_solvers_on_causal_windowed_input_return_identity():
    V = _delta(1)
    for method in ("ac", "cov"):
        est = solve(V, 4, method)
        assert_allclose(est.filter.a, np.eye(1, 5)[0], atol=1e-12)
        assert_allclose(est.h, V.m, atol=1e-12)


def test_cov_all_zero_returns_identity():
    V = GtvvMatrix(np.zeros((4, 32)), FS)
    est = solve_cov(V, 3)
    assert_array_equal(est.filter.a, [1, 0, 0, 0])
    assert_array_equal(est.h, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_cov_equals_brute_force(seed, j_max):
    V = _random(seed, C=4, J=96)
    assert_allclose(solve_cov(V, j_max).filter.a, _brute_cov(V, j_max), atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_objective_improves_on_identity(seed, j_max):
    V = _random(seed, C=4, J=96)
    e0 = np.eye(1, j_max + 1)[0]
    # AC minimises the zero-padded criterion with the protected lags removed
    masked = V.m.copy()
    masked[:, V.zero:V.zero + j_max + 1] = 0.0
    ac = solve_ac(V, j_max).filter.a
    energy = lambda a: sum(np.sum(np.convolve(row, a) ** 2) for row in masked)
    assert energy(ac) <= energy(e0) + 1e-9
    assert cov_residual(V, solve_cov(V, j_max).filter, j_max) <= cov_residual(V, e0, j_max) + 1e-9


def test_ac_filter_is_minimum_phase():
    V = _random(11, C=9, J=256)
    a = solve_ac(V, 16).filter.a
    assert np.abs(np.roots(a)).max() < 1


def test_geometric_cancellation_all_methods():
    sc = scene_from_relative(1, D0, [(25 / FS, 0.5, D1)], FS)
    V = gfvv_to_gtvv(analytic_gfvv(sc, omni_beamformer(1), 1024))
    for method in ("ac", "cov", "admm"):
        est = solve(V, 30, method)
        a = est.filter.a
        assert a[0] == 1.0 and a.size == 31
        assert a[25] == pytest.approx(0.5, abs=1e-3)
        assert_allclose(np.delete(a, [0, 25]), 0.0, atol=1e-3)
        # H is the direct sound plus the echo
        assert_allclose(est.h[:, V.zero], encode(D0, 1).coeffs, atol=1e-3)
        assert_allclose(est.h[:, V.zero + 25], 0.5 * encode(D1, 1).coeffs, atol=1e-3)
    # COV minimizes the exact windowed criterion
    assert cov_residual(V, solve_cov(V, 30).filter, 30) <= cov_residual(V, solve_ac(V, 30).filter, 30) + 1e-12


def test_jmax_out_of_range():
    with pytest.raises(ValueError):
        lp_normal_coefficients(_random(0, J=32), 16, "ac")
    with pytest.raises(ValueError):
        lp_normal_coefficients(_random(0, J=32), 3, "burg")


# --- apply_filter -------------------------------------------------------------------

def test_apply_filter_examples():
    V = _random(1)
    assert_allclose(apply_filter(V, [1.0]), V.m, atol=1e-12)
    h = apply_filter(_geometric(), [1.0, -0.5])
    expect = np.zeros(64)
    expect[31] = 1.0
    assert_allclose(h[0], expect, atol=1e-12)
    W = _random(2)
    a = np.array([1.0, 0.3, -0.2])
    both = GtvvMatrix(2 * V.m - 3 * W.m, FS)
    assert_allclose(apply_filter(both, a), 2 * apply_filter(V, a) - 3 * apply_filter(W, a), atol=1e-10)


def test_reference_filter_invariants():
    with pytest.raises(ValueError):
        ReferenceFilter([0.9, 0.1])
    f = ReferenceFilter.identity(4)
    assert f.j_max == 4 and f.a[0] == 1.0
    with pytest.raises(ValueError):
        f.a[1] = 3.0


# --- ADMM ------------------------------------------------------------------------------

def test_group_soft_threshold_example():
    out = group_soft_threshold(np.array([[3.0], [4.0]]), 2.5)
    assert_array_equal(out, [[1.5], [2.0]])
    assert_array_equal(group_soft_threshold(np.zeros((2, 3)), 1.0), 0.0)


def test_projection_example():
    J = 16
    zero = J // 2 - 1
    H = np.ones((4, J))
    H[0, zero + 2] = -0.2
    P = project_window(H, zero, 5)
    assert_array_equal(P[:, zero - 3], 0.0)
    assert P[0, zero + 2] == 0.0
    assert_array_equal(P[1:, zero:zero + 6], 1.0)
    assert_array_equal(P[:, zero + 6:], 0.0)


def test_admm_delta_fixed_point():
    V = _delta(1)
    est = solve_admm(V, 5, AdmmConfig(mu=1e-3))
    assert_allclose(est.filter.a, np.eye(1, 6)[0], atol=1e-12)
    assert_allclose(est.h, V.m, atol=1e-2)
    assert est.diagnostics["converged"]
    # the fixed point keeps H = V; the scaled dual holds the shrinkage mu * y0 / |y0|
    norms = np.linalg.norm(V.m, axis=0)
    U = 1e-3 * V.m / np.where(norms > 0, norms, 1.0)
    warm = solve_admm(V, 5, AdmmConfig(mu=1e-3, warm_start=(V.m.copy(), U, np.eye(1, 6)[0])))
    assert warm.diagnostics["iterations"] <= 2
    assert_allclose(warm.h, V.m, atol=1e-12)


def test_admm_constraints_bitwise():
    V = _random(5, C=4, J=128)
    est = solve_admm(V, 10, AdmmConfig(max_iter=30))
    outside = np.ones(V.J, bool)
    outside[V.zero:V.zero + 11] = False
    assert np.all(est.h[:, outside] == 0.0)
    assert np.all(est.h[0] >= 0.0)
    assert est.filter.a[0] == 1.0 and est.filter.a.size == 11


def test_admm_config_validation():
    with pytest.raises(ValueError):
        AdmmConfig(mu=0.0)
    with pytest.raises(ValueError):
        AdmmConfig(tol_primal=0.0)
    with pytest.raises(ValueError):
        AdmmConfig(max_iter=0)


def test_admm_divergence_carries_history(monkeypatch):
    import ambirir.rdrir as rd
    calls = {"n": 0}
    real = rd.apply_filter

    def blowup(V, a):
        calls["n"] += 1
        return real(V, a) * 10.0 ** (4 * calls["n"])

    monkeypatch.setattr(rd, "apply_filter", blowup)
    with pytest.raises(AdmmDivergence) as err:
        solve_admm(_random(0), 4)
    assert len(err.value.history["primal"]) >= 2


def test_admm_recovers_non_minimum_phase_echo():
    # echo stronger than the direct path: the omni GTVV is acausal
    sc = scene_from_relative(3, D0, [(25 / FS, 1.5, D1)], FS, direct_toa=0.005)
    V = gfvv_to_gtvv(analytic_gfvv(sc, omni_beamformer(3), 2048))
    est = solve_admm(V, 100, AdmmConfig(max_iter=300))
    z = np.linalg.norm(est.h, axis=0)[V.zero:V.zero + 101]
    assert set(np.argsort(-z)[:2]) == {0, 25}
    assert est.filter.a[25] == pytest.approx(1.5, abs=1e-2)


def test_overdetermination_improves_filter_estimate():
    errs = {1: [], 3: []}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        refl = [(float(rng.integers(10, 60)) / FS, 0.6, Direction.from_cartesian(rng.standard_normal(3)))]
        for L in (1, 3):
            sc = scene_from_relative(L, D0, refl, FS, direct_toa=0.003)
            rec = render_recording(sc, white_noise(2.0, FS, seed), snr_db=10, seed=seed)
            w = max_directivity_beamformer(D0, L)
            V = estimate_gtvv(cross_periodograms(stft(rec.signal)), w)
            kap = 0.6 * (w.weights @ sc.encodings()[:, 1])
            a_true = np.zeros(61)
            a_true[0] = 1
            a_true[int(round(refl[0][0] * FS))] = kap
            errs[L].append(np.linalg.norm(solve_cov(V, 60).filter.a - a_true))
    assert np.median(errs[3]) <= np.median(errs[1])
