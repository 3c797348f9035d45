import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safereg.dmd import (build_hankel, classify_axis, companion_from_roots, eigenfunctions, extended_matrix,
                         fit_companion, identify_full, identify_output, koopman_spectrum, read_snapshots,
                         reconstruct_theta1_output, shifted_hankel, validate_scenario, write_snapshots)
from safereg.errors import AliasingError, ClassificationError, RankDeficiencyError, SimpleSpectrumError
from safereg.matkit import mat_exp
from safereg.plant import sample_snapshots, simulate_open_loop
from safereg.simloop import build_vehicle_scenario

from systems import random_extended_system, truth_snapshots

T_D = 0.142  # a multiple of the 1 ms step, so sampling needs no interpolation


def vehicle_e2_snapshots(kind):
    cfg = build_vehicle_scenario("E2", 1)
    sys_, exo = cfg.system(), cfg.exosystem()
    dt = 1e-3
    t, X, V, _ = simulate_open_loop(sys_, exo, cfg.X0, cfg.V_d0, cfg.V_r0, dt, 1.0, mode="exact")
    traj = np.column_stack([V[:, :2], X]) if kind == "full" else X[:, 0]
    return sample_snapshots(t, traj, T_D, 8, window=1.0), sys_, exo


def geometric_snapshots(Ad, z0, count):
    out = [np.asarray(z0, dtype=float)]
    for _ in range(count - 1):
        out.append(Ad @ out[-1])
    return np.column_stack(out)


# -- Hankel --------------------------------------------------------------------

def test_hankel_scalar_and_geometric_output():
    H = build_hankel([3.0, 6.0], 1, "output")
    assert H.H.tolist() == [[3.0]]
    with pytest.raises(RankDeficiencyError):
        build_hankel([1.0, 2.0, 4.0, 8.0], 2, "output")
    s = np.linalg.svd(np.array([[1.0, 2.0], [2.0, 4.0]]), compute_uv=False)
    assert s[1] / s[0] < 1e-15


def test_hankel_layout_full():
    S = np.arange(2 * 5).reshape(2, 5).astype(float) ** 1.5
    H = build_hankel(S, 3, "full", rank_tol=0.0).H
    for i in range(3):
        for j in range(3):
            assert np.array_equal(H[2 * i:2 * i + 2, j], S[:, i + j])


def test_vehicle_e2_output_hankel_has_full_rank():
    Y, sys_, exo = vehicle_e2_snapshots("output")
    H = build_hankel(Y, 4, "output")
    assert np.linalg.matrix_rank(H.H, tol=1e-11 * H.singular_values[0]) == 4
    # the small sigma_4/sigma_1 is a property of the noiseless data, not of the simulation
    cfg = build_vehicle_scenario("E2", 1)
    At = extended_matrix(sys_.A, exo.S_d, sys_.G @ exo.P_d)
    z0 = np.concatenate([cfg.V_d0, cfg.X0])
    Y_exact = [(mat_exp(At, k * T_D) @ z0)[2] for k in range(8)]
    ratio_exact = build_hankel(Y_exact, 4, "output").rank_ratio
    assert H.rank_ratio == pytest.approx(ratio_exact, rel=1e-3)


def test_hankel_factorization_and_shift_property(rng):
    for _ in range(5):
        sys_, exo, z0 = random_extended_system(rng)
        S, T_d = truth_snapshots(sys_, exo, z0)
        nt = sys_.n + exo.n_d
        Ad = mat_exp(extended_matrix(sys_.A, exo.S_d, sys_.G @ exo.P_d), T_d)
        Qo = np.vstack([np.linalg.matrix_power(Ad, i) for i in range(nt)])
        Qc = np.column_stack([np.linalg.matrix_power(Ad, j) @ z0 for j in range(nt)])
        H = build_hankel(S, nt)
        assert np.linalg.norm(H.H - Qo @ Qc) <= 1e-8 * np.linalg.norm(H.H)
        fit = fit_companion(H, S)
        Hs = shifted_hankel(S, nt)
        assert np.linalg.norm(Hs - H.H @ fit.F) <= 1e-7 * np.linalg.norm(Hs)


# -- companion fit -------------------------------------------------------------

def test_companion_scalar_doubling():
    x = [1.0, 2.0]
    fit = fit_companion(build_hankel(x, 1, "output"), x)
    assert fit.f == pytest.approx([-2.0])
    assert fit.F.tolist() == [[2.0]]


def test_companion_characteristic_polynomial():
    S = geometric_snapshots(np.diag([1.0, 0.5]), [1.0, 1.0], 4)
    fit = fit_companion(build_hankel(S, 2), S)
    assert np.allclose(fit.f, [0.5, -1.5], atol=1e-12)
    assert np.array_equal(fit.F[1, :1], [1.0])


def test_companion_zero_tail():
    S = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    H = build_hankel(S[:, :3], 2, rank_tol=0.0)
    fit = fit_companion(H, S)
    assert np.allclose(fit.f, 0.0)


# -- spectrum ------------------------------------------------------------------

def test_spectrum_real_log():
    x = [1.0, np.exp(0.3)]
    H = build_hankel(x, 1, "output")
    sp = koopman_spectrum(fit_companion(H, x), H, 1.0, 0)
    assert sp.lambda_tilde[0] == pytest.approx(0.3)


def test_spectrum_oscillator_classified_as_disturbance():
    T_d = 1 / 7
    Sd = np.array([[0.0, 1.0], [-0.25, 0.0]])
    S = geometric_snapshots(mat_exp(Sd, T_d), [1.0, 0.3], 4)
    H = build_hankel(S, 2)
    sp = koopman_spectrum(fit_companion(H, S), H, T_d, 2)
    assert np.allclose(np.sort(sp.lambda_tilde.imag), [-0.5, 0.5], atol=1e-10)
    assert sorted(sp.idx_d.tolist()) == [0, 1]


def test_spectrum_vehicle_e2_classification():
    Y, sys_, exo = vehicle_e2_snapshots("output")
    H = build_hankel(Y, 4, "output")
    sp = koopman_spectrum(fit_companion(H, Y), H, T_D, 2)
    la = np.sort_complex(sp.lambda_tilde[sp.idx_a])
    ld = np.sort_complex(sp.lambda_tilde[sp.idx_d])
    assert np.allclose(la, [-1.25, 0.0], atol=1e-6)
    assert np.allclose(ld, [-0.5j, 0.5j], atol=1e-6)


def test_spectrum_errors():
    # repeated eigenvalue
    S = geometric_snapshots(np.array([[0.5, 1.0], [0.0, 0.5]]), [0.0, 1.0], 4)
    H = build_hankel(S, 2)
    with pytest.raises(SimpleSpectrumError):
        koopman_spectrum(fit_companion(H, S), H, 0.1, 0)
    # negative real discrete eigenvalue cannot come from a principal logarithm
    x = [1.0, -0.5]
    H = build_hankel(x, 1, "output")
    with pytest.raises(AliasingError):
        koopman_spectrum(fit_companion(H, x), H, 0.1, 0)
    with pytest.raises(ClassificationError):
        classify_axis(np.array([-1.0, -2.0]), 1)
    with pytest.raises(ClassificationError):
        classify_axis(np.array([0.5j, -0.5j, 0.2j, -0.2j]), 2)


# -- reconstruction ------------------------------------------------------------

def test_full_reconstruction_diagonal_exact():
    T_d = 1.0
    At = np.diag([0.0, -0.5, -1.0])
    S = geometric_snapshots(mat_exp(At, T_d), [1.0, 1.0, 1.0], 6)
    res = identify_full(S, 2, 1, T_d)
    assert np.allclose(res.A_tilde, At, atol=1e-12)


def test_full_reconstruction_vehicle_e1():
    cfg = build_vehicle_scenario("E1", 1)
    sys_, exo = cfg.system(), cfg.exosystem()
    t, X, V, _ = simulate_open_loop(sys_, exo, cfg.X0, cfg.V_d0, cfg.V_r0, 1e-3, 1.0, mode="exact")
    snaps = sample_snapshots(t, np.column_stack([V[:, :2], X]), T_D, 8, window=1.0)
    res = identify_full(snaps, 2, 2, T_D)
    At = extended_matrix(sys_.A, exo.S_d, sys_.G @ exo.P_d)
    assert np.max(np.abs(res.A_tilde - At)) <= 1e-6
    assert res.diagnostics["hankel_rank_ratio"] > 0


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_full_identification_round_trip(seed):
    rng = np.random.default_rng(seed)
    sys_, exo, z0 = random_extended_system(rng)
    S, T_d = truth_snapshots(sys_, exo, z0)
    res = identify_full(S, sys_.n, exo.n_d, T_d)
    At = extended_matrix(sys_.A, exo.S_d, sys_.G @ exo.P_d)
    assert np.max(np.abs(res.A_tilde - At)) <= 1e-6
    # regenerate the snapshots from the identified matrix
    regen = geometric_snapshots(mat_exp(res.A_tilde, T_d), S[:, 0], S.shape[1])
    assert np.max(np.abs(regen - S)) <= 1e-6 * max(1.0, np.abs(S).max())
    # left eigenvectors give Koopman eigenfunctions: phi(z_{k+1}) = e^{l T_d} phi(z_k)
    lam, W = eigenfunctions(res.A_tilde)
    phi = W @ S
    assert np.allclose(phi[:, 1:], np.exp(lam * T_d)[:, None] * phi[:, :-1],
                       atol=1e-6 * max(1.0, np.abs(phi).max()))


def test_output_reconstruction_examples():
    class Spec:
        pass
    sp = Spec()
    sp.lambda_tilde = np.array([-1.25 + 0j, 0.5j, -0.5j])
    sp.idx_a, sp.idx_d = np.array([0]), np.array([1, 2])
    res = reconstruct_theta1_output(sp, 1, 2)
    assert np.allclose(res.A_hat, [[-1.25]])
    assert np.allclose(res.S_d_hat, [[0.0, 1.0], [-0.25, 0.0]], atol=1e-14)
    assert np.allclose(companion_from_roots([0.0, -1.25]), [[0.0, 1.0], [0.0, -1.25]])


def test_output_identification_vehicle_e2_and_agreement_with_full():
    Y, sys_, exo = vehicle_e2_snapshots("output")
    out = identify_output(Y, 2, 2, T_D)
    assert np.max(np.abs(out.A_hat - sys_.A)) <= 1e-6
    assert np.max(np.abs(out.S_d_hat - exo.S_d)) <= 1e-6
    Z, _, _ = vehicle_e2_snapshots("full")
    full = identify_full(Z, 2, 2, T_D)
    dist = [np.min(np.abs(full.eigenvalues - z)) for z in out.eigenvalues]
    assert max(dist) <= 1e-7


# -- hypotheses validator ------------------------------------------------------

def test_validate_scenario_vehicle_e2():
    cfg = build_vehicle_scenario("E2", 1)
    items = validate_scenario(cfg.system(), cfg.exosystem(), 1 / 7)
    ranks = [it for it in items if it.name.startswith("bordered rank")]
    assert len(ranks) == 2 and all(it.passed and it.detail.startswith("rank 3") for it in ranks)
    assert all(it.passed for it in items)


def test_validate_scenario_detects_aliasing_and_repeats():
    cfg = build_vehicle_scenario("E2", 1)
    items = validate_scenario(cfg.system(), cfg.exosystem(), 4 * np.pi)
    alias = [it for it in items if it.name == "distinct discrete eigenvalues"][0]
    assert not alias.passed and "collide" in alias.detail
    cfg2 = cfg.with_overrides({"S_d": [[0.0]], "P_d": [[1.0]], "V_d0": [1.0], "G": [[1.0], [0.0]],
                               "A": [[0.0, 1.0], [0.0, 0.0]]})
    items = validate_scenario(cfg2.system(), cfg2.exosystem(), 0.1)
    assert not [it for it in items if it.name == "simple extended spectrum"][0].passed


# -- snapshot CSV --------------------------------------------------------------

@given(st.integers(1, 4), st.integers(2, 12), st.floats(1e-3, 2.0))
def test_snapshot_csv_round_trip(m, count, T_d):
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(m * 1000 + count)
    S = rng.standard_normal((m, count))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "s.csv"
        write_snapshots(p, S, T_d)
        T2, names, S2 = read_snapshots(p)
    assert np.array_equal(S2, S)
    assert T2 == pytest.approx(T_d, rel=1e-12)
    assert len(names) == m


def test_snapshot_csv_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n0,0,1\n")
    with pytest.raises(ValueError):
        read_snapshots(p)
    p.write_text("k,t,y\n0,0,1\n2,0.2,1\n")
    with pytest.raises(ValueError):
        read_snapshots(p)
    p.write_text("k,t,y\n0,0,1\n1,0.1,1\n2,0.3,1\n")
    with pytest.raises(ValueError):
        read_snapshots(p)
