import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import PSI_MINUS, PSI_PLUS, chsh_matrix_value, proj, trace_distance, werner_matrix
from qrlink import qstate as qs
from qrlink.analysis import expected_tallies
from qrlink.qstate import BellKind, DensityMatrix

seeds = st.integers(0, 2**32 - 1)


def rand_state(seed, rank=None):
    return qs.random_density_matrix(np.random.default_rng(seed), rank)


# --- construction and validation ---------------------------------------------


def test_bell_state_entries():
    p = qs.bell_state(BellKind.PSI_PLUS).data
    expect = np.zeros((4, 4))
    expect[1, 1] = expect[2, 2] = expect[1, 2] = expect[2, 1] = 0.5
    assert np.allclose(p, expect, atol=0)
    m = qs.bell_state(BellKind.PSI_MINUS).data
    expect[1, 2] = expect[2, 1] = -0.5
    assert np.allclose(m, expect, atol=0)


@pytest.mark.parametrize(
    "bad",
    [
        np.eye(3) / 3,
        np.diag([0.5, 0.5, 0.5, 0.5]),
        np.diag([1.5, -0.5, 0, 0]),
        np.array([[0.5, 0.1, 0, 0], [0, 0.5, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]),
        np.full((4, 4), np.nan),
    ],
)
def test_invalid_matrices_rejected(bad):
    with pytest.raises(qs.InvalidStateError):
        DensityMatrix(bad)


def test_density_matrix_is_immutable():
    rho = qs.maximally_mixed()
    with pytest.raises(ValueError):
        rho.data[0, 0] = 1


def test_text_round_trip():
    rho = rand_state(3)
    text = rho.to_text()
    assert len(text.splitlines()) == 16
    assert DensityMatrix.from_text(text) == rho


# --- expectations ------------------------------------------------------------


def test_expectation_examples():
    psi = qs.bell_state(BellKind.PSI_PLUS)
    assert qs.expectation(psi, qs.Z, qs.Z) == pytest.approx(-1, abs=1e-12)
    assert qs.expectation(psi, qs.X, qs.X) == pytest.approx(1, abs=1e-12)
    for a in (qs.X, qs.Y, qs.Z):
        for b in (qs.X, qs.Y, qs.Z):
            assert qs.expectation(qs.maximally_mixed(), a, b) == pytest.approx(0, abs=1e-12)


def test_non_hermitian_observable_rejected():
    with pytest.raises(ValueError):
        qs.expectation(qs.maximally_mixed(), np.array([[0, 1], [0, 0]]), qs.Z)
    with pytest.raises(ValueError):
        qs.expectation(qs.maximally_mixed(), 2 * qs.Z, qs.Z)


def test_witness_fidelity_examples():
    assert qs.witness_fidelity(1, 1, -1, 1) == 1
    assert qs.witness_fidelity(0, 0, 0, 1) == 0.25
    assert qs.witness_fidelity(-1, -1, -1, -1) == 1
    with pytest.raises(ValueError):
        qs.witness_fidelity(1.5, 0, 0, 1)


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from(list(BellKind)))
def test_witness_matches_projector_fidelity(seed, kind):
    rho = rand_state(seed)
    xx, yy, zz = qs.correlators(rho)
    assert qs.witness_fidelity(xx, yy, zz, kind.sign) == pytest.approx(qs.fidelity_to_bell(rho, kind), abs=1e-10)


# --- CHSH --------------------------------------------------------------------


def test_chsh_examples():
    assert qs.chsh_value(qs.bell_state(BellKind.PSI_PLUS)) == pytest.approx(2 * math.sqrt(2), abs=1e-12)
    assert chsh_matrix_value(proj(PSI_PLUS)) == pytest.approx(2 * math.sqrt(2), abs=1e-12)
    assert qs.chsh_value(qs.maximally_mixed()) == pytest.approx(0, abs=1e-12)
    assert qs.chsh_value(qs.werner(1 / math.sqrt(2))) == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("p", np.linspace(0, 1, 11))
def test_chsh_werner_closed_form(p):
    s = qs.chsh_value(qs.werner(p))
    assert s == pytest.approx(2 * math.sqrt(2) * p, abs=1e-9)
    assert s == pytest.approx(chsh_matrix_value(werner_matrix(p)), abs=1e-12)


def test_tsirelson_bound_random_states():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        rho = qs.random_density_matrix(rng, rank=int(rng.integers(1, 5)))
        assert abs(qs.chsh_value(rho)) <= 2 * math.sqrt(2) + 1e-9
        assert qs.chsh_value(rho) == pytest.approx(chsh_matrix_value(rho.data), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds, st.lists(st.floats(-1, 1), min_size=12, max_size=12))
def test_tsirelson_bound_arbitrary_settings(seed, raw):
    def unit(v):
        v = np.asarray(v, float)
        n = np.linalg.norm(v)
        return tuple(v / n) if n > 1e-3 else (0.0, 0.0, 1.0)

    vecs = [unit(raw[i : i + 3]) for i in range(0, 12, 3)]
    s = qs.chsh_value(rand_state(seed), qs.ChshSettings(*vecs))
    assert abs(s) <= 2 * math.sqrt(2) + 1e-9


# --- Werner and fidelity -----------------------------------------------------


def test_werner_limits():
    for kind in BellKind:
        assert qs.werner(1, kind).allclose(qs.bell_state(kind))
        assert qs.werner(0, kind).allclose(qs.maximally_mixed())
    with pytest.raises(ValueError):
        qs.werner(1.1)
    with pytest.raises(ValueError):
        qs.werner(-0.1)


@pytest.mark.parametrize("p", [0, 0.25, 1 / math.sqrt(2), 0.9, 1])
def test_werner_fidelity_closed_form(p):
    assert qs.fidelity_to_bell(qs.werner(p), BellKind.PSI_PLUS) == pytest.approx((3 * p + 1) / 4, abs=1e-12)


def test_werner_threshold_fidelity():
    assert qs.fidelity_to_bell(qs.werner(1 / math.sqrt(2)), BellKind.PSI_PLUS) == pytest.approx(
        (3 / math.sqrt(2) + 1) / 4, abs=1e-12
    )
    assert (3 / math.sqrt(2) + 1) / 4 == pytest.approx(0.7803, abs=1e-4)


def test_fidelity_examples():
    assert qs.fidelity_to_bell(qs.bell_state(BellKind.PSI_PLUS), BellKind.PSI_PLUS) == pytest.approx(1)
    assert qs.fidelity_to_bell(qs.bell_state(BellKind.PSI_MINUS), BellKind.PSI_PLUS) == pytest.approx(0, abs=1e-15)


# --- unitary maps ------------------------------------------------------------


def test_phase_flip_examples():
    plus, minus = qs.bell_state(BellKind.PSI_PLUS), qs.bell_state(BellKind.PSI_MINUS)
    assert qs.fidelity_to_bell(qs.apply_phase_flip_a(minus), BellKind.PSI_PLUS) == pytest.approx(1, abs=1e-12)
    assert qs.apply_phase_flip_a(plus).allclose(minus)
    assert qs.apply_phase_flip_a(qs.maximally_mixed()).allclose(qs.maximally_mixed())


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_phase_flip_involution(seed):
    rho = rand_state(seed)
    assert np.max(np.abs(qs.apply_phase_flip_a(qs.apply_phase_flip_a(rho)).data - rho.data)) < 1e-12


def test_dephase_examples():
    plus = qs.bell_state(BellKind.PSI_PLUS)
    assert qs.fidelity_to_bell(qs.dephase_relative(plus, 0.0), BellKind.PSI_PLUS) == pytest.approx(1)
    assert qs.fidelity_to_bell(qs.dephase_relative(plus, math.pi), BellKind.PSI_MINUS) == pytest.approx(1)
    assert qs.fidelity_to_bell(qs.dephase_relative(plus, math.pi / 2), BellKind.PSI_PLUS) == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10, allow_nan=False))
def test_dephase_cosine_law(phi):
    plus = qs.bell_state(BellKind.PSI_PLUS)
    assert qs.fidelity_to_bell(qs.dephase_relative(plus, phi), BellKind.PSI_PLUS) == pytest.approx(
        math.cos(phi / 2) ** 2, abs=1e-12
    )


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(-10, 10), st.floats(-10, 10))
def test_dephase_additive(seed, a, b):
    rho = rand_state(seed)
    lhs = qs.dephase_relative(qs.dephase_relative(rho, a), b)
    assert lhs.allclose(qs.dephase_relative(rho, a + b), atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(0, 1), st.floats(-7, 7))
def test_every_operation_returns_physical_states(seed, p, phi):
    rho = rand_state(seed)
    outs = [
        qs.apply_phase_flip_a(rho),
        qs.dephase_relative(rho, phi),
        qs.mixture([rho, qs.werner(p)], [p, 1 - p + 1e-9]),
        DensityMatrix(qs.project_to_physical(rho.data + 0.05 * np.diag([1, -1, 1, -1]))),
    ]
    for out in outs:
        DensityMatrix(out.data)  # validation raises on any violation


# --- tomography --------------------------------------------------------------


def test_tomography_exact_inverse_random_states():
    rng = np.random.default_rng(11)
    for _ in range(100):
        rho = qs.random_density_matrix(rng, rank=int(rng.integers(1, 5)))
        est = qs.tomography_reconstruct(expected_tallies(rho, qs.PAULI_BASES, 1e6))
        assert trace_distance(est.data, rho.data) < 1e-8


def test_tomography_examples():
    est = qs.tomography_reconstruct(expected_tallies(qs.bell_state(BellKind.PSI_MINUS), qs.PAULI_BASES, 1000))
    assert trace_distance(est.data, proj(PSI_MINUS)) < 1e-8
    uniform = {lab: [25, 25, 25, 25] for lab in qs.PAULI_BASES}
    assert qs.tomography_reconstruct(uniform).allclose(qs.maximally_mixed(), atol=1e-12)


def test_tomography_errors():
    partial = {lab: [1, 1, 1, 1] for lab in qs.PAULI_BASES[:-1]}
    with pytest.raises(ValueError):
        qs.tomography_reconstruct(partial)
    zero = {lab: [1, 1, 1, 1] for lab in qs.PAULI_BASES}
    zero["ZZ"] = [0, 0, 0, 0]
    with pytest.raises(ValueError):
        qs.tomography_reconstruct(zero)


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(0, 0.5))
def test_project_to_physical(seed, eps):
    rho = rand_state(seed)
    noisy = rho.data + eps * np.diag([1.0, -1.0, 0.5, -0.5])
    out = qs.project_to_physical(noisy)
    assert np.linalg.eigvalsh(out).min() >= -1e-12
    assert np.trace(out).real == pytest.approx(1, abs=1e-12)
    # a physical input is left unchanged
    assert np.allclose(qs.project_to_physical(rho.data), rho.data, atol=1e-12)
