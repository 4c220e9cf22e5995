import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import spam_params
from oracles import bitstrings, bloch_of, dense_inverse_correction, histogram_vector, rho_from_bloch, rx, rz
from qspam.errors import NoCorrectionPossible, NonInvertibleConfusion
from qspam.mitigation import (
    ConfusionSet,
    QuasiDistribution,
    bias_bound,
    build_confusion,
    compare_standard_vs_qspam,
    compile_sp_correction,
    confusion_matrix,
    corrected_marginals,
    corrected_probabilities,
    corrected_probability,
    mitigate_histogram,
    mitigated_expectation,
    parity_observable,
    record_bias_bound,
    sigma_upper_bound,
)
from qspam.qcore import BlochVector
from qspam.sim import NoiseConfig, ReadoutHistogram, draw_injection_angles, run_ghz
from qspam.spam_model import SpamParams, rotated_sp_params


def random_histogram(rng, n, n_outcomes=None, nu=4096):
    strings = bitstrings(n)
    k = n_outcomes or len(strings)
    chosen = rng.choice(len(strings), size=min(k, len(strings)), replace=False)
    counts = rng.multinomial(nu, rng.dirichlet(np.ones(len(chosen))))
    return ReadoutHistogram({strings[i]: int(c) for i, c in zip(chosen, counts)}, nu)


def random_confusion(rng, n):
    mats = []
    for _ in range(n):
        am = rng.uniform(0.6, 0.99)
        mats.append(confusion_matrix(am, rng.uniform(-0.9, 0.9) * (1 - am)))
    return ConfusionSet(tuple(mats))


# ---------------------------------------------------------------------------
# confusion matrices


def test_perfect_readout_is_identity():
    assert np.allclose(build_confusion([SpamParams(1.0, 0.0)]).matrices[0], np.eye(2))


def test_high_error_qubit_matrix():
    a = build_confusion([SpamParams(0.8088, 0.1476)]).matrices[0]
    assert np.allclose(a, [[0.9782, 0.1694], [0.0218, 0.8306]], atol=1e-12)
    assert np.linalg.det(a) == pytest.approx(0.8088, abs=1e-12)


def test_standard_matrix_absorbs_preparation_error():
    b = build_confusion([SpamParams(0.9, 0.0, BlochVector(0, 0, 0.98))], "B").matrices[0]
    assert np.diag(b) == pytest.approx((0.941, 0.941), abs=1e-12)


@given(spam_params(epsilon=False))
def test_determinants(p):
    a = build_confusion([p], "A").matrices[0]
    b = build_confusion([p], "B").matrices[0]
    assert np.linalg.det(a) == pytest.approx(p.alpha_m, abs=1e-12)
    assert np.linalg.det(b) == pytest.approx(p.alpha_m * p.alpha_sp.z, abs=1e-12)


def test_singular_confusion_rejected():
    c = ConfusionSet((confusion_matrix(0.0, 0.0),))
    with pytest.raises(NonInvertibleConfusion):
        c.inverses()


def test_confusion_validation():
    with pytest.raises(ValueError):
        ConfusionSet(([[0.9, 0.2], [0.2, 0.8]],))


# ---------------------------------------------------------------------------
# correction pulses


def _apply_pulse_oracle(theta1, theta2, v):
    u = rz(-math.pi) @ rx(math.pi / 2) @ rz(math.pi) @ rz(theta2) @ rx(math.pi / 2) @ rz(theta1)
    return bloch_of(u @ rho_from_bloch(*v) @ u.conj().T)


def test_aligned_vector_needs_no_rotation():
    pulse = compile_sp_correction((0, 0, 0.99))
    assert pulse.x_degenerate and pulse.y_degenerate
    assert _apply_pulse_oracle(pulse.theta1, pulse.theta2, (0, 0, 0.99)) == pytest.approx((0, 0, 0.99), abs=1e-12)


def test_x_degenerate_branch():
    pulse = compile_sp_correction((0, 0.1, 0.99))
    norm = math.hypot(0.1, 0.99)
    assert pulse.x_degenerate and not pulse.y_degenerate
    assert pulse.theta1 == pytest.approx(-math.pi / 2)
    assert pulse.theta2 == pytest.approx(math.asin(0.99 / norm) - math.pi / 2, abs=1e-12)
    assert pulse.theta2 == pytest.approx(-0.1006687, abs=1e-7)
    assert _apply_pulse_oracle(pulse.theta1, pulse.theta2, (0, 0.1, 0.99)) == pytest.approx((0, 0, norm), abs=1e-12)


def test_general_vector():
    v = (0.1, 0.1, 0.98)
    pulse = compile_sp_correction(v)
    out = _apply_pulse_oracle(pulse.theta1, pulse.theta2, v)
    assert out == pytest.approx((0, 0, math.sqrt(0.9804)), abs=1e-12)
    assert out[2] == pytest.approx(np.linalg.norm(v), abs=1e-9)


def test_thresholded_components_are_dropped():
    pulse = compile_sp_correction((0.01, 0.2, 0.95), uncertainty=(0.02, 0.02))
    assert pulse.x_degenerate and not pulse.y_degenerate
    assert pulse.target.as_array() == pytest.approx((0, 0.2, 0.95))
    pulse = compile_sp_correction((0.2, -0.01, 0.95), uncertainty=(0.02, 0.02))
    assert pulse.y_degenerate and not pulse.x_degenerate


def test_zero_vector_cannot_be_corrected():
    with pytest.raises(NoCorrectionPossible):
        compile_sp_correction((0, 0, 0))


def test_pulse_unitary_matches_gate_list(rng):
    for _ in range(50):
        v = rng.normal(size=3)
        v[2] = abs(v[2])
        v *= rng.uniform(0.1, 1) / np.linalg.norm(v)
        pulse = compile_sp_correction(v)
        u = pulse.unitary()
        out = bloch_of(u @ rho_from_bloch(*v) @ u.conj().T)
        assert out == pytest.approx(_apply_pulse_oracle(pulse.theta1, pulse.theta2, v), abs=1e-12)


def test_correction_over_many_vectors(rng):
    n = 10_000
    v = rng.normal(size=(n, 3))
    v[:, 2] = np.abs(v[:, 2])
    v *= rng.uniform(0.05, 1, (n, 1)) / np.linalg.norm(v, axis=1, keepdims=True)
    # exercise every branch, including sign variants of the degenerate rules
    v[: n // 8, 0] = 0.0
    v[n // 8 : n // 4, 1] = 0.0
    v[n // 4 : n // 4 + 50, :2] = 0.0
    unc = np.zeros((n, 2))
    unc[n // 2 : n // 2 + 500] = np.abs(v[n // 2 : n // 2 + 500, :2]) / 1.5
    worst = 0.0
    branches = set()
    for row, du in zip(v, unc):
        pulse = compile_sp_correction(row, uncertainty=du)
        t = pulse.target.as_array()
        out = _apply_pulse_oracle(pulse.theta1, pulse.theta2, t)
        worst = max(worst, float(np.max(np.abs(out - (0, 0, np.linalg.norm(t))))))
        branches.add((pulse.x_degenerate, pulse.y_degenerate))
    assert worst < 1e-9
    assert branches == {(False, False), (True, False), (False, True), (True, True)}


# ---------------------------------------------------------------------------
# readout correction


def test_identity_confusion_keeps_frequencies(rng):
    h = random_histogram(rng, 3)
    q = mitigate_histogram(h, ConfusionSet.identity(3))
    assert q.values == pytest.approx(h.frequencies())


def test_single_qubit_inversion():
    h = ReadoutHistogram({"0": 95, "1": 5}, 100)
    q = mitigate_histogram(h, build_confusion([SpamParams(0.9, 0.0)]))
    assert q.values.get("0", 0) == pytest.approx(1.0, abs=1e-12)
    assert abs(q.values.get("1", 0.0)) < 1e-12


def test_two_qubit_correction_matches_dense():
    h = ReadoutHistogram({"00": 9, "11": 1}, 10)
    params = [SpamParams(0.9, 0.0)] * 2
    c = build_confusion(params)
    q = mitigate_histogram(h, c)
    dense = dense_inverse_correction(histogram_vector(h.counts, 2), c.matrices)
    assert [q.values.get(s, 0.0) for s in bitstrings(2)] == pytest.approx(dense, abs=1e-12)


def test_sparse_equals_dense_correction(rng):
    for n in range(1, 7):
        for _ in range(5):
            h = random_histogram(rng, n, n_outcomes=rng.integers(1, 2**n + 1))
            c = random_confusion(rng, n)
            q = mitigate_histogram(h, c)
            dense = dense_inverse_correction(histogram_vector(h.counts, n), c.matrices)
            sparse = np.array([q.values.get(s, 0.0) for s in bitstrings(n)])
            assert np.max(np.abs(sparse - dense)) < 1e-9
            assert abs(q.total - 1) < 1e-9
            single = [corrected_probability(h, c, s) for s in bitstrings(n)[:4]]
            assert single == pytest.approx(dense[:4], abs=1e-12)


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_quasi_distribution_normalized(n, seed):
    rng = np.random.default_rng(seed)
    q = mitigate_histogram(random_histogram(rng, n, nu=int(rng.integers(1, 5000))), random_confusion(rng, n))
    assert abs(q.total - 1) < 1e-9


def test_negative_entries_are_kept_and_flagged():
    h = ReadoutHistogram({"00": 100}, 100)
    q = mitigate_histogram(h, build_confusion([SpamParams(0.9, 0.05)] * 2))
    assert q.negative_entries()
    d = q.to_json()
    assert all(d["negative"][k] == (v < 0) for k, v in d["values"].items())
    assert QuasiDistribution({"1": 0.5, "0": 0.5}).total == 1.0


def test_corrected_probabilities_checks_width(rng):
    h = random_histogram(rng, 3)
    with pytest.raises(ValueError):
        corrected_probabilities(h, ConfusionSet.identity(3), ["01"])
    with pytest.raises(ValueError):
        mitigate_histogram(h, ConfusionSet.identity(2))


def test_marginals_match_single_qubit_correction(rng):
    h = random_histogram(rng, 3)
    c = random_confusion(rng, 3)
    marg = corrected_marginals(h, c)
    for i in range(3):
        hi = h.marginal([i])
        qi = mitigate_histogram(hi, ConfusionSet((c.matrices[i],)))
        assert marg[i] == pytest.approx([qi.values.get("0", 0.0), qi.values.get("1", 0.0)], abs=1e-12)


# ---------------------------------------------------------------------------
# expectation values


def test_identity_bell_parity():
    h = ReadoutHistogram({"00": 512, "11": 512}, 1024)
    assert mitigated_expectation(h, ConfusionSet.identity(2))[0] == pytest.approx(1.0)


def test_mitigated_bell_parity():
    params = (SpamParams(0.9, 0.03), SpamParams(0.85, -0.02))
    h = run_ghz(2, NoiseConfig(params, seed=6), nu=1 << 16)
    raw, _ = mitigated_expectation(h, ConfusionSet.identity(2))
    v, s = mitigated_expectation(h, build_confusion(params))
    assert raw < 0.8
    assert abs(v - 1) <= 3 * s


def test_observable_matches_quasi_distribution(rng):
    h = random_histogram(rng, 4)
    c = random_confusion(rng, 4)
    q = mitigate_histogram(h, c)
    for qubits in ([0, 1, 2, 3], [1, 3], [2]):
        expected = sum(v * (-1) ** sum(int(k[i]) for i in qubits) for k, v in q.values.items())
        assert mitigated_expectation(h, c, parity_observable(qubits))[0] == pytest.approx(expected, abs=1e-12)


def test_multinomial_variance_is_exact_for_single_qubit():
    h = ReadoutHistogram({"0": 700, "1": 300}, 1000)
    c = build_confusion([SpamParams(0.9, 0.02)])
    _, s = mitigated_expectation(h, c, multinomial=True)
    inv = np.linalg.inv(c.matrices[0])
    coef = np.array([1, -1]) @ inv
    var = 0.7 * 0.3 * (coef[0] - coef[1]) ** 2 / 1000
    assert s == pytest.approx(math.sqrt(var), rel=1e-12)


def test_observable_magnitude_checked():
    h = ReadoutHistogram({"0": 1}, 1)
    with pytest.raises(ValueError):
        mitigated_expectation(h, ConfusionSet.identity(1), lambda b: 2.0 * np.ones(len(b)))


def test_sigma_never_exceeds_bound(rng):
    for _ in range(100):
        n = int(rng.integers(1, 6))
        h = random_histogram(rng, n, nu=int(rng.integers(100, 10000)))
        c = random_confusion(rng, n)
        _, s = mitigated_expectation(h, c)
        assert s <= sigma_upper_bound(c, h.nu) + 1e-15
        assert s <= sigma_upper_bound(c, h.nu, list(h.counts)) + 1e-15


def test_sigma_bound_identity():
    assert sigma_upper_bound(ConfusionSet.identity(3), 100) == pytest.approx(0.1)


def test_mitigated_parity_unbiased():
    params = tuple(SpamParams(0.9, 0.02) for _ in range(4))
    c = build_confusion(params)
    vals = []
    for s in range(200):
        h = run_ghz(4, NoiseConfig(params, seed=s), nu=1 << 12)
        vals.append(mitigated_expectation(h, c)[0])
    se = np.std(vals, ddof=1) / math.sqrt(len(vals))
    assert abs(np.mean(vals) - 1.0) < 3 * se


# ---------------------------------------------------------------------------
# standard versus SP-aware correction


def test_bounds_vanish_without_preparation_error():
    params = [SpamParams(0.9, 0.02), SpamParams(0.8, -0.05)]
    b = bias_bound(params, 4, [0.6, 0.3])
    assert b["weak_bound"] == 0 and b["general_bound"] == 0


def test_weak_bound_example():
    b = bias_bound([SpamParams(0.9, 0.0, BlochVector(0, 0, 0.965))], 2, [0.95])
    assert b["weak_bound"] == pytest.approx(2 * (1 / 0.965 - 1) * (abs(1 - 1.9) / 1.8), abs=1e-12)
    assert b["weak_bound"] == pytest.approx(0.03627, abs=1e-5)


def test_general_bound_for_product_readout(rng):
    # for uncorrelated outcomes the marginal bounds dominate the exact difference
    for _ in range(100):
        n = int(rng.integers(1, 5))
        params = [
            SpamParams(am, rng.uniform(-0.5, 0.5) * (1 - am), BlochVector(0, 0, rng.uniform(0.9, 1.0)))
            for am in rng.uniform(0.8, 0.99, n)
        ]
        pi0 = rng.uniform(0.05, 0.95, n)
        probs = np.array([1.0])
        for q in pi0:
            probs = np.kron(probs, [q, 1 - q])
        parity = np.array([(-1) ** s.count("1") for s in bitstrings(n)])
        vals = []
        for mode in ("A", "B"):
            c = build_confusion(params, mode)
            vals.append(parity @ dense_inverse_correction(probs, c.matrices))
        b = bias_bound(params, 2**n, list(pi0))
        assert abs(vals[1] - vals[0]) <= b["general_bound"] + 1e-12
        if b["weak_condition"]:
            assert abs(vals[1] - vals[0]) <= b["weak_bound"] + 1e-12


def test_identical_estimates_without_preparation_error():
    params = tuple(SpamParams(0.9, 0.02) for _ in range(4))
    h = run_ghz(4, NoiseConfig(params, p2=0.01, seed=1), nu=1 << 12)
    r = compare_standard_vs_qspam(h, params)
    assert r["qspam_a"] == r["standard_b"]
    assert r["difference"] == 0 and r["record_bound"] == 0


def test_standard_correction_overshoots_with_preparation_error():
    angles = draw_injection_angles(4, 0.035, seed=3)
    truth = tuple(
        SpamParams(0.9, 0.02, rotated_sp_params((0, 0, 1), a)) for a in angles
    )
    h = run_ghz(4, NoiseConfig(truth, p1=0.001, p2=0.01, gamma=0.001, seed=5), nu=1 << 14)
    r = compare_standard_vs_qspam(h, truth)
    assert r["standard_b"]["value"] > r["qspam_a"]["value"]
    assert r["within_record_bound"]
    assert abs(r["difference"]) <= record_bias_bound(h, build_confusion(truth, "A"), build_confusion(truth, "B"))


def test_record_bound_dominates_random_cases(rng):
    for _ in range(100):
        n = int(rng.integers(1, 6))
        params = [
            SpamParams(am, 0.0, BlochVector(0, 0, rng.uniform(0.8, 1.0))) for am in rng.uniform(0.7, 0.99, n)
        ]
        h = random_histogram(rng, n)
        r = compare_standard_vs_qspam(h, params)
        assert abs(r["difference"]) <= r["record_bound"] + 1e-12
        for qubits in ([0], list(range(n))):
            obs = parity_observable(qubits)
            va = mitigated_expectation(h, build_confusion(params, "A"), obs)[0]
            vb = mitigated_expectation(h, build_confusion(params, "B"), obs)[0]
            assert abs(vb - va) <= r["record_bound"] + 1e-12


def test_comparison_report_fields():
    params = [SpamParams(0.9, 0.0, BlochVector(0, 0, 0.9))]
    r = compare_standard_vs_qspam(ReadoutHistogram({"0": 99, "1": 1}, 100), params)
    assert set(r) >= {"raw", "qspam_a", "standard_b", "difference", "weak_bound", "general_bound", "non_physical"}
    assert r["non_physical"]["standard_b"]
    with pytest.raises(ValueError):
        compare_standard_vs_qspam(ReadoutHistogram({"00": 1}, 1), params)
