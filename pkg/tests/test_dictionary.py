import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedca.dictionary import (BadAlpha, DimMismatch, EmptyAccumulator, EnsembleAccumulator, EnsembleBank,
                              NoAccumulators, assemble_global_dictionary, build_local_dictionary,
                              ensemble_normalized, ensemble_update)


def test_update_examples():
    a0 = EnsembleAccumulator.empty(0, 2)
    a1 = ensemble_update(a0, (0.6, 0.8), 0.5)
    np.testing.assert_allclose(a1.Z, [0.3, 0.4], atol=1e-15)
    a2 = ensemble_update(a1, (1.0, 0.0), 0.5)
    np.testing.assert_allclose(a2.Z, [0.65, 0.2], atol=1e-15)
    assert a2.rounds_accumulated == 2
    assert a0.rounds_accumulated == 0, "updates return new accumulators"


def test_alpha_zero_tracks_latest():
    acc = EnsembleAccumulator.empty(3, 2)
    for z in ([1.0, 2.0], [-4.0, 0.5], [0.0, 1.0]):
        acc = ensemble_update(acc, z, 0.0)
        np.testing.assert_array_equal(acc.Z, z)


def test_normalized_examples():
    a1 = EnsembleAccumulator(0, np.array([0.3, 0.4]), 1)
    np.testing.assert_allclose(ensemble_normalized(a1), [0.6, 0.8], atol=1e-15)
    a2 = EnsembleAccumulator(0, np.array([0.65, 0.2]), 2)
    s = math.sqrt(0.4625)
    np.testing.assert_allclose(ensemble_normalized(a2), [0.65 / s, 0.2 / s], atol=1e-15)
    np.testing.assert_allclose(ensemble_normalized(a2), [0.95577, 0.29408], atol=1e-5)


def test_errors():
    with pytest.raises(BadAlpha):
        ensemble_update(EnsembleAccumulator.empty(0, 2), (1.0, 0.0), 1.0)
    with pytest.raises(BadAlpha):
        ensemble_update(EnsembleAccumulator.empty(0, 2), (1.0, 0.0), -0.1)
    with pytest.raises(EmptyAccumulator):
        ensemble_normalized(EnsembleAccumulator.empty(0, 2))
    with pytest.raises(DimMismatch):
        ensemble_update(EnsembleAccumulator.empty(0, 2), (1.0, 0.0, 0.0), 0.5)


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_bias_correction_cancels_after_normalization(alpha):
    rng = np.random.default_rng(int(alpha * 10))
    worst = 0.0
    for _ in range(100):
        acc = EnsembleAccumulator.empty(0, 4)
        for t in range(1, 11):
            acc = ensemble_update(acc, rng.standard_normal(4), alpha)
            corrected = acc.Z / (1 - alpha ** t)
            worst = max(worst, np.max(np.abs(ensemble_normalized(acc) - corrected / np.linalg.norm(corrected))))
    assert worst < 1e-12


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_constant_input_converges(alpha):
    z_star = np.array([2.0, -1.0, 0.5])
    acc = EnsembleAccumulator.empty(0, 3)
    for _ in range(math.ceil(math.log(1e-7) / math.log(alpha))):
        acc = ensemble_update(acc, z_star, alpha)
    assert np.max(np.abs(ensemble_normalized(acc) - z_star / np.linalg.norm(z_star))) < 1e-6


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.3, 0.5, 0.9]))
def test_bank_matches_scalar_accumulators(seed, alpha):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(20)[:6]
    bank = EnsembleBank(ids, 3)
    accs = [EnsembleAccumulator.empty(int(i), 3) for i in ids]
    for _ in range(4):
        z = rng.standard_normal((6, 3))
        bank.update(z, alpha)
        accs = [ensemble_update(a, row, alpha) for a, row in zip(accs, z)]
    for got, want in zip(bank.accumulators(), accs):
        assert got.sample_id == want.sample_id and got.rounds_accumulated == want.rounds_accumulated
        np.testing.assert_array_equal(got.Z, want.Z)


def _accs(n, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return [EnsembleAccumulator(int(i), rng.standard_normal(dim), 1) for i in rng.permutation(n)]


def test_local_dictionary_full_budget_is_sorted_by_id():
    accs = _accs(5)
    d = build_local_dictionary(accs, 5, seed=1)
    by_id = sorted(accs, key=lambda a: a.sample_id)
    np.testing.assert_allclose(d, [ensemble_normalized(a) for a in by_id], atol=1e-15)


def test_local_dictionary_with_replacement_when_short():
    accs = _accs(3)
    d = build_local_dictionary(accs, 5, seed=2)
    rows = np.array([ensemble_normalized(a) for a in accs])
    assert d.shape == (5, 3)
    for r in d:
        assert np.min(np.max(np.abs(rows - r), axis=1)) < 1e-15


def test_local_dictionary_deterministic_and_bank_equivalent():
    accs = _accs(30, seed=4)
    a = build_local_dictionary(accs, 7, seed=[3, 1])
    np.testing.assert_array_equal(a, build_local_dictionary(accs, 7, seed=[3, 1]))
    bank = EnsembleBank([x.sample_id for x in accs], 3)
    bank.Z = np.stack([x.Z for x in accs])
    bank.rounds[:] = 1
    np.testing.assert_array_equal(a, build_local_dictionary(bank, 7, seed=[3, 1]))
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)


def test_local_dictionary_without_updates_is_an_error():
    with pytest.raises(NoAccumulators):
        build_local_dictionary([], 3, seed=0)
    with pytest.raises(NoAccumulators):
        build_local_dictionary(EnsembleBank([0, 1], 2), 3, seed=0)


def test_global_assembly_examples():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[-1.0, 0.0], [0.0, -1.0]])
    g = assemble_global_dictionary([a, b], k_max=4, round=1)
    np.testing.assert_array_equal(g.entries, np.vstack([a, b]))
    assert g.round == 1
    c = np.array([[0.6, 0.8], [0.8, 0.6]])
    g = assemble_global_dictionary([a, b, c], k_max=4, round=2, seed=5)
    pool = np.vstack([a, b, c])
    assert len(g) == 4
    for row in g.entries:
        assert any(np.array_equal(row, p) for p in pool)
    assert len(assemble_global_dictionary([], k_max=4, round=0, dim=2)) == 0
    assert len(assemble_global_dictionary([a], k_max=0, round=3)) == 0


def test_global_assembly_rejects_mixed_widths():
    with pytest.raises(DimMismatch):
        assemble_global_dictionary([np.ones((1, 2)), np.ones((1, 3))], k_max=4, round=0)


@settings(max_examples=25)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=5), st.integers(0, 12), st.integers(0, 100))
def test_global_size_is_min_of_total_and_kmax(sizes, k_max, rnd):
    rng = np.random.default_rng(rnd)
    mats = [rng.standard_normal((s, 3)) for s in sizes]
    mats = [m / np.linalg.norm(m, axis=1, keepdims=True) if len(m) else m for m in mats]
    g = assemble_global_dictionary(mats, k_max=k_max, round=rnd)
    assert len(g) == min(sum(sizes), k_max)
    if len(g):
        np.testing.assert_allclose(np.linalg.norm(g.entries, axis=1), 1.0, atol=1e-12)
