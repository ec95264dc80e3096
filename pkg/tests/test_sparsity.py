import itertools
from math import comb, floor

import numpy as np
import pytest
from scipy import stats

from sida.errors import ContractError
from sida.numkit import Rng
from sida.sparsity import (
    CriticalSetModel,
    DisplacementImpossible,
    SparsityProbe,
    corrupt_positions,
    corrupt_tokens,
    estimate_c,
    expected_change_prob,
    measure_p_hat,
)


def enumeration_oracle(length, c, p):
    """Exhaustively enumerate all corruption subsets and count hits."""
    m = min(floor(p * length), length - 1)
    critical = set(range(c))  # wlog the first c of the L-1 candidates
    others = list(range(length - 1))
    if m == 0:
        return 0.0
    hits = total = 0
    for subset in itertools.combinations(others, m):
        total += 1
        hits += int(bool(critical & set(subset)))
    return hits / total


class TestExpectedChangeProb:
    def test_no_critical_tokens(self):
        for length, p in ((5, 0.3), (8, 0.9), (16, 1.0)):
            assert expected_change_prob(length, 0, p) == 0.0

    def test_hand_case(self):
        # L=5, c=1, p=0.4 -> m=2: 1 - C(3,2)/C(4,2) = 0.5
        assert expected_change_prob(5, 1, 0.4) == pytest.approx(0.5)

    def test_everything_critical(self):
        for p in (0.2, 0.5, 1.0):
            assert expected_change_prob(6, 5, p) == 1.0

    def test_matches_enumeration_oracle(self):
        for length in (5, 8):
            for c in range(length):
                for p in (0.15, 0.3, 0.5, 0.75, 1.0):
                    got = expected_change_prob(length, c, p)
                    want = enumeration_oracle(length, c, p)
                    assert got == pytest.approx(want, abs=1e-12), (length, c, p)

    def test_monotone_in_c_and_p(self):
        length = 16
        grid = [0.1, 0.2, 0.3, 0.5, 0.7, 0.9]
        for p in grid:
            vals = [expected_change_prob(length, c, p) for c in range(length)]
            assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
        for c in (1, 3, 7):
            vals = [expected_change_prob(length, c, p) for p in grid]
            assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_domain_errors(self):
        with pytest.raises(ContractError):
            expected_change_prob(5, 5, 0.5)
        with pytest.raises(ContractError):
            expected_change_prob(5, -1, 0.5)
        with pytest.raises(ContractError):
            expected_change_prob(5, 2, 0.0)
        with pytest.raises(ContractError):
            expected_change_prob(5, 2, 1.5)


class TestCorruptTokens:
    def test_changes_exactly_m_positions(self):
        rng = Rng(0)
        seq = rng.integers(0, 50, size=12)
        for p in (0.25, 0.5, 0.99):
            out = corrupt_tokens(seq, 3, p, rng, 50)
            m = min(floor(p * 12), 11)
            assert int(np.sum(out != seq)) == m
            assert out[3] == seq[3]

    def test_all_but_i_changed(self):
        rng = Rng(1)
        seq = rng.integers(0, 30, size=6)
        out = corrupt_tokens(seq, 2, 0.999, rng, 30)
        changed = out != seq
        assert changed.sum() == 5 and not changed[2]

    def test_new_values_distinct_from_original_and_anchor(self):
        rng = Rng(2)
        for _ in range(200):
            seq = rng.integers(0, 5, size=8)
            i = int(rng.integers(0, 8))
            out = corrupt_tokens(seq, i, 0.6, rng, 5)
            for pos in np.nonzero(out != seq)[0]:
                assert out[pos] != seq[pos]
                assert out[pos] != seq[i]

    def test_small_vocab_rejected(self):
        with pytest.raises(ContractError):
            corrupt_tokens(np.array([0, 1, 0]), 0, 0.5, Rng(0), 2)

    def test_subset_selection_uniform_chi_square(self):
        # L=5, i=0, p=0.4 -> m=2 over positions {1,2,3,4}: 6 possible subsets
        rng = Rng(3)
        seq = np.arange(5) + 10
        counts = {}
        draws = 10_000
        for _ in range(draws):
            out = corrupt_tokens(seq, 0, 0.4, rng, 100)
            subset = tuple(np.nonzero(out != seq)[0].tolist())
            counts[subset] = counts.get(subset, 0) + 1
        assert len(counts) == comb(4, 2)
        observed = np.array(list(counts.values()))
        chi2 = float(np.sum((observed - draws / 6) ** 2 / (draws / 6)))
        assert chi2 < stats.chi2.ppf(0.999, df=5)


class TestCorruptPositions:
    def test_derangement_on_distinct_tokens(self):
        rng = Rng(4)
        seq = np.arange(10) * 3
        for _ in range(100):
            out = corrupt_positions(seq, 4, 0.5, rng)
            moved = np.nonzero(out != seq)[0]
            assert len(moved) == 5  # all chosen positions display a new value
            assert 4 not in moved

    def test_token_multiset_preserved(self):
        rng = Rng(5)
        seq = rng.integers(0, 8, size=9)
        for _ in range(100):
            try:
                out = corrupt_positions(seq, 0, 0.7, rng)
            except DisplacementImpossible:
                continue
            assert sorted(out.tolist()) == sorted(seq.tolist())

    def test_probe_position_untouched_1000_trials(self):
        rng = Rng(6)
        seq = rng.integers(0, 20, size=8)
        for _ in range(1000):
            try:
                out = corrupt_positions(seq, 5, 0.5, rng)
            except DisplacementImpossible:
                continue
            assert out[5] == seq[5]

    def test_identical_tokens_skip(self):
        with pytest.raises(DisplacementImpossible):
            corrupt_positions(np.zeros(6, dtype=int), 0, 0.9, Rng(7))

    def test_needs_two_positions(self):
        with pytest.raises(ContractError):
            corrupt_positions(np.arange(6), 0, 0.2, Rng(8))  # m=1


class TestMeasurePhat:
    def test_zero_trials_rejected(self):
        model = CriticalSetModel(8, 2, seed=0)
        corpus = [(np.arange(8), 0)]
        with pytest.raises(ContractError):
            measure_p_hat(model, corpus, 0, 0.5, 0)

    def test_no_critical_tokens_measures_zero(self):
        model = CriticalSetModel(8, 0, seed=0)
        corpus = [(Rng(0).integers(0, 100, size=8), 0)]
        assert measure_p_hat(model, corpus, 2, 0.5, 200, vocab_size=100) == 0.0

    def test_single_corruption_limit(self):
        # floor(p*L)=1: expected change probability is c/(L-1)
        length, c = 9, 3
        model = CriticalSetModel(length, c, seed=1)
        corpus = [(Rng(1).integers(0, 200, size=length), 0)]
        trials = 4000
        p_hat = measure_p_hat(model, corpus, 4, 1.0 / length, trials,
                              vocab_size=200, seed=5)
        expected = c / (length - 1)
        se = np.sqrt(expected * (1 - expected) / trials)
        assert abs(p_hat - expected) < 3 * se + 1e-9

    def test_matches_formula_within_3se(self):
        length = 8
        trials = 1500
        corpus = [(Rng(2).integers(0, 300, size=length), 0)]
        for c in (0, 1, 2, 4):
            model = CriticalSetModel(length, c, seed=3)
            for p in (0.2, 0.4, 0.6, 0.8):
                p_hat = measure_p_hat(model, corpus, 0, p, trials,
                                      vocab_size=300, seed=7)
                expected = expected_change_prob(length, c, p)
                se = np.sqrt(expected * (1 - expected) / trials)
                assert abs(p_hat - expected) <= 3 * se + 1e-9, (c, p)

    def test_position_mode_matches_formula(self):
        length, c = 10, 2
        model = CriticalSetModel(length, c, seed=9)
        corpus = [(np.arange(length) + 5, 0)]  # distinct tokens, derangement always works
        trials = 1500
        for p in (0.3, 0.6):
            p_hat = measure_p_hat(model, corpus, 1, p, trials, mode="position", seed=11)
            expected = expected_change_prob(length, c, p)
            se = np.sqrt(expected * (1 - expected) / trials)
            assert abs(p_hat - expected) <= 3 * se + 1e-9

    def test_p_hat_trend_on_real_model(self, small_planted_run):
        model, _, corpus = small_planted_run
        items = corpus.items()
        grid = [0.2, 0.5, 0.8]
        means = []
        for p in grid:
            vals = [
                measure_p_hat(model, items, i, p, 60, probe_layer=0, seed=13,
                              vocab_size=model.config.vocab_size,
                              sequence_index=s)
                for s in range(6)
                for i in range(min(4, len(items[s][0])))
            ]
            means.append(float(np.mean(vals)))
        assert means[0] <= means[1] + 0.05
        assert means[1] <= means[2] + 0.05


class TestEstimateC:
    def test_inverts_own_forward_model(self):
        length = 16
        grid = [0.1, 0.25, 0.5, 0.75, 0.9]
        for c in (0, 1, 2, 4, 9):
            curve = [expected_change_prob(length, c, p) for p in grid]
            assert estimate_c(grid, curve, length) == c

    def test_zero_curve_gives_zero(self):
        assert estimate_c([0.2, 0.5, 0.8], [0.0, 0.0, 0.0], 12) == 0

    def test_ties_prefer_smaller_c(self):
        # two grid points cannot distinguish c beyond the curve; a flat 1.0
        # curve is matched by every c >= m threshold; smallest c wins
        grid = [0.9, 1.0]
        vals = [1.0, 1.0]
        c_hat = estimate_c(grid, vals, 4)
        alt = [
            sum((expected_change_prob(4, c, p) - v) ** 2 for p, v in zip(grid, vals))
            for c in range(4)
        ]
        assert alt[c_hat] == min(alt)
        assert all(alt[c_hat] < a or c_hat <= i for i, a in enumerate(alt))

    def test_recovers_planted_c_from_monte_carlo(self):
        length = 12
        grid = [0.2, 0.4, 0.6, 0.8]
        corpus = [(Rng(5).integers(0, 400, size=length), 0)]
        for c in (1, 2, 4):
            model = CriticalSetModel(length, c, seed=17)
            p_hats = [
                measure_p_hat(model, corpus, 3, p, 3000, vocab_size=400, seed=19)
                for p in grid
            ]
            got = estimate_c(grid, p_hats, length)
            assert abs(got - c) <= 1

    def test_needs_two_points(self):
        with pytest.raises(ContractError):
            estimate_c([0.5], [0.2], 8)


class TestSparsityProbeType:
    def test_invariants(self):
        SparsityProbe(length=8, corruption_p=0.5, p_hat=0.3, c_hat=2)
        with pytest.raises(ContractError):
            SparsityProbe(length=8, corruption_p=0.05, p_hat=0.3, c_hat=2)
        with pytest.raises(ContractError):
            SparsityProbe(length=8, corruption_p=0.5, p_hat=0.3, c_hat=8)
