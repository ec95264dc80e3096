"""Critical-token analysis: corruption probes and the subset-inclusion model.

For a length-L sequence, token i has some set of "critical" positions whose
token changes flip i's expert selection. Corrupting a uniformly chosen
subset of floor(p*L) positions (capped at L-1, never touching i) changes
the selection exactly when the subset hits a critical position, so the
expected change probability is

    1 - C(L-1-c, m) / C(L-1, m),   m = min(floor(p*L), L-1).

``measure_p_hat`` estimates that probability on any model exposing
``expert_selection(tokens, layer)``; ``estimate_c`` inverts the curve to an
integer critical-set size. ``CriticalSetModel`` implements the subset
semantics exactly (selection is the tuple of tokens at the planted critical
positions), making the inversion well-posed for the statistical checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb, floor

import numpy as np

from .errors import ContractError
from .numkit import Rng


class DisplacementImpossible(RuntimeError):
    """The chosen positions cannot all receive a different token value."""


@dataclass
class SparsityProbe:
    """One measured probe point plus its inverted critical-set estimate."""

    length: int
    corruption_p: float
    p_hat: float
    c_hat: int

    def __post_init__(self):
        if floor(self.corruption_p * self.length) < 1:
            raise ContractError("probed p must satisfy floor(p*L) >= 1")
        if not 0 <= self.c_hat <= self.length - 1:
            raise ContractError("c_hat must lie in [0, L-1]")


def expected_change_prob(length: int, c: int, p: float) -> float:
    """Exact probability that a uniform corruption subset contains a critical token."""
    if not 0 <= c <= length - 1:
        raise ContractError("c must lie in [0, L-1]")
    if not 0.0 < p <= 1.0:
        raise ContractError("p must lie in (0, 1]")
    m = min(floor(p * length), length - 1)
    if m > length - 1 - c:
        return 1.0
    ratio = Fraction(comb(length - 1 - c, m), comb(length - 1, m))
    return float(1 - ratio)


def _choose_subset(length: int, i: int, p: float, rng: Rng) -> np.ndarray:
    if length < 2:
        raise ContractError("sequence must have length >= 2")
    if not 0 <= i < length:
        raise ContractError("probe position out of range")
    m = min(floor(p * length), length - 1)
    others = np.array([j for j in range(length) if j != i])
    if m == 0:
        return others[:0]
    return rng.choice(others, size=m, replace=False)


def corrupt_tokens(
    sequence: np.ndarray, i: int, p: float, rng: Rng, vocab_size: int
) -> np.ndarray:
    """Replace floor(p*L) tokens at positions != i with values distinct from
    both their original value and the token at position i."""
    sequence = np.asarray(sequence, dtype=np.int64)
    if vocab_size < 3:
        raise ContractError("vocab too small to satisfy distinctness")
    chosen = _choose_subset(len(sequence), i, p, rng)
    out = sequence.copy()
    anchor = int(sequence[i])
    for pos in chosen:
        excluded = sorted({int(sequence[pos]), anchor})
        draw = int(rng.integers(0, vocab_size - len(excluded)))
        for ex in excluded:
            if draw >= ex:
                draw += 1
        out[pos] = draw
    return out


def corrupt_positions(sequence: np.ndarray, i: int, p: float, rng: Rng) -> np.ndarray:
    """Permute the tokens at floor(p*L) chosen positions (never i) so that no
    chosen position keeps its token value; re-drawn up to 100 times."""
    sequence = np.asarray(sequence, dtype=np.int64)
    chosen = _choose_subset(len(sequence), i, p, rng)
    if len(chosen) < 2:
        raise ContractError("position corruption needs floor(p*L) >= 2")
    original = sequence[chosen]
    if np.all(original == original[0]):
        raise DisplacementImpossible("all chosen tokens are identical")
    for _ in range(100):
        perm = rng.permutation(len(chosen))
        if np.all(original[perm] != original):
            out = sequence.copy()
            out[chosen] = original[perm]
            return out
    raise DisplacementImpossible("no displacing shuffle found in 100 tries")


def probe_selection(model, tokens: np.ndarray, layer: int):
    """Per-position expert selection at one layer, as comparable values."""
    return model.expert_selection(tokens, layer)


def measure_p_hat(
    model,
    corpus,
    i: int,
    p: float,
    trials: int,
    mode: str = "token",
    probe_layer: int = 0,
    seed: int = 0,
    vocab_size: int | None = None,
    sequence_index: int = 0,
) -> float:
    """Empirical probability that corruption changes token i's expert selection.

    ``corpus`` is a sequence of (tokens, label) pairs or raw token arrays;
    one fixed probe sequence (``sequence_index``) is used for all trials.
    Trials where a position shuffle cannot displace any token are skipped
    and excluded from the denominator.
    """
    if trials < 1:
        raise ContractError("trials must be >= 1")
    if mode not in ("token", "position"):
        raise ContractError(f"unknown corruption mode {mode!r}")
    items = list(corpus)
    entry = items[sequence_index]
    tokens = np.asarray(entry[0] if isinstance(entry, tuple) else entry, dtype=np.int64)
    if vocab_size is None:
        vocab_size = int(tokens.max()) + 2
    base = probe_selection(model, tokens, probe_layer)[i]
    rng = Rng(seed)
    changed = 0
    skipped = 0
    for trial_rng in rng.split(trials):
        try:
            if mode == "token":
                corrupted = corrupt_tokens(tokens, i, p, trial_rng, vocab_size)
            else:
                corrupted = corrupt_positions(tokens, i, p, trial_rng)
        except DisplacementImpossible:
            skipped += 1
            continue
        if probe_selection(model, corrupted, probe_layer)[i] != base:
            changed += 1
    effective = trials - skipped
    if effective == 0:
        raise ContractError("all corruption trials were skipped")
    return changed / effective


def estimate_c(p_grid, p_hat_values, length: int) -> int:
    """Least-squares inversion of expected_change_prob to an integer c."""
    p_grid = list(p_grid)
    p_hat_values = list(p_hat_values)
    if len(p_grid) < 2 or len(p_grid) != len(p_hat_values):
        raise ContractError("need >= 2 matching grid points")
    best_c, best_err = 0, np.inf
    for c in range(length):
        err = sum(
            (expected_change_prob(length, c, p) - ph) ** 2
            for p, ph in zip(p_grid, p_hat_values)
        )
        if err < best_err - 1e-15:
            best_c, best_err = c, err
    return best_c


class CriticalSetModel:
    """Synthetic model whose selection for position i is exactly the tuple of
    tokens at i's planted critical positions: any critical change flips it."""

    def __init__(self, length: int, c: int, seed: int = 0):
        if not 0 <= c <= length - 1:
            raise ContractError("c must lie in [0, L-1]")
        self.length = length
        self.c = c
        rng = Rng(seed)
        self.critical_sets = []
        for i in range(length):
            others = np.array([j for j in range(length) if j != i])
            chosen = rng.choice(others, size=c, replace=False) if c else others[:0]
            self.critical_sets.append(np.sort(chosen))

    def expert_selection(self, tokens: np.ndarray, layer: int):
        tokens = np.asarray(tokens)
        return [tuple(tokens[cs].tolist()) for cs in self.critical_sets]
