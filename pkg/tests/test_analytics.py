from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esft_serve.analytics import (
    AdapterProfile,
    counts_from_summary,
    dry_run_accounting,
    fragmentation_factor,
    parse_profiles,
    reference_expert_size,
    reference_profiles,
    smallest_feasible_e_max,
    sparsity_factor,
)
from esft_serve.errors import InputError

# Expected sparsity factors of the ten reference adapters (two decimals).
REFERENCE_SPARSITY = {
    "gate-math": 0.41, "token-math": 0.32, "gate-intent": 0.21, "token-intent": 0.11,
    "gate-summary": 0.30, "token-summary": 0.36, "gate-law": 0.39, "token-law": 0.34,
    "gate-translation": 0.64, "token-translation": 0.36,
}


def test_reference_sparsity_matches_expected_values():
    for p in reference_profiles():
        assert sparsity_factor(p) == pytest.approx(REFERENCE_SPARSITY[p.name], abs=0.005)


def test_reference_fragmentation():
    profiles = reference_profiles()
    assert smallest_feasible_e_max(profiles) == 13
    f = fragmentation_factor(profiles, 64, 13)
    assert f == pytest.approx(194 / 129.13, abs=1e-12)
    assert f == pytest.approx(1.51, abs=0.02)


def test_fragmentation_exact_against_fraction_oracle():
    a = AdapterProfile("a", counts=(3, 1, 0))
    b = AdapterProfile("b", counts=(2, 2, 2))
    expected = Fraction(3 * (8 + 2 * 3), (8 + 5) + (8 + 3) + (8 + 2))
    assert fragmentation_factor([a, b], 8, 3) == pytest.approx(float(expected), abs=1e-15)


def test_no_adapters_means_no_fragmentation():
    assert fragmentation_factor([], 64, 1) == 1.0


def test_e_max_too_small_is_rejected():
    with pytest.raises(InputError):
        fragmentation_factor(reference_profiles(), 64, 12)


def test_sparsity_from_counts():
    assert sparsity_factor(AdapterProfile("d", counts=(4, 4, 4))) == 0.0
    assert sparsity_factor(AdapterProfile("s", counts=(4, 0, 2, 2))) == pytest.approx(0.5)
    with pytest.raises(InputError):
        sparsity_factor(AdapterProfile("z", counts=(0, 0)))


@settings(max_examples=200, deadline=None)
@given(
    max_e=st.integers(1, 20),
    layers=st.integers(2, 40),
    frac=st.floats(0.0, 1.0),
)
def test_counts_from_summary_hits_max_and_mean(max_e, layers, frac):
    lo, hi = max_e / layers, max_e
    avg = lo + frac * (hi - lo)
    counts = counts_from_summary(max_e, avg, layers)
    assert len(counts) == layers and max(counts) == max_e and min(counts) >= 0
    assert sum(counts) == round(avg * layers)
    assert max(counts[1:]) - min(counts[1:]) <= 1


def test_reference_summaries_expand_exactly_at_26_layers():
    for p in reference_profiles():
        c = p.expand(26)
        assert max(c) == p.max_count
        assert sum(c) / 26 == pytest.approx(p.avg_count, abs=0.005)


def test_parse_profiles_formats():
    text = """
    # comment
    a 1 2 3
    b max=4 avg=2.5   # trailing
    """
    a, b = parse_profiles(text)
    assert a.counts == (1, 2, 3)
    assert (b.max_count, b.avg_count) == (4, 2.5)


@pytest.mark.parametrize("bad", ["a", "a x y", "a max=3", "a max=3 avg=4", "a -1 2"])
def test_parse_profiles_rejects_garbage(bad):
    with pytest.raises(InputError):
        parse_profiles(bad)


def test_dry_run_shares_straddle_page_with_base():
    # one base expert on pages {0, 1}; the adapter expert covers {1, 2}
    rep = dry_run_accounting([AdapterProfile("a", counts=(1,))], 1, 1, 6144, 4096, 2)
    assert rep.pages_mapped == 1
    assert rep.padded_bytes == 2 * 6144
    assert rep.used_bytes == 6144
    assert rep.per_adapter_pages == {"a": 1}


def test_dry_run_with_separate_pages():
    rep = dry_run_accounting([AdapterProfile("a", counts=(1,))], 1, 2, 6144, 4096, 2)
    assert rep.pages_mapped == 2 and rep.mapped_bytes == 8192


def test_reference_dry_run_halves_adapter_memory():
    rep = dry_run_accounting(reference_profiles(), 26, 64, reference_expert_size(), 2 << 20, 13)
    assert reference_expert_size() == 17_301_504
    assert rep.padded_bytes == 26 * 130 * 17_301_504
    assert rep.used_bytes == sum(round(26 * p.avg_count) for p in reference_profiles()) * 17_301_504
    assert rep.mapped_bytes / rep.padded_bytes == pytest.approx(1 - 65.13 / 130, abs=0.02)
    assert rep.mapped_bytes >= rep.used_bytes
