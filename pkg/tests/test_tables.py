import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thc.errors import InfeasibleError, PreconditionError, TableFormatError, TableNotFoundError
from thc.hadamard import compute_tp
from thc.tables import (
    LookupTable,
    TableKey,
    calc_quantization_values,
    count_tables,
    enumerate_tables,
    is_mirror_symmetric,
    load_table,
    optimal_table_dp,
    quantization_variance,
    read_cache,
    save_table,
    solve_optimal_table,
    stars_and_bars,
    validate_table,
)

TP32 = compute_tp(1 / 32)


def brute_tables(b, g):
    """Oracle family: choose the 2**b - 2 interior values directly."""
    for mid in itertools.combinations(range(1, g), 2**b - 2):
        yield (0, *mid, g)


def mc_sq_variance(T, t_p, samples, seed=0):
    """Monte Carlo oracle: actually quantize truncated-normal draws.

    Returns (estimate, standard error) of E[1{|a| <= t_p} (SQ(a) - a)^2].
    """
    rng = np.random.default_rng(seed)
    g = T[-1]
    q = 2 * t_p * np.asarray(T) / g - t_p
    a = rng.standard_normal(samples)
    inside = np.abs(a) <= t_p
    ai = a[inside]
    lo = np.clip(np.searchsorted(q, ai, side="right") - 1, 0, len(q) - 2)
    up = rng.random(ai.size) < (ai - q[lo]) / (q[lo + 1] - q[lo])
    err = np.zeros(samples)
    err[inside] = (q[lo + up] - ai) ** 2
    return err.mean(), err.std() / math.sqrt(samples)


# enumeration ---------------------------------------------------------------

def test_stars_and_bars_hand_trace():
    assert list(stars_and_bars(2, 2)) == [[2, 0], [1, 1], [0, 2]]


@pytest.mark.parametrize("n,k", [(0, 1), (0, 3), (3, 1), (4, 3), (5, 4), (6, 2)])
def test_stars_and_bars_counts_and_distinct(n, k):
    out = [tuple(b) for b in stars_and_bars(n, k)]
    assert len(out) == math.comb(n + k - 1, k - 1) == len(set(out))
    assert all(sum(b) == n and min(b) >= 0 for b in out)
    assert out[0] == (n,) + (0,) * (k - 1)
    assert out[-1] == (0,) * (k - 1) + (n,)


def test_stars_and_bars_rejects_bad_args():
    with pytest.raises(InfeasibleError):
        list(stars_and_bars(-1, 2))


def test_enumerate_forced_tables():
    assert list(enumerate_tables(1, 1)) == [(0, 1)]
    assert list(enumerate_tables(2, 3)) == [(0, 1, 2, 3)]


def test_enumerate_infeasible():
    with pytest.raises(InfeasibleError):
        list(enumerate_tables(2, 2))
    with pytest.raises(InfeasibleError):
        TableKey(3, 6, Fraction(1, 32))


@pytest.mark.parametrize("b,g", [(1, 5), (2, 4), (2, 9), (3, 7), (3, 12), (4, 17)])
def test_enumerate_matches_brute_force(b, g):
    got = list(enumerate_tables(b, g))
    assert len(got) == count_tables(b, g) == math.comb(g - 1, 2**b - 2)
    assert sorted(got) == sorted(brute_tables(b, g))


@pytest.mark.parametrize("b,g", [(2, 7), (2, 8), (3, 11), (3, 15), (3, 16), (4, 21)])
def test_symmetric_enumeration_is_mirror_filter(b, g):
    got = sorted(enumerate_tables(b, g, symmetric=True))
    expected = sorted(t for t in brute_tables(b, g) if is_mirror_symmetric(t))
    assert got == expected
    assert len(got) == count_tables(b, g, symmetric=True)


def test_validate_table():
    validate_table((0, 1, 3, 4), 2, 4)
    for bad in [(1, 2, 3, 4), (0, 2, 2, 4), (0, 1, 3)]:
        with pytest.raises(PreconditionError):
            validate_table(bad, 2, 4)


# objective -----------------------------------------------------------------

def test_variance_b1_closed_form():
    # int (a + t)(t - a) phi(a) da = (t^2 - 1) m0 + 2 t phi(t), m0 = 2 Phi(t) - 1
    t = TP32
    phi = math.exp(-t * t / 2) / math.sqrt(2 * math.pi)
    m0 = math.erf(t / math.sqrt(2))
    expected = (t * t - 1) * m0 + 2 * t * phi
    assert abs(quantization_variance((0, 1), t) - expected) < 1e-12


def test_variance_b1_monte_carlo():
    est, se = mc_sq_variance((0, 1), TP32, 10**6, seed=1)
    assert abs(quantization_variance((0, 1), TP32) - est) < 3 * se


# Frozen after agreement of closed form, quadrature and a 10^7-sample MC oracle.
VAR_B2G4 = {
    (0, 1, 2, 4): 0.468824592404311,
    (0, 1, 3, 4): 0.643040942351456,
    (0, 2, 3, 4): 0.468824592404311,
}


@pytest.mark.parametrize("T", sorted(VAR_B2G4))
def test_variance_b2_g4_frozen(T):
    assert abs(quantization_variance(T, TP32) - VAR_B2G4[T]) < 1e-12
    assert abs(quantization_variance(T, TP32, method="quadrature") - VAR_B2G4[T]) < 1e-10


def test_variance_worked_table_monte_carlo():
    est, se = mc_sq_variance((0, 1, 3, 4), TP32, 10**7, seed=2)
    assert abs(est - VAR_B2G4[(0, 1, 3, 4)]) < 3 * se


@given(st.integers(1, 3), st.integers(0, 20), st.sampled_from([1 / 32, 1 / 512, 0.3]), st.data())
@settings(max_examples=60, deadline=None)
def test_variance_bounds_and_quadrature_agree(b, extra, p, data):
    g = 2**b - 1 + extra
    mid = data.draw(st.lists(st.integers(1, g - 1), min_size=2**b - 2, max_size=2**b - 2,
                             unique=True).map(sorted)) if 2**b - 2 else []
    T = (0, *mid, g)
    t = compute_tp(p)
    v = quantization_variance(T, t)
    assert 0 <= v <= (2 * t) ** 2 / 4
    assert abs(v - quantization_variance(T, t, method="quadrature")) < 1e-10


def test_variance_rejects_bad_input():
    with pytest.raises(PreconditionError):
        quantization_variance((0, 2, 1), TP32)
    with pytest.raises(PreconditionError):
        quantization_variance((0, 1), TP32, tol=0)


@pytest.mark.parametrize("b,base", [(2, 4), (3, 9), (4, 16)])
def test_variance_weakly_decreasing_on_nested_grids(b, base):
    # a grid of g contains every point of the grid of g' when g' divides g
    vals = [solve_optimal_table(TableKey(b, base * k, Fraction(1, 32))).variance for k in (1, 2, 4)]
    assert vals[0] >= vals[1] - 1e-15 >= vals[2] - 2e-15


# solver --------------------------------------------------------------------

def test_solver_forced_table():
    for p in (Fraction(1, 32), Fraction(1, 3)):
        assert solve_optimal_table(TableKey(2, 3, p)).values == (0, 1, 2, 3)


def test_solver_b2_g4_tie_breaks_lexicographically():
    t = solve_optimal_table(TableKey(2, 4, Fraction(1, 32)))
    assert t.values == (0, 1, 2, 4)
    assert t.variance == pytest.approx(VAR_B2G4[(0, 1, 2, 4)], abs=1e-12)


@pytest.mark.parametrize("b", [1, 2, 3])
@pytest.mark.parametrize("p", [Fraction(1, 32), Fraction(1, 512)])
def test_solver_matches_brute_force(b, p):
    t = compute_tp(float(p))
    for g in range(2**b - 1, 13):
        best = min(quantization_variance(T, t) for T in brute_tables(b, g))
        sol = solve_optimal_table(TableKey(b, g, p))
        assert sol.variance <= best + 1e-12


@pytest.mark.parametrize("b,g", [(2, 30), (3, 20), (3, 33), (4, 20)])
def test_dp_matches_full_enumeration(b, g):
    key = TableKey(b, g, Fraction(1, 64))
    full = solve_optimal_table(key, search="full")
    dp = solve_optimal_table(key, search="dp")
    assert full.values == dp.values


def test_mirror_of_optimum_ties():
    for b, g in [(2, 7), (3, 15), (3, 12), (4, 19)]:
        key = TableKey(b, g, Fraction(1, 32))
        opt = solve_optimal_table(key)
        mirror = tuple(g - v for v in reversed(opt.values))
        assert abs(quantization_variance(mirror, opt.t_p) - opt.variance) < 1e-12


@pytest.mark.parametrize("b,g,tight", [(2, 7, False), (3, 15, False), (3, 9, True), (3, 11, True)])
def test_symmetric_search_never_beats_full(b, g, tight):
    key = TableKey(b, g, Fraction(1, 32))
    full = solve_optimal_table(key, search="full")
    sym = solve_optimal_table(key, search="symmetric")
    assert is_mirror_symmetric(sym.values)
    assert sym.variance >= full.variance - 1e-15
    assert (abs(sym.variance - full.variance) < 1e-12) == tight


def test_table_largest_case_is_symmetric():
    key = TableKey(4, 51, Fraction(1, 32))
    t = solve_optimal_table(key)
    assert t.values == (0, 5, 9, 12, 15, 18, 21, 24, 27, 30, 33, 36, 39, 42, 46, 51)
    assert is_mirror_symmetric(t.values)
    assert t.variance == pytest.approx(0.012013190225074844, abs=1e-14)


def test_dp_rejects_infeasible():
    with pytest.raises(InfeasibleError):
        optimal_table_dp(3, 5, TP32)


def test_unknown_search_mode():
    with pytest.raises(ValueError):
        solve_optimal_table(TableKey(1, 2, Fraction(1, 2)), search="greedy")


# quantization values -------------------------------------------------------

def _table(values, p=Fraction(1, 32)):
    b = int(math.log2(len(values)))
    return LookupTable(TableKey(b, values[-1], p), TP32, values, 0.0)


def test_quantization_values_worked_example():
    Q = calc_quantization_values(-1.0, 1.0, _table((0, 1, 3, 4)))
    assert Q.q.tolist() == [-1.0, -0.5, 0.5, 1.0]


def test_quantization_values_identity_is_uniform():
    Q = calc_quantization_values(-1.0, 1.0, LookupTable.identity(2))
    np.testing.assert_allclose(Q.q, [-1, -1 / 3, 1 / 3, 1], atol=1e-15)


def test_quantization_values_symmetric():
    Q = calc_quantization_values(-2.5, 2.5, _table((0, 5, 9, 12, 15, 18, 21, 24, 27, 30, 33, 36,
                                                    39, 42, 46, 51)))
    np.testing.assert_allclose(Q.q, -Q.q[::-1], atol=1e-14)


def test_quantization_values_endpoints_exact():
    for m, M in [(-0.1, 0.3), (-1e-3, 7.7), (-0.07481190, 0.07481190)]:
        Q = calc_quantization_values(m, M, _table((0, 2, 4, 5, 7, 20, 33, 51)))
        assert Q.q[0] == m and Q.q[-1] == M and np.all(np.diff(Q.q) > 0)


def test_quantization_values_reject_empty_range():
    with pytest.raises(PreconditionError):
        calc_quantization_values(1.0, 1.0, LookupTable.identity(2))


def test_lookup_table_inverse():
    t = _table((0, 1, 3, 4))
    assert t.inverse().tolist() == [0, 1, -1, 2, 3]


# cache ---------------------------------------------------------------------

def test_cache_roundtrip(tmp_path):
    path = tmp_path / "tables.txt"
    a = solve_optimal_table(TableKey(3, 12, Fraction(1, 32)))
    b = solve_optimal_table(TableKey(2, 9, Fraction(3, 1000)))
    save_table(path, a)
    save_table(path, b)
    save_table(path, a)  # replacing keeps one record per key
    assert len(read_cache(path)) == 2
    assert load_table(path, a.key) == a
    loaded = load_table(path, b.key)
    assert loaded.key.p == Fraction(3, 1000)
    assert (loaded.values, loaded.t_p, loaded.variance) == (b.values, b.t_p, b.variance)


def test_cache_missing_key(tmp_path):
    path = tmp_path / "tables.txt"
    save_table(path, LookupTable.identity(2))
    with pytest.raises(TableNotFoundError):
        load_table(path, TableKey(2, 4, Fraction(1, 32)))
    with pytest.raises(TableNotFoundError):
        load_table(tmp_path / "absent.txt", TableKey(2, 4, Fraction(1, 32)))


def test_cache_truncated(tmp_path):
    path = tmp_path / "tables.txt"
    save_table(path, LookupTable.identity(2))
    data = path.read_bytes()
    header = data.split(b"\n")[0] + b"\n"
    path.write_bytes(header)
    with pytest.raises(TableFormatError) as exc:
        read_cache(path)
    assert exc.value.offset == len(header)


def test_cache_corrupt_value_reports_offset(tmp_path):
    path = tmp_path / "tables.txt"
    save_table(path, LookupTable.identity(2))
    first = path.read_bytes()
    path.write_bytes(first + b"2 3 1 32 2.15 0.5\n0 1 x 3\n")
    with pytest.raises(TableFormatError) as exc:
        read_cache(path)
    assert exc.value.offset == len(first) + len(b"2 3 1 32 2.15 0.5\n")
    assert "offset" in str(exc.value)


def test_cache_file_format(tmp_path):
    path = tmp_path / "tables.txt"
    save_table(path, solve_optimal_table(TableKey(2, 4, Fraction(1, 32))))
    head, body, tail = path.read_text().split("\n")
    assert head.split()[:4] == ["2", "4", "1", "32"]
    assert body == "0 1 2 4" and tail == ""
