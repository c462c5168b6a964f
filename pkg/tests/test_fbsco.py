import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from popsynth.core_data import AttributeDef, DataError, MarginalTable, Population, Schema, aggregate_marginals
from popsynth.fbsco import (
    FbscoConfig,
    SelectionVector,
    attribute_matrix,
    chi2_critical,
    initialize,
    materialize,
    optimize,
    rssz,
    rssz_from_counts,
)

from .conftest import random_population

EXHAUSTIVE = dict(rssz_threshold=1e-9)  # never stop early: run to a local optimum


# --- independent oracle ------------------------------------------------------

def naive_rssz(pool, x, targets):
    """RSSZ evaluated cell by cell with scipy quantiles."""
    schema = pool.schema
    total = 0.0
    for t in targets:
        cats = [schema[a].categories for a in t.attrs]
        cells = list(itertools.product(*cats))
        c = stats.chi2.ppf(0.95, len(cells) - 1)
        n_k = t.total
        rows = [tuple(r[schema.index(a)] for a in t.attrs) for r in pool.rows]
        for cell in cells:
            ax = sum(xi for xi, r in zip(x, rows) if r == cell)
            e = t.count(cell)
            if ax == 0 or ax == n_k:
                f = 1.0 / c
            else:
                f = 1.0 / (c * ax * (1 - ax / n_k))
            total += f * (ax - e) ** 2
    return total


def compositions(n_items, total):
    """Every non-negative integer vector of length n_items summing to total."""
    for bars in itertools.combinations(range(total + n_items - 1), n_items - 1):
        prev, out = -1, []
        for b in bars:
            out.append(b - prev - 1)
            prev = b
        out.append(total + n_items - 1 - prev - 1)
        yield out


def enumerated_minimum(pool, targets):
    N = targets[0].total
    return min(naive_rssz(pool, x, targets) for x in compositions(len(pool), N))


def sex_schema():
    return Schema((AttributeDef("SEX", ("f", "m")),))


def two_attr_schema():
    return Schema((AttributeDef("A", ("a0", "a1", "a2")), AttributeDef("B", ("b0", "b1"))))


# --- chi2 --------------------------------------------------------------------

@pytest.mark.parametrize("df,expected", [(1, 3.841), (6, 12.592), (13, 22.362)])
def test_chi2_tabled(df, expected):
    assert chi2_critical(df) == pytest.approx(expected, abs=1e-3)


def test_chi2_against_scipy():
    for df in list(range(1, 200)) + [500, 1000, 4115]:
        assert chi2_critical(df) == pytest.approx(stats.chi2.ppf(0.95, df), rel=1e-9)
    for alpha in (0.5, 0.1, 0.01, 0.001):
        assert chi2_critical(3, alpha) == pytest.approx(stats.chi2.ppf(1 - alpha, 3), rel=1e-9)


def test_chi2_bad_df():
    with pytest.raises(ValueError):
        chi2_critical(0)


# --- rssz -------------------------------------------------------------------

def test_rssz_hand_fixture():
    got = rssz_from_counts([np.array([6, 4])], [np.array([5, 5])], [2])
    assert got == pytest.approx(0.2170, abs=1e-3)
    c = stats.chi2.ppf(0.95, 1)
    assert got == pytest.approx(2 / (c * 6 * 0.4), rel=1e-12)


def test_rssz_zero_branch():
    # cell 0 has Ax = 0 and E = 2; cell 1 has Ax = N, which uses the same fallback
    got = rssz_from_counts([np.array([0, 2])], [np.array([2, 0])], [2])
    c = chi2_critical(1)
    # 1.0414 is computed with C rounded to 3.841; the exact quantile gives 1.04127
    assert 4 / c == pytest.approx(1.0414, abs=1e-3)
    assert 4 / 3.841 == pytest.approx(1.0414, abs=1e-4)
    assert got == pytest.approx(8 / c, rel=1e-12)


def test_rssz_exact_match_is_zero():
    assert rssz_from_counts([np.array([3, 0, 7])], [np.array([3, 0, 7])], [3]) == 0.0


def test_rssz_errors():
    with pytest.raises(DataError):
        rssz_from_counts([np.array([1, 0])], [np.array([0, 0])], [2])
    with pytest.raises(DataError):
        rssz_from_counts([np.array([1, 0, 0])], [np.array([1, 0])], [2])


def test_rssz_matches_naive_over_selection():
    rng = np.random.default_rng(1)
    schema = two_attr_schema()
    for _ in range(50):
        pool = random_population(rng, schema, int(rng.integers(1, 12)))
        truth = random_population(rng, schema, int(rng.integers(1, 15)))
        targets = [aggregate_marginals(truth, ["A"], "z"), aggregate_marginals(truth, ["A", "B"], "z")]
        sel = initialize(pool, targets, rng)
        A = attribute_matrix(pool, targets)
        assert rssz(sel, A, targets) == pytest.approx(naive_rssz(pool, sel.x, targets), rel=1e-12, abs=1e-12)


def test_attribute_matrix_one_cell_per_tabulation():
    rng = np.random.default_rng(2)
    schema = two_attr_schema()
    pool = random_population(rng, schema, 20)
    targets = [aggregate_marginals(pool, ["A"]), aggregate_marginals(pool, ["B"]), aggregate_marginals(pool, ["A", "B"])]
    A = attribute_matrix(pool, targets)
    dense = A.dense()
    for k, off in enumerate(A.offsets):
        block = dense[off:off + A.n_cells[k]]
        assert (block.sum(axis=0) == 1).all()


# --- initialize / materialize -------------------------------------------------

def test_initialize_examples():
    schema = sex_schema()
    one = Population.from_records(schema, [("f",)])
    assert list(initialize(one, [MarginalTable("z", ("SEX",), {("f",): 5})]).x) == [5]
    empty_target = [MarginalTable("z", ("SEX",), {})]
    assert list(initialize(one, empty_target).x) == [0]
    pool = random_population(np.random.default_rng(0), two_attr_schema(), 50)
    tgt = [MarginalTable("z", ("A",), {("a0",): 40, ("a1",): 60})]
    x1 = initialize(pool, tgt, seed=9).x
    assert x1.sum() == 100 and len(x1) == 50
    assert np.array_equal(x1, initialize(pool, tgt, seed=9).x)


def test_initialize_errors():
    schema = sex_schema()
    empty_pool = Population(schema, np.zeros((0, 1), dtype=np.int64))
    with pytest.raises(DataError):
        initialize(empty_pool, [MarginalTable("z", ("SEX",), {("f",): 1})])
    pool = Population.from_records(schema, [("f",)])
    two = [MarginalTable("z", ("SEX",), {("f",): 1}), MarginalTable("z", ("SEX",), {("f",): 2})]
    with pytest.raises(DataError):
        initialize(pool, two)


def test_selection_vector_checks():
    with pytest.raises(DataError):
        SelectionVector(np.array([1, 2]), 4)
    with pytest.raises(DataError):
        SelectionVector(np.array([-1, 5]), 4)


def test_materialize_order():
    schema = Schema((AttributeDef("X", ("r0", "r1", "r2")),))
    pool = Population.from_records(schema, [("r0",), ("r1",), ("r2",)])
    out = materialize(SelectionVector(np.array([2, 0, 1]), 3), pool)
    assert out.labels("X") == ["r0", "r0", "r2"]
    assert len(materialize(SelectionVector(np.zeros(3, dtype=np.int64), 0), pool)) == 0
    with pytest.raises(DataError):
        materialize(SelectionVector(np.array([1]), 1), pool)


# --- optimize -----------------------------------------------------------------

def test_optimize_sex_two_candidates_enumeration():
    schema = sex_schema()
    pool = Population.from_records(schema, [("f",), ("m",)])
    targets = [MarginalTable("z", ("SEX",), {("f",): 3, ("m",): 1})]
    options = [naive_rssz(pool, x, targets) for x in compositions(2, 4)]
    assert len(options) == 5
    res = optimize(pool, targets, FbscoConfig(seed=1, **EXHAUSTIVE))
    assert res.rssz == pytest.approx(min(options), abs=1e-12) and res.rssz == 0.0
    assert list(res.selection.x) == [3, 1]
    assert res.converged


def test_optimize_exact_realization_is_fixed_point():
    rng = np.random.default_rng(3)
    schema = two_attr_schema()
    pool = random_population(rng, schema, 15)
    truth = pool.take(rng.integers(0, 15, size=30))
    targets = [aggregate_marginals(truth, ["A", "B"], "z")]
    res = optimize(pool, targets, FbscoConfig(seed=0, **EXHAUSTIVE))
    assert res.rssz == 0.0 and res.converged


def test_optimize_no_population():
    pool = Population.from_records(sex_schema(), [("f",)])
    res = optimize(pool, [MarginalTable("z", ("SEX",), {})])
    assert res.no_population and res.converged and res.rssz == 0.0
    assert len(materialize(res.selection, pool)) == 0


def test_optimize_empty_pool_with_demand():
    empty_pool = Population(sex_schema(), np.zeros((0, 1), dtype=np.int64))
    with pytest.raises(DataError):
        optimize(empty_pool, [MarginalTable("z", ("SEX",), {("f",): 2})])


def _desk_instance(rng):
    schema = two_attr_schema()
    pool = random_population(rng, schema, int(rng.integers(1, 6)))
    truth = random_population(rng, schema, int(rng.integers(1, 7)))
    targets = [aggregate_marginals(truth, ["A"], "z"), aggregate_marginals(truth, ["B"], "z")]
    return pool, targets


def test_optimize_matches_enumeration_on_desk_instances():
    rng = np.random.default_rng(12345)
    hits = 0
    for i in range(100):
        pool, targets = _desk_instance(rng)
        best = enumerated_minimum(pool, targets)
        res = optimize(pool, targets, FbscoConfig(seed=i, **EXHAUSTIVE))
        assert res.rssz >= best - 1e-9
        hits += abs(res.rssz - best) <= 1e-9
    assert hits >= 95


def test_optimize_trace_preserves_total_and_never_increases():
    rng = np.random.default_rng(4)
    schema = two_attr_schema()
    pool = random_population(rng, schema, 60)
    # all demand in one cell forces many moves from a uniform start
    target = [MarginalTable("z", ("A", "B"), {("a0", "b0"): 12_000})]
    res = optimize(pool, target, FbscoConfig(seed=0, restarts=1, max_iterations=10_000, trace=True, **EXHAUSTIVE))
    assert res.iterations_used == 10_000
    assert len(res.trace) == 10_001
    values = [v for _, v in res.trace]
    assert all(b < a for a, b in zip(values, values[1:]))
    assert res.selection.x.sum() == 12_000


def test_optimize_deterministic():
    rng = np.random.default_rng(6)
    schema = two_attr_schema()
    pool = random_population(rng, schema, 40)
    truth = random_population(rng, schema, 200)
    targets = [aggregate_marginals(truth, ["A"], "z"), aggregate_marginals(truth, ["A", "B"], "z")]
    cfg = FbscoConfig(seed=17, **EXHAUSTIVE)
    a, b = optimize(pool, targets, cfg), optimize(pool, targets, cfg)
    assert np.array_equal(a.selection.x, b.selection.x) and a.rssz == b.rssz


def test_write_trace(tmp_path):
    pool = Population.from_records(sex_schema(), [("f",), ("m",)])
    res = optimize(pool, [MarginalTable("z", ("SEX",), {("f",): 30, ("m",): 10})], FbscoConfig(trace=True, **EXHAUSTIVE))
    p = tmp_path / "trace.csv"
    res.write_trace(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "iteration,rssz" and len(lines) == len(res.trace) + 1


def test_config_validation():
    with pytest.raises(ValueError):
        FbscoConfig(rssz_threshold=0)
    with pytest.raises(ValueError):
        FbscoConfig(max_iterations=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_materialized_counts_match_internal_counts(seed):
    rng = np.random.default_rng(seed)
    schema = two_attr_schema()
    pool = random_population(rng, schema, int(rng.integers(1, 30)))
    truth = random_population(rng, schema, int(rng.integers(1, 80)))
    targets = [aggregate_marginals(truth, ["A"], "z"), aggregate_marginals(truth, ["A", "B"], "z")]
    res = optimize(pool, targets, FbscoConfig(seed=seed % 1000, restarts=2))
    synth = materialize(res.selection, pool)
    A = attribute_matrix(pool, targets)
    for t, ax in zip(targets, A.counts(res.selection.x)):
        assert np.array_equal(aggregate_marginals(synth, t.attrs, "z").dense(schema), ax)
    assert res.rssz >= 0
    assert res.converged == (res.rssz < 1.0)
    assert res.rssz == pytest.approx(rssz(res.selection, A, targets), rel=1e-12, abs=1e-15)
