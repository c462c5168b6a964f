"""Fitness-based combinatorial optimization (FBS-CO).

Selects candidates from a pool, with replacement, so that the selection's
tabulated counts match zone targets. The fitness is the relative sum of
squared Z scores (RSSZ); search is greedy count swapping between candidates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .core_data import DataError, MarginalTable, Population, Provenance, Schema

# ---------------------------------------------------------------------------
# chi-square quantile

def _gamma_p_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_contfrac(a, x)


def chi2_cdf(x: float, df: int) -> float:
    return gamma_p(df / 2.0, x / 2.0)


@lru_cache(maxsize=None)
def chi2_critical(df: int, alpha: float = 0.05) -> float:
    """Upper ``alpha`` quantile of the chi-square distribution with ``df`` dof.

    Starts from the Wilson-Hilferty approximation, then bisects on the
    regularized incomplete gamma.
    """
    if int(df) != df or df < 1:
        raise ValueError(f"degrees of freedom must be an integer >= 1, got {df}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    df = int(df)
    target = 1.0 - alpha
    h = 2.0 / (9.0 * df)
    z = NormalDist().inv_cdf(target)
    guess = max(df * max(1.0 - h + z * math.sqrt(h), 1e-3) ** 3, 1e-8)
    lo, hi = guess, guess
    while chi2_cdf(lo, df) > target:
        lo *= 0.5
    while chi2_cdf(hi, df) < target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, df) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# data structures

@dataclass(frozen=True)
class AttributeMatrix:
    """Cell membership of every pool candidate in every tabulation.

    ``cell_index[k, i]`` is the cell of tabulation ``k`` that candidate ``i``
    falls in; the 0/1 matrix is available through :meth:`dense`.
    """

    schema: Schema
    tabulations: tuple[tuple[str, ...], ...]
    n_cells: tuple[int, ...]
    cell_index: np.ndarray

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_cells)[:-1]]).astype(np.int64)

    @property
    def n_candidates(self) -> int:
        return self.cell_index.shape[1]

    def dense(self) -> np.ndarray:
        """Stacked 0/1 matrix with one row per (tabulation, cell)."""
        A = np.zeros((sum(self.n_cells), self.n_candidates), dtype=np.int64)
        rows = self.cell_index + self.offsets[:, None]
        for k in range(len(self.n_cells)):
            A[rows[k], np.arange(self.n_candidates)] = 1
        return A

    def counts(self, x: np.ndarray) -> list[np.ndarray]:
        """Per-tabulation synthetic counts ``Ax`` for selection ``x``."""
        return [np.bincount(ci, weights=x, minlength=nc).astype(np.int64)
                for ci, nc in zip(self.cell_index, self.n_cells)]


def attribute_matrix(pool: Population, targets: Sequence[MarginalTable]) -> AttributeMatrix:
    schema = pool.schema
    tabs, ncells, idx = [], [], []
    for t in targets:
        t.validate(schema)
        sizes = schema.sizes(t.attrs)
        cols = tuple(pool.codes[:, schema.index(a)] for a in t.attrs)
        flat = np.ravel_multi_index(cols, sizes) if len(pool) else np.zeros(0, dtype=np.int64)
        tabs.append(t.attrs)
        ncells.append(int(np.prod(sizes)))
        idx.append(np.asarray(flat, dtype=np.int64))
    ci = np.vstack(idx) if idx else np.zeros((0, len(pool)), dtype=np.int64)
    return AttributeMatrix(schema, tuple(tabs), tuple(ncells), ci)


@dataclass(frozen=True)
class SelectionVector:
    x: np.ndarray
    N: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64)
        if (x < 0).any():
            raise DataError("selection counts must be non-negative")
        if int(x.sum()) != self.N:
            raise DataError(f"selection sums to {int(x.sum())}, expected {self.N}")
        x = x.copy()
        x.flags.writeable = False
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class FbscoConfig:
    max_iterations: int = 100_000
    rssz_threshold: float = 1.0
    restarts: int = 5
    seed: int = 0
    moves_per_iteration: int = 64
    trace: bool = False

    def __post_init__(self):
        if self.rssz_threshold <= 0:
            raise ValueError("rssz_threshold must be > 0")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be > 0")
        if self.restarts < 1 or self.moves_per_iteration < 1:
            raise ValueError("restarts and moves_per_iteration must be >= 1")


@dataclass
class FbscoResult:
    selection: SelectionVector
    rssz: float
    converged: bool
    iterations_used: int
    no_population: bool = False
    trace: list[tuple[int, float]] | None = field(default=None, repr=False)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "rssz"])
            for it, val in self.trace or []:
                w.writerow([it, repr(val)])


# ---------------------------------------------------------------------------
# fitness

def _cell_terms(ax: np.ndarray, e: np.ndarray, n_k: int, c_k: float) -> np.ndarray:
    """F * (Ax - E)^2 per cell; the weight falls back to 1/C at Ax = 0 and Ax = N."""
    ax = np.asarray(ax, dtype=float)
    degenerate = (ax == 0) | (ax == n_k)
    if n_k == 0:
        return ax * 0.0 + e ** 2 / c_k
    denom = np.where(degenerate, 1.0, c_k * ax * (1.0 - ax / n_k))
    weight = np.where(degenerate, 1.0 / c_k, 1.0 / denom)
    return weight * (ax - e) ** 2


def _tab_constants(A: AttributeMatrix, targets: Sequence[MarginalTable]) -> tuple[list, list, list]:
    E = [t.dense(A.schema) for t in targets]
    N = [int(e.sum()) for e in E]
    C = [chi2_critical(nc - 1) if nc > 1 else 1.0 for nc in A.n_cells]
    return E, N, C


def rssz_from_counts(ax: Sequence[np.ndarray], expected: Sequence[np.ndarray], n_cells: Sequence[int]) -> float:
    """RSSZ from per-tabulation synthetic counts and target counts."""
    if not (len(ax) == len(expected) == len(n_cells)):
        raise DataError("tabulation count mismatch")
    total = 0.0
    for a, e, nc in zip(ax, expected, n_cells):
        a, e = np.asarray(a), np.asarray(e)
        if a.shape != e.shape or a.size != nc:
            raise DataError("cell count mismatch between synthetic and target tabulation")
        n_k = int(e.sum())
        if n_k == 0 and a.any():
            raise DataError("tabulation has zero target total but non-zero synthetic counts")
        c_k = chi2_critical(nc - 1) if nc > 1 else 1.0
        total += math.fsum(_cell_terms(a, e, n_k, c_k))
    return total


def rssz(selection: SelectionVector, A: AttributeMatrix, targets: Sequence[MarginalTable]) -> float:
    """Relative sum of squared Z scores of a selection against zone targets."""
    if len(selection.x) != A.n_candidates:
        raise DataError(f"selection has {len(selection.x)} entries for {A.n_candidates} candidates")
    if len(targets) != len(A.n_cells):
        raise DataError("number of targets differs from the attribute matrix tabulations")
    if tuple(t.attrs for t in targets) != A.tabulations:
        raise DataError("target attributes do not match the attribute matrix tabulations")
    E = [t.dense(A.schema) for t in targets]
    return rssz_from_counts(A.counts(selection.x), E, A.n_cells)


# ---------------------------------------------------------------------------
# search

def _target_total(targets: Sequence[MarginalTable]) -> int:
    if not targets:
        raise DataError("no target tabulations")
    zones = {t.zone_id for t in targets}
    if len(zones) > 1:
        raise DataError(f"targets span several zones: {sorted(zones)}")
    totals = {t.total for t in targets}
    if len(totals) > 1:
        raise DataError(f"target tabulations have different totals: {sorted(totals)}")
    return totals.pop()


def initialize(pool: Population, targets: Sequence[MarginalTable], seed=0) -> SelectionVector:
    """Draw the target total from the pool uniformly with replacement."""
    N = _target_total(targets)
    n = len(pool)
    if N == 0:
        return SelectionVector(np.zeros(n, dtype=np.int64), 0)
    if n == 0:
        raise DataError(f"cannot draw {N} agents from an empty pool")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return SelectionVector(np.bincount(rng.integers(0, n, size=N), minlength=n), N)


class _Search:
    """Incremental state for one restart; swaps are evaluated on candidate types.

    Candidates with equal cells in every tabulation are interchangeable for
    the fitness, so move deltas are computed between types.
    """

    def __init__(self, A: AttributeMatrix, E, N, C):
        self.A, self.E, self.N, self.C = A, E, N, C
        self.offsets = A.offsets
        sig = A.cell_index.T
        self.type_cells, self.type_of = np.unique(sig, axis=0, return_inverse=True)
        self.type_of = self.type_of.reshape(-1)
        self.type_global = self.type_cells + self.offsets[None, :]
        self.members = [np.flatnonzero(self.type_of == t) for t in range(len(self.type_cells))]
        self.e_flat = np.concatenate(E).astype(float)
        self.n_flat = np.concatenate([np.full(nc, n) for nc, n in zip(A.n_cells, N)])
        self.c_flat = np.concatenate([np.full(nc, c) for nc, c in zip(A.n_cells, C)])

    def reset(self, x: np.ndarray) -> None:
        self.x = x.copy()
        self.ax = np.concatenate(self.A.counts(self.x)).astype(float)
        self.tc = np.bincount(self.type_of, weights=self.x, minlength=len(self.members)).astype(np.int64)

    def _terms(self, ax: np.ndarray) -> np.ndarray:
        ax = np.asarray(ax, dtype=float)
        degenerate = (ax == 0) | (ax == self.n_flat)
        safe = np.where(degenerate, 1.0, self.c_flat * ax * (1.0 - ax / self.n_flat))
        w = np.where(degenerate, 1.0 / self.c_flat, 1.0 / safe)
        return w * (ax - self.e_flat) ** 2

    def value(self) -> float:
        return math.fsum(self._terms(self.ax))

    def move_tables(self) -> tuple[np.ndarray, np.ndarray]:
        base = self._terms(self.ax)
        dec = self._terms(np.maximum(self.ax - 1, 0)) - base
        inc = self._terms(self.ax + 1) - base
        return dec, inc

    def deltas(self, a: np.ndarray, b: np.ndarray, dec, inc) -> np.ndarray:
        ga, gb = self.type_global[a], self.type_global[b]
        return np.where(ga != gb, dec[ga] + inc[gb], 0.0).sum(axis=-1)

    def apply(self, i: int, j: int) -> None:
        self.x[i] -= 1
        self.x[j] += 1
        ta, tb = self.type_of[i], self.type_of[j]
        self.tc[ta] -= 1
        self.tc[tb] += 1
        np.subtract.at(self.ax, self.type_global[ta], 1)
        np.add.at(self.ax, self.type_global[tb], 1)


_TOL = 1e-12
_SCAN_CHUNK = 256


def _improving_pair(search: _Search, rng: np.random.Generator, n_random: int, tol: float):
    """Return (i, j) for an improving swap, or None at a local optimum."""
    x = search.x
    n = len(x)
    if n < 2:
        return None
    dec, inc = search.move_tables()
    donors = np.flatnonzero(x)
    ii = donors[rng.integers(0, len(donors), size=n_random)]
    jj = rng.integers(0, n - 1, size=n_random)
    jj = jj + (jj >= ii)  # j != i
    d = search.deltas(search.type_of[ii], search.type_of[jj], dec, inc)
    hit = np.flatnonzero(d < -tol)
    if hit.size:
        k = hit[0]
        return int(ii[k]), int(jj[k])
    # exhaustive scan over type pairs before declaring a local optimum
    live = np.flatnonzero(search.tc > 0)
    n_types = len(search.members)
    cands = []
    for s in range(0, len(live), _SCAN_CHUNK):
        a = live[s:s + _SCAN_CHUNK]
        dd = search.deltas(a[:, None], np.arange(n_types)[None, :], dec, inc)
        ra, rb = np.nonzero(dd < -tol)
        cands.extend(zip(a[ra].tolist(), rb.tolist()))
    if not cands:
        return None
    ta, tb = cands[rng.integers(len(cands))]
    holders = search.members[ta][x[search.members[ta]] > 0]
    i = int(holders[rng.integers(len(holders))])
    j = int(search.members[tb][rng.integers(len(search.members[tb]))])
    return i, j


def optimize(pool: Population, targets: Sequence[MarginalTable], config: FbscoConfig = FbscoConfig()) -> FbscoResult:
    """Greedy swap search for a selection minimizing RSSZ against ``targets``.

    Each restart starts from a fresh uniform draw and accepts strictly
    improving single-count swaps. Restarts stop early once one run falls
    below the threshold; the best run is returned.
    """
    N = _target_total(targets)
    if N == 0:
        sel = SelectionVector(np.zeros(len(pool), dtype=np.int64), 0)
        return FbscoResult(sel, 0.0, True, 0, no_population=True, trace=[] if config.trace else None)
    if len(pool) == 0:
        raise DataError(f"cannot draw {N} agents from an empty pool")
    A = attribute_matrix(pool, targets)
    E, Ns, C = _tab_constants(A, targets)
    search = _Search(A, E, Ns, C)
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)

    best = None
    for ss in seeds:
        rng = np.random.default_rng(ss)
        search.reset(np.asarray(initialize(pool, targets, rng).x))
        current = search.value()
        trace = [(0, current)] if config.trace else None
        it = 0
        while it < config.max_iterations and current >= config.rssz_threshold:
            pair = _improving_pair(search, rng, config.moves_per_iteration, _TOL)
            if pair is None:
                break
            it += 1
            search.apply(*pair)
            current = search.value()
            if trace is not None:
                if int(search.x.sum()) != N:
                    raise RuntimeError(f"selection total drifted to {int(search.x.sum())} at iteration {it}")
                trace.append((it, current))
        x = search.x.copy()
        exact = rssz_from_counts(A.counts(x), E, A.n_cells)
        if best is None or exact < best[1]:
            best = (x, exact, it, trace)
        if exact < config.rssz_threshold:
            break
    x, value, it, trace = best
    return FbscoResult(SelectionVector(x, N), value, value < config.rssz_threshold, it, trace=trace)


def materialize(selection: SelectionVector, pool: Population) -> Population:
    """Repeat candidate ``i`` ``x_i`` times, in pool order."""
    if len(selection.x) != len(pool):
        raise DataError(f"selection length {len(selection.x)} differs from pool size {len(pool)}")
    idx = np.repeat(np.arange(len(pool)), selection.x)
    return pool.take(idx, Provenance.SYNTHETIC)
