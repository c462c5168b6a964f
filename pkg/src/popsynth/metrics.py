"""Column-level and joint-distribution quality metrics for synthetic populations."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core_data import NA, DataError, MarginalTable, Population, aggregate_marginals, total_combinations


@dataclass(frozen=True)
class CategoricalHistogram:
    """Counts (or any non-negative weights) per category tuple; zero bins are dropped."""

    attrs: tuple[str, ...]
    bins: Mapping[tuple[str, ...], float]

    def __post_init__(self):
        object.__setattr__(self, "attrs", tuple(self.attrs))
        bins = {tuple(k): v for k, v in dict(self.bins).items() if v}
        if any(v < 0 for v in bins.values()):
            raise DataError("histogram counts must be non-negative")
        object.__setattr__(self, "bins", bins)

    @property
    def total(self) -> float:
        return math.fsum(self.bins.values())

    def normalized(self) -> dict[tuple[str, ...], float]:
        t = self.total
        if t == 0:
            raise DataError(f"histogram over {self.attrs} is empty")
        return {k: v / t for k, v in self.bins.items()}

    @classmethod
    def from_table(cls, table: MarginalTable) -> "CategoricalHistogram":
        return cls(table.attrs, table.cells)


def histogram(pop: Population, attrs: Sequence[str], drop_na: bool = False) -> CategoricalHistogram:
    """Joint histogram of ``attrs``; ``drop_na`` removes rows with NA in any of them."""
    if drop_na:
        keep = np.ones(len(pop), dtype=bool)
        for a in attrs:
            ad = pop.schema[a]
            if ad.allow_missing:
                keep &= pop.column(a) != ad.code(NA)
        pop = pop.take(np.flatnonzero(keep))
    t = aggregate_marginals(pop, attrs)
    return CategoricalHistogram(t.attrs, t.cells)


def _check_attrs(h1: CategoricalHistogram, h2: CategoricalHistogram) -> None:
    if h1.attrs != h2.attrs:
        raise DataError(f"histogram attributes differ: {h1.attrs} vs {h2.attrs}")


def tvd(real: CategoricalHistogram, synth: CategoricalHistogram) -> float:
    """Total variation distance between the normalized histograms."""
    _check_attrs(real, synth)
    r, s = real.normalized(), synth.normalized()
    # categories absent from both carry zero mass on either side
    return 0.5 * math.fsum(abs(r.get(k, 0.0) - s.get(k, 0.0)) for k in set(r) | set(s))


def tvc(real: CategoricalHistogram, synth: CategoricalHistogram) -> float:
    """Total variation complement, ``1 - tvd``; 1 means identical shapes."""
    return 1.0 - tvd(real, synth)


def ca(real_pop: Population, synth_pop: Population, attr: str, drop_na: bool = False) -> float:
    """Share of synthetic values of ``attr`` whose category occurs in the real column."""
    if real_pop.schema[attr] != synth_pop.schema[attr]:
        raise DataError(f"attribute {attr} differs between populations")
    r, s = real_pop.column(attr), synth_pop.column(attr)
    if drop_na and real_pop.schema[attr].allow_missing:
        na = real_pop.schema[attr].code(NA)
        r, s = r[r != na], s[s != na]
    if s.size == 0:
        raise DataError(f"synthetic column {attr} is empty")
    return float(np.isin(s, np.unique(r)).sum()) / s.size


def srmse(real: CategoricalHistogram, synth: CategoricalHistogram, n_bins: int) -> float:
    """Standardized RMSE between normalized joint histograms over ``n_bins`` cells.

    Cells absent from both histograms still count toward ``n_bins``.
    """
    _check_attrs(real, synth)
    r, s = real.normalized(), synth.normalized() if synth.total else {}
    keys = set(r) | set(s)
    if n_bins < len(keys):
        raise DataError(f"n_bins={n_bins} is smaller than the {len(keys)} observed combinations")
    sq = math.fsum((r.get(k, 0.0) - s.get(k, 0.0)) ** 2 for k in keys)
    rmse = math.sqrt(sq / n_bins)
    mean = math.fsum(r.values()) / n_bins
    return rmse / mean


def r_squared(pairs: Sequence[tuple[float, float]]) -> float:
    """Coefficient of determination of synthetic against real counts about y = x.

    Not an OLS fit: residuals are ``synth - real``. Unbounded below.
    """
    if len(pairs) < 2:
        raise DataError("r_squared needs at least 2 pairs")
    arr = np.asarray(pairs, dtype=float)
    real, synth = arr[:, 0], arr[:, 1]
    ss_tot = math.fsum((real - real.mean()) ** 2)
    if ss_tot == 0.0:
        raise DataError("real counts have zero variance")
    ss_res = math.fsum((synth - real) ** 2)
    return 1.0 - ss_res / ss_tot


@dataclass(frozen=True)
class AttributeScore:
    tvc: float
    ca: float
    pct_na: float


@dataclass(frozen=True)
class MetricReport:
    per_attribute: Mapping[str, AttributeScore]
    srmse: float
    k: int
    n_bins: int
    joint_attrs: tuple[str, ...]
    conditioned: tuple[str, ...] = ()
    extras: Mapping[str, float] = field(default_factory=dict)

    def to_csv(self, dest=None) -> str | None:
        """Flat CSV: one row per attribute plus one joint row."""
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "attrs", "conditioned", "tvc", "ca", "pct_na", "srmse", "k", "n_bins"])
        for a, sc in self.per_attribute.items():
            w.writerow(["attribute", a, int(a in self.conditioned), _fmt(sc.tvc), _fmt(sc.ca), _fmt(sc.pct_na), "", "", ""])
        w.writerow(["joint", "|".join(self.joint_attrs), "", "", "", "", _fmt(self.srmse), self.k, self.n_bins])
        for key, val in self.extras.items():
            w.writerow(["extra", key, "", "", "", "", _fmt(val), "", ""])
        text = buf.getvalue()
        if dest is None:
            return text
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return None


def _fmt(x: float) -> str:
    return repr(float(x))


def pct_na(pop: Population, attr: str) -> float:
    ad = pop.schema[attr]
    if not ad.allow_missing or len(pop) == 0:
        return 0.0
    return float((pop.column(attr) == ad.code(NA)).mean())


def evaluate(
    real_pop: Population,
    synth_pop: Population,
    conditioned_attrs: Sequence[str] = (),
    joint_attrs: Sequence[str] | None = None,
    exclude_na: bool = False,
) -> MetricReport:
    """Per-attribute TVC/CA/%NA for every attribute plus SRMSE over ``joint_attrs``.

    ``joint_attrs`` defaults to all attributes. With ``exclude_na`` rows
    holding NA are dropped per attribute (and per joint row), and the joint
    bin count ignores NA categories.
    """
    if real_pop.schema != synth_pop.schema:
        raise DataError("real and synthetic populations use different schemas")
    schema = real_pop.schema
    joint = tuple(schema.names if joint_attrs is None else joint_attrs)
    per = {}
    for a in schema.names:
        rh = histogram(real_pop, [a], drop_na=exclude_na)
        sh = histogram(synth_pop, [a], drop_na=exclude_na)
        per[a] = AttributeScore(tvc(rh, sh), ca(real_pop, synth_pop, a, drop_na=exclude_na), pct_na(real_pop, a))
    n_bins = total_combinations(schema, joint, include_na=not exclude_na)
    err = srmse(histogram(real_pop, joint, exclude_na), histogram(synth_pop, joint, exclude_na), n_bins)
    return MetricReport(per, err, len(joint), n_bins, joint, tuple(conditioned_attrs))
