"""Zone-level synthesis with the baseline, stand-alone and hybrid strategies.

* baseline   - FBS-CO over the micro-sample
* standalone - GAN rows reject-sampled into the zone's conditioned quotas
* hybrid     - FBS-CO over a GAN-generated pool (``pool_multiplier`` times
  the micro-sample size)
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import fbsco
from .core_data import (
    AttributeDef,
    DataError,
    MarginalTable,
    Population,
    Provenance,
    Schema,
    aggregate_marginals,
    emit_population,
    recode_attribute,
    total_combinations,
)
from .ctgan import BudgetExhausted, RowSource, TrainedGenerator
from .metrics import AttributeScore, CategoricalHistogram, MetricReport, histogram, r_squared, srmse, tvc

logger = logging.getLogger(__name__)


class Strategy(enum.Enum):
    BASELINE = "baseline"
    STANDALONE = "standalone"
    HYBRID = "hybrid"


class Status(enum.Enum):
    SUCCESSFUL = "successful"
    UNSUCCESSFUL = "unsuccessful"
    NO_POPULATION = "no_population"


# merges the survey's part-time category into working
WORK_RECODE = {"WORK": ({"working": "working", "part-time": "working", "not_working": "not_working"},
                        ("working", "not_working"))}


def zone_seed(seed: int, zone_id: str) -> int:
    """Per-zone seed that does not depend on zone ordering."""
    digest = hashlib.sha256(f"{seed}:{zone_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ZoneJob:
    zone_id: str
    targets: tuple[MarginalTable, ...]
    strategy: Strategy
    conditioned: tuple[str, ...] = ("AGE", "SEX")
    tabulations: tuple[tuple[str, ...], ...] | None = None
    fbsco: fbsco.FbscoConfig = fbsco.FbscoConfig()
    budget_factor: float = 1.0
    pool_multiplier: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "conditioned", tuple(self.conditioned))
        if not self.targets:
            raise DataError(f"zone {self.zone_id}: no targets")
        if any(t.zone_id != self.zone_id for t in self.targets):
            raise DataError(f"zone {self.zone_id}: targets belong to another zone")
        if self.budget_factor < 1:
            raise DataError("budget_factor must be >= 1")
        if self.pool_multiplier < 1:
            raise DataError("pool_multiplier must be >= 1")

    @property
    def total(self) -> int:
        return self.targets[0].total

    def quota_table(self) -> MarginalTable:
        """Joint target over the conditioned attributes."""
        for t in self.targets:
            if set(self.conditioned) <= set(t.attrs):
                return t.marginalize([a for a in t.attrs if a in self.conditioned])
        raise DataError(f"zone {self.zone_id}: no target covers {self.conditioned}")

    def fbsco_targets(self) -> list[MarginalTable]:
        """One tabulation per conditioned attribute plus their joint, unless overridden."""
        joint = self.quota_table()
        if self.tabulations is not None:
            return [joint.marginalize(tab) for tab in self.tabulations]
        tabs = [joint.marginalize([a]) for a in joint.attrs]
        if len(joint.attrs) > 1:
            tabs.append(joint)
        return tabs


@dataclass
class SharedInputs:
    """Immutable inputs shared by all zones of an experiment."""

    micro_sample: Population | None = None
    model: TrainedGenerator | None = None
    hybrid_pool: Population | None = None
    recode: Mapping[str, tuple[Mapping[str, str], Sequence[str]]] = field(default_factory=dict)


@dataclass
class ZoneOutcome:
    zone_id: str
    strategy: Strategy
    status: Status
    synthetic: Population
    target_total: int
    rssz: float | None = None
    metrics: MetricReport | None = None
    pool_size: int | None = None
    diagnostic: str = ""


# ---------------------------------------------------------------------------

def _rarest_condition(model: TrainedGenerator, attrs: Sequence[str], cell: Sequence[str]) -> tuple[int, int]:
    schema = model.schema
    best = None
    for a, c in zip(attrs, cell):
        j, k = schema.index(a), schema[a].code(c)
        counts = model.category_counts[j]
        mass = counts[k] / sum(counts)
        if best is None or mass < best[0]:
            best = (mass, j, k)
    return best[1], best[2]


def reject_sample_to_quotas(model: TrainedGenerator, quota_table: MarginalTable, budget_factor: float = 1.0,
                            seed: int = 0) -> Population:
    """Fill every quota cell exactly with generated rows matching its full tuple.

    Each cell conditions the generator on its rarest attribute value (by
    training-data mass) and rejects rows that miss any other value of the
    tuple. A cell may consume at most ``budget_factor * count * 1000``
    generated rows.
    """
    if budget_factor < 1:
        raise DataError("budget_factor must be >= 1")
    schema = model.schema
    quota_table.validate(schema)
    attrs = quota_table.attrs
    cols = [schema.index(a) for a in attrs]
    source = RowSource(model, seed)
    parts = []
    for cell, q in quota_table.cells.items():
        want = np.array([schema[a].code(c) for a, c in zip(attrs, cell)], dtype=np.int64)
        cond = _rarest_condition(model, attrs, cell)

        def accept(codes, want=want):
            return (codes[:, cols] == want).all(axis=1)

        try:
            rows, _ = source.draw(q, cond, accept, max_attempts=int(math.ceil(budget_factor * q * 1000)))
        except BudgetExhausted as exc:
            raise BudgetExhausted(
                f"quota cell {dict(zip(attrs, cell))}: short by {q - exc.produced} of {q} rows "
                f"after {exc.attempts} attempts", exc.produced, q, exc.attempts) from None
        parts.append(rows)
    codes = np.concatenate(parts) if parts else np.zeros((0, len(schema.attributes)), dtype=np.int64)
    return Population(schema, codes, Provenance.SYNTHETIC)


def generate_hybrid_pool(model: TrainedGenerator, micro_size: int, multiplier: int = 2, seed: int = 0) -> Population:
    """Unconditional GAN pool of ``multiplier * micro_size`` candidates."""
    codes, _ = RowSource(model, seed).draw(multiplier * micro_size)
    return Population(model.schema, codes, Provenance.CANDIDATE_POOL)


def recode_population(pop: Population, recode) -> Population:
    """Apply ``recode`` mappings to every listed attribute present in ``pop``."""
    for attr, (mapping, vocab) in recode.items():
        if attr in pop.schema:
            pop = recode_attribute(pop, attr, mapping, vocab)
    return pop


def recode_table(table: MarginalTable, recode) -> MarginalTable:
    """Relabel target cells through ``recode`` mappings, summing merged cells."""
    cells: dict[tuple[str, ...], int] = {}
    for key, n in table.cells.items():
        new = tuple(recode[a][0].get(v, v) if a in recode else v for a, v in zip(table.attrs, key))
        cells[new] = cells.get(new, 0) + n
    return MarginalTable(table.zone_id, table.attrs, cells)


def evaluate_against_targets(synth: Population, target: MarginalTable, conditioned: Sequence[str] = ()) -> MetricReport:
    """TVC/CA per target attribute and SRMSE over the target's joint cells.

    ``synth`` must already use the target's category vocabularies.
    """
    schema = synth.schema
    target.validate(schema)
    per = {}
    for a in target.attrs:
        real_h = CategoricalHistogram.from_table(target.marginalize([a]))
        syn_h = histogram(synth, [a])
        observed = {k[0] for k in real_h.bins}
        labels = synth.labels(a)
        ca_score = sum(v in observed for v in labels) / len(labels)
        per[a] = AttributeScore(tvc(real_h, syn_h), ca_score, 0.0)
    n_bins = total_combinations(schema, target.attrs, include_na=True)
    err = srmse(CategoricalHistogram.from_table(target), histogram(synth, target.attrs), n_bins)
    return MetricReport(per, err, len(target.attrs), n_bins, target.attrs, tuple(conditioned))


def run_zone(job: ZoneJob, inputs: SharedInputs) -> ZoneOutcome:
    """Synthesize one zone with the job's strategy and classify the result."""
    strategy = job.strategy
    if strategy is Strategy.BASELINE and inputs.micro_sample is None:
        raise DataError("baseline strategy needs a micro-sample")
    if strategy in (Strategy.STANDALONE, Strategy.HYBRID) and inputs.model is None:
        raise DataError(f"{strategy.value} strategy needs a trained model")
    if strategy is Strategy.HYBRID and inputs.hybrid_pool is None and inputs.micro_sample is None:
        raise DataError("hybrid strategy needs the micro-sample (for its size) or a prebuilt pool")
    schema = inputs.model.schema if inputs.model is not None else inputs.micro_sample.schema
    seed = zone_seed(job.seed, job.zone_id)
    total = job.total
    empty = Population(schema, np.zeros((0, len(schema.attributes)), dtype=np.int64))

    if total == 0:
        return ZoneOutcome(job.zone_id, strategy, Status.NO_POPULATION, empty, 0)

    pool_size = None
    rssz_value = None
    if strategy is Strategy.STANDALONE:
        try:
            synth = reject_sample_to_quotas(inputs.model, job.quota_table(), job.budget_factor, seed)
        except BudgetExhausted as exc:
            return ZoneOutcome(job.zone_id, strategy, Status.UNSUCCESSFUL, empty, total, diagnostic=str(exc))
        status = Status.SUCCESSFUL if len(synth) == total else Status.UNSUCCESSFUL
    else:
        if strategy is Strategy.BASELINE:
            pool = inputs.micro_sample
        else:
            pool = inputs.hybrid_pool
            if pool is None:
                pool = generate_hybrid_pool(inputs.model, len(inputs.micro_sample), job.pool_multiplier, seed)
        pool_size = len(pool)
        cfg = replace(job.fbsco, seed=seed)
        res = fbsco.optimize(pool, job.fbsco_targets(), cfg)
        synth = fbsco.materialize(res.selection, pool)
        rssz_value = res.rssz
        status = Status.SUCCESSFUL if res.converged else Status.UNSUCCESSFUL

    report = None
    if len(synth):
        evaluated = recode_population(synth, inputs.recode)
        report = evaluate_against_targets(evaluated, job.targets[0], job.conditioned)
    return ZoneOutcome(job.zone_id, strategy, status, synth, total, rssz_value, report, pool_size)


# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    outcomes: list[ZoneOutcome]
    summary: list[dict]

    def r_squared(self, strategy: Strategy, attr: str, targets: Mapping[str, MarginalTable], recode=None) -> float:
        """Identity-line R^2 of per-zone category counts for one strategy."""
        return r_squared(zone_count_pairs(self.outcomes, targets, attr, strategy, recode or {}))


def zone_count_pairs(outcomes: Sequence[ZoneOutcome], targets: Mapping[str, MarginalTable], attr: str,
                     strategy: Strategy | None = None, recode=None) -> list[tuple[int, int]]:
    """(real, synthetic) category counts of ``attr`` for every populated zone."""
    pairs = []
    for o in outcomes:
        if strategy is not None and o.strategy is not strategy:
            continue
        if o.status is Status.NO_POPULATION or len(o.synthetic) == 0:
            continue
        synth = recode_population(o.synthetic, recode or {})
        real = targets[o.zone_id].marginalize([attr])
        syn = aggregate_marginals(synth, [attr])
        for c in synth.schema[attr].categories:
            pairs.append((real.count((c,)), syn.count((c,))))
    return pairs


def _mean_sd(values: Sequence[float]) -> tuple[float, float] | tuple[None, None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


def summarize(outcomes: Sequence[ZoneOutcome], attrs: Sequence[str]) -> list[dict]:
    """Counts and mean/sd of RSSZ and per-attribute TVC by strategy and status."""
    rows = []
    strategies = [s for s in Strategy if any(o.strategy is s for o in outcomes)]
    for s in strategies:
        for st in Status:
            group = [o for o in outcomes if o.strategy is s and o.status is st]
            row = {"strategy": s.value, "status": st.value, "zones": len(group)}
            row["rssz_mean"], row["rssz_sd"] = _mean_sd([o.rssz for o in group if o.rssz is not None])
            for a in attrs:
                vals = [o.metrics.per_attribute[a].tvc for o in group if o.metrics is not None]
                row[f"tvc_{a}_mean"], row[f"tvc_{a}_sd"] = _mean_sd(vals)
            rows.append(row)
    return rows


def run_experiment(jobs: Sequence[ZoneJob], inputs: SharedInputs, n_jobs: int = 1) -> ExperimentResult:
    """Run every zone job independently; outcomes sorted by (zone_id, strategy)."""
    strategies = {j.strategy for j in jobs}
    if Strategy.HYBRID in strategies and inputs.hybrid_pool is None and inputs.model is not None \
            and inputs.micro_sample is not None:
        mult = {j.pool_multiplier for j in jobs if j.strategy is Strategy.HYBRID}
        seeds = {j.seed for j in jobs if j.strategy is Strategy.HYBRID}
        if len(mult) == 1 and len(seeds) == 1:
            # one shared pool for all zones, as in the zonal experiment
            inputs = replace(inputs, hybrid_pool=generate_hybrid_pool(
                inputs.model, len(inputs.micro_sample), mult.pop(), zone_seed(seeds.pop(), "__pool__")))

    def work(job: ZoneJob) -> ZoneOutcome:
        try:
            return run_zone(job, inputs)
        except Exception as exc:  # recorded per zone, the batch continues
            logger.warning("zone %s (%s) failed: %s", job.zone_id, job.strategy.value, exc)
            schema = (inputs.model or inputs.micro_sample).schema
            empty = Population(schema, np.zeros((0, len(schema.attributes)), dtype=np.int64))
            return ZoneOutcome(job.zone_id, job.strategy, Status.UNSUCCESSFUL, empty, job.total,
                               diagnostic=f"{type(exc).__name__}: {exc}")

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            outcomes = list(ex.map(work, jobs))
    else:
        outcomes = [work(j) for j in jobs]
    order = {s: i for i, s in enumerate(Strategy)}
    outcomes.sort(key=lambda o: (o.zone_id, order[o.strategy]))
    attrs: list[str] = []
    for j in jobs:
        for a in j.targets[0].attrs:
            if a not in attrs:
                attrs.append(a)
    return ExperimentResult(outcomes, summarize(outcomes, attrs))


# ---------------------------------------------------------------------------
# output files

def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def summary_csv(summary: Sequence[dict]) -> str:
    buf = io.StringIO(newline="")
    if not summary:
        return ""
    w = csv.writer(buf, lineterminator="\n")
    keys = list(summary[0])
    w.writerow(keys)
    for row in summary:
        w.writerow([_cell(row[k]) for k in keys])
    return buf.getvalue()


def outcomes_csv(outcomes: Sequence[ZoneOutcome]) -> str:
    attrs: list[str] = []
    for o in outcomes:
        if o.metrics is not None:
            for a in o.metrics.per_attribute:
                if a not in attrs:
                    attrs.append(a)
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["zone_id", "strategy", "status", "target_total", "rows", "rssz", "pool_size",
                *[f"tvc_{a}" for a in attrs], "srmse", "diagnostic"])
    for o in outcomes:
        per = o.metrics.per_attribute if o.metrics is not None else {}
        w.writerow([o.zone_id, o.strategy.value, o.status.value, o.target_total, len(o.synthetic),
                    _cell(o.rssz), _cell(o.pool_size),
                    *[_cell(per[a].tvc) if a in per else "-" for a in attrs],
                    _cell(o.metrics.srmse) if o.metrics is not None else "-", o.diagnostic])
    return buf.getvalue()


def write_outputs(result: ExperimentResult, out_dir: str | os.PathLike) -> list[Path]:
    """Per-zone population CSVs, one zone-tagged CSV per strategy, ``outcomes.csv`` and ``summary.csv``."""
    out = Path(out_dir)
    written = []
    for o in result.outcomes:
        d = out / "populations" / o.strategy.value
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"{o.zone_id}.csv"
        emit_population(o.synthetic, p)
        written.append(p)
    for s in Strategy:
        group = [o for o in result.outcomes if o.strategy is s and len(o.synthetic)]
        if not group:
            continue
        p = out / "populations" / f"{s.value}.csv"
        zones = [o.zone_id for o in group for _ in range(len(o.synthetic))]
        emit_population(Population.concat([o.synthetic for o in group]), p, extra={"zone_id": zones})
        written.append(p)
    for name, text in (("outcomes.csv", outcomes_csv(result.outcomes)), ("summary.csv", summary_csv(result.summary))):
        p = out / name
        p.write_bytes(text.encode("utf-8"))
        written.append(p)
    return written


# ---------------------------------------------------------------------------
# experiment configuration

@dataclass(frozen=True)
class ExperimentConfig:
    strategies: tuple[Strategy, ...]
    seed: int
    conditioned: tuple[str, ...] = ("AGE", "SEX")
    rssz_threshold: float = 1.0
    max_iterations: int = 100_000
    restarts: int = 5
    moves_per_iteration: int = 64
    budget_factor: float = 1.0
    pool_multiplier: int = 2
    recode_work: bool = True
    schema: str | None = None
    micro_sample: str | None = None
    targets: str | None = None
    checkpoint: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        d["strategies"] = tuple(Strategy(s) for s in d.get("strategies", ("baseline",)))
        if "seed" not in d:
            raise DataError("experiment config needs a seed")
        if "conditioned" in d:
            d["conditioned"] = tuple(d["conditioned"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["strategies"] = [s.value for s in self.strategies]
        out["conditioned"] = list(self.conditioned)
        return out

    def fbsco_config(self) -> fbsco.FbscoConfig:
        return fbsco.FbscoConfig(self.max_iterations, self.rssz_threshold, self.restarts, self.seed,
                                 self.moves_per_iteration)

    def jobs(self, targets: Sequence[MarginalTable]) -> list[ZoneJob]:
        cfg = self.fbsco_config()
        return [ZoneJob(t.zone_id, (t,), s, self.conditioned, None, cfg, self.budget_factor,
                        self.pool_multiplier, self.seed)
                for t in sorted(targets, key=lambda t: t.zone_id) for s in self.strategies]


def target_schema(schema: Schema, recode) -> Schema:
    """Schema of zone targets after recoding (e.g. two-category WORK)."""
    for attr, (_, vocab) in recode.items():
        if attr in schema:
            schema = schema.replace(AttributeDef(attr, tuple(vocab), schema[attr].allow_missing))
    return schema
