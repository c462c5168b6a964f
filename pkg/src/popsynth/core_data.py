"""Schema, population and marginal-table data model plus file I/O.

Populations are stored as integer code matrices (one column per attribute,
codes index into the attribute's category list in declared order). All
objects are treated as immutable once built.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from itertools import product
from typing import IO, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

NA = "NA"


class DataError(ValueError):
    """Raised when input data violate the schema or a file contract."""


@dataclass(frozen=True)
class AttributeDef:
    name: str
    categories: tuple[str, ...]
    allow_missing: bool = False

    def __post_init__(self):
        cats = tuple(str(c) for c in self.categories)
        if NA in cats:
            raise DataError(f"attribute {self.name!r}: {NA!r} is reserved")
        if len(set(cats)) != len(cats):
            raise DataError(f"attribute {self.name!r}: duplicate category labels")
        if len(cats) < 2:
            raise DataError(f"attribute {self.name!r}: needs at least 2 categories")
        if self.allow_missing:
            cats = cats + (NA,)
        object.__setattr__(self, "categories", cats)

    @property
    def real_categories(self) -> tuple[str, ...]:
        return self.categories[:-1] if self.allow_missing else self.categories

    @property
    def size(self) -> int:
        return len(self.categories)

    def code(self, label: str) -> int:
        try:
            return self.categories.index(label)
        except ValueError:
            raise DataError(f"attribute {self.name!r}: unknown category {label!r}") from None


@dataclass(frozen=True)
class Schema:
    attributes: tuple[AttributeDef, ...]

    def __post_init__(self):
        attrs = tuple(self.attributes)
        names = [a.name for a in attrs]
        if len(set(names)) != len(names):
            raise DataError("duplicate attribute names in schema")
        if not attrs:
            raise DataError("schema has no attributes")
        object.__setattr__(self, "attributes", attrs)

    @classmethod
    def from_dict(cls, data: Mapping) -> "Schema":
        attrs = []
        for a in data["attributes"]:
            # labels are given without the reserved NA entry
            attrs.append(AttributeDef(a["name"], tuple(a["categories"]), bool(a.get("allow_missing", False))))
        return cls(tuple(attrs))

    def to_dict(self) -> dict:
        return {
            "attributes": [
                {"name": a.name, "categories": list(a.real_categories), "allow_missing": a.allow_missing}
                for a in self.attributes
            ]
        }

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def __getitem__(self, name: str) -> AttributeDef:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"attribute {name!r} not in schema") from None

    def canonical(self, attrs: Iterable[str]) -> tuple[str, ...]:
        """Return ``attrs`` reordered into schema order (validating names)."""
        attrs = list(attrs)
        idx = sorted(self.index(a) for a in attrs)
        if len(set(idx)) != len(idx):
            raise DataError(f"repeated attribute in {attrs}")
        return tuple(self.names[i] for i in idx)

    def sizes(self, attrs: Sequence[str] | None = None) -> tuple[int, ...]:
        attrs = self.names if attrs is None else attrs
        return tuple(self[a].size for a in attrs)

    def cells(self, attrs: Sequence[str]) -> list[tuple[str, ...]]:
        """All category tuples over ``attrs`` in canonical (row-major) order."""
        return list(product(*(self[a].categories for a in attrs)))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, attr: AttributeDef) -> "Schema":
        return Schema(tuple(attr if a.name == attr.name else a for a in self.attributes))


def total_combinations(schema: Schema, attrs: Sequence[str] | None = None, include_na: bool = False) -> int:
    """Number of category combinations over ``attrs`` (all attributes by default)."""
    attrs = schema.names if attrs is None else attrs
    n = 1
    for a in attrs:
        ad = schema[a]
        n *= ad.size if include_na else len(ad.real_categories)
    return n


def load_schema(path: str | os.PathLike) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_dict(json.load(fh))


def save_schema(schema: Schema, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


def travel_survey_schema(allow_missing: bool = False) -> Schema:
    """The six individual attributes of the travel-survey micro-sample.

    LIFECATG and EDULEVEL labels are placeholders; only their cardinalities
    (7 each) are known.
    """
    return Schema((
        AttributeDef("AGE", ("0-6", "7-15", "16-19", "20-24", "25-44", "45-64", "65+")),
        AttributeDef("SEX", ("f", "m")),
        AttributeDef("DRVLIC", ("True", "False"), allow_missing),
        AttributeDef("LIFECATG", tuple(f"L{i}" for i in range(1, 8)), allow_missing),
        AttributeDef("EDULEVEL", tuple(f"E{i}" for i in range(1, 8)), allow_missing),
        AttributeDef("WORK", ("working", "part-time", "not_working"), allow_missing),
    ))


class Provenance(enum.Enum):
    MICRO_SAMPLE = "micro_sample"
    GROUND_TRUTH = "ground_truth"
    SYNTHETIC = "synthetic"
    CANDIDATE_POOL = "candidate_pool"


class Population:
    """Agent records over a schema, held as an ``(n_rows, n_attrs)`` code matrix."""

    __slots__ = ("schema", "codes", "provenance")

    def __init__(self, schema: Schema, codes, provenance: Provenance = Provenance.SYNTHETIC):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size == 0:
            codes = codes.reshape(0, len(schema.attributes))
        if codes.ndim != 2 or codes.shape[1] != len(schema.attributes):
            raise DataError(f"code matrix shape {codes.shape} does not match schema width {len(schema.attributes)}")
        sizes = np.asarray(schema.sizes())
        if codes.shape[0] and ((codes < 0).any() or (codes >= sizes).any()):
            raise DataError("category code out of range")
        codes = codes.copy()
        codes.flags.writeable = False
        self.schema = schema
        self.codes = codes
        self.provenance = Provenance(provenance)

    @classmethod
    def from_records(cls, schema: Schema, records: Iterable, provenance=Provenance.SYNTHETIC) -> "Population":
        """Build from label tuples (schema order) or dicts keyed by attribute name."""
        rows = []
        for r in records:
            if isinstance(r, Mapping):
                r = [r[a] for a in schema.names]
            if len(r) != len(schema.attributes):
                raise DataError(f"record {r!r} has wrong width")
            rows.append([ad.code(v) for ad, v in zip(schema.attributes, r)])
        return cls(schema, np.array(rows, dtype=np.int64).reshape(-1, len(schema.attributes)), provenance)

    def __len__(self) -> int:
        return self.codes.shape[0]

    def __repr__(self) -> str:
        return f"Population({len(self)} rows, attrs={list(self.schema.names)}, {self.provenance.value})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Population):
            return NotImplemented
        return self.schema == other.schema and np.array_equal(self.codes, other.codes)

    __hash__ = None

    @property
    def rows(self) -> list[tuple[str, ...]]:
        cats = [a.categories for a in self.schema.attributes]
        return [tuple(cats[j][c] for j, c in enumerate(row)) for row in self.codes.tolist()]

    def column(self, attr: str) -> np.ndarray:
        """Category codes for one attribute."""
        return self.codes[:, self.schema.index(attr)]

    def labels(self, attr: str) -> list[str]:
        cats = self.schema[attr].categories
        return [cats[c] for c in self.column(attr).tolist()]

    def take(self, index, provenance: Provenance | None = None) -> "Population":
        return Population(self.schema, self.codes[np.asarray(index, dtype=np.int64)], provenance or self.provenance)

    def with_provenance(self, provenance: Provenance) -> "Population":
        return Population(self.schema, self.codes, provenance)

    @staticmethod
    def concat(pops: Sequence["Population"], provenance: Provenance | None = None) -> "Population":
        if not pops:
            raise DataError("nothing to concatenate")
        schema = pops[0].schema
        if any(p.schema != schema for p in pops):
            raise DataError("schema mismatch in concat")
        return Population(schema, np.concatenate([p.codes for p in pops]), provenance or pops[0].provenance)


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8"), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary file object
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def parse_population(source, schema: Schema, provenance=Provenance.MICRO_SAMPLE) -> Population:
    """Read a population CSV (header row of attribute names, one agent per row).

    ``source`` is a path, raw bytes, or a text/binary file object. Columns not
    in the schema are ignored. Empty cells become ``NA`` where allowed.
    """
    fh, close = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("population file is empty (no header)") from None
        missing = [a for a in schema.names if a not in header]
        if missing:
            raise DataError(f"missing required column(s): {', '.join(missing)}")
        pos = [header.index(a) for a in schema.names]
        lookup = [{c: i for i, c in enumerate(a.categories)} for a in schema.attributes]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            row = []
            for ad, p, lk in zip(schema.attributes, pos, lookup):
                v = rec[p] if p < len(rec) else ""
                if v == "":
                    if not ad.allow_missing:
                        raise DataError(f"row {lineno}: empty value for {ad.name} (missing values not allowed)")
                    v = NA
                try:
                    row.append(lk[v])
                except KeyError:
                    raise DataError(f"row {lineno}: unknown category {v!r} for attribute {ad.name}") from None
            rows.append(row)
    finally:
        if close:
            fh.close()
    return Population(schema, np.array(rows, dtype=np.int64).reshape(-1, len(schema.attributes)), provenance)


def emit_population(pop: Population, dest=None, extra: Mapping[str, Sequence] | None = None) -> str | None:
    """Write ``pop`` as CSV. Returns the text when ``dest`` is None.

    ``extra`` adds trailing columns (e.g. a zone id per row).
    """
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    extra = dict(extra or {})
    w.writerow(list(pop.schema.names) + list(extra))
    cols = [extra[k] for k in extra]
    for i, row in enumerate(pop.rows):
        w.writerow(list(row) + [c[i] for c in cols])
    text = buf.getvalue()
    if dest is None:
        return text
    _write_text(dest, text)
    return None


def _write_text(dest, text: str) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        dest.write(text)


@dataclass(frozen=True)
class MarginalTable:
    """Target or observed counts over ``attrs`` for one zone.

    ``cells`` maps category tuples to counts; absent tuples count 0 and
    zero-count entries are dropped on construction.
    """

    zone_id: str
    attrs: tuple[str, ...]
    cells: Mapping[tuple[str, ...], int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "attrs", tuple(self.attrs))
        clean = {}
        for k, v in dict(self.cells).items():
            k = tuple(k)
            if len(k) != len(self.attrs):
                raise DataError(f"cell {k!r} does not match attrs {self.attrs}")
            v = int(v)
            if v < 0:
                raise DataError(f"zone {self.zone_id}: negative count {v} for {k}")
            if v:
                clean[k] = v
        object.__setattr__(self, "cells", dict(sorted(clean.items())))

    @property
    def total(self) -> int:
        return sum(self.cells.values())

    def count(self, cell: Sequence[str]) -> int:
        return self.cells.get(tuple(cell), 0)

    def validate(self, schema: Schema) -> None:
        for a in self.attrs:
            schema.index(a)
        for k in self.cells:
            for a, v in zip(self.attrs, k):
                if v not in schema[a].categories:
                    raise DataError(f"zone {self.zone_id}: invalid category {v!r} for {a}")

    def dense(self, schema: Schema) -> np.ndarray:
        """Counts as a flat vector over ``schema.cells(attrs)`` in canonical order."""
        sizes = schema.sizes(self.attrs)
        out = np.zeros(int(np.prod(sizes)), dtype=np.int64)
        for k, v in self.cells.items():
            idx = np.ravel_multi_index(tuple(schema[a].code(c) for a, c in zip(self.attrs, k)), sizes)
            out[idx] = v
        return out

    def marginalize(self, attrs: Sequence[str]) -> "MarginalTable":
        """Sum out every attribute not in ``attrs``."""
        pos = [self.attrs.index(a) for a in attrs]
        cells: dict[tuple, int] = {}
        for k, v in self.cells.items():
            kk = tuple(k[p] for p in pos)
            cells[kk] = cells.get(kk, 0) + v
        return MarginalTable(self.zone_id, tuple(attrs), cells)


def aggregate_marginals(pop: Population, attrs: Sequence[str], zone_id: str = "") -> MarginalTable:
    """Exact joint frequency table of ``pop`` over ``attrs``."""
    attrs = tuple(attrs)
    if not attrs:
        raise DataError("aggregate_marginals needs at least one attribute")
    idx = [pop.schema.index(a) for a in attrs]
    if len(pop) == 0:
        return MarginalTable(zone_id, attrs, {})
    sizes = pop.schema.sizes(attrs)
    flat = np.ravel_multi_index(tuple(pop.codes[:, i] for i in idx), sizes)
    counts = np.bincount(flat, minlength=int(np.prod(sizes)))
    nz = np.flatnonzero(counts)
    cats = [pop.schema[a].categories for a in attrs]
    cells = {}
    for f, c in zip(nz.tolist(), counts[nz].tolist()):
        multi = np.unravel_index(f, sizes)
        cells[tuple(cats[j][m] for j, m in enumerate(multi))] = c
    return MarginalTable(zone_id, attrs, cells)


def parse_marginals(source, schema: Schema) -> list[MarginalTable]:
    """Read long-format marginals: ``zone_id, <attr columns...>, count``."""
    fh, close = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("marginal file is empty (no header)") from None
        if "zone_id" not in header or "count" not in header:
            raise DataError("marginal file needs 'zone_id' and 'count' columns")
        attr_cols = [h for h in header if h not in ("zone_id", "count")]
        if not attr_cols:
            raise DataError("marginal file has no attribute columns")
        attrs = schema.canonical(attr_cols)
        pos = [header.index(a) for a in attrs]
        zpos, cpos = header.index("zone_id"), header.index("count")
        zones: dict[str, dict] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            key = tuple(rec[p] for p in pos)
            for a, v in zip(attrs, key):
                if v not in schema[a].categories:
                    raise DataError(f"row {lineno}: invalid category {v!r} for attribute {a}")
            try:
                cnt = int(rec[cpos])
            except ValueError:
                raise DataError(f"row {lineno}: count {rec[cpos]!r} is not an integer") from None
            if cnt < 0:
                raise DataError(f"row {lineno}: negative count {cnt}")
            cells = zones.setdefault(rec[zpos], {})
            if key in cells:
                raise DataError(f"row {lineno}: duplicate cell {key} for zone {rec[zpos]}")
            cells[key] = cnt
    finally:
        if close:
            fh.close()
    return [MarginalTable(z, attrs, zones[z]) for z in sorted(zones)]


def emit_marginals(tables: Sequence[MarginalTable], schema: Schema, dest=None) -> str | None:
    """Write tables in long format, listing every cell (zeros included)."""
    if not tables:
        raise DataError("no marginal tables to write")
    attrs = tables[0].attrs
    if any(t.attrs != attrs for t in tables):
        raise DataError("all tables must share conditioning attributes")
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["zone_id", *attrs, "count"])
    cells = schema.cells(attrs)
    for t in sorted(tables, key=lambda t: t.zone_id):
        for c in cells:
            w.writerow([t.zone_id, *c, t.count(c)])
    text = buf.getvalue()
    if dest is None:
        return text
    _write_text(dest, text)
    return None


def recode_attribute(pop: Population, attr: str, mapping: Mapping[str, str], new_vocab: Sequence[str]) -> Population:
    """Map the categories of ``attr`` onto ``new_vocab`` (e.g. merge part-time into working)."""
    old = pop.schema[attr]
    unmapped = [c for c in old.real_categories if c not in mapping]
    if unmapped:
        raise DataError(f"recode of {attr}: unmapped categories {unmapped}")
    bad = [v for v in mapping.values() if v not in new_vocab]
    if bad:
        raise DataError(f"recode of {attr}: targets {bad} not in new vocabulary")
    new = AttributeDef(attr, tuple(new_vocab), old.allow_missing)
    table = np.empty(old.size, dtype=np.int64)
    for i, c in enumerate(old.categories):
        table[i] = new.code(NA if c == NA else mapping[c])
    j = pop.schema.index(attr)
    codes = pop.codes.copy()
    codes[:, j] = table[codes[:, j]]
    return Population(pop.schema.replace(new), codes, pop.provenance)


# ---------------------------------------------------------------------------
# synthetic worlds

@dataclass(frozen=True)
class Dependency:
    """Child attribute drawn conditionally on a parent attribute.

    ``table[p]`` is the distribution over the child's categories given the
    parent's category code ``p``.
    """

    parent: str
    child: str
    table: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class GroundTruthSpec:
    schema: Schema
    population_size: int
    zone_sizes: tuple[int, ...] = ()
    seed: int = 0
    marginals: Mapping[str, tuple[float, ...]] | None = None
    dependencies: tuple[Dependency, ...] = ()
    joint: Mapping[tuple[str, ...], float] | None = None
    micro_sample_fraction: float = 0.1
    zone_attrs: tuple[str, ...] = ()
    zone_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "zone_sizes", tuple(int(z) for z in self.zone_sizes))
        object.__setattr__(self, "zone_attrs", tuple(self.zone_attrs))
        object.__setattr__(self, "dependencies", tuple(self.dependencies))
        self.validate()

    def validate(self) -> None:
        if self.population_size < 0:
            raise DataError("population_size must be >= 0")
        if any(z < 0 for z in self.zone_sizes):
            raise DataError("zone sizes must be >= 0")
        if sum(self.zone_sizes) > self.population_size:
            raise DataError(f"zone sizes sum to {sum(self.zone_sizes)} > population_size {self.population_size}")
        if not 0.0 <= self.micro_sample_fraction <= 1.0:
            raise DataError("micro_sample_fraction must be in [0, 1]")
        if self.zone_ids is not None and len(self.zone_ids) != len(self.zone_sizes):
            raise DataError("zone_ids and zone_sizes differ in length")
        for a in self.zone_attrs:
            self.schema.index(a)
        if self.joint is not None:
            p = np.array(list(self.joint.values()), dtype=float)
            _check_probs(p, "joint")
            for k in self.joint:
                for a, v in zip(self.schema.names, k):
                    self.schema[a].code(v)
            return
        marg = self.marginals or {}
        for a, p in marg.items():
            if len(p) != self.schema[a].size:
                raise DataError(f"marginal for {a} has {len(p)} entries, expected {self.schema[a].size}")
            _check_probs(np.asarray(p, float), a)
        seen_children = set()
        for d in self.dependencies:
            pi, ci = self.schema.index(d.parent), self.schema.index(d.child)
            if pi >= ci:
                raise DataError(f"dependency {d.parent}->{d.child}: parent must precede child in schema order")
            if d.child in seen_children:
                raise DataError(f"attribute {d.child} has more than one parent")
            seen_children.add(d.child)
            tab = np.asarray(d.table, float)
            if tab.shape != (self.schema[d.parent].size, self.schema[d.child].size):
                raise DataError(f"dependency {d.parent}->{d.child}: table shape {tab.shape} is wrong")
            for row in tab:
                _check_probs(row, f"{d.parent}->{d.child}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "GroundTruthSpec":
        schema = Schema.from_dict(data["schema"])
        joint = None
        if data.get("joint") is not None:
            joint = {tuple(e["cell"]): float(e["p"]) for e in data["joint"]}
        deps = tuple(
            Dependency(d["parent"], d["child"], tuple(tuple(float(x) for x in r) for r in d["table"]))
            for d in data.get("dependencies", [])
        )
        marg = {k: tuple(float(x) for x in v) for k, v in (data.get("marginals") or {}).items()}
        return cls(
            schema=schema,
            population_size=int(data["population_size"]),
            zone_sizes=tuple(data.get("zone_sizes", ())),
            seed=int(data.get("seed", 0)),
            marginals=marg or None,
            dependencies=deps,
            joint=joint,
            micro_sample_fraction=float(data.get("micro_sample_fraction", 0.1)),
            zone_attrs=tuple(data.get("zone_attrs", ())),
            zone_ids=tuple(data["zone_ids"]) if data.get("zone_ids") is not None else None,
        )


def load_ground_truth_spec(path: str | os.PathLike) -> GroundTruthSpec:
    with open(path, encoding="utf-8") as fh:
        return GroundTruthSpec.from_dict(json.load(fh))


def _check_probs(p: np.ndarray, what: str) -> None:
    if (p < 0).any() or not math.isclose(float(p.sum()), 1.0, abs_tol=1e-9):
        raise DataError(f"{what}: probabilities must be non-negative and sum to 1")


class World(NamedTuple):
    ground_truth: Population
    micro_sample: Population
    zone_targets: list[MarginalTable]
    zone_members: dict[str, Population]
    zone_of: tuple[str, ...] = ()  # zone id per ground-truth row, "" when unzoned


def generate_ground_truth(spec: GroundTruthSpec) -> World:
    """Draw a ground-truth population, a micro-sample of it and per-zone targets.

    Zones are contiguous blocks of a shuffled copy of the ground truth;
    rows past the last zone belong to no zone.
    """
    schema = spec.schema
    rng = np.random.default_rng(spec.seed)
    n = spec.population_size
    m = len(schema.attributes)
    if spec.joint is not None:
        keys = list(spec.joint)
        p = np.array([spec.joint[k] for k in keys], float)
        draws = rng.choice(len(keys), size=n, p=p / p.sum())
        lut = np.array([[schema[a].code(v) for a, v in zip(schema.names, k)] for k in keys], dtype=np.int64)
        codes = lut[draws].reshape(n, m)
    else:
        codes = np.zeros((n, m), dtype=np.int64)
        parents = {d.child: d for d in spec.dependencies}
        marg = spec.marginals or {}
        for j, ad in enumerate(schema.attributes):
            u = rng.random(n)
            if ad.name in parents:
                d = parents[ad.name]
                cdf = np.cumsum(np.asarray(d.table, float), axis=1)[codes[:, schema.index(d.parent)]]
            else:
                p = np.asarray(marg.get(ad.name, [1.0 / ad.size] * ad.size), float)
                cdf = np.broadcast_to(np.cumsum(p), (n, ad.size))
            codes[:, j] = np.minimum((u[:, None] >= cdf).sum(axis=1), ad.size - 1)
    truth = Population(schema, codes, Provenance.GROUND_TRUTH)

    k = int(round(spec.micro_sample_fraction * n))
    micro_idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.array([], dtype=np.int64)
    micro = truth.take(micro_idx, Provenance.MICRO_SAMPLE)

    order = rng.permutation(n)
    ids = spec.zone_ids or tuple(f"Z{i + 1:03d}" for i in range(len(spec.zone_sizes)))
    zone_attrs = spec.zone_attrs or schema.names
    targets, members = [], {}
    zone_of = [""] * n
    start = 0
    for zid, size in zip(ids, spec.zone_sizes):
        rows = order[start:start + size]
        block = truth.take(rows)
        start += size
        members[zid] = block
        for i in rows.tolist():
            zone_of[i] = zid
        targets.append(aggregate_marginals(block, zone_attrs, zid))
    return World(truth, micro, targets, members, tuple(zone_of))
