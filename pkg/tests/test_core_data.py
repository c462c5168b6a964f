import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from popsynth.core_data import (
    NA,
    AttributeDef,
    DataError,
    GroundTruthSpec,
    MarginalTable,
    Population,
    Schema,
    aggregate_marginals,
    emit_marginals,
    emit_population,
    generate_ground_truth,
    parse_marginals,
    parse_population,
    recode_attribute,
    total_combinations,
    travel_survey_schema,
)

from .conftest import AGES, WORK2, WORK3, age_sex_work_schema, random_population


def test_schema_invariants():
    with pytest.raises(DataError):
        AttributeDef("X", ("a",))
    with pytest.raises(DataError):
        AttributeDef("X", ("a", "a"))
    with pytest.raises(DataError):
        AttributeDef("X", ("a", NA))
    with pytest.raises(DataError):
        Schema((AttributeDef("X", ("a", "b")), AttributeDef("X", ("c", "d"))))
    a = AttributeDef("X", ("a", "b"), allow_missing=True)
    assert a.categories == ("a", "b", NA)
    assert a.real_categories == ("a", "b")


def test_total_combinations_travel_survey():
    assert total_combinations(travel_survey_schema()) == 4116
    # NA categories are excluded by default
    assert total_combinations(travel_survey_schema(allow_missing=True)) == 4116
    assert total_combinations(travel_survey_schema(allow_missing=True), include_na=True) == 7 * 2 * 3 * 8 * 8 * 4


def test_schema_roundtrip_dict():
    s = travel_survey_schema(allow_missing=True)
    assert Schema.from_dict(s.to_dict()) == s
    assert s.fingerprint() == Schema.from_dict(s.to_dict()).fingerprint()


# --- parse_population ------------------------------------------------------

def _age_sex(allow_missing=False):
    return Schema((AttributeDef("AGE", AGES), AttributeDef("SEX", ("f", "m"), allow_missing)))


def test_parse_population_direct_mapping():
    pop = parse_population(io.StringIO("AGE,SEX\n0-6,f\n"), _age_sex())
    assert len(pop) == 1
    assert pop.rows == [("0-6", "f")]


def test_parse_population_bytes_and_extra_columns():
    pop = parse_population(b"zone,SEX,AGE\nz1,m,65+\nz2,f,7-15\n", _age_sex())
    assert pop.rows == [("65+", "m"), ("7-15", "f")]


def test_parse_population_empty_becomes_na():
    schema = Schema((AttributeDef("AGE", AGES), AttributeDef("EDULEVEL", ("E1", "E2"), allow_missing=True)))
    pop = parse_population(io.StringIO("AGE,EDULEVEL\n0-6,\n"), schema)
    assert pop.rows == [("0-6", NA)]


def test_parse_population_unknown_label_names_attribute_and_value():
    with pytest.raises(DataError, match="purple") as exc:
        parse_population(io.StringIO("AGE,SEX\npurple,f\n"), _age_sex())
    assert "AGE" in str(exc.value)


def test_parse_population_errors():
    with pytest.raises(DataError, match="missing values"):
        parse_population(io.StringIO("AGE,SEX\n0-6,\n"), _age_sex())
    with pytest.raises(DataError, match="SEX"):
        parse_population(io.StringIO("AGE\n0-6\n"), _age_sex())


def test_parse_population_header_only_is_empty():
    pop = parse_population(io.StringIO("AGE,SEX\n"), _age_sex())
    assert len(pop) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.integers(0, 2**32 - 1))
def test_population_csv_roundtrip(n, seed):
    schema = Schema((AttributeDef("AGE", AGES), AttributeDef("SEX", ("f", "m"), allow_missing=True),
                     AttributeDef("NOTE", ("a,b", 'q"x'))))
    pop = random_population(np.random.default_rng(seed), schema, n)
    text = emit_population(pop)
    back = parse_population(io.StringIO(text), schema)
    assert back == pop
    assert emit_population(back) == text


def test_population_roundtrip_column_order_and_na_normalization():
    schema = _age_sex(allow_missing=True)
    pop = parse_population(io.StringIO("SEX,AGE\n,0-6\nm,65+\n"), schema)
    assert emit_population(pop) == "AGE,SEX\n0-6,NA\n65+,m\n"


# --- parse_marginals -------------------------------------------------------

# the most populous zone of the 2005 zonal data: AGE x (SEX, WORK)
ZONE_24800061 = {
    "0-6": (57, 0, 61, 0),
    "7-15": (50, 0, 63, 0),
    "16-19": (47, 14, 41, 6),
    "20-24": (777, 267, 670, 199),
    "25-44": (447, 255, 729, 409),
    "45-64": (35, 92, 54, 75),
    "65+": (34, 0, 37, 5),
}


def _zone_csv(zone, table):
    lines = ["zone_id,AGE,SEX,WORK,count"]
    for age, counts in table.items():
        for (sex, work), c in zip([("f", "not_working"), ("f", "working"), ("m", "not_working"), ("m", "working")], counts):
            lines.append(f"{zone},{age},{sex},{work},{c}")
    return "\n".join(lines) + "\n"


def test_parse_marginals_zone_table():
    schema = age_sex_work_schema(WORK2)
    (t,) = parse_marginals(io.StringIO(_zone_csv("24800061", ZONE_24800061)), schema)
    assert t.zone_id == "24800061"
    assert t.attrs == ("AGE", "SEX", "WORK")
    assert t.count(("0-6", "f", "not_working")) == 57
    assert t.total == 4424


def test_parse_marginals_all_zero_zone_and_ordering():
    schema = age_sex_work_schema(WORK2)
    zeros = {a: (0, 0, 0, 0) for a in AGES}
    text = _zone_csv("b", zeros) + _zone_csv("a", ZONE_24800061).split("\n", 1)[1]
    tables = parse_marginals(io.StringIO(text), schema)
    assert [t.zone_id for t in tables] == ["a", "b"]
    assert tables[1].total == 0 and tables[1].cells == {}


def test_parse_marginals_column_order_is_canonical():
    schema = age_sex_work_schema(WORK2)
    (t,) = parse_marginals(io.StringIO("count,SEX,zone_id,AGE\n3,m,z,45-64\n"), schema)
    assert t.attrs == ("AGE", "SEX")
    assert t.cells == {("45-64", "m"): 3}


@pytest.mark.parametrize("body, match", [
    ("z,0-6,f,1\nz,0-6,f,2\n", "duplicate"),
    ("z,0-6,f,-1\n", "negative"),
    ("z,0-6,x,1\n", "invalid category"),
    ("z,0-6,f,1.5\n", "integer"),
])
def test_parse_marginals_errors(body, match):
    with pytest.raises(DataError, match=match):
        parse_marginals(io.StringIO("zone_id,AGE,SEX,count\n" + body), age_sex_work_schema())


def test_marginals_roundtrip_keeps_zero_zone():
    schema = age_sex_work_schema()
    tables = [MarginalTable("z2", ("AGE", "SEX"), {}), MarginalTable("z1", ("AGE", "SEX"), {("0-6", "m"): 4})]
    text = emit_marginals(tables, schema)
    assert text.count("\nz2,") == 14
    back = parse_marginals(io.StringIO(text), schema)
    assert back == sorted(tables, key=lambda t: t.zone_id)


def test_marginal_table_total_and_dense():
    schema = age_sex_work_schema()
    t = MarginalTable("z", ("SEX",), {("f",): 3, ("m",): 0})
    assert t.total == 3 and t.cells == {("f",): 3}
    assert t.dense(schema).tolist() == [3, 0]


# --- recode ----------------------------------------------------------------

def test_recode_work_to_binary():
    schema = age_sex_work_schema()
    pop = Population.from_records(schema, [("0-6", "f", "working"), ("20-24", "m", "part-time"), ("65+", "f", "not_working")])
    mapping = {"working": "working", "part-time": "working", "not_working": "not_working"}
    out = recode_attribute(pop, "WORK", mapping, WORK2)
    assert out.schema["WORK"].categories == WORK2
    assert out.labels("WORK") == ["working", "working", "not_working"]
    assert out.labels("AGE") == pop.labels("AGE")


def test_recode_identity_and_errors():
    schema = age_sex_work_schema()
    pop = Population.from_records(schema, [("0-6", "f", "part-time")])
    assert recode_attribute(pop, "WORK", {c: c for c in WORK3}, WORK3) == pop
    with pytest.raises(DataError, match="unmapped"):
        recode_attribute(pop, "WORK", {"working": "working", "not_working": "not_working"}, WORK2)
    with pytest.raises(DataError, match="not in new vocabulary"):
        recode_attribute(pop, "WORK", {c: "x" for c in WORK3}, WORK2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 200), st.integers(0, 2**32 - 1))
def test_recode_preserves_rows_and_other_columns(n, seed):
    schema = age_sex_work_schema()
    pop = random_population(np.random.default_rng(seed), schema, n)
    out = recode_attribute(pop, "WORK", {"working": "working", "part-time": "working", "not_working": "not_working"}, WORK2)
    assert len(out) == len(pop)
    assert np.array_equal(out.codes[:, :2], pop.codes[:, :2])


# --- aggregate -------------------------------------------------------------

def test_aggregate_hand_count():
    pop = Population.from_records(_age_sex(), [("0-6", "f"), ("0-6", "f"), ("7-15", "m"), ("0-6", "m")])
    t = aggregate_marginals(pop, ["AGE", "SEX"])
    assert t.cells == {("0-6", "f"): 2, ("7-15", "m"): 1, ("0-6", "m"): 1}
    assert t.total == 4


def test_aggregate_empty():
    t = aggregate_marginals(Population(_age_sex(), np.zeros((0, 2))), ["AGE", "SEX"])
    assert t.cells == {} and t.total == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 300), st.integers(0, 2**32 - 1), st.sampled_from([("AGE",), ("SEX", "WORK"), ("AGE", "SEX", "WORK")]))
def test_aggregate_properties(n, seed, attrs):
    schema = age_sex_work_schema()
    pop = random_population(np.random.default_rng(seed), schema, n)
    assert aggregate_marginals(pop, attrs).total == n
    full = aggregate_marginals(pop, schema.names)
    assert sum(full.cells.values()) == n
    assert len(full.cells) <= total_combinations(schema)


# --- ground truth ----------------------------------------------------------

def test_ground_truth_point_mass():
    schema = age_sex_work_schema()
    spec = GroundTruthSpec(schema, 10, zone_sizes=(10,), joint={("25-44", "m", "working"): 1.0}, zone_attrs=("AGE", "SEX"))
    world = generate_ground_truth(spec)
    assert world.ground_truth.rows == [("25-44", "m", "working")] * 10
    assert world.zone_targets[0].cells == {("25-44", "m"): 10}


def test_ground_truth_uniform_within_three_sigma():
    schema = age_sex_work_schema()
    n = 100_000
    world = generate_ground_truth(GroundTruthSpec(schema, n, seed=1234))
    for a in schema.attributes:
        counts = np.bincount(world.ground_truth.column(a.name), minlength=a.size)
        p = 1.0 / a.size
        sigma = math.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sigma), (a.name, counts)


def test_ground_truth_zero_zone_and_partition():
    spec = GroundTruthSpec(age_sex_work_schema(), 500, zone_sizes=(100, 0, 250), seed=3, zone_attrs=("AGE", "SEX"))
    world = generate_ground_truth(spec)
    assert [t.total for t in world.zone_targets] == [100, 0, 250]
    assert world.zone_targets[1].cells == {}
    for t in world.zone_targets:
        assert aggregate_marginals(world.zone_members[t.zone_id], ("AGE", "SEX"), t.zone_id) == t
    assert len(world.micro_sample) == 50


def test_ground_truth_reproducible_bytes():
    from .conftest import world_spec

    a = generate_ground_truth(world_spec(2000, (300, 0, 500), seed=9))
    b = generate_ground_truth(world_spec(2000, (300, 0, 500), seed=9))
    s = a.ground_truth.schema
    assert emit_population(a.ground_truth) == emit_population(b.ground_truth)
    assert emit_population(a.micro_sample) == emit_population(b.micro_sample)
    assert emit_marginals(a.zone_targets, s) == emit_marginals(b.zone_targets, s)
    c = generate_ground_truth(world_spec(2000, (300, 0, 500), seed=10))
    assert emit_population(c.ground_truth) != emit_population(a.ground_truth)


def test_ground_truth_dependency_is_respected():
    from .conftest import world_spec

    world = generate_ground_truth(world_spec(5000))
    pop = world.ground_truth
    # the youngest group never works
    young = pop.column("AGE") == 0
    assert np.all(pop.column("WORK")[young] == 2)


def test_ground_truth_spec_errors():
    schema = age_sex_work_schema()
    with pytest.raises(DataError, match="zone sizes"):
        GroundTruthSpec(schema, 10, zone_sizes=(6, 5))
    with pytest.raises(DataError, match="sum to 1"):
        GroundTruthSpec(schema, 10, marginals={"SEX": (0.6, 0.6)})
    with pytest.raises(DataError):
        GroundTruthSpec(schema, 10, zone_sizes=(-1,))


def test_ground_truth_spec_from_dict():
    d = {
        "schema": age_sex_work_schema().to_dict(),
        "population_size": 100,
        "zone_sizes": [10, 0],
        "seed": 4,
        "marginals": {"SEX": [0.3, 0.7]},
        "dependencies": [{"parent": "AGE", "child": "WORK", "table": [[1, 0, 0]] * 7}],
        "zone_attrs": ["AGE", "SEX", "WORK"],
    }
    spec = GroundTruthSpec.from_dict(d)
    world = generate_ground_truth(spec)
    assert set(world.ground_truth.labels("WORK")) == {"working"}
