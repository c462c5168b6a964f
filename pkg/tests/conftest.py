import numpy as np
import pytest

from popsynth.core_data import AttributeDef, Dependency, GroundTruthSpec, Population, Schema

AGES = ("0-6", "7-15", "16-19", "20-24", "25-44", "45-64", "65+")
WORK3 = ("working", "part-time", "not_working")
WORK2 = ("working", "not_working")

# P(WORK | AGE): children never work, working-age adults mostly do
WORK_GIVEN_AGE = (
    (0.0, 0.0, 1.0),
    (0.02, 0.08, 0.9),
    (0.25, 0.25, 0.5),
    (0.55, 0.2, 0.25),
    (0.75, 0.15, 0.1),
    (0.7, 0.15, 0.15),
    (0.05, 0.05, 0.9),
)
AGE_MARGINAL = (0.06, 0.14, 0.06, 0.07, 0.27, 0.26, 0.14)


def age_sex_work_schema(work=WORK3) -> Schema:
    return Schema((AttributeDef("AGE", AGES), AttributeDef("SEX", ("f", "m")), AttributeDef("WORK", work)))


def world_spec(population_size=40_000, zone_sizes=(), seed=11, micro_fraction=0.25) -> GroundTruthSpec:
    return GroundTruthSpec(
        age_sex_work_schema(),
        population_size,
        zone_sizes=zone_sizes,
        seed=seed,
        marginals={"AGE": AGE_MARGINAL, "SEX": (0.5, 0.5)},
        dependencies=(Dependency("AGE", "WORK", WORK_GIVEN_AGE),),
        micro_sample_fraction=micro_fraction,
        zone_attrs=("AGE", "SEX", "WORK"),
    )


def random_population(rng: np.random.Generator, schema: Schema, n: int) -> Population:
    codes = np.stack([rng.integers(0, a.size, size=n) for a in schema.attributes], axis=1) if n else np.zeros((0, len(schema.attributes)))
    return Population(schema, codes)


@pytest.fixture
def asw_schema():
    return age_sex_work_schema()


# one PASS/FAIL line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
