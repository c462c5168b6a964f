"""Synthetic population generation from aggregated marginals.

Three strategies are provided: combinatorial optimization over a
micro-sample (FBS-CO), a conditional tabular GAN with reject sampling, and
a hybrid that feeds a GAN-generated pool to FBS-CO.
"""

from .core_data import (
    NA,
    AttributeDef,
    DataError,
    GroundTruthSpec,
    MarginalTable,
    Population,
    Provenance,
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

__version__ = "0.1.0"
