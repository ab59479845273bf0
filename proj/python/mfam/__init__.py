"""Multivariate functional additive mixed models."""

from ._mfam import (
    ConfigError,
    DomainError,
    Error,
    SchemaError,
    bspline_design,
    cyclic_difference_penalty,
    difference_penalty,
    logpdf,
    pointwise_coverage,
    predictor_derivatives,
    rrmse,
    run_pipeline,
    simulate,
    split_fourier_eigenbasis,
)

__version__ = "0.1.0"
