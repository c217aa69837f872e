"""Infer mail-server pre-filtering decisions from SMTP flow records."""
from .classifier import FlowClassifier, calibrate, classify, compute_cdf, fraction_below
from .model import (
    FlowClass,
    FlowRecord,
    LabeledFlow,
    RejectReason,
    Thresholds,
    validate_flow,
)

__all__ = [
    "FlowClass",
    "FlowClassifier",
    "FlowRecord",
    "LabeledFlow",
    "RejectReason",
    "Thresholds",
    "calibrate",
    "classify",
    "compute_cdf",
    "fraction_below",
    "validate_flow",
]
__version__ = "0.1.0"
