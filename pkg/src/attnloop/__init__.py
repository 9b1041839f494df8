"""Attention-feedback contributor simulator and estimators."""

__version__ = "0.1.0"

from .eventlog import CohortWindow, EventLog, FanSnapshot
from .model import AttentionSample, ConfigError, ModelParams, NoiseFamily, NoiseKernel, Variant
from .sim import ContributorHistory, simulate_contributor, simulate_counts, simulate_population
