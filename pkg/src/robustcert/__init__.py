"""Robust safety certificates and exit-time barrier functions for ODEs."""

from .benchmarks import Benchmark, get_benchmark, list_benchmarks
from .certificate import search_certificate, validate_certificate
from .dsl import SafetyProblem, parse_expression, parse_predicate, parse_problem
from .grid import OccupancyGrid
from .pipeline import SynthesisConfig, synthesize

__all__ = [
    "Benchmark",
    "OccupancyGrid",
    "SafetyProblem",
    "SynthesisConfig",
    "get_benchmark",
    "list_benchmarks",
    "parse_expression",
    "parse_predicate",
    "parse_problem",
    "search_certificate",
    "synthesize",
    "validate_certificate",
]
