"""Trace analytics: raw interaction logs to SRL processes, Markov strategies and outcome statistics."""

from trace_strategist.labels import PROCESS_ALPHABET, NO_PROCESS, ProcessLabel

__version__ = "0.1.0"

__all__ = ["PROCESS_ALPHABET", "NO_PROCESS", "ProcessLabel", "__version__"]
