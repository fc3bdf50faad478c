"""Simulated enclave shielding of early model layers against gradient-based evasion attacks."""

__version__ = "0.1.0"
