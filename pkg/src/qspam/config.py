"""Shared numerical tolerances."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    # state validity
    hermitian: float = 1e-9
    trace: float = 1e-9
    eigenvalue: float = 1e-8
    bloch_norm: float = 1e-9
    # operators
    unitary: float = 1e-12
    completeness: float = 1e-9
    povm: float = 1e-12
    # parameter bounds are closed with this slack
    param_bound: float = 1e-10
    # smallest branch probability treated as possible
    min_probability: float = 1e-12
    # dense simulation cap
    max_qubits: int = 12


TOL = Tolerances()
