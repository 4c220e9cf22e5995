"""Dense density-matrix algebra, a small gate set and Kraus channels.

Qubit 0 is the most significant tensor factor, so the basis index of a
register reads left to right as qubit 0, 1, ..., N-1.  All objects are
immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import InitVar, dataclass, field
from typing import Sequence

import numpy as np

from .config import TOL
from .errors import InvalidChannel, InvalidTarget, NonPhysicalState, UnsupportedSize

I2 = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (I2, SIGMA_X, SIGMA_Y, SIGMA_Z)

# above this size the eigenvalue check is skipped on construction
_EIGEN_CHECK_MAX_QUBITS = 6


def as_complex2x2(m) -> np.ndarray:
    """Validate and freeze a 2x2 complex matrix."""
    a = np.array(m, dtype=complex)
    if a.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BlochVector:
    x: float
    y: float
    z: float

    def __post_init__(self):
        for v in (self.x, self.y, self.z):
            if not math.isfinite(v):
                raise NonPhysicalState("Bloch components must be finite")
        if self.norm > 1 + TOL.bloch_norm:
            raise NonPhysicalState(f"Bloch vector norm {self.norm:.12g} exceeds 1")

    @property
    def norm(self) -> float:
        return math.sqrt(self.x**2 + self.y**2 + self.z**2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, v) -> "BlochVector":
        x, y, z = (float(c) for c in v)
        return cls(x, y, z)


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Dense 2^N x 2^N density matrix."""

    data: np.ndarray
    n_qubits: int = field(default=-1)
    check: InitVar[bool] = True

    def __post_init__(self, check):
        a = np.array(self.data, dtype=complex)
        dim = a.shape[0]
        if a.ndim != 2 or a.shape[1] != dim or dim < 2 or dim & (dim - 1):
            raise NonPhysicalState(f"density matrix must be square with power-of-two size, got {a.shape}")
        n = dim.bit_length() - 1
        if self.n_qubits not in (-1, n):
            raise NonPhysicalState(f"matrix of size {dim} does not hold {self.n_qubits} qubits")
        if n > TOL.max_qubits:
            raise UnsupportedSize(f"{n} qubits exceeds the dense-simulation cap of {TOL.max_qubits}")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)
        object.__setattr__(self, "n_qubits", n)
        if check:
            self.validate()

    @classmethod
    def trusted(cls, data: np.ndarray) -> "DensityMatrix":
        # skips the invariant checks; for outputs of maps that preserve them
        return cls(data, check=False)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def trace(self) -> complex:
        return complex(np.trace(self.data))

    def validate(self, check_eigenvalues: bool | None = None) -> "DensityMatrix":
        a = self.data
        if not np.all(np.isfinite(a)):
            raise NonPhysicalState("density matrix has non-finite entries")
        if np.max(np.abs(a - a.conj().T)) > TOL.hermitian:
            raise NonPhysicalState("density matrix is not Hermitian")
        if abs(np.trace(a) - 1) > TOL.trace:
            raise NonPhysicalState(f"density matrix trace {np.trace(a).real:.12g} != 1")
        if check_eigenvalues is None:
            check_eigenvalues = self.n_qubits <= _EIGEN_CHECK_MAX_QUBITS
        if check_eigenvalues and np.min(np.linalg.eigvalsh(a)) < -TOL.eigenvalue:
            raise NonPhysicalState("density matrix has a negative eigenvalue")
        return self

    def probabilities(self) -> np.ndarray:
        """Computational-basis populations, clipped at zero."""
        p = np.clip(np.real(np.diag(self.data)), 0.0, None)
        return p / p.sum()


@dataclass(frozen=True)
class Gate:
    name: str
    theta: float | None = None

    _FIXED = ("I", "X", "H", "SX", "CNOT")
    _ROTATIONS = ("RZ", "RX")

    def __post_init__(self):
        name = self.name.upper()
        if name not in self._FIXED + self._ROTATIONS:
            raise ValueError(f"unknown gate {self.name!r}")
        if (name in self._ROTATIONS) != (self.theta is not None):
            raise ValueError(f"gate {name} {'needs' if name in self._ROTATIONS else 'takes no'} angle")
        object.__setattr__(self, "name", name)

    @property
    def arity(self) -> int:
        return 2 if self.name == "CNOT" else 1

    @property
    def matrix(self) -> np.ndarray:
        return _gate_matrix(self.name, self.theta)

    def __str__(self):
        return self.name if self.theta is None else f"{self.name}({self.theta:.6g})"


def _gate_matrix(name: str, theta: float | None) -> np.ndarray:
    if name == "I":
        return I2
    if name == "X":
        return SIGMA_X
    if name == "H":
        return np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2)
    if name == "SX":
        return 0.5 * np.array([[1 + 1j, 1 - 1j], [1 - 1j, 1 + 1j]])
    if name == "RZ":
        return np.diag([np.exp(-0.5j * theta), np.exp(0.5j * theta)])
    if name == "RX":
        c, s = math.cos(theta / 2), math.sin(theta / 2)
        return np.array([[c, -1j * s], [-1j * s, c]])
    if name == "CNOT":
        return np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)
    raise ValueError(name)


def X() -> Gate:
    return Gate("X")


def H() -> Gate:
    return Gate("H")


def SX() -> Gate:
    return Gate("SX")


def Rz(theta: float) -> Gate:
    return Gate("RZ", float(theta))


def Rx(theta: float) -> Gate:
    return Gate("RX", float(theta))


def CNOT() -> Gate:
    return Gate("CNOT")


# ---------------------------------------------------------------------------
# tensor plumbing


def _check_targets(n_qubits: int, targets: Sequence[int], arity: int) -> tuple[int, ...]:
    t = tuple(int(q) for q in targets)
    if len(t) != arity:
        raise InvalidTarget(f"operator acts on {arity} qubit(s), got targets {t}")
    if len(set(t)) != len(t):
        raise InvalidTarget(f"targets must be distinct, got {t}")
    if any(q < 0 or q >= n_qubits for q in t):
        raise InvalidTarget(f"targets {t} out of range for {n_qubits} qubits")
    return t


def _apply_on_axes(tensor: np.ndarray, op: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    k = len(axes)
    op_t = op.reshape((2,) * (2 * k))
    out = np.tensordot(op_t, tensor, axes=(tuple(range(k, 2 * k)), axes))
    return np.moveaxis(out, tuple(range(k)), axes)


def _sandwich(rho: np.ndarray, n: int, left: np.ndarray, targets: tuple[int, ...]) -> np.ndarray:
    """Return left . rho . left^dagger with ``left`` acting on ``targets``."""
    t = rho.reshape((2,) * (2 * n))
    t = _apply_on_axes(t, left, targets)
    t = _apply_on_axes(t, left.conj(), tuple(q + n for q in targets))
    return t.reshape(rho.shape)


def embed(op: np.ndarray, targets: Sequence[int], n_qubits: int) -> np.ndarray:
    """Full 2^N matrix of ``op`` acting on ``targets`` (small N only)."""
    dim = 2**n_qubits
    eye = np.eye(dim, dtype=complex).reshape((2,) * n_qubits + (dim,))
    out = _apply_on_axes(eye, np.asarray(op, dtype=complex), tuple(targets))
    return out.reshape(dim, dim)


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.conj().T)


# ---------------------------------------------------------------------------
# operations


def apply_unitary(state: DensityMatrix, gate: Gate | np.ndarray, targets: Sequence[int]) -> DensityMatrix:
    """Conjugate ``state`` by a gate acting on ``targets``."""
    u = gate.matrix if isinstance(gate, Gate) else np.asarray(gate, dtype=complex)
    arity = u.shape[0].bit_length() - 1
    if u.shape != (2**arity, 2**arity):
        raise InvalidTarget(f"gate matrix has shape {u.shape}")
    if np.max(np.abs(u @ u.conj().T - np.eye(2**arity))) > TOL.unitary:
        raise InvalidChannel("gate is not unitary")
    t = _check_targets(state.n_qubits, targets, arity)
    out = _sandwich(state.data, state.n_qubits, u, t)
    return DensityMatrix.trusted(_symmetrize(out))


def apply_kraus(
    state: DensityMatrix,
    ops: Sequence[np.ndarray],
    targets: Sequence[int] | int,
    selective: bool = False,
) -> DensityMatrix:
    """Apply Kraus operators to ``targets``.

    Channel mode returns ``sum_k K rho K^dagger`` and requires completeness.
    Selective mode takes a single operator and returns the unnormalized
    branch ``K rho K^dagger``; the caller divides by its trace.
    """
    if isinstance(targets, (int, np.integer)):
        targets = (int(targets),)
    ops = [np.asarray(k, dtype=complex) for k in ops]
    if not ops:
        raise InvalidChannel("empty Kraus set")
    dim = ops[0].shape[0]
    arity = dim.bit_length() - 1
    if any(k.shape != (dim, dim) for k in ops) or dim != 2**arity:
        raise InvalidChannel("Kraus operators must share a square power-of-two shape")
    if not all(np.all(np.isfinite(k)) for k in ops):
        raise InvalidChannel("Kraus operators have non-finite entries")
    t = _check_targets(state.n_qubits, targets, arity)
    gram = sum(k.conj().T @ k for k in ops)
    if selective:
        if len(ops) != 1:
            raise InvalidChannel("selective mode takes exactly one Kraus operator")
        if np.max(np.linalg.eigvalsh(_symmetrize(gram))) > 1 + TOL.completeness:
            raise InvalidChannel("K^dagger K exceeds the identity; not a valid measurement branch")
    elif np.max(np.abs(gram - np.eye(dim))) > TOL.completeness:
        raise InvalidChannel("Kraus set is not trace preserving")
    n = state.n_qubits
    out = np.zeros_like(state.data)
    for k in ops:
        out += _sandwich(state.data, n, k, t)
    return DensityMatrix.trusted(_symmetrize(out))


def density_from_bloch(v: BlochVector | Sequence[float]) -> DensityMatrix:
    if not isinstance(v, BlochVector):
        v = BlochVector.from_array(v)
    rho = 0.5 * (I2 + v.x * SIGMA_X + v.y * SIGMA_Y + v.z * SIGMA_Z)
    return DensityMatrix(rho)


def bloch_from_density(rho: DensityMatrix) -> BlochVector:
    if rho.n_qubits != 1:
        raise InvalidTarget("Bloch vectors describe single-qubit states only")
    rho.validate()
    a = rho.data
    return BlochVector(float(2 * a[0, 1].real), float(-2 * a[0, 1].imag), float((a[0, 0] - a[1, 1]).real))


def product_state(states: Sequence[DensityMatrix]) -> DensityMatrix:
    """Tensor product with ``states[0]`` as qubit 0."""
    if not states:
        raise InvalidTarget("need at least one factor")
    if sum(s.n_qubits for s in states) > TOL.max_qubits:
        raise UnsupportedSize(f"product exceeds the dense-simulation cap of {TOL.max_qubits} qubits")
    out = states[0].data
    for s in states[1:]:
        out = np.kron(out, s.data)
    return DensityMatrix.trusted(out)


def zero_state(n_qubits: int) -> DensityMatrix:
    if n_qubits > TOL.max_qubits:
        raise UnsupportedSize(f"{n_qubits} qubits exceeds the dense-simulation cap of {TOL.max_qubits}")
    a = np.zeros((2**n_qubits, 2**n_qubits), dtype=complex)
    a[0, 0] = 1
    return DensityMatrix.trusted(a)


# ---------------------------------------------------------------------------
# standard channels


def depolarizing_kraus(p: float, n_qubits: int = 1) -> list[np.ndarray]:
    """Kraus set for rho -> (1-p) rho + p 1/d (d = 2^n_qubits)."""
    if not 0 <= p <= 1:
        raise InvalidChannel(f"depolarizing probability {p} outside [0, 1]")
    d2 = 4**n_qubits
    ops = []
    for idx in np.ndindex(*(4,) * n_qubits):
        m = np.array([[1.0 + 0j]])
        for i in idx:
            m = np.kron(m, PAULIS[i])
        w = 1 - p * (d2 - 1) / d2 if not any(idx) else p / d2
        if w > 0:
            ops.append(math.sqrt(w) * m)
    return ops


def amplitude_damping_kraus(gamma: float) -> list[np.ndarray]:
    if not 0 <= gamma <= 1:
        raise InvalidChannel(f"damping probability {gamma} outside [0, 1]")
    return [
        np.array([[1, 0], [0, math.sqrt(1 - gamma)]], dtype=complex),
        np.array([[0, math.sqrt(gamma)], [0, 0]], dtype=complex),
    ]
