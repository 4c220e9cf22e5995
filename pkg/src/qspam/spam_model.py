"""SPAM parameter set, measurement operators and forward probabilities.

Conventions
-----------
* The faulty fiducial state is ``rho = (1 + a.sigma) / 2`` with Bloch vector
  ``a = (alpha_sp_x, alpha_sp_y, alpha_sp_z)``.
* Readout outcome ``0`` is ``z+`` and ``1`` is ``z-``.  The ``+`` POVM element
  is ``diag((1 + alpha_m + delta)/2, (1 - alpha_m + delta)/2)``.
* The general ``+`` Kraus operator is parameterized by ``epsilon`` (squared
  ratio of the off-diagonal to the leading diagonal amplitude) and the phase
  ``phi_pp``.  With this parameterization the conditional probability of a
  repeated ``+`` outcome depends on the transverse Bloch components only
  through ``x cos(phi_pp) + y sin(phi_pp)``.
* Basis changes before readout act as ``rho -> U rho U^dagger`` with
  ``U`` in {X, H, SX}; SX maps the y axis of the Bloch sphere onto z.

Experiment labels (``->`` separates successive readouts, ``@`` gives the
z-rotation applied before the first readout):

=====================  ========================================================
``zp->zm``             prepare, read ``1``
``zm->zp``             prepare, X, read ``0``
``xp->zm``             prepare, H, read ``1``
``yp->zm``             prepare, SX, read ``1``
``zp->zp->zp@0``       prepare, read twice; P(second ``0`` | first ``0``)
``zp->zp->zp@pi``      as above after Rz(pi)
``zm->zp->zp@0``       prepare, X, read twice; P(second ``0`` | first ``0``)
``zm->zp->zp@pi``      as above after Rz(pi)
=====================  ========================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .config import TOL
from .errors import ImpossibleOutcome, InvalidParams, WrongModelVariant
from .qcore import BlochVector, DensityMatrix, apply_kraus, as_complex2x2

P_ZP_ZM = "zp->zm"
P_ZM_ZP = "zm->zp"
P_XP_ZM = "xp->zm"
P_YP_ZM = "yp->zm"
P_ZP_ZP_ZP_0 = "zp->zp->zp@0"
P_ZP_ZP_ZP_PI = "zp->zp->zp@pi"
P_ZM_ZP_ZP_0 = "zm->zp->zp@0"
P_ZM_ZP_ZP_PI = "zm->zp->zp@pi"

STANDARD_LABELS = (P_ZP_ZM, P_ZM_ZP)
SQSPAM_LABELS = (P_ZP_ZM, P_ZM_ZP, P_XP_ZM, P_YP_ZM, P_ZP_ZP_ZP_0)
QSPAM_LABELS = SQSPAM_LABELS + (P_ZP_ZP_ZP_PI, P_ZM_ZP_ZP_0, P_ZM_ZP_ZP_PI)
FAULTY_GATE_LABELS = SQSPAM_LABELS + (P_ZM_ZP_ZP_0,)

ProbabilitySet = dict  # label -> probability

PARAM_KEYS = (
    "alpha_m",
    "delta",
    "alpha_sp_x",
    "alpha_sp_y",
    "alpha_sp_z",
    "epsilon",
    "phi_pp",
    "phi_plus",
    "phi_minus",
)


def _check_bloch_bounds(x: float, y: float, z: float, what: str) -> None:
    tol = TOL.param_bound
    if not -tol <= z <= 1 + tol:
        raise InvalidParams(f"{what} z component {z} outside (0, 1]")
    if abs(x) > 1 + tol or abs(y) > 1 + tol:
        raise InvalidParams(f"{what} transverse components ({x}, {y}) outside (-1, 1)")
    if x * x + y * y + z * z > 1 + 2 * tol:
        raise InvalidParams(f"{what} Bloch vector longer than 1")


@dataclass(frozen=True)
class SpamParams:
    alpha_m: float
    delta: float
    alpha_sp: BlochVector = field(default_factory=lambda: BlochVector(0.0, 0.0, 1.0))
    epsilon: float = 0.0
    phi_pp: float = 0.0
    phi_plus: float = 0.0
    phi_minus: float = 0.0

    def __post_init__(self):
        if not isinstance(self.alpha_sp, BlochVector):
            object.__setattr__(self, "alpha_sp", BlochVector.from_array(self.alpha_sp))
        vals = (self.alpha_m, self.delta, self.epsilon, self.phi_pp, self.phi_plus, self.phi_minus)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParams("parameters must be finite")
        tol = TOL.param_bound
        if not -tol <= self.alpha_m <= 1 + tol:
            raise InvalidParams(f"alpha_m={self.alpha_m} outside [0, 1]")
        if abs(self.delta) > 1 - self.alpha_m + tol:
            raise InvalidParams(f"|delta|={abs(self.delta)} exceeds 1 - alpha_m = {1 - self.alpha_m}")
        if self.epsilon < -tol:
            raise InvalidParams(f"epsilon={self.epsilon} is negative")
        a = self.alpha_sp
        _check_bloch_bounds(a.x, a.y, a.z, "alpha_sp")

    @property
    def alpha_sp_x(self) -> float:
        return self.alpha_sp.x

    @property
    def alpha_sp_y(self) -> float:
        return self.alpha_sp.y

    @property
    def alpha_sp_z(self) -> float:
        return self.alpha_sp.z

    def with_alpha_sp(self, v) -> "SpamParams":
        return replace(self, alpha_sp=v if isinstance(v, BlochVector) else BlochVector.from_array(v))

    def to_json(self) -> dict:
        return {
            "alpha_m": self.alpha_m,
            "delta": self.delta,
            "alpha_sp_x": self.alpha_sp.x,
            "alpha_sp_y": self.alpha_sp.y,
            "alpha_sp_z": self.alpha_sp.z,
            "epsilon": self.epsilon,
            "phi_pp": self.phi_pp,
            "phi_plus": self.phi_plus,
            "phi_minus": self.phi_minus,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "SpamParams":
        unknown = set(d) - set(PARAM_KEYS)
        if unknown:
            raise InvalidParams(f"unknown SpamParams keys: {sorted(unknown)}")
        try:
            return cls(
                alpha_m=float(d["alpha_m"]),
                delta=float(d["delta"]),
                alpha_sp=BlochVector(
                    float(d.get("alpha_sp_x", 0.0)),
                    float(d.get("alpha_sp_y", 0.0)),
                    float(d.get("alpha_sp_z", 1.0)),
                ),
                epsilon=float(d.get("epsilon", 0.0)),
                phi_pp=float(d.get("phi_pp", 0.0)),
                phi_plus=float(d.get("phi_plus", 0.0)),
                phi_minus=float(d.get("phi_minus", 0.0)),
            )
        except KeyError as exc:
            raise InvalidParams(f"missing SpamParams key {exc}") from None


@dataclass(frozen=True)
class GatePrimeParams:
    """Bloch components produced by faulty X, H and SX preparations.

    ``alpha_sp_prime.z`` is minus the z component after the faulty X gate;
    ``x`` and ``y`` are the z components read out after the faulty H and SX.
    """

    alpha_sp_prime: BlochVector

    def __post_init__(self):
        if not isinstance(self.alpha_sp_prime, BlochVector):
            object.__setattr__(self, "alpha_sp_prime", BlochVector.from_array(self.alpha_sp_prime))
        a = self.alpha_sp_prime
        _check_bloch_bounds(a.x, a.y, a.z, "alpha_sp_prime")


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    kraus_plus: np.ndarray
    kraus_minus: np.ndarray
    povm_plus: np.ndarray
    povm_minus: np.ndarray

    def __post_init__(self):
        for name in ("kraus_plus", "kraus_minus", "povm_plus", "povm_minus"):
            object.__setattr__(self, name, as_complex2x2(getattr(self, name)))
        tol = TOL.povm
        kp, km = self.kraus_plus, self.kraus_minus
        if np.max(np.abs(kp.conj().T @ kp + km.conj().T @ km - np.eye(2))) > tol:
            raise InvalidParams("Kraus operators are not complete")
        for k, e in ((kp, self.povm_plus), (km, self.povm_minus)):
            if np.max(np.abs(k.conj().T @ k - e)) > tol:
                raise InvalidParams("POVM element differs from K^dagger K")
            if abs(e[0, 1]) > tol or abs(e[1, 0]) > tol:
                raise InvalidParams("POVM element is not diagonal")
            d = np.real(np.diag(e))
            if d.min() < -tol or d.max() > 1 + tol:
                raise InvalidParams("POVM eigenvalue outside [0, 1]")

    def kraus(self, outcome: int) -> np.ndarray:
        return self.kraus_plus if outcome == 0 else self.kraus_minus

    def povm(self, outcome: int) -> np.ndarray:
        return self.povm_plus if outcome == 0 else self.povm_minus


def povm_diagonal(alpha_m: float, delta: float) -> tuple[float, float]:
    """Diagonal of the ``+`` POVM element."""
    return 0.5 * (1 + alpha_m + delta), 0.5 * (1 - alpha_m + delta)


def build_measurement_model(p: SpamParams, diagonal: bool | None = None) -> MeasurementModel:
    """Kraus pair and POVM for one qubit.

    ``diagonal=True`` demands diagonal Kraus operators (``epsilon`` must be 0);
    ``None`` picks the diagonal form exactly when ``epsilon == 0``.
    """
    if diagonal is None:
        diagonal = p.epsilon == 0
    if diagonal and p.epsilon != 0:
        raise WrongModelVariant("diagonal Kraus operators require epsilon == 0")
    p0, p1 = (max(v, 0.0) for v in povm_diagonal(p.alpha_m, p.delta))
    q0, q1 = max(1 - p0, 0.0), max(1 - p1, 0.0)
    eps = max(p.epsilon, 0.0)
    if diagonal:
        kp = np.diag([math.sqrt(p0), np.exp(1j * p.phi_plus) * math.sqrt(p1)])
    else:
        m1 = math.sqrt(p0 / (1 + eps))
        m2 = math.sqrt(p1 / (1 + eps))
        m3 = math.sqrt(eps) * m1
        kp = np.array(
            [
                [m1, -m2 * math.sqrt(eps) * np.exp(-1j * p.phi_pp)],
                [m3 * np.exp(1j * (p.phi_pp + p.phi_plus)), m2 * np.exp(1j * p.phi_plus)],
            ]
        )
        if m3**2 > 1 - m1**2 + TOL.povm:
            raise InvalidParams("off-diagonal Kraus amplitude violates positivity")
    km = np.diag([math.sqrt(q0), np.exp(1j * p.phi_minus) * math.sqrt(q1)])
    return MeasurementModel(kp, km, np.diag([p0, p1]), np.diag([q0, q1]))


# ---------------------------------------------------------------------------
# closed-form probabilities


def prepared_bloch(a, prep: str | None = None, theta: float = 0.0) -> tuple[float, float, float]:
    """Bloch vector after a basis-change gate and then ``Rz(theta)``."""
    x, y, z = (float(c) for c in (a.as_array() if isinstance(a, BlochVector) else a))
    if prep in (None, "I"):
        pass
    elif prep == "X":
        x, y, z = x, -y, -z
    elif prep == "H":
        x, y, z = z, -y, x
    elif prep == "SX":
        x, y, z = x, -z, y
    else:
        raise ValueError(f"unknown preparation gate {prep!r}")
    if theta:
        c, s = math.cos(theta), math.sin(theta)
        x, y = c * x - s * y, s * x + c * y
    return x, y, z


def read_plus_probability(alpha_m, delta, bz):
    """Tr[Pi_+ rho] for a state with Bloch z component ``bz``."""
    return 0.5 * (1 + delta + alpha_m * bz)


def repeat_plus_probability(alpha_m, delta, bx, by, bz, epsilon=0.0, phi_pp=0.0):
    """P(second readout ``+`` | first readout ``+``) for the given input state.

    Accepts numpy arrays for vectorized evaluation.
    """
    d = 1 + delta
    kappa = np.sqrt(np.maximum(epsilon * (d * d - alpha_m * alpha_m), 0.0))
    g = bx * np.cos(phi_pp) + by * np.sin(phi_pp)
    num = alpha_m**2 * (1 - epsilon) + 2 * alpha_m * bz * d + d * d * (1 + epsilon) - 2 * alpha_m * kappa * g
    den = 2 * (1 + epsilon) * (d + alpha_m * bz)
    return num / den


def repeat_plus_gradient(alpha_m, delta, bx, by, bz, epsilon=0.0, phi_pp=0.0, eps_floor=1e-14):
    """Value and partial derivatives of :func:`repeat_plus_probability`.

    ``bx``, ``by``, ``bz`` may be arrays of equal shape; the other arguments
    are scalars.  Returns ``(value, grad)`` where ``grad[..., k]`` follows the
    order ``(alpha_m, delta, bx, by, bz, epsilon, phi_pp)``.  The epsilon
    derivative diverges like ``epsilon**-0.5`` when the transverse term is
    non-zero, so it is evaluated at ``max(epsilon, eps_floor)``.
    """
    bx, by, bz = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (bx, by, bz)))
    d = 1 + delta
    r = max(d * d - alpha_m * alpha_m, 0.0)
    c, s = math.cos(phi_pp), math.sin(phi_pp)
    g = bx * c + by * s
    kappa = math.sqrt(epsilon * r) if epsilon > 0 else 0.0
    num = alpha_m**2 * (1 - epsilon) + 2 * alpha_m * bz * d + d * d * (1 + epsilon) - 2 * alpha_m * kappa * g
    den = 2 * (1 + epsilon) * (d + alpha_m * bz)
    val = num / den

    e_eff = max(epsilon, eps_floor)
    sr = math.sqrt(e_eff * r)
    if sr > 0:
        dk = (-e_eff * alpha_m / sr, e_eff * d / sr, r / (2 * sr))
    else:
        dk = (0.0, 0.0, 0.0)

    zero = np.zeros_like(bz)
    dn = np.stack(
        [
            2 * alpha_m * (1 - epsilon) + 2 * bz * d - 2 * kappa * g - 2 * alpha_m * g * dk[0],
            2 * alpha_m * bz + 2 * d * (1 + epsilon) - 2 * alpha_m * g * dk[1],
            zero - 2 * alpha_m * kappa * c,
            zero - 2 * alpha_m * kappa * s,
            zero + 2 * alpha_m * d,
            -(alpha_m**2) + d * d - 2 * alpha_m * g * dk[2],
            -2 * alpha_m * kappa * (-bx * s + by * c),
        ],
        axis=-1,
    )
    dq = np.stack(
        [
            2 * (1 + epsilon) * bz,
            zero + 2 * (1 + epsilon),
            zero,
            zero,
            zero + 2 * (1 + epsilon) * alpha_m,
            2 * (d + alpha_m * bz),
            zero,
        ],
        axis=-1,
    )
    return val, (dn - val[..., None] * dq) / den[..., None]


def forward_standard(p: SpamParams) -> tuple[float, float]:
    z = p.alpha_sp.z
    return (
        1 - read_plus_probability(p.alpha_m, p.delta, z),
        read_plus_probability(p.alpha_m, p.delta, -z),
    )


def _single_readouts(p: SpamParams) -> ProbabilitySet:
    a = p.alpha_sp
    p_zm, p_zp = forward_standard(p)
    return {
        P_ZP_ZM: p_zm,
        P_ZM_ZP: p_zp,
        P_XP_ZM: 1 - read_plus_probability(p.alpha_m, p.delta, a.x),
        P_YP_ZM: 1 - read_plus_probability(p.alpha_m, p.delta, a.y),
    }


def _repeat(p: SpamParams, prep: str | None, theta: float, epsilon: float) -> float:
    bx, by, bz = prepared_bloch(p.alpha_sp, prep, theta)
    return float(repeat_plus_probability(p.alpha_m, p.delta, bx, by, bz, epsilon, p.phi_pp))


def forward_sqspam(p: SpamParams) -> ProbabilitySet:
    """The five diagonal-Kraus probabilities."""
    if p.epsilon != 0:
        raise WrongModelVariant("the five-experiment model assumes epsilon == 0")
    out = _single_readouts(p)
    out[P_ZP_ZP_ZP_0] = _repeat(p, None, 0.0, 0.0)
    return out


def forward_qspam(p: SpamParams) -> ProbabilitySet:
    """All eight probabilities for general (non-diagonal) Kraus operators."""
    out = _single_readouts(p)
    out[P_ZP_ZP_ZP_0] = _repeat(p, None, 0.0, p.epsilon)
    out[P_ZP_ZP_ZP_PI] = _repeat(p, None, math.pi, p.epsilon)
    out[P_ZM_ZP_ZP_0] = _repeat(p, "X", 0.0, p.epsilon)
    out[P_ZM_ZP_ZP_PI] = _repeat(p, "X", math.pi, p.epsilon)
    return out


def repeat_pair_sum(p: SpamParams, prepared_minus: bool = False) -> float:
    """Sum of the theta = 0 and theta = pi conditional probabilities (phase free)."""
    s = -1.0 if prepared_minus else 1.0
    am, d, z, e = p.alpha_m, 1 + p.delta, p.alpha_sp.z, p.epsilon
    num = am**2 * (1 - e) + 2 * s * am * z * d + d * d * (1 + e)
    return num / ((d + s * am * z) * (1 + e))


def forward_faulty_gate(p: SpamParams, g: GatePrimeParams) -> ProbabilitySet:
    """Six probabilities when the X, H and SX preparations are themselves faulty."""
    if p.epsilon != 0:
        raise WrongModelVariant("the faulty-gate model assumes epsilon == 0")
    am, dl = p.alpha_m, p.delta
    ap = g.alpha_sp_prime
    z = p.alpha_sp.z
    return {
        P_ZP_ZM: 1 - read_plus_probability(am, dl, z),
        P_ZM_ZP: read_plus_probability(am, dl, -ap.z),
        P_XP_ZM: 1 - read_plus_probability(am, dl, ap.x),
        P_YP_ZM: 1 - read_plus_probability(am, dl, ap.y),
        P_ZP_ZP_ZP_0: float(repeat_plus_probability(am, dl, 0.0, 0.0, z)),
        P_ZM_ZP_ZP_0: float(repeat_plus_probability(am, dl, 0.0, 0.0, -ap.z)),
    }


def rotated_sp_params(alpha_sp, phi: float) -> BlochVector:
    """Bloch vector after an ``Rx(phi)`` rotation of the fiducial state."""
    x, y, z = (alpha_sp.as_array() if isinstance(alpha_sp, BlochVector) else np.asarray(alpha_sp, float))
    c, s = math.cos(phi), math.sin(phi)
    return BlochVector(float(x), float(y * c - z * s), float(z * c + y * s))


def post_measurement_state(p: SpamParams, rho_in: DensityMatrix, outcome: int | str) -> DensityMatrix:
    """Normalized state after a single-qubit readout with the given outcome."""
    k = _outcome_index(outcome)
    model = build_measurement_model(p)
    branch = apply_kraus(rho_in, [model.kraus(k)], 0, selective=True)
    prob = branch.trace.real
    if prob <= TOL.min_probability:
        raise ImpossibleOutcome(f"outcome {outcome!r} has probability {prob:.3g}")
    return DensityMatrix(branch.data / prob)


def _outcome_index(outcome) -> int:
    if outcome in (0, "0", "+", "z+"):
        return 0
    if outcome in (1, "1", "-", "z-"):
        return 1
    raise ValueError(f"unknown outcome {outcome!r}")
