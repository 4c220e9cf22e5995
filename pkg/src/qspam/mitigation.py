"""SP correction pulses, confusion-matrix readout correction and bias bounds.

Bitstrings put qubit 0 leftmost; ``ConfusionSet.matrices[i]`` belongs to the
character at position ``i``.  Confusion matrices are column stochastic:
``A[observed, true]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NoCorrectionPossible, NonInvertibleConfusion
from .qcore import BlochVector, Gate, Rx, Rz
from .sim import ReadoutHistogram
from .spam_model import SpamParams

Observable = Callable[[np.ndarray], np.ndarray]

MODE_A = "A"
MODE_B = "B"
_MODE_ALIASES = {"A": MODE_A, "qspam": MODE_A, "B": MODE_B, "standard": MODE_B}

# output rows per vectorized chunk in the sparse correction
_CHUNK = 256


def confusion_matrix(fidelity: float, delta: float) -> np.ndarray:
    """Single-qubit readout confusion matrix for a given fidelity and asymmetry."""
    return 0.5 * np.array([[1 + fidelity + delta, 1 - fidelity + delta], [1 - fidelity - delta, 1 + fidelity - delta]])


@dataclass(frozen=True, eq=False)
class ConfusionSet:
    matrices: tuple
    provenance: str = MODE_A

    def __post_init__(self):
        mats = []
        for m in self.matrices:
            a = np.array(m, dtype=float)
            if a.shape != (2, 2):
                raise ValueError("confusion matrices are 2x2")
            if np.max(np.abs(a.sum(axis=0) - 1)) > 1e-12:
                raise ValueError("confusion matrix columns must sum to 1")
            if a.min() < -1e-12 or a.max() > 1 + 1e-12:
                raise ValueError("confusion matrix entries must lie in [0, 1]")
            a.setflags(write=False)
            mats.append(a)
        if not mats:
            raise ValueError("empty confusion set")
        object.__setattr__(self, "matrices", tuple(mats))
        object.__setattr__(self, "provenance", _MODE_ALIASES[self.provenance])

    @property
    def n_qubits(self) -> int:
        return len(self.matrices)

    def inverses(self) -> list[np.ndarray]:
        out = []
        for i, a in enumerate(self.matrices):
            det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
            if abs(det) < 1e-12:
                raise NonInvertibleConfusion(f"confusion matrix of qubit {i} is singular")
            out.append(np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det)
        return out

    @classmethod
    def identity(cls, n_qubits: int) -> "ConfusionSet":
        return cls(tuple(np.eye(2) for _ in range(n_qubits)))


def build_confusion(params: Sequence[SpamParams], mode: str = MODE_A) -> ConfusionSet:
    """Per-qubit confusion matrices.

    Mode ``A`` uses the readout fidelity ``alpha_m``.  Mode ``B`` is the
    standard-protocol matrix, which absorbs the preparation error into the
    fidelity as ``alpha_m * alpha_sp_z``.
    """
    mode = _MODE_ALIASES[mode]
    mats = []
    for p in params:
        f = p.alpha_m if mode == MODE_A else p.alpha_m * p.alpha_sp.z
        mats.append(confusion_matrix(f, p.delta))
    return ConfusionSet(tuple(mats), mode)


# ---------------------------------------------------------------------------
# SP correction


@dataclass(frozen=True)
class CorrectionPulse:
    """Six-gate rotation taking the fiducial Bloch vector onto +z.

    ``gates`` lists the gates in execution order.
    """

    gates: tuple[Gate, ...]
    theta1: float
    theta2: float
    x_degenerate: bool = False
    y_degenerate: bool = False
    target: BlochVector = field(default_factory=lambda: BlochVector(0.0, 0.0, 1.0))

    def unitary(self) -> np.ndarray:
        u = np.eye(2, dtype=complex)
        for g in self.gates:
            u = g.matrix @ u
        return u


def compile_sp_correction(
    alpha: BlochVector | Sequence[float],
    uncertainty: Sequence[float] | None = None,
    threshold: float = 2.0,
) -> CorrectionPulse:
    """Compile the corrective rotation for an estimated fiducial Bloch vector.

    A transverse component whose magnitude is at most ``threshold`` times its
    uncertainty (``uncertainty = (dx, dy)``) is treated as zero.  Exactly zero
    components follow the same branches.
    """
    if not isinstance(alpha, BlochVector):
        alpha = BlochVector.from_array(alpha)
    x, y, z = alpha.x, alpha.y, alpha.z
    dx, dy = (0.0, 0.0) if uncertainty is None else (float(uncertainty[0]), float(uncertainty[1]))
    x_deg = abs(x) <= threshold * dx or x == 0.0
    y_deg = abs(y) <= threshold * dy or y == 0.0
    if x_deg:
        x = 0.0
    if y_deg:
        y = 0.0
    norm = math.sqrt(x * x + y * y + z * z)
    if norm == 0.0:
        raise NoCorrectionPossible("fiducial Bloch vector has zero length")
    if x_deg and y_deg:
        theta1 = 0.0
    elif x_deg:
        theta1 = -math.copysign(math.pi / 2, y)
    elif y_deg:
        theta1 = 0.0 if x > 0 else -math.pi
    else:
        theta1 = -math.atan2(y, x)
    theta2 = math.asin(max(-1.0, min(1.0, z / norm))) - math.pi / 2
    gates = (Rz(theta1), Rx(math.pi / 2), Rz(theta2), Rz(math.pi), Rx(math.pi / 2), Rz(-math.pi))
    return CorrectionPulse(gates, theta1, theta2, x_deg, y_deg, BlochVector(x, y, z))


# ---------------------------------------------------------------------------
# readout correction


@dataclass(frozen=True)
class QuasiDistribution:
    values: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "values", dict(sorted((k, float(v)) for k, v in self.values.items())))

    @property
    def total(self) -> float:
        return math.fsum(self.values.values())

    def negative_entries(self) -> list[str]:
        return [k for k, v in self.values.items() if v < 0]

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "values": dict(self.values),
            "negative": {k: v < 0 for k, v in self.values.items()},
        }


def _bits(strings: Sequence[str]) -> np.ndarray:
    if not strings:
        return np.zeros((0, 0), dtype=np.int64)
    return np.frombuffer("".join(strings).encode(), dtype=np.uint8).reshape(len(strings), -1).astype(np.int64) - 48


def _histogram_arrays(h: ReadoutHistogram, c: ConfusionSet) -> tuple[np.ndarray, np.ndarray]:
    if h.width != c.n_qubits:
        raise ValueError(f"histogram has {h.width} qubits but the confusion set has {c.n_qubits}")
    keys = list(h.counts)
    freqs = np.array([h.counts[k] for k in keys], dtype=float) / h.nu
    return _bits(keys), freqs


def _weights(beta: np.ndarray, gamma: np.ndarray, inv: Sequence[np.ndarray]) -> np.ndarray:
    """Matrix of prod_i inv[i][beta_i, gamma_i] with rows beta and columns gamma."""
    w = np.ones((beta.shape[0], gamma.shape[0]))
    for i, a in enumerate(inv):
        w *= a[beta[:, i][:, None], gamma[:, i][None, :]]
    return w


def _all_bitstrings(n: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    idx = np.arange(start, 2**n if stop is None else stop, dtype=np.int64)
    return (idx[:, None] >> np.arange(n - 1, -1, -1)) & 1


def corrected_probabilities(h: ReadoutHistogram, c: ConfusionSet, betas: Sequence[str]) -> np.ndarray:
    """Corrected probabilities of the given output strings.

    Sums over observed outcomes only, so each output costs O(N |observed|).
    """
    gamma, freqs = _histogram_arrays(h, c)
    b = _bits(list(betas))
    if b.shape[1] != c.n_qubits:
        raise ValueError("output strings do not match the qubit count")
    return _weights(b, gamma, c.inverses()) @ freqs


def corrected_probability(h: ReadoutHistogram, c: ConfusionSet, beta: str) -> float:
    """Corrected probability of one output string."""
    return float(corrected_probabilities(h, c, [beta])[0])


def mitigate_histogram(h: ReadoutHistogram, c: ConfusionSet) -> QuasiDistribution:
    """Corrected quasi-probabilities for every output string.

    Each output costs O(N |observed outcomes|); entries are not clipped.
    """
    gamma, freqs = _histogram_arrays(h, c)
    inv = c.inverses()
    n = c.n_qubits
    out = {}
    for start in range(0, 2**n, _CHUNK):
        beta = _all_bitstrings(n, start, min(start + _CHUNK, 2**n))
        vals = _weights(beta, gamma, inv) @ freqs
        for j, v in enumerate(vals):
            if v != 0.0:
                out[format(start + j, f"0{n}b")] = float(v)
    return QuasiDistribution(out)


def parity_observable(qubits: Sequence[int] | None = None) -> Observable:
    """Z-parity on ``qubits`` (all qubits by default)."""

    def obs(bits: np.ndarray) -> np.ndarray:
        b = bits if qubits is None else bits[:, list(qubits)]
        return 1.0 - 2.0 * (b.sum(axis=1) % 2)

    return obs


def _observable_coefficients(gamma: np.ndarray, inv: Sequence[np.ndarray], observable: Observable) -> np.ndarray:
    """c_gamma = sum_beta O(beta) prod_i inv[i][beta_i, gamma_i]."""
    n = len(inv)
    coef = np.zeros(gamma.shape[0])
    for start in range(0, 2**n, _CHUNK):
        beta = _all_bitstrings(n, start, min(start + _CHUNK, 2**n))
        o = np.asarray(observable(beta), dtype=float)
        if np.max(np.abs(o)) > 1 + 1e-12:
            raise ValueError("observable eigenvalues must satisfy |O| <= 1")
        coef += o @ _weights(beta, gamma, inv)
    return coef


def mitigated_expectation(
    h: ReadoutHistogram,
    c: ConfusionSet,
    observable: Observable | None = None,
    multinomial: bool = False,
) -> tuple[float, float]:
    """Readout-corrected expectation value and its standard deviation.

    The default deviation treats each observed frequency as an independent
    binomial estimate.  ``multinomial=True`` includes the negative covariance
    between outcomes instead.
    """
    observable = observable or parity_observable()
    gamma, freqs = _histogram_arrays(h, c)
    coef = _observable_coefficients(gamma, c.inverses(), observable)
    value = float(coef @ freqs)
    if multinomial:
        var = (float(freqs @ coef**2) - value**2) / h.nu
    else:
        var = float(np.sum(freqs * (1 - freqs) * coef**2)) / h.nu
    return value, math.sqrt(max(var, 0.0))


def sigma_upper_bound(c: ConfusionSet, nu: int, gamma: Sequence[str] | None = None) -> float:
    """nu^-1/2 max_gamma sum_beta prod_i |inv[i][beta_i, gamma_i]|.

    The sum over beta factorizes per qubit, so the maximum over all outcomes
    (or over ``gamma`` when given) is evaluated directly.
    """
    inv = [np.abs(a) for a in c.inverses()]
    col = [a.sum(axis=0) for a in inv]
    if gamma is None:
        best = math.prod(float(np.max(s)) for s in col)
    else:
        g = _bits(list(gamma))
        best = float(np.max(np.prod([col[i][g[:, i]] for i in range(len(col))], axis=0)))
    return best / math.sqrt(nu)


def corrected_marginals(h: ReadoutHistogram, c: ConfusionSet) -> list[np.ndarray]:
    """Per-qubit corrected marginal distributions [A_i^-1 Pi^(i)]."""
    gamma, freqs = _histogram_arrays(h, c)
    out = []
    for i, a in enumerate(c.inverses()):
        p0 = float(freqs[gamma[:, i] == 0].sum())
        out.append(a @ np.array([p0, 1 - p0]))
    return out


# ---------------------------------------------------------------------------
# bias between standard and SP-aware readout correction


def _marginal_ratio(p: SpamParams, pi0: float) -> float:
    return (1 - 2 * pi0 + p.delta) / (2 * p.alpha_m)


def bias_bound(params: Sequence[SpamParams], n_outcomes: int, pi0: Sequence[float]) -> dict:
    """Bounds on |<O>_B - <O>_A| built from per-qubit marginals.

    ``weak_bound`` is valid when every corrected marginal entry has magnitude
    at most one, reported as ``weak_condition``.  ``general_bound`` drops that
    assumption by telescoping the product difference, taking the larger sign
    branch of every factor so only the outcome count is required.

    Both treat the readout distribution as a product of its marginals.  For
    correlated states use :func:`record_bias_bound`.
    """
    if len(params) != len(pi0):
        raise ValueError("need one marginal per qubit")
    r = [_marginal_ratio(p, q) for p, q in zip(params, pi0)]
    az = [p.alpha_sp.z for p in params]
    if min(az) <= 0:
        raise ValueError("alpha_sp_z must be positive")
    terms = [abs(1 / a - 1) * abs(ri) for a, ri in zip(az, r)]
    weak_ok = all(0.5 + abs(ri) <= 1 and 0.5 + abs(ri / a) <= 1 for ri, a in zip(r, az))
    general = 0.0
    for k in range(len(params)):
        left = math.prod(0.5 + abs(r[j] / az[j]) for j in range(k))
        right = math.prod(0.5 + abs(r[j]) for j in range(k + 1, len(params)))
        general += terms[k] * left * right
    return {
        "weak_bound": n_outcomes * math.fsum(terms),
        "weak_condition": weak_ok,
        "general_bound": n_outcomes * general,
    }


def record_bias_bound(h: ReadoutHistogram, a: ConfusionSet, b: ConfusionSet) -> float:
    """Distribution-free bound on |<O>_B - <O>_A| for any |O| <= 1.

    For each observed record eta the column difference of the two inverse
    tensor products is telescoped qubit by qubit in the 1-norm; the bound is
    the frequency-weighted sum over records.
    """
    gamma, freqs = _histogram_arrays(h, a)
    ia, ib = a.inverses(), b.inverses()
    n = a.n_qubits
    na = np.stack([np.abs(m).sum(axis=0) for m in ia])  # (n, 2): |a_j(eta_j)|_1
    nb = np.stack([np.abs(m).sum(axis=0) for m in ib])
    nd = np.stack([np.abs(mb - ma).sum(axis=0) for ma, mb in zip(ia, ib)])
    rows = np.arange(n)[None, :]
    fa, fb, fd = na[rows, gamma], nb[rows, gamma], nd[rows, gamma]
    total = np.zeros(len(freqs))
    for k in range(n):
        total += fd[:, k] * np.prod(fb[:, :k], axis=1) * np.prod(fa[:, k + 1 :], axis=1)
    return float(total @ freqs)


def compare_standard_vs_qspam(
    h: ReadoutHistogram,
    params: Sequence[SpamParams],
    observable: Observable | None = None,
) -> dict:
    """Raw, SP-aware (A) and standard (B) corrected estimates from one histogram."""
    observable = observable or parity_observable()
    n = h.width
    if len(params) != n:
        raise ValueError(f"histogram has {n} qubits but {len(params)} parameter sets were given")
    a = build_confusion(params, MODE_A)
    b = build_confusion(params, MODE_B)
    raw = mitigated_expectation(h, ConfusionSet.identity(n), observable)
    va = mitigated_expectation(h, a, observable)
    vb = mitigated_expectation(h, b, observable)
    gamma, freqs = _histogram_arrays(h, a)
    pi0 = [float(freqs[gamma[:, i] == 0].sum()) for i in range(n)]
    marg = bias_bound(params, len(h.counts), pi0)
    diff = vb[0] - va[0]
    rec = record_bias_bound(h, a, b)
    return {
        "raw": {"value": raw[0], "sigma": raw[1]},
        "qspam_a": {"value": va[0], "sigma": va[1]},
        "standard_b": {"value": vb[0], "sigma": vb[1]},
        "difference": diff,
        "difference_sigma": va[1] + vb[1],
        "record_bound": rec,
        "weak_bound": marg["weak_bound"],
        "general_bound": marg["general_bound"],
        "weak_condition": marg["weak_condition"],
        "within_record_bound": abs(diff) <= rec + 1e-12,
        "non_physical": {"raw": abs(raw[0]) > 1, "qspam_a": abs(va[0]) > 1, "standard_b": abs(vb[0]) > 1},
    }
