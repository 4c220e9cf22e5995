"""Shot-level simulation of the characterization circuits and a noisy GHZ device.

Random numbers come from Philox generators keyed by
``(seed, tag, circuit, qubit, block)`` where shots are split into fixed
blocks of ``SHOT_BLOCK``.  Every block draws from its own stream, so results
do not depend on how work is spread over threads.

Bitstrings put qubit 0 leftmost.  Circuits with two readouts contribute two
characters per qubit (first readout, then second).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import TOL
from .errors import ImpossibleOutcome, InvalidParams, UnsupportedSize
from .qcore import (
    CNOT,
    DensityMatrix,
    Gate,
    H,
    Rx,
    Rz,
    amplitude_damping_kraus,
    apply_kraus,
    apply_unitary,
    density_from_bloch,
    depolarizing_kraus,
    product_state,
)
from .spam_model import (
    P_XP_ZM,
    P_YP_ZM,
    P_ZM_ZP,
    P_ZM_ZP_ZP_0,
    P_ZM_ZP_ZP_PI,
    P_ZP_ZM,
    P_ZP_ZP_ZP_0,
    P_ZP_ZP_ZP_PI,
    QSPAM_LABELS,
    SpamParams,
    build_measurement_model,
    povm_diagonal,
)

SHOT_BLOCK = 1 << 16

# stream tags
_TAG_QSPAM = 1
_TAG_GHZ = 2
_TAG_INJECTION = 3


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *keys])))


def derive_seed(seed: int, *keys: int) -> int:
    """64-bit child seed for a sub-experiment identified by ``keys``."""
    state = np.random.SeedSequence([int(seed) & (2**64 - 1), *keys]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


# ---------------------------------------------------------------------------
# histograms


@dataclass(frozen=True)
class ReadoutHistogram:
    counts: Mapping[str, int]
    nu: int

    def __post_init__(self):
        clean = {}
        width = None
        for k, v in self.counts.items():
            v = int(v)
            if v < 0:
                raise ValueError(f"negative count for {k!r}")
            if set(k) - {"0", "1"} or not k:
                raise ValueError(f"bad bitstring {k!r}")
            if width is None:
                width = len(k)
            elif len(k) != width:
                raise ValueError("bitstrings have mixed lengths")
            if v:
                clean[k] = v
        if int(self.nu) < 1:
            raise ValueError("histogram needs at least one shot")
        if sum(clean.values()) != int(self.nu):
            raise ValueError(f"counts sum to {sum(clean.values())}, expected nu={self.nu}")
        object.__setattr__(self, "counts", dict(sorted(clean.items())))
        object.__setattr__(self, "nu", int(self.nu))

    @property
    def width(self) -> int:
        return len(next(iter(self.counts)))

    def frequencies(self) -> dict[str, float]:
        return {k: v / self.nu for k, v in self.counts.items()}

    def merge(self, other: "ReadoutHistogram") -> "ReadoutHistogram":
        if other.width != self.width:
            raise ValueError("cannot merge histograms of different widths")
        out = dict(self.counts)
        for k, v in other.counts.items():
            out[k] = out.get(k, 0) + v
        return ReadoutHistogram(out, self.nu + other.nu)

    def marginal(self, positions: Sequence[int]) -> "ReadoutHistogram":
        out: dict[str, int] = {}
        for k, v in self.counts.items():
            key = "".join(k[i] for i in positions)
            out[key] = out.get(key, 0) + v
        return ReadoutHistogram(out, self.nu)

    def to_json(self) -> dict:
        return {"nu": self.nu, "counts": dict(self.counts)}

    @classmethod
    def from_json(cls, d: Mapping) -> "ReadoutHistogram":
        return cls({str(k): int(v) for k, v in d["counts"].items()}, int(d["nu"]))

    @classmethod
    def from_codes(cls, codes: np.ndarray, width: int) -> "ReadoutHistogram":
        """Build from integer outcome codes whose binary form is the bitstring."""
        vals, cnt = np.unique(np.asarray(codes, dtype=np.int64), return_counts=True)
        return cls({format(int(v), f"0{width}b"): int(c) for v, c in zip(vals, cnt)}, int(cnt.sum()))


def estimate_probability(h: ReadoutHistogram, predicate: Callable[[str], bool]) -> tuple[float, float]:
    """Frequency of outcomes satisfying ``predicate`` and its binomial variance."""
    hits = sum(v for k, v in h.counts.items() if predicate(k))
    return _binomial(hits, h.nu)


def estimate_conditional(
    h: ReadoutHistogram, event: Callable[[str], bool], given: Callable[[str], bool]
) -> tuple[float, float]:
    """Conditional frequency P(event | given); the variance uses the conditioning count."""
    n = hits = 0
    for k, v in h.counts.items():
        if given(k):
            n += v
            if event(k):
                hits += v
    if n == 0:
        raise ImpossibleOutcome("conditioning event never observed")
    return _binomial(hits, n)


def _binomial(hits: int, n: int) -> tuple[float, float]:
    p = hits / n
    return p, max(p * (1 - p) / n, 1.0 / (4.0 * n * n))


# ---------------------------------------------------------------------------
# characterization circuits


@dataclass(frozen=True)
class CircuitSpec:
    label: str
    prep: str | None = None
    theta: float = 0.0
    n_measurements: int = 1
    injection_phi: float = 0.0

    def __post_init__(self):
        if self.prep not in (None, "X", "H", "SX"):
            raise ValueError(f"unknown preparation gate {self.prep!r}")
        if self.n_measurements not in (1, 2):
            raise ValueError("circuits hold one or two readouts")
        if self.n_measurements == 2 and self.prep not in (None, "X"):
            raise ValueError("repeated readout is only defined for z-basis preparations")

    def with_injection(self, phi: float) -> "CircuitSpec":
        return CircuitSpec(self.label, self.prep, self.theta, self.n_measurements, float(phi))


QSPAM_CIRCUITS: dict[str, CircuitSpec] = {
    P_ZP_ZM: CircuitSpec(P_ZP_ZM),
    P_ZM_ZP: CircuitSpec(P_ZM_ZP, prep="X"),
    P_XP_ZM: CircuitSpec(P_XP_ZM, prep="H"),
    P_YP_ZM: CircuitSpec(P_YP_ZM, prep="SX"),
    P_ZP_ZP_ZP_0: CircuitSpec(P_ZP_ZP_ZP_0, n_measurements=2),
    P_ZP_ZP_ZP_PI: CircuitSpec(P_ZP_ZP_ZP_PI, theta=math.pi, n_measurements=2),
    P_ZM_ZP_ZP_0: CircuitSpec(P_ZM_ZP_ZP_0, prep="X", n_measurements=2),
    P_ZM_ZP_ZP_PI: CircuitSpec(P_ZM_ZP_ZP_PI, prep="X", theta=math.pi, n_measurements=2),
}


def prepared_state(p: SpamParams, spec: CircuitSpec) -> DensityMatrix:
    """State right before the first readout of ``spec``."""
    rho = density_from_bloch(p.alpha_sp)
    if spec.injection_phi:
        rho = apply_unitary(rho, Rx(spec.injection_phi), [0])
    if spec.prep is not None:
        rho = apply_unitary(rho, Gate(spec.prep), [0])
    if spec.theta:
        rho = apply_unitary(rho, Rz(spec.theta), [0])
    return rho


def double_measurement_distribution(p: SpamParams, rho: DensityMatrix, idle_gamma: float = 0.0) -> np.ndarray:
    """Joint probabilities of outcomes 00, 01, 10, 11 for two readouts without reset."""
    model = build_measurement_model(p)
    out = np.zeros(4)
    for first in (0, 1):
        branch = apply_kraus(rho, [model.kraus(first)], 0, selective=True)
        pf = branch.trace.real
        if pf <= 0:
            continue
        if idle_gamma:
            branch = apply_kraus(DensityMatrix.trusted(branch.data / pf), amplitude_damping_kraus(idle_gamma), 0)
            branch = DensityMatrix.trusted(branch.data * pf)
        p0 = np.real(np.trace(model.povm_plus @ branch.data))
        out[2 * first] = p0
        out[2 * first + 1] = pf - p0
    return np.clip(out, 0.0, None) / out.sum()


def circuit_distribution(p: SpamParams, spec: CircuitSpec, idle_gamma: float = 0.0) -> np.ndarray:
    """Outcome distribution of one circuit, indexed by outcome code."""
    rho = prepared_state(p, spec)
    if spec.n_measurements == 2:
        return double_measurement_distribution(p, rho, idle_gamma)
    model = build_measurement_model(p)
    p0 = float(np.clip(np.real(np.trace(model.povm_plus @ rho.data)), 0.0, 1.0))
    return np.array([p0, 1.0 - p0])


def sample_double_measurement(
    p: SpamParams, rho0: DensityMatrix, theta: float, rng: np.random.Generator, idle_gamma: float = 0.0
) -> tuple[int, int]:
    """One shot of two consecutive readouts after ``Rz(theta)``."""
    model = build_measurement_model(p)
    rho = apply_unitary(rho0, Rz(theta), [0]) if theta else rho0
    p0 = np.real(np.trace(model.povm_plus @ rho.data))
    first = 0 if rng.random() < p0 else 1
    branch = apply_kraus(rho, [model.kraus(first)], 0, selective=True)
    post = DensityMatrix.trusted(branch.data / branch.trace.real)
    if idle_gamma:
        post = apply_kraus(post, amplitude_damping_kraus(idle_gamma), 0)
    q0 = np.real(np.trace(model.povm_plus @ post.data))
    second = 0 if rng.random() < q0 else 1
    return first, second


def _sample_codes(dist: np.ndarray, nu: int, seed: int, keys: tuple[int, ...]) -> np.ndarray:
    """Per-shot outcome codes drawn block by block from ``dist``."""
    cdf = np.cumsum(dist)
    cdf[-1] = 1.0
    out = np.empty(nu, dtype=np.int64)
    for b, start in enumerate(range(0, nu, SHOT_BLOCK)):
        n = min(SHOT_BLOCK, nu - start)
        u = rng_stream(seed, *keys, b).random(n)
        out[start : start + n] = np.searchsorted(cdf, u, side="right")
    return out


def run_qspam_circuits(
    params: Sequence[SpamParams] | SpamParams,
    phi: float | Sequence[float] = 0.0,
    nu: int = 1 << 14,
    seed: int = 0,
    labels: Sequence[str] = QSPAM_LABELS,
    idle_gamma: float = 0.0,
    workers: int = 1,
) -> dict[str, ReadoutHistogram]:
    """Simulate the characterization circuits on all qubits in parallel.

    Returns one joint histogram per circuit label.  Each shot measures all
    qubits, so a histogram for N qubits has N or 2N characters per string.
    """
    if isinstance(params, SpamParams):
        params = [params]
    params = list(params)
    n = len(params)
    if nu < 1:
        raise ValueError("nu must be at least 1")
    phis = [float(phi)] * n if np.isscalar(phi) else [float(f) for f in phi]
    if len(phis) != n:
        raise ValueError("need one injection angle per qubit")

    tasks = []
    for ci, label in enumerate(labels):
        spec = QSPAM_CIRCUITS[label]
        for q in range(n):
            tasks.append((ci, label, q, spec.with_injection(phis[q])))

    def work(task):
        ci, label, q, spec = task
        dist = circuit_distribution(params[q], spec, idle_gamma)
        return _sample_codes(dist, nu, seed, (_TAG_QSPAM, QSPAM_LABELS.index(label), q))

    codes = _map(work, tasks, workers)
    out = {}
    for ci, label in enumerate(labels):
        w = QSPAM_CIRCUITS[label].n_measurements
        joint = np.zeros(nu, dtype=np.int64)
        for q in range(n):
            joint = (joint << w) | codes[ci * n + q]
        out[label] = ReadoutHistogram.from_codes(joint, w * n)
    return out


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(t) for t in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# GHZ device


@dataclass(frozen=True)
class NoiseConfig:
    spam: tuple[SpamParams, ...]
    p1: float = 0.0
    p2: float = 0.0
    gamma: float = 0.0
    seed: int = 0
    idle_gamma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "spam", tuple(self.spam))
        for name in ("p1", "p2", "gamma", "idle_gamma"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InvalidParams(f"{name}={v} outside [0, 1]")


def draw_injection_angles(n_qubits: int, sp_error: float, seed: int) -> list[float]:
    """Rx angles that lower a pure fiducial state's z component to ``1 - sp_error``.

    The rotation sign of each qubit is drawn from the seed.
    """
    if not 0 <= sp_error <= 2:
        raise ValueError("sp_error must lie in [0, 2]")
    mag = math.acos(1 - sp_error)
    signs = rng_stream(seed, _TAG_INJECTION, n_qubits).integers(0, 2, size=n_qubits)
    return [float(mag if s else -mag) for s in signs]


def _ghz_state(
    n: int,
    noise: NoiseConfig,
    sp_injection: Sequence[float],
    corrections: Sequence[Sequence[Gate]] | None,
) -> DensityMatrix:
    rho = product_state([density_from_bloch(noise.spam[q].alpha_sp) for q in range(n)])
    dep1 = depolarizing_kraus(noise.p1) if noise.p1 else None
    dep2 = depolarizing_kraus(noise.p2, 2) if noise.p2 else None
    damp = amplitude_damping_kraus(noise.gamma) if noise.gamma else None

    def gate1(state, g, q):
        state = apply_unitary(state, g, [q])
        if dep1 is not None and g.name != "RZ":
            state = apply_kraus(state, dep1, [q])
        return state

    def layer_end(state):
        if damp is not None:
            for q in range(n):
                state = apply_kraus(state, damp, [q])
        return state

    for q, phi in enumerate(sp_injection):
        if phi:
            rho = apply_unitary(rho, Rx(phi), [q])
    if corrections is not None:
        for q, gates in enumerate(corrections):
            for g in gates:
                rho = gate1(rho, g, q)
    rho = layer_end(gate1(rho, H(), 0))
    for q in range(n - 1):
        rho = apply_unitary(rho, CNOT(), [q, q + 1])
        if dep2 is not None:
            rho = apply_kraus(rho, dep2, [q, q + 1])
        rho = layer_end(rho)
    return rho


def readout_distribution(populations: np.ndarray, spam: Sequence[SpamParams]) -> np.ndarray:
    """Apply independent per-qubit readout noise to computational-basis populations."""
    n = len(spam)
    t = np.asarray(populations, dtype=float).reshape((2,) * n)
    for q, p in enumerate(spam):
        a00, a01 = povm_diagonal(p.alpha_m, p.delta)
        conf = np.array([[a00, a01], [1 - a00, 1 - a01]])
        t = np.moveaxis(np.tensordot(conf, t, axes=([1], [q])), 0, q)
    out = np.clip(t.reshape(-1), 0.0, None)
    return out / out.sum()


def ghz_distribution(
    n_qubits: int,
    noise: NoiseConfig,
    sp_injection: Sequence[float] | None = None,
    corrections: Sequence[Sequence[Gate]] | None = None,
) -> np.ndarray:
    """Exact observed-outcome distribution of the noisy GHZ circuit."""
    _check_ghz_size(n_qubits)
    if len(noise.spam) != n_qubits:
        raise InvalidParams("noise config needs one SpamParams per qubit")
    inj = [0.0] * n_qubits if sp_injection is None else [float(x) for x in sp_injection]
    if len(inj) != n_qubits:
        raise InvalidParams("need one injection angle per qubit")
    rho = _ghz_state(n_qubits, noise, inj, corrections)
    return readout_distribution(np.real(np.diag(rho.data)), noise.spam)


def _check_ghz_size(n: int) -> None:
    if n < 2 or n % 2 or n > TOL.max_qubits:
        raise UnsupportedSize(f"GHZ experiments need an even qubit count in [2, {TOL.max_qubits}], got {n}")


def run_ghz(
    n_qubits: int,
    noise: NoiseConfig,
    sp_injection: Sequence[float] | None = None,
    apply_sp_mitigation: bool = False,
    nu: int = 1 << 14,
    corrections: Sequence[Sequence[Gate]] | None = None,
    stream: int = 0,
) -> ReadoutHistogram:
    """Sample the noisy GHZ experiment.

    With ``apply_sp_mitigation`` the per-qubit gate lists in ``corrections``
    run right after state preparation; when none are given they are compiled
    from the true (injected) fiducial Bloch vectors.  ``stream`` separates
    independent runs that share ``noise.seed``.
    """
    _check_ghz_size(n_qubits)
    if nu < 1:
        raise ValueError("nu must be at least 1")
    if apply_sp_mitigation and corrections is None:
        from .mitigation import compile_sp_correction
        from .spam_model import rotated_sp_params

        inj = [0.0] * n_qubits if sp_injection is None else sp_injection
        corrections = [
            compile_sp_correction(rotated_sp_params(noise.spam[q].alpha_sp, inj[q])).gates for q in range(n_qubits)
        ]
    dist = ghz_distribution(n_qubits, noise, sp_injection, corrections if apply_sp_mitigation else None)
    counts = np.zeros(dist.size, dtype=np.int64)
    for b, start in enumerate(range(0, nu, SHOT_BLOCK)):
        m = min(SHOT_BLOCK, nu - start)
        counts += rng_stream(noise.seed, _TAG_GHZ, n_qubits, int(apply_sp_mitigation), stream, b).multinomial(m, dist)
    nz = np.nonzero(counts)[0]
    return ReadoutHistogram({format(int(i), f"0{n_qubits}b"): int(counts[i]) for i in nz}, nu)
