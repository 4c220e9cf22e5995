"""Recover SPAM parameters and their covariance from measured probabilities.

Three model variants are fitted by weighted least squares with weights equal
to the reciprocal observation variances:

* ``sqspam``: five experiments, diagonal Kraus operators;
* ``qspam``: eight experiments, general Kraus operators (adds ``epsilon``);
* ``faulty``: six experiments with faulty X, H and SX preparations.

For ``qspam`` the transverse cross term in the repeated-readout probabilities
depends on ``phi_pp``.  Three treatments are offered (see :func:`solve_qspam`).

The solver is a projected Levenberg-Marquardt iteration started from a
closed-form estimate plus a few grid points inside the feasible set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateSolution, InvalidParams, NoPhysicalSolution, SingularInformation
from .qcore import BlochVector
from .sim import ReadoutHistogram, estimate_conditional, estimate_probability, QSPAM_CIRCUITS
from .spam_model import (
    FAULTY_GATE_LABELS,
    P_XP_ZM,
    P_YP_ZM,
    P_ZM_ZP,
    P_ZM_ZP_ZP_0,
    P_ZM_ZP_ZP_PI,
    P_ZP_ZM,
    P_ZP_ZP_ZP_0,
    P_ZP_ZP_ZP_PI,
    QSPAM_LABELS,
    SQSPAM_LABELS,
    GatePrimeParams,
    SpamParams,
    repeat_plus_gradient,
)

Z95 = 1.959963984540054

# singular values below this fraction of the largest count as rank loss
_RANK_RTOL = 1e-12


@dataclass(frozen=True)
class ProbabilityObservation:
    label: str
    p: float
    variance: float
    nu: int = 0

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise InvalidParams(f"probability {self.p} outside [0, 1]")
        if not self.variance > 0:
            raise InvalidParams("observation variance must be positive")


def exact_observations(probs: Mapping[str, float], nu: int = 1 << 14) -> list[ProbabilityObservation]:
    """Observations with binomial variances for exactly known probabilities."""
    out = []
    for label, p in probs.items():
        p = min(max(float(p), 0.0), 1.0)
        out.append(ProbabilityObservation(label, p, max(p * (1 - p) / nu, 1 / (4 * nu * nu)), nu))
    return out


_EVENT_ONE = {P_ZP_ZM: "1", P_ZM_ZP: "0", P_XP_ZM: "1", P_YP_ZM: "1"}


def observations_from_histograms(
    hists: Mapping[str, ReadoutHistogram], qubit: int = 0, labels: Sequence[str] | None = None
) -> list[ProbabilityObservation]:
    """Per-qubit observations from the joint circuit histograms."""
    out = []
    for label in labels or [l for l in QSPAM_LABELS if l in hists]:
        h = hists[label]
        if QSPAM_CIRCUITS[label].n_measurements == 1:
            target = _EVENT_ONE[label]
            p, var = estimate_probability(h, lambda s, q=qubit, t=target: s[q] == t)
            nu = h.nu
        else:
            i = 2 * qubit
            given = lambda s, i=i: s[i] == "0"  # noqa: E731
            nu = sum(v for k, v in h.counts.items() if given(k))
            if nu == 0:
                # never conditioned on: keep the label but give it no weight
                out.append(ProbabilityObservation(label, 0.5, math.inf, 0))
                continue
            p, var = estimate_conditional(h, lambda s, i=i: s[i + 1] == "0", given)
        out.append(ProbabilityObservation(label, p, var, nu))
    return out


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True, eq=False)
class EstimateResult:
    params: SpamParams
    names: tuple[str, ...]
    values: np.ndarray
    covariance: np.ndarray | None
    diagnostics: dict = field(default_factory=dict)
    flags: tuple[str, ...] = ()
    gate_prime: GatePrimeParams | None = None

    @property
    def stderr(self) -> dict[str, float] | None:
        if self.covariance is None:
            return None
        return {n: math.sqrt(max(self.covariance[i, i], 0.0)) for i, n in enumerate(self.names)}

    @property
    def ci95(self) -> dict[str, float | None]:
        se = self.stderr
        return {n: (None if se is None else Z95 * se[n]) for n in self.names}

    def value(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def to_json(self) -> dict:
        out = {
            "params": self.params.to_json(),
            "free": list(self.names),
            "estimates": {n: float(v) for n, v in zip(self.names, self.values)},
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "ci95": self.ci95,
            "diagnostics": self.diagnostics,
            "flags": list(self.flags),
        }
        if self.gate_prime is not None:
            a = self.gate_prime.alpha_sp_prime
            out["gate_prime"] = {"alpha_sp_prime_x": a.x, "alpha_sp_prime_y": a.y, "alpha_sp_prime_z": a.z}
        return out


# ---------------------------------------------------------------------------
# feasible-set projections


def project_fidelity_asymmetry(am: float, dl: float) -> tuple[float, float]:
    """Euclidean projection onto {0 <= alpha_m <= 1, |delta| <= 1 - alpha_m}."""
    if am >= 0 and abs(dl) <= 1 - am:
        return am, dl
    verts = ((0.0, -1.0), (0.0, 1.0), (1.0, 0.0))
    best, best_d = None, math.inf
    for i in range(3):
        (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % 3]
        ex, ey = x1 - x0, y1 - y0
        t = min(max(((am - x0) * ex + (dl - y0) * ey) / (ex * ex + ey * ey), 0.0), 1.0)
        px, py = x0 + t * ex, y0 + t * ey
        d = (px - am) ** 2 + (py - dl) ** 2
        if d < best_d:
            best, best_d = (px, py), d
    return best


def project_half_ball(x: float, y: float, z: float) -> tuple[float, float, float]:
    """Euclidean projection onto the unit half ball with z >= 0."""
    z = max(z, 0.0)
    n = math.sqrt(x * x + y * y + z * z)
    if n > 1:
        x, y, z = x / n, y / n, z / n
    return x, y, z


# ---------------------------------------------------------------------------
# model variants


def _single(am, dl, comp, sign_delta):
    """1/2 (1 - am*comp - sign_delta*delta) and its gradient wrt (am, dl, comp)."""
    return 0.5 * (1 - am * comp - sign_delta * dl), (-0.5 * comp, -0.5 * sign_delta, -0.5 * am)


class _Model:
    names: tuple[str, ...]
    labels: tuple[str, ...]

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def project(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def weights(self, obs: Sequence[ProbabilityObservation]) -> np.ndarray:
        return np.array([1.0 / o.variance for o in obs])

    def constraints(self, x: np.ndarray) -> list[tuple[float, np.ndarray]]:
        """Inequalities ``g(x) <= 0`` as (value, outward normal) pairs."""
        raise NotImplementedError


def _fidelity_constraints(x, k: int, i_am: int = 0, i_dl: int = 1) -> list:
    out = []
    for g, ca, cd in ((-x[i_am], -1.0, 0.0), (x[i_am] + x[i_dl] - 1, 1.0, 1.0), (x[i_am] - x[i_dl] - 1, 1.0, -1.0)):
        n = np.zeros(k)
        n[i_am], n[i_dl] = ca, cd
        out.append((g, n))
    return out


def _half_ball_constraints(x, k: int, i0: int) -> list:
    v = x[i0 : i0 + 3]
    nz = np.zeros(k)
    nz[i0 + 2] = -1.0
    nb = np.zeros(k)
    nb[i0 : i0 + 3] = v if np.any(v) else (0.0, 0.0, 1.0)
    return [(-v[2], nz), (float(v @ v) - 1, nb)]


def _lower_bound(x, k: int, i: int, lo: float = 0.0) -> tuple:
    n = np.zeros(k)
    n[i] = -1.0
    return (lo - x[i], n)


class _SpamModel(_Model):
    """alpha_m, delta, alpha_sp (x, y, z) [, epsilon [, phi_pp]]."""

    def __init__(self, labels, phase_mode: str = "average", phi_pp: float = 0.0):
        self.labels = tuple(labels)
        self.phase_mode = phase_mode
        self.phi_pp = phi_pp
        names = ["alpha_m", "delta", "alpha_sp_x", "alpha_sp_y", "alpha_sp_z"]
        self.has_eps = phase_mode != "none"
        if self.has_eps:
            names.append("epsilon")
        if phase_mode == "free":
            names.append("phi_pp")
        self.names = tuple(names)

    def _unpack(self, x):
        am, dl, ax, ay, az = x[:5]
        eps = x[5] if self.has_eps else 0.0
        phi = x[6] if self.phase_mode == "free" else self.phi_pp
        return am, dl, ax, ay, az, eps, phi

    def predict(self, x):
        am, dl, ax, ay, az, eps, phi = self._unpack(x)
        k = len(self.names)
        pred = np.empty(len(self.labels))
        jac = np.zeros((len(self.labels), k))
        # repeated-readout states: (label, sign of x, sign of y, sign of z)
        rep = {
            P_ZP_ZP_ZP_0: (1, 1, 1),
            P_ZP_ZP_ZP_PI: (-1, -1, 1),
            P_ZM_ZP_ZP_0: (1, -1, -1),
            P_ZM_ZP_ZP_PI: (-1, 1, -1),
        }
        transverse = self.phase_mode in ("fixed", "free")
        for i, label in enumerate(self.labels):
            if label in rep:
                sx, sy, sz = rep[label]
                bx, by = (sx * ax, sy * ay) if transverse else (0.0, 0.0)
                val, g = repeat_plus_gradient(am, dl, bx, by, sz * az, eps, phi)
                pred[i] = val
                jac[i, 0], jac[i, 1] = g[0], g[1]
                if transverse:
                    jac[i, 2], jac[i, 3] = sx * g[2], sy * g[3]
                jac[i, 4] = sz * g[4]
                if self.has_eps:
                    jac[i, 5] = g[5]
                if self.phase_mode == "free":
                    jac[i, 6] = g[6]
                continue
            if label == P_ZP_ZM:
                val, (ga, gd, gc), col = *_single(am, dl, az, 1), 4
            elif label == P_ZM_ZP:
                val, (ga, gd, gc), col = *_single(am, dl, az, -1), 4
            elif label == P_XP_ZM:
                val, (ga, gd, gc), col = *_single(am, dl, ax, 1), 2
            elif label == P_YP_ZM:
                val, (ga, gd, gc), col = *_single(am, dl, ay, 1), 3
            else:
                raise InvalidParams(f"label {label!r} is not part of this model")
            pred[i] = val
            jac[i, 0], jac[i, 1], jac[i, col] = ga, gd, gc
        return pred, jac

    def weights(self, obs):
        w = super().weights(obs)
        if self.phase_mode == "average":
            # each theta pair is predicted by its average, so both members share
            # the pooled weight of that average
            idx = {o.label: i for i, o in enumerate(obs)}
            for a, b in ((P_ZP_ZP_ZP_0, P_ZP_ZP_ZP_PI), (P_ZM_ZP_ZP_0, P_ZM_ZP_ZP_PI)):
                if a in idx and b in idx:
                    pooled = 2.0 / (obs[idx[a]].variance + obs[idx[b]].variance)
                    w[idx[a]] = w[idx[b]] = pooled
        return w

    def project(self, x):
        x = np.array(x, dtype=float)
        x[0], x[1] = project_fidelity_asymmetry(x[0], x[1])
        x[2], x[3], x[4] = project_half_ball(x[2], x[3], x[4])
        if self.has_eps:
            x[5] = max(x[5], 0.0)
        if self.phase_mode == "free":
            x[6] = math.remainder(x[6], 2 * math.pi)
        return x

    def constraints(self, x):
        k = len(x)
        out = _fidelity_constraints(x, k) + _half_ball_constraints(x, k, 2)
        if self.has_eps:
            out.append(_lower_bound(x, k, 5))
        return out

    def to_params(self, x) -> SpamParams:
        am, dl, ax, ay, az, eps, phi = self._unpack(x)
        if self.phase_mode == "free":
            phi = math.remainder(phi, 2 * math.pi)
        return SpamParams(float(am), float(dl), BlochVector(float(ax), float(ay), float(az)), float(eps), float(phi))

    def grid(self) -> list[np.ndarray]:
        axes = [(0.5, 0.75, 0.95), (-0.1, 0.0, 0.1), (-0.1, 0.0, 0.1), (-0.1, 0.0, 0.1), (0.6, 0.8, 0.95)]
        if self.has_eps:
            axes.append((0.0, 0.01, 0.05))
        if self.phase_mode == "free":
            axes.append((0.0, 2 * math.pi / 3, 4 * math.pi / 3))
        return _grid_points(axes)


class _FaultyModel(_Model):
    names = ("alpha_m", "delta", "alpha_sp_z", "alpha_sp_prime_x", "alpha_sp_prime_y", "alpha_sp_prime_z")
    labels = FAULTY_GATE_LABELS

    def predict(self, x):
        am, dl, az, px, py, pz = x
        pred = np.empty(6)
        jac = np.zeros((6, 6))
        for i, (comp, col, sd) in enumerate(((az, 2, 1), (pz, 5, -1), (px, 3, 1), (py, 4, 1))):
            val, (ga, gd, gc) = _single(am, dl, comp, sd)
            pred[i] = val
            jac[i, 0], jac[i, 1], jac[i, col] = ga, gd, gc
        for i, (comp, col, sz) in ((4, (az, 2, 1)), (5, (pz, 5, -1))):
            val, g = repeat_plus_gradient(am, dl, 0.0, 0.0, sz * comp)
            pred[i] = val
            jac[i, 0], jac[i, 1], jac[i, col] = g[0], g[1], sz * g[4]
        return pred, jac

    def project(self, x):
        x = np.array(x, dtype=float)
        x[0], x[1] = project_fidelity_asymmetry(x[0], x[1])
        x[2] = min(max(x[2], 0.0), 1.0)
        x[3], x[4], x[5] = project_half_ball(x[3], x[4], x[5])
        return x

    def constraints(self, x):
        n_hi = np.zeros(6)
        n_hi[2] = 1.0
        return _fidelity_constraints(x, 6) + [_lower_bound(x, 6, 2), (x[2] - 1, n_hi)] + _half_ball_constraints(x, 6, 3)

    def grid(self):
        axes = [(0.5, 0.75, 0.95), (-0.1, 0.0, 0.1), (0.6, 0.8, 0.95), (-0.1, 0.0, 0.1), (-0.1, 0.0, 0.1), (0.6, 0.8, 0.95)]
        return _grid_points(axes)


def _grid_points(axes, count: int = 7) -> list[np.ndarray]:
    """``count`` evenly indexed points of the full product grid."""
    total = math.prod(len(a) for a in axes)
    out = []
    for j in range(count):
        idx = round(j * (total - 1) / max(count - 1, 1))
        pt = []
        for a in reversed(axes):
            idx, r = divmod(idx, len(a))
            pt.append(a[r])
        out.append(np.array(pt[::-1]))
    return out


# ---------------------------------------------------------------------------
# projected Levenberg-Marquardt


@dataclass
class _Fit:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool


def _null_space(normals: list[np.ndarray], k: int) -> np.ndarray:
    if not normals:
        return np.eye(k)
    a = np.stack(normals)
    _, s, vt = np.linalg.svd(a)
    rank = int(np.sum(s > 1e-12 * s[0]))
    return vt[rank:].T


def _damped_step(jtj, grad, damping, mu, z) -> np.ndarray:
    h = z.T @ (jtj + mu * damping) @ z
    return z @ np.linalg.solve(h, -(z.T @ grad))


def _lm(model: _Model, p_obs: np.ndarray, w: np.ndarray, x0: np.ndarray, max_iter: int = 500) -> _Fit:
    """Projected Levenberg-Marquardt with an active set of binding constraints.

    A constraint that is active at the current point and that the trial step
    would cross is frozen: the step is recomputed in the null space of the
    frozen constraint normals.  The result is then projected to absorb the
    curvature of the Bloch-ball boundary.
    """
    sw = np.sqrt(w)
    k = len(x0)
    x = model.project(x0)
    pred, jac = model.predict(x)
    r = sw * (pred - p_obs)
    cost = float(r @ r)
    lam = None
    for it in range(1, max_iter + 1):
        jw = sw[:, None] * jac
        jtj = jw.T @ jw
        grad = jw.T @ r
        scale = np.maximum(np.diag(jtj), 1e-12 * max(float(np.max(np.diag(jtj))), 1e-300))
        if lam is None:
            lam = 1e-3 * float(np.max(scale))
        active = [n for g, n in model.constraints(x) if g > -1e-12]
        step_found = None
        # Marquardt scaling first; identity damping as a fallback approaches
        # projected gradient descent, which always descends for small steps
        for damping in (np.diag(scale), np.eye(k) * float(np.max(scale))):
            mu = lam
            while mu < 1e16 * float(np.max(scale)):
                frozen: list[np.ndarray] = []
                try:
                    for _ in range(len(active) + 1):
                        z = _null_space(frozen, k)
                        if z.shape[1] == 0:
                            step = np.zeros(k)
                            break
                        step = _damped_step(jtj, grad, damping, mu, z)
                        crossing = [n for n in active if n @ step > 0 and not any(n is f for f in frozen)]
                        if not crossing:
                            break
                        frozen.extend(crossing)
                except np.linalg.LinAlgError:
                    mu *= 2
                    continue
                x_new = model.project(x + step)
                pred_new, jac_new = model.predict(x_new)
                r_new = sw * (pred_new - p_obs)
                cost_new = float(r_new @ r_new)
                if cost_new < cost or (cost_new == cost and np.array_equal(x_new, x)):
                    step_found = mu
                    break
                mu *= 2
            if step_found is not None:
                break
        if step_found is None:
            return _Fit(x, cost, it, True)
        dx = float(np.linalg.norm(x_new - x))
        dcost = cost - cost_new
        x, pred, jac, r, cost = x_new, pred_new, jac_new, r_new, cost_new
        lam = step_found / 3
        if dx < 1e-10 * (1 + float(np.linalg.norm(x))) or dcost < 1e-12 * max(1.0, cost):
            return _Fit(x, cost, it, True)
    return _Fit(x, cost, max_iter, False)


def numeric_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
    return np.stack(cols, axis=1)


def covariance_from_jacobian(jac: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """(J^T W J)^-1 for a model Jacobian and diagonal weights."""
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    w = np.asarray(weights, dtype=float)
    if w.ndim == 2:
        w = np.diag(w)
    jw = np.sqrt(w)[:, None] * jac
    s = np.linalg.svd(jw, compute_uv=False)
    if s.size < jac.shape[1] or s[-1] <= _RANK_RTOL * s[0]:
        raise SingularInformation("information matrix is rank deficient")
    info = jw.T @ jw
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# closed forms


def _obs_map(obs: Sequence[ProbabilityObservation], labels: Sequence[str]) -> dict[str, ProbabilityObservation]:
    m = {o.label: o for o in obs}
    missing = [l for l in labels if l not in m]
    if missing:
        raise InvalidParams(f"missing observations: {missing}")
    return m


def _clip_params(am, dl, ax, ay, az, eps=0.0) -> tuple[SpamParams, list[str]]:
    flags = []
    am2, dl2 = project_fidelity_asymmetry(am, dl)
    if am2 > 1:
        am2 = 1.0
    if (am2, dl2) != (am, dl):
        flags.append("clipped_fidelity_asymmetry")
    b = project_half_ball(ax, ay, az)
    if b != (ax, ay, az):
        flags.append("clipped_alpha_sp")
    if eps < 0:
        flags.append("clipped_epsilon")
    return SpamParams(am2, dl2, BlochVector(*b), max(eps, 0.0)), flags


def _sqspam_closed(m) -> tuple[float, float, float, float, float]:
    p1, p2 = m[P_ZP_ZM].p, m[P_ZM_ZP].p
    dl = p2 - p1
    mm = 1 - p1 - p2
    rad = 2 * m[P_ZP_ZP_ZP_0].p * (1 + mm + dl) - 2 * mm * (1 + dl) - (1 + dl) ** 2
    if rad < 0:
        raise DegenerateSolution(f"negative radicand {rad:.3g}: data inconsistent with the model")
    am = math.sqrt(rad)
    if am < 1e-12:
        raise DegenerateSolution("readout fidelity estimate is zero")
    return am, dl, (1 - 2 * m[P_XP_ZM].p - dl) / am, (1 - 2 * m[P_YP_ZM].p - dl) / am, mm / am


def sqspam_closed_form_unclipped(obs: Sequence[ProbabilityObservation]) -> dict[str, float]:
    """Direct solution of the five-experiment system without projection.

    Keeps the sign of ``alpha_sp_z``, which the bounded solvers fold into
    the upper half ball.
    """
    am, dl, ax, ay, az = _sqspam_closed(_obs_map(obs, SQSPAM_LABELS))
    return {"alpha_m": am, "delta": dl, "alpha_sp_x": ax, "alpha_sp_y": ay, "alpha_sp_z": az}


def solve_sqspam_closed_form(obs: Sequence[ProbabilityObservation]) -> SpamParams:
    """Direct solution of the five-experiment system, clipped into bounds."""
    am, dl, ax, ay, az = _sqspam_closed(_obs_map(obs, SQSPAM_LABELS))
    return _clip_params(am, dl, ax, ay, az)[0]


def solve_qspam_closed_form(obs: Sequence[ProbabilityObservation]) -> SpamParams:
    """Direct solution of the eight-experiment system using theta-pair sums."""
    m = _obs_map(obs, QSPAM_LABELS)
    p1, p2 = m[P_ZP_ZM].p, m[P_ZM_ZP].p
    dl = p2 - p1
    d = 1 + dl
    mm = 1 - p1 - p2
    s_plus = m[P_ZP_ZP_ZP_0].p + m[P_ZP_ZP_ZP_PI].p
    s_minus = m[P_ZM_ZP_ZP_0].p + m[P_ZM_ZP_ZP_PI].p
    den = s_plus * (d + mm) - s_minus * (d - mm)
    if den <= 0:
        raise DegenerateSolution("theta-pair sums do not determine epsilon")
    one_eps = 4 * mm * d / den
    eps = one_eps - 1
    if abs(1 - eps) < 1e-12:
        raise DegenerateSolution("epsilon estimate reaches 1")
    rad = (s_plus * (d + mm) * one_eps - 2 * mm * d - d * d * one_eps) / (1 - eps)
    if rad < 0:
        raise DegenerateSolution(f"negative radicand {rad:.3g}: data inconsistent with the model")
    am = math.sqrt(rad)
    if am < 1e-12:
        raise DegenerateSolution("readout fidelity estimate is zero")
    return _clip_params(am, dl, (1 - 2 * m[P_XP_ZM].p - dl) / am, (1 - 2 * m[P_YP_ZM].p - dl) / am, mm / am, eps)[0]


def _faulty_closed(m) -> np.ndarray:
    p1, p2 = m[P_ZP_ZM].p, m[P_ZM_ZP].p
    q0, q1 = m[P_ZP_ZP_ZP_0].p, m[P_ZM_ZP_ZP_0].p
    s = 1 - p1 - p2
    if abs(s) < 1e-12:
        raise DegenerateSolution("single-readout probabilities carry no fidelity information")
    d = (q0 * (1 - p1) - q1 * p2) / s
    dl = d - 1
    u = 1 - 2 * p1 - dl
    v = 1 - 2 * p2 + dl
    rad = 4 * q0 * (1 - p1) - 2 * u * d - d * d
    if rad <= 0:
        raise DegenerateSolution(f"non-positive radicand {rad:.3g}")
    am = math.sqrt(rad)
    return np.array([am, dl, u / am, (1 - 2 * m[P_XP_ZM].p - dl) / am, (1 - 2 * m[P_YP_ZM].p - dl) / am, v / am])


# ---------------------------------------------------------------------------
# weighted least squares drivers


def _fit(
    model: _Model,
    obs: Sequence[ProbabilityObservation],
    warm: np.ndarray | None,
    n_starts: int,
    max_iter: int,
    numeric: bool,
):
    m = _obs_map(obs, model.labels)
    ordered = [m[l] for l in model.labels]
    p_obs = np.array([o.p for o in ordered])
    w = model.weights(ordered)
    starts = ([warm] if warm is not None else []) + model.grid()
    starts = starts[: max(n_starts, 1)]
    fits = [_lm(model, p_obs, w, s, max_iter) for s in starts]
    good = [f for f in fits if f.converged and np.all(np.isfinite(f.x))]
    if not good:
        raise NoPhysicalSolution("no start converged to an in-bounds solution")
    best_cost = min(f.cost for f in good)
    names = model.names
    ie = names.index("epsilon") if "epsilon" in names else None
    iz = names.index("alpha_sp_z")

    def key(f):
        return (f.x[ie] if ie is not None else 0.0, -f.x[iz])

    tied = [f for f in good if f.cost <= best_cost + 1e-10]
    best = min(tied, key=key)
    spread = max(float(np.max(np.abs(f.x - best.x))) for f in tied)

    pred, jac = model.predict(best.x)
    if numeric:
        jac = numeric_jacobian(lambda x: model.predict(x)[0], best.x)
    flags = []
    try:
        cov = covariance_from_jacobian(jac, w)
    except SingularInformation:
        cov = None
        flags.append("covariance_unavailable")
    diagnostics = {
        "iterations": best.iterations,
        "residual": best.cost,
        "converged": best.converged,
        "starts": len(starts),
        "starts_converged": len(good),
        "starts_at_optimum": len(tied),
        "optimum_spread": spread,
    }
    return best.x, cov, diagnostics, flags


def _bound_flags(p: SpamParams) -> list[str]:
    tol = 1e-9
    flags = []
    if p.alpha_m >= 1 - tol or p.alpha_m <= tol:
        flags.append("alpha_m_at_bound")
    if abs(p.delta) >= 1 - p.alpha_m - tol:
        flags.append("delta_at_bound")
    if p.alpha_sp.z <= tol:
        flags.append("alpha_sp_z_at_bound")
    if p.alpha_sp.norm >= 1 - tol:
        flags.append("alpha_sp_norm_at_bound")
    if p.epsilon <= tol and p.epsilon >= 0:
        flags.append("epsilon_at_bound")
    return flags


def solve_sqspam(
    obs: Sequence[ProbabilityObservation], n_starts: int = 8, max_iter: int = 500, numeric_jacobian: bool = False
) -> EstimateResult:
    """Weighted fit of the five-experiment system with covariance."""
    model = _SpamModel(SQSPAM_LABELS, "none")
    warm = None
    flags = []
    try:
        am, dl, ax, ay, az = _sqspam_closed(_obs_map(obs, SQSPAM_LABELS))
        warm = np.array([am, dl, ax, ay, az])
    except DegenerateSolution:
        flags.append("closed_form_degenerate")
    x, cov, diag, f2 = _fit(model, obs, warm, n_starts, max_iter, numeric_jacobian)
    p = model.to_params(x)
    flags += f2 + [f for f in _bound_flags(p) if f != "epsilon_at_bound"]
    return EstimateResult(p, model.names, x, cov, diag, tuple(flags))


def solve_qspam(
    obs: Sequence[ProbabilityObservation],
    estimate_phi_pp: bool = False,
    phi_pp: float | None = None,
    n_starts: int = 8,
    max_iter: int = 500,
    numeric_jacobian: bool = False,
) -> EstimateResult:
    """Weighted fit of the eight-experiment system.

    * default: each theta pair is fitted by its phase-independent average;
      ``phi_pp`` is not identified and reported as 0.
    * ``phi_pp`` given: the transverse cross term is modeled with that phase.
    * ``estimate_phi_pp=True``: the phase is a free parameter.
    """
    if estimate_phi_pp:
        model = _SpamModel(QSPAM_LABELS, "free")
    elif phi_pp is not None:
        model = _SpamModel(QSPAM_LABELS, "fixed", float(phi_pp))
    else:
        model = _SpamModel(QSPAM_LABELS, "average")
    flags = []
    warm = None
    try:
        p0 = solve_qspam_closed_form(obs)
        warm = np.array([p0.alpha_m, p0.delta, *p0.alpha_sp.as_array(), p0.epsilon])
    except DegenerateSolution:
        try:
            p0 = solve_sqspam_closed_form(obs)
            warm = np.array([p0.alpha_m, p0.delta, *p0.alpha_sp.as_array(), 0.0])
        except DegenerateSolution:
            flags.append("closed_form_degenerate")
    if warm is not None and model.phase_mode == "free":
        warm = np.append(warm, 0.0)
    x, cov, diag, f2 = _fit(model, obs, warm, n_starts, max_iter, numeric_jacobian)
    p = model.to_params(x)
    flags += f2 + _bound_flags(p)
    return EstimateResult(p, model.names, x, cov, diag, tuple(flags))


def solve_faulty_gate_sqspam(
    obs: Sequence[ProbabilityObservation], n_starts: int = 8, max_iter: int = 500, numeric_jacobian: bool = False
) -> EstimateResult:
    """Weighted fit of the six-experiment system with faulty basis-change gates.

    Only ``alpha_sp_z`` of the fiducial state is identified; its transverse
    components are reported as zero and the gate-affected components are
    returned in ``gate_prime``.
    """
    model = _FaultyModel()
    m = _obs_map(obs, model.labels)
    flags = []
    try:
        warm = _faulty_closed(m)
    except DegenerateSolution:
        warm = None
        flags.append("closed_form_degenerate")
    x, cov, diag, f2 = _fit(model, obs, warm, n_starts, max_iter, numeric_jacobian)
    am, dl, az, px, py, pz = (float(v) for v in x)
    p = SpamParams(am, dl, BlochVector(0.0, 0.0, az))
    flags += f2 + [f for f in _bound_flags(p) if f != "epsilon_at_bound"]
    return EstimateResult(p, model.names, x, cov, diag, tuple(flags), GatePrimeParams(BlochVector(px, py, pz)))


def threshold_transverse(result: EstimateResult, factor: float = 2.0) -> EstimateResult:
    """Zero transverse fiducial components not distinguishable from zero.

    A component is dropped when its magnitude is at most ``factor`` standard
    errors.  Requires a covariance.
    """
    se = result.stderr
    if se is None:
        return replace(result, flags=result.flags + ("threshold_skipped_no_covariance",))
    a = result.params.alpha_sp
    comps = {"alpha_sp_x": a.x, "alpha_sp_y": a.y}
    values = result.values.copy()
    flags = list(result.flags)
    for name in ("alpha_sp_x", "alpha_sp_y"):
        if name in se and abs(comps[name]) <= factor * se[name]:
            comps[name] = 0.0
            values[result.names.index(name)] = 0.0
            flags.append(f"{name}_thresholded")
    p = result.params.with_alpha_sp((comps["alpha_sp_x"], comps["alpha_sp_y"], a.z))
    return replace(result, params=p, values=values, flags=tuple(flags))
