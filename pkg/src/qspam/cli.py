"""Campaign runner: ``qspam characterize|validate-injection|ghz-compare|mitigate``.

Each campaign reads one JSON config and writes ``report.json`` plus CSV
series (header ``x,y,yerr``) into the output directory.  Reports contain no
timestamps, so the same config and seed reproduce them byte for byte for any
``workers`` setting.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, DegenerateSolution, QSpamError
from .estimator import (
    EstimateResult,
    observations_from_histograms,
    solve_qspam,
    solve_sqspam,
    sqspam_closed_form_unclipped,
    threshold_transverse,
)
from .mitigation import (
    MODE_A,
    MODE_B,
    ConfusionSet,
    build_confusion,
    compare_standard_vs_qspam,
    compile_sp_correction,
    mitigate_histogram,
    mitigated_expectation,
    parity_observable,
    sigma_upper_bound,
)
from .qcore import BlochVector
from .sim import (
    NoiseConfig,
    ReadoutHistogram,
    derive_seed,
    draw_injection_angles,
    run_ghz,
    run_qspam_circuits,
)
from .spam_model import QSPAM_LABELS, SQSPAM_LABELS, SpamParams, rotated_sp_params

MODES = ("characterize", "validate-injection", "ghz-compare", "mitigate")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION, EXIT_IO = 0, 2, 3, 4

# sub-seed tags
_TAG_CHAR = 11
_TAG_PHI = 12
_TAG_GHZ_CHAR = 13
_TAG_GHZ_RUN = 14
_TAG_GHZ_INJ = 15


class EstimationFailure(QSpamError):
    """Every qubit of a campaign failed to produce an estimate."""


# ---------------------------------------------------------------------------
# config helpers


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg.setdefault("_base_dir", str(path.parent))
    return cfg


def _req(cfg: dict, key: str) -> Any:
    if key not in cfg:
        raise ConfigError(f"config needs '{key}'")
    return cfg[key]


def _int(cfg: dict, key: str, default: int | None = None, minimum: int = 1) -> int:
    v = cfg.get(key, default)
    if v is None:
        raise ConfigError(f"config needs '{key}'")
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"'{key}' must be an integer >= {minimum}")
    return v


def _float(cfg: dict, key: str, default: float) -> float:
    v = cfg.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"'{key}' must be a number")
    return float(v)


def _params_list(raw: Any, what: str = "qubits") -> list[SpamParams]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"'{what}' must be a non-empty list of parameter objects")
    try:
        return [SpamParams.from_json(d) for d in raw]
    except (QSpamError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad parameter set in '{what}': {exc}") from exc


def _path(cfg: dict, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(cfg.get("_base_dir", ".")) / q


def _read_json(path: Path) -> Any:
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _read_histogram(path: Path) -> ReadoutHistogram:
    d = _read_json(path)
    try:
        return ReadoutHistogram.from_json(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path} is not a histogram: {exc}") from exc


def _seed(cfg: dict) -> int:
    s = cfg.get("seed", 0)
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError("'seed' must be an unsigned 64-bit integer")
    return s


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _manifest(cfg: dict, mode: str) -> dict:
    return {
        "mode": mode,
        "version": __version__,
        "seed": cfg.get("seed", 0),
        "config": {k: v for k, v in cfg.items() if not k.startswith("_") and k != "workers"},
    }


def _estimator_opts(cfg: dict) -> dict:
    est = cfg.get("estimator", {})
    if not isinstance(est, dict):
        raise ConfigError("'estimator' must be an object")
    variant = est.get("variant", "qspam")
    if variant not in ("qspam", "sqspam"):
        raise ConfigError("estimator variant must be 'qspam' or 'sqspam'")
    phi = est.get("phi_pp")
    return {
        "variant": variant,
        "estimate_phi_pp": bool(est.get("estimate_phi_pp", False)),
        "phi_pp": None if phi is None else float(phi),
        "n_starts": int(est.get("n_starts", 8)),
    }


def _solve(obs, opts) -> EstimateResult:
    if opts["variant"] == "sqspam":
        return solve_sqspam(obs, n_starts=opts["n_starts"])
    return solve_qspam(obs, estimate_phi_pp=opts["estimate_phi_pp"], phi_pp=opts["phi_pp"], n_starts=opts["n_starts"])


def _labels(opts) -> tuple[str, ...]:
    return SQSPAM_LABELS if opts["variant"] == "sqspam" else QSPAM_LABELS


def _row(q: int, r: EstimateResult) -> dict:
    d = r.to_json()
    d["qubit"] = q
    d["stderr"] = r.stderr
    return d


def _characterize_qubits(hists, n_qubits: int, opts: dict, workers: int) -> list[tuple[EstimateResult | None, str | None]]:
    labels = _labels(opts)

    def one(q):
        try:
            return _solve(observations_from_histograms(hists, q, labels), opts), None
        except QSpamError as exc:
            return None, f"{type(exc).__name__}: {exc}"

    return _map(one, list(range(n_qubits)), workers)


# ---------------------------------------------------------------------------
# campaigns


def run_characterize(cfg: dict) -> tuple[dict, dict]:
    """Characterize every qubit from simulated or supplied circuit histograms."""
    opts = _estimator_opts(cfg)
    workers = _int(cfg, "workers", 1)
    seed = _seed(cfg)
    labels = _labels(opts)
    if "histograms" in cfg:
        paths = cfg["histograms"]
        if not isinstance(paths, dict):
            raise ConfigError("'histograms' must map circuit labels to files")
        missing = [l for l in labels if l not in paths]
        if missing:
            raise ConfigError(f"missing histograms for {missing}")
        hists = {l: _read_histogram(_path(cfg, paths[l])) for l in labels}
        widths = {l: h.width // (2 if "->zp->" in l else 1) for l, h in hists.items()}
        if len(set(widths.values())) != 1:
            raise ConfigError("histograms disagree on the qubit count")
        n = next(iter(widths.values()))
    else:
        truth = _params_list(_req(cfg, "qubits"))
        nu = _int(cfg, "nu")
        phi = cfg.get("injection_phi", 0.0)
        hists = run_qspam_circuits(
            truth, phi, nu, derive_seed(seed, _TAG_CHAR), labels, _float(cfg, "idle_gamma", 0.0), workers
        )
        n = len(truth)
    results = _characterize_qubits(hists, n, opts, workers)
    rows, series = [], {}
    for q, (r, err) in enumerate(results):
        rows.append({"qubit": q, "error": err} if r is None else _row(q, r))
    if all(r is None for r, _ in results):
        raise EstimationFailure("estimation failed on every qubit")
    names = next(r.names for r, _ in results if r is not None)
    for name in names:
        pts = []
        for q, (r, _) in enumerate(results):
            if r is not None:
                ci = r.ci95[name]
                pts.append((q, r.value(name), math.nan if ci is None else ci))
        series[f"characterize_{name}"] = pts
    report = {"manifest": _manifest(cfg, "characterize"), "qubits": rows}
    return report, series


def _phi_grid(cfg: dict) -> list[float]:
    g = _req(cfg, "phi_grid")
    if isinstance(g, dict):
        num = _int(g, "num")
        return [float(v) for v in np.linspace(float(g.get("start", 0.0)), float(_req(g, "stop")), num)]
    if not isinstance(g, list) or not g:
        raise ConfigError("'phi_grid' must be a non-empty list or {start, stop, num}")
    return [float(v) for v in g]


def _signed(hists, q: int) -> float | None:
    """Unclipped closed-form alpha_sp_z, which shows a flipped fiducial state."""
    try:
        return sqspam_closed_form_unclipped(observations_from_histograms(hists, q, SQSPAM_LABELS))["alpha_sp_z"]
    except (DegenerateSolution, KeyError):
        return None


def injection_summary(points: Sequence[dict]) -> dict:
    """Constancy test for the readout fidelity and cosine fit for alpha_sp_z."""
    ok = [p for p in points if p["alpha_m"] is not None and p["alpha_m_ci"] is not None]
    out: dict[str, Any] = {"points_used": len(ok)}
    if not ok:
        return out
    am = np.array([p["alpha_m"] for p in ok])
    am_ci = np.array([p["alpha_m_ci"] for p in ok])
    mean = float(am.mean())
    mean_ci = float(math.sqrt(float(np.sum((am_ci / 1.959963984540054) ** 2))) / len(ok) * 1.959963984540054)
    dev = np.abs(am - mean)
    out["alpha_m_mean"] = mean
    out["alpha_m_mean_ci"] = mean_ci
    out["alpha_m_in_band"] = int(np.sum(dev <= am_ci + mean_ci))
    out["alpha_m_in_own_ci"] = int(np.sum(dev <= am_ci))
    phi = np.array([p["phi"] for p in ok])
    z = np.array([p["alpha_sp_z"] for p in ok])
    z_ci = np.array([p["alpha_sp_z_ci"] for p in ok])
    design = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    w = 1.0 / np.maximum(z_ci, 1e-300)
    coef, *_ = np.linalg.lstsq(design * w[:, None], z * w, rcond=None)
    resid = z - design @ coef
    out["cosine_fit"] = {"cos": float(coef[0]), "sin": float(coef[1])}
    out["cosine_rms"] = float(math.sqrt(float(np.mean(resid**2))))
    out["alpha_sp_z_mean_ci"] = float(z_ci.mean())
    out["cosine_rms_ratio"] = out["cosine_rms"] / out["alpha_sp_z_mean_ci"]
    return out


def run_validate_injection(cfg: dict) -> tuple[dict, dict]:
    """Characterize one or more qubits across a grid of injected Rx rotations."""
    opts = _estimator_opts({"estimator": {"variant": "sqspam", **cfg.get("estimator", {})}})
    workers = _int(cfg, "workers", 1)
    seed = _seed(cfg)
    truth = _params_list(_req(cfg, "qubits"))
    nu = _int(cfg, "nu")
    grid = _phi_grid(cfg)
    labels = _labels(opts)

    def point(k):
        phi = grid[k]
        hists = run_qspam_circuits(truth, phi, nu, derive_seed(seed, _TAG_PHI, k), labels)
        fits = _characterize_qubits(hists, len(truth), opts, 1)
        return [(phi, r, err, _signed(hists, q)) for q, (r, err) in enumerate(fits)]

    per_phi = _map(point, list(range(len(grid))), workers)
    qubits, series, n_ok = [], {}, 0
    for q in range(len(truth)):
        pts = []
        for k in range(len(grid)):
            phi, r, err, signed = per_phi[k][q]
            if r is None:
                pts.append({"phi": phi, "error": err, "alpha_m": None, "alpha_m_ci": None})
                continue
            n_ok += 1
            ci = r.ci95
            expected = rotated_sp_params(truth[q].alpha_sp, phi)
            pts.append(
                {
                    "phi": phi,
                    "alpha_m": r.params.alpha_m,
                    "alpha_m_ci": ci["alpha_m"],
                    "alpha_sp_z": r.params.alpha_sp.z,
                    "alpha_sp_z_ci": ci["alpha_sp_z"],
                    "delta": r.params.delta,
                    "delta_ci": ci["delta"],
                    "alpha_sp_z_expected": expected.z,
                    "alpha_sp_z_signed": signed,
                    "flags": list(r.flags) + (["alpha_sp_z_sign_flip"] if signed is not None and signed < 0 else []),
                }
            )
        qubits.append({"qubit": q, "points": pts, "summary": injection_summary(pts)})
        good = [p for p in pts if p["alpha_m"] is not None]
        series[f"injection_q{q}_alpha_m"] = [(p["phi"], p["alpha_m"], p["alpha_m_ci"]) for p in good]
        series[f"injection_q{q}_alpha_sp_z"] = [(p["phi"], p["alpha_sp_z"], p["alpha_sp_z_ci"]) for p in good]
    if n_ok == 0:
        raise EstimationFailure("estimation failed at every injection angle")
    report = {"manifest": _manifest(cfg, "validate-injection"), "phi_grid": grid, "qubits": qubits}
    return report, series


def _expectation(h: ReadoutHistogram, c: ConfusionSet | None) -> dict:
    c = c or ConfusionSet.identity(h.width)
    v, s = mitigated_expectation(h, c, parity_observable())
    return {"value": v, "sigma": s, "non_physical": abs(v) > 1}


def run_ghz_compare(cfg: dict) -> tuple[dict, dict]:
    """Characterize, then prepare GHZ states and compare readout-correction strategies."""
    workers = _int(cfg, "workers", 1)
    seed = _seed(cfg)
    opts = _estimator_opts(cfg)
    n_list = _req(cfg, "n_list")
    if not isinstance(n_list, list) or not n_list or any(not isinstance(n, int) or n % 2 or n < 2 or n > 12 for n in n_list):
        raise ConfigError("'n_list' must hold even qubit counts between 2 and 12")
    n_max = max(n_list)
    base = _params_list(_req(cfg, "qubits"))
    if len(base) == 1:
        base = base * n_max
    if len(base) < n_max:
        raise ConfigError(f"need parameters for {n_max} qubits, got {len(base)}")
    base = base[:n_max]
    nu = _int(cfg, "nu")
    char_nu = _int(cfg, "characterization_nu", nu)
    sp_error = _float(cfg, "sp_error", 0.0)
    noise_cfg = cfg.get("noise", {})
    if not isinstance(noise_cfg, dict):
        raise ConfigError("'noise' must be an object")
    threshold = _float(cfg, "threshold", 2.0)

    if "injection_angles" in cfg:
        angles = [float(a) for a in cfg["injection_angles"]]
        if len(angles) < n_max:
            raise ConfigError("need one injection angle per qubit")
    else:
        angles = draw_injection_angles(n_max, sp_error, derive_seed(seed, _TAG_GHZ_INJ))
    # the injected rotation is part of the device's fiducial state
    truth = [p.with_alpha_sp(rotated_sp_params(p.alpha_sp, a)) for p, a in zip(base, angles)]

    hists = run_qspam_circuits(truth, 0.0, char_nu, derive_seed(seed, _TAG_GHZ_CHAR), _labels(opts), 0.0, workers)
    results = _characterize_qubits(hists, n_max, opts, workers)
    if any(r is None for r, _ in results):
        bad = [q for q, (r, _) in enumerate(results) if r is None]
        raise EstimationFailure(f"characterization failed on qubits {bad}")
    est = [r for r, _ in results]
    thresholded = [threshold_transverse(r, threshold) for r in est]
    pulses = []
    for r in thresholded:
        se = r.stderr or {}
        pulses.append(compile_sp_correction(r.params.alpha_sp, (se.get("alpha_sp_x", 0.0), se.get("alpha_sp_y", 0.0)), threshold))
    est_params = [r.params for r in thresholded]

    def one(n):
        noise = NoiseConfig(
            tuple(truth[:n]),
            p1=float(noise_cfg.get("p1", 0.0)),
            p2=float(noise_cfg.get("p2", 0.0)),
            gamma=float(noise_cfg.get("gamma", 0.0)),
            seed=derive_seed(seed, _TAG_GHZ_RUN, n),
        )
        # the truth already carries the injected rotation
        h_raw = run_ghz(n, noise, None, False, nu)
        h_sp = run_ghz(n, noise, None, True, nu, corrections=[p.gates for p in pulses[:n]])
        a = build_confusion(est_params[:n], MODE_A)
        b = build_confusion(est_params[:n], MODE_B)
        cmp = compare_standard_vs_qspam(h_raw, est_params[:n])
        diff = cmp["difference"]
        comb = cmp["difference_sigma"]
        return {
            "n_qubits": n,
            "estimates": {
                "raw": _expectation(h_raw, None),
                "sp_only": _expectation(h_sp, None),
                "m_only": _expectation(h_raw, a),
                "qspam": _expectation(h_sp, a),
                "standard": _expectation(h_raw, b),
            },
            "comparison": {
                **cmp,
                "significant": abs(diff) > 3 * comb,
                "compatible": abs(diff) <= 3 * comb,
            },
            "sigma_bound_a": sigma_upper_bound(a, nu),
            "histograms": {"raw": h_raw.to_json(), "sp_corrected": h_sp.to_json()},
        }

    rows = _map(one, sorted(n_list), workers)
    series = {}
    for key in ("raw", "sp_only", "m_only", "qspam", "standard"):
        series[f"ghz_{key}"] = [(r["n_qubits"], r["estimates"][key]["value"], r["estimates"][key]["sigma"]) for r in rows]
    report = {
        "manifest": _manifest(cfg, "ghz-compare"),
        "injection_angles": angles,
        "characterization": [_row(q, r) for q, r in enumerate(thresholded)],
        "corrections": [
            {"theta1": p.theta1, "theta2": p.theta2, "x_degenerate": p.x_degenerate, "y_degenerate": p.y_degenerate}
            for p in pulses
        ],
        "results": rows,
    }
    return report, series


def run_mitigate(cfg: dict) -> tuple[dict, dict]:
    """Correct a supplied histogram with supplied readout parameters."""
    h = _read_histogram(_path(cfg, _req(cfg, "histogram")))
    if "params" in cfg:
        params = _params_list(_read_json(_path(cfg, cfg["params"])), "params")
    else:
        params = _params_list(_req(cfg, "qubits"))
    if len(params) != h.width:
        raise ConfigError(f"histogram has {h.width} qubits but {len(params)} parameter sets were given")
    mode = cfg.get("confusion", MODE_A)
    if mode not in ("A", "B", "qspam", "standard"):
        raise ConfigError("'confusion' must be 'A' or 'B'")
    c = build_confusion(params, mode)
    quasi = mitigate_histogram(h, c)
    observables = cfg.get("observables", [{"name": "Z" * h.width, "qubits": list(range(h.width))}])
    exps = []
    for o in observables:
        qs = o.get("qubits", list(range(h.width)))
        if any(not isinstance(q, int) or not 0 <= q < h.width for q in qs):
            raise ConfigError(f"observable {o.get('name')} names qubits outside the histogram")
        v, s = mitigated_expectation(h, c, parity_observable(qs))
        exps.append({"name": o.get("name", ""), "qubits": qs, "value": v, "sigma": s, "non_physical": abs(v) > 1})
    report = {
        "manifest": _manifest(cfg, "mitigate"),
        "confusion": c.provenance,
        "quasi_distribution": quasi.to_json(),
        "expectations": exps,
        "comparison": compare_standard_vs_qspam(h, params),
    }
    series = {"quasi_distribution": [(int(k, 2), v, 0.0) for k, v in quasi.values.items()]}
    return report, series


RUNNERS = {
    "characterize": run_characterize,
    "validate-injection": run_validate_injection,
    "ghz-compare": run_ghz_compare,
    "mitigate": run_mitigate,
}


# ---------------------------------------------------------------------------
# output


def _clean(obj):
    """Replace non-finite floats with None so reports are strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _clean(obj.item())
    return obj


def render_report(report: dict) -> str:
    return json.dumps(_clean(report), sort_keys=True, indent=2) + "\n"


def write_outputs(out_dir: Path, report: dict, series: dict) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(render_report(report))
        for name, rows in series.items():
            with open(out_dir / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["x", "y", "yerr"])
                for x, y, e in rows:
                    w.writerow([repr(float(x)), repr(float(y)), repr(float(e))])
    except OSError as exc:
        raise OSError(f"cannot write to {out_dir}: {exc.strerror}") from exc


def run_campaign(mode: str, cfg: dict) -> tuple[dict, dict]:
    if mode not in RUNNERS:
        raise ConfigError(f"unknown mode {mode!r}")
    cfg_mode = cfg.get("mode")
    if cfg_mode is not None and cfg_mode not in MODES:
        raise ConfigError(f"unknown mode {cfg_mode!r} in config")
    return RUNNERS[mode](cfg)


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="qspam", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="campaign config JSON")
    parser.add_argument("--out", default=None, help="output directory (default: config 'output' or .)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=None, help="override the config worker count")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.workers is not None:
            cfg["workers"] = args.workers
        report, series = run_campaign(args.mode, cfg)
        out = Path(args.out or cfg.get("output") or ".")
        write_outputs(out, report, series)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationFailure as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except QSpamError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {Path(args.out or cfg.get('output') or '.') / 'report.json'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
