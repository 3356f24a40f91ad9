"""Run one experiment protocol and write its artifacts atomically.

Every run writes its result files plus ``<experiment>.manifest.json``.
Results are staged in a hidden directory and moved into place only once
all of them exist; the manifest goes last, so a result file is valid
exactly when the manifest listing its checksum is present.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .. import BACKEND, __version__
from ..budget import InconsistentInputsError, absorption_chain, budget_report
from ..hilbert import basis_state
from ..model import (SPIN_DOWN, DriveParams, ExcitationPulse, MicromotionParams,
                     build_absorption_model, build_emission_model, drive_amplitude,
                     initial_mixture, is_cavity_tag)
from ..observables import (FitError, NoEventsError, absorb_per_photon, accidental_coincidences,
                           coincidence_histogram, detection_probability, fit_exponential,
                           fit_saturation, side_peak_mean, sink_population,
                           spin_photon_correlation, time_arrival_histogram, zero_delay)
from ..solver import (ConvergenceError, IntegrationError, SolverOptions, evolve_master,
                      run_trajectories)
from .config import ExperimentConfig

# spawn-key offset separating detection streams from trajectory streams
_DETECTION_STREAM = 1 << 31


class NumericalError(RuntimeError):
    """A simulation or fit failed; no results were written."""


@dataclass
class RunManifest:
    experiment: str
    code_version: str
    config: dict
    wall_time_s: float
    outputs: dict[str, str]
    summary: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default) + "\n"


def code_version() -> str:
    return f"ioncav {__version__} ({BACKEND} kernel)"


def manifest_name(experiment: str) -> str:
    return f"{experiment}.manifest.json"


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def format_number(x) -> str:
    """Shortest decimal string that round-trips to the same double."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def csv_text(header: list[str], rows, manifest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# manifest: {manifest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_number(v) for v in row])
    return buf.getvalue()


def json_text(payload: dict, manifest: str) -> str:
    return json.dumps({"manifest": manifest, **payload}, indent=2, sort_keys=True,
                      default=_json_default) + "\n"


def detection_seed(base_seed: int, k: int = 0) -> np.random.SeedSequence:
    """Stream for detector thinning and noise, disjoint from every trajectory stream."""
    return np.random.SeedSequence(base_seed, spawn_key=(_DETECTION_STREAM + k,))


# --------------------------------------------------------------------------
# protocols

def _emission_ensemble(cfg: ExperimentConfig):
    p = cfg.protocol
    pulse = ExcitationPulse(p.pulse_duration, p.pulse_area * math.pi / p.pulse_duration)
    model = build_emission_model(cfg.cavity, cfg.branching, cfg.scheme,
                                 micromotion=cfg.micromotion, pulse=pulse,
                                 n_max=cfg.n_max or 1)
    psi0 = [(w, basis_state(model.space, lab))
            for lab, w in cfg.preparation.distribution(SPIN_DOWN).items() if w > 0]
    opts = SolverOptions(rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol,
                         n_trajectories=cfg.n_trajectories, base_seed=cfg.base_seed,
                         n_workers=cfg.n_workers)
    return model, run_trajectories(model, psi0, p.record_window, opts)


def _jump_fractions(ens) -> dict:
    n = len(ens)
    cav = ens.channel_mask(is_cavity_tag)
    ht = ens.channel_mask(lambda t: t.startswith("mirror_HT"))
    return {"cavity_jump_fraction": float(np.count_nonzero(cav) / n),
            "ht_jump_fraction": float(np.count_nonzero(ht) / n)}


def _emit_histogram(cfg: ExperimentConfig, stage: Path, manifest: str):
    p = cfg.protocol
    _, ens = _emission_ensemble(cfg)
    hist = time_arrival_histogram(ens, cfg.detection, p.bin_width,
                                  seed=detection_seed(cfg.base_seed))
    fit = fit_exponential(hist, p.fit_start)
    prob, prob_err = detection_probability(hist)
    c0 = cfg.cavity.cooperativity
    rows = zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts, hist.background_expected)
    (stage / "emit_histogram.csv").write_text(
        csv_text(["t_start_s", "t_end_s", "counts", "background_expected"], rows, manifest))
    result = {
        "tau_ns": fit.tau * 1e9, "tau_err_ns": fit.tau_err * 1e9,
        "fit_start_ns": p.fit_start * 1e9, "fit_counts": fit.n_counts,
        "tau_oracle_ns": 1e9 / (2.0 * cfg.cavity.gamma * (1.0 + 2.0 * c0)),
        "cooperativity": c0,
        "detection_probability": prob, "detection_probability_err": prob_err,
        "n_trajectories": len(ens), **_jump_fractions(ens),
        "detection": cfg.detection.to_dict(),
    }
    (stage / "emit_histogram_fit.json").write_text(json_text(result, manifest))
    return {k: result[k] for k in ("tau_ns", "tau_err_ns", "detection_probability",
                                   "cavity_jump_fraction")}


def _g2(cfg: ExperimentConfig, stage: Path, manifest: str):
    p = cfg.protocol
    _, ens = _emission_ensemble(cfg)
    hist = coincidence_histogram(ens, cfg.detection, p.cycle_period, p.g2_window,
                                 p.g2_max_delay, seed=detection_seed(cfg.base_seed))
    delays = np.arange(-p.g2_max_delay, p.g2_max_delay + 1)
    rows = zip(delays, delays * p.cycle_period, hist.counts)
    (stage / "g2_coincidences.csv").write_text(
        csv_text(["delay_cycles", "delay_s", "coincidences"], rows, manifest))
    side, side_err = side_peak_mean(hist)
    return {
        "zero_delay": zero_delay(hist), "side_peak_mean": side, "side_peak_err": side_err,
        "accidental_prediction": accidental_coincidences(
            hist.meta["p_signal"], hist.meta["mu_noise_per_detector"], hist.n_cycles),
        "n_cycles": hist.n_cycles,
        "background_rate": cfg.detection.background_rate, "dark_rate": cfg.detection.dark_rate,
    }


def _spin_photon(cfg: ExperimentConfig, stage: Path, manifest: str):
    p = cfg.protocol
    _, ens = _emission_ensemble(cfg)
    res = spin_photon_correlation(ens, cfg.detection, cfg.preparation, cfg.readout_fidelity,
                                  p.spin_window, seed=detection_seed(cfg.base_seed))
    payload = {**res.to_dict(), "detection": cfg.detection.to_dict(),
               "window_s": list(p.spin_window)}
    (stage / "spin_photon.json").write_text(json_text(payload, manifest))
    return {"p_down_given_plus": res.p_down_given_plus,
            "p_up_given_minus": res.p_up_given_minus,
            "ratio_plus_minus": res.ratio_plus_minus,
            "noise_fraction": res.counts["noise_fraction"],
            "background_rate": cfg.detection.background_rate,
            "dark_rate": cfg.detection.dark_rate,
            "polarization_error": cfg.detection.polarization_error}


def _absorption_model(cfg: ExperimentConfig, theta: float, photon_rate: float,
                      micromotion: MicromotionParams | None = None):
    amp = drive_amplitude(photon_rate, cfg.cavity.kappa, cfg.budget_inputs.eta_in_exp)
    return build_absorption_model(cfg.cavity, DriveParams(amp, 0.0, theta), cfg.branching,
                                  cfg.scheme, prep=cfg.preparation,
                                  micromotion=micromotion or cfg.micromotion,
                                  n_max=cfg.n_max or 2)


def _master_options(cfg: ExperimentConfig, duration: float,
                    micromotion: MicromotionParams | None = None) -> SolverOptions:
    # Long probes are stiff (kappa * T up to 3e4): there BDF with the
    # Liouvillian as Jacobian is about 30x faster than RK45.  Short probes
    # are dominated by the turn-on transient, where RK45 is faster.
    # Micromotion makes the generator time dependent and caps the step anyway.
    mm = micromotion or cfg.micromotion
    stiff = cfg.cavity.kappa * duration > 1e3 and not mm.active
    return SolverOptions(rel_tol=cfg.master_rel_tol, abs_tol=cfg.master_abs_tol,
                         method="BDF" if stiff else "RK45")


def absorption_point(cfg: ExperimentConfig, theta: float,
                     micromotion: MicromotionParams | None = None) -> float:
    """Absorption per impinging photon at one waveplate angle."""
    p = cfg.protocol
    model = _absorption_model(cfg, theta, p.photon_rate, micromotion)
    [(_, val)] = absorb_per_photon([(theta, model)], p.rate_window,
                                   p.photon_rate * p.rate_window, "rate",
                                   _master_options(cfg, p.rate_window, micromotion))
    return val


def find_beta(cfg: ExperimentConfig, theta: float, target: float,
              step: float = 0.25, beta_max: float = 2.4) -> float:
    """Smallest micromotion index giving absorption ``target`` at ``theta``.

    Scans upward in ``step`` until the absorption drops below the target
    and refines with Brent's method.  ``beta_max`` stays below the first
    carrier zero (2.405), beyond which the dependence is not monotonic.
    """
    def f(beta):
        mm = MicromotionParams(cfg.micromotion.omega_rf, beta)
        return absorption_point(cfg, theta, mm) - target

    lo, f_lo = 0.0, f(0.0)
    if f_lo <= 0:
        raise NumericalError(f"absorption without micromotion ({f_lo + target:.4g}) "
                             f"is already below the target {target:.4g}")
    while lo < beta_max:
        hi = min(lo + step, beta_max)
        f_hi = f(hi)
        if f_hi <= 0:
            return float(optimize.brentq(f, lo, hi, xtol=1e-4))
        lo = hi
    raise NumericalError(f"no beta <= {beta_max} reaches absorption {target:.4g}")


def _absorption_sweep(cfg: ExperimentConfig, stage: Path, manifest: str):
    p = cfg.protocol
    runs = [(th, _absorption_model(cfg, th, p.photon_rate)) for th in p.theta_grid]
    data = absorb_per_photon(runs, p.rate_window, p.photon_rate * p.rate_window, "rate",
                             _master_options(cfg, p.rate_window))
    (stage / "absorption_sweep.csv").write_text(
        csv_text(["theta_deg", "p_abs"], data, manifest))
    thetas, vals = zip(*data)
    # first angle within rounding of the maximum
    i_max = int(np.flatnonzero(np.asarray(vals) >= max(vals) * (1 - 1e-9))[0])
    summary = {
        "theta_max_deg": thetas[i_max], "p_abs_max": vals[i_max],
        "p_abs_min": min(vals), "beta": cfg.micromotion.beta,
        "analytic_chain": absorption_chain(cfg.cavity.cooperativity,
                                           {"prep": cfg.preparation.fidelity}),
        "n_empty": runs[0][1].info["n_empty"],
    }
    if p.target_p_abs is not None:
        beta = find_beta(cfg, thetas[i_max], p.target_p_abs)
        summary["beta_fit"] = beta
        summary["target_p_abs"] = p.target_p_abs
        summary["p_abs_at_beta_fit"] = absorption_point(
            cfg, thetas[i_max], MicromotionParams(cfg.micromotion.omega_rf, beta))
    (stage / "absorption_summary.json").write_text(json_text(summary, manifest))
    return summary


def saturation_points(cfg: ExperimentConfig) -> list[tuple[float, float]]:
    """Sink population after the probe for each mean photon number."""
    p = cfg.protocol
    out = []
    for n in p.photon_numbers:
        model = _absorption_model(cfg, p.saturation_theta, n / p.probe_duration)
        rho = evolve_master(model, initial_mixture(model), [0.0, p.probe_duration],
                            _master_options(cfg, p.probe_duration))[-1]
        out.append((float(n), sink_population(model, rho)))
    return out


def _saturation_curve(cfg: ExperimentConfig, stage: Path, manifest: str):
    p = cfg.protocol
    exact = saturation_points(cfg)
    points = exact
    if p.repetitions > 0:
        rng = np.random.default_rng(detection_seed(cfg.base_seed))
        points = [(n, rng.binomial(p.repetitions, min(max(ps, 0.0), 1.0)) / p.repetitions)
                  for n, ps in exact]
    fit = fit_saturation(points)
    (stage / "saturation_curve.csv").write_text(
        csv_text(["n_photons", "p_s"], points, manifest))
    result = {"n0": fit.n0, "n0_err": fit.n0_err, "p_abs": fit.p_abs,
              "repetitions": p.repetitions, "theta_deg": p.saturation_theta,
              "beta": cfg.micromotion.beta, "probe_duration_s": p.probe_duration,
              "p_s_model": [ps for _, ps in exact]}
    (stage / "saturation_fit.json").write_text(json_text(result, manifest))
    return {k: result[k] for k in ("n0", "n0_err", "p_abs", "beta")}


def _budget_report(cfg: ExperimentConfig, stage: Path, manifest: str):
    report = budget_report(cfg.cavity, cfg.budget_inputs, cfg.branching)
    (stage / "budget_report.json").write_text(json_text(report, manifest))
    return {"cooperativity": report["measured"]["cooperativity_from_g_obs"],
            "inverted_cooperativity": report["measured"]["inverted_cooperativity"]}


PROTOCOLS = {
    "emit_histogram": _emit_histogram,
    "g2": _g2,
    "spin_photon": _spin_photon,
    "absorption_sweep": _absorption_sweep,
    "saturation_curve": _saturation_curve,
    "budget_report": _budget_report,
}

_NUMERICAL = (IntegrationError, ConvergenceError, FitError, NoEventsError,
              InconsistentInputsError, FloatingPointError)


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(cfg: ExperimentConfig) -> tuple[RunManifest, dict[str, Path]]:
    """Execute ``cfg`` and return the manifest and the written result paths.

    Raises
    ------
    NumericalError
        If a simulation or fit fails.  Nothing from this run is left
        behind; a previous complete run in the same directory is kept.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mname = manifest_name(cfg.experiment)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    moved: list[Path] = []
    t_start = time.perf_counter()
    try:
        try:
            summary = PROTOCOLS[cfg.experiment](cfg, stage, mname)
        except _NUMERICAL as exc:
            raise NumericalError(f"{cfg.experiment}: {type(exc).__name__}: {exc}") from exc
        wall = time.perf_counter() - t_start
        files = sorted(stage.iterdir())
        outputs = {f.name: sha256(f) for f in files}
        manifest = RunManifest(cfg.experiment, code_version(), cfg.snapshot(), wall,
                               outputs, summary)
        (stage / mname).write_text(manifest.to_json())
        # invalidate the previous run before replacing its files
        (out_dir / mname).unlink(missing_ok=True)
        paths = {}
        for f in files:
            dest = out_dir / f.name
            os.replace(f, dest)
            moved.append(dest)
            paths[f.name] = dest
        os.replace(stage / mname, out_dir / mname)
        return manifest, paths
    except BaseException:
        for f in moved:
            f.unlink(missing_ok=True)
        raise
    finally:
        shutil.rmtree(stage, ignore_errors=True)


__all__ = ["NumericalError", "RunManifest", "code_version", "manifest_name", "format_number",
           "csv_text", "json_text", "detection_seed", "absorption_point", "find_beta",
           "saturation_points", "PROTOCOLS", "sha256", "run"]
