"""Experiment configuration: JSON schema, unit parsing and validation.

A config is one JSON object.  Quantities are SI numbers or strings with a
unit: times ``"2.7 ns"``, ``"4 us"``; angular frequencies ``"2pi*25 MHz"``
or ``"1.5e8 rad/s"``.  Keys starting with ``_`` are comments.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from ..budget import BudgetInputs
from ..model import (BranchingParams, CavityQEDParams, LevelScheme, MicromotionParams,
                     PreparationParams)
from ..observables import DetectionModel

SCHEMA_VERSION = 1
EXPERIMENTS = ("emit_histogram", "g2", "spin_photon", "absorption_sweep",
               "saturation_curve", "budget_report")
TRAJECTORY_EXPERIMENTS = ("emit_histogram", "g2", "spin_photon")

# divisors, so that "150 ns" parses to the double nearest 1.5e-7
_TIME_UNITS = {"s": 1.0, "ms": 1e3, "us": 1e6, "µs": 1e6, "μs": 1e6, "ns": 1e9, "ps": 1e12}
_FREQ_UNITS = {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9}
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_ANGULAR = re.compile(rf"^\s*(?:2\s*(?:pi|π)\s*[*x×]\s*)({_NUM})\s*([kMG]?Hz)\s*$")
_RADS = re.compile(rf"^\s*({_NUM})\s*rad/s\s*$")
_TIME = re.compile(rf"^\s*({_NUM})\s*(s|ms|us|µs|μs|ns|ps)\s*$")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violated field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def parse_time(value) -> float:
    """Seconds from a number or a string such as ``"37.7 ns"``."""
    if isinstance(value, bool):
        raise ValueError(f"not a time: {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    m = _TIME.match(str(value))
    if not m:
        raise ValueError(f"cannot parse time {value!r}")
    return float(m.group(1)) / _TIME_UNITS[m.group(2)]


def parse_angular(value) -> float:
    """rad/s from a number, ``"2pi*X MHz"`` or ``"X rad/s"``.

    A bare ``"X MHz"`` is rejected: it does not say whether X is an
    angular or an ordinary frequency.
    """
    if isinstance(value, bool):
        raise ValueError(f"not a frequency: {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    s = str(value)
    m = _ANGULAR.match(s)
    if m:
        return 2.0 * math.pi * float(m.group(1)) * _FREQ_UNITS[m.group(2)]
    m = _RADS.match(s)
    if m:
        return float(m.group(1))
    raise ValueError(f"cannot parse angular frequency {value!r}; use '2pi*X MHz' or 'X rad/s'")


def _strip_comments(obj):
    if isinstance(obj, dict):
        return {k: _strip_comments(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, list):
        return [_strip_comments(v) for v in obj]
    return obj


def default_document() -> dict:
    """The shipped parameter file as a dict (comments included)."""
    text = resources.files("ioncav.data").joinpath("paper.json").read_text(encoding="utf-8")
    return json.loads(text)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Protocol:
    pulse_duration: float = 2.7e-9
    pulse_area: float = 1.0          # in units of pi
    cycle_period: float = 4e-6
    record_window: float = 300e-9    # simulated part of each cycle
    bin_width: float = 2e-9
    fit_start: float = 25e-9
    g2_window: tuple[float, float] = (20e-9, 150e-9)
    g2_max_delay: int = 20
    spin_window: tuple[float, float] = (0.0, 300e-9)
    photon_rate: float = 1e6         # impinging photons per second
    rate_window: float = 2e-6
    theta_grid: tuple[float, ...] = tuple(5.0 + 7.5 * k for k in range(19))
    probe_duration: float = 170e-6
    photon_numbers: tuple[float, ...] = (30, 40, 50, 60, 70, 80)
    saturation_theta: float = 5.0   # waveplate angle of the saturation probe, degrees
    repetitions: int = 0
    target_p_abs: float | None = None


@dataclass
class ExperimentConfig:
    experiment: str
    cavity: CavityQEDParams
    branching: BranchingParams
    scheme: LevelScheme
    preparation: PreparationParams
    micromotion: MicromotionParams
    detection: DetectionModel
    readout_fidelity: float
    budget_inputs: BudgetInputs
    protocol: Protocol
    n_max: int | None
    n_trajectories: int
    base_seed: int
    output_dir: Path
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    n_workers: int = 1
    master_rel_tol: float = 1e-8
    master_abs_tol: float = 1e-12
    source: dict = field(default_factory=dict, repr=False)

    def snapshot(self) -> dict:
        """Comment-free config document that reproduces this run."""
        doc = _strip_comments(self.source)
        doc.pop("experiments", None)
        doc["experiment"] = self.experiment
        doc["base_seed"] = self.base_seed
        doc["n_trajectories"] = self.n_trajectories
        doc["output_dir"] = str(self.output_dir)
        return doc


def _get(doc, path, errors, parse=None, default=None, required=False):
    cur = doc
    for key in path.split("."):
        if not isinstance(cur, dict) or key not in cur:
            if required:
                errors.append(f"{path}: missing")
            return default
        cur = cur[key]
    if parse is None:
        return cur
    try:
        return parse(cur)
    except (TypeError, ValueError) as exc:
        errors.append(f"{path}: {exc}")
        return default


def _positive(errors, name, value):
    if value is not None and not value > 0:
        errors.append(f"{name}: must be > 0 (got {value!r})")


def _probability(errors, name, value):
    if value is not None and not 0.0 <= value <= 1.0:
        errors.append(f"{name}: must lie in [0, 1] (got {value!r})")


def _int(v):
    if isinstance(v, bool) or not float(v).is_integer():
        raise ValueError(f"expected an integer, got {v!r}")
    return int(v)


def _window(v):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ValueError("expected [start, end]")
    return (parse_time(v[0]), parse_time(v[1]))


def from_dict(doc: dict, experiment: str | None = None, base_seed: int | None = None,
              output_dir: str | Path | None = None,
              n_trajectories: int | None = None) -> ExperimentConfig:
    """Validate a config document; keyword arguments override the document.

    Raises
    ------
    ConfigError
        Listing every invalid or missing field.
    """
    errors: list[str] = []
    doc_exp = doc.get("experiment")
    if experiment is not None and doc_exp not in (None, experiment):
        errors.append(f"experiment: config says {doc_exp!r} but {experiment!r} was requested")
    experiment = experiment or doc_exp
    if experiment not in EXPERIMENTS:
        errors.append(f"experiment: must be one of {', '.join(EXPERIMENTS)} (got {experiment!r})")
    per_exp = doc.get("experiments", {}) or {}
    if not isinstance(per_exp, dict):
        errors.append("experiments: must be an object of per-experiment overrides")
    elif isinstance(per_exp.get(experiment), dict):
        doc = merge(doc, per_exp[experiment])
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")

    c = "physics.cavity."
    g_bar = _get(doc, c + "g_bar", errors, parse_angular, required=True)
    kappa = _get(doc, c + "kappa", errors, parse_angular, required=True)
    gamma = _get(doc, c + "gamma", errors, parse_angular, required=True)
    t_ht = _get(doc, c + "t_ht_ppm", errors, float, 100.0)
    t_lt = _get(doc, c + "t_lt_ppm", errors, float, 10.0)
    loss = _get(doc, c + "loss_ppm", errors, float, 200.0)
    finesse = _get(doc, c + "finesse", errors, float, 2.0e4)
    length = _get(doc, c + "length", errors, parse_time_or_length, 170e-6)
    lifetime = _get(doc, c + "lifetime", errors, parse_time, None)
    cavity = None
    if not errors or all(x is not None for x in (g_bar, kappa, gamma)):
        try:
            cavity = CavityQEDParams(g_bar, kappa, gamma, t_ht, t_lt, loss, finesse, length,
                                     lifetime)
        except (TypeError, ValueError) as exc:
            errors.append(f"physics.cavity: {exc}")

    b_s = _get(doc, "physics.branching.b_s", errors, float, 0.982)
    b_d = _get(doc, "physics.branching.b_d", errors, float, 0.018)
    branching = _build(errors, "physics.branching", BranchingParams, b_s, b_d)

    shifts = _get(doc, "physics.zeeman_shifts", errors, None, {}) or {}
    parsed_shifts = {}
    for lab, v in shifts.items():
        if str(lab).startswith("_"):
            continue
        try:
            parsed_shifts[lab] = parse_angular(v)
        except ValueError as exc:
            errors.append(f"physics.zeeman_shifts.{lab}: {exc}")
    scheme = _build(errors, "physics.zeeman_shifts", LevelScheme,
                    zeeman_shifts=parsed_shifts)

    fid = _get(doc, "physics.preparation.fidelity", errors, float, 0.9)
    resid = _get(doc, "physics.preparation.residual_distribution", errors, None, None)
    if resid is not None:
        resid = {k: float(v) for k, v in resid.items() if not str(k).startswith("_")}
    preparation = _build(errors, "physics.preparation", PreparationParams, fid, resid)

    omega_rf = _get(doc, "physics.micromotion.omega_rf", errors, parse_angular,
                    2.0 * math.pi * 22e6)
    beta = _get(doc, "physics.micromotion.beta", errors, float, 0.0)
    micromotion = _build(errors, "physics.micromotion", MicromotionParams, omega_rf, beta)
    n_max = _get(doc, "physics.n_max", errors, lambda v: None if v is None else _int(v), None)
    if n_max is not None and n_max < 1:
        errors.append("physics.n_max: must be >= 1")

    det = _get(doc, "detection", errors, None, {}) or {}
    det_kwargs = {}
    for name in ("eta_mirror", "eps_mode", "eta_path", "eta_det", "background_rate",
                 "dark_rate", "polarization_error"):
        if name in det:
            det_kwargs[name] = _get(det, name, errors, float)
    detection = _build(errors, "detection", DetectionModel, **det_kwargs)
    readout = _get(doc, "detection.readout_fidelity", errors, float, 0.98)
    _probability(errors, "detection.readout_fidelity", readout)

    bud = _get(doc, "budget", errors, None, {}) or {}
    bud_kwargs = {}
    for name in ("c0", "eta_total_exp", "eta_mirror", "eps_mode", "eta_path", "eta_det",
                 "eta_in_exp", "micromotion_reduction"):
        if name in bud:
            bud_kwargs[name] = _get(bud, name, errors, float)
    if "g_obs" in bud:
        bud_kwargs["g_obs"] = _get(bud, "g_obs", errors, parse_angular)
    budget_inputs = _build(errors, "budget", BudgetInputs, **bud_kwargs)

    protocol = _protocol(doc.get("protocol", {}) or {}, errors)

    if n_trajectories is None:
        n_trajectories = _get(doc, "n_trajectories", errors, _int, 0)
    if experiment in TRAJECTORY_EXPERIMENTS and not (n_trajectories and n_trajectories > 0):
        errors.append(f"n_trajectories: must be > 0 for {experiment} (got {n_trajectories!r})")
    if base_seed is None:
        if "base_seed" not in doc:
            errors.append("base_seed: missing (runs must be explicitly seeded)")
        base_seed = _get(doc, "base_seed", errors, _int, 0)
    if base_seed is not None and base_seed < 0:
        errors.append("base_seed: must be >= 0")
    output_dir = output_dir if output_dir is not None else doc.get("output_dir")
    if output_dir is None:
        errors.append("output_dir: missing (pass --out)")

    rel_tol = _get(doc, "solver.rel_tol", errors, float, 1e-6)
    abs_tol = _get(doc, "solver.abs_tol", errors, float, 1e-8)
    n_workers = _get(doc, "solver.n_workers", errors, _int, 1)
    m_rel = _get(doc, "solver.master_rel_tol", errors, float, 1e-8)
    m_abs = _get(doc, "solver.master_abs_tol", errors, float, 1e-12)
    for name, v in (("rel_tol", rel_tol), ("abs_tol", abs_tol), ("master_rel_tol", m_rel),
                    ("master_abs_tol", m_abs)):
        _positive(errors, f"solver.{name}", v)
    if n_workers is not None and n_workers < 1:
        errors.append("solver.n_workers: must be >= 1")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(experiment, cavity, branching, scheme, preparation, micromotion,
                            detection, readout, budget_inputs, protocol, n_max,
                            int(n_trajectories or 0), int(base_seed), Path(output_dir),
                            rel_tol, abs_tol, n_workers, m_rel, m_abs, copy.deepcopy(doc))


def parse_time_or_length(value) -> float:
    """Metres from a number or ``"170 um"`` style strings."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    m = re.match(rf"^\s*({_NUM})\s*(m|mm|um|µm|μm|nm)\s*$", str(value))
    if not m:
        raise ValueError(f"cannot parse length {value!r}")
    scale = {"m": 1.0, "mm": 1e3, "um": 1e6, "µm": 1e6, "μm": 1e6, "nm": 1e9}
    return float(m.group(1)) / scale[m.group(2)]


def _build(errors, name, cls, *args, **kwargs):
    """Construct ``cls``; an error is recorded unless a field of ``name`` already failed."""
    try:
        return cls(*args, **kwargs)
    except (TypeError, ValueError) as exc:
        if not any(e.startswith(name) for e in errors):
            errors.append(f"{name}: {exc}")
        return None


def _protocol(p: dict, errors: list[str]) -> Protocol:
    d = Protocol()
    times = ("pulse_duration", "cycle_period", "record_window", "bin_width", "fit_start",
             "rate_window", "probe_duration")
    kw: dict[str, Any] = {}
    for name in times:
        if name in p:
            kw[name] = _get(p, name, errors, parse_time)
    for name in ("pulse_area", "photon_rate", "saturation_theta"):
        if name in p:
            kw[name] = _get(p, name, errors, float)
    if "target_p_abs" in p:
        kw["target_p_abs"] = _get(p, "target_p_abs", errors,
                                  lambda v: None if v is None else float(v))
    for name in ("g2_window", "spin_window"):
        if name in p:
            kw[name] = _get(p, name, errors, _window)
    for name in ("g2_max_delay", "repetitions"):
        if name in p:
            kw[name] = _get(p, name, errors, _int)
    for name in ("theta_grid", "photon_numbers"):
        if name in p:
            kw[name] = _get(p, name, errors, lambda v: tuple(float(x) for x in v))
    kw = {k: v for k, v in kw.items() if v is not None}
    proto = Protocol(**{**d.__dict__, **kw})
    for name in times + ("pulse_area", "photon_rate"):
        _positive(errors, f"protocol.{name}", getattr(proto, name))
    if proto.record_window > proto.cycle_period:
        errors.append("protocol.record_window: must not exceed cycle_period")
    if proto.pulse_duration >= proto.record_window:
        errors.append("protocol.pulse_duration: must be shorter than record_window")
    for name in ("g2_window", "spin_window"):
        a, b = getattr(proto, name)
        if not (0.0 <= a < b <= proto.record_window):
            errors.append(f"protocol.{name}: must satisfy 0 <= start < end <= record_window"
                          f" ({proto.record_window!r} s)")
    if proto.g2_max_delay < 1:
        errors.append("protocol.g2_max_delay: must be >= 1")
    if proto.repetitions < 0:
        errors.append("protocol.repetitions: must be >= 0")
    if not proto.theta_grid:
        errors.append("protocol.theta_grid: must not be empty")
    if len(proto.photon_numbers) < 3 or min(proto.photon_numbers) < 0:
        errors.append("protocol.photon_numbers: need at least 3 values >= 0")
    if proto.target_p_abs is not None and not 0.0 < proto.target_p_abs < 1.0:
        errors.append("protocol.target_p_abs: must lie in (0, 1)")
    return proto


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Load a config file layered over the shipped defaults.

    Precedence, lowest first: defaults, the defaults' block for the
    experiment, the file, the file's block for the experiment, keyword
    overrides.
    """
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError([f"config: cannot read {path}: {exc}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config: invalid JSON in {path}: {exc}"]) from None
        if not isinstance(user, dict):
            raise ConfigError(["config: top level must be a JSON object"])
    base = default_document()
    experiment = overrides.get("experiment") or user.get("experiment")
    block = base.pop("experiments", {}).get(experiment)
    if isinstance(block, dict):
        base = merge(base, block)
    return from_dict(merge(base, user), **overrides)


__all__ = [
    "SCHEMA_VERSION", "EXPERIMENTS", "TRAJECTORY_EXPERIMENTS", "ConfigError", "parse_time",
    "parse_angular", "parse_time_or_length", "default_document", "merge", "Protocol",
    "ExperimentConfig", "from_dict", "load_config",
]
