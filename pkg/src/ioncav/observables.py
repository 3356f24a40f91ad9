"""Measured quantities from trajectory ensembles and master-equation runs.

Photon detection is simulated by thinning the ``mirror_HT_*`` jumps of a
:class:`~ioncav.solver.TrajectoryEnsemble`: every trajectory is one
excitation cycle starting at ``t = 0`` (the excitation pulse start).
Background and dark counts are added as Poisson processes on each of the
two detectors, with random polarization.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import optimize, stats

from .hilbert import partial_atom_populations
from .model import (S_LABEL, SIGMA_MINUS, SIGMA_PLUS, SPIN_DOWN, LindbladModel,
                    PreparationParams, initial_mixture, tag_polarization)
from .solver import SolverOptions, TrajectoryEnsemble, evolve_master

N_DETECTORS = 2


class FitError(RuntimeError):
    """Raised when a fit has too little data or no meaningful optimum."""


class FitQualityWarning(UserWarning):
    pass


class NoEventsError(ValueError):
    """Raised when a conditional quantity has no conditioning events."""


@dataclass(frozen=True)
class DetectionModel:
    """Detection path after the high-transmission mirror.

    ``eta_mirror`` is realized by the model's HT/LT/loss channel split and
    is not applied again when thinning.  ``polarization_error`` is the
    probability that the fiber rotates a photon into the other circular
    basis state.  Rates are counts/s per detector.
    """

    eta_mirror: float = 0.32
    eps_mode: float = 0.90
    eta_path: float = 0.75
    eta_det: float = 0.25
    background_rate: float = 0.0
    dark_rate: float = 0.0
    polarization_error: float = 0.0

    def __post_init__(self):
        for name in ("eta_mirror", "eps_mode", "eta_path", "eta_det", "polarization_error"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v!r} is not a probability")
        if self.background_rate < 0 or self.dark_rate < 0:
            raise ValueError("count rates must be >= 0")

    @property
    def survival(self) -> float:
        """Probability that a photon leaving the HT mirror is counted."""
        return self.eps_mode * self.eta_path * self.eta_det

    @property
    def noise_rate(self) -> float:
        """Background plus dark counts per second, summed over detectors."""
        return N_DETECTORS * (self.background_rate + self.dark_rate)

    @classmethod
    def ideal(cls) -> "DetectionModel":
        return cls(1.0, 1.0, 1.0, 1.0)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Histogram:
    """Counts in contiguous bins.

    ``background_expected`` is the expected number of noise counts in each
    bin; it is zero when no background was simulated.
    """

    bin_edges: np.ndarray
    counts: np.ndarray
    n_cycles: int
    background_expected: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.bin_edges.ndim != 1 or len(self.bin_edges) != len(self.counts) + 1:
            raise ValueError("need len(bin_edges) == len(counts) + 1")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be increasing")
        if self.background_expected is None:
            self.background_expected = np.zeros(len(self.counts))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rows(self) -> list[tuple[float, float, int]]:
        return [(float(a), float(b), int(c))
                for a, b, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)]


class DetectionEvents(NamedTuple):
    """Flat list of detector clicks, sorted by (cycle, time)."""

    cycle: np.ndarray
    time: np.ndarray
    detector: np.ndarray
    polarization: np.ndarray   # +1 sigma+, -1 sigma-
    real: np.ndarray           # False for background and dark counts
    n_cycles: int
    window: tuple[float, float]


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _ht_polarizations(records: TrajectoryEnsemble) -> np.ndarray:
    """Per-tag code: +1/-1 for HT channels of each polarization, 0 otherwise."""
    code = []
    for tag in records.tags:
        pol = tag_polarization(tag)
        if tag.startswith("mirror_HT") and pol is not None:
            code.append(1 if pol == SIGMA_PLUS else -1)
        else:
            code.append(0)
    return np.array(code + [0], dtype=np.int64)


def detect(records: TrajectoryEnsemble, detection: DetectionModel,
           window: tuple[float, float] | None = None, seed=0) -> DetectionEvents:
    """Thin HT jumps into detector clicks and add noise counts.

    Each surviving photon lands on one of two detectors with equal
    probability.  Random draws happen in a fixed order, so the result
    depends only on ``records``, ``detection``, ``window`` and ``seed``.
    """
    if len(records) == 0:
        raise NoEventsError("empty record set")
    rng = _as_rng(seed)
    t0, t1 = (0.0, records.t_end) if window is None else window
    if not (0.0 <= t0 < t1 <= records.t_end):
        raise ValueError(f"window {window} outside the cycle [0, {records.t_end}]")
    code = _ht_polarizations(records)[records.jump_channels] \
        if len(records.jump_channels) else np.zeros(0, np.int64)
    ht = np.flatnonzero(code != 0)
    keep = rng.random(len(ht)) < detection.survival
    flip = rng.random(len(ht)) < detection.polarization_error
    det_real = rng.integers(0, N_DETECTORS, len(ht))
    times = records.jump_times[ht]
    sel = keep & (times >= t0) & (times < t1)
    owner = records.jump_owner[ht][sel]
    pol = np.where(flip, -code[ht], code[ht])[sel]
    r_time, r_det = times[sel], det_real[sel]

    n = len(records)
    mu = detection.noise_rate * (t1 - t0)
    n_bg = rng.poisson(mu, n) if mu > 0 else np.zeros(n, np.int64)
    total_bg = int(n_bg.sum())
    b_cycle = np.repeat(np.arange(n), n_bg)
    b_time = t0 + (t1 - t0) * rng.random(total_bg)
    b_det = rng.integers(0, N_DETECTORS, total_bg)
    b_pol = np.where(rng.random(total_bg) < 0.5, 1, -1)

    cycle = np.concatenate([owner, b_cycle])
    time = np.concatenate([r_time, b_time])
    order = np.lexsort((time, cycle))
    return DetectionEvents(
        cycle[order], time[order],
        np.concatenate([r_det, b_det])[order],
        np.concatenate([pol, b_pol])[order],
        np.concatenate([np.ones(len(owner), bool), np.zeros(total_bg, bool)])[order],
        n, (t0, t1))


def time_arrival_histogram(records: TrajectoryEnsemble, detection: DetectionModel,
                           bin_width: float, seed=0,
                           window: tuple[float, float] | None = None) -> Histogram:
    """Histogram of click times relative to the pulse start, summed over detectors."""
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    ev = detect(records, detection, window, seed)
    t0, t1 = ev.window
    n_bins = max(1, int(math.floor((t1 - t0) / bin_width + 1e-9)))
    edges = t0 + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(ev.time, edges)
    bg = np.full(n_bins, detection.noise_rate * bin_width * ev.n_cycles)
    return Histogram(edges, counts, ev.n_cycles, bg,
                     {"n_real": int(ev.real.sum()), "n_noise": int((~ev.real).sum())})


def detection_probability(hist: Histogram) -> tuple[float, float]:
    """Background-corrected clicks per cycle and its Poisson standard error."""
    net = hist.total - float(hist.background_expected.sum())
    return net / hist.n_cycles, math.sqrt(max(hist.total, 1)) / hist.n_cycles


# --------------------------------------------------------------------------
# coincidences

def coincidence_counts(n1: np.ndarray, n2: np.ndarray, max_delay: int) -> np.ndarray:
    """``c[d + max_delay] = sum_i n1[i] n2[i + d]`` for ``|d| <= max_delay``."""
    n1 = np.asarray(n1, dtype=np.int64)
    n2 = np.asarray(n2, dtype=np.int64)
    n = len(n1)
    out = np.zeros(2 * max_delay + 1, dtype=np.int64)
    for d in range(-max_delay, max_delay + 1):
        if d >= 0:
            out[d + max_delay] = int(n1[:n - d] @ n2[d:]) if d < n else 0
        else:
            out[d + max_delay] = int(n1[-d:] @ n2[:n + d]) if -d < n else 0
    return out


def coincidence_histogram(records: TrajectoryEnsemble, detection: DetectionModel,
                          cycle_period: float = 4e-6,
                          window: tuple[float, float] = (20e-9, 150e-9),
                          max_delay: int = 20, seed=0) -> Histogram:
    """Start-stop coincidences between the two detectors, binned per cycle delay.

    Cycles follow each other in ensemble order; delay ``d`` pairs a click
    of detector 1 in cycle ``i`` with a click of detector 2 in cycle
    ``i + d``.  Bin edges are in seconds, centred on multiples of
    ``cycle_period``.
    """
    if not (0.0 <= window[0] < window[1] <= cycle_period):
        raise ValueError(f"window {window} outside the cycle of {cycle_period} s")
    if window[1] > records.t_end:
        raise ValueError("window extends beyond the simulated cycle")
    ev = detect(records, detection, window, seed)
    n1 = np.bincount(ev.cycle[ev.detector == 0], minlength=ev.n_cycles)
    n2 = np.bincount(ev.cycle[ev.detector == 1], minlength=ev.n_cycles)
    counts = coincidence_counts(n1, n2, max_delay)
    edges = cycle_period * (np.arange(-max_delay, max_delay + 2) - 0.5)
    mu_b = (detection.background_rate + detection.dark_rate) * (window[1] - window[0])
    p_click = len(ev.time) / ev.n_cycles
    p_signal = max(p_click - N_DETECTORS * mu_b, 0.0)
    meta = {"cycle_period": cycle_period, "window": tuple(window), "max_delay": max_delay,
            "mu_noise_per_detector": mu_b, "p_signal": p_signal,
            "clicks_per_cycle": p_click}
    return Histogram(edges, counts, ev.n_cycles, None, meta)


def accidental_coincidences(p_signal: float, mu_noise: float, n_cycles: int) -> float:
    """Expected zero-delay coincidences for a single-photon source plus noise.

    ``p_signal`` is the probability per cycle of a real click (either
    detector) and ``mu_noise`` the mean noise clicks per detector and
    cycle; a real photon reaches one detector only.
    """
    return n_cycles * (p_signal * mu_noise + mu_noise ** 2)


def side_peak_mean(hist: Histogram) -> tuple[float, float]:
    """Mean and standard error of the non-zero-delay bins."""
    k = hist.meta["max_delay"]
    side = np.delete(hist.counts, k).astype(float)
    return float(side.mean()), float(math.sqrt(max(side.sum(), 1.0)) / len(side))


def zero_delay(hist: Histogram) -> int:
    return int(hist.counts[hist.meta["max_delay"]])


# --------------------------------------------------------------------------
# spin-photon correlations

@dataclass(frozen=True)
class ConditionalSpinResult:
    p_down_given_plus: float
    p_up_given_minus: float
    ratio_plus_minus: float
    counts: dict

    def errors(self) -> dict[str, float]:
        """Binomial / Poisson standard errors of the three quantities."""
        c = self.counts
        n_p, n_m = c["n_plus"], c["n_minus"]
        e1 = math.sqrt(self.p_down_given_plus * (1 - self.p_down_given_plus) / n_p) if n_p else math.nan
        e2 = math.sqrt(self.p_up_given_minus * (1 - self.p_up_given_minus) / n_m) if n_m else math.nan
        e3 = (self.ratio_plus_minus * math.sqrt(1 / n_p + 1 / n_m)) if n_p and n_m else math.nan
        return {"p_down_given_plus": e1, "p_up_given_minus": e2, "ratio_plus_minus": e3}

    def to_dict(self) -> dict:
        return {"p_down_given_plus": self.p_down_given_plus,
                "p_up_given_minus": self.p_up_given_minus,
                "ratio_plus_minus": self.ratio_plus_minus,
                "errors": self.errors(), "counts": dict(self.counts)}


def spin_photon_correlation(records: TrajectoryEnsemble, detection: DetectionModel,
                            prep: PreparationParams | None = None,
                            readout_fidelity: float | tuple[float, float] = 0.98,
                            window: tuple[float, float] | None = None,
                            seed=0) -> ConditionalSpinResult:
    """Spin readout conditioned on the polarization of the first click.

    The readout leaves only ``D-3/2`` (spin down) dark; every other final
    state, including S, reads bright (spin up).  ``readout_fidelity`` is
    ``(P(dark | down), P(bright | not down))`` or one value for both.
    ``prep`` only documents the preparation the ensemble was started
    from; it is recorded in ``counts``.
    """
    f_dark, f_bright = ((readout_fidelity, readout_fidelity)
                        if np.isscalar(readout_fidelity) else readout_fidelity)
    for f in (f_dark, f_bright):
        if not 0.0 <= f <= 1.0:
            raise ValueError("readout fidelity must be a probability")
    rng = _as_rng(seed)
    ev = detect(records, detection, window, rng)
    first = np.ones(len(ev.cycle), bool)
    first[1:] = ev.cycle[1:] != ev.cycle[:-1]
    cyc, pol, real = ev.cycle[first], ev.polarization[first], ev.real[first]
    down_idx = records.atom_labels.index(SPIN_DOWN)
    is_down = records.final_atom[cyc] == down_idx
    u = rng.random(len(cyc))
    reads_dark = np.where(is_down, u < f_dark, u >= f_bright)
    plus, minus = pol > 0, pol < 0
    n_p, n_m = int(plus.sum()), int(minus.sum())
    if n_p == 0 or n_m == 0:
        raise NoEventsError(f"no heralds in one polarization (sigma+: {n_p}, sigma-: {n_m})")
    dark_p = int((reads_dark & plus).sum())
    bright_m = int((~reads_dark & minus).sum())
    s_idx = records.atom_labels.index(S_LABEL) if S_LABEL in records.atom_labels else -1
    counts = {
        "n_cycles": ev.n_cycles, "n_plus": n_p, "n_minus": n_m,
        "dark_given_plus": dark_p, "bright_given_minus": bright_m,
        "noise_heralds": int((~real).sum()), "real_heralds": int(real.sum()),
        "noise_fraction": float((~real).sum() / max(real.sum(), 1)),
        "heralds_in_sink": int((records.final_atom[cyc] == s_idx).sum()),
        "prep_fidelity": None if prep is None else prep.fidelity,
        "readout_fidelity": [f_dark, f_bright],
    }
    return ConditionalSpinResult(dark_p / n_p, bright_m / n_m, n_p / n_m, counts)


# --------------------------------------------------------------------------
# absorption

def sink_population(model: LindbladModel, rho: np.ndarray) -> float:
    return partial_atom_populations(model.space, rho)[S_LABEL]


def absorb_per_photon(runs: Iterable[tuple[float, LindbladModel]], probe_duration: float,
                      photons_in: float, method: str = "rate",
                      options: SolverOptions | None = None) -> list[tuple[float, float]]:
    """Sink population gained per impinging photon for each ``(theta, model)``.

    ``photons_in`` is the number of photons impinging during
    ``probe_duration``.  ``method="total"`` divides the sink population at
    the end of the probe by ``photons_in``.  ``method="rate"`` divides the
    population gained over the second half of the probe by the photons of
    that half, which removes the cavity and atomic turn-on transient and
    gives the low-photon-number limit.
    """
    if probe_duration <= 0 or photons_in <= 0:
        raise ValueError("probe_duration and photons_in must be > 0")
    if method not in ("rate", "total"):
        raise ValueError(f"unknown method {method!r}")
    options = options or SolverOptions(rel_tol=1e-8, abs_tol=1e-12)
    out = []
    for theta, model in runs:
        n_empty = model.info.get("n_empty", 0.0)
        if n_empty > 0.1:
            warnings.warn(f"drive gives <n>_empty = {n_empty:.3g} > 0.1 at theta = {theta}",
                          stacklevel=2)
        rho0 = initial_mixture(model)
        grid = [0.0, 0.5 * probe_duration, probe_duration]
        rhos = evolve_master(model, rho0, grid, options)
        s = [sink_population(model, r) for r in rhos]
        if method == "total":
            p = (s[2] - s[0]) / photons_in
        else:
            p = (s[2] - s[1]) / (0.5 * photons_in)
        out.append((float(theta), float(p)))
    return out


# --------------------------------------------------------------------------
# fits

class ExponentialFit(NamedTuple):
    tau: float
    tau_err: float
    amplitude: float
    n_counts: int


def fit_exponential(hist: Histogram, t_start: float,
                    background: bool = True) -> ExponentialFit:
    """Poisson maximum-likelihood fit of ``A exp(-t / tau)`` beyond ``t_start``.

    The model is integrated over each bin, so bin width causes no bias.
    When ``background`` is true the histogram's expected noise counts are
    added as a fixed offset.  The error is from the observed information.

    Raises
    ------
    FitError
        With fewer than 5 non-empty bins after ``t_start`` or no decay.
    """
    sel = hist.bin_edges[:-1] >= t_start - 1e-15
    a = hist.bin_edges[:-1][sel]
    b = hist.bin_edges[1:][sel]
    k = hist.counts[sel].astype(float)
    off = hist.background_expected[sel] if background else np.zeros(len(k))
    if np.count_nonzero(k) < 5:
        raise FitError("fewer than 5 non-empty bins beyond t_start")
    span = b[-1] - a[0]
    t_ref = a[0]

    def mean(log_amp, log_tau):
        tau = math.exp(log_tau)
        return math.exp(log_amp) * tau * (np.exp(-(a - t_ref) / tau)
                                          - np.exp(-(b - t_ref) / tau)) + off

    def nll(p):
        mu = mean(*p)
        if np.any(mu <= 0):
            return np.inf
        return float(np.sum(mu - k * np.log(mu)))

    width = np.mean(b - a)
    tau0 = span / 3.0
    amp0 = max(k[0] - off[0], 1.0) / width
    res = optimize.minimize(nll, [math.log(amp0), math.log(tau0)], method="Nelder-Mead",
                            options={"xatol": 1e-9, "fatol": 1e-6, "maxiter": 4000})
    log_amp, log_tau = res.x
    tau = math.exp(log_tau)
    if not res.success or not math.isfinite(tau) or tau > 20 * span:
        raise FitError("no exponential decay found in the data")
    # observed information in (log A, log tau), by central differences
    h = 1e-4
    p = np.array(res.x)
    hess = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
            hess[i, j] = (nll(p + ei + ej) - nll(p + ei - ej)
                          - nll(p - ei + ej) + nll(p - ei - ej)) / (4 * h * h)
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        raise FitError("singular information matrix") from None
    tau_err = tau * math.sqrt(max(cov[1, 1], 0.0))
    if not tau_err < tau:
        raise FitError("decay constant is not determined by the data")
    return ExponentialFit(tau, tau_err, math.exp(log_amp), int(k.sum()))


class SaturationFit(NamedTuple):
    n0: float
    p_abs: float
    n0_err: float


def saturation_curve(n, n0):
    """Transfer probability after ``n`` impinging photons, ``1 - exp(-n / n0)``."""
    return 1.0 - np.exp(-np.asarray(n, dtype=float) / n0)


def fit_saturation(points: Iterable[tuple[float, float]]) -> SaturationFit:
    """Least-squares fit of ``P_S = 1 - exp(-n / n0)``; ``p_abs = 1 / n0``.

    Warns with :class:`FitQualityWarning` when the data fall with ``n``
    by more than the fit residual scatter allows.
    """
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or len(pts) < 3:
        raise FitError("need at least 3 (n, P_S) points")
    n, ps = pts[:, 0], pts[:, 1]
    if np.any(n < 0):
        raise ValueError("photon numbers must be >= 0")
    if np.all(ps <= 0):
        raise FitError("no transfer observed")
    clipped = np.clip(ps, 1e-12, 1 - 1e-12)
    guess = float(np.median(n[n > 0] / -np.log1p(-clipped[n > 0])))
    popt, pcov = optimize.curve_fit(saturation_curve, n, ps, p0=[guess], bounds=(1e-12, np.inf))
    n0 = float(popt[0])
    resid = ps - saturation_curve(n, n0)
    # median absolute deviation, so a single outlier does not hide itself
    scatter = max(1.4826 * float(np.median(np.abs(resid - np.median(resid)))), 1e-12)
    order = np.argsort(n)
    drops = -np.diff(ps[order])
    if np.any(drops > 3.0 * math.sqrt(2.0) * scatter):
        warnings.warn("saturation data decrease with photon number beyond the noise",
                      FitQualityWarning, stacklevel=2)
    return SaturationFit(n0, 1.0 / n0, float(math.sqrt(pcov[0, 0])))


def synthetic_saturation(n_values, p_abs: float, repetitions: int, seed=0) -> list[tuple[float, float]]:
    """Simulated ``(n, P_S)`` data: Poisson photon numbers, independent absorption.

    Each repetition draws ``N ~ Poisson(n)`` photons, each transferring the
    ion with probability ``p_abs``; the mean transfer is exactly
    ``1 - exp(-n p_abs)``.
    """
    rng = _as_rng(seed)
    out = []
    for n in n_values:
        k = rng.poisson(n, repetitions)
        transferred = rng.random(repetitions) < 1.0 - (1.0 - p_abs) ** k
        out.append((float(n), float(transferred.mean())))
    return out


def chi_square_agreement(mean_traj: np.ndarray, sem: np.ndarray,
                         reference: np.ndarray) -> tuple[float, int, float]:
    """Chi-square of trajectory means against reference values.

    Entries with zero standard error must match the reference exactly and
    are excluded from the degrees of freedom.  Returns
    ``(chi2, dof, p_value)``.
    """
    mean_traj, sem, reference = (np.ravel(x) for x in (mean_traj, sem, reference))
    ok = sem > 0
    chi2 = float(np.sum(((mean_traj[ok] - reference[ok]) / sem[ok]) ** 2))
    dof = int(ok.sum())
    return chi2, dof, float(stats.chi2.sf(chi2, dof)) if dof else 1.0


def ensemble_agreement(samples: np.ndarray, reference: np.ndarray, floor: float = 1e-6,
                       drop: Sequence[int] = (-1,)) -> tuple[float, int, float]:
    """Chi-square test of sampled trajectory populations against reference curves.

    ``samples`` has shape ``(n_trajectories, n_times, n_levels)`` and
    ``reference`` shape ``(n_times, n_levels)``.  Samples of one trajectory
    at different times are strongly correlated, so time ``k`` is scored on
    its own disjoint block of trajectories; within a time the level
    populations are correlated and enter through their covariance
    (estimated from all trajectories at that time).  Levels listed in
    ``drop`` (default: the last, fixed by the sum rule) and levels whose
    reference population is below ``floor`` are left out; the latter must
    also be below ``floor`` in the trajectory average.  Returns
    ``(chi2, dof, p_value)``.
    """
    samples = np.asarray(samples, dtype=float)
    reference = np.asarray(reference, dtype=float)
    n, n_t, n_l = samples.shape
    if reference.shape != (n_t, n_l):
        raise ValueError("reference shape does not match the samples")
    if n < 2 * n_t:
        raise ValueError("need at least two trajectories per time point")
    blocks = np.array_split(np.arange(n), n_t)
    chi2, dof = 0.0, 0
    for k, block in enumerate(blocks):
        keep = reference[k] >= floor
        keep[list(drop)] = False
        small = (reference[k] < floor) & (samples[:, k].mean(axis=0) >= floor)
        if np.any(small):
            return math.inf, 1, 0.0
        if not np.any(keep):
            continue
        diff = samples[block, k][:, keep].mean(axis=0) - reference[k, keep]
        cov = np.atleast_2d(np.cov(samples[:, k][:, keep], rowvar=False)) / len(block)
        scale = float(np.abs(cov).max())
        if scale == 0.0:
            if np.any(diff != 0.0):
                return math.inf, 1, 0.0
            continue
        chi2 += float(diff @ np.linalg.pinv(cov, rcond=1e-9, hermitian=True) @ diff)
        dof += int(np.linalg.matrix_rank(cov, tol=1e-9 * scale, hermitian=True))
    return chi2, dof, float(stats.chi2.sf(chi2, dof)) if dof else 1.0


__all__ = [
    "N_DETECTORS", "FitError", "FitQualityWarning", "NoEventsError", "DetectionModel",
    "Histogram", "DetectionEvents", "detect", "time_arrival_histogram",
    "detection_probability", "coincidence_counts", "coincidence_histogram",
    "accidental_coincidences", "side_peak_mean", "zero_delay", "ConditionalSpinResult",
    "spin_photon_correlation", "sink_population", "absorb_per_photon", "ExponentialFit",
    "fit_exponential", "SaturationFit", "saturation_curve", "fit_saturation",
    "synthetic_saturation", "chi_square_agreement", "ensemble_agreement",
]
