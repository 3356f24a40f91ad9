"""Yb+ level structure, cavity-QED parameters and Lindblad model assembly.

Seven atomic states are kept: the four Zeeman sublevels of the metastable
D manifold (J = 3/2), the two sublevels of the excited state (J' = 1/2)
and one lumped, absorbing S sink.  The magnetic field lies along the
cavity axis, so only sigma+ and sigma- transitions couple to the two
circular cavity modes; pi decay goes to free space only.

Polarization convention: a sigma+ photon is emitted on E(m') -> D(m' - 1)
and absorbed on D(m) -> E(m + 1).

Clebsch-Gordan weights for the J' = 1/2 -> J = 3/2 decay (squared)::

    E(-1/2): sigma+ -> D(-3/2) 1/2,  pi -> D(-1/2) 1/3,  sigma- -> D(+1/2) 1/6
    E(+1/2): sigma+ -> D(-1/2) 1/6,  pi -> D(+1/2) 1/3,  sigma- -> D(+3/2) 1/2

Restricted to the two cavity-coupled transitions of E(-1/2) the
amplitudes renormalize to sqrt(3)/2 (sigma+) and 1/2 (sigma-).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .hilbert import (
    MINUS, PLUS, ConfigurationError, HilbertSpace, annihilation, atomic_projector,
    build_space, is_hermitian, number,
)

TWO_PI = 2.0 * math.pi
SIGMA_PLUS = "sigma+"
SIGMA_MINUS = "sigma-"
PI = "pi"
_MODE_OF = {SIGMA_PLUS: PLUS, SIGMA_MINUS: MINUS}

D_LABELS = ("D-3/2", "D-1/2", "D+1/2", "D+3/2")
E_LABELS = ("E-1/2", "E+1/2")
S_LABEL = "S"

# The two spin states read out after photon emission.
SPIN_DOWN = "D-3/2"
SPIN_UP = "D+1/2"


class WeakDriveWarning(UserWarning):
    """The coherent probe is too strong for the weak-drive picture."""


def mhz(value: float) -> float:
    """Convert ``value`` in units of 2*pi*MHz to rad/s."""
    return TWO_PI * value * 1e6


# --------------------------------------------------------------------------
# level structure

@dataclass(frozen=True)
class LevelScheme:
    d_sublevels: tuple[str, ...] = D_LABELS
    e_sublevels: tuple[str, ...] = E_LABELS
    s_sink: str = S_LABEL
    zeeman_shifts: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.labels) != 7:
            raise ConfigurationError(
                f"level scheme must have exactly 7 atomic states, got {len(self.labels)}")
        for lab in self.zeeman_shifts:
            if lab not in self.labels:
                raise ConfigurationError(f"Zeeman shift for unknown level {lab!r}")

    @property
    def labels(self) -> tuple[str, ...]:
        return (*self.d_sublevels, *self.e_sublevels, self.s_sink)

    def shift(self, label: str) -> float:
        return float(self.zeeman_shifts.get(label, 0.0))


@dataclass(frozen=True)
class Transition:
    e: str
    d: str
    polarization: str
    amplitude: float


@dataclass(frozen=True)
class TransitionTable:
    entries: tuple[Transition, ...]

    def __post_init__(self):
        for e in {t.e for t in self.entries}:
            total = sum(t.amplitude ** 2 for t in self.entries if t.e == e)
            if abs(total - 1.0) > 1e-12:
                raise ConfigurationError(f"squared amplitudes from {e} sum to {total}, not 1")

    def from_excited(self, e: str) -> list[Transition]:
        return [t for t in self.entries if t.e == e]

    def cavity_transitions(self) -> list[Transition]:
        return [t for t in self.entries if t.polarization in _MODE_OF]

    def cavity_amplitudes(self, e: str) -> dict[str, float]:
        """Amplitudes of the sigma+/sigma- decays of ``e``, normalized over those two."""
        rows = [t for t in self.from_excited(e) if t.polarization in _MODE_OF]
        norm = math.sqrt(sum(t.amplitude ** 2 for t in rows))
        return {t.polarization: t.amplitude / norm for t in rows}

    def max_cavity_amplitude(self) -> float:
        return max(t.amplitude for t in self.cavity_transitions())


def default_transition_table() -> TransitionTable:
    s = math.sqrt
    return TransitionTable((
        Transition("E-1/2", "D-3/2", SIGMA_PLUS, s(1 / 2)),
        Transition("E-1/2", "D-1/2", PI, s(1 / 3)),
        Transition("E-1/2", "D+1/2", SIGMA_MINUS, s(1 / 6)),
        Transition("E+1/2", "D-1/2", SIGMA_PLUS, s(1 / 6)),
        Transition("E+1/2", "D+1/2", PI, s(1 / 3)),
        Transition("E+1/2", "D+3/2", SIGMA_MINUS, s(1 / 2)),
    ))


# --------------------------------------------------------------------------
# parameter blocks

@dataclass(frozen=True)
class CavityQEDParams:
    """Rates in rad/s, transmittances and loss in ppm, length in m.

    ``lifetime`` (s), when given, is checked against ``1/(2 gamma)``.
    """

    g_bar: float
    kappa: float
    gamma: float
    t_ht: float = 100.0
    t_lt: float = 10.0
    loss: float = 200.0
    finesse: float = 2.0e4
    length: float = 170e-6
    lifetime: float | None = None

    def __post_init__(self):
        if self.g_bar < 0:
            raise ConfigurationError("g_bar must be >= 0")
        if self.kappa <= 0 or self.gamma <= 0:
            raise ConfigurationError("kappa and gamma must be > 0")
        if self.t_ht <= self.t_lt:
            raise ConfigurationError("expected an asymmetric cavity with t_ht > t_lt")
        if min(self.t_ht, self.t_lt, self.loss) < 0:
            raise ConfigurationError("transmittances and loss must be >= 0")
        if self.lifetime is not None:
            tau = 1.0 / (2.0 * self.gamma)
            if abs(tau - self.lifetime) > 0.1e-9:
                raise ConfigurationError(
                    f"1/(2 gamma) = {tau * 1e9:.2f} ns inconsistent with lifetime "
                    f"{self.lifetime * 1e9:.2f} ns")

    @property
    def mirror_fractions(self) -> dict[str, float]:
        total = self.t_ht + self.t_lt + self.loss
        return {"mirror_HT": self.t_ht / total, "mirror_LT": self.t_lt / total,
                "intracavity_loss": self.loss / total}

    @property
    def g_obs(self) -> float:
        """Effective coupling summed over the sigma+ and sigma- decays of E(-1/2)."""
        return self.g_bar / math.sqrt(0.75)

    @property
    def cooperativity(self) -> float:
        return self.g_obs ** 2 / (2 * self.kappa * self.gamma)


def default_params(**overrides) -> CavityQEDParams:
    p = CavityQEDParams(g_bar=mhz(1.6), kappa=mhz(25.0), gamma=mhz(2.11),
                        t_ht=100.0, t_lt=10.0, loss=200.0, finesse=2.0e4,
                        length=170e-6, lifetime=37.7e-9)
    return replace(p, **overrides) if overrides else p


@dataclass(frozen=True)
class BranchingParams:
    b_s: float = 0.982
    b_d: float = 0.018

    def __post_init__(self):
        if abs(self.b_s + self.b_d - 1.0) > 1e-12 or min(self.b_s, self.b_d) < 0:
            raise ConfigurationError("branching ratios must be >= 0 and sum to 1")


@dataclass(frozen=True)
class MicromotionParams:
    omega_rf: float = TWO_PI * 22e6
    beta: float = 0.0

    def __post_init__(self):
        if self.beta < 0 or self.omega_rf <= 0:
            raise ConfigurationError("micromotion needs beta >= 0 and omega_rf > 0")

    @property
    def active(self) -> bool:
        return self.beta > 0

    @property
    def max_step(self) -> float:
        return (TWO_PI / self.omega_rf) / 20.0


@dataclass(frozen=True)
class DriveParams:
    """Coherent cavity drive; ``amplitude`` and ``detuning`` in rad/s."""

    amplitude: float
    detuning: float = 0.0
    waveplate_angle: float = 5.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ConfigurationError("drive amplitude must be >= 0")

    @property
    def polarization(self) -> tuple[float, float]:
        return polarization_weights(self.waveplate_angle)


def polarization_weights(theta_deg: float) -> tuple[float, float]:
    """Field weights (c+, c-) on the sigma+/sigma- modes for waveplate angle ``theta``."""
    x = math.radians(2.0 * (theta_deg - 5.0))
    return math.cos(x), math.sin(x)


def drive_amplitude(photon_rate: float, kappa: float, eta_in: float = 0.80) -> float:
    """Drive amplitude for a given rate of photons impinging on the cavity.

    With ``H = eta (a + a^dag)`` the empty resonant cavity settles at
    ``<n> = (eta/kappa)^2`` and leaks ``2 kappa <n> = 2 eta^2 / kappa`` photons
    per second.  Requiring that leak to equal ``eta_in * photon_rate`` gives
    ``eta = sqrt(eta_in * photon_rate * kappa / 2)``.
    """
    return math.sqrt(eta_in * photon_rate * kappa / 2.0)


def input_photon_rate(amplitude: float, kappa: float, eta_in: float = 0.80) -> float:
    return 2.0 * amplitude ** 2 / (kappa * eta_in)


@dataclass(frozen=True)
class PreparationParams:
    fidelity: float = 0.9
    residual_distribution: dict | None = None

    def __post_init__(self):
        if not 0.0 <= self.fidelity <= 1.0:
            raise ConfigurationError("preparation fidelity must lie in [0, 1]")
        if self.residual_distribution is not None:
            total = self.fidelity + sum(self.residual_distribution.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigurationError("fidelity + residual populations must sum to 1")

    def distribution(self, target: str = SPIN_DOWN) -> dict[str, float]:
        if self.residual_distribution is not None:
            out = {target: self.fidelity}
            out.update(self.residual_distribution)
            return out
        others = [d for d in D_LABELS if d != target]
        rest = (1.0 - self.fidelity) / len(others)
        out = {target: self.fidelity}
        out.update({d: rest for d in others})
        return out


@dataclass(frozen=True)
class ExcitationPulse:
    """Square pulse resonant with ``d_label -> e_label``.

    The term is ``(rabi/2)(|e><d| + h.c.)``; the default Rabi rate gives
    pulse area pi.
    """

    duration: float
    rabi_rate: float | None = None
    start: float = 0.0
    d_label: str = SPIN_DOWN
    e_label: str = "E-1/2"

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigurationError("pulse duration must be > 0")

    @property
    def rabi(self) -> float:
        return math.pi / self.duration if self.rabi_rate is None else self.rabi_rate

    @property
    def area(self) -> float:
        return self.rabi * self.duration

    @property
    def end(self) -> float:
        return self.start + self.duration

    def term(self, space: HilbertSpace) -> "TimeTerm":
        up = atomic_projector(space, self.d_label, self.e_label)
        op = 0.5 * self.rabi * (up + up.conj().T)
        return TimeTerm(op, "window", (self.start, self.end))


def excitation_pulse(scheme: LevelScheme, pulse_duration: float,
                     rabi_rate: float | None = None, start: float = 0.0) -> ExcitationPulse:
    if SPIN_DOWN not in scheme.labels or "E-1/2" not in scheme.labels:
        raise ConfigurationError("level scheme lacks the pulse transition")
    return ExcitationPulse(pulse_duration, rabi_rate, start)


# --------------------------------------------------------------------------
# Lindblad model

@dataclass(frozen=True)
class TimeTerm:
    """Hamiltonian term ``coefficient(t) * operator``.

    kind ``"window"``: params ``(t_on, t_off)``, coefficient 1 on ``[t_on, t_off)``.
    kind ``"cos"``: params ``(amplitude, omega, phase)``,
    coefficient ``amplitude * cos(omega t + phase)``.
    """

    operator: np.ndarray
    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in ("window", "cos"):
            raise ConfigurationError(f"unknown time dependence {self.kind!r}")

    def coefficient(self, t: float) -> float:
        if self.kind == "window":
            t_on, t_off = self.params
            return 1.0 if t_on <= t < t_off else 0.0
        amp, omega, phase = self.params
        return amp * math.cos(omega * t + phase)


@dataclass(frozen=True, eq=False)
class LindbladModel:
    space: HilbertSpace
    hamiltonian: np.ndarray
    collapse_channels: tuple
    time_terms: tuple = ()
    max_step: float = math.inf
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.space.dim
        if self.hamiltonian.shape != (d, d):
            raise ConfigurationError("Hamiltonian shape does not match the space")
        if not is_hermitian(self.hamiltonian):
            raise ConfigurationError("Hamiltonian is not Hermitian")
        for term in self.time_terms:
            if not is_hermitian(term.operator):
                raise ConfigurationError("time-dependent term is not Hermitian")
        for op, _ in self.collapse_channels:
            if op.shape != (d, d):
                raise ConfigurationError("collapse operator shape does not match the space")

    @property
    def tags(self) -> list[str]:
        return [tag for _, tag in self.collapse_channels]

    @property
    def operators(self) -> list[np.ndarray]:
        return [op for op, _ in self.collapse_channels]

    @property
    def is_time_dependent(self) -> bool:
        return len(self.time_terms) > 0

    @property
    def breakpoints(self) -> list[float]:
        pts = set()
        for term in self.time_terms:
            if term.kind == "window":
                pts.update(term.params)
        return sorted(pts)

    def hamiltonian_at(self, t: float) -> np.ndarray:
        h = self.hamiltonian.copy()
        for term in self.time_terms:
            c = term.coefficient(t)
            if c != 0.0:
                h += c * term.operator
        return h

    def effective_hamiltonian(self) -> np.ndarray:
        """Time-independent part of ``H - (i/2) sum L^dag L``."""
        h = self.hamiltonian.astype(complex)
        for op in self.operators:
            h = h - 0.5j * (op.conj().T @ op)
        return h

    def shortest_decay_time(self) -> float:
        rates = [np.linalg.norm(op.conj().T @ op, 2) for op in self.operators]
        rates = [r for r in rates if r > 0]
        return 1.0 / max(rates) if rates else math.inf

    def channels_matching(self, predicate: Callable[[str], bool]) -> list[int]:
        return [k for k, tag in enumerate(self.tags) if predicate(tag)]


def is_cavity_tag(tag: str) -> bool:
    return tag.startswith(("mirror_", "intracavity_loss"))


def tag_polarization(tag: str) -> str | None:
    if tag.endswith(SIGMA_PLUS):
        return SIGMA_PLUS
    if tag.endswith(SIGMA_MINUS):
        return SIGMA_MINUS
    return None


def _base_terms(space: HilbertSpace, params: CavityQEDParams, branching: BranchingParams,
                scheme: LevelScheme, table: TransitionTable):
    if not table.cavity_transitions():
        raise ConfigurationError("transition table has no cavity-coupled transitions")
    for e in scheme.e_sublevels:
        if not table.from_excited(e):
            raise ConfigurationError(f"missing transition amplitudes for {e}")
    h = np.zeros((space.dim, space.dim), dtype=complex)
    amp_max = table.max_cavity_amplitude()
    couplings = {}
    for t in table.cavity_transitions():
        g = params.g_bar * t.amplitude / amp_max
        couplings[(t.e, t.d)] = g
        if g == 0.0:
            continue
        a = annihilation(space, _MODE_OF[t.polarization])
        up = atomic_projector(space, t.d, t.e) @ a
        h += g * (up + up.conj().T)
    for lab in scheme.labels:
        w = scheme.shift(lab)
        if w:
            h += w * atomic_projector(space, lab, lab)

    channels = []
    for pol, mode in _MODE_OF.items():
        a = annihilation(space, mode)
        for name, frac in params.mirror_fractions.items():
            if frac > 0:
                channels.append((math.sqrt(2 * params.kappa * frac) * a, f"{name}_{pol}"))
    for e in scheme.e_sublevels:
        channels.append((math.sqrt(2 * params.gamma * branching.b_s)
                         * atomic_projector(space, e, scheme.s_sink), "spont_to_S"))
    for e in scheme.e_sublevels:
        for t in table.from_excited(e):
            rate = 2 * params.gamma * branching.b_d * t.amplitude ** 2
            if rate > 0:
                channels.append((math.sqrt(rate) * atomic_projector(space, e, t.d),
                                 f"spont_to_D({t.d[1:]})"))
    return h, channels, couplings


def _micromotion_term(space: HilbertSpace, scheme: LevelScheme,
                      micromotion: MicromotionParams) -> TimeTerm:
    p_e = sum(atomic_projector(space, e, e) for e in scheme.e_sublevels)
    amp = micromotion.beta * micromotion.omega_rf
    return TimeTerm(p_e, "cos", (amp, micromotion.omega_rf, 0.0))


def build_emission_model(params: CavityQEDParams, branching: BranchingParams | None = None,
                         scheme: LevelScheme | None = None, table: TransitionTable | None = None,
                         micromotion: MicromotionParams | None = None,
                         pulse: ExcitationPulse | None = None, n_max: int = 1) -> LindbladModel:
    """Ion + two-mode cavity model for the pulsed emission experiments."""
    branching = branching or BranchingParams()
    scheme = scheme or LevelScheme()
    table = table or default_transition_table()
    micromotion = micromotion or MicromotionParams()
    if n_max < 1:
        raise ConfigurationError("emission model needs n_max >= 1")
    space = build_space(scheme, n_max)
    h, channels, couplings = _base_terms(space, params, branching, scheme, table)
    terms = []
    if pulse is not None:
        terms.append(pulse.term(space))
    max_step = math.inf
    if micromotion.active:
        terms.append(_micromotion_term(space, scheme, micromotion))
        max_step = micromotion.max_step
    info = {"kind": "emission", "params": params, "branching": branching, "scheme": scheme,
            "table": table, "micromotion": micromotion, "pulse": pulse, "couplings": couplings}
    return LindbladModel(space, h, tuple(channels), tuple(terms), max_step, info)


def build_absorption_model(params: CavityQEDParams, drive: DriveParams,
                           branching: BranchingParams | None = None,
                           scheme: LevelScheme | None = None,
                           table: TransitionTable | None = None,
                           prep: PreparationParams | None = None,
                           micromotion: MicromotionParams | None = None,
                           n_max: int = 2) -> LindbladModel:
    """Emission-model structure plus a coherent drive of both cavity modes.

    Frame: rotating at the drive frequency; ``drive.detuning`` is the drive
    minus the (common) cavity and atomic resonance.
    """
    branching = branching or BranchingParams()
    scheme = scheme or LevelScheme()
    table = table or default_transition_table()
    prep = prep or PreparationParams()
    micromotion = micromotion or MicromotionParams()
    space = build_space(scheme, n_max)
    h, channels, couplings = _base_terms(space, params, branching, scheme, table)
    c_plus, c_minus = drive.polarization
    for c, mode in ((c_plus, PLUS), (c_minus, MINUS)):
        if c != 0.0 and drive.amplitude > 0:
            a = annihilation(space, mode)
            h += drive.amplitude * c * (a + a.conj().T)
    if drive.detuning:
        p_e = sum(atomic_projector(space, e, e) for e in scheme.e_sublevels)
        h -= drive.detuning * (number(space, PLUS) + number(space, MINUS) + p_e)
    n_empty = (drive.amplitude / params.kappa) ** 2
    if n_empty > 0.5:
        warnings.warn(f"empty-cavity photon number {n_empty:.3g} exceeds 0.5",
                      WeakDriveWarning, stacklevel=2)
    terms = []
    max_step = math.inf
    if micromotion.active:
        terms.append(_micromotion_term(space, scheme, micromotion))
        max_step = micromotion.max_step
    info = {"kind": "absorption", "params": params, "branching": branching, "scheme": scheme,
            "table": table, "micromotion": micromotion, "drive": drive, "prep": prep,
            "couplings": couplings, "n_empty": n_empty}
    return LindbladModel(space, h, tuple(channels), tuple(terms), max_step, info)


def initial_mixture(model: LindbladModel, prep: PreparationParams | None = None) -> np.ndarray:
    """Density matrix of the prepared D-manifold mixture with empty cavity."""
    from .hilbert import mixture

    prep = prep or model.info.get("prep") or PreparationParams(fidelity=1.0)
    return mixture(model.space, prep.distribution())


__all__: Sequence[str] = [
    "TWO_PI", "SIGMA_PLUS", "SIGMA_MINUS", "PI", "D_LABELS", "E_LABELS", "S_LABEL",
    "SPIN_DOWN", "SPIN_UP", "WeakDriveWarning", "mhz", "LevelScheme", "Transition",
    "TransitionTable", "default_transition_table", "CavityQEDParams", "default_params",
    "BranchingParams", "MicromotionParams", "DriveParams", "polarization_weights",
    "drive_amplitude", "input_photon_rate", "PreparationParams", "ExcitationPulse",
    "excitation_pulse", "TimeTerm", "LindbladModel", "is_cavity_tag", "tag_polarization",
    "build_emission_model", "build_absorption_model", "initial_mixture",
]
