"""Closed-form photon-budget and cavity-QED bookkeeping.

Pure functions, forward and inverse.  Rates are angular frequencies in
rad/s; mirror quantities are in ppm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .model import BranchingParams

SPEED_OF_LIGHT = 299_792_458.0

# g_obs is quoted on the sigma+ transition out of m'=-1/2, whose squared
# amplitude is 3/4 of the strongest one after renormalizing the sigma pair.
OBSERVED_TO_BAR = math.sqrt(3.0 / 4.0)


class InconsistentInputsError(ValueError):
    """Raised when measured inputs admit no physical solution."""


def _check_probability(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} = {value!r} is not a probability")


@dataclass(frozen=True)
class EfficiencyChain:
    """Factors whose product is the probability to detect an emitted photon."""

    p_emit: float
    eta_mirror: float = 0.32
    eps_mode: float = 0.90
    eta_path: float = 0.75
    eta_det: float = 0.25

    def __post_init__(self):
        for f in fields(self):
            _check_probability(f.name, getattr(self, f.name))

    def factors(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class MirrorBudget:
    """Mirror transmissions and round-trip loss (ppm), plus measured in-coupling."""

    t_ht: float = 100.0
    t_lt: float = 10.0
    loss: float = 200.0
    eta_in_exp: float = 0.80

    def __post_init__(self):
        if min(self.t_ht, self.t_lt, self.loss) < 0:
            raise ValueError("mirror transmissions and loss must be >= 0")
        if self.total <= 0:
            raise ValueError("t_ht + t_lt + loss must be > 0")
        _check_probability("eta_in_exp", self.eta_in_exp)

    @property
    def total(self) -> float:
        return self.t_ht + self.t_lt + self.loss


def cooperativity(g0: float, kappa: float, gamma: float) -> float:
    """Single-atom cooperativity ``g0**2 / (2 kappa gamma)``."""
    if kappa <= 0 or gamma <= 0:
        raise ZeroDivisionError("kappa and gamma must be > 0")
    return g0 * g0 / (2.0 * kappa * gamma)


def emission_probability(c0: float) -> float:
    """Probability that an excitation leaves through the cavity mode."""
    if c0 < 0:
        raise ValueError("cooperativity must be >= 0")
    if math.isinf(c0):
        return 1.0
    return 2.0 * c0 / (2.0 * c0 + 1.0)


def cooperativity_from_emission(p_emit: float) -> float:
    """Inverse of :func:`emission_probability`."""
    if not 0.0 <= p_emit < 1.0:
        raise InconsistentInputsError(f"p_emit = {p_emit!r} must lie in [0, 1)")
    return p_emit / (2.0 * (1.0 - p_emit))


def detection_chain(chain: EfficiencyChain) -> float:
    return math.prod(chain.factors().values())


def fiber_emission(p_emit: float, eta_mirror: float, eps_mode: float) -> float:
    """Probability of a photon in the single-mode fiber per excitation."""
    return p_emit * eta_mirror * eps_mode


def mirror_outcoupling(budget: MirrorBudget) -> float:
    """Fraction of intracavity loss leaving through the high-transmission mirror."""
    return budget.t_ht / budget.total


def mirror_fractions(budget: MirrorBudget) -> dict[str, float]:
    """HT, LT and loss fractions of the total cavity decay; they sum to 1."""
    return {"HT": budget.t_ht / budget.total, "LT": budget.t_lt / budget.total,
            "loss": budget.loss / budget.total}


def ideal_incoupling(budget: MirrorBudget) -> float:
    """In-coupling through the HT mirror for perfect mode matching."""
    r = (budget.t_ht - budget.t_lt - budget.loss) / budget.total
    return 1.0 - r * r


def mode_matching(eta_in_exp: float, eta_in_ideal: float) -> float:
    """Mode overlap inferred from measured vs ideal in-coupling."""
    if eta_in_ideal <= 0:
        raise ValueError("ideal in-coupling must be > 0")
    return eta_in_exp / eta_in_ideal


def g_bar_from_observed(g_obs: float) -> float:
    """Coupling on the strongest transition from the observed one."""
    return OBSERVED_TO_BAR * g_obs


def observed_from_g_bar(g_bar: float) -> float:
    return g_bar / OBSERVED_TO_BAR


def invert_detection_chain(eta_total_exp: float, eta_mirror: float, eps_mode: float,
                           eta_path: float, eta_det: float, kappa: float,
                           gamma: float) -> tuple[float, float, float]:
    """Infer ``(p_emit, c0, g_obs)`` from a measured detection probability.

    Raises
    ------
    InconsistentInputsError
        If the implied emission probability is not below 1.
    """
    factors = (eta_mirror, eps_mode, eta_path, eta_det)
    if min(factors) <= 0:
        raise ValueError("chain factors must be > 0")
    if eta_total_exp < 0:
        raise ValueError("detection probability must be >= 0")
    p_emit = eta_total_exp / math.prod(factors)
    if p_emit >= 1.0:
        raise InconsistentInputsError(
            f"implied p_emit = {p_emit:.4g} >= 1; chain factors too small for the measured rate")
    c0 = cooperativity_from_emission(p_emit)
    g_obs = math.sqrt(2.0 * c0 * kappa * gamma)
    return p_emit, c0, g_obs


def purcell_branching(c0: float, branching: BranchingParams | None = None) -> float:
    """Probability an excitation ends in S when the cavity adds decay rate 2 c0 x 2 gamma."""
    if c0 < 0:
        raise ValueError("cooperativity must be >= 0")
    b_s = (branching or BranchingParams()).b_s
    if math.isinf(c0):
        return 0.0
    return b_s / (1.0 + 2.0 * c0)


ABSORPTION_FACTORS = {"branching": 0.91, "clebsch": 0.75, "prep": 0.9, "incoupling": 0.8}


def absorption_chain(c0: float, factors: dict[str, float] | None = None,
                     micromotion_reduction: float = 1.0) -> float:
    """Absorption per impinging photon, ``2 c0`` times the reduction factors."""
    if c0 < 0:
        raise ValueError("cooperativity must be >= 0")
    f = dict(ABSORPTION_FACTORS)
    if factors:
        unknown = set(factors) - set(f)
        if unknown:
            raise ValueError(f"unknown absorption factors {sorted(unknown)}")
        f.update(factors)
    return 2.0 * c0 * math.prod(f.values()) * micromotion_reduction


def kappa_from_geometry(finesse: float, length: float) -> float:
    """Field decay rate (rad/s): half the linewidth FSR/finesse, times 2 pi."""
    if length <= 0 or finesse <= 0:
        raise ValueError("finesse and length must be > 0")
    if math.isinf(finesse):
        return 0.0
    return 2.0 * math.pi * SPEED_OF_LIGHT / (4.0 * length * finesse)


@dataclass(frozen=True)
class BudgetInputs:
    """Measured or quoted values the closed-form chain starts from."""

    g_obs: float = 2.0 * math.pi * 1.8e6
    c0: float = 0.032
    eta_total_exp: float = 0.0033
    eta_mirror: float = 0.32
    eps_mode: float = 0.90
    eta_path: float = 0.75
    eta_det: float = 0.25
    eta_in_exp: float = 0.80
    micromotion_reduction: float = 0.58


def budget_report(params, inputs: BudgetInputs | None = None,
                  branching: BranchingParams | None = None,
                  absorption_factors: dict[str, float] | None = None) -> dict:
    """Evaluate every closed-form quantity.

    ``measured`` starts from the quoted values in ``inputs``; ``model``
    starts from the coupling, decay rates and geometry of ``params`` (a
    :class:`~ioncav.model.CavityQEDParams`).
    """
    inputs = inputs or BudgetInputs()
    branching = branching or BranchingParams()
    mirrors = MirrorBudget(params.t_ht, params.t_lt, params.loss, inputs.eta_in_exp)
    two_pi_mhz = 2.0 * math.pi * 1e6

    p_emit_q = emission_probability(inputs.c0)
    chain = EfficiencyChain(p_emit_q, inputs.eta_mirror, inputs.eps_mode,
                            inputs.eta_path, inputs.eta_det)
    eta_ideal = ideal_incoupling(mirrors)
    p_inv, c0_inv, g_inv = invert_detection_chain(
        inputs.eta_total_exp, inputs.eta_mirror, inputs.eps_mode, inputs.eta_path,
        inputs.eta_det, params.kappa, params.gamma)
    measured = {
        "cooperativity_from_g_obs": cooperativity(inputs.g_obs, params.kappa, params.gamma),
        "emission_probability": p_emit_q,
        "detection_chain": detection_chain(chain),
        "fiber_emission": fiber_emission(p_emit_q, inputs.eta_mirror, inputs.eps_mode),
        "mirror_outcoupling": mirror_outcoupling(mirrors),
        "ideal_incoupling": eta_ideal,
        "mode_matching": mode_matching(inputs.eta_in_exp, eta_ideal),
        "g_bar_from_observed_2pi_MHz": g_bar_from_observed(inputs.g_obs) / two_pi_mhz,
        "inverted_p_emit": p_inv,
        "inverted_cooperativity": c0_inv,
        "inverted_g_obs_2pi_MHz": g_inv / two_pi_mhz,
        "kappa_from_geometry_2pi_MHz":
            kappa_from_geometry(params.finesse, params.length) / two_pi_mhz,
        "purcell_branching": purcell_branching(inputs.c0, branching),
        "absorption_chain": absorption_chain(inputs.c0, absorption_factors),
        "absorption_chain_reduced": absorption_chain(inputs.c0, absorption_factors,
                                                     inputs.micromotion_reduction),
    }
    g_obs = observed_from_g_bar(params.g_bar)
    c0 = cooperativity(g_obs, params.kappa, params.gamma)
    model = {
        "g_bar_2pi_MHz": params.g_bar / two_pi_mhz,
        "g_obs_2pi_MHz": g_obs / two_pi_mhz,
        "cooperativity": c0,
        "emission_probability": emission_probability(c0),
        "purcell_branching": purcell_branching(c0, branching),
        "absorption_chain": absorption_chain(c0, absorption_factors),
        "lifetime_ns": 1e9 / (2.0 * params.gamma),
        "lifetime_with_cavity_ns": 1e9 / (2.0 * params.gamma * (1.0 + 2.0 * c0)),
        "mirror_fractions": mirror_fractions(mirrors),
    }
    return {"measured": measured, "model": model,
            "inputs": {f.name: getattr(inputs, f.name) for f in fields(inputs)}}


__all__ = [
    "SPEED_OF_LIGHT", "InconsistentInputsError", "EfficiencyChain", "MirrorBudget",
    "cooperativity", "emission_probability", "cooperativity_from_emission",
    "detection_chain", "fiber_emission", "mirror_outcoupling", "mirror_fractions",
    "ideal_incoupling", "mode_matching", "g_bar_from_observed", "observed_from_g_bar",
    "invert_detection_chain", "purcell_branching", "ABSORPTION_FACTORS",
    "absorption_chain", "kappa_from_geometry", "BudgetInputs", "budget_report",
]
