"""Composite ion x two-mode cavity Hilbert space.

Basis ordering is fixed: atomic index slowest, then the sigma+ photon
number, then the sigma- photon number::

    flat = (atom * (n_max + 1) + n_plus) * (n_max + 1) + n_minus

Operators, states and density matrices are plain dense ``complex128``
numpy arrays; every space used by the experiments has ``dim <= 100``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

PLUS = "+"
MINUS = "-"
MODES = (PLUS, MINUS)


class ConfigurationError(ValueError):
    """Raised for an invalid space or model configuration."""


class BasisLabel(NamedTuple):
    atom_state: str
    fock_plus: int
    fock_minus: int


@dataclass(frozen=True)
class HilbertSpace:
    atom_labels: tuple[str, ...]
    n_max: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.atom_labels) == 0:
            raise ConfigurationError("level scheme has no atomic states")
        if len(set(self.atom_labels)) != len(self.atom_labels):
            raise ConfigurationError("duplicate atomic labels")
        if self.n_max < 0:
            raise ConfigurationError("n_max must be >= 0")
        object.__setattr__(
            self, "_index", {lab: i for i, lab in enumerate(self.atom_labels)})

    @property
    def n_fock(self) -> int:
        return self.n_max + 1

    @property
    def n_atom(self) -> int:
        return len(self.atom_labels)

    @property
    def dim(self) -> int:
        return self.n_atom * self.n_fock ** 2

    def atom_index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ConfigurationError(f"unknown atomic label {label!r}") from None

    def flat_index(self, label: BasisLabel | tuple) -> int:
        atom, n_p, n_m = label
        if not (0 <= n_p <= self.n_max and 0 <= n_m <= self.n_max):
            raise ConfigurationError(f"photon number out of range in {label}")
        a = self.atom_index(atom)
        return (a * self.n_fock + n_p) * self.n_fock + n_m

    def label(self, index: int) -> BasisLabel:
        if not 0 <= index < self.dim:
            raise IndexError(index)
        a, rest = divmod(index, self.n_fock ** 2)
        n_p, n_m = divmod(rest, self.n_fock)
        return BasisLabel(self.atom_labels[a], n_p, n_m)

    def labels(self) -> list[BasisLabel]:
        return [self.label(i) for i in range(self.dim)]

    def identity(self) -> np.ndarray:
        return np.eye(self.dim, dtype=complex)

    # diagonal weights used for populations and photon numbers
    def atom_weights(self) -> np.ndarray:
        """Row ``k`` is the indicator of atomic level ``k`` over the flat basis."""
        w = np.zeros((self.n_atom, self.dim))
        for k in range(self.n_atom):
            w[k, k * self.n_fock ** 2:(k + 1) * self.n_fock ** 2] = 1.0
        return w

    def photon_number_weights(self) -> np.ndarray:
        """Rows: sigma+ and sigma- photon numbers as diagonal weights."""
        w = np.zeros((2, self.dim))
        for i in range(self.dim):
            lab = self.label(i)
            w[0, i] = lab.fock_plus
            w[1, i] = lab.fock_minus
        return w


def build_space(level_scheme, n_max: int) -> HilbertSpace:
    """Build the composite space for a level scheme (or a sequence of labels)."""
    labels = getattr(level_scheme, "labels", level_scheme)
    if callable(labels):
        labels = labels()
    return HilbertSpace(tuple(labels), int(n_max))


def _fock_annihilation(n_fock: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n_fock, dtype=float)), k=1).astype(complex)


def annihilation(space: HilbertSpace, mode: str) -> np.ndarray:
    """Truncated ladder operator ``a`` on one cavity polarization mode."""
    a = _fock_annihilation(space.n_fock)
    eye_f = np.eye(space.n_fock)
    eye_a = np.eye(space.n_atom)
    if mode == PLUS:
        return np.kron(eye_a, np.kron(a, eye_f))
    if mode == MINUS:
        return np.kron(eye_a, np.kron(eye_f, a))
    raise ConfigurationError(f"unknown cavity mode {mode!r}")


def number(space: HilbertSpace, mode: str) -> np.ndarray:
    a = annihilation(space, mode)
    return a.conj().T @ a


def atomic_projector(space: HilbertSpace, from_label: str, to_label: str) -> np.ndarray:
    """``|to><from|`` on the atom, identity on both photon modes."""
    i = space.atom_index(from_label)
    j = space.atom_index(to_label)
    sig = np.zeros((space.n_atom, space.n_atom), dtype=complex)
    sig[j, i] = 1.0
    return np.kron(sig, np.eye(space.n_fock ** 2))


def basis_state(space: HilbertSpace, atom: str, n_plus: int = 0, n_minus: int = 0) -> np.ndarray:
    psi = np.zeros(space.dim, dtype=complex)
    psi[space.flat_index((atom, n_plus, n_minus))] = 1.0
    return psi


def normalize(psi: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(psi)
    if nrm == 0:
        raise ValueError("cannot normalize the zero vector")
    return psi / nrm


def ket_to_dm(psi: np.ndarray) -> np.ndarray:
    return np.outer(psi, psi.conj())


def mixture(space: HilbertSpace, weights: dict[str, float]) -> np.ndarray:
    """Diagonal atomic mixture tensored with the photon vacuum."""
    rho = np.zeros((space.dim, space.dim), dtype=complex)
    for atom, p in weights.items():
        k = space.flat_index((atom, 0, 0))
        rho[k, k] += p
    return rho


def is_hermitian(op: np.ndarray, atol: float = 1e-12) -> bool:
    return bool(np.allclose(op, op.conj().T, rtol=0.0, atol=atol))


def check_density(rho: np.ndarray, trace_tol: float = 1e-8,
                  herm_tol: float = 1e-10, pos_tol: float = 1e-8) -> None:
    """Raise ``ValueError`` unless ``rho`` is a valid density matrix."""
    tr = np.trace(rho).real
    if abs(tr - 1.0) > trace_tol:
        raise ValueError(f"trace {tr!r} deviates from 1")
    if not is_hermitian(rho, herm_tol):
        raise ValueError("density matrix is not Hermitian")
    ev = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if ev.min() < -pos_tol:
        raise ValueError(f"negative eigenvalue {ev.min():.3e}")


def expect(op: np.ndarray, rho: np.ndarray) -> complex:
    if rho.ndim == 1:
        return np.vdot(rho, op @ rho)
    return np.trace(op @ rho)


def partial_atom_populations(space: HilbertSpace, rho: np.ndarray) -> dict[str, float]:
    diag = np.real(np.diag(rho)) if rho.ndim == 2 else np.abs(rho) ** 2
    pops = space.atom_weights() @ diag
    return dict(zip(space.atom_labels, pops))


def operator_sum(terms: Iterable[tuple[complex, np.ndarray]], dim: int) -> np.ndarray:
    out = np.zeros((dim, dim), dtype=complex)
    for c, op in terms:
        out += c * op
    return out


__all__: Sequence[str] = [
    "PLUS", "MINUS", "MODES", "BasisLabel", "HilbertSpace", "ConfigurationError",
    "build_space", "annihilation", "number", "atomic_projector", "basis_state",
    "normalize", "ket_to_dm", "mixture", "is_hermitian", "check_density", "expect",
    "partial_atom_populations", "operator_sum",
]
