"""Dense operators for a cavity coupled to a two-level ancilla.

Conventions used everywhere in the package:

* The composite space is ``cavity (x) qubit`` with the cavity factor leftmost.
* The qubit basis is ``{|g>, |e>}`` with ``|g>`` at index 0 and ``sigma_z |g> = +|g>``.
* Operators are plain ``numpy`` complex arrays.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import reduce

import numpy as np
import scipy.linalg

from .errors import TruncationWarning

QUBIT_DIM = 2
G, E = 0, 1


@dataclass(frozen=True)
class HilbertSpace:
    """Factorized space ``cavity (x) qubit``."""

    d_c: int
    d_q: int = QUBIT_DIM

    def __post_init__(self):
        if self.d_c < 2:
            raise ValueError(f"cavity truncation must be >= 2, got {self.d_c}")

    @property
    def factors(self) -> tuple[int, int]:
        return (self.d_c, self.d_q)

    @property
    def total_dim(self) -> int:
        return self.d_c * self.d_q

    def cavity_op(self, op: np.ndarray) -> np.ndarray:
        """Lift a cavity operator to ``op (x) I``."""
        return tensor(op, np.eye(self.d_q))

    def qubit_op(self, op: np.ndarray) -> np.ndarray:
        """Lift a qubit operator to ``I (x) op``."""
        return tensor(np.eye(self.d_c), op)

    def basis(self, n: int, q: int = G) -> np.ndarray:
        """Product state ``|n> (x) |q>`` as a vector."""
        return np.kron(fock_state(n, self.d_c), np.eye(self.d_q)[q].astype(complex))

    def product(self, cavity_state: np.ndarray, q: int = G) -> np.ndarray:
        return np.kron(np.asarray(cavity_state, dtype=complex), np.eye(self.d_q)[q])


def fock_annihilation(d_c: int) -> np.ndarray:
    """Truncated annihilation operator with ``a[n, n+1] = sqrt(n+1)``."""
    if d_c < 2:
        raise ValueError(f"cavity truncation must be >= 2, got {d_c}")
    return np.diag(np.sqrt(np.arange(1, d_c)), k=1).astype(complex)


def fock_state(n: int, d_c: int) -> np.ndarray:
    if not 0 <= n < d_c:
        raise ValueError(f"Fock level {n} outside truncation {d_c}")
    v = np.zeros(d_c, dtype=complex)
    v[n] = 1.0
    return v


_PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    # |g><e|: lowers |e> (index 1) to |g> (index 0)
    "minus": np.array([[0, 1], [0, 0]], dtype=complex),
}
_PAULI["identity"] = _PAULI["I"]


def pauli(which: str) -> np.ndarray:
    """Return one of ``X, Y, Z, minus, identity`` in the ``{|g>, |e>}`` basis."""
    try:
        return _PAULI[which].copy()
    except KeyError:
        raise ValueError(f"unknown Pauli operator {which!r}") from None


def tensor(*ops: np.ndarray) -> np.ndarray:
    """Kronecker product, leftmost factor first."""
    return reduce(np.kron, ops)


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def matrix_exponential(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of a square matrix or a stack of square matrices.

    Scaling-and-squaring Pade approximant (``scipy.linalg.expm``), which also
    accepts arrays of shape ``(..., n, n)``.
    """
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"matrix_exponential needs square input, got shape {a.shape}")
    return scipy.linalg.expm(a)


def truncation_adequate(alpha: complex, d_c: int) -> bool:
    r = abs(alpha)
    return r * r + 4 * r + 6 <= d_c


def displacement(alpha: complex, d_c: int) -> np.ndarray:
    """Displacement ``exp(alpha a^dag - conj(alpha) a)`` at truncation ``d_c``."""
    if not truncation_adequate(alpha, d_c):
        warnings.warn(
            f"d_c={d_c} is small for |alpha|={abs(alpha):.3g}; "
            f"need d_c >= {math.ceil(abs(alpha) ** 2 + 4 * abs(alpha) + 6)}",
            TruncationWarning,
            stacklevel=2,
        )
    a = fock_annihilation(d_c)
    return matrix_exponential(alpha * dagger(a) - np.conj(alpha) * a)


def coherent_state(alpha: complex, d_c: int) -> np.ndarray:
    """Coherent state from the closed-form Fock expansion (not renormalized)."""
    n = np.arange(d_c)
    log_fact = np.array([math.lgamma(k + 1) for k in n])
    mag = np.exp(-abs(alpha) ** 2 / 2 - 0.5 * log_fact)
    return mag * np.power(complex(alpha), n)


def is_hermitian(a: np.ndarray, atol: float = 1e-10) -> bool:
    return bool(np.max(np.abs(a - dagger(a)), initial=0.0) <= atol)


def ket2dm(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return np.outer(psi, psi.conj())


def normalize(psi: np.ndarray) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    nrm = np.linalg.norm(psi)
    if nrm == 0:
        raise ValueError("cannot normalize the zero vector")
    return psi / nrm
