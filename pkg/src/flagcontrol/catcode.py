"""Four-component cat code: logical states and decoded tomography operators.

The logical Z operator counts the code space (``4n``, ``4n+2``) and the
single-photon-loss space (``4n+3``, ``4n+1``) together.  The logical X
operator is ``2 X+ - I`` with ``X+`` the projector onto the low-lying
displaced Fock states around ``-alpha`` plus its compression around
``+alpha``; logical Y is X rotated by a quarter turn about Z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .hilbert import coherent_state, dagger, displacement, is_hermitian, matrix_exponential, normalize
from .lindblad import LogicalTarget, bloch_coefficients

DEFAULT_ALPHA = 2.0
DEFAULT_DC = 40


@dataclass(frozen=True)
class CatCodeParams:
    alpha: complex = DEFAULT_ALPHA
    d_c: int = DEFAULT_DC

    @property
    def adequate(self) -> bool:
        r = abs(self.alpha)
        return r * r + 4 * r + 6 <= self.d_c

    def require_adequate(self):
        if not self.adequate:
            need = math.ceil(abs(self.alpha) ** 2 + 4 * abs(self.alpha) + 6)
            raise ValueError(f"d_c={self.d_c} too small for alpha={self.alpha}; need at least {need}")


@dataclass(frozen=True)
class LogicalTomographySet:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        for op in (self.x, self.y, self.z):
            if not is_hermitian(op):
                raise ValueError("tomography operators must be Hermitian")

    def as_tuple(self):
        return (self.x, self.y, self.z)


def cat_basis(params: CatCodeParams) -> tuple[np.ndarray, np.ndarray]:
    """Normalized ``|0_L>`` (levels 4n) and ``|1_L>`` (levels 4n+2)."""
    params.require_adequate()
    a, d = params.alpha, params.d_c
    plus = coherent_state(a, d) + coherent_state(-a, d)
    imag = coherent_state(1j * a, d) + coherent_state(-1j * a, d)
    return normalize(plus + imag), normalize(plus - imag)


def logical_target(params: CatCodeParams, theta: float = -math.pi / 4) -> np.ndarray:
    zero, one = cat_basis(params)
    return (zero + np.exp(1j * theta) * one) / math.sqrt(2)


def z_cat(d_c: int) -> np.ndarray:
    if d_c < 4:
        raise ValueError("z_cat needs d_c >= 4")
    residue = np.arange(d_c) % 4
    return np.diag(np.where((residue == 0) | (residue == 3), 1.0, -1.0)).astype(complex)


def _low_projector(d_c: int) -> np.ndarray:
    p = np.zeros((d_c, d_c), dtype=complex)
    p[0, 0] = p[1, 1] = 1.0
    return p


def x_cat(params: CatCodeParams) -> np.ndarray:
    d = params.d_c
    p01 = _low_projector(d)
    d_plus = displacement(params.alpha, d)
    d_minus = displacement(-params.alpha, d)
    eye = np.eye(d)
    x1 = dagger(d_plus) @ p01 @ d_plus
    x2 = (eye - x1) @ dagger(d_minus) @ p01 @ d_minus @ (eye - x1)
    return 2 * (x1 + x2) - eye


def y_cat(params: CatCodeParams, x: np.ndarray | None = None) -> np.ndarray:
    x = x_cat(params) if x is None else x
    z = z_cat(params.d_c)
    return matrix_exponential(-0.25j * math.pi * z) @ x @ matrix_exponential(0.25j * math.pi * z)


def tomography_set(params: CatCodeParams) -> LogicalTomographySet:
    x = x_cat(params)
    return LogicalTomographySet(x, y_cat(params, x), z_cat(params.d_c))


def logical_bloch(theta: float) -> tuple[float, float, float]:
    """Bloch vector of ``(|0> + e^{i theta}|1>) / sqrt(2)``."""
    return bloch_coefficients(np.array([1.0, np.exp(1j * theta)]))


def cat_logical_target(params: CatCodeParams, theta: float = -math.pi / 4) -> LogicalTarget:
    """Decoded-tomography target for the encoded state ``|0_L> + e^{i theta}|1_L>``."""
    return LogicalTarget(tomography_set(params).as_tuple(), logical_bloch(theta))


def repetition_logical_z() -> np.ndarray:
    """``Z_L = S0 Z0 S0 + S1 Z1 S1`` for the three-qubit repetition code (index ``4 q0 + 2 q1 + q2``)."""

    def ket(bits):
        v = np.zeros(8, dtype=complex)
        v[int(bits, 2)] = 1.0
        return v

    def proj(bits):
        k = ket(bits)
        return np.outer(k, k.conj())

    s0 = proj("000") + proj("111")
    s1 = proj("100") + proj("011")
    z0 = proj("000") - proj("111")
    z1 = proj("100") - proj("011")
    return s0 @ z0 @ s0 + s1 @ z1 @ s1

