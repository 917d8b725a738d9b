"""Forward/backward propagation through step-propagator chains.

Shared by the closed-system gradient (unitary steps, one path) and the
trajectory gradients (non-unitary steps, one path per trajectory, with an
optional jump operator replacing one step).

Steps are indexed from 0: ``states[i]`` enters step ``i`` and
``states[i + 1] = G_i states[i]`` where ``G_i`` is either the step propagator
``xi[i]`` or, on the step where a path jumps, the jump operator.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .hilbert import dagger

DERIVATIVE_SCHEMES = ("first_order", "exact")
_COND_LIMIT = 1e6


def _phi_matrix(lam: np.ndarray) -> np.ndarray:
    """Divided differences ``(e^a - e^b)/(a - b)`` for every eigenvalue pair, shape ``(..., d, d)``."""
    la = lam[..., :, None]
    lb = lam[..., None, :]
    delta = la - lb
    small = np.abs(delta) < 1e-4
    safe = np.where(small, 1.0, delta)
    ea = np.exp(lam)
    # away from coincident eigenvalues the cancellation costs at most ~1e-12 relative
    out = (ea[..., :, None] - ea[..., None, :]) / safe
    taylor = ea[..., None, :] * (1 + delta / 2 + delta**2 / 6 + delta**3 / 24)
    return np.where(small, taylor, out)


def _frechet(gen: np.ndarray, direction: np.ndarray) -> np.ndarray:
    d = gen.shape[-1]
    blk = np.zeros((2 * d, 2 * d), dtype=complex)
    blk[:d, :d] = gen
    blk[d:, d:] = gen
    blk[:d, d:] = direction
    return scipy.linalg.expm(blk)[:d, d:]


def step_derivatives(
    hamiltonians: np.ndarray,
    controls: np.ndarray,
    dt: float,
    scheme: str = "exact",
    propagators: np.ndarray | None = None,
    hermitian: bool = False,
) -> np.ndarray:
    """Derivatives of ``xi_i = exp(-i dt H_i)`` w.r.t. each control amplitude.

    Args:
        hamiltonians: step Hamiltonians ``H_i`` (``H_eff`` for trajectories),
            shape ``(N, d, d)``.
        controls: control Hamiltonians, shape ``(J, d, d)``.
        dt: step width.
        scheme: ``"first_order"`` gives ``-i dt H_c xi_i``; ``"exact"`` the
            full Frechet derivative via an eigendecomposition of each step.
        propagators: ``xi_i``; only used by ``first_order``.
        hermitian: set when every ``H_i`` is Hermitian so ``eigh`` can be used.

    Returns:
        Array of shape ``(N, J, d, d)``.
    """
    directions = -1j * dt * np.asarray(controls)
    if scheme == "first_order":
        if propagators is None:
            propagators = scipy.linalg.expm(-1j * dt * hamiltonians)
        return directions[None, :, :, :] @ propagators[:, None, :, :]
    if scheme != "exact":
        raise ValueError(f"unknown derivative scheme {scheme!r}")

    if hermitian:
        evals, vecs = np.linalg.eigh(hamiltonians)
        lam = -1j * dt * evals
        inv = dagger(vecs)
        bad = np.zeros(hamiltonians.shape[0], dtype=bool)
    else:
        lam, vecs = np.linalg.eig(-1j * dt * hamiltonians)
        inv = np.linalg.inv(vecs)
        cond = np.linalg.norm(vecs, axis=(-2, -1)) * np.linalg.norm(inv, axis=(-2, -1))
        bad = ~np.isfinite(cond) | (cond > _COND_LIMIT)

    phi = _phi_matrix(lam)
    rotated = inv[:, None] @ directions[None] @ vecs[:, None]
    out = vecs[:, None] @ (rotated * phi[:, None]) @ inv[:, None]
    for i in np.flatnonzero(bad):
        for j in range(directions.shape[0]):
            out[i, j] = _frechet(-1j * dt * hamiltonians[i], directions[j])
    return out


class StepDerivativeMap:
    """Contractions ``Tr[d(xi_i)/du_ij A_i]`` without forming the derivatives.

    For the exact scheme ``d xi = V (Phi o (V^-1 D V)) V^-1`` with
    ``D = -i dt H_c``, so ``Tr[d xi A] = Tr[C D]`` with
    ``C = V (Phi^T o (V^-1 A V)) V^-1``: four ``d x d`` products per step,
    independent of the number of controls, paths and observables.  For the
    first-order scheme ``Tr[D xi A] = Tr[(xi A) D]``.
    """

    def __init__(
        self,
        hamiltonians: np.ndarray,
        controls: np.ndarray,
        dt: float,
        scheme: str = "exact",
        propagators: np.ndarray | None = None,
        hermitian: bool = False,
    ):
        if scheme not in DERIVATIVE_SCHEMES:
            raise ValueError(f"unknown derivative scheme {scheme!r}")
        self.scheme = scheme
        self.directions = -1j * dt * np.asarray(controls)
        self.hamiltonians = hamiltonians
        self.dt = dt
        if scheme == "first_order":
            self.propagators = (
                propagators if propagators is not None else scipy.linalg.expm(-1j * dt * hamiltonians)
            )
            return
        self.propagators = propagators
        if hermitian:
            evals, vecs = np.linalg.eigh(hamiltonians)
            lam = -1j * dt * evals
            inv = dagger(vecs)
            bad = np.zeros(hamiltonians.shape[0], dtype=bool)
            if propagators is None:
                self.propagators = (vecs * np.exp(lam)[..., None, :]) @ inv
        else:
            lam, vecs = np.linalg.eig(-1j * dt * hamiltonians)
            inv = np.linalg.inv(vecs)
            cond = np.linalg.norm(vecs, axis=(-2, -1)) * np.linalg.norm(inv, axis=(-2, -1))
            bad = ~np.isfinite(cond) | (cond > _COND_LIMIT)
        self.vecs, self.inv = vecs, inv
        self.phi_t = np.swapaxes(_phi_matrix(lam), -1, -2)
        self.bad = np.flatnonzero(bad)

    def contract(self, a: np.ndarray) -> np.ndarray:
        """``Tr[d(xi_i)/du_ij a_i]`` for ``a`` of shape ``(N, d, d)``; returns ``(N, J)`` complex."""
        if self.scheme == "first_order":
            c = self.propagators @ a
        else:
            c = self.vecs @ (self.phi_t * (self.inv @ a @ self.vecs)) @ self.inv
        out = np.einsum("iab,jba->ij", c, self.directions)
        if self.scheme == "exact":
            for i in self.bad:
                for j in range(self.directions.shape[0]):
                    dxi = _frechet(-1j * self.dt * self.hamiltonians[i], self.directions[j])
                    out[i, j] = np.trace(dxi @ a[i])
        return out


def weighted_gradient(
    states: np.ndarray,
    propagators: np.ndarray,
    derivative: StepDerivativeMap,
    jumps: list[tuple[int, np.ndarray] | None],
    observable: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, np.ndarray]:
    """``sum_s w_s <psi_s|O|psi_s>`` and its gradient ``(N, J)`` for one Hermitian observable.

    Builds ``A_i = sum_s w_s |psi_{s,i}><lam_{s,i+1}|`` during the backward
    sweep (paths that jump on step ``i`` are left out of ``A_i``) and hands it
    to ``derivative``.
    """
    n = propagators.shape[0]
    final = states[n]
    weights = np.asarray(weights, dtype=float)
    lam = final @ observable.T  # (S, d)
    value = float(np.real(np.sum(weights * np.einsum("sa,sa->s", final.conj(), lam))))
    by_step = _group_jumps(jumps)
    acc = np.empty((n,) + propagators.shape[1:], dtype=complex)
    for i in range(n - 1, -1, -1):
        w = weights
        entries = by_step.get(i, ())
        if entries:
            w = weights.copy()
            w[[s for s, _ in entries]] = 0.0
        acc[i] = (states[i] * w[:, None]).T @ lam.conj()
        new = lam @ propagators[i].conj()
        for s, op in entries:
            new[s] = lam[s] @ op.conj()
        lam = new
    return value, 2 * np.real(derivative.contract(acc))


def propagate_paths(
    psi0: np.ndarray,
    propagators: np.ndarray,
    jumps: list[tuple[int, np.ndarray] | None],
) -> np.ndarray:
    """Forward states of every path, shape ``(N + 1, S, d)``.

    ``jumps[s]`` is ``None`` for the no-jump path or ``(step, operator)`` when
    the operator replaces propagator ``step`` on path ``s``.
    """
    n = propagators.shape[0]
    s_count = len(jumps)
    d = psi0.shape[0]
    by_step = _group_jumps(jumps)
    states = np.empty((n + 1, s_count, d), dtype=complex)
    states[0] = psi0
    for i in range(n):
        states[i + 1] = states[i] @ propagators[i].T
        for s, op in by_step.get(i, ()):
            states[i + 1, s] = op @ states[i, s]
    return states


def _group_jumps(jumps):
    by_step = defaultdict(list)
    for s, jump in enumerate(jumps):
        if jump is not None:
            by_step[jump[0]].append((s, jump[1]))
    return by_step


@dataclass
class PathGradients:
    """Per-path expectations and their gradients.

    ``values[s, o] = <psi_s|O_o|psi_s>`` and ``grads[i, j, s, o]`` its
    derivative w.r.t. the amplitude of control ``j`` on step ``i``.
    """

    values: np.ndarray
    grads: np.ndarray

    def weighted(self, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Weighted sums over paths: values ``(O,)`` and gradients ``(N, J, O)``."""
        return weights @ self.values, np.einsum("ijso,s->ijo", self.grads, weights)


def path_gradients(
    states: np.ndarray,
    propagators: np.ndarray,
    derivatives: np.ndarray,
    jumps: list[tuple[int, np.ndarray] | None],
    observables: np.ndarray,
) -> PathGradients:
    """Backward costates and chain-insertion gradients for Hermitian observables.

    The costate after step ``i`` is ``lam_{i+1} = (G_{N-1} ... G_{i+1})^dag O psi_N``;
    the derivative of ``<psi_N|O|psi_N>`` w.r.t. ``u[i, j]`` is
    ``2 Re <lam_{i+1}| dG_i/du |psi_i>``.  Steps replaced by a jump carry no
    control dependence.
    """
    n = propagators.shape[0]
    final = states[n]  # (S, d)
    lam = np.einsum("oab,sb->soa", observables, final)  # (S, O, d)
    values = np.real(np.einsum("sa,soa->so", final.conj(), lam))
    by_step = _group_jumps(jumps)
    costates = np.empty((n,) + lam.shape, dtype=complex)
    for i in range(n - 1, -1, -1):
        costates[i] = lam
        new = lam @ propagators[i].conj()
        for s, op in by_step.get(i, ()):
            new[s] = lam[s] @ op.conj()
        lam = new
    # d(xi_i) psi_i for every step/control/path: (N, J, S, d)
    moved = np.einsum("ijab,isb->ijsa", derivatives, states[:n])
    grads = 2 * np.real(np.einsum("isoa,ijsa->ijso", costates.conj(), moved))
    for i, entries in by_step.items():
        for s, _ in entries:
            grads[i, :, s, :] = 0.0
    return PathGradients(values, grads)
