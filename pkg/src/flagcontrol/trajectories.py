"""Accelerated quantum trajectories: one no-jump path plus sampled single-jump paths.

The deterministic no-jump path is propagated once under the non-Hermitian
effective Hamiltonian.  Its unnormalized states give the probability
``p[i, mu] = gamma_mu dt ||c_mu phi_i||^2`` that the first jump happens on
step ``i`` through channel ``mu``.  Single-jump paths replace step ``i`` by the
Kraus operator ``sqrt(gamma_mu dt) c_mu`` and continue without further jumps.
Paths with two or more jumps are dropped.

Expectation values are estimated as::

    <O> ~ <phi_N|O|phi_N> + P1/(M-1) * sum_s <psi_s|O|psi_s> / p[i_s, mu_s]

where ``P1 = sum p`` and the ``M - 1`` jump locations are drawn i.i.d. from
``p / P1``.  Stratified-by-channel and systematic draws are available as
variance-reduction options; both keep the estimator unbiased.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoJumpMass
from .hilbert import dagger, matrix_exponential
from .lindblad import PulseSchedule, SystemModel, _check_pulses


@dataclass(frozen=True, eq=False)
class StepPropagatorChain:
    dt: float
    hamiltonians: np.ndarray  # H_i, (N, d, d)
    effective: np.ndarray  # H_eff,i
    propagators: np.ndarray  # xi_i = exp(-i dt H_eff,i)

    @property
    def steps(self) -> int:
        return self.propagators.shape[0]


@dataclass(frozen=True, eq=False)
class NoJumpRecord:
    states: np.ndarray  # (N + 1, d), unnormalized
    survival: np.ndarray  # (N + 1,)
    jump_probs: np.ndarray  # (N, C)

    @property
    def total_jump_mass(self) -> float:
        return float(self.jump_probs.sum())


@dataclass(frozen=True, eq=False)
class JumpRecord:
    step: int
    channel: int
    final_state: np.ndarray
    importance_weight: float


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """No-jump record plus ``M - 1`` weighted single-jump records."""

    no_jump: NoJumpRecord
    jumps: list[JumpRecord]
    total_single_jump_mass: float
    rng_seed: int | None = None
    sampling: str = field(default="iid")

    @property
    def stratified(self) -> bool:
        return self.sampling == "stratified"

    @property
    def size(self) -> int:
        return 1 + len(self.jumps)

    @property
    def weights(self) -> np.ndarray:
        """Estimator weights for ``[no-jump, jump_1, ..., jump_{M-1}]``."""
        return np.array([1.0] + [j.importance_weight for j in self.jumps])

    @property
    def jump_locations(self) -> list[tuple[int, int]]:
        return [(j.step, j.channel) for j in self.jumps]


def build_chain(pulses: PulseSchedule, model: SystemModel) -> StepPropagatorChain:
    _check_pulses(pulses, model)
    hams = model.hamiltonians(pulses.amplitudes)
    heff = hams - 0.5j * model.decay_operator()
    props = matrix_exponential(-1j * pulses.dt * heff)
    return StepPropagatorChain(pulses.dt, hams, heff, props)


def run_no_jump(psi0: np.ndarray, chain: StepPropagatorChain, model: SystemModel) -> NoJumpRecord:
    if abs(np.linalg.norm(psi0) - 1) > 1e-10:
        raise ValueError("initial state must be normalized")
    n = chain.steps
    states = np.empty((n + 1, psi0.shape[0]), dtype=complex)
    states[0] = psi0
    for i in range(n):
        states[i + 1] = chain.propagators[i] @ states[i]
    survival = np.sum(np.abs(states) ** 2, axis=1)
    probs = np.empty((n, len(model.jumps)))
    for mu, c in enumerate(model.jumps):
        kicked = states[:n] @ c.operator.T
        probs[:, mu] = c.rate * chain.dt * np.sum(np.abs(kicked) ** 2, axis=1)
    return NoJumpRecord(states, survival, probs)


SAMPLING_MODES = ("iid", "stratified", "systematic")


def _check_sampling(sampling):
    if sampling not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {sampling!r}; expected one of {SAMPLING_MODES}")


def sample_jumps(
    record: NoJumpRecord,
    count: int,
    seed: int | np.random.Generator | None = None,
    sampling: str = "iid",
) -> list[tuple[int, int]]:
    """Draw ``count`` first-jump locations ``(step, channel)`` from ``p / P1``.

    ``"iid"`` draws with replacement.  ``"stratified"`` splits the draws across
    channels in proportion to their mass (largest-remainder rounding, at least
    one draw per channel with non-zero mass when ``count`` allows) and samples
    within each channel.  ``"systematic"`` places ``count`` evenly spaced points
    with one uniform offset on the cumulative distribution; each point is still
    marginally distributed as ``p / P1``.
    """
    _check_sampling(sampling)
    if count == 0:
        return []
    probs = record.jump_probs
    total = probs.sum()
    if not total > 0:
        raise NoJumpMass("no single-jump probability mass to sample from")
    rng = np.random.default_rng(seed)
    n_steps, n_ch = probs.shape
    if sampling == "iid":
        flat = (probs / total).ravel()
        idx = rng.choice(flat.size, size=count, p=flat)
        return [(int(i // n_ch), int(i % n_ch)) for i in idx]
    if sampling == "systematic":
        cdf = np.cumsum(probs.ravel()) / total
        points = (rng.uniform() + np.arange(count)) / count
        # the clamp guards against cdf[-1] rounding below 1
        idx = np.minimum(np.searchsorted(cdf, points, side="right"), np.flatnonzero(probs.ravel())[-1])
        return [(int(i // n_ch), int(i % n_ch)) for i in idx]
    alloc = channel_allocation(probs.sum(axis=0), count)
    out = []
    for mu, n_mu in enumerate(alloc):
        if n_mu == 0:
            continue
        col = probs[:, mu] / probs[:, mu].sum()
        out.extend((int(i), mu) for i in rng.choice(n_steps, size=n_mu, p=col))
    return out


def channel_allocation(masses: np.ndarray, count: int) -> np.ndarray:
    """Split ``count`` draws across channels proportionally to ``masses``."""
    masses = np.asarray(masses, dtype=float)
    active = masses > 0
    share = count * masses / masses.sum()
    alloc = np.floor(share).astype(int)
    if count >= active.sum():
        alloc[active & (alloc == 0)] = 1
    while alloc.sum() > count:
        alloc[np.argmax(np.where(alloc > 1, alloc - share, -np.inf))] -= 1
    while alloc.sum() < count:
        alloc[np.argmax(np.where(active, share - alloc, -np.inf))] += 1
    return alloc


def jump_kraus(model: SystemModel, channel: int, dt: float) -> np.ndarray:
    c = model.jumps[channel]
    return np.sqrt(c.rate * dt) * c.operator


def run_single_jump(
    psi0: np.ndarray,
    chain: StepPropagatorChain,
    jump: tuple[int, int],
    model: SystemModel,
    record: NoJumpRecord | None = None,
    importance_weight: float = 0.0,
) -> JumpRecord:
    """Path whose step ``jump[0]`` is replaced by the Kraus operator of channel ``jump[1]``.

    The prefix state is taken from ``record`` when given, otherwise it is
    re-propagated from ``psi0``.
    """
    step, channel = jump
    if not 0 <= step < chain.steps:
        raise ValueError(f"jump step {step} outside [0, {chain.steps})")
    if record is not None:
        psi = record.states[step]
    else:
        psi = np.asarray(psi0, dtype=complex)
        for i in range(step):
            psi = chain.propagators[i] @ psi
    psi = jump_kraus(model, channel, chain.dt) @ psi
    for i in range(step + 1, chain.steps):
        psi = chain.propagators[i] @ psi
    return JumpRecord(step, channel, psi, importance_weight)


def importance_weights(
    record: NoJumpRecord, locations: list[tuple[int, int]], sampling: str = "iid"
) -> np.ndarray:
    """Estimator weight of each sampled jump path.

    I.i.d. and systematic sampling: ``P1 / (count * p[i, mu])``.  Stratified:
    the channel mass replaces ``P1`` and the channel's draw count replaces
    ``count``.
    """
    _check_sampling(sampling)
    probs = record.jump_probs
    if not locations:
        return np.zeros(0)
    cells = np.array([probs[i, mu] for i, mu in locations])
    if sampling != "stratified":
        return probs.sum() / (len(locations) * cells)
    masses = probs.sum(axis=0)
    counts = np.bincount([mu for _, mu in locations], minlength=probs.shape[1])
    return np.array([masses[mu] / (counts[mu] * probs[i, mu]) for i, mu in locations])


def build_ensemble(
    psi0: np.ndarray,
    chain: StepPropagatorChain,
    model: SystemModel,
    n_trajectories: int,
    seed: int | None = None,
    sampling: str = "iid",
    record: NoJumpRecord | None = None,
) -> TrajectoryEnsemble:
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    record = record if record is not None else run_no_jump(psi0, chain, model)
    mass = record.total_jump_mass
    count = n_trajectories - 1 if mass > 0 else 0
    locations = sample_jumps(record, count, seed, sampling)
    weights = importance_weights(record, locations, sampling)
    jumps = [
        run_single_jump(psi0, chain, loc, model, record, float(w)) for loc, w in zip(locations, weights)
    ]
    return TrajectoryEnsemble(record, jumps, mass, seed, sampling)


def assemble_expectation(ensemble: TrajectoryEnsemble, op: np.ndarray) -> complex | float:
    """Weighted trajectory estimate of ``Tr[O rho(T)]``; real for Hermitian ``O``."""
    phi = ensemble.no_jump.states[-1]
    value = phi.conj() @ op @ phi
    for j in ensemble.jumps:
        value += j.importance_weight * (j.final_state.conj() @ op @ j.final_state)
    if np.allclose(op, dagger(op), atol=1e-12, rtol=0):
        return float(np.real(value))
    return complex(value)


def expectation_stderr(ensemble: TrajectoryEnsemble, op: np.ndarray) -> float:
    """Monte Carlo standard error of :func:`assemble_expectation` (sample-variance based).

    For systematic sampling the i.i.d. formula is used, which overstates the
    error.
    """
    if not ensemble.jumps:
        return 0.0
    terms = np.array(
        [j.importance_weight * np.real(j.final_state.conj() @ op @ j.final_state) for j in ensemble.jumps]
    )
    if not ensemble.stratified:
        n = len(terms)
        if n < 2:
            return 0.0
        # each term is (P1 / n) * x_s; the estimator is their sum
        return float(np.std(terms * n, ddof=1) / np.sqrt(n))
    var = 0.0
    channels = np.array([j.channel for j in ensemble.jumps])
    for mu in np.unique(channels):
        t = terms[channels == mu]
        if len(t) > 1:
            var += np.var(t * len(t), ddof=1) / len(t)
    return float(np.sqrt(var))


def single_jump_expectation(
    record: NoJumpRecord, chain: StepPropagatorChain, model: SystemModel, ops: np.ndarray
) -> np.ndarray:
    """Exact ``sum_{i,mu} <psi_{i,mu}|O|psi_{i,mu}>`` over every single-jump path.

    Uses a backward Heisenberg recursion ``B_i = xi_i^dag B_{i+1} xi_i`` started
    from ``B_N = O``, so the cost is one pass over the chain for any number of
    jump locations.  ``ops`` may be one operator or a stack ``(K, d, d)``.
    """
    ops = np.asarray(ops, dtype=complex)
    single = ops.ndim == 2
    back = ops[None] if single else ops.copy()
    total = np.zeros(back.shape[0])
    for i in range(chain.steps - 1, -1, -1):
        phi = record.states[i]
        for c in model.jumps:
            if c.rate:
                v = c.operator @ phi
                total += c.rate * chain.dt * np.real(np.einsum("a,kab,b->k", v.conj(), back, v))
        xi = chain.propagators[i]
        back = dagger(xi) @ back @ xi
    return total[0] if single else total


def single_jump_mass(record: NoJumpRecord, chain: StepPropagatorChain, model: SystemModel) -> float:
    """Exact ``sum_{i,mu} ||psi_{i,mu}||^2`` over every single-jump path."""
    d = record.states.shape[1]
    return float(single_jump_expectation(record, chain, model, np.eye(d)))


def exhaustive_expectation(
    record: NoJumpRecord, chain: StepPropagatorChain, model: SystemModel, ops: np.ndarray
) -> np.ndarray:
    """No-jump plus all single-jump contributions to ``Tr[O rho(T)]``, without sampling.

    This is the limit of :func:`assemble_expectation` as the sample count grows.
    """
    phi = record.states[-1]
    ops = np.asarray(ops, dtype=complex)
    no_jump = np.real(np.einsum("a,...ab,b->...", phi.conj(), ops, phi))
    return no_jump + single_jump_expectation(record, chain, model, ops)


def truncation_bias(record: NoJumpRecord, chain: StepPropagatorChain, model: SystemModel) -> float:
    """Probability mass the single-jump truncation leaves out: ``1 - survival - single-jump mass``.

    Bounds the bias of every estimate with ``||O|| <= 1`` (up to the
    step-discretization of the jump time).
    """
    return float(1.0 - record.survival[-1] - single_jump_mass(record, chain, model))
