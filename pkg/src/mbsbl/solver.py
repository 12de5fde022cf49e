"""MBSBL-FM: block-sparse Bayesian learning for multiple measurement vectors.

Every block ``X_i`` (``d_i`` rows, all ``P`` channels) gets a zero-mean
Gaussian prior with variance ``gamma_i``, and the noise precision ``beta`` is
held fixed. The solver greedily minimises the Type-II cost

    L = k log|C| + Tr(Y^T C^-1 Y),   C = beta^-1 I + sum_i gamma_i Phi_i Phi_i^T

(``k`` is P or N, see :class:`~mbsbl.model.LogdetMultiplier`) one block at a
time: each sweep proposes a new ``gamma`` for every block from its
leave-one-out statistics, then applies the single add / re-estimate / delete
that lowers ``L`` the most.

State kept between iterations:

* ``SS = Phi^T C^-1 Phi`` and ``QQ = Phi^T C^-1 Y`` for the whole dictionary,
  refreshed with a rank-``d`` Woodbury correction after every action;
* the posterior mean ``mu`` and covariance ``sigma`` over the active rows,
  grown, updated or shrunk block-wise.
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import (
    BlockPartition,
    Measurements,
    RecoveryResult,
    SensingMatrix,
    SolverConfig,
    make_partition_uniform,
)
from .transform import Dictionary, identity_dictionary

log = logging.getLogger(__name__)

REG_FACTOR = 1e-10


class NumericalFailure(ArithmeticError):
    pass


class Action(str, enum.Enum):
    ADD = "add"
    REESTIMATE = "reestimate"
    DELETE = "delete"
    NONE = "none"


@dataclass
class BlockStats:
    s: np.ndarray
    q: np.ndarray
    S: np.ndarray
    Q: np.ndarray


@dataclass
class Choice:
    block: int
    action: Action
    gamma: float
    delta: float


# -- single-block formulas ---------------------------------------------------

def _regularized(s: np.ndarray) -> np.ndarray:
    d = s.shape[-1]
    lam = REG_FACTOR * np.trace(s) / d
    return s + abs(lam) * np.eye(d)


def gamma_candidate(stats: BlockStats, d: int, gamma_floor: float = 1e-12) -> float:
    """Closed-form variance proposal ``Tr[s^-1 (q q^T - s) s^-1] / d``, floored at 0.

    Raises ``numpy.linalg.LinAlgError`` when ``s`` is singular even after the
    small diagonal loading.
    """
    s = np.atleast_2d(stats.s)
    q = np.asarray(stats.q, dtype=float).reshape(d, -1)
    s_inv = np.linalg.solve(_regularized(s), np.eye(d))
    sq = s_inv @ q
    value = (np.sum(sq * sq) - np.trace(s_inv @ s @ s_inv)) / d
    return float(value) if value > gamma_floor else 0.0


def block_cost(stats: BlockStats, gamma: float, multiplier: int) -> float:
    """Block term ``k log|I + gamma s| - Tr[q^T (gamma^-1 I + s)^-1 q]``; zero at ``gamma = 0``."""
    if gamma <= 0:
        return 0.0
    s = np.atleast_2d(stats.s)
    d = s.shape[0]
    q = np.asarray(stats.q, dtype=float).reshape(d, -1)
    a = np.eye(d) + gamma * s
    sign, logdet = np.linalg.slogdet(a)
    if sign <= 0:
        raise NumericalFailure("I + gamma*s is not positive definite")
    # (gamma^-1 I + s)^-1 = gamma (I + gamma s)^-1
    return float(multiplier * logdet - gamma * np.sum(q * np.linalg.solve(a, q)))


def block_delta_L(stats: BlockStats, gamma_old: float, gamma_new: float, d: int,
                  multiplier: int) -> float:
    del d  # implied by the statistics
    if gamma_old == gamma_new:
        return 0.0
    return block_cost(stats, gamma_new, multiplier) - block_cost(stats, gamma_old, multiplier)


# -- batched sweep -----------------------------------------------------------

def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _batched_candidates(S, Q, gamma, floor, multiplier):
    """Vectorised proposal and cost change for a stack of equal-size blocks.

    ``S`` is ``(b, d, d)``, ``Q`` is ``(b, d, P)``. Returns ``(gamma_new,
    delta, ok)`` where ``ok`` marks blocks whose statistics could be inverted.
    """
    b, d, _ = S.shape
    eye = np.eye(d)
    active = gamma > 0
    s, q = S.copy(), Q.copy()
    if np.any(active):
        g = gamma[active][:, None, None]
        a = eye - g * S[active]
        s[active] = _sym(np.linalg.solve(a, S[active]))
        q[active] = np.linalg.solve(a, Q[active])

    lam = np.abs(REG_FACTOR * np.trace(s, axis1=1, axis2=2) / d)
    sr = s + lam[:, None, None] * eye
    ok = np.ones(b, dtype=bool)
    try:
        s_inv = np.linalg.solve(sr, np.broadcast_to(eye, sr.shape))
    except np.linalg.LinAlgError:
        s_inv = np.empty_like(sr)
        for j in range(b):
            try:
                s_inv[j] = np.linalg.solve(sr[j], eye)
            except np.linalg.LinAlgError:
                ok[j] = False
                s_inv[j] = eye
    sq = s_inv @ q
    tr = np.trace(s_inv @ s @ s_inv, axis1=1, axis2=2)
    cand = (np.sum(sq * sq, axis=(1, 2)) - tr) / d
    cand = np.where(cand > floor, cand, 0.0)

    def cost(gv):
        out = np.zeros(b)
        pos = gv > 0
        if np.any(pos):
            a = eye + gv[pos][:, None, None] * s[pos]
            sign, logdet = np.linalg.slogdet(a)
            quad = np.sum(q[pos] * np.linalg.solve(a, q[pos]), axis=(1, 2))
            out[pos] = np.where(sign > 0, multiplier * logdet - gv[pos] * quad, np.nan)
        return out

    delta = cost(cand) - cost(gamma)
    # round-off can leave I + gamma*s indefinite; such blocks sit out this sweep
    ok &= np.isfinite(delta)
    delta[cand == gamma] = 0.0
    delta[~ok] = np.inf
    return cand, delta, ok


# -- state -------------------------------------------------------------------

@dataclass
class SolverState:
    phi: np.ndarray
    y: np.ndarray
    partition: BlockPartition
    cfg: SolverConfig
    beta: float
    multiplier: int
    gamma: np.ndarray
    SS: np.ndarray
    QQ: np.ndarray
    gram: np.ndarray
    order: list[int] = field(default_factory=list)
    mu: np.ndarray = None
    sigma: np.ndarray = None
    cost: float = 0.0
    skipped: int = 0

    @property
    def active(self) -> tuple[int, ...]:
        """Active blocks in the order their rows appear in ``mu`` and ``sigma``."""
        return tuple(self.order)

    def active_rows(self) -> np.ndarray:
        if not self.order:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.partition.indices(i) for i in self.order])

    def block_stats(self, i: int) -> BlockStats:
        sl = self.partition.slice(i)
        S = self.SS[sl, sl].copy()
        Q = self.QQ[sl].copy()
        g = self.gamma[i]
        if g > 0:
            a = np.eye(S.shape[0]) - g * S
            s = _sym(np.linalg.solve(a, S))
            q = np.linalg.solve(a, Q)
        else:
            s, q = S.copy(), Q.copy()
        return BlockStats(s, q, S, Q)

    def coefficients(self) -> np.ndarray:
        out = np.zeros((self.partition.n, self.y.shape[1]))
        if self.order:
            out[self.active_rows()] = self.mu
        return out

    def copy(self) -> "SolverState":
        return SolverState(
            self.phi, self.y, self.partition, self.cfg, self.beta, self.multiplier,
            self.gamma.copy(), self.SS.copy(), self.QQ.copy(), self.gram,
            list(self.order), self.mu.copy(), self.sigma.copy(), self.cost, self.skipped,
        )


def empty_model_cost(y: np.ndarray, beta: float, multiplier: int) -> float:
    m = y.shape[0]
    return float(multiplier * m * np.log(1.0 / beta) + beta * np.sum(y * y))


def init_state(y, phi_eff: np.ndarray, partition: BlockPartition,
               cfg: SolverConfig = SolverConfig()) -> SolverState:
    """Empty model: ``C^-1 = beta I`` so the statistics are plain correlations."""
    y = y.values if isinstance(y, Measurements) else np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    phi_eff = np.asarray(phi_eff, dtype=float)
    m, n = phi_eff.shape
    if y.shape[0] != m:
        raise ValueError(f"measurements have {y.shape[0]} rows, sensing operator has {m}")
    if partition.n != n:
        raise ValueError(f"partition covers {partition.n} rows, operator has {n} columns")
    if not np.any(y):
        raise ValueError("all-zero measurements; solve() short-circuits this case")
    beta = 1.0 / cfg.noise_variance(y)
    gram = phi_eff.T @ phi_eff
    multiplier = cfg.multiplier(n, y.shape[1])
    return SolverState(
        phi=phi_eff,
        y=y,
        partition=partition,
        cfg=cfg,
        beta=beta,
        multiplier=multiplier,
        gamma=np.zeros(partition.g),
        SS=beta * gram,
        QQ=beta * (phi_eff.T @ y),
        gram=gram,
        mu=np.zeros((0, y.shape[1])),
        sigma=np.zeros((0, 0)),
        cost=empty_model_cost(y, beta, multiplier),
    )


def _size_groups(partition: BlockPartition) -> list[tuple[int, np.ndarray, np.ndarray]]:
    groups = {}
    for i, d in enumerate(partition.sizes):
        groups.setdefault(d, []).append(i)
    starts = np.asarray(partition.starts)
    out = []
    for d, idx in groups.items():
        idx = np.asarray(idx)
        rows = starts[idx][:, None] + np.arange(d)
        out.append((d, idx, rows))
    return out


def sweep(state: SolverState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Proposed ``gamma`` and cost change for every block.

    Blocks whose leave-one-out precision cannot be inverted get ``delta = inf``
    and are flagged in the returned mask.
    """
    g = state.partition.g
    cand = np.zeros(g)
    delta = np.zeros(g)
    ok = np.ones(g, dtype=bool)
    for d, idx, rows in _size_groups(state.partition):
        S = state.SS[rows[:, :, None], rows[:, None, :]]
        Q = state.QQ[rows]
        c, dl, k = _batched_candidates(S, Q, state.gamma[idx], state.cfg.gamma_floor,
                                       state.multiplier)
        cand[idx], delta[idx], ok[idx] = c, dl, k
    return cand, delta, ok


def _classify(gamma_old: float, gamma_new: float) -> Action:
    if gamma_old > 0:
        return Action.REESTIMATE if gamma_new > 0 else Action.DELETE
    return Action.ADD if gamma_new > 0 else Action.NONE


def select_action(state: SolverState) -> Choice:
    """Block and action with the most negative cost change (lowest index on ties)."""
    cand, delta, ok = sweep(state)
    state.skipped = int(np.count_nonzero(~ok))
    i = int(np.argmin(delta))
    return Choice(i, _classify(state.gamma[i], cand[i]), float(cand[i]), float(delta[i]))


def _woodbury(state: SolverState, i: int, change: float) -> None:
    """Fold ``C -> C + change * Phi_i Phi_i^T`` into ``SS`` and ``QQ``."""
    sl = state.partition.slice(i)
    d = sl.stop - sl.start
    cols = state.SS[:, sl].copy()
    # (change^-1 I + S_ii)^-1 written without dividing by change
    k = change * np.linalg.solve(np.eye(d) + change * state.SS[sl, sl], np.eye(d))
    k = _sym(k)
    state.QQ -= cols @ (k @ state.QQ[sl])
    state.SS -= cols @ k @ cols.T
    state.SS = _sym(state.SS)


def _posterior_add(state: SolverState, i: int, gamma_new: float) -> None:
    sl = state.partition.slice(i)
    d = sl.stop - sl.start
    S_ii = state.SS[sl, sl]
    sigma_ii = _sym(np.linalg.inv(np.eye(d) / gamma_new + S_ii))
    mu_i = sigma_ii @ state.QQ[sl]
    if state.order:
        rows = state.active_rows()
        e = state.beta * state.sigma @ state.gram[np.ix_(rows, np.arange(sl.start, sl.stop))]
        top = state.sigma + e @ sigma_ii @ e.T
        off = -e @ sigma_ii
        state.sigma = _sym(np.block([[top, off], [off.T, sigma_ii]]))
        state.mu = np.vstack([state.mu - e @ mu_i, mu_i])
    else:
        state.sigma = sigma_ii
        state.mu = mu_i
    state.order.append(i)


def _block_pos(state: SolverState, i: int) -> slice:
    start = 0
    for j in state.order:
        d = state.partition.sizes[j]
        if j == i:
            return slice(start, start + d)
        start += d
    raise KeyError(i)


def _posterior_reestimate(state: SolverState, i: int, gamma_old: float, gamma_new: float) -> None:
    pos = _block_pos(state, i)
    d = pos.stop - pos.start
    step = 1.0 / gamma_new - 1.0 / gamma_old
    cols = state.sigma[:, pos].copy()
    k = _sym(step * np.linalg.solve(np.eye(d) + step * state.sigma[pos, pos], np.eye(d)))
    state.mu = state.mu - cols @ (k @ state.mu[pos])
    state.sigma = _sym(state.sigma - cols @ k @ cols.T)


def _posterior_delete(state: SolverState, i: int) -> None:
    pos = _block_pos(state, i)
    keep = np.r_[0:pos.start, pos.stop:state.sigma.shape[0]]
    sigma_ii = state.sigma[pos, pos]
    cross = state.sigma[np.ix_(keep, np.arange(pos.start, pos.stop))]
    tmp = np.linalg.solve(sigma_ii, cross.T)
    state.mu = state.mu[keep] - cross @ np.linalg.solve(sigma_ii, state.mu[pos])
    state.sigma = _sym(state.sigma[np.ix_(keep, keep)] - cross @ tmp)
    state.order.remove(i)


def apply_action(state: SolverState, choice: Choice) -> SolverState:
    """Commit one action, updating posterior, statistics and cost in place."""
    i = choice.block
    old = float(state.gamma[i])
    new = choice.gamma if choice.action is not Action.DELETE else 0.0
    if choice.action is Action.NONE or old == new:
        return state

    # posterior first: the add formula needs the pre-update S_ii and Q_i
    if choice.action is Action.ADD:
        _posterior_add(state, i, new)
    elif choice.action is Action.REESTIMATE:
        _posterior_reestimate(state, i, old, new)
    else:
        _posterior_delete(state, i)

    state.gamma[i] = new
    if state.order:
        _woodbury(state, i, new - old)
        state.cost += choice.delta
    else:
        # empty model: statistics have a closed form, so drop accumulated rounding
        state.SS = state.beta * state.gram
        state.QQ = state.beta * (state.phi.T @ state.y)
        state.cost = empty_model_cost(state.y, state.beta, state.multiplier)

    if state.sigma.size and not np.all(np.isfinite(state.sigma)):
        raise NumericalFailure("posterior covariance became non-finite")
    if state.sigma.size and np.min(np.diag(state.sigma)) <= 0:
        raise NumericalFailure("posterior covariance lost positive definiteness")
    return state


def _effective_operator(phi, dictionary: Optional[Dictionary]) -> tuple[np.ndarray, Dictionary]:
    dense = phi.to_dense() if isinstance(phi, SensingMatrix) else np.asarray(phi, dtype=float)
    if dictionary is None:
        dictionary = identity_dictionary(dense.shape[1])
    if dictionary.size != dense.shape[1]:
        raise ValueError(f"dictionary size {dictionary.size} does not match N={dense.shape[1]}")
    if dictionary.kind.value == "identity":
        return dense, dictionary
    return dense @ dictionary.matrix, dictionary


def solve(y, phi, dictionary: Optional[Dictionary] = None,
          partition: Optional[BlockPartition] = None,
          cfg: SolverConfig = SolverConfig(),
          callback: Optional[Callable[[SolverState, Choice], None]] = None) -> RecoveryResult:
    """Recover an ``N x P`` packet from ``Y = Phi D A``.

    ``phi`` may be a :class:`SensingMatrix` or a dense array. Without a
    dictionary the coefficients are the signal itself. ``callback`` is called
    after every committed action with the live state.
    """
    t0 = time.perf_counter()
    yv = y.values if isinstance(y, Measurements) else np.asarray(y, dtype=float)
    if yv.ndim == 1:
        yv = yv[:, None]
    phi_eff, dictionary = _effective_operator(phi, dictionary)
    n = phi_eff.shape[1]
    if yv.shape[0] != phi_eff.shape[0]:
        raise ValueError(f"measurements have {yv.shape[0]} rows, sensing matrix has {phi_eff.shape[0]}")
    if partition is None:
        partition = make_partition_uniform(n, 8)

    if not np.any(yv):
        zeros = np.zeros((n, yv.shape[1]))
        return RecoveryResult(zeros, zeros.copy(), np.zeros(partition.g), [], 0,
                              time.perf_counter() - t0, True)

    state = init_state(yv, phi_eff, partition, cfg)
    trace: list[float] = []
    converged = False
    iterations = 0
    while True:
        choice = select_action(state)
        if choice.action is Action.NONE or not choice.delta < 0 or abs(choice.delta) < cfg.eta:
            converged = True
            break
        if iterations >= cfg.max_iterations:
            log.warning("MBSBL-FM stopped at the %d-iteration cap", cfg.max_iterations)
            break
        apply_action(state, choice)
        iterations += 1
        trace.append(state.cost)
        if callback is not None:
            callback(state, choice)

    coeffs = state.coefficients()
    return RecoveryResult(
        coefficients=coeffs,
        signal=dictionary.synthesize(coeffs),
        gamma=state.gamma.copy(),
        cost_trace=trace,
        iterations=iterations,
        wall_time_s=time.perf_counter() - t0,
        converged=converged,
        skipped_blocks=state.skipped,
        sigma=state.sigma.copy(),
        active=tuple(sorted(state.order)),
    )
