"""Birkhoff sums, ratio normalization and limit detection.

For a seed measure ``mu`` the running sum ``S_n = sum_{i<n} f^i_* mu`` is
normalized by its mass on a reference element ``I0``:
``Q_n = S_n / S_n(I0)``. Limits of ``Q_n`` are the candidate invariant
measures; :func:`omega_limit` detects them with a sliding-window Cauchy test.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dynamics import TransferMatrix, pushforward
from .errors import EscapeOverflowError, InputError, NormalizationError
from .measure import CellMeasure, LambdaPartition, PartitionElement

__all__ = [
    "SumState",
    "ConvergenceReport",
    "InvarianceResidual",
    "initial_state",
    "birkhoff_step",
    "ratio_normalize",
    "omega_limit",
    "invariance_residual",
    "telescoping_terms",
]

log = logging.getLogger(__name__)

IDENTITY_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class SumState:
    """``S_n`` together with the last added term ``current = f^{n-1}_* mu``.

    ``S`` is kept unnormalized: float64 headroom exceeds any feasible run
    length, and keeping the raw sum makes ``S_1 = mu`` and the cell-wise
    monotonicity of ``S_n`` hold bit-exactly.
    """

    n: int
    S: np.ndarray
    current: CellMeasure | None
    seed: CellMeasure

    @property
    def grid(self):
        return self.seed.grid

    @property
    def sum_measure(self) -> CellMeasure:
        return CellMeasure(self.S, self.grid)

    @property
    def escaped(self) -> float:
        return 0.0 if self.current is None else self.current.escaped_mass


def initial_state(seed: CellMeasure) -> SumState:
    """The empty sum ``S_0 = 0``."""
    S = np.zeros(len(seed.grid))
    S.setflags(write=False)
    return SumState(0, S, None, seed)


def birkhoff_step(state: SumState, T: TransferMatrix, max_escape_fraction: float | None = None,
                  term: CellMeasure | None = None) -> SumState:
    """Advance ``S_n -> S_{n+1} = S_n + f^n_* mu``.

    ``term`` may pass a precomputed ``pushforward(T, state.current)``.

    Raises
    ------
    EscapeOverflowError
        If the mass pushed off a truncated grid exceeds
        ``max_escape_fraction`` times the seed mass.
    """
    if not state.grid.same_as(T.grid):
        raise InputError("state and transfer matrix live on different grids")
    if state.n == 0:
        nxt = state.seed
    else:
        nxt = term if term is not None else pushforward(T, state.current)
    if max_escape_fraction is not None and nxt.escaped_mass > max_escape_fraction * state.seed.total:
        raise EscapeOverflowError(
            f"cumulative escape {nxt.escaped_mass:.3e} exceeds "
            f"{max_escape_fraction:g} of the seed mass {state.seed.total:.3e} at n={state.n + 1}"
        )
    S = state.S + nxt.masses
    S.setflags(write=False)
    return SumState(state.n + 1, S, nxt, state.seed)


def ratio_normalize(state: SumState, I0: PartitionElement) -> CellMeasure:
    """``Q_n = S_n / S_n(I0)``.

    Raises
    ------
    NormalizationError
        If ``S_n(I0) == 0``: I0 has not been reached from the seed within n
        steps (check irreducibility).
    """
    s0 = float(state.S[I0.cells].sum())
    if not s0 > 0:
        raise NormalizationError(f"S_{state.n}({I0.name}) = 0; I0 not reached from the seed")
    return CellMeasure(state.S / s0, state.grid)


def telescoping_terms(T: TransferMatrix, state: SumState, ahead: CellMeasure, G: LambdaPartition):
    """Both sides of the finite-n invariance identity, per element.

    Returns ``(lhs, rhs, scale)`` with ``lhs = |Q_n(f^{-1} I) - Q_n(I)|`` and
    ``rhs = |mu(f^{-n} I) - mu(I)| / S_n(I0)``; ``ahead`` is ``f^n_* mu``.
    ``scale`` bounds the magnitudes entering the cancellation in ``lhs``.
    """
    s0 = float(state.S[G.I0.cells].sum())
    Q = state.S / s0
    QP = T.apply(Q)
    q_el = G.element_masses(Q)
    qp_el = G.element_masses(QP)
    lhs = np.abs(qp_el - q_el)
    rhs = np.abs(G.element_masses(ahead.masses) - G.element_masses(state.seed.masses)) / s0
    scale = np.maximum.reduce([q_el, qp_el, rhs])
    return lhs, rhs, scale


@dataclass
class ConvergenceReport:
    """Outcome of :func:`omega_limit`.

    ``per_element_masses[k]`` holds ``Q_{k+1}(I)`` for every element;
    ``sum_I0[k]`` is ``S_{k+1}(I0)``, so ``S_n(I) = Q_n(I) * S_n(I0)``.
    """

    converged: bool
    n_stop: int
    cauchy_gap: float
    tol: float
    window: int
    limit: CellMeasure | None
    last: CellMeasure
    element_names: list
    i0: str
    per_element_masses: np.ndarray
    sum_I0: np.ndarray
    gaps: np.ndarray
    residuals: np.ndarray
    identity_max_rel_error: float
    identity_rhs: np.ndarray
    escaped_mass: float
    seed_mass: float

    @property
    def per_element_sums(self) -> np.ndarray:
        return self.per_element_masses * self.sum_I0[:, None]

    def to_dict(self) -> dict:
        q_last = self.per_element_masses[-1] if len(self.per_element_masses) else []
        return {
            "converged": self.converged,
            "n_stop": self.n_stop,
            "cauchy_gap": self.cauchy_gap,
            "tol": self.tol,
            "window": self.window,
            "i0": self.i0,
            "element_names": self.element_names,
            "final_Q_element_masses": list(map(float, q_last)),
            "final_S_I0": float(self.sum_I0[-1]) if len(self.sum_I0) else 0.0,
            "identity_max_rel_error": self.identity_max_rel_error,
            "escaped_mass": self.escaped_mass,
            "escaped_fraction": self.escaped_mass / self.seed_mass if self.seed_mass else 0.0,
        }


def omega_limit(T: TransferMatrix, mu: CellMeasure, G: LambdaPartition, tol: float = 1e-8,
                n_max: int = 200, window: int = 10, max_escape_fraction: float | None = 0.01,
                identity_rtol: float = IDENTITY_RTOL) -> ConvergenceReport:
    """Iterate ``Q_n`` until the trailing window is Cauchy to within ``tol``.

    Convergence is declared at the first ``n`` for which
    ``max |Q_a - Q_b|`` over cells of the partition and ``a, b`` in the last
    ``window`` steps is ``<= tol``. Reaching ``n_max`` without that is a
    report outcome, not an error.

    At every step the invariance identity
    ``|Q_n(f^{-1} I) - Q_n(I)| = |mu(f^{-n} I) - mu(I)| / S_n(I0)`` is
    evaluated per element; its worst relative mismatch is reported and an
    ``AssertionError`` is raised if it exceeds ``identity_rtol``.
    """
    if not tol > 0:
        raise InputError("tol must be positive")
    if window < 2:
        raise InputError("window must be at least 2")
    if n_max < 1:
        raise InputError("n_max must be at least 1")
    cells = G.union_cells()
    I0 = G.I0
    ring = deque(maxlen=window)
    q_traj, s0_traj, gaps, residuals, rhs_traj = [], [], [], [], []
    worst = 0.0
    state = birkhoff_step(initial_state(mu), T, max_escape_fraction)
    gap = np.inf
    converged = False
    while True:
        Q = ratio_normalize(state, I0)
        ahead = pushforward(T, state.current)
        lhs, rhs, scale = telescoping_terms(T, state, ahead, G)
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(scale > 0, np.abs(lhs - rhs) / scale, 0.0)
        worst = max(worst, float(rel.max()))
        if worst > identity_rtol:
            raise AssertionError(
                f"invariance identity violated at n={state.n}: relative mismatch {worst:.3e}"
            )
        q_traj.append(G.element_masses(Q.masses))
        s0_traj.append(float(state.S[I0.cells].sum()))
        residuals.append(float(lhs.max()))
        rhs_traj.append(rhs)
        ring.append(Q.masses[cells])
        if len(ring) == window:
            stack = np.asarray(ring)
            gap = float((stack.max(axis=0) - stack.min(axis=0)).max())
            if gap <= tol:
                converged = True
        gaps.append(gap)
        if converged or state.n >= n_max:
            break
        state = birkhoff_step(state, T, max_escape_fraction, term=ahead)

    log.info("omega_limit: n=%d converged=%s gap=%.3e", state.n, converged, gap)
    return ConvergenceReport(
        converged=converged,
        n_stop=state.n,
        cauchy_gap=gap,
        tol=tol,
        window=window,
        limit=Q if converged else None,
        last=Q,
        element_names=G.names,
        i0=I0.name,
        per_element_masses=np.asarray(q_traj),
        sum_I0=np.asarray(s0_traj),
        gaps=np.asarray(gaps),
        residuals=np.asarray(residuals),
        identity_max_rel_error=worst,
        identity_rhs=np.asarray(rhs_traj),
        escaped_mass=state.escaped,
        seed_mass=mu.total,
    )


@dataclass
class InvarianceResidual:
    element_names: list
    per_element: np.ndarray
    l1: float

    @property
    def max(self) -> float:
        return float(self.per_element.max()) if self.per_element.size else 0.0

    def to_dict(self) -> dict:
        return {
            "element_names": self.element_names,
            "per_element": list(map(float, self.per_element)),
            "max": self.max,
            "l1": self.l1,
        }


def invariance_residual(T: TransferMatrix, nu: CellMeasure, G: LambdaPartition) -> InvarianceResidual:
    """``|nu(f^{-1} I) - nu(I)|`` per element and ``||f_* nu - nu||_1`` on the union of G."""
    if not nu.grid.same_as(T.grid):
        raise InputError("measure and transfer matrix live on different grids")
    pushed = T.apply(nu.masses)
    per = np.abs(G.element_masses(pushed) - G.element_masses(nu.masses))
    cells = G.union_cells()
    l1 = float(np.abs(pushed[cells] - nu.masses[cells]).sum())
    return InvarianceResidual(G.names, per, l1)
