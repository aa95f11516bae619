"""Numerical checks of the hypotheses behind the ratio-limit construction.

Conditions, for a seed measure ``mu``, a partition element ``I`` and a
constant ``K``:

* m1(I, K): ``mu(I)`` lies in ``[1/K, K]``;
* m2(I, K): for every n, ``mu(f^{-n} I)`` is finite and positive and the
  density of ``f^n_* mu`` on ``I`` has distortion at most ``K``;
* m3(I): ``sup_n mu(f^{-n} I) < inf``;
* m4(I): ``sum_n mu(f^{-n} I) = inf``.

m1/m2 on every element place ``mu`` in M, adding m3 everywhere gives M_s,
adding m4 on I0 gives M_inf. Nothing here is a proof: every verdict is
about a finite horizon and is labelled as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import TransferMatrix
from .errors import InputError, IrreducibilityError
from .measure import (
    CellMeasure,
    LambdaPartition,
    PartitionElement,
    ReferenceMeasure,
    _as_family,
    _distortion_from_masses,
)

__all__ = [
    "K_CAP",
    "IrreducibilityReport",
    "M2Result",
    "M3Result",
    "M4Result",
    "UniformReport",
    "RatioBoundReport",
    "HypothesisReport",
    "orbit",
    "check_irreducibility",
    "check_m2",
    "check_m3",
    "check_m4",
    "reachability_constants",
    "ratio_lower_bound",
    "ratio_bound",
    "lemma23_constants",
    "lemma24_bound",
    "check_ratio_bounds",
    "check_uniform",
    "classify",
]

K_CAP = 1e3
M3_SLOPE_TOL = 1e-4
M4_SLOPE_RATIO = 0.5
REACH_SLACK = 1.0 - 1e-9

MEMBERSHIP = ("not M", "M", "M_s", "M_inf")


def orbit(T: TransferMatrix, mu: CellMeasure, horizon: int) -> np.ndarray:
    """Stack of ``f^n_* mu`` masses for ``n = 0..horizon`` (shape ``(horizon+1, cells)``)."""
    if horizon < 0:
        raise InputError("horizon must be non-negative")
    out = np.empty((horizon + 1, len(mu.grid)))
    out[0] = mu.masses
    for n in range(1, horizon + 1):
        out[n] = T.apply(out[n - 1])
    return out


def _orbit_for(T, mu, horizon, orb):
    if orb is None:
        return orbit(T, mu, horizon)
    if orb.shape[0] < horizon + 1:
        raise InputError("precomputed orbit is shorter than the horizon")
    return orb[: horizon + 1]


def _element(G_or_none, I):
    if isinstance(I, PartitionElement):
        return I
    if G_or_none is None:
        raise InputError("element given by name needs a partition")
    return G_or_none[I]


# ---------------------------------------------------------------------------
# irreducibility


@dataclass
class IrreducibilityReport:
    """``n0[a, b]`` is the least n with ``lambda(f^{-n}(I_a) & I_b) > eps_pos`` (-1: ABSENT)."""

    element_names: list
    n0: np.ndarray
    witness_mass: np.ndarray
    n_max: int
    eps_pos: np.ndarray

    @property
    def verdict(self) -> bool:
        return bool(np.all(self.n0 >= 0))

    def absent_pairs(self) -> list:
        a, b = np.nonzero(self.n0 < 0)
        return [(self.element_names[i], self.element_names[j]) for i, j in zip(a, b)]

    def to_dict(self) -> dict:
        n0 = [[int(v) if v >= 0 else "ABSENT" for v in row] for row in self.n0]
        return {
            "element_names": self.element_names,
            "n0": n0,
            "witness_mass": self.witness_mass.tolist(),
            "n_max": self.n_max,
            "verdict": self.verdict,
        }


def check_irreducibility(T: TransferMatrix, G: LambdaPartition, lam: ReferenceMeasure,
                         n_max: int = 100, eps_pos: float | None = None) -> IrreducibilityReport:
    """Least backward time connecting every ordered pair of elements.

    ``lambda(f^{-n}(I1) & I2)`` is obtained by pushing ``lambda`` restricted
    to ``I2`` forward n times and reading off its mass on ``I1``. All ``I2``
    are pushed together as one stacked product. ``eps_pos`` defaults to
    ``1e-12 * lambda(I2)``.
    """
    if n_max < 1:
        raise InputError("n_max must be at least 1")
    E = len(G)
    lam_el = G.element_masses(lam.weights)
    eps = 1e-12 * lam_el if eps_pos is None else np.full(E, float(eps_pos))
    if np.any(eps <= 0):
        raise InputError("eps_pos must be positive")
    M = np.zeros((E, len(G.grid)))
    for b, e in enumerate(G.elements):
        M[b, e.cells] = lam.weights[e.cells]
    n0 = np.full((E, E), -1, dtype=int)
    witness = np.zeros((E, E))
    for n in range(n_max + 1):
        # hit[b, a] = lambda(f^{-n}(I_a) & I_b)
        hit = G.element_masses(M)
        new = (n0.T < 0) & (hit > eps[:, None])
        if np.any(new):
            bb, aa = np.nonzero(new)
            n0[aa, bb] = n
            witness[aa, bb] = hit[bb, aa]
        if np.all(n0 >= 0) or n == n_max:
            break
        M = T.apply(M)
    return IrreducibilityReport(G.names, n0, witness, n_max, eps)


# ---------------------------------------------------------------------------
# m1 .. m4


@dataclass
class M2Result:
    element: str
    K_series: np.ndarray
    preimage_masses: np.ndarray
    k_cap: float

    @property
    def K(self) -> float:
        return float(self.K_series.max())

    @property
    def positive(self) -> bool:
        return bool(np.all(self.preimage_masses > 0) and np.all(np.isfinite(self.preimage_masses)))

    @property
    def verdict(self) -> str:
        return "PASS" if self.positive and self.K <= self.k_cap else "FAIL"

    def to_dict(self) -> dict:
        return {"element": self.element, "K": self.K, "K_first": float(self.K_series[0]),
                "argmax_n": int(np.argmax(self.K_series)), "positive": self.positive,
                "k_cap": self.k_cap, "verdict": self.verdict}


def _m2_from_orbit(orb, lam, I, subsets, k_cap):
    fam = _as_family(I, subsets)
    mu_I = orb[:, I.cells].sum(axis=1)
    lam_I = float(lam.weights[I.cells].sum())
    mu_A = fam.masses(orb)
    lam_A = fam.masses(lam.weights)
    with np.errstate(divide="ignore", invalid="ignore"):
        K = _distortion_from_masses(mu_A, mu_I[:, None], lam_A, lam_I)
    K = np.where(mu_I > 0, K, np.inf)
    return M2Result(I.name, K, mu_I, k_cap)


def check_m2(T: TransferMatrix, mu: CellMeasure, lam: ReferenceMeasure, I: PartitionElement,
             horizon: int = 200, subsets=None, k_cap: float = K_CAP, orb=None) -> M2Result:
    """Distortion ``K_n`` of ``f^n_* mu`` on ``I`` for ``n = 0..horizon``.

    PASS iff ``max K_n <= k_cap`` and ``mu(f^{-n} I) > 0`` throughout. A
    zero preimage mass gives ``K_n = inf`` and a FAIL, never an exception.
    """
    if horizon < 1:
        raise InputError("horizon must be at least 1")
    return _m2_from_orbit(_orbit_for(T, mu, horizon, orb), lam, I, subsets, k_cap)


@dataclass
class M3Result:
    element: str
    series: np.ndarray
    sup_estimate: float
    trend: float
    tail_mean: float
    slope_tol: float
    mass_bound: float = math.inf

    @property
    def verdict(self) -> str:
        return "BOUNDED" if self.trend <= self.slope_tol * self.tail_mean else "SUSPECT-UNBOUNDED"

    def to_dict(self) -> dict:
        return {"element": self.element, "sup_estimate": self.sup_estimate, "trend": self.trend,
                "tail_mean": self.tail_mean, "slope_tol": self.slope_tol, "verdict": self.verdict,
                "mass_bound": self.mass_bound,
                "horizon": len(self.series) - 1}


def _fit_slope(y):
    x = np.arange(len(y), dtype=float)
    if len(y) < 2:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])


def _m3_from_series(name, series, slope_tol, mass_bound=math.inf):
    h = len(series) // 2
    tail = series[h:]
    return M3Result(name, series, float(series.max()), _fit_slope(tail), float(tail.mean()), slope_tol,
                    mass_bound)


def check_m3(T: TransferMatrix, mu: CellMeasure, I: PartitionElement, horizon: int = 200,
             slope_tol: float = M3_SLOPE_TOL, orb=None) -> M3Result:
    """Trend test for ``sup_n mu(f^{-n} I) < inf``.

    BOUNDED when the least-squares slope over the last half of the series
    is at most ``slope_tol`` times its mean there (flat or decreasing).
    ``mass_bound`` reports the total seed mass, a hard upper bound on the
    series that the trend test deliberately does not use.
    """
    orb = _orbit_for(T, mu, horizon, orb)
    return _m3_from_series(I.name, orb[:, I.cells].sum(axis=1), slope_tol, mu.total)


@dataclass
class M4Result:
    element: str
    partial_sums: np.ndarray
    first_slope: float
    last_slope: float
    slope_ratio: float
    slope_min: float

    @property
    def verdict(self) -> str:
        ok = self.last_slope > self.slope_min and self.last_slope >= self.slope_ratio * self.first_slope
        return "DIVERGENT" if ok else "INCONCLUSIVE"

    def to_dict(self) -> dict:
        return {"element": self.element, "partial_sum": float(self.partial_sums[-1]),
                "first_slope": self.first_slope, "last_slope": self.last_slope,
                "slope_ratio": self.slope_ratio, "verdict": self.verdict,
                "horizon": len(self.partial_sums) - 1}


def _m4_from_series(name, series, slope_ratio, slope_min):
    ps = np.cumsum(series)
    h = len(ps) // 2
    return M4Result(name, ps, _fit_slope(ps[:h]), _fit_slope(ps[h:]), slope_ratio, slope_min)


def check_m4(T: TransferMatrix, mu: CellMeasure, I0: PartitionElement, horizon: int = 200,
             slope_ratio: float = M4_SLOPE_RATIO, slope_min: float = 0.0, orb=None) -> M4Result:
    """Partial sums ``sum_{n<=N} mu(f^{-n} I0)`` with a growth-rate test.

    DIVERGENT when the fitted slope over the last half is positive and at
    least ``slope_ratio`` times the slope over the first half; otherwise
    INCONCLUSIVE (divergence is not finitely decidable).
    """
    orb = _orbit_for(T, mu, horizon, orb)
    return _m4_from_series(I0.name, orb[:, I0.cells].sum(axis=1), slope_ratio, slope_min)


# ---------------------------------------------------------------------------
# reachability and ratio bounds


def reachability_constants(T: TransferMatrix, lam: ReferenceMeasure, I1: PartitionElement,
                      I2: PartitionElement, K: float, n_max: int = 100,
                      eps_pos: float | None = None) -> tuple[int, float]:
    """``(n0, eps)`` with ``mu(f^{-n-n0} I1) >= eps mu(f^{-n} I2)`` for all n.

    ``n0`` is the least time with ``lambda(f^{-n0}(I1) & I2) > eps_pos`` and
    ``eps = lambda(f^{-n0}(I1) & I2) / (K lambda(I2))``, where ``K`` is an
    m2 distortion constant of ``mu`` on ``I2``.

    Raises
    ------
    IrreducibilityError
        If ``I2`` never reaches ``I1`` within ``n_max`` steps.
    """
    if not K >= 1:
        raise InputError("K must be >= 1")
    lam_I2 = float(lam.weights[I2.cells].sum())
    thr = 1e-12 * lam_I2 if eps_pos is None else float(eps_pos)
    m = np.zeros(len(lam.grid))
    m[I2.cells] = lam.weights[I2.cells]
    for n in range(n_max + 1):
        hit = float(m[I1.cells].sum())
        if hit > thr:
            return n, hit / (K * lam_I2)
        m = T.apply(m)
    raise IrreducibilityError(f"{I2.name} does not reach {I1.name} within {n_max} steps")


def ratio_lower_bound(eps: float, n0: int, sup_I2: float, mass_I2: float) -> float:
    """Lower bound ``eps mass_I2 / (n0 sup_I2 + mass_I2)`` on ``S_n(I1) / S_n(I2)``.

    ``sup_I2`` is ``sup_i mu(f^{-i} I2)`` and ``mass_I2`` is ``mu(I2)``.
    """
    if not (eps > 0 and mass_I2 > 0 and sup_I2 > 0 and n0 >= 0):
        raise InputError("ratio bound needs eps, sup and mass positive and n0 >= 0")
    if sup_I2 < mass_I2 * (1 - 1e-12):
        raise InputError("sup over n >= 0 cannot be below the n = 0 term mu(I2)")
    return eps * mass_I2 / (n0 * sup_I2 + mass_I2)


def ratio_bound(eps: float, n0: int, sup_I2: float, mass_I2: float, reverse=None) -> float:
    """``K_ratio`` such that ``S_n(I1)/S_n(I2)`` lies in ``[1/K_ratio, K_ratio]``.

    ``reverse`` is the ``(eps, n0, sup, mass)`` tuple with the roles of I1
    and I2 interchanged; without it only the lower bound is used.
    """
    L = ratio_lower_bound(eps, n0, sup_I2, mass_I2)
    if reverse is not None:
        L = min(L, ratio_lower_bound(*reverse))
    return 1.0 / L


# names under which these two operations appear in the public interface
lemma23_constants = reachability_constants
lemma24_bound = ratio_bound


@dataclass
class RatioBoundReport:
    """Constants and violation counts for the reachability constants and ratio bounds over all pairs.

    ``n0[a, b]``, ``eps[a, b]`` come from irreducibility for the pair
    ``(I1, I2) = (a, b)`` and ``k_ratio[a, b]`` is the two-sided bound on
    ``S_n(I_a)/S_n(I_b)``. ``ratio_violations`` counts ratios outside
    ``[1/k_ratio, k_ratio]`` over every ``1 <= n <= horizon``;
    ``ratio_post_n0_violations`` restricts that count to
    ``n > max(n0)``, the range the bound is derived for.
    """

    element_names: list
    K: np.ndarray
    n0: np.ndarray
    eps: np.ndarray
    sup: np.ndarray
    k_ratio: np.ndarray
    reach_violations: int
    ratio_violations: int
    ratio_post_n0_violations: int
    worst_reach_margin: float
    worst_ratio_margin: float
    horizon: int

    def to_dict(self) -> dict:
        return {
            "element_names": self.element_names,
            "K": self.K.tolist(),
            "n0": self.n0.tolist(),
            "eps": self.eps.tolist(),
            "k_ratio": self.k_ratio.tolist(),
            "reach_violations": self.reach_violations,
            "ratio_violations": self.ratio_violations,
            "ratio_post_n0_violations": self.ratio_post_n0_violations,
            "worst_reach_margin": self.worst_reach_margin,
            "worst_ratio_margin": self.worst_ratio_margin,
            "horizon": self.horizon,
        }


def check_ratio_bounds(T: TransferMatrix, mu: CellMeasure, lam: ReferenceMeasure, G: LambdaPartition,
                 horizon: int = 200, n_max: int = 100, subsets=None, orb=None,
                 K: np.ndarray | None = None) -> RatioBoundReport:
    """Compute ``(eps, n0)`` and ``K_ratio`` for every pair and test them.

    Checks ``mu(f^{-n-n0} I1) >= eps mu(f^{-n} I2)`` for every
    ``n <= horizon - n0`` (with relative slack 1e-9) and that
    ``S_n(I1)/S_n(I2)`` stays inside ``[1/K_ratio, K_ratio]`` for
    ``1 <= n <= horizon``. ``K`` defaults to the m2 constants of ``mu``
    over the horizon.
    """
    orb = _orbit_for(T, mu, horizon, orb)
    E = len(G)
    el = G.element_masses(orb)  # (n, E): mu(f^{-n} I)
    if K is None:
        K = np.array([_m2_from_orbit(orb, lam, I, subsets, math.inf).K for I in G.elements])
    irr = check_irreducibility(T, G, lam, n_max=n_max)
    if not irr.verdict:
        raise IrreducibilityError(f"pairs never connected: {irr.absent_pairs()}")
    n0 = irr.n0
    lam_el = G.element_masses(lam.weights)
    eps = irr.witness_mass / (K[None, :] * lam_el[None, :])
    sup = el.max(axis=0)
    mass = el[0]

    reach_viol = 0
    worst23 = math.inf
    for a in range(E):
        for b in range(E):
            d = n0[a, b]
            if d > horizon:
                continue
            lhs = el[d:, a]
            rhs = eps[a, b] * el[: horizon + 1 - d, b]
            reach_viol += int(np.sum(lhs < REACH_SLACK * rhs))
            with np.errstate(divide="ignore", invalid="ignore"):
                marg = np.where(rhs > 0, lhs / rhs, np.inf)
            worst23 = min(worst23, float(marg.min()))

    lower = np.empty((E, E))
    for a in range(E):
        for b in range(E):
            lower[a, b] = ratio_lower_bound(eps[a, b], int(n0[a, b]), sup[b], mass[b])
    # S_n(I_a)/S_n(I_b) >= lower[a, b]; the reverse pair bounds it from above
    k_ratio = 1.0 / np.minimum(lower, lower.T)

    S = np.cumsum(el, axis=0)[:horizon]  # S[n-1] = S_n
    with np.errstate(divide="ignore", invalid="ignore"):
        R = S[:, :, None] / S[:, None, :]  # R[n-1, a, b] = S_n(I_a)/S_n(I_b)
        margin = np.minimum(R * k_ratio, k_ratio / R)
    tol = 1e-12
    out = margin < 1 - tol
    post = np.arange(1, horizon + 1) > int(n0.max())
    return RatioBoundReport(G.names, K, n0, eps, sup, k_ratio, reach_viol, int(out.sum()), int(out[post].sum()),
                       worst23, float(np.nanmin(margin)), horizon)


# ---------------------------------------------------------------------------
# uniformity and classification


@dataclass
class UniformReport:
    element_names: list
    K_distortion: np.ndarray
    K_mass: np.ndarray
    k_cap: float
    horizon: int

    @property
    def K(self) -> np.ndarray:
        return np.maximum(self.K_distortion, self.K_mass)

    @property
    def verdict(self) -> str:
        return "PASS" if np.all(np.isfinite(self.K)) and np.all(self.K <= self.k_cap) else "FAIL"

    def to_dict(self) -> dict:
        return {"element_names": self.element_names, "K": self.K.tolist(),
                "K_distortion": self.K_distortion.tolist(), "K_mass": self.K_mass.tolist(),
                "k_cap": self.k_cap, "horizon": self.horizon, "verdict": self.verdict}


def check_uniform(T: TransferMatrix, mu: CellMeasure, lam: ReferenceMeasure, G: LambdaPartition,
                  horizon: int = 200, subsets=None, k_cap: float = K_CAP, orb=None) -> UniformReport:
    """Per-element ``K(I)`` making ``{Q_n mu : 1 <= n <= horizon}`` uniform.

    ``K(I)`` is the larger of the distortion of ``Q_n`` on ``I`` and
    ``max(Q_n(I), 1/Q_n(I))``, maximized over n.
    """
    orb = _orbit_for(T, mu, horizon, orb)
    S = np.cumsum(orb, axis=0)[:horizon]
    s0 = S[:, G.I0.cells].sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        Qel = G.element_masses(S) / s0[:, None]
    kd, km = [], []
    for k, I in enumerate(G.elements):
        # distortion is scale invariant, so S_n serves for Q_n
        kd.append(_m2_from_orbit(S, lam, I, subsets, k_cap).K)
        q = Qel[:, k]
        with np.errstate(divide="ignore"):
            km.append(float(np.max(np.maximum(q, 1.0 / q))) if np.all(q > 0) else math.inf)
    return UniformReport(G.names, np.array(kd), np.array(km), k_cap, horizon)


@dataclass
class HypothesisReport:
    element_names: list
    i0: str
    horizon: int
    m1_mass: np.ndarray
    m1_K: np.ndarray
    m2: list
    m3: list
    m4: M4Result
    ratio_bounds: RatioBoundReport | None
    membership: str
    caveat: str

    @property
    def in_M(self) -> bool:
        return MEMBERSHIP.index(self.membership) >= 1

    @property
    def in_M_s(self) -> bool:
        return MEMBERSHIP.index(self.membership) >= 2

    @property
    def in_M_inf(self) -> bool:
        return self.membership == "M_inf"

    def to_dict(self) -> dict:
        return {
            "membership": self.membership,
            "caveat": self.caveat,
            "horizon": self.horizon,
            "i0": self.i0,
            "element_names": self.element_names,
            "m1": {"mass": self.m1_mass.tolist(), "K": self.m1_K.tolist(),
                   "verdict": "PASS" if _m1_ok(self.m1_mass) else "FAIL"},
            "m2": [r.to_dict() for r in self.m2],
            "m3": [r.to_dict() for r in self.m3],
            "m4": self.m4.to_dict(),
            "ratio_bounds": self.ratio_bounds.to_dict() if self.ratio_bounds is not None else None,
        }


def _m1_ok(masses):
    return bool(np.all(masses > 0) and np.all(np.isfinite(masses)))


def classify(T: TransferMatrix, mu: CellMeasure, lam: ReferenceMeasure, G: LambdaPartition,
             horizon: int = 200, subsets=None, k_cap: float = K_CAP,
             slope_tol: float = M3_SLOPE_TOL, slope_ratio: float = M4_SLOPE_RATIO,
             with_ratio_bounds: bool = True, irreducible: bool | None = None) -> HypothesisReport:
    """Membership of ``mu`` in M, M_s, M_inf, consistent within ``horizon`` steps.

    m1 needs ``0 < mu(I) < inf`` (its constant is reported); m2 needs the
    distortion constant under ``k_cap``; m3 on every element and m4 on I0
    use the trend tests of :func:`check_m3` and :func:`check_m4`. The
    ratio-bound tables are filled in for M_s members of irreducible systems.
    """
    orb = orbit(T, mu, horizon)
    el0 = G.element_masses(orb[0])
    with np.errstate(divide="ignore"):
        m1_K = np.maximum(el0, 1.0 / el0)
    m2 = [_m2_from_orbit(orb, lam, I, subsets, k_cap) for I in G.elements]
    m3 = [_m3_from_series(I.name, orb[:, I.cells].sum(axis=1), slope_tol, mu.total) for I in G.elements]
    I0 = G.I0
    m4 = _m4_from_series(I0.name, orb[:, I0.cells].sum(axis=1), slope_ratio, 0.0)

    level = 0
    if _m1_ok(el0) and all(r.verdict == "PASS" for r in m2):
        level = 1
        if all(r.verdict == "BOUNDED" for r in m3):
            level = 2
            if m4.verdict == "DIVERGENT":
                level = 3
    ratio_bounds = None
    if with_ratio_bounds and level >= 2 and irreducible is not False:
        K = np.array([r.K for r in m2])
        try:
            ratio_bounds = check_ratio_bounds(T, mu, lam, G, horizon=horizon, subsets=subsets, orb=orb, K=K)
        except IrreducibilityError:
            ratio_bounds = None
    return HypothesisReport(
        element_names=G.names,
        i0=I0.name,
        horizon=horizon,
        m1_mass=el0,
        m1_K=m1_K,
        m2=m2,
        m3=m3,
        m4=m4,
        ratio_bounds=ratio_bounds,
        membership=MEMBERSHIP[level],
        caveat=f"within horizon {horizon}; numerical consistency, not a proof",
    )
