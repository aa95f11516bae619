"""Piecewise-monotone maps and their Ulam discretization.

A :class:`BranchMap` is a list of strictly monotone branches with closed-form
inverses. :func:`build_transfer_matrix` turns it into a row-stochastic (up to
escape) sparse matrix ``P`` with

    P[i, j] = lambda(cell_i & f^{-1}(cell_j)) / lambda(cell_i),

computed from exact inverse images of the grid breakpoints, so that the
pushforward ``f_* mu`` of a cell measure is the row-vector product ``mu @ P``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import digamma

from .errors import InputError, NonsingularityError
from .measure import CellMeasure, Grid, ReferenceMeasure

__all__ = [
    "Branch",
    "MonotoneBranch",
    "GaussTail",
    "BranchMap",
    "TransferMatrix",
    "make_branch",
    "branch_map_from_spec",
    "build_transfer_matrix",
    "pushforward",
    "preimage_mass",
    "save_transfer_matrix",
    "load_transfer_matrix",
]

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-10


class Branch:
    """Something that contributes Ulam entries for part of the domain."""

    expr = "abstract"

    def contribute(self, grid: Grid, lam: ReferenceMeasure):
        """Return ``(rows, cols, masses, escape_rows, escape_masses)``.

        Masses are absolute lambda-masses of ``cell_i & f^{-1}(cell_j)``.
        """
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _bisect_inverse(forward, increasing, lo, hi, y, iters=80):
    a = np.full(np.shape(y), lo, dtype=float)
    b = np.full(np.shape(y), hi, dtype=float)
    for _ in range(iters):
        m = 0.5 * (a + b)
        fm = forward(m)
        below = fm < y if increasing else fm > y
        a = np.where(below, m, a)
        b = np.where(below, b, m)
    return 0.5 * (a + b)


class MonotoneBranch(Branch):
    """A strictly monotone branch ``f: [lo, hi) -> image`` with inverse ``g``.

    ``forward`` and ``inverse`` must be vectorized and accept the (possibly
    infinite) limits at the domain/image endpoints. ``inverse=None`` falls
    back to bisection on the domain, accurate far below 1e-14.
    """

    def __init__(self, lo, hi, forward, derivative, inverse=None, expr="custom", params=None):
        if not lo < hi:
            raise InputError(f"branch domain [{lo}, {hi}) is empty")
        self.lo = float(lo)
        self.hi = float(hi)
        self.forward = forward
        self.derivative = derivative
        self.expr = expr
        self.params = dict(params or {})
        with np.errstate(divide="ignore", invalid="ignore"):
            y0, y1 = float(forward(np.float64(self.lo))), float(forward(np.float64(self.hi)))
        if y0 == y1:
            raise NonsingularityError(f"{expr} branch on [{lo}, {hi}) is constant")
        self.increasing = y1 > y0
        self._inverse = inverse

    def inverse(self, y, lo=None, hi=None):
        y = np.asarray(y, dtype=float)
        if self._inverse is not None:
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                return self._inverse(y)
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        return _bisect_inverse(self.forward, self.increasing, lo, hi, y)

    def image(self, lo=None, hi=None):
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        with np.errstate(divide="ignore", invalid="ignore"):
            y0, y1 = float(self.forward(np.float64(lo))), float(self.forward(np.float64(hi)))
        return (y0, y1) if y0 <= y1 else (y1, y0)

    def _check_nonsingular(self, d0, d1):
        t = d0 + (d1 - d0) * (np.arange(1, 258) / 258.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            dv = np.abs(np.asarray(self.derivative(t), dtype=float))
        flat = dv == 0
        if np.any(flat[1:] & flat[:-1]) or not np.all(np.isfinite(dv) | np.isinf(dv)):
            raise NonsingularityError(
                f"{self.expr} branch has vanishing derivative on a subinterval of [{d0}, {d1})"
            )

    def contribute(self, grid, lam):
        d0 = max(self.lo, grid.lo)
        d1 = min(self.hi, grid.hi)
        empty = (np.empty(0, np.intp), np.empty(0, np.intp), np.empty(0), np.empty(0, np.intp), np.empty(0))
        if not d0 < d1:
            return empty
        self._check_nonsingular(d0, d1)
        ylo, yhi = self.image(d0, d1)
        # roundoff in f at the domain ends must not fake a sliver of escape
        snap = 1e-14 * max(1.0, abs(grid.lo), abs(grid.hi))
        if grid.lo - snap <= ylo < grid.lo:
            ylo = grid.lo
        if grid.hi < yhi <= grid.hi + snap:
            yhi = grid.hi

        # target pieces: grid cells clipped to the image
        j0 = int(np.searchsorted(grid.right, ylo, side="right"))
        j1 = int(np.searchsorted(grid.left, yhi, side="left"))
        tj = np.arange(j0, j1, dtype=np.intp)
        t_lo = np.maximum(grid.left[tj], ylo)
        t_hi = np.minimum(grid.right[tj], yhi)
        keep = t_hi > t_lo
        tj, t_lo, t_hi = tj[keep], t_lo[keep], t_hi[keep]

        # escape pieces: image minus the union of cells
        holes = [(-np.inf, grid.lo), *grid.gaps(), (grid.hi, np.inf)]
        e_lo, e_hi = [], []
        for a, b in holes:
            a, b = max(a, ylo), min(b, yhi)
            if b > a:
                e_lo.append(a)
                e_hi.append(b)
        e_lo = np.asarray(e_lo, dtype=float)
        e_hi = np.asarray(e_hi, dtype=float)

        def preimages(plo, phi):
            p = self.inverse(plo, d0, d1)
            q = self.inverse(phi, d0, d1)
            if not self.increasing:
                p, q = q, p
            return np.clip(p, d0, d1), np.clip(q, d0, d1)

        def overlap(p, q):
            i_start = np.searchsorted(grid.right, p, side="right")
            i_end = np.searchsorted(grid.left, q, side="left")
            counts = np.maximum(i_end - i_start, 0)
            owner = np.repeat(np.arange(p.size), counts)
            offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
            ci = np.repeat(i_start, counts) + offs
            a = np.maximum(p[owner], grid.left[ci])
            b = np.minimum(q[owner], grid.right[ci])
            mass = lam.mass_between(a, np.maximum(a, b))
            ok = mass > 0
            return owner[ok], ci[ok], mass[ok]

        p, q = preimages(t_lo, t_hi)
        own, rows, mass = overlap(p, q)
        cols = tj[own]
        if e_lo.size:
            ep, eq = preimages(e_lo, e_hi)
            _, erows, emass = overlap(ep, eq)
        else:
            erows, emass = np.empty(0, np.intp), np.empty(0)
        return rows, cols, mass, erows, emass

    def to_dict(self):
        return {"expr": self.expr, "domain": [self.lo, self.hi], "params": self.params}


class GaussTail(Branch):
    """All Gauss branches ``1/x - k`` with ``k >= first``, lumped on ``[0, 1/first)``.

    The grid must carry ``[0, 1/first)`` as a single cell; its Ulam row is
    exact through the digamma identity
    ``sum_{k>=K} (1/(k+c) - 1/(k+d)) = psi(K+d) - psi(K+c)``.
    Requires a uniform reference measure.
    """

    expr = "gauss_tail"

    def __init__(self, first: int):
        if first < 1:
            raise InputError("gauss_tail needs first >= 1")
        self.first = int(first)
        self.lo = 0.0
        self.hi = 1.0 / first

    def contribute(self, grid, lam):
        if lam.kind != "uniform":
            raise InputError("gauss_tail requires a uniform reference measure")
        i = np.nonzero((grid.left == 0.0) & (grid.right == self.hi))[0]
        if i.size != 1:
            raise InputError(f"gauss_tail needs [0, 1/{self.first}) as a single grid cell")
        K = self.first
        j = np.nonzero((grid.right > 0.0) & (grid.left < 1.0))[0]
        c = np.clip(grid.left[j], 0.0, 1.0)
        d = np.clip(grid.right[j], 0.0, 1.0)
        leb = digamma(K + d) - digamma(K + c)
        mass = leb * (lam.weights[i[0]] / self.hi)
        rows = np.full(j.size, i[0], dtype=np.intp)
        # image is [0, 1): the part of it outside the grid escapes
        uncovered = 1.0 - float(np.sum(d - c))
        erows = np.empty(0, np.intp)
        emass = np.empty(0)
        if uncovered > 1e-15:
            erows = np.array([i[0]])
            emass = np.array([lam.weights[i[0]] - mass.sum()])
        return rows, j, mass, erows, emass

    def to_dict(self):
        return {"expr": self.expr, "domain": [self.lo, self.hi], "params": {"first": self.first}}


def _power_fwd(lo, w, p):
    return lambda x: lo + w * ((x - lo) / w) ** p


def make_branch(expr: str, domain, **params) -> Branch:
    """Build a branch from the fixed expression catalog.

    ``affine``: ``slope * x + offset``.
    ``boole``: ``x - 1/x`` on a domain of one sign.
    ``gauss``: ``1/x - k``.
    ``gauss_tail``: lumped ``1/x mod 1`` for ``x < 1/first``.
    ``pm``: ``x + x**(1+s) - shift`` (Manneville normal form mod 1).
    ``quadratic``: ``r x (1 - x)`` on one side of 1/2.
    ``power``: ``lo + w ((x - lo)/w)**p`` on ``[lo, lo + w)``.
    """
    lo, hi = (float(v) for v in domain)
    if expr == "affine":
        a, b = float(params["slope"]), float(params.get("offset", 0.0))
        if a == 0:
            raise NonsingularityError("affine branch with zero slope")
        return MonotoneBranch(lo, hi, lambda x: a * x + b, lambda x: np.full(np.shape(x), a),
                              lambda y: (y - b) / a, expr, {"slope": a, "offset": b})
    if expr == "boole":
        if lo < 0 < hi:
            raise InputError("boole branch domain must not contain 0")
        if hi <= 0:
            hi = -0.0  # so that x -> 0- maps to +inf
            def inv(y):
                s = np.sqrt(y * y + 4.0)
                return np.where(y > 0, -2.0 / (y + s), (y - s) / 2.0)
        else:
            def inv(y):
                s = np.sqrt(y * y + 4.0)
                return np.where(y < 0, 2.0 / (s - y), (y + s) / 2.0)
        return MonotoneBranch(lo, hi, lambda x: x - 1.0 / x, lambda x: 1.0 + 1.0 / (x * x), inv, expr, {})
    if expr == "gauss":
        k = int(params["k"])
        return MonotoneBranch(lo, hi, lambda x: 1.0 / x - k, lambda x: -1.0 / (x * x),
                              lambda y: 1.0 / (y + k), expr, {"k": k})
    if expr == "gauss_tail":
        return GaussTail(int(params["first"]))
    if expr == "pm":
        s = float(params["s"])
        shift = float(params.get("shift", 0.0))
        fwd = lambda x: x + x ** (1.0 + s) - shift
        inv = None
        if s == 1.0:
            def inv(y):
                z = y + shift
                return 2.0 * z / (1.0 + np.sqrt(1.0 + 4.0 * z))
        return MonotoneBranch(lo, hi, fwd, lambda x: 1.0 + (1.0 + s) * x ** s, inv, expr,
                              {"s": s, "shift": shift})
    if expr == "quadratic":
        r = float(params.get("r", 4.0))
        if hi <= 0.5:
            inv = lambda y: (2.0 * y / r) / (1.0 + np.sqrt(np.maximum(1.0 - 4.0 * y / r, 0.0)))
        elif lo >= 0.5:
            inv = lambda y: 0.5 + 0.5 * np.sqrt(np.maximum(1.0 - 4.0 * y / r, 0.0))
        else:
            raise InputError("quadratic branch domain must lie on one side of 1/2")
        return MonotoneBranch(lo, hi, lambda x: r * x * (1.0 - x), lambda x: r * (1.0 - 2.0 * x),
                              inv, expr, {"r": r})
    if expr == "power":
        p = float(params["p"])
        w = hi - lo
        return MonotoneBranch(lo, hi, _power_fwd(lo, w, p),
                              lambda x: p * ((x - lo) / w) ** (p - 1.0),
                              lambda y: lo + w * np.maximum((y - lo) / w, 0.0) ** (1.0 / p),
                              expr, {"p": p})
    raise InputError(f"unknown branch expression {expr!r}")


@dataclass(frozen=True, eq=False)
class BranchMap:
    """A nonsingular piecewise-monotone map given by its branches."""

    name: str
    branches: tuple
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        spans = sorted((b.lo, b.hi) for b in self.branches)
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 < b0:
                raise InputError(f"map {self.name!r}: branch domains [{a0},{b0}) and [{a1},{b1}) overlap")

    def __call__(self, x):
        """Evaluate the map pointwise (NaN outside every branch domain)."""
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, np.nan)
        for b in self.branches:
            if isinstance(b, GaussTail):
                sel = (x >= b.lo) & (x < b.hi) & (x > 0)
                with np.errstate(divide="ignore"):
                    out[sel] = np.mod(1.0 / x[sel], 1.0)
                continue
            sel = (x >= b.lo) & (x < b.hi)
            out[sel] = b.forward(x[sel])
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params, "branches": [b.to_dict() for b in self.branches]}


def branch_map_from_spec(spec: dict) -> BranchMap:
    """BranchMap from ``{"name": ..., "branches": [{"expr", "domain", "params"}]}``."""
    try:
        branches = [make_branch(b["expr"], b["domain"], **b.get("params", {})) for b in spec["branches"]]
    except KeyError as exc:
        raise InputError(f"branch spec missing field {exc}") from None
    return BranchMap(spec.get("name", "custom"), tuple(branches), spec.get("params", {}))


class TransferMatrix:
    """Ulam matrix ``P`` (CSR) and per-row escape fractions on a fixed grid."""

    def __init__(self, P: sp.csr_matrix, escape: np.ndarray, grid: Grid):
        P = sp.csr_matrix(P)
        P.sort_indices()
        n = len(grid)
        if P.shape != (n, n):
            raise InputError(f"matrix shape {P.shape} does not match grid with {n} cells")
        escape = np.asarray(escape, dtype=float)
        if escape.shape != (n,):
            raise InputError("escape vector length does not match the grid")
        if P.nnz and P.data.min() < 0 or np.any(escape < 0):
            raise InputError("transfer matrix entries must be non-negative")
        self.P = P
        self.escape = escape
        self.escape.setflags(write=False)
        self.grid = grid
        self._PT = P.T.tocsr()

    @property
    def n_cells(self) -> int:
        return self.P.shape[0]

    def row_defect(self) -> np.ndarray:
        """``row_sum + escape - 1`` for every row."""
        return np.asarray(self.P.sum(axis=1)).ravel() + self.escape - 1.0

    def apply(self, masses: np.ndarray) -> np.ndarray:
        """Row-vector product ``masses @ P`` (also for a stack of rows)."""
        m = np.asarray(masses, dtype=float)
        if m.ndim == 1:
            return self._PT @ m
        return (self._PT @ m.T).T

    def apply_transpose(self, h: np.ndarray) -> np.ndarray:
        """Column product ``P @ h``: backward (Koopman) step on cell functions."""
        return self.P @ h

    def to_dense(self) -> np.ndarray:
        return self.P.toarray()


def build_transfer_matrix(fmap: BranchMap, grid: Grid, lam: ReferenceMeasure) -> TransferMatrix:
    """Ulam discretization of ``f_*`` from exact branch inverse images.

    Raises
    ------
    NonsingularityError
        If a branch is flat on a subinterval.
    InputError
        If the branches fail to cover some cell (row mass missing).
    """
    if not lam.grid.same_as(grid):
        raise InputError("reference measure lives on a different grid")
    n = len(grid)
    rows, cols, vals = [], [], []
    esc = np.zeros(n)
    for b in fmap.branches:
        r, c, m, er, em = b.contribute(grid, lam)
        rows.append(r)
        cols.append(c)
        vals.append(m)
        np.add.at(esc, er, em)
    rows = np.concatenate(rows) if rows else np.empty(0, np.intp)
    cols = np.concatenate(cols) if cols else np.empty(0, np.intp)
    vals = np.concatenate(vals) if vals else np.empty(0)
    P = sp.csr_matrix((vals / lam.weights[rows], (rows, cols)), shape=(n, n))
    P.sum_duplicates()
    escape = esc / lam.weights
    T = TransferMatrix(P, escape, grid)
    defect = T.row_defect()
    bad = np.abs(defect) > ROW_SUM_TOL
    if np.any(bad):
        i = int(np.argmax(np.abs(defect)))
        raise InputError(
            f"map {fmap.name!r} does not account for all mass of cell {i} "
            f"[{grid.left[i]}, {grid.right[i]}): row sum + escape - 1 = {defect[i]:.3e}"
        )
    log.debug("built %s transfer matrix: %d cells, %d nonzeros", fmap.name, n, P.nnz)
    return T


def pushforward(T: TransferMatrix, mu: CellMeasure) -> CellMeasure:
    """``f_* mu``; mass leaving the grid is added to ``escaped_mass``."""
    if not mu.grid.same_as(T.grid):
        raise InputError("measure and transfer matrix live on different grids")
    new = T.apply(mu.masses)
    np.maximum(new, 0.0, out=new)
    lost = float(mu.masses @ T.escape)
    return CellMeasure(new, mu.grid, mu.escaped_mass + lost)


def preimage_mass(T: TransferMatrix, mu: CellMeasure, S, n: int) -> float:
    """``mu(f^{-n}(S)) = (f^n_* mu)(S)``."""
    if n < 0:
        raise InputError("n must be non-negative")
    S = np.asarray(list(S) if not isinstance(S, np.ndarray) else S, dtype=np.intp)
    if S.size and (S.min() < 0 or S.max() >= T.n_cells):
        raise InputError("cell index out of range")
    m = mu
    for _ in range(n):
        m = pushforward(T, m)
    return float(m.masses[np.unique(S)].sum()) if S.size else 0.0


# Binary layout (little-endian):
#   magic    8 bytes  b"ACIMTM\x00\x01"
#   header   n_rows u64, n_cols u64, nnz u64, index_width u8 (4 or 8), 7 pad bytes
#   grid     left f64[n_rows], right f64[n_rows]
#   indptr   i64[n_rows + 1]
#   indices  i32 or i64 [nnz] (per index_width)
#   data     f64[nnz]
#   escape   f64[n_rows]
MAGIC = b"ACIMTM\x00\x01"
_HEADER = struct.Struct("<QQQB7x")


def save_transfer_matrix(T: TransferMatrix, path) -> None:
    P = T.P
    width = 4 if P.shape[1] < 2**31 else 8
    idx_dtype = "<i4" if width == 4 else "<i8"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(P.shape[0], P.shape[1], P.nnz, width))
        fh.write(T.grid.left.astype("<f8").tobytes())
        fh.write(T.grid.right.astype("<f8").tobytes())
        fh.write(P.indptr.astype("<i8").tobytes())
        fh.write(P.indices.astype(idx_dtype).tobytes())
        fh.write(P.data.astype("<f8").tobytes())
        fh.write(T.escape.astype("<f8").tobytes())


def load_transfer_matrix(path, grid: Grid | None = None) -> TransferMatrix:
    """Read a matrix written by :func:`save_transfer_matrix`.

    If ``grid`` is given, the stored cell endpoints must match it exactly.
    """
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise InputError(f"{path}: not a transfer-matrix file")
    rows, cols, nnz, width = _HEADER.unpack_from(data, 8)
    if width not in (4, 8):
        raise InputError(f"{path}: bad index width {width}")
    off = 8 + _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()

    left = take("<f8", rows)
    right = take("<f8", rows)
    indptr = take("<i8", rows + 1)
    indices = take("<i4" if width == 4 else "<i8", nnz)
    vals = take("<f8", nnz)
    escape = take("<f8", rows)
    if off != len(data):
        raise InputError(f"{path}: trailing bytes or truncated file")
    stored = Grid(left, right)
    if grid is not None:
        if not grid.same_as(stored):
            raise InputError(f"{path}: stored grid does not match the experiment grid")
        stored = grid
    P = sp.csr_matrix((vals, indices, indptr), shape=(rows, cols))
    return TransferMatrix(P, escape, stored)
