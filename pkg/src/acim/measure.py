"""Cell-aligned measures, the reference measure, lambda-partitions and distortion.

Everything here lives on a :class:`Grid`: a sorted list of disjoint half-open
cells ``[a_i, b_i)``. A measure absolutely continuous with respect to the
reference measure is stored as one mass per cell, its density with respect to
the reference measure being constant on each cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateMeasureError, InputError

__all__ = [
    "Grid",
    "CellMeasure",
    "ReferenceMeasure",
    "PartitionElement",
    "LambdaPartition",
    "SubsetFamily",
    "PartitionReport",
    "measure_of",
    "distortion_bound",
    "validate_partition",
    "grid_from_spec",
    "partition_from_spec",
]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Sorted, pairwise disjoint half-open cells ``[left[i], right[i])``."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = _frozen(self.left)
        right = _frozen(self.right)
        if left.ndim != 1 or left.shape != right.shape:
            raise InputError("grid: left and right must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise InputError("grid: cell endpoints must be finite (truncate unbounded domains)")
        if np.any(right <= left):
            raise InputError("grid: every cell must have positive length")
        if np.any(left[1:] < right[:-1]):
            raise InputError("grid: cells must be sorted and pairwise disjoint")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @classmethod
    def from_breakpoints(cls, breakpoints: Sequence[float]) -> "Grid":
        b = np.asarray(breakpoints, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise InputError("grid: need at least two breakpoints")
        return cls(b[:-1], b[1:])

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int) -> "Grid":
        edges = lo + (hi - lo) * np.arange(n + 1) / n
        edges[-1] = hi
        return cls.from_breakpoints(edges)

    def __len__(self):
        return self.left.size

    @property
    def n_cells(self) -> int:
        return self.left.size

    @property
    def lengths(self) -> np.ndarray:
        return self.right - self.left

    @property
    def lo(self) -> float:
        return float(self.left[0])

    @property
    def hi(self) -> float:
        return float(self.right[-1])

    @property
    def is_contiguous(self) -> bool:
        return bool(np.all(self.left[1:] == self.right[:-1]))

    def gaps(self) -> list[tuple[float, float]]:
        """Bounded intervals between consecutive cells not covered by the grid."""
        idx = np.nonzero(self.left[1:] > self.right[:-1])[0]
        return [(float(self.right[k]), float(self.left[k + 1])) for k in idx]

    def locate(self, x) -> np.ndarray:
        """Index of the cell containing each point, or -1."""
        x = np.asarray(x, dtype=float)
        k = np.searchsorted(self.left, x, side="right") - 1
        ok = (k >= 0) & (x < self.right[np.clip(k, 0, None)])
        return np.where(ok, k, -1)

    def cells_in(self, a: float, b: float) -> np.ndarray:
        """Indices of cells contained in ``[a, b)``."""
        return np.nonzero((self.left >= a) & (self.right <= b))[0]

    def same_as(self, other: "Grid") -> bool:
        return self is other or (
            len(self) == len(other)
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
        )

    def to_dict(self) -> dict:
        if self.is_contiguous:
            return {"breakpoints": np.append(self.left, self.right[-1]).tolist()}
        return {"cells": np.column_stack([self.left, self.right]).tolist()}


@dataclass(frozen=True, eq=False)
class CellMeasure:
    """A finite measure on a grid, stored as non-negative per-cell masses.

    ``escaped_mass`` accumulates mass that a truncated dynamics pushed off
    the grid; it is never folded back into ``masses``.
    """

    masses: np.ndarray
    grid: Grid
    escaped_mass: float = 0.0

    def __post_init__(self):
        m = _frozen(self.masses)
        if m.shape != (len(self.grid),):
            raise InputError(
                f"measure has {m.size} masses but the grid has {len(self.grid)} cells"
            )
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise InputError("measure masses must be finite and non-negative")
        if not (self.escaped_mass >= 0 and math.isfinite(self.escaped_mass)):
            raise InputError("escaped_mass must be finite and non-negative")
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "escaped_mass", float(self.escaped_mass))

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def density(self, reference: "ReferenceMeasure") -> np.ndarray:
        """Per-cell Radon-Nikodym derivative with respect to ``reference``."""
        return self.masses / reference.weights

    def restrict(self, cells) -> "CellMeasure":
        m = np.zeros(len(self.grid))
        cells = np.asarray(cells, dtype=np.intp)
        m[cells] = self.masses[cells]
        return CellMeasure(m, self.grid)

    def scaled(self, c: float) -> "CellMeasure":
        return CellMeasure(self.masses * c, self.grid, self.escaped_mass * c)

    def __add__(self, other: "CellMeasure") -> "CellMeasure":
        if not self.grid.same_as(other.grid):
            raise InputError("cannot add measures living on different grids")
        return CellMeasure(
            self.masses + other.masses, self.grid, self.escaped_mass + other.escaped_mass
        )


@dataclass(frozen=True, eq=False)
class ReferenceMeasure:
    """The probability measure lambda that determines the null sets.

    Two shapes are supported: ``"uniform"`` (normalized Lebesgue measure on the
    grid's cells) and ``"cauchy"`` (density ``1 / (pi (1 + x**2))`` on the real
    line, of which the grid only sees a truncated piece). ``outside_mass`` is
    the lambda-mass not covered by any grid cell, so ``weights.sum() +
    outside_mass == 1``.
    """

    grid: Grid
    kind: str = "uniform"
    weights: np.ndarray = field(default=None, repr=False)
    outside_mass: float = 0.0
    _norm: float = field(default=1.0, repr=False)

    def __post_init__(self):
        if self.kind == "uniform":
            norm = float(self.grid.lengths.sum())
            w = self.grid.lengths / norm
            outside = 0.0
        elif self.kind == "cauchy":
            norm = 1.0
            w = _cauchy_mass(self.grid.left, self.grid.right)
            outside = _cauchy_mass(-np.inf, self.grid.lo) + _cauchy_mass(self.grid.hi, np.inf)
            outside += sum(_cauchy_mass(a, b) for a, b in self.grid.gaps())
        else:
            raise InputError(f"unknown reference measure kind {self.kind!r}")
        if np.any(w <= 0):
            raise InputError("every cell must carry positive reference mass")
        object.__setattr__(self, "_norm", norm)
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "outside_mass", float(outside))

    @classmethod
    def uniform(cls, grid: Grid) -> "ReferenceMeasure":
        return cls(grid, "uniform")

    @classmethod
    def cauchy(cls, grid: Grid) -> "ReferenceMeasure":
        return cls(grid, "cauchy")

    @property
    def total(self) -> float:
        return float(self.weights.sum()) + self.outside_mass

    def mass_between(self, a, b) -> np.ndarray:
        """lambda([a, b)) for arrays of endpoints with ``a <= b``.

        The caller guarantees ``[a, b)`` lies inside the grid's cells (the
        uniform shape has no mass elsewhere).
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "uniform":
            return np.maximum(b - a, 0.0) / self._norm
        return np.maximum(_cauchy_mass(a, b), 0.0)

    def density_at(self, x) -> np.ndarray:
        """Lebesgue density of lambda."""
        x = np.asarray(x, dtype=float)
        if self.kind == "uniform":
            return np.full(x.shape, 1.0 / self._norm)
        return 1.0 / (np.pi * (1.0 + x * x))

    def as_measure(self) -> CellMeasure:
        return CellMeasure(self.weights, self.grid)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "outside_mass": self.outside_mass}


def _cauchy_mass(a, b):
    """Cauchy(0, 1) mass of [a, b), accurate also for far-out narrow intervals."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        prod = a * b
        # atan(b) - atan(a) = atan((b - a) / (1 + ab)) when ab > -1 and both finite
        direct = np.arctan(b) - np.arctan(a)
        fused = np.arctan((b - a) / (1.0 + prod))
        safe = np.isfinite(a) & np.isfinite(b) & (prod > 0)
        out = np.where(safe, fused, direct) / np.pi
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class PartitionElement:
    name: str
    cells: np.ndarray

    def __post_init__(self):
        c = np.unique(np.asarray(self.cells, dtype=np.intp))
        if c.size == 0:
            raise InputError(f"partition element {self.name!r} has no cells")
        c.setflags(write=False)
        object.__setattr__(self, "cells", c)

    def __len__(self):
        return self.cells.size


@dataclass(frozen=True, eq=False)
class LambdaPartition:
    """A finite lambda-partition: named elements, each an exact union of grid cells.

    ``i0`` is the index of the element used for ratio normalization.
    """

    grid: Grid
    elements: tuple
    i0: int = 0

    def __post_init__(self):
        els = tuple(self.elements)
        if not els:
            raise InputError("partition needs at least one element")
        for e in els:
            if e.cells.min() < 0 or e.cells.max() >= len(self.grid):
                raise InputError(f"partition element {e.name!r} references cells off the grid")
        names = [e.name for e in els]
        if len(set(names)) != len(names):
            raise InputError("partition element names must be unique")
        if not 0 <= self.i0 < len(els):
            raise InputError(f"i0 index {self.i0} out of range")
        object.__setattr__(self, "elements", els)

    @classmethod
    def from_breakpoints(
        cls, grid: Grid, breakpoints: Sequence[float], i0=None, names=None
    ) -> "LambdaPartition":
        """Elements ``[b_k, b_{k+1})`` made of the grid cells they contain."""
        b = list(breakpoints)
        elements = []
        for k in range(len(b) - 1):
            cells = grid.cells_in(b[k], b[k + 1])
            name = names[k] if names else _interval_name(b[k], b[k + 1])
            if cells.size == 0:
                raise InputError(f"partition element {name} contains no grid cell")
            elements.append(PartitionElement(name, cells))
        part = cls(grid, tuple(elements), 0)
        return part.with_i0(i0)

    def with_i0(self, selector=None, reference: "ReferenceMeasure | None" = None) -> "LambdaPartition":
        """Copy with I0 chosen by name, index, or (``None``) largest lambda-mass."""
        if selector is None:
            if reference is None:
                return self
            masses = self.element_masses(reference.weights)
            idx = int(np.argmax(masses))
        else:
            idx = self.index(selector)
        return LambdaPartition(self.grid, self.elements, idx)

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __getitem__(self, k) -> PartitionElement:
        return self.elements[self.index(k)]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.elements]

    @property
    def I0(self) -> PartitionElement:
        return self.elements[self.i0]

    def index(self, selector) -> int:
        if isinstance(selector, PartitionElement):
            for k, e in enumerate(self.elements):
                if e is selector or e.name == selector.name:
                    return k
            raise InputError(f"element {selector.name!r} is not in this partition")
        if isinstance(selector, (int, np.integer)):
            if not 0 <= selector < len(self.elements):
                raise InputError(f"partition element index {selector} out of range")
            return int(selector)
        names = self.names
        if selector in names:
            return names.index(selector)
        raise InputError(f"unknown partition element {selector!r}")

    @property
    def indicator(self) -> sp.csr_matrix:
        """Sparse (elements x cells) 0/1 membership matrix."""
        rows = np.concatenate([np.full(len(e), k) for k, e in enumerate(self.elements)])
        cols = np.concatenate([e.cells for e in self.elements])
        data = np.ones(cols.size)
        return sp.csr_matrix((data, (rows, cols)), shape=(len(self.elements), len(self.grid)))

    def element_masses(self, masses) -> np.ndarray:
        """Mass of every element for a mass vector (or a stack of them, cells last)."""
        m = np.asarray(masses, dtype=float)
        if m.ndim == 1:
            return np.array([m[e.cells].sum() for e in self.elements])
        return np.stack([m[..., e.cells].sum(axis=-1) for e in self.elements], axis=-1)

    def union_cells(self) -> np.ndarray:
        return np.unique(np.concatenate([e.cells for e in self.elements]))

    def to_dict(self) -> dict:
        return {
            "elements": [{"name": e.name, "cells": e.cells.tolist()} for e in self.elements],
            "i0": self.I0.name,
        }


def _interval_name(a, b) -> str:
    return f"[{_fmt_endpoint(a)},{_fmt_endpoint(b)})"


def _fmt_endpoint(x) -> str:
    x = float(x)
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    for q in range(2, 257):
        p = round(x * q)
        if abs(p / q - x) < 1e-15:
            return f"{p}/{q}"
    return repr(x)


class SubsetFamily:
    """A finite family of cell subsets of one partition element.

    Stored as a sparse indicator matrix over the element's cells, so that the
    masses of all subsets are one sparse product away.
    """

    def __init__(self, element: PartitionElement, indicator: sp.csr_matrix, label: str):
        self.element = element
        self.indicator = indicator.tocsr()
        self.label = label

    def __len__(self):
        return self.indicator.shape[0]

    @classmethod
    def canonical(cls, element: PartitionElement) -> "SubsetFamily":
        """All single cells plus every aligned dyadic block of adjacent cells."""
        m = len(element)
        rows, cols = [], []
        r = 0
        size = 1
        while size <= m:
            for start in range(0, m - size + 1, size):
                rows.extend([r] * size)
                cols.extend(range(start, start + size))
                r += 1
            size *= 2
        ind = sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(r, m))
        return cls(element, ind, "cells+dyadic")

    @classmethod
    def from_sets(cls, element: PartitionElement, sets: Iterable[Iterable[int]]) -> "SubsetFamily":
        """Family from explicit grid-cell index sets, each a subset of ``element``."""
        pos = {int(c): k for k, c in enumerate(element.cells)}
        rows, cols = [], []
        n = 0
        for r, s in enumerate(sets):
            n += 1
            s = {int(c) for c in s}
            if not s:
                raise InputError("distortion test sets must be nonempty")
            for c in sorted(s):
                if c not in pos:
                    raise InputError(f"cell {c} is not in element {element.name!r}")
                rows.append(r)
                cols.append(pos[c])
        if n == 0:
            raise InputError("distortion test family must be nonempty")
        ind = sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(n, len(element)))
        return cls(element, ind, "explicit")

    def masses(self, values) -> np.ndarray:
        """Subset masses for a full-grid mass vector (or a (k, cells) stack)."""
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            return self.indicator @ v[self.element.cells]
        return (self.indicator @ v[:, self.element.cells].T).T


def measure_of(mu: CellMeasure, S) -> float:
    """mu(S) for a set of cell indices ``S``."""
    idx = np.fromiter((int(i) for i in S), dtype=np.intp) if not isinstance(S, np.ndarray) else S
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= len(mu.grid)):
        raise InputError("cell index out of range")
    if idx.size == 0:
        return 0.0
    return float(mu.masses[np.unique(idx)].sum())


def _as_family(element, subsets):
    if subsets is None:
        return SubsetFamily.canonical(element)
    if isinstance(subsets, SubsetFamily):
        return subsets
    return SubsetFamily.from_sets(element, subsets)


def _distortion_from_masses(mu_A, mu_I, lam_A, lam_I):
    """Vectorized distortion over subsets; leading axes broadcast."""
    with np.errstate(divide="ignore", invalid="ignore"):
        up = (mu_A * lam_I) / (lam_A * mu_I)
        k = np.maximum(up, 1.0 / up)
    k = np.where(mu_A > 0, k, np.inf)
    return k.max(axis=-1)


def distortion_bound(mu: CellMeasure, lam: ReferenceMeasure, I, subsets=None) -> float:
    """Least K with ``(1/K) lam(A)/lam(I) <= mu(A)/mu(I) <= K lam(A)/lam(I)``.

    The supremum runs over ``subsets`` (default: the canonical family of
    single cells and aligned dyadic blocks). Returns ``inf`` when some test
    set has zero mu-mass.

    Parameters
    ----------
    mu : CellMeasure
    lam : ReferenceMeasure
    I : PartitionElement
    subsets : SubsetFamily or iterable of cell-index sets, optional

    Raises
    ------
    DegenerateMeasureError
        If ``mu(I) == 0``.
    """
    if not mu.grid.same_as(lam.grid):
        raise InputError("measure and reference measure live on different grids")
    fam = _as_family(I, subsets)
    mu_I = float(mu.masses[I.cells].sum())
    lam_I = float(lam.weights[I.cells].sum())
    if not mu_I > 0:
        raise DegenerateMeasureError(f"mu({I.name}) = 0")
    return float(_distortion_from_masses(fam.masses(mu.masses), mu_I, fam.masses(lam.weights), lam_I))


@dataclass
class PartitionReport:
    element_names: list
    element_masses: list
    positive: bool
    finite: bool
    disjoint: bool
    overlaps: list
    cover_defect: float
    cover_tol: float
    verdict: str

    def to_dict(self) -> dict:
        return {
            "element_names": self.element_names,
            "element_masses": self.element_masses,
            "positive": self.positive,
            "finite": self.finite,
            "disjoint": self.disjoint,
            "overlaps": self.overlaps,
            "cover_defect": self.cover_defect,
            "cover_tol": self.cover_tol,
            "verdict": self.verdict,
        }


def validate_partition(G: LambdaPartition, lam: ReferenceMeasure, cover_tol: float | None = None) -> PartitionReport:
    """Check lambda-partition properties 1-3 (sigma-compactness holds by construction).

    The cover defect is lambda of everything outside the union of the
    elements, including lambda-mass off the grid for truncated domains.
    ``cover_tol`` defaults to 1e-9 plus the off-grid mass.
    """
    masses = [float(lam.weights[e.cells].sum()) for e in G.elements]
    owner = {}
    overlaps = []
    for e in G.elements:
        for c in e.cells.tolist():
            if c in owner:
                overlaps.append([owner[c], e.name, c])
            else:
                owner[c] = e.name
    pairs = sorted({(a, b) for a, b, _ in overlaps})
    covered = np.zeros(len(G.grid), dtype=bool)
    covered[list(owner)] = True
    defect = float(lam.weights[~covered].sum()) + lam.outside_mass
    if cover_tol is None:
        cover_tol = 1e-9 + lam.outside_mass
    positive = all(m > 0 for m in masses)
    finite = all(math.isfinite(m) for m in masses)
    ok = positive and finite and not overlaps and defect <= cover_tol
    return PartitionReport(
        element_names=G.names,
        element_masses=masses,
        positive=positive,
        finite=finite,
        disjoint=not overlaps,
        overlaps=[list(p) for p in pairs],
        cover_defect=defect,
        cover_tol=float(cover_tol),
        verdict="PASS" if ok else "FAIL",
    )


def grid_from_spec(spec: dict) -> Grid:
    """Grid from ``{"breakpoints": [...]}`` or ``{"cells": [[a, b], ...]}``."""
    if "breakpoints" in spec:
        return Grid.from_breakpoints(spec["breakpoints"])
    if "cells" in spec:
        cells = np.asarray(spec["cells"], dtype=float)
        if cells.ndim != 2 or cells.shape[1] != 2:
            raise InputError("grid.cells must be a list of [left, right] pairs")
        return Grid(cells[:, 0], cells[:, 1])
    raise InputError("grid spec needs 'breakpoints' or 'cells'")


def partition_from_spec(grid: Grid, spec: dict) -> LambdaPartition:
    """Partition from ``{"breakpoints": [...]}`` or explicit element->cell lists."""
    i0 = spec.get("i0")
    if "breakpoints" in spec:
        return LambdaPartition.from_breakpoints(grid, spec["breakpoints"], i0=i0, names=spec.get("names"))
    if "elements" in spec:
        els = []
        for k, e in enumerate(spec["elements"]):
            if "cells" not in e:
                raise InputError(f"partition element {k} needs a 'cells' list")
            els.append(PartitionElement(str(e.get("name", f"I{k}")), e["cells"]))
        part = LambdaPartition(grid, tuple(els), 0)
        return part.with_i0(i0)
    raise InputError("partition spec needs 'breakpoints' or 'elements'")
