"""Catalog of example maps with known invariant measures.

Each entry builds a map, a grid (Markov where possible), a default
lambda-partition and the reference measure. ``truth`` records what is known
analytically about the invariant measure; acceptance tests use it as oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import BranchMap, make_branch
from .errors import InputError
from .measure import Grid, LambdaPartition, PartitionElement, ReferenceMeasure, _cauchy_mass

__all__ = ["MapCatalogEntry", "Instance", "CATALOG", "instantiate", "catalog_names",
           "gauss_density", "quadratic_density", "markov_map"]


def gauss_density(x):
    """Invariant density of the Gauss map, ``1 / ((1 + x) ln 2)``."""
    return 1.0 / ((1.0 + np.asarray(x, dtype=float)) * np.log(2.0))


def quadratic_density(x):
    """Invariant density of ``4x(1-x)``, ``1 / (pi sqrt(x (1-x)))``."""
    x = np.asarray(x, dtype=float)
    return 1.0 / (np.pi * np.sqrt(x * (1.0 - x)))


@dataclass
class Instance:
    """A ready-to-run system. Unpacks as ``(map, grid, partition, reference)``."""

    name: str
    params: dict
    fmap: BranchMap
    grid: Grid
    partition: LambdaPartition
    reference: ReferenceMeasure
    cover_tol: float
    truth: str
    ergodic: bool
    irreducibility_n_max: int = 100
    horizon: int = 200

    def __iter__(self):
        return iter((self.fmap, self.grid, self.partition, self.reference))


@dataclass(frozen=True)
class MapCatalogEntry:
    name: str
    description: str
    defaults: dict
    truth: str
    ergodic: bool
    build: Callable = field(repr=False)
    grid_param: str = "cells"
    i0: str | None = None
    irreducibility_n_max: int = 100
    horizon: int = 200

    def schema(self) -> dict:
        return {k: type(v).__name__ for k, v in self.defaults.items()}


def _check_int(p, key, lo):
    v = p[key]
    if isinstance(v, bool) or int(v) != v or v < lo:
        raise InputError(f"{key} must be an integer >= {lo}, got {v!r}")
    p[key] = int(v)


def _dyadic_partition(grid, k=2, i0=None):
    return LambdaPartition.from_breakpoints(grid, np.arange(k + 1) / k, i0=i0)


def _affine_pieces(slopes_offsets):
    return tuple(make_branch("affine", dom, slope=a, offset=b) for dom, a, b in slopes_offsets)


def _doubling(p):
    _check_int(p, "cells", 2)
    fmap = BranchMap("doubling", _affine_pieces([((0, 0.5), 2.0, 0.0), ((0.5, 1), 2.0, -1.0)]), dict(p))
    grid = Grid.uniform(0.0, 1.0, p["cells"])
    return fmap, grid, _dyadic_partition(grid), ReferenceMeasure.uniform(grid), 1e-9


def _tent(p):
    _check_int(p, "cells", 2)
    fmap = BranchMap("tent", _affine_pieces([((0, 0.5), 2.0, 0.0), ((0.5, 1), -2.0, 2.0)]), dict(p))
    grid = Grid.uniform(0.0, 1.0, p["cells"])
    return fmap, grid, _dyadic_partition(grid), ReferenceMeasure.uniform(grid), 1e-9


def _gauss(p):
    # cylinder endpoints 1/k (k <= tail) merged with the uniform 1/cells lattice;
    # everything left of 1/tail is one cell carrying the lumped tail branches
    _check_int(p, "cells", 8)
    _check_int(p, "tail", 9)
    K, N = p["tail"], p["cells"]
    cyl = 1.0 / np.arange(K, 0, -1, dtype=float)
    lattice = np.arange(N + 1) / N
    edges = np.unique(np.concatenate([[0.0], cyl, lattice[lattice > 1.0 / K]]))
    grid = Grid.from_breakpoints(edges)
    branches = [make_branch("gauss", (1.0 / (k + 1), 1.0 / k), k=k) for k in range(1, K)]
    branches.append(make_branch("gauss_tail", (0.0, 1.0 / K), first=K))
    fmap = BranchMap("gauss", tuple(branches), dict(p))
    m = p["elements"]
    part_edges = np.concatenate([[0.0], 1.0 / np.arange(m + 1, 0, -1, dtype=float)])
    partition = LambdaPartition.from_breakpoints(grid, part_edges)
    return fmap, grid, partition, ReferenceMeasure.uniform(grid), 1e-9


def _boole(p):
    _check_int(p, "N", 4)
    _check_int(p, "sub", 1)
    _check_int(p, "extent", p["N"])
    N, sub, L = p["N"], p["sub"], p["extent"]
    # fine cells on the partition range, unit cells out to the truncation edge
    inner = np.arange(-N * sub, N * sub + 1) / sub
    outer = np.arange(N + 1, L + 1, dtype=float)
    edges = np.unique(np.concatenate([-outer, inner, outer]))
    grid = Grid.from_breakpoints(edges)
    fmap = BranchMap("boole", (make_branch("boole", (-np.inf, 0.0)), make_branch("boole", (0.0, np.inf))), dict(p))
    partition = LambdaPartition.from_breakpoints(grid, np.arange(-N, N + 1, dtype=float))
    lam = ReferenceMeasure.cauchy(grid)
    tail = 2.0 * _cauchy_mass(float(N), np.inf)
    return fmap, grid, partition, lam, tail + 1e-12


def _pm_breakpoints(depth, sub):
    edges = [0.0]
    for k in range(depth - 1, -1, -1):
        a, b = 2.0 ** (-k - 1), 2.0 ** (-k)
        edges.extend(a + (b - a) * np.arange(sub) / sub)
    edges.append(1.0)
    return np.unique(edges)


def _pomeau_manneville(p):
    s = float(p["s"])
    if not s > 0:
        raise InputError(f"s must be positive, got {s!r}")
    p["s"] = s
    _check_int(p, "depth", 4)
    _check_int(p, "sub", 1)
    _check_int(p, "elements", 2)
    if p["elements"] > p["depth"]:
        raise InputError("elements must not exceed depth")
    # c + c^(1+s) = 1 splits the two branches of x + x^(1+s) mod 1
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if mid + mid ** (1 + s) < 1 else (lo, mid)
    c = 0.5 * (lo + hi)
    fmap = BranchMap("pomeau_manneville", (
        make_branch("pm", (0.0, c), s=s, shift=0.0),
        make_branch("pm", (c, 1.0), s=s, shift=1.0),
    ), dict(p))
    grid = Grid.from_breakpoints(_pm_breakpoints(p["depth"], p["sub"]))
    m = p["elements"]
    part_edges = np.concatenate([[0.0], 2.0 ** -np.arange(m - 1, -1, -1, dtype=float)])
    partition = LambdaPartition.from_breakpoints(grid, part_edges)
    return fmap, grid, partition, ReferenceMeasure.uniform(grid), 1e-9


def _quadratic(p):
    _check_int(p, "cells", 16)
    _check_int(p, "depth", 0)
    _check_int(p, "elements", 2)
    N, depth, m = p["cells"], p["depth"], p["elements"]
    delta = float(p["exclude_right"])
    if not 0.0 <= delta < 1.0:
        raise InputError("exclude_right must lie in [0, 1)")
    p["exclude_right"] = delta
    # uniform lattice, with the last cell split geometrically towards x = 1
    # where the invariant density blows up
    lattice = np.arange(N + 1) / N
    k0 = int(round(np.log2(N)))
    geo = 1.0 - 2.0 ** -np.arange(k0, k0 + depth + 1, dtype=float)
    edges = np.unique(np.concatenate([lattice, geo]))
    grid = Grid.from_breakpoints(edges)
    fmap = BranchMap("quadratic", (
        make_branch("quadratic", (0.0, 0.5), r=4.0),
        make_branch("quadratic", (0.5, 1.0), r=4.0),
    ), dict(p))
    top = 1.0 - delta
    part_edges = np.arange(m + 1) / m
    part_edges = part_edges[part_edges <= top + 1e-15]
    if part_edges[-1] < top - 1e-15:
        part_edges = np.append(part_edges, top)
    partition = LambdaPartition.from_breakpoints(grid, part_edges)
    return fmap, grid, partition, ReferenceMeasure.uniform(grid), 1e-9 + delta


def _reducible_pair(p):
    _check_int(p, "cells", 2)
    fmap = BranchMap("reducible_pair", (
        make_branch("power", (0.0, 0.5), p=2.0),
        make_branch("power", (0.5, 1.0), p=2.0),
    ), dict(p))
    grid = Grid.uniform(0.0, 1.0, p["cells"])
    return fmap, grid, _dyadic_partition(grid), ReferenceMeasure.uniform(grid), 1e-9


CATALOG = {
    e.name: e
    for e in [
        MapCatalogEntry("doubling", "x -> 2x mod 1 on a dyadic grid", {"cells": 1024},
                        "invariant density 1 (Lebesgue)", True, _doubling),
        MapCatalogEntry("tent", "full tent map on a dyadic grid", {"cells": 1024},
                        "invariant density 1 (Lebesgue)", True, _tent),
        MapCatalogEntry("gauss", "x -> 1/x mod 1; cylinder-aligned grid",
                        {"cells": 1024, "tail": 64, "elements": 8},
                        "invariant density 1/((1+x) ln 2)", True, _gauss),
        MapCatalogEntry("boole", "x -> x - 1/x on the real line, truncated",
                        {"N": 32, "sub": 4, "extent": 4096},
                        "infinite acim: Lebesgue measure", True, _boole, "sub", "[0,1)",
                        irreducibility_n_max=500, horizon=500),
        MapCatalogEntry("pomeau_manneville", "x -> x + x^(1+s) mod 1; grid geometric towards 0",
                        {"s": 1.0, "depth": 40, "sub": 16, "elements": 8},
                        "infinite acim for s >= 1, density ~ x^(-s) near 0", True, _pomeau_manneville,
                        "sub", horizon=500),
        MapCatalogEntry("quadratic", "x -> 4x(1-x); grid geometric towards 1",
                        {"cells": 1024, "depth": 30, "elements": 16, "exclude_right": 0.0},
                        "invariant density 1/(pi sqrt(x(1-x))), unbounded at 0 and 1", True, _quadratic),
        MapCatalogEntry("reducible_pair", "x -> x^2 rescaled on each half; halves invariant",
                        {"cells": 1024},
                        "reducible: [0,1/2) and [1/2,1) are invariant", False, _reducible_pair),
    ]
}


def catalog_names() -> list[str]:
    return list(CATALOG)


def instantiate(name: str, params: dict | None = None, grid_cells: int | None = None) -> Instance:
    """Build a catalog system.

    Parameters
    ----------
    name : str
        One of :func:`catalog_names`.
    params : dict, optional
        Overrides of the entry's defaults. Unknown keys are rejected.
    grid_cells : int, optional
        Shortcut for the entry's resolution parameter.
    """
    if name not in CATALOG:
        raise InputError(f"unknown map {name!r}; known: {', '.join(CATALOG)}")
    entry = CATALOG[name]
    p = dict(entry.defaults)
    for k, v in (params or {}).items():
        if k not in p:
            raise InputError(f"map {name!r} has no parameter {k!r}")
        p[k] = v
    if grid_cells is not None:
        p[entry.grid_param] = grid_cells
    fmap, grid, partition, lam, cover_tol = entry.build(p)
    # I0 defaults to the element of largest lambda-mass unless the entry pins one
    partition = partition.with_i0(entry.i0, lam) if entry.i0 else partition.with_i0(None, lam)
    return Instance(name, p, fmap, grid, partition, lam, cover_tol, entry.truth, entry.ergodic,
                    entry.irreducibility_n_max, entry.horizon)


def markov_map(P, name: str = "markov") -> Instance:
    """Piecewise-affine Markov map whose Ulam matrix on ``n`` equal cells is ``P``.

    Cell ``i`` is cut into consecutive pieces of relative length ``P[i, j]``
    and piece ``j`` is mapped affinely (increasing) onto cell ``j``. Each
    cell is its own partition element; I0 is the first cell.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if P.ndim != 2 or P.shape != (n, n) or n < 1:
        raise InputError("P must be a square matrix")
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12):
        raise InputError("P must be row-stochastic")
    grid = Grid.uniform(0.0, 1.0, n)
    edges = np.append(grid.left, grid.right[-1])
    branches = []
    for i in range(n):
        cuts = edges[i] + np.concatenate([[0.0], np.cumsum(P[i])]) / n
        # rounding in the cumulative sum must not push a cut past the cell edge
        cuts = np.clip(cuts, edges[i], edges[i + 1])
        cuts[-1] = edges[i + 1]
        for j in range(n):
            a, b = cuts[j], cuts[j + 1]
            if b > a:
                slope = (edges[j + 1] - edges[j]) / (b - a)
                branches.append(make_branch("affine", (a, b), slope=slope, offset=edges[j] - slope * a))
    fmap = BranchMap(name, tuple(branches), {"P": P.tolist()})
    partition = LambdaPartition.from_breakpoints(grid, edges, i0=0)
    lam = ReferenceMeasure.uniform(grid)
    return Instance(name, {"P": P.tolist()}, fmap, grid, partition, lam, 1e-9,
                    "stationary vector of P", True)
