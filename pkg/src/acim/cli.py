"""Command-line front end: ``acim run`` and ``acim catalog``.

A run reads a JSON experiment config, builds (or loads) the transfer
matrix, and executes the pipeline

    validate partition -> irreducibility -> classify seed
    -> ratio-limit detection -> invariance residual

writing ``run.json``, ``trajectory.csv`` and ``density.csv`` into the
output directory. Scientific findings (FAIL verdicts, non-convergence,
skipped stages) exit 0; only malformed input exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import build_transfer_matrix, load_transfer_matrix, save_transfer_matrix
from .errors import AcimError, ConfigError, EscapeOverflowError, InputError, NormalizationError
from .hypotheses import K_CAP, check_irreducibility, check_uniform, classify
from .maps import CATALOG, instantiate
from .measure import (
    CellMeasure,
    Grid,
    LambdaPartition,
    ReferenceMeasure,
    grid_from_spec,
    partition_from_spec,
    validate_partition,
)
from .ratio_limit import invariance_residual, omega_limit

__all__ = ["ExperimentConfig", "run", "export_density", "dumps", "main"]

log = logging.getLogger("acim")

EXIT_OK = 0
EXIT_INPUT = 2

DENSITY_HEADER = ["cell_left", "cell_right", "lambda_mass", "nu_mass", "density"]


# ---------------------------------------------------------------------------
# deterministic serialization


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _emit(obj, indent, level, out):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.append(f"{pad}{json.dumps(k)}: ")
            _emit(v, indent, level + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, list):
        if not obj:
            out.append("[]")
        elif all(not isinstance(v, (dict, list)) for v in obj):
            out.append("[" + ", ".join(_scalar(v) for v in obj) + "]")
        else:
            out.append("[\n")
            for i, v in enumerate(obj):
                out.append(pad)
                _emit(v, indent, level + 1, out)
                out.append(",\n" if i < len(obj) - 1 else "\n")
            out.append(end + "]")
    else:
        out.append(_scalar(obj))


def _scalar(v) -> str:
    if isinstance(v, float):
        # non-finite values become strings so the file stays valid JSON
        return _fmt(v) if math.isfinite(v) else json.dumps(_fmt(v))
    return json.dumps(v)


def dumps(obj, indent: int = 2) -> str:
    """JSON text with every float at 17 significant digits and ``inf`` as a string."""
    out: list[str] = []
    _emit(_plain(obj), indent, 0, out)
    return "".join(out) + "\n"


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    """Validated experiment description.

    ``horizon``, ``tol`` and ``irreducibility_n_max`` default per map:
    horizon and n_max come from the catalog entry, ``tol`` is 1e-8 on
    compact domains and 1e-4 when the reference measure is truncated.
    """

    map: str
    map_params: dict = field(default_factory=dict)
    grid: dict | None = None
    partition: dict | None = None
    seed: object = "reference"
    i0: object = None
    horizon: int | None = None
    tol: float | None = None
    window: int = 10
    k_cap: float = K_CAP
    eps_pos: float | None = None
    irreducibility_n_max: int | None = None
    max_escape_fraction: float = 0.01
    grid_cells: int | None = None
    transfer_matrix: str | None = None
    out: str | None = None

    KEYS = ("map", "map_params", "grid", "partition", "seed", "i0", "horizon", "tol", "window",
            "k_cap", "eps_pos", "irreducibility_n_max", "max_escape_fraction", "grid_cells",
            "transfer_matrix", "out")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = sorted(set(d) - set(cls.KEYS))
        if unknown:
            raise ConfigError(unknown[0], "unknown config key")
        if "map" not in d:
            raise ConfigError("map", "required")
        cfg = cls(**d)
        if base_dir is not None:
            for key in ("transfer_matrix", "out"):
                v = getattr(cfg, key)
                if v is not None and not Path(v).is_absolute():
                    setattr(cfg, key, str(base_dir / v))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if not isinstance(self.map, str) or self.map not in CATALOG:
            raise ConfigError("map", f"unknown map {self.map!r}; known: {', '.join(CATALOG)}")
        if not isinstance(self.map_params, dict):
            raise ConfigError("map_params", "must be an object")
        for key in ("horizon", "window", "irreducibility_n_max", "grid_cells"):
            v = getattr(self, key)
            if v is None:
                continue
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(key, f"must be a positive integer, got {v!r}")
        if self.window < 2:
            raise ConfigError("window", "must be at least 2")
        for key in ("tol", "k_cap", "eps_pos", "max_escape_fraction"):
            v = getattr(self, key)
            if v is None:
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not (v > 0 and math.isfinite(v)):
                raise ConfigError(key, f"must be a positive finite number, got {v!r}")
        if self.k_cap < 1:
            raise ConfigError("k_cap", "must be at least 1")
        if self.horizon is not None and self.horizon < self.window:
            raise ConfigError("horizon", f"must be >= window ({self.window})")
        if self.grid is not None and not isinstance(self.grid, dict):
            raise ConfigError("grid", "must be an object")
        if self.partition is not None and not isinstance(self.partition, dict):
            raise ConfigError("partition", "must be an object")
        if not (self.seed == "reference" or (isinstance(self.seed, dict) and "density" in self.seed)):
            raise ConfigError("seed", "must be \"reference\" or {\"density\": [...]}")


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if isinstance(d, dict):
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(d, base_dir=path.parent)


# ---------------------------------------------------------------------------
# system assembly


def _rebuild_partition(default: LambdaPartition, grid: Grid) -> LambdaPartition:
    # carry the catalog's element intervals over to an overridden grid
    els = default.elements
    bounds = [default.grid.left[e.cells[0]] for e in els] + [default.grid.right[els[-1].cells[-1]]]
    names = [e.name for e in els]
    return LambdaPartition.from_breakpoints(grid, bounds, i0=default.i0, names=names)


def _build_seed(spec, lam: ReferenceMeasure) -> CellMeasure:
    if spec == "reference":
        return lam.as_measure()
    dens = np.asarray(spec["density"], dtype=float)
    grid = lam.grid
    if "breakpoints" in spec:
        b = np.asarray(spec["breakpoints"], dtype=float)
        if b.ndim != 1 or len(b) != len(dens) + 1:
            raise ConfigError("seed", "needs one more breakpoint than density values")
        mid = 0.5 * (grid.left + grid.right)
        k = np.searchsorted(b, mid, side="right") - 1
        inside = (k >= 0) & (k < len(dens))
        per_cell = np.where(inside, dens[np.clip(k, 0, len(dens) - 1)], 0.0)
    else:
        if dens.shape != (len(grid),):
            raise ConfigError("seed", f"density list has {dens.size} values; the grid has {len(grid)} cells")
        per_cell = dens
    if np.any(per_cell < 0) or not np.all(np.isfinite(per_cell)):
        raise ConfigError("seed", "density values must be finite and non-negative")
    if not per_cell.any():
        raise ConfigError("seed", "seed measure is zero")
    return CellMeasure(per_cell * lam.weights, grid)


@dataclass
class System:
    name: str
    fmap: object
    grid: Grid
    partition: LambdaPartition
    reference: ReferenceMeasure
    cover_tol: float
    irreducibility_n_max: int
    horizon: int
    tol: float


def assemble(cfg: ExperimentConfig) -> System:
    inst = instantiate(cfg.map, cfg.map_params, cfg.grid_cells)
    grid, G, lam = inst.grid, inst.partition, inst.reference
    cover_tol = inst.cover_tol
    if cfg.grid is not None:
        try:
            grid = grid_from_spec(cfg.grid)
        except InputError as exc:
            raise ConfigError("grid", str(exc)) from None
        lam = ReferenceMeasure(grid, inst.reference.kind)
        cover_tol = None
        if cfg.partition is None:
            try:
                G = _rebuild_partition(inst.partition, grid)
            except InputError as exc:
                raise ConfigError("grid", f"does not resolve the default partition: {exc}") from None
    if cfg.partition is not None:
        try:
            G = partition_from_spec(grid, cfg.partition)
        except (InputError, IndexError, KeyError, TypeError) as exc:
            raise ConfigError("partition", str(exc)) from None
        cover_tol = None
    if cfg.i0 is not None:
        try:
            G = G.with_i0(cfg.i0)
        except (InputError, IndexError, KeyError) as exc:
            raise ConfigError("i0", str(exc)) from None
    horizon = cfg.horizon or inst.horizon
    if horizon < cfg.window:
        raise ConfigError("horizon", f"must be >= window ({cfg.window})")
    tol = cfg.tol if cfg.tol is not None else (1e-8 if lam.outside_mass == 0 else 1e-4)
    return System(cfg.map, inst.fmap, grid, G, lam, cover_tol,
                  cfg.irreducibility_n_max or inst.irreducibility_n_max, horizon, tol)


def _transfer_matrix(cfg: ExperimentConfig, sysm: System):
    path = cfg.transfer_matrix
    if path is not None and Path(path).exists():
        log.info("loading transfer matrix %s", path)
        try:
            return load_transfer_matrix(path, sysm.grid)
        except InputError as exc:
            raise ConfigError("transfer_matrix", str(exc)) from None
    T = build_transfer_matrix(sysm.fmap, sysm.grid, sysm.reference)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_transfer_matrix(T, path)
        log.info("saved transfer matrix %s", path)
    return T


# ---------------------------------------------------------------------------
# outputs


def export_density(nu: CellMeasure | None, path, reference: ReferenceMeasure | None = None) -> None:
    """CSV with one row per cell: ``cell_left, cell_right, lambda_mass, nu_mass, density``.

    ``density`` is ``nu_mass / lambda_mass``. ``reference`` defaults to
    normalized Lebesgue measure on the grid. An empty measure (no cells, or
    ``None``) yields a header-only file.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DENSITY_HEADER)
        if nu is None or len(nu.grid) == 0:
            return
        lam = reference if reference is not None else ReferenceMeasure.uniform(nu.grid)
        if not lam.grid.same_as(nu.grid):
            raise InputError("measure and reference measure live on different grids")
        dens = nu.density(lam)
        for a, b, lm, m, d in zip(nu.grid.left, nu.grid.right, lam.weights, nu.masses, dens):
            w.writerow([_fmt(a), _fmt(b), _fmt(lm), _fmt(m), _fmt(d)])


def _write_trajectory(path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + [f"S_n[{name}]" for name in report.element_names] + ["cauchy_gap", "residual"])
        sums = report.per_element_sums
        for k in range(len(sums)):
            w.writerow([k + 1] + [_fmt(v) for v in sums[k]] + [_fmt(report.gaps[k]), _fmt(report.residuals[k])])


def _write_empty_trajectory(path, names) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(["n"] + [f"S_n[{name}]" for name in names] + ["cauchy_gap", "residual"])


# ---------------------------------------------------------------------------
# pipeline


def run(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Execute the pipeline for one config and write its artifacts.

    Returns the ``run.json`` content. Raises :class:`~acim.errors.InputError`
    (including :class:`~acim.errors.ConfigError`) on malformed input only.
    """
    out = Path(out_dir or cfg.out or Path("acim_out") / cfg.map)
    sysm = assemble(cfg)
    T = _transfer_matrix(cfg, sysm)
    G, lam = sysm.partition, sysm.reference
    seed = _build_seed(cfg.seed, lam)

    part = validate_partition(G, lam, sysm.cover_tol)
    irr = check_irreducibility(T, G, lam, n_max=sysm.irreducibility_n_max, eps_pos=cfg.eps_pos)
    hyp = classify(T, seed, lam, G, horizon=sysm.horizon, k_cap=cfg.k_cap, irreducible=irr.verdict)
    uni = check_uniform(T, seed, lam, G, horizon=sysm.horizon, k_cap=cfg.k_cap)
    if hyp.in_M_s and hyp.m4.verdict != "DIVERGENT":
        log.warning("partial sums on I0=%s look bounded within horizon %d; consider another I0",
                    G.I0.name, sysm.horizon)

    omega = {"status": "skipped", "reason": None}
    residual = None
    report = None
    nu = None
    if not irr.verdict:
        omega["reason"] = f"partition not irreducible within n_max={irr.n_max}: {len(irr.absent_pairs())} ABSENT pairs"
    elif part.verdict != "PASS":
        omega["reason"] = "partition failed validation"
    else:
        try:
            report = omega_limit(T, seed, G, tol=sysm.tol, n_max=sysm.horizon, window=cfg.window,
                                 max_escape_fraction=cfg.max_escape_fraction)
        except (EscapeOverflowError, NormalizationError) as exc:
            omega["reason"] = f"{type(exc).__name__}: {exc}"
        else:
            omega = {"status": "converged" if report.converged else "not converged", **report.to_dict()}
            nu = report.limit if report.converged else report.last
            residual = invariance_residual(T, nu, G).to_dict()
            residual["measure"] = "limit" if report.converged else "last iterate"

    result = {
        "config": cfg.to_dict(),
        "map": sysm.name,
        "grid": {"cells": len(sysm.grid), "lo": sysm.grid.lo, "hi": sysm.grid.hi},
        "reference": lam.to_dict(),
        "transfer_matrix": {"nnz": int(T.P.nnz), "max_row_defect": float(np.max(np.abs(T.row_defect())))},
        "horizon": sysm.horizon,
        "tol": sysm.tol,
        "partition": part.to_dict(),
        "irreducibility": irr.to_dict(),
        "hypotheses": hyp.to_dict(),
        "uniform": uni.to_dict(),
        "omega_limit": omega,
        "residual": residual,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(dumps(result))
    if report is not None:
        _write_trajectory(out / "trajectory.csv", report)
    else:
        _write_empty_trajectory(out / "trajectory.csv", G.names)
    export_density(nu, out / "density.csv", lam)
    return result


def _summary(name: str, res: dict) -> str:
    hyp = res["hypotheses"]
    om = res["omega_limit"]
    rows = [
        ("partition", res["partition"]["verdict"]),
        ("irreducible", "PASS" if res["irreducibility"]["verdict"] else "FAIL"),
        ("m1", hyp["m1"]["verdict"]),
        ("m2", "PASS" if all(r["verdict"] == "PASS" for r in hyp["m2"]) else "FAIL"),
        ("m3", "BOUNDED" if all(r["verdict"] == "BOUNDED" for r in hyp["m3"]) else "SUSPECT-UNBOUNDED"),
        ("m4", hyp["m4"]["verdict"]),
        ("membership", f"{hyp['membership']} ({hyp['caveat']})"),
        ("omega_limit", om["status"] + (f" ({om['reason']})" if om.get("reason") else "")),
    ]
    if res["residual"] is not None:
        rows.append(("residual", _fmt(res["residual"]["max"])))
    width = max(len(k) for k, _ in rows)
    return "\n".join([f"== {name}"] + [f"  {k:<{width}}  {v}" for k, v in rows])


def _run_one(path, overrides, out_dir):
    cfg = load_config(path, overrides)
    res = run(cfg, out_dir)
    return _summary(str(path), res)


def _configure_logging():
    level = os.environ.get("ACIM_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acim", description="Ratio-limit construction of invariant measures.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run experiment config(s)")
    r.add_argument("configs", nargs="+", metavar="config.json")
    r.add_argument("--out", help="output directory (one subdirectory per config when several are given)")
    r.add_argument("--horizon", type=int, help="override the hypothesis/limit horizon")
    r.add_argument("--grid-cells", type=int, help="override the map's grid resolution parameter")
    r.add_argument("--batch", action="store_true", help="run configs concurrently")
    sub.add_parser("catalog", help="list catalog maps")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _configure_logging()
    if args.command == "catalog":
        for e in CATALOG.values():
            defaults = ", ".join(f"{k}={v}" for k, v in e.defaults.items())
            print(f"{e.name:<18} {e.description}\n{'':<18} defaults: {defaults}\n{'':<18} truth: {e.truth}")
        return EXIT_OK

    overrides = {"horizon": args.horizon, "grid_cells": args.grid_cells}
    paths = [Path(c) for c in args.configs]

    def out_for(p):
        if args.out is None:
            return None
        return Path(args.out) / p.stem if len(paths) > 1 else Path(args.out)

    status = EXIT_OK
    if args.batch and len(paths) > 1:
        with ProcessPoolExecutor() as ex:
            futs = [(p, ex.submit(_run_one, p, overrides, out_for(p))) for p in paths]
            for p, fut in futs:
                try:
                    print(fut.result())
                except AcimError as exc:
                    print(f"acim: {p}: {exc}", file=sys.stderr)
                    status = EXIT_INPUT
    else:
        for p in paths:
            try:
                print(_run_one(p, overrides, out_for(p)))
            except AcimError as exc:
                print(f"acim: {p}: {exc}", file=sys.stderr)
                status = EXIT_INPUT
    return status


if __name__ == "__main__":
    sys.exit(main())
