"""Scenario runner, output writers and the vision sweep."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from ..fields import write_csv, write_vtk
from ..macro import MacroRun, Snapshot, run_macro
from ..micro import MicroRun, run_micro
from .metrics import NOT_REACHED, evacuation_time, outflux_shares
from .scenario import Scenario

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    name: str
    model: str
    evacuation_time: float
    times: np.ndarray
    remaining: np.ndarray          # macro: mass; micro: share of particles still inside
    outflux_shares: np.ndarray
    wall_clock: float
    stats: dict = field(default_factory=dict)
    run: Any = None

    @property
    def reached(self) -> bool:
        return math.isfinite(self.evacuation_time)

    def summary(self) -> str:
        ev = f"{self.evacuation_time:.6g}" if self.reached else "not reached"
        lines = [f"scenario: {self.name}", f"model: {self.model}", f"evacuation_time: {ev}",
                 "outflux_shares: " + ", ".join(f"{s:.6f}" for s in self.outflux_shares),
                 f"wall_clock_s: {self.wall_clock:.3f}"]
        lines += [f"{k}: {v}" for k, v in self.stats.items()]
        return "\n".join(lines) + "\n"


def _snapshot_writer(s: Scenario, grid, outdir: Path, law) -> Callable[[Snapshot], None]:
    def write(snap: Snapshot):
        tag = f"t{snap.t:010.5f}".replace(".", "p")
        v = snap.velocity(law)
        if grid.dim == 1:
            xs = grid.cell_axes()[0]
            data = np.column_stack([xs, snap.rho, v[:, 0], snap.d[:, 0], snap.pnorm])
            np.savetxt(outdir / f"snapshot_{tag}.csv", data, delimiter=",", header="x,rho,v,d,pnorm", comments="")
        else:
            write_csv(outdir / f"rho_{tag}.csv", grid, snap.rho, header=f"rho t={snap.t:.6g}")
            if s.output.vtk:
                write_vtk(outdir / f"fields_{tag}.vtk", grid,
                          cell_data={"rho": snap.rho, "pnorm": snap.pnorm, "k_opt": snap.k_opt.astype(float),
                                     "velocity": v, "conviction": snap.u},
                          title=f"{s.name} t={snap.t:.6g}")
    return write


def run_scenario(s: Scenario, outdir: str | Path | None = None) -> RunReport:
    """Run a macro or micro scenario and optionally write its outputs."""
    out = Path(outdir) if outdir is not None else (Path(s.output.outdir) if s.output.outdir else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.json").write_text(s.model_dump_json(indent=2))
    grid = s.build_grid()
    t0 = time.perf_counter()
    if s.model == "macro":
        setup = s.macro_setup(grid)
        writer = None
        if out is not None:
            writer = _snapshot_writer(s, grid, out, setup.law)
        run: MacroRun = run_macro(setup, writer)
        ev = evacuation_time(run.times, run.mass, s.time.threshold)
        rep = RunReport(s.name, "macro", ev, run.times, run.mass, outflux_shares(run.outflux[-1]),
                        time.perf_counter() - t0,
                        {"steps": len(run.times) - 1, "terminated": run.terminated,
                         "conservation_error": f"{run.conservation_error:.3e}",
                         "rho_range": f"[{run.rho_min:.3e}, {run.rho_max:.6f}]",
                         "max_waiting_streak": run.max_waiting_streak, "waiting_cells": run.waiting_cells,
                         "zero_gradient_cells": run.zero_gradient, "reduction": ",".join(sorted(run.reduction_used)),
                         "grid": "x".join(map(str, grid.shape)), "vision": s.vision}, run)
        if out is not None:
            with open(out / "mass_history.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "mass"] + [f"outflux_{k}" for k in range(run.outflux.shape[1])])
                for t, m, o in zip(run.times, run.mass, run.outflux):
                    w.writerow([repr(float(t)), repr(float(m))] + [repr(float(x)) for x in o])
    else:
        setup = s.micro_setup(grid)
        setup.record_every = max(1, int(round(0.1 / setup.dt)))
        run: MicroRun = run_micro(setup)
        remaining = 1.0 - run.exit_fraction
        ev = evacuation_time(run.times, remaining, s.time.threshold)
        counts = run.exit_counts[-1]
        rep = RunReport(s.name, "micro", ev, run.times, remaining, outflux_shares(counts), time.perf_counter() - t0,
                        {"steps": len(run.times) - 1, "absorbed": int(run.final.n_absorbed),
                         "turned": int(run.final.turned.sum()), "grid": "x".join(map(str, grid.shape)),
                         "vision": s.vision}, run)
        if out is not None:
            with open(out / "exit_percentage.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "exit_fraction"] + [f"exit_{k}" for k in range(run.exit_counts.shape[1])])
                for t, f, c in zip(run.times, run.exit_fraction, run.exit_counts):
                    w.writerow([repr(float(t)), repr(float(f))] + [int(x) for x in c])
            with open(out / "trajectories.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "id", "x", "y", "alive", "turned"])
                for sn in run.snapshots:
                    for j in range(sn.X.shape[0]):
                        y = sn.X[j, 1] if sn.X.shape[1] > 1 else 0.0
                        w.writerow([f"{sn.t:.6g}", j, f"{sn.X[j, 0]:.10g}", f"{y:.10g}", int(sn.alive[j]),
                                    int(sn.turned[j])])
    if out is not None:
        (out / "summary.txt").write_text(rep.summary())
    return rep


def with_param(s: Scenario, param: str, value: Any) -> Scenario:
    """Copy of ``s`` with a dotted parameter replaced (``L`` is an alias for ``vision``)."""
    path = "vision" if param in ("L", "vision") else param
    data = json.loads(s.model_dump_json())
    node = data
    keys = path.split(".")
    for k in keys[:-1]:
        node = node[k]
    if keys[-1] not in node:
        raise KeyError(f"unknown parameter {param!r}")
    node[keys[-1]] = value
    return Scenario.model_validate(data)


@dataclass
class SweepRow:
    value: Any
    evacuation_time: float
    status: str
    wall_clock: float = 0.0
    error: str = ""


def _one(args) -> SweepRow:
    s, param, value, outdir = args
    try:
        sub = None if outdir is None else Path(outdir) / f"{param}_{value}"
        rep = run_scenario(with_param(s, param, value), sub)
        return SweepRow(value, rep.evacuation_time, "ok" if rep.reached else "not_reached", rep.wall_clock)
    except Exception as e:  # a failing row must not abort the sweep
        log.exception("sweep row %s=%s failed", param, value)
        return SweepRow(value, NOT_REACHED, "failed", 0.0, repr(e))


def sweep(s: Scenario, param: str, values: Sequence[Any], outdir: str | Path | None = None,
          workers: int = 1) -> list[SweepRow]:
    """Independent runs over ``values`` of ``param``; rows keep the input order."""
    if not len(values):
        raise ValueError("sweep needs at least one value")
    jobs = [(s, param, v, outdir) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_one, jobs))
    else:
        rows = [_one(j) for j in jobs]
    if outdir is not None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        write_sweep_csv(Path(outdir) / "sweep.csv", param, rows)
        (Path(outdir) / "sweep_report.txt").write_text(sweep_report(param, rows))
    return rows


def vision_sweep(s: Scenario, Ls: Sequence[float], outdir=None, workers: int = 1) -> list[SweepRow]:
    return sweep(s, "L", list(Ls), outdir, workers)


def write_sweep_csv(path: Path, param: str, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "evacuation_time", "status", "wall_clock_s", "error"])
        for r in rows:
            w.writerow([r.value, r.evacuation_time, r.status, f"{r.wall_clock:.3f}", r.error])


def limited_vision_beats_global(rows: list[SweepRow]) -> tuple[bool, float | None]:
    """Whether some finite ``L`` evacuates strictly faster than ``L = inf``."""
    glob = [r for r in rows if not math.isfinite(float(r.value)) and r.status == "ok"]
    if not glob:
        return False, None
    ref = glob[0].evacuation_time
    finite = [r for r in rows if math.isfinite(float(r.value)) and r.status == "ok"]
    best = min(finite, key=lambda r: r.evacuation_time, default=None)
    if best is None or not best.evacuation_time < ref:
        return False, None
    return True, float(best.value)


def sweep_report(param: str, rows: list[SweepRow]) -> str:
    lines = [f"{param:>8}  {'evac_time':>12}  status"]
    for r in rows:
        lines.append(f"{str(r.value):>8}  {r.evacuation_time:12.6g}  {r.status}")
    if param in ("L", "vision"):
        beats, L = limited_vision_beats_global(rows)
        lines.append(f"finite L beats global vision: {'yes (L=' + str(L) + ')' if beats else 'no'}")
    return "\n".join(lines) + "\n"
