"""Quick self-checks of the numerical kernels against independent references."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..eikonal import CostModel, EikonalProblem, dijkstra_oracle, fmm_solve, fsm_solve
from ..geometry import Domain, build_grid
from ..macro import FluxLaw, force_flux


def _check_fsm_fmm() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    g = build_grid(Domain.rectangle((0, 1), (0, 1), [((0, 0), (0, 1))]), (31, 31))
    worst = 0.0
    for _ in range(5):
        cost = 1.0 + rng.random(g.vshape)
        p = EikonalProblem(g, cost, g.exit_vertices(0))
        a = fsm_solve(p, tol=1e-12, max_sweeps=200).phi
        b = fmm_solve(p).phi
        worst = max(worst, float(np.abs(a - b).max()))
    return worst <= 1e-6, f"max |fsm - fmm| = {worst:.2e}"


def _check_distance() -> tuple[bool, str]:
    g = build_grid(Domain.rectangle((0, 1), (0, 1), [((0, 0), (0, 1))]), (64, 64))
    p = EikonalProblem(g, np.ones(g.vshape), g.exit_vertices(0))
    err = float(np.abs(fmm_solve(p).phi - g.vertex_coords()[..., 0]).max())
    return err <= 1e-12, f"straight-exit distance error {err:.2e}"


def _check_dijkstra() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    g = build_grid(Domain.rectangle((0, 1), (0, 1), [((0, 0), (0, 1))]), (32, 32))
    cost = 1.0 + rng.random(g.vshape)
    p = EikonalProblem(g, cost, g.exit_vertices(0))
    a = fmm_solve(p).phi
    b = dijkstra_oracle(p).phi
    rel = float(np.abs(a - b).max() / b.max())
    return rel <= 0.1, f"relative gap to graph shortest path {rel:.3f}"


def _check_force() -> tuple[bool, str]:
    law = FluxLaw("lwr")
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        rl, rr = rng.random(2)
        th = rng.uniform(-1, 1)
        lam = rng.uniform(0.05, 1.0)
        g = lambda r: th * r * (1 - r)
        lf = 0.5 * (g(rl) + g(rr)) - (rr - rl) / (2 * lam)
        star = 0.5 * (rl + rr) - lam / 2 * (g(rr) - g(rl))
        ref = 0.5 * (lf + g(star))
        worst = max(worst, abs(float(force_flux(rl, rr, th, lam, 1.0, law.flux)) - ref))
    return worst <= 1e-14, f"max FORCE deviation {worst:.1e}"


def _check_cost() -> tuple[bool, str]:
    cm = CostModel()
    ok = math.isclose(float(cm.cost(0.5)), 2.0) and float(cm.cost(1.0)) == cm.c_max
    return ok, "c(0.5) = 2 and c(rho_max) = c_max"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "eikonal fsm vs fmm": _check_fsm_fmm,
    "eikonal straight exit": _check_distance,
    "eikonal vs graph shortest path": _check_dijkstra,
    "FORCE flux formula": _check_force,
    "cost law": _check_cost,
}


def run_checks(echo: Callable[[str], None] = print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # report and continue
            ok, detail = False, repr(e)
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
