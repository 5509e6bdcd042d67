"""Finite-volume evolution of the crowd density with the FORCE flux."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .direction import DirectionResult, ProjectionParams, direction_field
from .eikonal import CostModel
from .fields import Kernel
from .geometry import Grid, VisionSpec

log = logging.getLogger(__name__)

BOUND_TOL = 1e-12


class MonotonicityError(RuntimeError):
    """Density left ``[0, rho_max]``; the time step violated the CFL bound."""

    def __init__(self, message: str, state: "MacroState | None" = None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class FluxLaw:
    """Speed and flux magnitude of the crowd.

    ``as_written``: speed ``f = rho (rho_max - rho)/rho_max``, flux ``rho f``.
    ``lwr``: speed ``1 - rho/rho_max``, flux ``rho (1 - rho/rho_max)``.
    """

    mode: str = "as_written"
    rho_max: float = 1.0

    def __post_init__(self):
        if self.mode not in ("as_written", "lwr"):
            raise ValueError(f"unknown flux law {self.mode!r}")

    def mobility(self, rho):
        rho = np.asarray(rho, float)
        if self.mode == "as_written":
            return rho * (self.rho_max - rho) / self.rho_max
        return 1.0 - rho / self.rho_max

    def flux(self, rho):
        return np.asarray(rho, float) * self.mobility(rho)

    @property
    def critical(self) -> float:
        """Density of maximal flux on ``[0, rho_max]``."""
        return (2.0 / 3.0 if self.mode == "as_written" else 0.5) * self.rho_max

    @property
    def max_slope(self) -> float:
        """``max |d flux / d rho|`` on ``[0, rho_max]``."""
        r = np.linspace(0.0, self.rho_max, 20001)
        if self.mode == "as_written":
            d = (2 * r * self.rho_max - 3 * r * r) / self.rho_max
        else:
            d = 1.0 - 2 * r / self.rho_max
        return float(np.abs(d).max())


def mobility(rho, law: FluxLaw = FluxLaw()):
    return law.mobility(rho)


def force_flux(rho_l, rho_r, theta, dt, h, flux: Callable = FluxLaw().flux):
    """FORCE numerical flux for ``g(rho) = flux(rho) * theta``.

    Average of the Lax-Friedrichs flux and the two-step Lax-Wendroff flux
    with time step ``dt`` and spacing ``h``.
    """
    rho_l = np.asarray(rho_l, float)
    rho_r = np.asarray(rho_r, float)
    g_l = theta * flux(rho_l)
    g_r = theta * flux(rho_r)
    f_lf = 0.5 * (g_l + g_r) - 0.5 * h / dt * (rho_r - rho_l)
    rho_star = 0.5 * (rho_l + rho_r) - 0.5 * dt / h * (g_r - g_l)
    f_lw = theta * flux(rho_star)
    return 0.5 * (f_lw + f_lf)


def cfl_dt(max_speed: float, h: float, safety: float, cap: float) -> float:
    """``safety * h / max_speed`` limited by ``cap`` (``cap`` itself if nothing moves)."""
    if not max_speed > 0:
        return cap
    return min(cap, safety * h / max_speed)


@dataclass
class MacroState:
    t: float
    rho: np.ndarray
    outflux: np.ndarray
    step: int = 0

    def mass(self, grid: Grid) -> float:
        return float(self.rho.sum() * grid.cell_volume)


def _face_normals(grid: Grid, d: np.ndarray) -> list[np.ndarray]:
    """Interior face values of the normal direction component (average of both cells)."""
    out = []
    for ax in range(grid.dim):
        c = d[..., ax]
        sl_a = [slice(None)] * grid.dim
        sl_b = [slice(None)] * grid.dim
        sl_a[ax] = slice(None, -1)
        sl_b[ax] = slice(1, None)
        th = 0.5 * (c[tuple(sl_a)] + c[tuple(sl_b)])
        if grid.blocked.any():
            th = np.where(grid.blocked[tuple(sl_a)] | grid.blocked[tuple(sl_b)], 0.0, th)
        out.append(th)
    return out


def step_macro(state: MacroState, grid: Grid, d: np.ndarray, dt: float, law: FluxLaw = FluxLaw(),
               check: bool = True, exit_flux: str = "upwind") -> MacroState:
    """One conservative FORCE update with walking direction ``d`` frozen over the step.

    Interior faces use the FORCE flux with the time step ``dim * dt`` in the
    flux formula (the unsplit update is a convex combination of 1D updates).
    Wall faces carry no flux; exit faces carry the upwind outflow
    ``flux(rho)`` in the outward direction.
    """
    rho = state.rho
    dim = grid.dim
    tau = dim * dt
    div = np.zeros_like(rho)
    outflux = state.outflux.copy()
    thetas = _face_normals(grid, d)
    for ax in range(dim):
        h = grid.spacing[ax]
        sl_a = [slice(None)] * dim
        sl_b = [slice(None)] * dim
        sl_a[ax] = slice(None, -1)
        sl_b[ax] = slice(1, None)
        F = force_flux(rho[tuple(sl_a)], rho[tuple(sl_b)], thetas[ax], tau, h, law.flux)
        div[tuple(sl_a)] += F / h
        div[tuple(sl_b)] -= F / h
    # exit faces
    face_len = grid.cell_volume / np.array(grid.spacing)
    g_out = law.flux(np.minimum(rho, law.critical)) if exit_flux == "demand" else law.flux(rho)
    if dim == 1:
        for side, idx in (("left", 0), ("right", -1)):
            k = int(grid.edge_labels[side][0])
            if k >= 0:
                div[idx] += g_out[idx] / grid.spacing[0]
                outflux[k] += dt * g_out[idx]
    else:
        for side, ax, idx in (("left", 0, 0), ("right", 0, -1), ("bottom", 1, 0), ("top", 1, -1)):
            labels = grid.edge_labels[side]
            h = grid.spacing[ax]
            sl = [slice(None)] * 2
            sl[ax] = idx
            cells = g_out[tuple(sl)]
            sub = div[tuple(sl)]
            for k in np.unique(labels[labels >= 0]):
                m = labels == k
                sub[m] += cells[m] / h
                outflux[k] += dt * face_len[ax] * cells[m].sum()
    new = rho - dt * div
    out = MacroState(state.t + dt, new, outflux, state.step + 1)
    if check:
        lo, hi = float(new.min()), float(new.max())
        if lo < -BOUND_TOL or hi > law.rho_max + BOUND_TOL:
            raise MonotonicityError(f"density left [0, rho_max]: min {lo:.3e}, max {hi:.6f} at t={out.t:.4f}", out)
    return out


@dataclass
class MacroSetup:
    """Everything :func:`run_macro` needs, already discretised."""

    grid: Grid
    rho0: np.ndarray
    cost: CostModel
    W: np.ndarray | float
    vision: VisionSpec
    kernel: Kernel
    proj: ProjectionParams = ProjectionParams()
    law: FluxLaw = FluxLaw()
    stride: int = 1
    reduction: str = "vsharp"
    solver: str = "fmm"
    dt_cap: float = 5e-3
    safety: float = 0.4
    t_max: float = 10.0
    threshold: float = 0.99
    refresh_every: int = 1
    snapshot_times: tuple = ()
    record_every: int = 0
    u_single: float = 1.0
    delta: float = 1e-7
    literal_signs: bool = False
    waiting_rho: float = 0.1
    exit_flux: str = "upwind"


@dataclass
class Snapshot:
    t: float
    step: int
    rho: np.ndarray
    d: np.ndarray
    u: np.ndarray
    pnorm: np.ndarray
    k_opt: np.ndarray

    def velocity(self, law: FluxLaw) -> np.ndarray:
        return law.mobility(self.rho)[..., None] * self.d


@dataclass
class MacroRun:
    setup: MacroSetup
    times: np.ndarray
    mass: np.ndarray
    outflux: np.ndarray            # (steps+1, M) cumulative
    rho_min: float
    rho_max: float
    conservation_error: float       # max relative |m0 - (m + outflux)|
    snapshots: list[Snapshot] = field(default_factory=list)
    final: MacroState | None = None
    wall_clock: float = 0.0
    max_waiting_streak: int = 0
    waiting_cells: int = 0
    zero_gradient: int = 0
    reduction_used: set = field(default_factory=set)
    terminated: str = ""

    @property
    def initial_mass(self) -> float:
        return float(self.mass[0])


def run_macro(setup: MacroSetup, on_snapshot: Callable[[Snapshot], None] | None = None) -> MacroRun:
    """Algorithm loop: potentials, direction, CFL step, until the crowd has left or ``t_max``."""
    grid = setup.grid
    law = setup.law
    t0 = time.perf_counter()
    M = grid.domain.n_exits
    state = MacroState(0.0, np.array(setup.rho0, float), np.zeros(M), 0)
    if np.any(state.rho < 0) or np.any(state.rho > law.rho_max):
        raise ValueError("initial density outside [0, rho_max]")
    m0 = state.mass(grid)
    times, masses, fluxes = [0.0], [m0], [state.outflux.copy()]
    rho_lo, rho_hi = float(state.rho.min()), float(state.rho.max())
    cons = 0.0
    streak = np.zeros(grid.shape, np.int64)
    best_streak = 0
    waiting_cells = np.zeros(grid.shape, bool)
    snaps: list[Snapshot] = []
    pending = sorted(setup.snapshot_times)
    zero = 0
    used = set()
    dirres: DirectionResult | None = None
    terminated = "t_max"

    def snap(dr: DirectionResult):
        s = Snapshot(state.t, state.step, state.rho.copy(), dr.d.copy(), dr.u.copy(), dr.pnorm.copy(),
                     dr.choice.k_opt.copy())
        snaps.append(s)
        if on_snapshot:
            on_snapshot(s)

    while True:
        mass = state.mass(grid)
        if m0 <= 0 or mass <= (1.0 - setup.threshold) * m0:
            terminated = "evacuated"
            break
        if state.t >= setup.t_max - 1e-12:
            break
        if dirres is None or state.step % max(1, setup.refresh_every) == 0:
            dirres = direction_field(grid, state.rho, setup.cost, setup.W, setup.vision, setup.kernel, setup.proj,
                                     setup.stride, setup.reduction, setup.solver, setup.u_single, setup.delta,
                                     setup.literal_signs)
            zero += dirres.zero_gradient
            used.add(dirres.mode)
        waiting = (dirres.pnorm < 1.0 - 1e-9) & (state.rho > setup.waiting_rho)
        streak = np.where(waiting, streak + 1, 0)
        best_streak = max(best_streak, int(streak.max()))
        waiting_cells |= streak >= 50
        if pending and state.t >= pending[0] - 1e-12:
            while pending and state.t >= pending[0] - 1e-12:
                pending.pop(0)
            snap(dirres)
        elif setup.record_every and state.step % setup.record_every == 0:
            snap(dirres)
        dmax = float(np.abs(dirres.d).max()) if dirres.d.size else 0.0
        dt = cfl_dt(grid.dim * law.max_slope * dmax, grid.h, setup.safety, setup.dt_cap)
        try:
            state = step_macro(state, grid, dirres.d, dt, law, exit_flux=setup.exit_flux)
        except MonotonicityError:
            log.error("monotonicity violation at step %d", state.step)
            raise
        rho_lo = min(rho_lo, float(state.rho.min()))
        rho_hi = max(rho_hi, float(state.rho.max()))
        mass = state.mass(grid)
        cons = max(cons, abs(m0 - mass - state.outflux.sum()) / max(m0, 1e-300))
        times.append(state.t)
        masses.append(mass)
        fluxes.append(state.outflux.copy())
    return MacroRun(setup, np.array(times), np.array(masses), np.array(fluxes), rho_lo, rho_hi, cons, snaps, state,
                    time.perf_counter() - t0, best_streak, int(waiting_cells.sum()), zero, used, terminated)
