"""Particle version of the localized model: kernel density, consensus velocity, Euler steps."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .direction import ProjectionParams, apply_boundary, direction_field
from .eikonal import CostModel
from .fields import Kernel
from .geometry import Grid, VisionSpec
from .macro import FluxLaw


@dataclass
class ParticleEnsemble:
    """Particle positions with absorption and turnaround bookkeeping."""

    X: np.ndarray                 # (N, dim)
    alive: np.ndarray             # bool (N,)
    exit_label: np.ndarray        # int (N,), -1 while inside
    turned: np.ndarray            # bool (N,), horizontal velocity changed sign
    first_sign: np.ndarray        # int8 (N,), first nonzero sign of the horizontal velocity
    exit_time: np.ndarray         # float (N,), nan while inside

    @classmethod
    def from_positions(cls, X) -> "ParticleEnsemble":
        X = np.array(X, float)
        if X.ndim == 1:
            X = X[:, None]
        N = X.shape[0]
        return cls(X, np.ones(N, bool), np.full(N, -1, np.int64), np.zeros(N, bool), np.zeros(N, np.int8),
                   np.full(N, np.nan))

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    @property
    def n_absorbed(self) -> int:
        return self.N - self.n_alive

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.X.copy(), self.alive.copy(), self.exit_label.copy(), self.turned.copy(),
                                self.first_sign.copy(), self.exit_time.copy())


@dataclass(frozen=True)
class KDEConfig:
    """Gaussian bandwidth ``sigma`` (standard deviation) truncated at ``truncation * sigma``."""

    sigma: float = 0.05
    truncation: float = 4.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("KDE bandwidth must be positive")


def _gauss1d(points: np.ndarray, centres: np.ndarray, kde: KDEConfig) -> np.ndarray:
    r = points[:, None] - centres[None, :]
    g = np.exp(-0.5 * (r / kde.sigma) ** 2) / (math.sqrt(2 * math.pi) * kde.sigma)
    g[np.abs(r) > kde.truncation * kde.sigma] = 0.0
    return g


def empirical_density(ens: ParticleEnsemble, grid: Grid, kde: KDEConfig = KDEConfig(), mass: float = 1.0,
                      rho_max: float | None = None) -> np.ndarray:
    """``mass/N * sum_j g(x - X_j)`` at cell centres over the alive particles.

    The Gaussian is separable so the sum is a product of per-axis matrices.
    With ``rho_max`` the result is clamped to ``[0, rho_max]``.
    """
    X = ens.X[ens.alive]
    axes = grid.cell_axes()
    w = mass / ens.N
    if X.shape[0] == 0:
        rho = np.zeros(grid.shape)
    elif grid.dim == 1:
        rho = w * _gauss1d(axes[0], X[:, 0], kde).sum(axis=1)
    else:
        gx = _gauss1d(axes[0], X[:, 0], kde)
        gy = _gauss1d(axes[1], X[:, 1], kde)
        rho = w * gx @ gy.T
    if rho_max is not None:
        rho = np.clip(rho, 0.0, rho_max)
    return rho


def _interp_cells(grid: Grid, values: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Bilinear (linear in 1D) interpolation of cell-centred data, constant beyond the outer centres."""
    out_shape = values.shape[grid.dim:]
    lo_idx, frac = [], []
    for ax in range(grid.dim):
        h = grid.spacing[ax]
        n = grid.shape[ax]
        s = (X[:, ax] - grid.domain.bounds[ax][0]) / h - 0.5
        s = np.clip(s, 0.0, n - 1.0)
        i = np.minimum(np.floor(s).astype(np.int64), max(n - 2, 0))
        lo_idx.append(i)
        frac.append(s - i)
    if grid.dim == 1:
        i, t = lo_idx[0], frac[0]
        t = t.reshape((-1,) + (1,) * len(out_shape))
        return (1 - t) * values[i] + t * values[np.minimum(i + 1, grid.shape[0] - 1)]
    i, j = lo_idx
    tx, ty = (f.reshape((-1,) + (1,) * len(out_shape)) for f in frac)
    i1 = np.minimum(i + 1, grid.shape[0] - 1)
    j1 = np.minimum(j + 1, grid.shape[1] - 1)
    return ((1 - tx) * (1 - ty) * values[i, j] + tx * (1 - ty) * values[i1, j]
            + (1 - tx) * ty * values[i, j1] + tx * ty * values[i1, j1])


def particle_velocity(X, grid: Grid, v_cells: np.ndarray) -> np.ndarray:
    """Velocity at particle positions from the cell velocity field."""
    X = np.atleast_2d(np.asarray(X, float))
    if grid.dim == 1 and X.shape[1] != 1:
        X = X.reshape(-1, 1)
    for ax, (a, b) in enumerate(grid.domain.bounds):
        if np.any(X[:, ax] < a - 1e-12) or np.any(X[:, ax] > b + 1e-12):
            raise ValueError("particle outside the domain")
    return _interp_cells(grid, np.asarray(v_cells, float), X)


def cell_velocity(grid: Grid, rho: np.ndarray, consensus: np.ndarray, d: np.ndarray, law: FluxLaw,
                  literal: bool = False, literal_signs: bool = False) -> np.ndarray:
    """Cell velocity for particles.

    Default ``f(rho) d`` with the projected direction ``d``. With ``literal``
    the unprojected consensus is used, ``-f(rho)^2 consensus``, with the
    same boundary treatment.
    """
    f = law.mobility(rho)
    if not literal:
        return f[..., None] * d
    raw = apply_boundary(grid, -consensus, literal_signs)
    return (f * f)[..., None] * raw


def _exit_hit(grid: Grid, p: np.ndarray) -> int:
    """Exit index containing boundary point ``p`` (or -1)."""
    for e in grid.domain.exits:
        a, b = np.asarray(e.start), np.asarray(e.end)
        if grid.dim == 1:
            if abs(p[0] - a[0]) <= 1e-9:
                return e.index
            continue
        ab = b - a
        t = float(np.dot(p - a, ab) / np.dot(ab, ab))
        if -1e-9 <= t <= 1 + 1e-9 and np.linalg.norm(a + t * ab - p) <= 1e-9:
            return e.index
    return -1


def _push_out_of_obstacles(grid: Grid, x: np.ndarray) -> np.ndarray:
    for ob in grid.domain.obstacles:
        if ob.x0 < x[0] < ob.x1 and ob.y0 < x[1] < ob.y1:
            d = [x[0] - ob.x0, ob.x1 - x[0], x[1] - ob.y0, ob.y1 - x[1]]
            k = int(np.argmin(d))
            x = x.copy()
            if k == 0:
                x[0] = ob.x0
            elif k == 1:
                x[0] = ob.x1
            elif k == 2:
                x[1] = ob.y0
            else:
                x[1] = ob.y1
    return x


def step_micro(ens: ParticleEnsemble, grid: Grid, v_cells: np.ndarray, dt: float, t: float = 0.0,
               sign_tol: float = 1e-8) -> ParticleEnsemble:
    """Explicit Euler step with exit absorption and wall projection.

    A particle whose step leaves the domain through an exit segment is
    absorbed with that exit's label. Otherwise the position is projected
    back onto the wall along its normal.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    out = ens.copy()
    idx = np.flatnonzero(out.alive)
    if idx.size == 0:
        return out
    V = particle_velocity(out.X[idx], grid, v_cells)
    vx = V[:, 0]
    sgn = np.where(vx > sign_tol, 1, np.where(vx < -sign_tol, -1, 0)).astype(np.int8)
    first = out.first_sign[idx]
    newly = (first == 0) & (sgn != 0)
    first[newly] = sgn[newly]
    out.first_sign[idx] = first
    out.turned[idx] |= (sgn != 0) & (first != 0) & (sgn != first)
    lo = np.array([b[0] for b in grid.domain.bounds])
    hi = np.array([b[1] for b in grid.domain.bounds])
    for n, j in enumerate(idx):
        x0 = out.X[j]
        x1 = x0 + dt * V[n]
        if np.all(x1 >= lo) and np.all(x1 <= hi):
            if grid.dim == 2 and grid.domain.obstacles:
                x1 = _push_out_of_obstacles(grid, x1)
            out.X[j] = x1
            continue
        # first boundary crossing along the segment
        step = x1 - x0
        s_hit, ax_hit, side_hit = 1.0, -1, 0.0
        for ax in range(grid.dim):
            if x1[ax] < lo[ax] and step[ax] < 0:
                s = (lo[ax] - x0[ax]) / step[ax]
                if s < s_hit:
                    s_hit, ax_hit, side_hit = s, ax, lo[ax]
            elif x1[ax] > hi[ax] and step[ax] > 0:
                s = (hi[ax] - x0[ax]) / step[ax]
                if s < s_hit:
                    s_hit, ax_hit, side_hit = s, ax, hi[ax]
        p = x0 + s_hit * step
        if ax_hit >= 0:
            p[ax_hit] = side_hit
        k = _exit_hit(grid, np.clip(p, lo, hi))
        if k >= 0:
            out.alive[j] = False
            out.exit_label[j] = k
            out.exit_time[j] = t + dt
            out.X[j] = np.clip(p, lo, hi)
        else:
            x1 = np.clip(x1, lo, hi)
            if grid.dim == 2 and grid.domain.obstacles:
                x1 = _push_out_of_obstacles(grid, x1)
            out.X[j] = x1
    return out


def sample_blocks(blocks: Sequence[tuple[Sequence[tuple[float, float]], float]], n: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Sample ``n`` positions from piecewise-constant data given as ``(box, value)`` blocks.

    Counts per block follow the block masses (largest remainder rounding),
    positions are uniform inside each block.
    """
    boxes = [np.asarray(b, float) for b, _ in blocks]
    masses = np.array([v * np.prod(b[:, 1] - b[:, 0]) for b, (_, v) in zip(boxes, blocks)])
    if n < 1 or masses.sum() <= 0:
        raise ValueError("need n >= 1 and positive initial mass")
    share = n * masses / masses.sum()
    counts = np.floor(share).astype(int)
    rest = n - counts.sum()
    if rest:
        counts[np.argsort(-(share - counts), kind="stable")[:rest]] += 1
    pts = [b[:, 0] + (b[:, 1] - b[:, 0]) * rng.random((c, b.shape[0])) for b, c in zip(boxes, counts)]
    return np.concatenate(pts, axis=0)


@dataclass
class MicroSetup:
    grid: Grid
    X0: np.ndarray
    mass: float
    cost: CostModel
    W: np.ndarray | float
    vision: VisionSpec
    kernel: Kernel
    kde: KDEConfig = KDEConfig()
    proj: ProjectionParams = ProjectionParams()
    law: FluxLaw = FluxLaw()
    stride: int = 1
    reduction: str = "vsharp"
    solver: str = "fmm"
    dt: float = 1e-2
    t_max: float = 1.5
    u_single: float = 1.0
    delta: float = 1e-7
    literal: bool = False
    literal_signs: bool = False
    record_every: int = 0


@dataclass
class MicroSnapshot:
    t: float
    X: np.ndarray
    alive: np.ndarray
    turned: np.ndarray


@dataclass
class MicroRun:
    setup: MicroSetup
    times: np.ndarray
    exit_fraction: np.ndarray        # absorbed share of N
    exit_counts: np.ndarray          # (steps+1, M)
    final: ParticleEnsemble
    snapshots: list[MicroSnapshot] = field(default_factory=list)
    wall_clock: float = 0.0

    def fraction_at(self, t: float) -> float:
        """Exit fraction at the last sample not after ``t``."""
        i = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        return float(self.exit_fraction[max(i, 0)])


def run_micro(setup: MicroSetup) -> MicroRun:
    """Density estimate, local potentials, consensus velocity and Euler step until ``t_max`` or all absorbed."""
    grid = setup.grid
    t0 = time.perf_counter()
    ens = ParticleEnsemble.from_positions(setup.X0)
    M = grid.domain.n_exits
    t = 0.0
    times, frac, counts = [0.0], [0.0], [np.zeros(M, np.int64)]
    snaps = [MicroSnapshot(0.0, ens.X.copy(), ens.alive.copy(), ens.turned.copy())] if setup.record_every else []
    step = 0
    while t < setup.t_max - 1e-12 and ens.n_alive > 0:
        rho = empirical_density(ens, grid, setup.kde, setup.mass, setup.cost.rho_max)
        dr = direction_field(grid, rho, setup.cost, setup.W, setup.vision, setup.kernel, setup.proj, setup.stride,
                             setup.reduction, setup.solver, setup.u_single, setup.delta, setup.literal_signs)
        v = cell_velocity(grid, rho, dr.consensus, dr.d, setup.law, setup.literal, setup.literal_signs)
        dt = min(setup.dt, setup.t_max - t)
        ens = step_micro(ens, grid, v, dt, t)
        t += dt
        step += 1
        times.append(t)
        frac.append(ens.n_absorbed / ens.N)
        counts.append(np.bincount(ens.exit_label[~ens.alive], minlength=M)[:M])
        if setup.record_every and step % setup.record_every == 0:
            snaps.append(MicroSnapshot(t, ens.X.copy(), ens.alive.copy(), ens.turned.copy()))
    return MicroRun(setup, np.array(times), np.array(frac), np.array(counts), ens, snaps,
                    time.perf_counter() - t0)
