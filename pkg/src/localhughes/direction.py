"""Exit choice, conviction, consensus and the smoothed projection of walking directions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .eikonal import CostModel, observer_potentials
from .fields import Kernel, convolve
from .geometry import Grid, VisionSpec


@dataclass(frozen=True)
class ProjectionParams:
    """Threshold ``ell`` and steepness ``k`` of the smoothed projection."""

    ell: float = 0.05
    k: float = 25.0

    def __post_init__(self):
        if not (self.ell > 0 and self.k > 0):
            raise ValueError("projection parameters must be positive")


def smoothed_projection(v: np.ndarray, p: ProjectionParams = ProjectionParams()) -> np.ndarray:
    """Near-normalisation: unit length above ``ell``, a sine ramp below it, zero at zero.

    ``v`` may be a single vector or an array with the components on the
    last axis.
    """
    v = np.asarray(v, float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.ones_like(n)
    low = n <= p.ell
    scale[low] = np.sin(math.pi * np.arctan(p.k * n[low]) / (2.0 * math.atan(p.k * p.ell)))
    out = np.zeros_like(v)
    nz = (n > 0)[..., 0]
    out[nz] = scale[nz] * v[nz] / n[nz]
    return out


@dataclass
class ExitChoice:
    """Best and runner-up exit per point (0-based indices, -1 if none)."""

    k_opt: np.ndarray
    k_next: np.ndarray
    phi_opt: np.ndarray
    phi_next: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return self.phi_next - self.phi_opt


def select_exits(self_costs: np.ndarray) -> ExitChoice:
    """Argmin over exits (axis 0) with ties resolved towards the lowest index.

    With a single exit the runner-up is ``-1`` with infinite cost.
    """
    c = np.asarray(self_costs, float)
    if c.ndim == 1:
        c = c[:, None]
        squeeze = True
    else:
        squeeze = False
    order = np.argsort(c, axis=0, kind="stable")
    k_opt = order[0]
    phi_opt = np.take_along_axis(c, order[:1], axis=0)[0]
    if c.shape[0] > 1:
        k_next = order[1]
        phi_next = np.take_along_axis(c, order[1:2], axis=0)[0]
    else:
        k_next = np.full_like(k_opt, -1)
        phi_next = np.full_like(phi_opt, np.inf)
    if squeeze:
        return ExitChoice(k_opt[0], k_next[0], phi_opt[0], phi_next[0])
    return ExitChoice(k_opt, k_next, phi_opt, phi_next)


@dataclass
class ConvictionResult:
    u: np.ndarray
    zero_gradient: int = 0


def conviction_field(choice: ExitChoice, grads: np.ndarray, u_single: float = 1.0) -> ConvictionResult:
    """Unit ascent direction of the best exit's potential scaled by the cost gap.

    ``grads`` has shape ``(M, ..., dim)``. Where the runner-up is missing
    the magnitude is ``u_single``. Zero gradients give ``u = 0`` and are
    counted.
    """
    grads = np.asarray(grads, float)
    g = np.take_along_axis(grads, choice.k_opt[None, ..., None], axis=0)[0]
    gn = np.linalg.norm(g, axis=-1)
    gap = np.where(choice.k_next < 0, u_single, choice.gap)
    gap = np.where(np.isfinite(gap), gap, u_single)
    u = np.zeros_like(g)
    ok = gn > 0
    u[ok] = g[ok] / gn[ok, None] * gap[ok, None]
    zero = int(np.count_nonzero(~ok & (gap > 0)))
    return ConvictionResult(u, zero)


def consensus_field(rho: np.ndarray, u: np.ndarray, K: Kernel, delta: float = 1e-7) -> np.ndarray:
    """Density weighted kernel average of convictions; falls back to ``u`` where ``rho * K`` is below ``delta``."""
    rho = np.asarray(rho, float)
    num = convolve(rho[..., None] * u, K)
    den = convolve(rho, K)
    out = np.array(u, float, copy=True)
    ok = den >= delta
    out[ok] = num[ok] / den[ok, None]
    return out


def boundary_cells(grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exit normal per cell (zero if the cell has no exit face), exit mask and wall normals.

    Returns ``(exit_normal, exit_mask, wall_normals)`` where
    ``wall_normals`` sums the outward normals of all wall faces of a cell.
    """
    key = "boundary_cells"
    if key in grid._cache:
        return grid._cache[key]
    dim = grid.dim
    exit_n = np.zeros(grid.shape + (dim,))
    exit_m = np.zeros(grid.shape, bool)
    wall_n = np.zeros(grid.shape + (dim,))
    lab = grid.edge_labels
    if dim == 1:
        for side, idx, nrm in (("left", 0, -1.0), ("right", -1, 1.0)):
            if lab[side][0] >= 0:
                exit_n[idx, 0] = nrm
                exit_m[idx] = True
            else:
                wall_n[idx, 0] += nrm
    else:
        sides = {
            "left": ((0, slice(None)), (-1.0, 0.0)),
            "right": ((-1, slice(None)), (1.0, 0.0)),
            "bottom": ((slice(None), 0), (0.0, -1.0)),
            "top": ((slice(None), -1), (0.0, 1.0)),
        }
        for side, (sl, nrm) in sides.items():
            labels = lab[side]
            cells_n = exit_n[sl]
            cells_m = exit_m[sl]
            cells_w = wall_n[sl]
            is_exit = labels >= 0
            cells_n[is_exit] = nrm
            cells_m[is_exit] = True
            cells_w[~is_exit] += nrm
        if grid.blocked.any():
            b = grid.blocked
            for ax, sgn in ((0, 1), (0, -1), (1, 1), (1, -1)):
                nb = np.zeros_like(b)
                if sgn > 0:
                    sl_src = [slice(None)] * 2
                    sl_dst = [slice(None)] * 2
                    sl_src[ax] = slice(1, None)
                    sl_dst[ax] = slice(None, -1)
                else:
                    sl_src = [slice(None)] * 2
                    sl_dst = [slice(None)] * 2
                    sl_src[ax] = slice(None, -1)
                    sl_dst[ax] = slice(1, None)
                nb[tuple(sl_dst)] = b[tuple(sl_src)]
                touch = nb & ~b
                wall_n[touch, ax] += sgn
    grid._cache[key] = (exit_n, exit_m, wall_n)
    return grid._cache[key]


def apply_boundary(grid: Grid, d: np.ndarray, literal_signs: bool = False) -> np.ndarray:
    """Outward unit normal on exit cells, outward wall components removed elsewhere."""
    exit_n, exit_m, wall_n = boundary_cells(grid)
    d = np.array(d, float, copy=True)
    for ax in range(grid.dim):
        w = wall_n[..., ax]
        out = (w != 0) & (d[..., ax] * w > 0)
        d[out, ax] = 0.0
    d[exit_m] = -exit_n[exit_m] if literal_signs else exit_n[exit_m]
    if grid.blocked.any():
        d[grid.blocked] = 0.0
    return d


def assemble_velocity(grid: Grid, rho: np.ndarray, phi_c: np.ndarray, mobility: Callable,
                      proj: ProjectionParams = ProjectionParams(), literal_signs: bool = False):
    """Walking direction ``d = -P[phi_c]`` (with boundary treatment) and velocity ``f(rho) d``."""
    d = apply_boundary(grid, -smoothed_projection(phi_c, proj), literal_signs)
    return d, mobility(rho)[..., None] * d


def observer_nodes(grid: Grid, stride: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Flat indices of strided observer vertices (always including the last vertex per axis)."""
    axes = []
    for n in grid.vshape:
        idx = np.arange(0, n, max(1, int(stride)))
        if idx[-1] != n - 1:
            idx = np.append(idx, n - 1)
        axes.append(idx)
    if grid.dim == 1:
        return axes[0].astype(np.int64), axes
    I, J = np.meshgrid(axes[0], axes[1], indexing="ij")
    return (I * grid.vshape[1] + J).ravel().astype(np.int64), axes


def _lattice_to_vertices(vals: np.ndarray, axes: list[np.ndarray], vshape: tuple[int, ...]) -> np.ndarray:
    """Separable linear interpolation from the observer lattice to every vertex."""
    out = vals
    for ax, idx in enumerate(axes):
        if len(idx) == vshape[ax]:
            continue
        full = np.arange(vshape[ax])
        lo = np.clip(np.searchsorted(idx, full, side="right") - 1, 0, len(idx) - 2)
        t = (full - idx[lo]) / (idx[lo + 1] - idx[lo])
        shape = [1] * out.ndim
        shape[ax] = -1
        t = t.reshape(shape)
        a = np.take(out, lo, axis=ax)
        b = np.take(out, lo + 1, axis=ax)
        out = (1 - t) * a + t * b
    return out


@dataclass
class DirectionResult:
    """Cell based outputs of one direction assembly."""

    d: np.ndarray            # walking direction incl. boundary treatment
    pnorm: np.ndarray        # ||P[consensus]|| before boundary treatment
    u: np.ndarray
    consensus: np.ndarray
    choice: ExitChoice
    self_values: np.ndarray  # (M,) + cell shape
    zero_gradient: int = 0
    mode: str = ""
    stats: dict = field(default_factory=dict)


def direction_field(grid: Grid, rho: np.ndarray, cm: CostModel, W, vision: VisionSpec, K: Kernel,
                    proj: ProjectionParams = ProjectionParams(), stride: int = 1, mode: str = "vsharp",
                    solver: str = "fmm", u_single: float = 1.0, delta: float = 1e-7,
                    literal_signs: bool = False, tol: float | None = None) -> DirectionResult:
    """Full direction assembly from cell densities ``rho``.

    Per-exit self potentials and self gradients are computed at strided
    observer vertices, interpolated to all vertices, averaged onto cells and
    then turned into convictions, consensus and the projected direction.
    """
    rho_v = grid.cell_to_vertex(rho)
    nodes, axes = observer_nodes(grid, stride)
    res = observer_potentials(grid, rho_v, cm, W, vision, nodes, mode=mode, solver=solver, tol=tol)
    M = grid.domain.n_exits
    lat = tuple(len(a) for a in axes)
    vals = res.values.reshape((M,) + lat)
    grads = res.grads.reshape((M,) + lat + (grid.dim,))
    big = np.nanmax(np.where(np.isfinite(vals), vals, np.nan)) if np.isfinite(vals).any() else 1.0
    vals = np.where(np.isfinite(vals), vals, 10.0 * big + 1.0)
    self_v = np.empty((M,) + grid.shape)
    self_g = np.empty((M,) + grid.shape + (grid.dim,))
    for k in range(M):
        vv = _lattice_to_vertices(vals[k], axes, grid.vshape)
        gg = _lattice_to_vertices(grads[k], axes, grid.vshape)
        self_v[k] = grid.vertex_to_cell(vv)
        self_g[k] = grid.vertex_to_cell(gg)
    choice = select_exits(self_v)
    conv = conviction_field(choice, self_g, u_single)
    cons = consensus_field(rho, conv.u, K, delta)
    P = smoothed_projection(cons, proj)
    d = apply_boundary(grid, -P, literal_signs)
    return DirectionResult(d, np.linalg.norm(P, axis=-1), conv.u, cons, choice, self_v, conv.zero_gradient,
                           res.mode, {"accepted": res.accepted})
