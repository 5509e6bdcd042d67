"""Domain description, Cartesian grids, vision cones and the wall layer profile."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

_TOL = 1e-9

SIDES_1D = ("left", "right")
SIDES_2D = ("left", "right", "bottom", "top")


class ConfigurationError(ValueError):
    """Raised for inconsistent geometry or parameter combinations."""


@dataclass(frozen=True)
class ExitSpec:
    """A straight exit segment on the outer boundary.

    ``index`` is zero-based. ``normal`` is the outward unit normal.
    In 1D ``start`` and ``end`` coincide (the exit is an end point).
    """

    index: int
    start: tuple[float, ...]
    end: tuple[float, ...]
    normal: tuple[float, ...]

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.start, float) + np.asarray(self.end, float))


@dataclass(frozen=True)
class VisionSpec:
    """Radial vision cone of diameter ``L``.

    ``L = inf`` is global vision, ``L = 0`` means only the observer's own
    grid point is visible.
    """

    L: float = math.inf

    def __post_init__(self):
        if not (self.L >= 0):
            raise ConfigurationError(f"vision diameter must be >= 0, got {self.L}")

    @property
    def radius(self) -> float:
        return 0.5 * self.L


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned rectangular hole ``[x0, x1] x [y0, y1]``."""

    x0: float
    x1: float
    y0: float
    y1: float


@dataclass(frozen=True)
class Domain:
    """Rectangle (or interval in 1D) with classified boundary.

    ``bounds`` holds one ``(lo, hi)`` pair per axis. Walls are the boundary
    minus the exits.
    """

    bounds: tuple[tuple[float, float], ...]
    exits: tuple[ExitSpec, ...]
    wall_width: float = 0.0
    obstacles: tuple[Obstacle, ...] = ()

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError("only 1D and 2D domains are supported")
        for lo, hi in self.bounds:
            if not hi > lo:
                raise ConfigurationError(f"empty axis range ({lo}, {hi})")
        if not self.exits:
            raise ConfigurationError("at least one exit is required")
        for k, ex in enumerate(self.exits):
            if ex.index != k:
                raise ConfigurationError("exit indices must be 0..M-1 in order")
            n = np.asarray(ex.normal, float)
            if abs(np.linalg.norm(n) - 1.0) > 1e-12:
                raise ConfigurationError(f"exit {k}: normal is not unit length")
            if _boundary_side(self.bounds, ex.start, ex.end) is None:
                raise ConfigurationError(f"exit {k}: segment does not lie on the boundary")
        self._check_overlap()
        if self.dim == 1 and self.obstacles:
            raise ConfigurationError("obstacles need a 2D domain")

    def _check_overlap(self) -> None:
        for a in self.exits:
            for b in self.exits:
                if b.index <= a.index:
                    continue
                sa = _boundary_side(self.bounds, a.start, a.end)
                sb = _boundary_side(self.bounds, b.start, b.end)
                if sa != sb:
                    continue
                if self.dim == 1:
                    raise ConfigurationError(f"exits {a.index} and {b.index} overlap")
                ax = 1 if sa in ("left", "right") else 0
                lo_a, hi_a = sorted((a.start[ax], a.end[ax]))
                lo_b, hi_b = sorted((b.start[ax], b.end[ax]))
                if min(hi_a, hi_b) - max(lo_a, lo_b) > _TOL:
                    raise ConfigurationError(f"exits {a.index} and {b.index} overlap")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def extent(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in self.bounds])

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def n_exits(self) -> int:
        return len(self.exits)

    @classmethod
    def interval(cls, x0: float = 0.0, x1: float = 1.0, exits: Sequence[str] = ("left", "right")) -> "Domain":
        specs = []
        for k, side in enumerate(exits):
            if side == "left":
                specs.append(ExitSpec(k, (x0,), (x0,), (-1.0,)))
            elif side == "right":
                specs.append(ExitSpec(k, (x1,), (x1,), (1.0,)))
            else:
                raise ConfigurationError(f"unknown 1D exit side {side!r}")
        return cls(((x0, x1),), tuple(specs))

    @classmethod
    def rectangle(
        cls,
        xrange: tuple[float, float],
        yrange: tuple[float, float],
        exits: Sequence[tuple[Sequence[float], Sequence[float]]],
        wall_width: float = 0.0,
        obstacles: Sequence[Obstacle] = (),
    ) -> "Domain":
        bounds = (tuple(map(float, xrange)), tuple(map(float, yrange)))
        specs = []
        for k, (p0, p1) in enumerate(exits):
            p0 = tuple(map(float, p0))
            p1 = tuple(map(float, p1))
            side = _boundary_side(bounds, p0, p1)
            if side is None:
                raise ConfigurationError(f"exit {k}: segment {p0}-{p1} is not on the boundary")
            specs.append(ExitSpec(k, p0, p1, _OUTWARD[side]))
        return cls(bounds, tuple(specs), float(wall_width), tuple(obstacles))


_OUTWARD = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "bottom": (0.0, -1.0),
    "top": (0.0, 1.0),
}


def _boundary_side(bounds, p0, p1) -> str | None:
    if len(bounds) == 1:
        (lo, hi), = bounds
        if abs(p0[0] - p1[0]) > _TOL:
            return None
        if abs(p0[0] - lo) < _TOL:
            return "left"
        if abs(p0[0] - hi) < _TOL:
            return "right"
        return None
    (x0, x1), (y0, y1) = bounds
    if abs(p0[0] - p1[0]) < _TOL:
        ylo, yhi = sorted((p0[1], p1[1]))
        if yhi - ylo < _TOL or ylo < y0 - _TOL or yhi > y1 + _TOL:
            return None
        if abs(p0[0] - x0) < _TOL:
            return "left"
        if abs(p0[0] - x1) < _TOL:
            return "right"
    if abs(p0[1] - p1[1]) < _TOL:
        xlo, xhi = sorted((p0[0], p1[0]))
        if xhi - xlo < _TOL or xlo < x0 - _TOL or xhi > x1 + _TOL:
            return None
        if abs(p0[1] - y0) < _TOL:
            return "bottom"
        if abs(p0[1] - y1) < _TOL:
            return "top"
    return None


class BoundaryEdge(NamedTuple):
    side: str
    index: int
    midpoint: tuple[float, ...]
    label: int  # -1 wall, k >= 0 exit k


@dataclass
class Grid:
    """Uniform Cartesian grid over a :class:`Domain`.

    Cell arrays have shape ``shape``; vertex arrays have shape
    ``tuple(n + 1 for n in shape)``. Axis 0 is x.
    """

    domain: Domain
    shape: tuple[int, ...]
    spacing: tuple[float, ...]
    edge_labels: dict[str, np.ndarray]
    blocked: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def vshape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.shape)

    @property
    def h(self) -> float:
        """Smallest spacing (used for CFL and stencil radii)."""
        return min(self.spacing)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def vertex_axes(self) -> list[np.ndarray]:
        return [lo + h * np.arange(n + 1) for (lo, _), h, n in zip(self.domain.bounds, self.spacing, self.shape)]

    def cell_axes(self) -> list[np.ndarray]:
        return [lo + h * (np.arange(n) + 0.5) for (lo, _), h, n in zip(self.domain.bounds, self.spacing, self.shape)]

    def vertex_coords(self) -> np.ndarray:
        """Array of shape ``vshape + (dim,)``."""
        key = "vertex_coords"
        if key not in self._cache:
            self._cache[key] = np.stack(np.meshgrid(*self.vertex_axes(), indexing="ij"), axis=-1)
        return self._cache[key]

    def cell_coords(self) -> np.ndarray:
        key = "cell_coords"
        if key not in self._cache:
            self._cache[key] = np.stack(np.meshgrid(*self.cell_axes(), indexing="ij"), axis=-1)
        return self._cache[key]

    @property
    def passable(self) -> np.ndarray:
        """Vertex mask: False for vertices strictly inside an obstacle."""
        key = "passable"
        if key not in self._cache:
            if self.dim == 1 or not self.blocked.any():
                self._cache[key] = np.ones(self.vshape, bool)
            else:
                b = np.pad(self.blocked, 1, constant_values=False)
                inner = b[:-1, :-1] & b[1:, :-1] & b[:-1, 1:] & b[1:, 1:]
                self._cache[key] = ~inner
        return self._cache[key]

    def exit_vertices(self, k: int | Sequence[int] | None = None) -> np.ndarray:
        """Vertex mask of the end points of edges labelled with exit ``k``.

        ``k=None`` selects all exits.
        """
        ks = range(self.domain.n_exits) if k is None else ([k] if np.isscalar(k) else list(k))
        mask = np.zeros(self.vshape, bool)
        for kk in ks:
            mask |= self._exit_vertices_one(int(kk))
        return mask

    def _exit_vertices_one(self, k: int) -> np.ndarray:
        key = ("exitv", k)
        if key in self._cache:
            return self._cache[key]
        mask = np.zeros(self.vshape, bool)
        lab = self.edge_labels
        if self.dim == 1:
            if lab["left"][0] == k:
                mask[0] = True
            if lab["right"][0] == k:
                mask[-1] = True
        else:
            for j in np.flatnonzero(lab["left"] == k):
                mask[0, j:j + 2] = True
            for j in np.flatnonzero(lab["right"] == k):
                mask[-1, j:j + 2] = True
            for i in np.flatnonzero(lab["bottom"] == k):
                mask[i:i + 2, 0] = True
            for i in np.flatnonzero(lab["top"] == k):
                mask[i:i + 2, -1] = True
        self._cache[key] = mask
        return mask

    def boundary_edges(self) -> list[BoundaryEdge]:
        out = []
        if self.dim == 1:
            (x0, x1), = self.domain.bounds
            out.append(BoundaryEdge("left", 0, (x0,), int(self.edge_labels["left"][0])))
            out.append(BoundaryEdge("right", 0, (x1,), int(self.edge_labels["right"][0])))
            return out
        xs, ys = self.cell_axes()
        (x0, x1), (y0, y1) = self.domain.bounds
        for j, y in enumerate(ys):
            out.append(BoundaryEdge("left", j, (x0, y), int(self.edge_labels["left"][j])))
            out.append(BoundaryEdge("right", j, (x1, y), int(self.edge_labels["right"][j])))
        for i, x in enumerate(xs):
            out.append(BoundaryEdge("bottom", i, (x, y0), int(self.edge_labels["bottom"][i])))
            out.append(BoundaryEdge("top", i, (x, y1), int(self.edge_labels["top"][i])))
        return out

    def nearest_vertex(self, x: Sequence[float]) -> tuple[int, ...]:
        idx = []
        for xi, (lo, _), h, n in zip(np.atleast_1d(x), self.domain.bounds, self.spacing, self.shape):
            idx.append(int(np.clip(np.rint((xi - lo) / h), 0, n)))
        return tuple(idx)

    def contains(self, x: Sequence[float]) -> bool:
        x = np.atleast_1d(np.asarray(x, float))
        for xi, (lo, hi) in zip(x, self.domain.bounds):
            if xi < lo - _TOL or xi > hi + _TOL:
                return False
        for ob in self.domain.obstacles:
            if ob.x0 < x[0] < ob.x1 and ob.y0 < x[1] < ob.y1:
                return False
        return True

    def vertex_to_cell(self, values: np.ndarray) -> np.ndarray:
        """Average vertex values onto cells (trailing axes are carried along)."""
        if self.dim == 1:
            return 0.5 * (values[:-1] + values[1:])
        return 0.25 * (values[:-1, :-1] + values[1:, :-1] + values[:-1, 1:] + values[1:, 1:])

    def cell_to_vertex(self, values: np.ndarray) -> np.ndarray:
        """Average open-cell values onto vertices."""
        open_ = (~self.blocked).astype(float)
        v = np.where(self.blocked, 0.0, values)
        if self.dim == 1:
            num = np.zeros(self.vshape)
            den = np.zeros(self.vshape)
            num[:-1] += v
            num[1:] += v
            den[:-1] += open_
            den[1:] += open_
        else:
            num = np.zeros(self.vshape)
            den = np.zeros(self.vshape)
            for di in (0, 1):
                for dj in (0, 1):
                    num[di:di + self.shape[0], dj:dj + self.shape[1]] += v
                    den[di:di + self.shape[0], dj:dj + self.shape[1]] += open_
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def build_grid(domain: Domain, resolution: int | Sequence[int]) -> Grid:
    """Discretise ``domain`` into ``resolution`` cells per axis and label boundary edges."""
    res = tuple(int(r) for r in np.atleast_1d(resolution))
    if len(res) != domain.dim:
        raise ConfigurationError(f"resolution {res} does not match a {domain.dim}D domain")
    if any(r < 3 for r in res):
        raise ConfigurationError(f"need at least 3 cells per axis, got {res}")
    spacing = tuple(float(e) / r for e, r in zip(domain.extent, res))

    if domain.dim == 1:
        labels = {"left": np.array([-1]), "right": np.array([-1])}
        for ex in domain.exits:
            labels[_boundary_side(domain.bounds, ex.start, ex.end)][0] = ex.index
        return Grid(domain, res, spacing, labels, np.zeros(res, bool))

    (x0, x1), (y0, y1) = domain.bounds
    xs = x0 + spacing[0] * (np.arange(res[0]) + 0.5)
    ys = y0 + spacing[1] * (np.arange(res[1]) + 0.5)
    labels = {
        "left": np.full(res[1], -1),
        "right": np.full(res[1], -1),
        "bottom": np.full(res[0], -1),
        "top": np.full(res[0], -1),
    }
    for ex in domain.exits:
        side = _boundary_side(domain.bounds, ex.start, ex.end)
        ax = 1 if side in ("left", "right") else 0
        mids = ys if ax == 1 else xs
        lo, hi = sorted((ex.start[ax], ex.end[ax]))
        hit = (mids >= lo - _TOL) & (mids <= hi + _TOL)
        if not hit.any():
            raise ConfigurationError(
                f"exit {ex.index} ({ex.start}-{ex.end}) is not aligned with any boundary edge at this resolution"
            )
        if (labels[side][hit] >= 0).any():
            raise ConfigurationError(f"exit {ex.index} shares boundary edges with another exit")
        labels[side][hit] = ex.index

    blocked = np.zeros(res, bool)
    if domain.obstacles:
        cx, cy = np.meshgrid(xs, ys, indexing="ij")
        for ob in domain.obstacles:
            blocked |= (cx > ob.x0) & (cx < ob.x1) & (cy > ob.y0) & (cy < ob.y1)
    return Grid(domain, res, spacing, labels, blocked)


def vision_mask(grid: Grid, x: Sequence[float], vision: VisionSpec) -> np.ndarray:
    """Boolean vertex mask of the vision cone of an observer at ``x``."""
    mask = np.zeros(grid.vshape, bool)
    if math.isinf(vision.L):
        mask[...] = True
    elif vision.L > 0:
        d = np.linalg.norm(grid.vertex_coords() - np.asarray(x, float).reshape(-1), axis=-1)
        mask = d <= vision.radius * (1 + 1e-12) + 1e-12
    mask[grid.nearest_vertex(x)] = True
    return mask & grid.passable


def _wall_segments(domain: Domain) -> list[tuple[np.ndarray, np.ndarray, bool, bool]]:
    """Wall pieces as (start, end, start_at_exit, end_at_exit)."""
    (x0, x1), (y0, y1) = domain.bounds
    corners = {
        "bottom": ((x0, y0), (x1, y0)),
        "right": ((x1, y0), (x1, y1)),
        "top": ((x1, y1), (x0, y1)),
        "left": ((x0, y1), (x0, y0)),
    }
    exit_pts = []
    for ex in domain.exits:
        exit_pts.append(np.asarray(ex.start, float))
        exit_pts.append(np.asarray(ex.end, float))

    def at_exit(p):
        return any(np.linalg.norm(p - q) < _TOL for q in exit_pts)

    segs = []
    for side, (a, b) in corners.items():
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        L = np.linalg.norm(b - a)
        t_dir = (b - a) / L
        # exit intervals on this side, in arc length from a
        cuts = []
        for ex in domain.exits:
            if _boundary_side(domain.bounds, ex.start, ex.end) == side:
                s0 = float(np.dot(np.asarray(ex.start) - a, t_dir))
                s1 = float(np.dot(np.asarray(ex.end) - a, t_dir))
                cuts.append(tuple(sorted((s0, s1))))
        cuts.sort()
        s = 0.0
        for c0, c1 in cuts + [(L, L)]:
            if c0 - s > _TOL:
                p, q = a + s * t_dir, a + c0 * t_dir
                segs.append((p, q, at_exit(p), at_exit(q)))
            s = max(s, c1)
    for ob in domain.obstacles:
        pts = [(ob.x0, ob.y0), (ob.x1, ob.y0), (ob.x1, ob.y1), (ob.x0, ob.y1)]
        for i in range(4):
            segs.append((np.asarray(pts[i], float), np.asarray(pts[(i + 1) % 4], float), False, False))
    return segs


def layer_profile(grid: Grid, domain: Domain | None = None, points: np.ndarray | None = None) -> np.ndarray:
    """Wall proximity profile in [0, 1] evaluated at grid vertices (or ``points``).

    Equals 1 on walls and decays linearly to 0 at distance ``w``. Next to
    each exit end point the profile is ramped to 0 inside a right triangle
    with legs ``w`` along the wall and into the domain, so it vanishes on
    exit edges.
    """
    domain = domain or grid.domain
    pts = grid.vertex_coords() if points is None else np.asarray(points, float)
    if domain.dim == 1:
        return np.zeros(pts.shape[:-1])
    w = domain.wall_width
    if not w > 0:
        raise ConfigurationError("wall layer width must be positive")
    if w > 0.5 * float(domain.extent.min()):
        raise ConfigurationError(f"wall layer width {w} exceeds half the domain thickness")
    chi = np.zeros(pts.shape[:-1])
    for a, b, a_exit, b_exit in _wall_segments(domain):
        L = np.linalg.norm(b - a)
        t = (b - a) / L
        rel = pts - a
        s = rel @ t
        sc = np.clip(s, 0.0, L)
        dist = np.linalg.norm(rel - sc[..., None] * t, axis=-1)
        val = 1.0 - dist / w
        if a_exit:
            val = np.minimum(val, s / w)
        if b_exit:
            val = np.minimum(val, (L - s) / w)
        chi = np.maximum(chi, np.clip(val, 0.0, 1.0))
    return chi


def wall_cost(chi: np.ndarray, cost_model, epsilon: float = 0.025, cap: float | None = None) -> np.ndarray:
    """Fixed wall cost ``chi * c(rho_max - epsilon)``, capped at ``cap``.

    ``cap`` defaults to the cost at ``0.975 * rho_max``.
    """
    if not 0.0 < epsilon < cost_model.rho_max:
        raise ConfigurationError("wall epsilon must lie in (0, rho_max)")
    level = float(1.0 / cost_model.speed(cost_model.rho_max - epsilon))
    if cap is None:
        cap = float(cost_model.cost(0.975 * cost_model.rho_max))
    return np.minimum(np.asarray(chi, float) * level, cap)
