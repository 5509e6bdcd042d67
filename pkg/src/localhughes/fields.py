"""Grid fields, finite-difference gradients and discrete kernel convolutions."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Grid

VERTEX = "vertex"
CELL = "cell"


@dataclass
class ScalarField:
    """Values on the vertices or cells of ``grid``."""

    grid: Grid
    values: np.ndarray
    location: str = CELL

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        expect = self.grid.vshape if self.location == VERTEX else self.grid.shape
        if self.values.shape != expect:
            raise ValueError(f"field shape {self.values.shape} does not match {self.location} shape {expect}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def to_cells(self) -> "ScalarField":
        if self.location == CELL:
            return self
        return ScalarField(self.grid, self.grid.vertex_to_cell(self.values), CELL)


@dataclass
class VectorField:
    """Vectors on vertices or cells; ``values`` has a trailing axis of length ``dim``."""

    grid: Grid
    values: np.ndarray
    location: str = CELL

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        base = self.grid.vshape if self.location == VERTEX else self.grid.shape
        if self.values.shape != base + (self.grid.dim,):
            raise ValueError(f"vector field shape {self.values.shape} does not match {base + (self.grid.dim,)}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("vector field contains non-finite values")

    def norm(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=-1)

    def to_cells(self) -> "VectorField":
        if self.location == CELL:
            return self
        return VectorField(self.grid, self.grid.vertex_to_cell(self.values), CELL)


def gradient(f: ScalarField | np.ndarray, grid: Grid | None = None, at_cells: bool = False) -> VectorField:
    """Central differences inside, one-sided differences on the boundary.

    ``f`` is vertex based. With ``at_cells`` the vertex gradients are averaged
    onto cells.
    """
    if isinstance(f, ScalarField):
        grid, vals = f.grid, f.values
    else:
        vals = np.asarray(f, float)
    if grid.dim == 1:
        g = np.gradient(vals, grid.spacing[0], edge_order=1)[..., None]
    else:
        g = np.stack(np.gradient(vals, *grid.spacing, edge_order=1), axis=-1)
    out = VectorField(grid, g, VERTEX)
    return out.to_cells() if at_cells else out


@dataclass(frozen=True)
class Kernel:
    """Discrete convolution stencil.

    ``weights`` already include the cell volume ``h**d`` so that a
    convolution is a plain weighted sum.
    """

    kind: str
    parameter: float
    weights: np.ndarray

    @property
    def radius_cells(self) -> int:
        return self.weights.shape[0] // 2


def bump(r: np.ndarray, b: float) -> np.ndarray:
    """Radial bump ``exp(-b^2/(b^2-r^2))`` on ``r < b``, zero elsewhere."""
    r = np.asarray(r, float)
    out = np.zeros_like(r)
    inside = r < b
    out[inside] = np.exp(-b * b / (b * b - r[inside] ** 2))
    return out


def gaussian(r: np.ndarray, sigma: float, dim: int) -> np.ndarray:
    """Normalised isotropic Gaussian density in ``dim`` dimensions."""
    return np.exp(-0.5 * (np.asarray(r, float) / sigma) ** 2) / (2 * math.pi * sigma**2) ** (dim / 2)


GAUSS_TRUNCATION = 4.0


def make_kernel(kind: str, parameter: float, spacing, dim: int | None = None) -> Kernel:
    """Sample a kernel on the grid spacing.

    kind: ``"indicator"`` (``|x| <= parameter``), ``"bump"`` (support radius
    ``parameter``) or ``"gaussian"`` (standard deviation ``parameter``,
    truncated at 4 sigma).
    """
    spacing = tuple(np.atleast_1d(np.asarray(spacing, float)))
    dim = dim or len(spacing)
    if len(spacing) == 1 and dim > 1:
        spacing = spacing * dim
    if not parameter > 0:
        raise ValueError("kernel parameter must be positive")
    h = min(spacing)
    vol = float(np.prod(spacing))
    if parameter < h:
        warnings.warn(f"kernel parameter {parameter} below grid spacing {h}; using a single-point stencil", RuntimeWarning)
        return Kernel(kind, parameter, np.ones((1,) * dim) * vol)

    reach = GAUSS_TRUNCATION * parameter if kind == "gaussian" else parameter
    axes = []
    for hs in spacing:
        m = int(math.floor(reach / hs + 1e-9))
        axes.append(hs * np.arange(-m, m + 1))
    r = np.sqrt(sum(a**2 for a in np.meshgrid(*axes, indexing="ij")))
    if kind == "indicator":
        w = (r <= parameter * (1 + 1e-9)).astype(float)
    elif kind == "bump":
        w = bump(r, parameter)
    elif kind == "gaussian":
        w = np.where(r <= reach * (1 + 1e-9), gaussian(r, parameter, dim), 0.0)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return Kernel(kind, float(parameter), w * vol)


def convolve(f: np.ndarray, K: Kernel) -> np.ndarray:
    """Discrete convolution of cell or vertex data with truncation at the border.

    Vector data (trailing component axis) is convolved componentwise.
    Points outside the array contribute nothing; no renormalisation.
    """
    f = np.asarray(f, float)
    wdim = K.weights.ndim
    if f.ndim == wdim:
        return ndimage.convolve(f, K.weights, mode="constant", cval=0.0)
    if f.ndim == wdim + 1:
        return np.stack([ndimage.convolve(f[..., c], K.weights, mode="constant", cval=0.0) for c in range(f.shape[-1])], axis=-1)
    raise ValueError(f"cannot convolve {f.ndim}D data with a {wdim}D kernel")


def write_csv(path: str | Path, grid: Grid, values: np.ndarray, location: str = CELL, header: str = "value") -> None:
    """1D: ``x,value`` rows. 2D: a one-line header then the value matrix (rows = y)."""
    path = Path(path)
    values = np.asarray(values, float)
    axes = grid.vertex_axes() if location == VERTEX else grid.cell_axes()
    if grid.dim == 1:
        data = np.column_stack([axes[0], values.reshape(len(axes[0]), -1)])
        cols = ["x"] + ([header] if data.shape[1] == 2 else [f"{header}{i}" for i in range(data.shape[1] - 1)])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="")
    else:
        hdr = f"# {header} {location} nx={values.shape[0]} ny={values.shape[1]} x0={axes[0][0]:.10g} y0={axes[1][0]:.10g} hx={grid.spacing[0]:.10g} hy={grid.spacing[1]:.10g}"
        np.savetxt(path, values.T, delimiter=",", header=hdr, comments="")


def read_csv(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_csv` for 2D matrices (returns x-major array)."""
    return np.loadtxt(path, delimiter=",", comments="#").T


def write_vtk(path: str | Path, grid: Grid, cell_data: dict[str, np.ndarray] | None = None,
              point_data: dict[str, np.ndarray] | None = None, title: str = "fields") -> None:
    """Legacy ASCII VTK STRUCTURED_GRID writer for 2D grids.

    Scalars are arrays of cell or vertex shape, vectors carry a trailing
    axis of length 2 (padded to 3 components).
    """
    if grid.dim != 2:
        raise ValueError("VTK output is 2D only")
    nx, ny = grid.vshape
    xs, ys = grid.vertex_axes()
    lines = ["# vtk DataFile Version 3.0", title[:250], "ASCII", "DATASET STRUCTURED_GRID",
             f"DIMENSIONS {nx} {ny} 1", f"POINTS {nx * ny} double"]
    X, Y = np.meshgrid(xs, ys, indexing="xy")  # x fastest
    lines += [f"{x:.10g} {y:.10g} 0" for x, y in zip(X.ravel(), Y.ravel())]

    def block(data: dict, n: int, kind: str):
        out = [f"{kind} {n}"]
        for name, arr in data.items():
            arr = np.asarray(arr, float)
            if arr.ndim == 3:
                out.append(f"VECTORS {name} double")
                flat = np.transpose(arr, (1, 0, 2)).reshape(-1, arr.shape[-1])
                out += [f"{v[0]:.10g} {v[1]:.10g} 0" for v in flat]
            else:
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out += [f"{v:.10g}" for v in arr.T.ravel()]
        return out

    if cell_data:
        lines += block(cell_data, grid.shape[0] * grid.shape[1], "CELL_DATA")
    if point_data:
        lines += block(point_data, nx * ny, "POINT_DATA")
    Path(path).write_text("\n".join(lines) + "\n")
