"""JSON scenario schema, baked-in presets and builders for the solver inputs."""
from __future__ import annotations

import json
import math
import warnings
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..direction import ProjectionParams
from ..eikonal import CostModel
from ..fields import make_kernel
from ..geometry import ConfigurationError, Domain, Grid, Obstacle, VisionSpec, build_grid, layer_profile, wall_cost
from ..macro import FluxLaw, MacroSetup
from ..micro import KDEConfig, MicroSetup, sample_blocks


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="strings", validate_assignment=True)


class ObstacleConfig(_Strict):
    x: tuple[float, float]
    y: tuple[float, float]


class DomainConfig(_Strict):
    x: tuple[float, float] = (0.0, 1.0)
    y: Optional[tuple[float, float]] = None
    exits: list = Field(..., min_length=1, description="1D: 'left'/'right'; 2D: [[x0, y0], [x1, y1]] segments")
    obstacles: list[ObstacleConfig] = []

    @property
    def dim(self) -> int:
        return 1 if self.y is None else 2


class ResolutionConfig(_Strict):
    desk: list[int]
    fine: Optional[list[int]] = None


class Block(_Strict):
    x: tuple[float, float]
    y: Optional[tuple[float, float]] = None
    value: float = Field(..., ge=0.0)


class CostConfig(_Strict):
    law: Literal["linear", "lwr"] = "linear"
    rho_max: float = Field(1.0, gt=0)
    rho_hidden: float = Field(0.0, ge=0)
    c_max: float = Field(1e3, gt=0)
    floor: float = Field(1e-7, gt=0)


class WallConfig(_Strict):
    enabled: bool = False
    width: float = Field(0.025, gt=0)
    epsilon: float = Field(0.025, gt=0)
    cap_density: float = Field(0.975, gt=0, description="wall cost bounded by c(cap_density * rho_max)")


class KernelConfig(_Strict):
    kind: Literal["indicator", "bump", "gaussian"] = "bump"
    parameter: float = Field(0.05, gt=0)


class ProjectionConfig(_Strict):
    ell: float = Field(0.05, gt=0)
    k: float = Field(25.0, gt=0)


class TimeConfig(_Strict):
    dt_cap: float = Field(5e-3, gt=0)
    desk_dt_cap: Optional[float] = Field(None, gt=0)
    t_max: float = Field(10.0, gt=0)
    safety: float = Field(0.4, gt=0, le=1)
    threshold: float = Field(0.99, gt=0, le=1)


class SolverConfig(_Strict):
    solver: Literal["fsm", "fmm"] = "fsm"
    tol: Optional[float] = Field(None, gt=0)
    reduction: Literal["none", "mh", "vsharp"] = "vsharp"
    stride: int = Field(1, ge=1)
    refresh_every: int = Field(1, ge=1)


class FluxConfig(_Strict):
    law: Literal["as_written", "lwr"] = "as_written"
    exit_flux: Literal["upwind", "demand"] = "upwind"


class MicroConfig(_Strict):
    n_particles: int = Field(500, ge=1)
    sigma: float = Field(0.05, gt=0)
    truncation: float = Field(4.0, gt=0)
    dt: float = Field(1e-2, gt=0)
    velocity: Literal["consensus", "literal"] = "consensus"


class OutputConfig(_Strict):
    snapshot_times: list[float] = []
    outdir: Optional[str] = None
    vtk: bool = True


class Scenario(_Strict):
    name: str = "custom"
    model: Literal["macro", "micro"] = "macro"
    scale: Literal["desk", "fine"] = "desk"
    domain: DomainConfig
    resolution: ResolutionConfig
    initial: list[Block] = Field(..., min_length=1)
    vision: float = Field(math.inf, ge=0, description="vision diameter L; 'Infinity' for global vision")
    cost: CostConfig = CostConfig()
    wall: WallConfig = WallConfig()
    kernel: KernelConfig = KernelConfig()
    projection: ProjectionConfig = ProjectionConfig()
    time: TimeConfig = TimeConfig()
    solver: SolverConfig = SolverConfig()
    flux: FluxConfig = FluxConfig()
    micro: MicroConfig = MicroConfig()
    output: OutputConfig = OutputConfig()
    seed: int = 0
    u_single: float = Field(1.0, ge=0)
    delta: float = Field(1e-7, gt=0)
    literal_signs: bool = False

    @field_validator("vision", mode="before")
    @classmethod
    def _inf(cls, v):
        if isinstance(v, str) and v.lower() in ("inf", "infinity", "+inf"):
            return math.inf
        return v

    @model_validator(mode="after")
    def _check(self):
        dim = self.domain.dim
        for k, e in enumerate(self.domain.exits):
            if dim == 1 and e not in ("left", "right"):
                raise ValueError(f"domain.exits[{k}]: 1D exits are 'left' or 'right'")
            if dim == 2 and not (isinstance(e, (list, tuple)) and len(e) == 2 and all(len(p) == 2 for p in e)):
                raise ValueError(f"domain.exits[{k}]: 2D exits are [[x0, y0], [x1, y1]]")
        for name in ("desk", "fine"):
            cells = getattr(self.resolution, name)
            if cells is not None and (len(cells) != dim or min(cells) < 3):
                raise ValueError(f"resolution.{name}: need {dim} entries of at least 3 cells")
        box = [self.domain.x] + ([self.domain.y] if dim == 2 else [])
        for k, b in enumerate(self.initial):
            if b.value > self.cost.rho_max:
                raise ValueError(f"initial[{k}].value exceeds rho_max")
            rng = [b.x] + ([b.y if b.y is not None else self.domain.y] if dim == 2 else [])
            for (a0, a1), (d0, d1) in zip(rng, box):
                if not (d0 - 1e-12 <= a0 <= a1 <= d1 + 1e-12):
                    raise ValueError(f"initial[{k}] lies outside the domain")
        return self

    # builders -----------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.domain.dim

    def cells(self) -> list[int]:
        if self.scale == "fine":
            if self.resolution.fine is None:
                raise ConfigurationError("scenario has no fine resolution")
            warnings.warn("fine resolution: per-step eikonal solves may take very long", RuntimeWarning)
            return list(self.resolution.fine)
        return list(self.resolution.desk)

    def dt_cap(self) -> float:
        if self.scale == "desk" and self.time.desk_dt_cap is not None:
            return self.time.desk_dt_cap
        return self.time.dt_cap

    def build_domain(self) -> Domain:
        d = self.domain
        if d.dim == 1:
            return Domain.interval(d.x[0], d.x[1], tuple(d.exits))
        obs = tuple(Obstacle(o.x[0], o.x[1], o.y[0], o.y[1]) for o in d.obstacles)
        width = self.wall.width if self.wall.enabled else 0.0
        return Domain.rectangle(d.x, d.y, [tuple(map(tuple, e)) for e in d.exits], width, obs)

    def build_grid(self) -> Grid:
        return build_grid(self.build_domain(), self.cells())

    def cost_model(self) -> CostModel:
        c = self.cost
        return CostModel(c.law, c.rho_max, c.rho_hidden, c.c_max, c.floor)

    def vision_spec(self) -> VisionSpec:
        return VisionSpec(self.vision)

    def block_boxes(self) -> list[tuple[list[tuple[float, float]], float]]:
        out = []
        for b in self.initial:
            box = [tuple(b.x)]
            if self.dim == 2:
                box.append(tuple(b.y) if b.y is not None else tuple(self.domain.y))
            out.append((box, b.value))
        return out

    def initial_density(self, grid: Grid) -> np.ndarray:
        """Cell averages of the piecewise-constant blocks (exact overlap fractions)."""
        rho = np.zeros(grid.shape)
        edges = [np.linspace(a, b, n + 1) for (a, b), n in zip(grid.domain.bounds, grid.shape)]
        for box, value in self.block_boxes():
            frac = None
            for ax, (a0, a1) in enumerate(box):
                e = edges[ax]
                f = np.clip(np.minimum(e[1:], a1) - np.maximum(e[:-1], a0), 0.0, None) / np.diff(e)
                frac = f if frac is None else np.multiply.outer(frac, f)
            rho += value * frac
        return np.minimum(rho, self.cost.rho_max)

    def wall_field(self, grid: Grid, cm: CostModel):
        if not self.wall.enabled or self.dim == 1:
            return 0.0
        cap = float(cm.cost(self.wall.cap_density * cm.rho_max))
        return wall_cost(layer_profile(grid), cm, self.wall.epsilon, cap)

    def kernel_for(self, grid: Grid):
        return make_kernel(self.kernel.kind, self.kernel.parameter, grid.spacing)

    def flux_law(self) -> FluxLaw:
        return FluxLaw(self.flux.law, self.cost.rho_max)

    def macro_setup(self, grid: Grid | None = None) -> MacroSetup:
        grid = grid or self.build_grid()
        cm = self.cost_model()
        return MacroSetup(
            grid=grid, rho0=self.initial_density(grid), cost=cm, W=self.wall_field(grid, cm),
            vision=self.vision_spec(), kernel=self.kernel_for(grid),
            proj=ProjectionParams(self.projection.ell, self.projection.k), law=self.flux_law(),
            stride=self.solver.stride, reduction=self.solver.reduction, solver=self.solver.solver,
            dt_cap=self.dt_cap(), safety=self.time.safety, t_max=self.time.t_max, threshold=self.time.threshold,
            refresh_every=self.solver.refresh_every, snapshot_times=tuple(self.output.snapshot_times),
            u_single=self.u_single, delta=self.delta, literal_signs=self.literal_signs, exit_flux=self.flux.exit_flux)

    def micro_setup(self, grid: Grid | None = None) -> MicroSetup:
        grid = grid or self.build_grid()
        cm = self.cost_model()
        rng = np.random.default_rng(self.seed)
        X0 = sample_blocks(self.block_boxes(), self.micro.n_particles, rng)
        mass = float(sum(v * np.prod([b - a for a, b in box]) for box, v in self.block_boxes()))
        return MicroSetup(
            grid=grid, X0=X0, mass=mass, cost=cm, W=self.wall_field(grid, cm), vision=self.vision_spec(),
            kernel=self.kernel_for(grid), kde=KDEConfig(self.micro.sigma, self.micro.truncation),
            proj=ProjectionParams(self.projection.ell, self.projection.k), law=self.flux_law(),
            stride=self.solver.stride, reduction=self.solver.reduction, solver=self.solver.solver,
            dt=self.micro.dt, t_max=self.time.t_max, u_single=self.u_single, delta=self.delta,
            literal=self.micro.velocity == "literal", literal_signs=self.literal_signs)


class ScenarioError(ValueError):
    """Schema violation; ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


def _from_validation(e: ValidationError) -> ScenarioError:
    return ScenarioError([(".".join(str(x) for x in err["loc"]) or "<root>", err["msg"]) for err in e.errors()])


def parse_scenario(data: dict) -> Scenario:
    """Validate a dict. A ``preset`` key selects baked-in defaults that the other keys override."""
    data = dict(data)
    preset = data.pop("preset", None)
    if preset is not None:
        base = preset_dict(preset)
        data = _merge(base, data)
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        raise _from_validation(e) from None


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError([("<root>", f"invalid JSON: {e}")]) from None
    if not isinstance(data, dict):
        raise ScenarioError([("<root>", "top level must be an object")])
    return parse_scenario(data)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def schema() -> dict:
    return Scenario.model_json_schema()


# presets -----------------------------------------------------------------

_CORRIDOR1D = {
    "name": "corridor1d",
    "model": "macro",
    "domain": {"x": [0.0, 1.0], "exits": ["left", "right"]},
    "resolution": {"desk": [500], "fine": [10000]},
    "initial": [{"x": [0.0, 0.3], "value": 0.85}, {"x": [0.6, 1.0], "value": 0.25}],
    "vision": 0.75,
    "cost": {"c_max": 1e4},
    "wall": {"enabled": False},
    "kernel": {"kind": "indicator", "parameter": 0.05},
    "projection": {"ell": 0.05, "k": 25.0},
    "time": {"dt_cap": 5e-5, "desk_dt_cap": 1e-3, "t_max": 3.0, "safety": 0.4},
    "solver": {"solver": "fsm", "reduction": "vsharp", "stride": 1},
    "flux": {"law": "lwr"},
    "output": {"snapshot_times": [0.0, 0.31, 0.71, 1.29]},
}

_CORRIDOR2D_MACRO = {
    "name": "corridor2d_macro",
    "model": "macro",
    "domain": {"x": [0.0, 1.0], "y": [0.0, 0.5], "exits": [[[0.0, 0.0], [0.0, 0.1]], [[1.0, 0.5], [1.0, 0.4]]]},
    "resolution": {"desk": [120, 60], "fine": [1000, 500]},
    "initial": [{"x": [0.05, 0.3], "y": [0.0, 0.25], "value": 0.1}, {"x": [0.6, 0.95], "value": 0.95}],
    "vision": 0.75,
    "cost": {"c_max": 1e3},
    "wall": {"enabled": True, "width": 0.025, "epsilon": 0.025, "cap_density": 0.975},
    "kernel": {"kind": "bump", "parameter": 0.05},
    "projection": {"ell": 0.05, "k": 25.0},
    "time": {"dt_cap": 5e-3, "t_max": 10.0, "safety": 0.4},
    "solver": {"solver": "fsm", "reduction": "vsharp", "stride": 4},
    "flux": {"law": "lwr"},
    "delta": 1e-7,
    "output": {"snapshot_times": [0.0, 0.5, 1.0, 1.5, 2.0, 3.0]},
}

_CORRIDOR2D_MICRO = {
    "name": "corridor2d_micro",
    "model": "micro",
    "domain": {"x": [0.0, 1.0], "y": [0.0, 0.5], "exits": [[[0.0, 0.0], [0.0, 0.5]], [[1.0, 0.0], [1.0, 0.5]]]},
    "resolution": {"desk": [80, 40], "fine": [200, 100]},
    "initial": [{"x": [0.0, 0.3], "value": 0.85}, {"x": [0.6, 1.0], "value": 0.25}],
    "vision": 0.25,
    "cost": {"c_max": 1e3},
    "wall": {"enabled": True, "width": 0.025, "epsilon": 0.025, "cap_density": 0.975},
    "kernel": {"kind": "bump", "parameter": 0.05},
    "projection": {"ell": 0.05, "k": 25.0},
    "time": {"dt_cap": 1e-2, "t_max": 1.5},
    "solver": {"solver": "fsm", "reduction": "vsharp", "stride": 4},
    "flux": {"law": "lwr"},
    "micro": {"n_particles": 500, "sigma": 0.05, "dt": 1e-2},
    "seed": 12345,
}

PRESETS = {"corridor1d": _CORRIDOR1D, "corridor2d_macro": _CORRIDOR2D_MACRO, "corridor2d_micro": _CORRIDOR2D_MICRO}


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ScenarioError([("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")])
    return json.loads(json.dumps(PRESETS[name]))


def preset(name: str, **overrides) -> Scenario:
    """Validated preset with nested dict overrides."""
    return parse_scenario(_merge(preset_dict(name), overrides))


def dump_preset(name: str) -> str:
    return preset(name).model_dump_json(indent=2)


def initial_density_1d(grid: Grid) -> np.ndarray:
    """Cell averages of the two-block 1D corridor data."""
    return preset("corridor1d").initial_density(grid)


def initial_density_2d(grid: Grid) -> np.ndarray:
    """Cell averages of the non-symmetric 2D corridor data."""
    return preset("corridor2d_macro").initial_density(grid)


def density_at(s: Scenario, x) -> float:
    """Pointwise value of the block data (closed blocks, later blocks win)."""
    x = np.atleast_1d(np.asarray(x, float))
    val = 0.0
    for box, v in s.block_boxes():
        if all(a - 1e-12 <= xi <= b + 1e-12 for xi, (a, b) in zip(x, box)):
            val = v
    return val
