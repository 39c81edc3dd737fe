"""Run configuration: TOML schema, strict validation, and object assembly.

Unknown keys anywhere in the file are hard errors: a silently ignored typo
in a tolerance or kernel width would invalidate a verification run, so the
schema is closed.  Scheme knobs may equivalently live in a ``[transport]``
table (``solver``, ``epsilon``, ``tol``); specifying a knob in both places
is an error rather than a precedence rule.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .energy import EnergyError, InternalEnergy
from .grid import Density, Grid, GridError, load_density
from .interaction import ExternalPotential, InteractionError, InteractionSpec, Kernel
from .jko import SpeciesSystem


class ConfigError(ValueError):
    pass


def _require_keys(table: dict, allowed, required, where: str):
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(table)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


@dataclass
class RunConfig:
    grid: Grid
    energies: tuple
    interaction: InteractionSpec
    initial_specs: list
    h: float
    T: float
    solver: str = "exact1d"
    epsilon: float = None
    tol: float = None
    record_every: int = 1
    max_iter: int = None
    output_dir: str = "out"
    formats: tuple = ("csv", "json", "png")
    baseline: dict = None
    config_path: str = None

    @property
    def n_species(self) -> int:
        return len(self.energies)

    def system(self) -> SpeciesSystem:
        return SpeciesSystem(self.grid, self.energies, self.interaction)

    def initial_densities(self) -> list:
        out = []
        for idx, spec in enumerate(self.initial_specs):
            try:
                out.append(build_initial(self.grid, spec, self.config_path))
            except (GridError, EnergyError, InteractionError) as err:
                raise ConfigError(f"species[{idx}].initial: {err}") from err
        return out


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except (OSError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"{path}: {err}") from err
    try:
        return parse_config(raw, str(path))
    except (EnergyError, InteractionError, GridError) as err:
        raise ConfigError(f"{path}: {err}") from err


def parse_config(raw: dict, config_path: str = None) -> RunConfig:
    _require_keys(raw, {"grid", "species", "interaction", "scheme", "transport",
                        "output", "baseline"},
                  {"grid", "species", "scheme"}, "config")

    g = raw["grid"]
    _require_keys(g, {"lower", "upper", "cells"}, {"lower", "upper", "cells"}, "grid")
    grid = Grid(tuple(g["lower"]), tuple(g["upper"]), tuple(g["cells"]))

    species = raw["species"]
    if not isinstance(species, list) or not species:
        raise ConfigError("species: need at least one [[species]] table")
    energies = []
    initial_specs = []
    for idx, sp in enumerate(species):
        where = f"species[{idx}]"
        _require_keys(sp, {"energy", "initial", "name"}, {"energy", "initial"}, where)
        energies.append(_parse_energy(sp["energy"], f"{where}.energy"))
        initial_specs.append(_parse_initial(sp["initial"], grid, f"{where}.initial"))

    interaction = _parse_interaction(raw.get("interaction"), len(species), grid)

    sch = raw["scheme"]
    _require_keys(sch, {"h", "T", "solver", "epsilon", "tol", "record_every",
                        "max_iter"}, {"h", "T"}, "scheme")
    h = float(sch["h"])
    T = float(sch["T"])
    if h <= 0:
        raise ConfigError("scheme.h must be positive")
    if T < h:
        raise ConfigError("scheme.T must be at least h")
    knobs = {"solver": sch.get("solver"), "epsilon": sch.get("epsilon"),
             "tol": sch.get("tol")}
    if "transport" in raw:
        tr = raw["transport"]
        _require_keys(tr, {"solver", "epsilon", "tol"}, (), "transport")
        for key, val in tr.items():
            if knobs.get(key) is not None:
                raise ConfigError(f"transport.{key} conflicts with scheme.{key}")
            knobs[key] = val
    solver = knobs["solver"] or "exact1d"
    if solver not in ("exact1d", "entropic"):
        raise ConfigError(f"scheme.solver must be exact1d or entropic, got {solver!r}")
    record_every = int(sch.get("record_every", 1))
    if record_every < 1:
        raise ConfigError("scheme.record_every must be >= 1")

    out = raw.get("output", {})
    _require_keys(out, {"directory", "formats"}, (), "output")
    formats = tuple(out.get("formats", ("csv", "json", "png")))
    for fmt in formats:
        if fmt not in ("csv", "json", "png"):
            raise ConfigError(f"output.formats: unknown format {fmt!r}")

    baseline = None
    if "baseline" in raw:
        b = raw["baseline"]
        _require_keys(b, {"name", "sigma0", "t0", "radius", "steps", "l1_bound",
                          "drift_bound"}, {"name"}, "baseline")
        if b["name"] not in ("heat", "barenblatt", "gibbs"):
            raise ConfigError(f"baseline.name: unknown baseline {b['name']!r}")
        baseline = dict(b)

    return RunConfig(
        grid=grid,
        energies=tuple(energies),
        interaction=interaction,
        initial_specs=initial_specs,
        h=h,
        T=T,
        solver=solver,
        epsilon=None if knobs["epsilon"] is None else float(knobs["epsilon"]),
        tol=None if knobs["tol"] is None else float(knobs["tol"]),
        record_every=record_every,
        max_iter=None if sch.get("max_iter") is None else int(sch["max_iter"]),
        output_dir=out.get("directory", "out"),
        formats=formats,
        baseline=baseline,
        config_path=config_path,
    )


def _parse_energy(table: dict, where: str) -> InternalEnergy:
    _require_keys(table, {"kind", "m", "c", "alpha"}, {"kind"}, where)
    return InternalEnergy(
        kind=table["kind"],
        m=float(table.get("m", 1.0)),
        c=float(table.get("c", 1.0)),
        alpha=float(table.get("alpha", 1.0)),
    )


def _parse_initial(table: dict, grid: Grid, where: str) -> dict:
    _require_keys(table, {"profile", "mean", "sigma", "support", "center", "width",
                          "t0", "path"}, {"profile"}, where)
    profile = table["profile"]
    known = {"gaussian", "uniform", "bump", "barenblatt", "file"}
    if profile not in known:
        raise ConfigError(f"{where}: unknown profile {profile!r}")
    if profile == "barenblatt" and grid.dim != 1:
        raise ConfigError(f"{where}: barenblatt profile is 1-D only")
    return dict(table)


def _parse_interaction(table, l: int, grid: Grid) -> InteractionSpec:
    from .interaction import zero_interaction

    if table is None:
        return zero_interaction(l)
    _require_keys(table, {"kernels", "external"}, (), "interaction")
    kernels_raw = table.get("kernels")
    if kernels_raw is None:
        kernels = tuple((Kernel("zero"),) * l for _ in range(l))
    else:
        if len(kernels_raw) != l or any(len(row) != l for row in kernels_raw):
            raise ConfigError(f"interaction.kernels must be a {l}x{l} matrix")
        kernels = tuple(
            tuple(_parse_kernel(cell, f"interaction.kernels[{i}][{j}]")
                  for j, cell in enumerate(row))
            for i, row in enumerate(kernels_raw)
        )
    external_raw = table.get("external")
    if external_raw is None:
        external = (ExternalPotential("zero"),) * l
    else:
        if len(external_raw) != l:
            raise ConfigError(f"interaction.external must list {l} potentials")
        external = tuple(
            _parse_external(cell, grid, f"interaction.external[{i}]")
            for i, cell in enumerate(external_raw)
        )
    return InteractionSpec(kernels=kernels, external=external)


def _parse_kernel(table: dict, where: str) -> Kernel:
    _require_keys(table, {"family", "A", "sigma"}, {"family"}, where)
    return Kernel(
        family=table["family"],
        amplitude=float(table.get("A", 0.0)),
        sigma=float(table.get("sigma", 1.0)),
    )


def _parse_external(table: dict, grid: Grid, where: str) -> ExternalPotential:
    _require_keys(table, {"family", "params"}, {"family"}, where)
    params = dict(table.get("params", {}))
    family = table["family"]
    if family == "zero":
        if params:
            raise ConfigError(f"{where}: zero potential takes no params")
        return ExternalPotential("zero")
    if family == "quadratic":
        unknown = set(params) - {"radius", "center"}
        if unknown:
            raise ConfigError(f"{where}.params: unknown keys {sorted(unknown)}")
        center = tuple(params.get("center", (0.0,) * grid.dim))
        if len(center) != grid.dim:
            raise ConfigError(f"{where}.params.center must have {grid.dim} entries")
        return ExternalPotential("quadratic", radius=float(params.get("radius", 1.0)),
                                 center=center)
    raise ConfigError(f"{where}: unknown family {family!r}")


# ---------------------------------------------------------------------------
# initial-data profiles
#
# Profiles are normalized to exact unit discrete mass before Density sees
# them: quadrature drift of a sampled profile (kinked compact profiles
# especially) can exceed the constructor's renormalization window.

def build_initial(grid: Grid, spec: dict, config_path: str = None) -> Density:
    profile = spec["profile"]
    if profile == "file":
        path = Path(spec["path"])
        if not path.is_absolute() and config_path:
            path = Path(config_path).parent / path
        if not path.exists():
            raise ConfigError(f"initial file {path} does not exist")
        rho = load_density(str(path))
        grid.require_same(rho.grid)
        return rho
    if profile == "gaussian":
        mean = np.asarray(spec.get("mean", (0.0,) * grid.dim), dtype=float)
        sigma = float(spec.get("sigma", 1.0))
        if mean.shape != (grid.dim,):
            raise ConfigError(f"gaussian mean must have {grid.dim} entries")
        if sigma <= 0:
            raise ConfigError("gaussian sigma must be positive")
        q = np.sum((grid.centers - mean) ** 2, axis=-1)
        values = np.exp(-0.5 * q / sigma**2)
    elif profile == "uniform":
        support = spec.get("support")
        if support is None:
            values = np.ones(grid.shape)
        else:
            support = np.asarray(support, dtype=float).reshape(grid.dim, 2)
            values = np.ones(grid.shape)
            for axis in range(grid.dim):
                ax = grid.axes[axis]
                inside = (ax >= support[axis, 0]) & (ax <= support[axis, 1])
                shape = [1] * grid.dim
                shape[axis] = len(ax)
                values = values * inside.reshape(shape)
            if not np.any(values):
                raise ConfigError("uniform support contains no cell centers")
    elif profile == "bump":
        center = np.asarray(spec.get("center", (0.0,) * grid.dim), dtype=float)
        width = float(spec.get("width", 1.0))
        r2 = np.sum((grid.centers - center) ** 2, axis=-1) / width**2
        values = np.where(r2 < 1.0, np.exp(-1.0 / np.maximum(1.0 - r2, 1e-300)), 0.0)
    elif profile == "barenblatt":
        from .diagnostics import barenblatt_density_values

        values = barenblatt_density_values(grid, float(spec.get("t0", 0.5)), 0.0)
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    total = float(values.sum()) * grid.cell_volume
    if total <= 0 or not np.isfinite(total):
        raise ConfigError(f"profile {profile!r} has no mass on the grid")
    return Density(grid, values / total)
