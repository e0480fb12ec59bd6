"""Declarative JSON scenario and event files.

A scenario bundles everything a fixture needs: one or more meshes (from disk
or procedural boxes), material constants, the load case, integrator and
reduced-solver settings, and sampling cadence. An events file scripts remesh
events (excisions or whole-mesh swaps) against step indices of a reduced run.

Both formats are schema-validated (``SCENARIO_SCHEMA``, ``EVENTS_SCHEMA``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import FormatError, ValidationError
from .full_sim import CollisionPlane, IntegratorConfig, LoadCase
from .material import Material
from .mesh import TetMesh, VertexSelector, box_mesh, load_mesh, select_vertices
from .reduced_sim import Region, SolverConfig

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

_SELECTOR = {
    "type": "object",
    "oneOf": [
        {
            "properties": {
                "halfspace": {
                    "type": "object",
                    "properties": {
                        "axis": {"enum": ["x", "y", "z"]},
                        "op": {"enum": ["ge", "le", "gt", "lt"]},
                        "value": {"type": "number"},
                    },
                    "required": ["axis", "op", "value"],
                }
            },
            "required": ["halfspace"],
        },
        {"properties": {"indices": {"type": "array", "items": {"type": "integer"}}},
         "required": ["indices"]},
        {"properties": {"tag": {"type": "string"}}, "required": ["tag"]},
    ],
}

_REGION = {
    "type": "object",
    "oneOf": [
        {"properties": {"halfspace": _SELECTOR["oneOf"][0]["properties"]["halfspace"]},
         "required": ["halfspace"]},
        {
            "properties": {
                "sphere": {
                    "type": "object",
                    "properties": {"center": _VEC3, "radius": {"type": "number"}},
                    "required": ["center", "radius"],
                }
            },
            "required": ["sphere"],
        },
        {
            "properties": {
                "box": {
                    "type": "object",
                    "properties": {"lo": _VEC3, "hi": _VEC3},
                    "required": ["lo", "hi"],
                }
            },
            "required": ["box"],
        },
    ],
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "meshes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "string"},
                    "path": {"type": "string"},
                    "box": {
                        "type": "object",
                        "properties": {
                            "lo": _VEC3,
                            "hi": _VEC3,
                            "resolution": {
                                "type": "array",
                                "items": {"type": "integer", "minimum": 1},
                                "minItems": 3,
                                "maxItems": 3,
                            },
                        },
                        "required": ["lo", "hi", "resolution"],
                    },
                    "density": {"type": "number", "exclusiveMinimum": 0},
                },
                "required": ["id"],
            },
        },
        "material": {
            "type": "object",
            "properties": {
                "youngs_modulus": {"type": "number", "minimum": 0},
                "poisson_ratio": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
            },
            "required": ["youngs_modulus", "poisson_ratio"],
        },
        "load": {
            "type": "object",
            "properties": {
                "gravity": _VEC3,
                "prescribed": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "select": _SELECTOR,
                            "velocity": _VEC3,
                            "tag": {"type": "string"},
                        },
                        "required": ["select", "velocity", "tag"],
                    },
                },
                "point_forces": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {"vertex": {"type": "integer"}, "force": _VEC3},
                        "required": ["vertex", "force"],
                    },
                },
                "collision_plane": {
                    "type": "object",
                    "properties": {
                        "point": _VEC3,
                        "normal": _VEC3,
                        "stiffness": {"type": ["number", "null"]},
                    },
                    "required": ["point", "normal"],
                },
            },
        },
        "integrator": {
            "type": "object",
            "properties": {
                "h": {"type": "number", "exclusiveMinimum": 0},
                "max_iterations": {"type": "integer", "minimum": 1},
                "step_size": {"type": "number", "exclusiveMinimum": 0},
                "tolerance": {"type": "number", "minimum": 0},
            },
            "required": ["h"],
        },
        "solver": {
            "type": "object",
            "properties": {
                "step_size": {"type": "number", "exclusiveMinimum": 0},
                "max_iterations": {"type": "integer", "minimum": 1},
                "tolerance": {"type": "number", "minimum": 0},
                "backtrack_factor": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "steps": {"type": "integer", "minimum": 1},
        "snapshot_every": {"type": "integer", "minimum": 1},
        "samples_per_frame": {"type": ["integer", "null"], "minimum": 1},
        "cubature_samples": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
    "required": ["name", "meshes", "material", "integrator", "steps"],
}

EVENTS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "step": {"type": "integer", "minimum": 1},
                    "excise": _REGION,
                    "swap_mesh": {"type": "string"},
                },
                "required": ["step"],
            },
        }
    },
    "required": ["events"],
}


@dataclass
class Scenario:
    """A validated, fully constructed fixture description."""

    name: str
    mesh_order: list[str]
    meshes: dict[str, TetMesh]
    material: Material
    load: LoadCase
    integrator: IntegratorConfig
    solver: SolverConfig
    steps: int
    snapshot_every: int = 1
    samples_per_frame: int | None = None
    cubature_samples: int = 100
    seed: int = 0

    @property
    def first_mesh(self) -> TetMesh:
        return self.meshes[self.mesh_order[0]]


def parse_selector(spec: dict) -> VertexSelector:
    if "halfspace" in spec:
        hs = spec["halfspace"]
        return VertexSelector.halfspace(hs["axis"], hs["op"], hs["value"])
    if "indices" in spec:
        return VertexSelector.by_indices(spec["indices"])
    if "tag" in spec:
        return VertexSelector.by_tag(spec["tag"])
    raise ValidationError(f"unknown selector {spec!r}")


def parse_region(spec: dict) -> Region:
    if "halfspace" in spec:
        hs = spec["halfspace"]
        return Region(kind="halfspace", axis=hs["axis"], op=hs["op"], value=hs["value"])
    if "sphere" in spec:
        sp = spec["sphere"]
        return Region(kind="sphere", center=tuple(sp["center"]), radius=sp["radius"])
    if "box" in spec:
        bx = spec["box"]
        return Region(kind="box", lo=tuple(bx["lo"]), hi=tuple(bx["hi"]))
    raise ValidationError(f"unknown region {spec!r}")


def _build_mesh(entry: dict, base_dir: Path) -> TetMesh:
    density = entry.get("density", 1000.0)
    if "path" in entry:
        return load_mesh(base_dir / entry["path"], density=density)
    if "box" in entry:
        b = entry["box"]
        return box_mesh(lo=b["lo"], hi=b["hi"], resolution=b["resolution"], density=density)
    raise ValidationError(f"mesh entry {entry.get('id')!r} needs a 'path' or a 'box'")


def load_scenario(path) -> Scenario:
    """Parse, validate, and construct a scenario from a JSON file.

    Prescribed-velocity selections are resolved once per mesh and recorded as
    dirichlet tags, so both the full-space and the reduced pipelines see the
    same constraint sets.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(raw, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"{path}: schema violation at {list(exc.absolute_path)}: {exc.message}")

    mesh_order = []
    meshes: dict[str, TetMesh] = {}
    for entry in raw["meshes"]:
        mesh_id = entry["id"]
        if mesh_id in meshes:
            raise ValidationError(f"{path}: duplicate mesh id {mesh_id!r}")
        mesh_order.append(mesh_id)
        meshes[mesh_id] = _build_mesh(entry, path.parent)

    load_raw = raw.get("load", {})
    prescribed = []
    for entry in load_raw.get("prescribed", []):
        sel = parse_selector(entry["select"])
        tag = entry["tag"]
        tagged = {}
        for mesh_id, mesh in meshes.items():
            tagged[mesh_id] = mesh.with_tags(select_vertices(mesh, sel), tag)
        meshes = tagged
        prescribed.append((VertexSelector.by_tag(tag), tuple(entry["velocity"])))

    plane = None
    if "collision_plane" in load_raw:
        cp = load_raw["collision_plane"]
        plane = CollisionPlane(
            point=tuple(cp["point"]),
            normal=tuple(cp["normal"]),
            stiffness=cp.get("stiffness"),
        )
    load = LoadCase(
        gravity=tuple(load_raw.get("gravity", (0.0, 0.0, 0.0))),
        prescribed=tuple(prescribed),
        point_forces=tuple(
            (pf["vertex"], tuple(pf["force"])) for pf in load_raw.get("point_forces", [])
        ),
        collision_plane=plane,
    )

    mat = Material(
        youngs_modulus=raw["material"]["youngs_modulus"],
        poisson_ratio=raw["material"]["poisson_ratio"],
    )
    integ = raw["integrator"]
    integrator = IntegratorConfig(
        h=integ["h"],
        max_iterations=integ.get("max_iterations", 50),
        step_size=integ.get("step_size", 0.5),
        tolerance=integ.get("tolerance", 1e-6),
    )
    solver = SolverConfig(**raw.get("solver", {}))

    return Scenario(
        name=raw["name"],
        mesh_order=mesh_order,
        meshes=meshes,
        material=mat,
        load=load,
        integrator=integrator,
        solver=solver,
        steps=raw["steps"],
        snapshot_every=raw.get("snapshot_every", 1),
        samples_per_frame=raw.get("samples_per_frame"),
        cubature_samples=raw.get("cubature_samples", 100),
        seed=raw.get("seed", 0),
    )


@dataclass
class ScriptedEvent:
    step: int
    region: Region | None = None
    swap_mesh: str | None = None


def load_events(path) -> list[ScriptedEvent]:
    """Parse and validate an events file; events are sorted by step."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(raw, EVENTS_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"{path}: schema violation at {list(exc.absolute_path)}: {exc.message}")
    events = []
    for entry in raw["events"]:
        if ("excise" in entry) == ("swap_mesh" in entry):
            raise ValidationError(f"{path}: event at step {entry['step']} needs exactly one action")
        events.append(
            ScriptedEvent(
                step=entry["step"],
                region=parse_region(entry["excise"]) if "excise" in entry else None,
                swap_mesh=entry.get("swap_mesh"),
            )
        )
    return sorted(events, key=lambda e: e.step)
