import json

import numpy as np
import pytest

from neuralrom import scenario as scn
from neuralrom.errors import FormatError, ValidationError
from neuralrom.mesh import VertexSelector, select_vertices


def write_scenario(tmp_path, **overrides):
    doc = {
        "name": "cube_compression",
        "meshes": [
            {
                "id": "cube",
                "box": {"lo": [-0.5, -0.5, -0.5], "hi": [0.5, 0.5, 0.5], "resolution": [3, 3, 3]},
                "density": 1000.0,
            }
        ],
        "material": {"youngs_modulus": 1e5, "poisson_ratio": 0.25},
        "load": {
            "gravity": [0.0, 0.0, 0.0],
            "prescribed": [
                {
                    "select": {"halfspace": {"axis": "y", "op": "ge", "value": 0.45}},
                    "velocity": [0.0, -2.0, 0.0],
                    "tag": "top",
                },
                {
                    "select": {"halfspace": {"axis": "y", "op": "le", "value": -0.45}},
                    "velocity": [0.0, 0.0, 0.0],
                    "tag": "bottom",
                },
            ],
        },
        "integrator": {"h": 0.005, "max_iterations": 10, "step_size": 0.5, "tolerance": 1e-8},
        "solver": {"max_iterations": 10},
        "steps": 10,
        "snapshot_every": 2,
        "samples_per_frame": 32,
        "cubature_samples": 20,
        "seed": 7,
    }
    doc.update(overrides)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc))
    return path


class TestLoadScenario:
    def test_happy_path(self, tmp_path):
        s = scn.load_scenario(write_scenario(tmp_path))
        assert s.name == "cube_compression"
        assert s.first_mesh.n_vertices == 64
        assert s.material.mu == pytest.approx(4e4)
        assert s.integrator.h == 0.005
        assert s.steps == 10
        assert s.seed == 7

    def test_prescribed_becomes_tags(self, tmp_path):
        s = scn.load_scenario(write_scenario(tmp_path))
        mesh = s.first_mesh
        top = select_vertices(mesh, VertexSelector.by_tag("top"))
        expected = np.nonzero(mesh.vertices[:, 1] >= 0.45)[0]
        assert np.array_equal(top, expected)
        vels = s.load.dirichlet_velocities()
        assert np.array_equal(vels["top"], [0.0, -2.0, 0.0])
        assert np.array_equal(vels["bottom"], [0.0, 0.0, 0.0])

    def test_schema_violation(self, tmp_path):
        path = write_scenario(tmp_path, material={"youngs_modulus": 1e5})
        with pytest.raises(ValidationError, match="schema"):
            scn.load_scenario(path)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(FormatError, match="invalid JSON"):
            scn.load_scenario(path)

    def test_duplicate_mesh_id(self, tmp_path):
        box = {"lo": [0, 0, 0], "hi": [1, 1, 1], "resolution": [1, 1, 1]}
        path = write_scenario(
            tmp_path, meshes=[{"id": "a", "box": box}, {"id": "a", "box": box}]
        )
        with pytest.raises(ValidationError, match="duplicate"):
            scn.load_scenario(path)

    def test_multi_mesh(self, tmp_path):
        box = {"lo": [-0.5, -0.5, -0.5], "hi": [0.5, 0.5, 0.5], "resolution": [2, 2, 2]}
        path = write_scenario(
            tmp_path,
            meshes=[
                {"id": "a", "box": box},
                {"id": "b", "box": dict(box, resolution=[3, 2, 2])},
            ],
        )
        s = scn.load_scenario(path)
        assert s.mesh_order == ["a", "b"]
        assert s.meshes["b"].n_vertices == 36


class TestEvents:
    def test_load_and_sort(self, tmp_path):
        path = tmp_path / "events.json"
        path.write_text(
            json.dumps(
                {
                    "events": [
                        {"step": 9, "swap_mesh": "other"},
                        {"step": 3, "excise": {"sphere": {"center": [0, 0, 0], "radius": 0.2}}},
                    ]
                }
            )
        )
        events = scn.load_events(path)
        assert [e.step for e in events] == [3, 9]
        assert events[0].region.kind == "sphere"
        assert events[1].swap_mesh == "other"

    def test_event_needs_exactly_one_action(self, tmp_path):
        path = tmp_path / "events.json"
        path.write_text(json.dumps({"events": [{"step": 2}]}))
        with pytest.raises(ValidationError):
            scn.load_events(path)

    def test_region_kinds(self):
        r = scn.parse_region({"halfspace": {"axis": "x", "op": "lt", "value": 0.0}})
        assert r.contains(np.array([[-1.0, 0, 0], [1.0, 0, 0]])).tolist() == [True, False]
        r = scn.parse_region({"box": {"lo": [0, 0, 0], "hi": [1, 1, 1]}})
        assert r.contains(np.array([[0.5, 0.5, 0.5], [2, 0, 0]])).tolist() == [True, False]
