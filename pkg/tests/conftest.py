import numpy as np
import pytest

from neuralrom import mesh as meshmod


@pytest.fixture
def unit_tet():
    verts = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    return meshmod.TetMesh(verts, np.array([[0, 1, 2, 3]]), density=1.0)


@pytest.fixture
def unit_cube():
    return meshmod.five_tet_cube(density=1.0)


@pytest.fixture
def small_grid():
    return meshmod.box_mesh(
        lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5), resolution=(3, 3, 3), density=1000.0
    )
