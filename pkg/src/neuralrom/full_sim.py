"""Full-space implicit FEM integrator used to produce training trajectories.

Each time step minimizes the incremental potential

    E(u) = sum_i m_i/(2 h^2) |u_i - u_pred,i|^2 + sum_t vol_t psi(F_t(u))

over the free vertices by mass-preconditioned gradient descent with a halving
backtrack, where u_pred is the explicit predictor built from the previous
state and external forces. Vertices carrying a prescribed velocity are removed
from the descent and advanced kinematically. An optional infinite-friction
collision plane contributes a normal penalty force and zeroes the tangential
velocity of penetrating vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import dataset as datasetmod
from .errors import DivergenceError, ValidationError
from .material import Material, energy_density, energy_gradient
from .mesh import TetMesh, VertexSelector, select_vertices, tet_volumes


@dataclass(frozen=True)
class FullState:
    """Per-vertex displacements u (m), velocities v (m/s), and time t (s)."""

    u: NDArray[np.float64]
    v: NDArray[np.float64]
    t: float = 0.0

    def __post_init__(self):
        u = np.ascontiguousarray(np.asarray(self.u, dtype=np.float64))
        v = np.ascontiguousarray(np.asarray(self.v, dtype=np.float64))
        if u.shape != v.shape or u.ndim != 2 or u.shape[1] != 3:
            raise ValidationError(f"state arrays must both be (n, 3), got {u.shape} / {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValidationError("state contains non-finite entries")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @staticmethod
    def rest(mesh: TetMesh) -> "FullState":
        z = np.zeros((mesh.n_vertices, 3))
        return FullState(u=z, v=z.copy(), t=0.0)


@dataclass(frozen=True)
class CollisionPlane:
    """Infinite penalty plane with infinite friction.

    ``stiffness`` of None selects the default 1e4 * E / L with L the mesh
    bounding-box diagonal.
    """

    point: tuple[float, float, float]
    normal: tuple[float, float, float]
    stiffness: float | None = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValidationError("collision plane normal must have unit length")

    def resolve_stiffness(self, mat: Material, mesh: TetMesh) -> float:
        if self.stiffness is not None:
            return float(self.stiffness)
        lo, hi = mesh.bounding_box()
        diag = float(np.linalg.norm(hi - lo))
        return 1e4 * mat.youngs_modulus / max(diag, 1e-12)


@dataclass(frozen=True)
class LoadCase:
    """Gravity, prescribed-velocity constraints, point forces, collision plane."""

    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    prescribed: tuple[tuple[VertexSelector, tuple[float, float, float]], ...] = ()
    point_forces: tuple[tuple[int, tuple[float, float, float]], ...] = ()
    collision_plane: CollisionPlane | None = None

    def dirichlet_velocities(self) -> dict[str, NDArray[np.float64]]:
        """tag -> velocity map for constraints selected by dirichlet tag."""
        out = {}
        for sel, vel in self.prescribed:
            if sel.kind == "tag":
                out[sel.tag] = np.asarray(vel, dtype=np.float64)
        return out


@dataclass(frozen=True)
class IntegratorConfig:
    """Time step h plus the descent knobs of the optimization integrator."""

    h: float
    max_iterations: int = 50
    step_size: float = 0.5
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.h <= 0:
            raise ValidationError("time step must be positive")
        if self.max_iterations < 1:
            raise ValidationError("need at least one descent iteration")


def lumped_mass(mesh: TetMesh) -> NDArray[np.float64]:
    """Per-vertex masses: each tet spreads rho*vol equally over its corners."""
    vols = tet_volumes(mesh)
    masses = np.zeros(mesh.n_vertices)
    np.add.at(masses, mesh.tets.ravel(), np.repeat(mesh.density * vols / 4.0, 4))
    return masses


def _fem_cache(mesh: TetMesh):
    cached = getattr(mesh, "_fem_cache", None)
    if cached is None:
        vols = tet_volumes(mesh)
        edges = mesh.vertices[mesh.tets[:, 1:]] - mesh.vertices[mesh.tets[:, :1]]
        dm = edges.transpose(0, 2, 1)  # columns are edge vectors
        dm_inv = np.linalg.inv(dm)
        cached = (vols, dm_inv, lumped_mass(mesh))
        object.__setattr__(mesh, "_fem_cache", cached)
    return cached


def deformation_gradients(mesh: TetMesh, u: NDArray[np.float64]) -> NDArray[np.float64]:
    """Per-tet F = I + Ds(u) Dm^-1 for linear tets."""
    _, dm_inv, _ = _fem_cache(mesh)
    du = u[mesh.tets[:, 1:]] - u[mesh.tets[:, :1]]
    return np.eye(3) + np.einsum("tji,tik->tjk", du.transpose(0, 2, 1), dm_inv)


def elastic_energy(mesh: TetMesh, mat: Material, u: NDArray[np.float64]) -> float:
    vols, _, _ = _fem_cache(mesh)
    return float(np.dot(vols, energy_density(mat, deformation_gradients(mesh, u))))


def elastic_forces(mesh: TetMesh, mat: Material, u: NDArray[np.float64]) -> NDArray[np.float64]:
    """Negative gradient of the elastic energy w.r.t. vertex displacements."""
    vols, dm_inv, _ = _fem_cache(mesh)
    P = energy_gradient(mat, deformation_gradients(mesh, u))
    corner = np.einsum("t,tij,tkj->tik", vols, P, dm_inv)  # d E / d u_c, c = 1..3
    grad = np.zeros_like(u)
    np.add.at(grad, mesh.tets[:, 1:].ravel(), corner.transpose(0, 2, 1).reshape(-1, 3))
    np.add.at(grad, mesh.tets[:, 0], -corner.sum(axis=2))
    return -grad


def _incremental_potential(mesh, mat, u, u_pred, masses, free, h) -> float:
    d = (u - u_pred)[free]
    inertia = 0.5 * np.dot(masses[free], np.einsum("ij,ij->i", d, d)) / h**2
    return inertia + elastic_energy(mesh, mat, u)


def full_step(
    mesh: TetMesh,
    mat: Material,
    state: FullState,
    load: LoadCase,
    cfg: IntegratorConfig,
    energy_trace: list | None = None,
) -> FullState:
    """Advance one implicit step; returns the new state.

    ``energy_trace``, when given, receives the incremental-potential value of
    every accepted iterate (non-increasing by construction).

    Raises:
        DivergenceError: the descent produced a non-finite energy.
    """
    n = mesh.n_vertices
    if len(state.u) != n:
        raise ValidationError("state size does not match mesh")
    _, _, masses = _fem_cache(mesh)
    h = cfg.h

    dirichlet = np.zeros(n, dtype=bool)
    v_presc = np.zeros((n, 3))
    for sel, vel in load.prescribed:
        idx = select_vertices(mesh, sel)
        dirichlet[idx] = True
        v_presc[idx] = np.asarray(vel, dtype=np.float64)
    free = ~dirichlet

    v_work = state.v.copy()
    f_ext = masses[:, None] * np.asarray(load.gravity, dtype=np.float64)
    for vi, force in load.point_forces:
        f_ext[vi] += np.asarray(force, dtype=np.float64)

    plane = load.collision_plane
    if plane is not None:
        normal = np.asarray(plane.normal, dtype=np.float64)
        depth = (mesh.vertices + state.u - np.asarray(plane.point)) @ normal
        pen = depth < 0.0
        if np.any(pen):
            k = plane.resolve_stiffness(mat, mesh)
            f_ext[pen] += (-k * depth[pen])[:, None] * normal
            # infinite friction: keep only the normal velocity component
            v_work[pen] = np.outer(v_work[pen] @ normal, normal)

    u_pred = state.u + h * v_work + h**2 * f_ext / masses[:, None]

    u = state.u.copy()
    u[dirichlet] += h * v_presc[dirichlet]

    energy = _incremental_potential(mesh, mat, u, u_pred, masses, free, h)
    if not np.isfinite(energy):
        raise DivergenceError("non-finite energy at descent start", iteration=0)
    if energy_trace is not None:
        energy_trace.append(energy)

    scale = cfg.step_size * h**2 / masses[:, None]
    for it in range(cfg.max_iterations):
        grad = masses[:, None] * (u - u_pred) / h**2 - elastic_forces(mesh, mat, u)
        grad[dirichlet] = 0.0
        step = scale * grad
        gnorm = np.abs(step).max() if step.size else 0.0
        if gnorm <= cfg.tolerance * (1.0 + np.abs(u).max()):
            break

        beta = 1.0
        accepted = False
        for _ in range(40):
            trial = u - beta * step
            e_trial = _incremental_potential(mesh, mat, trial, u_pred, masses, free, h)
            if not np.isfinite(e_trial):
                raise DivergenceError("non-finite energy during descent", iteration=it)
            if e_trial <= energy:
                u, energy, accepted = trial, e_trial, True
                if energy_trace is not None:
                    energy_trace.append(energy)
                break
            beta *= 0.5
        if not accepted:
            break  # no decrease possible at the smallest step: converged/stalled

    v_new = (u - state.u) / h
    v_new[dirichlet] = v_presc[dirichlet]
    return FullState(u=u, v=v_new, t=state.t + h)


def run_trajectory(
    mesh: TetMesh,
    mat: Material,
    load: LoadCase,
    cfg: IntegratorConfig,
    steps: int,
    snapshot_every: int,
    samples_per_frame: int | None = None,
    seed: int = 0,
    mesh_id: str = "",
) -> datasetmod.SnapshotSet:
    """Run ``steps`` implicit steps, sampling a frame every ``snapshot_every``.

    ``samples_per_frame`` of None keeps every vertex. Snapshots land at steps
    snapshot_every, 2*snapshot_every, ...; sampling is deterministic per seed.
    """
    if steps < 1:
        raise ValidationError("need at least one step")
    n_samples = mesh.n_vertices if samples_per_frame is None else samples_per_frame
    state = FullState.rest(mesh)
    frames = []
    for step in range(1, steps + 1):
        state = full_step(mesh, mat, state, load, cfg)
        if step % snapshot_every == 0:
            frames.append(
                datasetmod.sample_frame(
                    mesh, state, n_samples, seed, index=len(frames), mesh_id=mesh_id
                )
            )
    lo, hi = mesh.bounding_box()
    meta = {
        "mesh_ids": [mesh_id],
        "seed": seed,
        "bbox": [lo.tolist(), hi.tolist()],
    }
    return datasetmod.SnapshotSet(frames=frames, cardinality=n_samples, metadata=meta)
