"""Online subspace dynamics over a swappable cubature mesh.

An implicit step minimizes the cubature approximation of the incremental
potential

    E(q) = sum_i m_i/(2 h^2) |W(X_i) q - u_pred,i|^2 + w_i psi(F_i(q))

over the latent configuration q. Each descent iteration evaluates a
full-space increment at every cubature point and projects it back to the
latent space by the weighted least squares of the basis blocks; the normal
matrix is assembled and Cholesky-factored once per cubature scheme and reused
by backsubstitution.

Cubature points are mesh vertices: a random seed set plus every vertex
incident to it. Hosting each point in a tet incident to a seed guarantees all
four corners of any host tet are themselves cubature points, which keeps the
scattered elastic gradient exact for the energy above.

Basis blocks W(X_i) are cached per reference-position bit pattern and carried
across remesh events, so a swap or excision evaluates the network only at
genuinely new points. The latent state is never touched by a remesh.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .errors import (
    CubatureDegeneracyError,
    DivergenceError,
    StaleFactorError,
    ValidationError,
)
from .full_sim import LoadCase
from .material import Material, energy_density, energy_gradient, energy_hessian
from .mesh import TetMesh, excise_tets, incident_tets

TETHER_STIFFNESS_SCALE = 1e3  # k_bc = scale * m_i / h^2 at constrained points


@dataclass
class ReducedState:
    """Latent configuration q, its predecessor, the step size, and sim time."""

    q: NDArray[np.float64]
    q_prev: NDArray[np.float64]
    h: float
    t: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.q_prev = np.asarray(self.q_prev, dtype=np.float64)
        if self.q.shape != self.q_prev.shape or self.q.ndim != 1:
            raise ValidationError("latent vectors must be 1-D and equal length")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.q_prev))):
            raise ValidationError("latent state contains non-finite entries")
        if self.h <= 0:
            raise ValidationError("step size must be positive")

    @staticmethod
    def rest(r: int, h: float) -> "ReducedState":
        return ReducedState(q=np.zeros(r), q_prev=np.zeros(r), h=h)

    @property
    def qdot(self) -> NDArray[np.float64]:
        return (self.q - self.q_prev) / self.h


@dataclass(frozen=True)
class SolverConfig:
    """Descent knobs for one reduced step."""

    step_size: float = 0.5
    max_iterations: int = 50
    tolerance: float = 1e-6
    backtrack_factor: float = 0.5

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValidationError("descent step size must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValidationError("backtrack factor must lie in (0, 1)")


@dataclass
class Region:
    """Spatial predicate used to excise tets (tested on tet centroids)."""

    kind: str  # "halfspace" | "sphere" | "box"
    axis: str | None = None
    op: str | None = None
    value: float | None = None
    center: tuple[float, float, float] | None = None
    radius: float | None = None
    lo: tuple[float, float, float] | None = None
    hi: tuple[float, float, float] | None = None

    def contains(self, pts: NDArray[np.float64]) -> NDArray[np.bool_]:
        pts = np.atleast_2d(pts)
        if self.kind == "halfspace":
            coords = pts[:, {"x": 0, "y": 1, "z": 2}[self.axis]]
            return {
                "ge": coords >= self.value,
                "le": coords <= self.value,
                "gt": coords > self.value,
                "lt": coords < self.value,
            }[self.op]
        if self.kind == "sphere":
            return np.linalg.norm(pts - np.asarray(self.center), axis=1) <= self.radius
        if self.kind == "box":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            return np.all((pts >= lo) & (pts <= hi), axis=1)
        raise ValidationError(f"unknown region kind {self.kind!r}")


@dataclass
class RemeshEvent:
    """Replace the cubature mesh or excise a region of it; q is untouched."""

    new_mesh: TetMesh | None = None
    excise: Region | None = None
    time: float = 0.0

    def __post_init__(self):
        if (self.new_mesh is None) == (self.excise is None):
            raise ValidationError("a remesh event carries either a new mesh or an excision region")


@dataclass
class BuildStats:
    """One-time costs and cache accounting of a cubature build."""

    n_points: int = 0
    n_new_evaluations: int = 0
    n_cache_hits: int = 0
    selection_seconds: float = 0.0
    cache_fill_seconds: float = 0.0


@dataclass
class CubatureScheme:
    """Sampled cubature points with cached basis blocks and a reusable factor."""

    mesh: TetMesh
    r: int
    sample_count: int  # the m of the sampling rule, kept for remeshes
    point_vertices: NDArray[np.int64]
    points: NDArray[np.float64]  # (N, 3) reference positions
    weights: NDArray[np.float64]  # equal, Vol(mesh)/N
    masses: NDArray[np.float64]  # rho * w_i
    host_tets: NDArray[np.int64]
    corner_points: NDArray[np.int64]  # (N, 4) cubature-point index per host corner
    dm_inv: NDArray[np.float64]  # (N, 3, 3) host-tet reference shape inverse
    W: NDArray[np.float64]  # (N, 3, r) cached basis blocks
    tags: tuple[str | None, ...]
    gram: NDArray[np.float64]
    cache: dict[bytes, NDArray[np.float64]] = field(repr=False, default_factory=dict)
    stats: BuildStats = field(default_factory=BuildStats)
    _chol: tuple = field(repr=False, default=None)
    _factor_valid: bool = True

    @property
    def n_points(self) -> int:
        return len(self.points)

    def displacements(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        """u_i = W(X_i) q at every cubature point."""
        return self.W @ q

    def invalidate(self) -> None:
        self._factor_valid = False

    def verify_cache(self, basis) -> bool:
        """Bitwise cache coherence against fresh per-point evaluations."""
        for i in range(self.n_points):
            if not np.array_equal(self.W[i], basis.evaluate_invariant(self.points[i])):
                return False
        return True


@dataclass
class PolynomialBasis:
    """Analytic affine displacement modes, the classical-ROM test oracle.

    Columns: 3 rigid translations, then the 9 linear modes X_a e_b in
    lexicographic (a, b) order, truncated to r <= 12.
    """

    r: int

    def __post_init__(self):
        if not 1 <= self.r <= 12:
            raise ValidationError("polynomial basis supports 1 <= r <= 12")

    def evaluate(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        pts = X.reshape(-1, 3)
        n = len(pts)
        W = np.zeros((n, 3, 12))
        W[:, :, :3] = np.eye(3)
        for a in range(3):
            for b in range(3):
                W[:, b, 3 + 3 * a + b] = pts[:, a]
        W = W[:, :, : self.r]
        return W[0] if single else W

    evaluate_invariant = evaluate


def sample_cubature(
    mesh: TetMesh,
    m: int,
    seed: int,
    basis,
    cache: dict[bytes, NDArray[np.float64]] | None = None,
) -> CubatureScheme:
    """Equiweighted cubature: m random vertices plus their one-ring closure.

    Host tets are drawn from tets incident to the seed vertices, so every
    host corner is itself a cubature point. ``cache`` (bit pattern of the
    reference position -> W block) is consulted before evaluating the basis
    and carried into the returned scheme.

    Raises:
        CubatureDegeneracyError: the basis blocks on this sample do not span
            the latent space; retry with a larger m.
    """
    if m < 1:
        raise ValidationError("need at least one seed vertex")
    t0 = time.perf_counter()
    n_verts = mesh.n_vertices
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    seeds = np.sort(rng.choice(n_verts, size=min(m, n_verts), replace=False))

    inc = incident_tets(mesh)
    candidate = sorted({t for s in seeds for t in inc[s]})
    candidate_set = set(candidate)
    point_vertices = np.unique(mesh.tets[candidate].ravel())
    index_of = np.full(n_verts, -1, dtype=np.int64)
    index_of[point_vertices] = np.arange(len(point_vertices))

    # a uniformly random host among each point's candidate tets: a
    # deterministic (first-incident) choice systematically favors one lattice
    # orientation and biases the elastic quadrature
    host = np.empty(len(point_vertices), dtype=np.int64)
    for p, v in enumerate(point_vertices):
        options = [t for t in inc[v] if t in candidate_set]
        host[p] = options[rng.integers(len(options))]

    points = mesh.vertices[point_vertices]
    n = len(points)
    weights = np.full(n, mesh.volume() / n)
    masses = mesh.density * weights
    corner_points = index_of[mesh.tets[host]]
    edges = mesh.vertices[mesh.tets[host][:, 1:]] - mesh.vertices[mesh.tets[host][:, :1]]
    dm_inv = np.linalg.inv(edges.transpose(0, 2, 1))
    tags = tuple(mesh.dirichlet_tags[v] for v in point_vertices)
    selection_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    cache = dict(cache) if cache else {}
    W = np.empty((n, 3, basis.r))
    missing = []
    for i in range(n):
        hit = cache.get(points[i].tobytes())
        if hit is None:
            missing.append(i)
        else:
            W[i] = hit
    if missing:
        fresh = basis.evaluate_invariant(points[missing])
        for j, i in enumerate(missing):
            W[i] = fresh[j]
            cache[points[i].tobytes()] = fresh[j]
    cache_fill_seconds = time.perf_counter() - t1

    gram = np.einsum("n,nij,nik->jk", weights, W, W)
    try:
        chol = scipy.linalg.cho_factor(gram, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise CubatureDegeneracyError(
            f"cubature Gram matrix is not positive definite on this sample "
            f"({n} points, r={basis.r}): {exc}; try a larger sample count m"
        ) from None

    return CubatureScheme(
        mesh=mesh,
        r=basis.r,
        sample_count=m,
        point_vertices=point_vertices,
        points=points,
        weights=weights,
        masses=masses,
        host_tets=host,
        corner_points=corner_points,
        dm_inv=dm_inv,
        W=W,
        tags=tags,
        gram=gram,
        cache=cache,
        stats=BuildStats(
            n_points=n,
            n_new_evaluations=len(missing),
            n_cache_hits=n - len(missing),
            selection_seconds=selection_seconds,
            cache_fill_seconds=cache_fill_seconds,
        ),
        _chol=chol,
    )


def predictor(
    scheme: CubatureScheme, state: ReducedState, f_ext: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Explicit per-point predictor u_pred = W q + h W qdot + h^2 f_ext / m."""
    u = scheme.W @ state.q
    v = scheme.W @ state.qdot
    return u + state.h * v + state.h**2 * f_ext / scheme.masses[:, None]


def _point_deformation(scheme: CubatureScheme, u_points: NDArray[np.float64]):
    """Per-point F built from the host tet's four corner displacements."""
    uc = u_points[scheme.corner_points]  # (N, 4, 3)
    ds = (uc[:, 1:] - uc[:, :1]).transpose(0, 2, 1)
    return np.eye(3) + ds @ scheme.dm_inv


def reduced_energy(
    scheme: CubatureScheme,
    q: NDArray[np.float64],
    u_pred: NDArray[np.float64],
    mat: Material,
    h: float,
    tether_targets: NDArray[np.float64] | None = None,
    tether_stiffness: NDArray[np.float64] | None = None,
) -> float:
    """Cubature incremental potential at q (inertia + elastic [+ tethers])."""
    u = scheme.W @ q
    d = u - u_pred
    inertia = 0.5 * np.dot(scheme.masses / h**2, np.einsum("ij,ij->i", d, d))
    F = _point_deformation(scheme, u)
    elastic = float(np.dot(scheme.weights, energy_density(mat, F)))
    total = inertia + elastic
    if tether_targets is not None:
        dt_ = u - tether_targets
        total += 0.5 * float(np.dot(tether_stiffness, np.einsum("ij,ij->i", dt_, dt_)))
    return total


def _elastic_point_forces(
    scheme: CubatureScheme, u: NDArray[np.float64], mat: Material
) -> NDArray[np.float64]:
    """w-weighted elastic gradient scattered onto the cubature points.

    Each host tet's corner stresses land on the corners' own cubature points
    (all corners are points by construction), so sum_i W_i^T accum_i is the
    exact d/dq of the cubature elastic energy.
    """
    F = _point_deformation(scheme, u)
    P = energy_gradient(mat, F)
    corner = np.einsum("nij,nkj->nik", P, scheme.dm_inv)  # d psi / d u_c, c = 1..3
    accum = np.zeros_like(u)
    np.add.at(
        accum,
        scheme.corner_points[:, 1:].ravel(),
        (scheme.weights[:, None, None] * corner.transpose(0, 2, 1)).reshape(-1, 3),
    )
    np.add.at(accum, scheme.corner_points[:, 0], -scheme.weights[:, None] * corner.sum(axis=2))
    return accum


def _density_gradients(
    scheme: CubatureScheme,
    q: NDArray[np.float64],
    u_pred: NDArray[np.float64],
    mat: Material,
    h: float,
    tether_targets=None,
    tether_stiffness=None,
) -> NDArray[np.float64]:
    """Per-point energy-density gradients g_i with sum_i w_i W_i^T g_i = dE/dq."""
    u = scheme.W @ q
    rho = scheme.mesh.density
    g = (rho / h**2) * (u - u_pred)
    g += _elastic_point_forces(scheme, u, mat) / scheme.weights[:, None]
    if tether_targets is not None:
        g += (tether_stiffness / scheme.weights)[:, None] * (u - tether_targets)
    return g


def descent_increment(
    scheme: CubatureScheme,
    q: NDArray[np.float64],
    u_pred: NDArray[np.float64],
    mat: Material,
    h: float,
    alpha: float,
    tether_targets=None,
    tether_stiffness=None,
) -> NDArray[np.float64]:
    """Per-point increment: -alpha along the energy-density gradient.

    The dimensionless step alpha is scaled by h^2/rho so the inertia part of
    the increment is exactly -alpha (u - u_pred); with elasticity off and
    alpha = 1, one projection step recovers the predictor.
    """
    g = _density_gradients(scheme, q, u_pred, mat, h, tether_targets, tether_stiffness)
    return -(alpha * h**2 / scheme.mesh.density) * g


def project(scheme: CubatureScheme, du: NDArray[np.float64]) -> NDArray[np.float64]:
    """Weighted least-squares fit of the latent increment via backsubstitution.

    Solves G dq = sum_i w_i W_i^T du_i with the prefactored Cholesky of G.

    Raises:
        StaleFactorError: the scheme was superseded by a remesh.
    """
    if not scheme._factor_valid:
        raise StaleFactorError(
            "this cubature scheme was invalidated by a remesh; rebuild before projecting"
        )
    rhs = np.einsum("n,nij,ni->j", scheme.weights, scheme.W, du)
    return scipy.linalg.cho_solve(scheme._chol, rhs)


def reduced_step(
    scheme: CubatureScheme,
    state: ReducedState,
    loads: LoadCase,
    mat: Material,
    cfg: SolverConfig,
    extra_forces: NDArray[np.float64] | None = None,
    energy_trace: list | None = None,
) -> ReducedState:
    """Advance one implicit step in the latent space.

    ``extra_forces`` is an optional (N, 3) per-cubature-point force array
    (interactive tugging). Collision penalties act through the predictor as
    in the full-space integrator; prescribed-velocity points are pulled by
    quadratic tethers toward their prescribed trajectories.

    Raises:
        DivergenceError: non-finite energy during descent.
    """
    h = state.h
    if len(state.q) != scheme.r:
        raise ValidationError("latent state dimension does not match the scheme")

    f_ext = scheme.masses[:, None] * np.asarray(loads.gravity, dtype=np.float64)
    if extra_forces is not None:
        f_ext = f_ext + extra_forces

    u_now = scheme.W @ state.q
    v_now = scheme.W @ state.qdot

    plane = loads.collision_plane
    if plane is not None:
        normal = np.asarray(plane.normal, dtype=np.float64)
        depth = (scheme.points + u_now - np.asarray(plane.point)) @ normal
        pen = depth < 0.0
        if np.any(pen):
            k = plane.resolve_stiffness(mat, scheme.mesh)
            f_ext[pen] += (-k * depth[pen])[:, None] * normal
            v_now[pen] = np.outer(v_now[pen] @ normal, normal)

    u_pred = u_now + h * v_now + h**2 * f_ext / scheme.masses[:, None]

    tether_targets = None
    tether_stiffness = None
    velocities = loads.dirichlet_velocities()
    if velocities:
        constrained = np.array([t is not None and t in velocities for t in scheme.tags])
        if np.any(constrained):
            tether_targets = u_now.copy()
            t_next = state.t + h
            for tag, vel in velocities.items():
                mask = np.array([tg == tag for tg in scheme.tags])
                tether_targets[mask] = t_next * vel
            tether_stiffness = np.where(
                constrained, TETHER_STIFFNESS_SCALE * scheme.masses / h**2, 0.0
            )

    def energy(qv):
        return reduced_energy(scheme, qv, u_pred, mat, h, tether_targets, tether_stiffness)

    # tether-aware per-point step scaling: absorbs the stiff quadratic into
    # the preconditioner so constrained points do not throttle the descent
    if tether_stiffness is not None:
        precondition = 1.0 / (1.0 + tether_stiffness * h**2 / scheme.masses)
    else:
        precondition = None

    # initial guess: project the explicit prediction
    dq0 = project(scheme, u_pred - u_now)
    q = state.q + dq0
    e = energy(q)
    if not np.isfinite(e):
        raise DivergenceError("non-finite energy at initial guess", iteration=0)
    if energy_trace is not None:
        energy_trace.append(e)

    for it in range(cfg.max_iterations):
        du = descent_increment(
            scheme, q, u_pred, mat, h, cfg.step_size, tether_targets, tether_stiffness
        )
        if precondition is not None:
            du = precondition[:, None] * du
        dq = project(scheme, du)
        if np.abs(dq).max() <= cfg.tolerance * (1.0 + np.abs(q).max()):
            break
        beta = 1.0
        accepted = False
        for _ in range(40):
            trial = q + beta * dq
            e_trial = energy(trial)
            if not np.isfinite(e_trial):
                raise DivergenceError("non-finite energy during descent", iteration=it)
            if e_trial <= e:
                q, e, accepted = trial, e_trial, True
                if energy_trace is not None:
                    energy_trace.append(e)
                break
            beta *= cfg.backtrack_factor
        if not accepted:
            break

    return ReducedState(q=q, q_prev=state.q.copy(), h=h, t=state.t + h)


def apply_remesh(
    scheme: CubatureScheme, event: RemeshEvent, basis, seed: int
) -> CubatureScheme:
    """Resample cubature on the event's mesh, reusing every cached W block.

    The previous scheme's factorization is invalidated. The latent state is
    not part of the scheme and is untouched by construction.
    """
    if event.new_mesh is not None:
        new_mesh = event.new_mesh
    else:
        centroids = scheme.mesh.vertices[scheme.mesh.tets].mean(axis=1)
        drop = event.excise.contains(centroids)
        if not np.any(drop):
            new_mesh = scheme.mesh
        else:
            new_mesh = excise_tets(scheme.mesh, drop)
    new_scheme = sample_cubature(new_mesh, scheme.sample_count, seed, basis, cache=scheme.cache)
    scheme.invalidate()
    return new_scheme


def elastic_latent_gradient(
    scheme: CubatureScheme, q: NDArray[np.float64], mat: Material
) -> NDArray[np.float64]:
    """Exact d/dq of the cubature elastic energy sum_i w_i psi(F_i(q))."""
    accum = _elastic_point_forces(scheme, scheme.W @ q, mat)
    return np.einsum("nij,ni->j", scheme.W, accum)


def reduced_hessian(
    scheme: CubatureScheme, q: NDArray[np.float64], mat: Material
) -> NDArray[np.float64]:
    """Latent elastic Hessian assembled via cubature: d^2/dq^2 of the elastic sum.

    Per point the 9x9 deformation Hessian is pushed through the host-tet
    stencil onto the four corner basis blocks; symmetric by construction.
    """
    u = scheme.W @ q
    F = _point_deformation(scheme, u)
    H9 = energy_hessian(mat, F)  # (N, 9, 9)

    n = scheme.n_points
    # dF/du: (N, 9, 12) with F flattened row-major and corners stacked (c, d)
    dfdu = np.zeros((n, 9, 12))
    for a in range(3):
        for b in range(3):
            row = 3 * a + b
            dfdu[:, row, a] = -scheme.dm_inv[:, :, b].sum(axis=1)
            for c in range(1, 4):
                dfdu[:, row, 3 * c + a] = scheme.dm_inv[:, c - 1, b]

    U = scheme.W[scheme.corner_points].reshape(n, 12, scheme.r)
    K = np.einsum("nab,nbc,ncd->nad", dfdu.transpose(0, 2, 1), H9, dfdu)
    return np.einsum("n,nka,nkl,nlb->ab", scheme.weights, U, K, U)


class SurfaceDecoder:
    """Cached surface evaluation x = X + W(X) q for trajectory export."""

    def __init__(self, basis, mesh: TetMesh):
        self.mesh = mesh
        self.faces = mesh.surface_faces()
        self.surface_vertices = np.unique(self.faces)
        self._compact = np.full(mesh.n_vertices, -1, dtype=np.int64)
        self._compact[self.surface_vertices] = np.arange(len(self.surface_vertices))
        self.compact_faces = self._compact[self.faces]
        self.reference = mesh.vertices[self.surface_vertices]
        self.W = basis.evaluate(self.reference)

    def positions(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.reference + self.W @ q

    def displacements(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.W @ q
