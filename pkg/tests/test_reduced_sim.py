import numpy as np
import pytest
import scipy.linalg

from neuralrom import mesh as meshmod
from neuralrom import reduced_sim as rs
from neuralrom.errors import CubatureDegeneracyError, StaleFactorError
from neuralrom.full_sim import LoadCase
from neuralrom.material import Material, energy_density
from neuralrom.mesh import VertexSelector, select_vertices
from neuralrom.networks import NeuralBasis
from neuralrom.reduced_sim import (
    CubatureScheme,
    PolynomialBasis,
    RemeshEvent,
    ReducedState,
    Region,
    SolverConfig,
    apply_remesh,
    descent_increment,
    elastic_latent_gradient,
    predictor,
    project,
    reduced_energy,
    reduced_hessian,
    reduced_step,
    sample_cubature,
)

MAT = Material(youngs_modulus=1e5, poisson_ratio=0.25)


def make_scheme(mesh=None, r=4, m=None, seed=0, basis=None):
    mesh = mesh if mesh is not None else meshmod.box_mesh(
        lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5), resolution=(3, 3, 3), density=1000.0
    )
    basis = basis or NeuralBasis.create(r=r, seed=seed)
    m = m if m is not None else mesh.n_vertices
    return mesh, basis, sample_cubature(mesh, m, seed, basis)


class TestSampleCubature:
    def test_single_tet_one_ring_closure(self, unit_tet):
        basis = NeuralBasis.create(r=2, seed=0)
        scheme = sample_cubature(unit_tet, 1, seed=0, basis=basis)
        assert scheme.n_points == 4
        assert np.allclose(scheme.weights, (1.0 / 6.0) / 4.0)

    def test_saturation_all_vertices(self, small_grid):
        basis = NeuralBasis.create(r=3, seed=1)
        scheme = sample_cubature(small_grid, small_grid.n_vertices, seed=0, basis=basis)
        assert scheme.n_points == small_grid.n_vertices
        assert np.allclose(scheme.weights.sum(), small_grid.volume(), rtol=1e-12)

    def test_host_corners_are_cubature_points(self, small_grid):
        basis = NeuralBasis.create(r=3, seed=2)
        scheme = sample_cubature(small_grid, 5, seed=3, basis=basis)
        assert np.all(scheme.corner_points >= 0)
        # every host corner's vertex id is in the point set
        point_set = set(scheme.point_vertices.tolist())
        for t in scheme.host_tets:
            assert all(int(v) in point_set for v in small_grid.tets[t])

    def test_weights_sum_to_volume(self, small_grid):
        basis = NeuralBasis.create(r=3, seed=4)
        scheme = sample_cubature(small_grid, 7, seed=5, basis=basis)
        assert scheme.weights.sum() == pytest.approx(small_grid.volume(), rel=1e-12)

    def test_cache_coherence(self, small_grid):
        basis = NeuralBasis.create(r=3, seed=6)
        scheme = sample_cubature(small_grid, 6, seed=7, basis=basis)
        assert scheme.verify_cache(basis)

    def test_degenerate_sample_raises(self, unit_tet):
        # 4 points give Gram rank <= 12 < 20
        basis = NeuralBasis.create(r=20, seed=8)
        with pytest.raises(CubatureDegeneracyError, match="larger"):
            sample_cubature(unit_tet, 1, seed=0, basis=basis)

    def test_determinism(self, small_grid):
        basis = NeuralBasis.create(r=3, seed=9)
        a = sample_cubature(small_grid, 6, seed=11, basis=basis)
        b = sample_cubature(small_grid, 6, seed=11, basis=basis)
        assert np.array_equal(a.point_vertices, b.point_vertices)
        assert np.array_equal(a.W, b.W)
        assert np.array_equal(a.host_tets, b.host_tets)


class TestPredictor:
    def test_rest_predictor(self):
        _, _, scheme = make_scheme(r=3)
        state = ReducedState(q=np.full(3, 0.2), q_prev=np.full(3, 0.2), h=0.01)
        u_pred = predictor(scheme, state, np.zeros((scheme.n_points, 3)))
        assert np.allclose(u_pred, scheme.W @ state.q, atol=1e-15)

    def test_gravity_predictor(self):
        _, _, scheme = make_scheme(r=3)
        state = ReducedState.rest(3, h=0.01)
        g = np.array([0.0, -9.8, 0.0])
        u_pred = predictor(scheme, state, scheme.masses[:, None] * g)
        assert np.allclose(u_pred, 0.01**2 * g, atol=1e-15)

    def test_matches_dense_restriction(self):
        mesh, basis, scheme = make_scheme(r=4, seed=13)
        rng = np.random.default_rng(0)
        q = rng.normal(size=4)
        q_prev = rng.normal(size=4)
        h = 0.02
        f = rng.normal(size=(scheme.n_points, 3))
        state = ReducedState(q=q, q_prev=q_prev, h=h)
        got = predictor(scheme, state, f)
        # dense: evaluate the basis on all points and apply the formula directly
        Wd = basis.evaluate_invariant(scheme.points)
        expect = Wd @ q + h * Wd @ ((q - q_prev) / h) + h**2 * f / scheme.masses[:, None]
        assert np.allclose(got, expect, atol=1e-12)


class TestReducedEnergy:
    def test_rest_energy_constant(self):
        _, _, scheme = make_scheme(r=3)
        q = np.zeros(3)
        u_pred = np.zeros((scheme.n_points, 3))
        e = reduced_energy(scheme, q, u_pred, MAT, h=0.01)
        rest = float(np.dot(scheme.weights, np.full(scheme.n_points, energy_density(MAT, np.eye(3)))))
        assert e == pytest.approx(rest, rel=1e-12)

    def test_weights_linearity(self):
        _, _, scheme = make_scheme(r=3, seed=21)
        rng = np.random.default_rng(1)
        q = 0.1 * rng.normal(size=3)
        u_pred = 0.01 * rng.normal(size=(scheme.n_points, 3))
        e1 = reduced_energy(scheme, q, u_pred, MAT, h=0.01)
        doubled = CubatureScheme(
            mesh=scheme.mesh, r=scheme.r, sample_count=scheme.sample_count,
            point_vertices=scheme.point_vertices, points=scheme.points,
            weights=2 * scheme.weights, masses=2 * scheme.masses,
            host_tets=scheme.host_tets, corner_points=scheme.corner_points,
            dm_inv=scheme.dm_inv, W=scheme.W, tags=scheme.tags, gram=2 * scheme.gram,
        )
        assert reduced_energy(doubled, q, u_pred, MAT, h=0.01) == pytest.approx(2 * e1, rel=1e-12)

    def test_dense_energy_oracle(self):
        # independent dense evaluation of the same cubature potential
        mesh, basis, scheme = make_scheme(r=4, seed=22)
        rng = np.random.default_rng(2)
        q = 0.05 * rng.normal(size=4)
        u_pred = 0.02 * rng.normal(size=(scheme.n_points, 3))
        h = 0.01
        got = reduced_energy(scheme, q, u_pred, MAT, h)

        expect = 0.0
        for i in range(scheme.n_points):
            Wi = basis.evaluate_invariant(scheme.points[i])
            di = Wi @ q - u_pred[i]
            expect += 0.5 * scheme.masses[i] / h**2 * float(di @ di)
            tet = mesh.tets[scheme.host_tets[i]]
            corners = mesh.vertices[tet]
            uc = np.array([basis.evaluate_invariant(c) @ q for c in corners])
            dm = (corners[1:] - corners[0]).T
            ds = (uc[1:] - uc[0]).T
            F = np.eye(3) + ds @ np.linalg.inv(dm)
            expect += scheme.weights[i] * energy_density(MAT, F)
        assert got == pytest.approx(expect, rel=1e-10)


class TestDescentIncrement:
    def test_stationarity_at_minimizer(self):
        _, _, scheme = make_scheme(r=3, seed=30)
        state = ReducedState.rest(3, h=0.01)
        load = LoadCase(gravity=(0.0, -2.0, 0.0))
        cfg = SolverConfig(step_size=0.5, max_iterations=400, tolerance=1e-12)
        out = reduced_step(scheme, state, load, MAT, cfg)
        # at the converged q the projected increment nearly vanishes
        f = scheme.masses[:, None] * np.array([0.0, -2.0, 0.0])
        u_pred = predictor(scheme, state, f)
        du0 = descent_increment(scheme, state.q, u_pred, MAT, 0.01, alpha=1.0)
        du = descent_increment(scheme, out.q, u_pred, MAT, 0.01, alpha=1.0)
        dq0 = project(scheme, du0)
        dq = project(scheme, du)
        assert np.abs(dq).max() < 1e-8
        assert np.abs(dq).max() < 1e-4 * np.abs(dq0).max()

    def test_quadratic_case_recovers_predictor(self):
        zero_mat = Material(youngs_modulus=0.0, poisson_ratio=0.0)
        _, _, scheme = make_scheme(r=4, seed=31)
        rng = np.random.default_rng(3)
        q = 0.1 * rng.normal(size=4)
        u_pred = 0.05 * rng.normal(size=(scheme.n_points, 3))
        du = descent_increment(scheme, q, u_pred, zero_mat, h=0.02, alpha=1.0)
        assert np.allclose(du, u_pred - scheme.W @ q, atol=1e-13)
        # one exact projection lands on the least-squares fit of the predictor
        dq = project(scheme, du)
        resid = np.einsum(
            "n,nij,ni->j", scheme.weights, scheme.W, scheme.W @ (q + dq) - u_pred
        )
        assert np.abs(resid).max() < 1e-10

    def test_fd_oracle_on_cubature_energy(self):
        _, _, scheme = make_scheme(r=4, seed=32)
        rng = np.random.default_rng(4)
        q = 0.05 * rng.normal(size=4)
        u_pred = 0.02 * rng.normal(size=(scheme.n_points, 3))
        h = 0.01
        g = rs._density_gradients(scheme, q, u_pred, MAT, h)
        for _ in range(5):
            dq = rng.normal(size=4)
            eps = 1e-6
            ep = reduced_energy(scheme, q + eps * dq, u_pred, MAT, h)
            em = reduced_energy(scheme, q - eps * dq, u_pred, MAT, h)
            fd = (ep - em) / (2 * eps)
            analytic = float(np.einsum("n,ni,ni->", scheme.weights, g, scheme.W @ dq))
            assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestProject:
    def test_in_span_recovery(self):
        _, _, scheme = make_scheme(r=5, seed=40)
        v = np.random.default_rng(5).normal(size=5)
        dq = project(scheme, scheme.W @ v)
        assert np.allclose(dq, v, atol=1e-10)

    def test_zero(self):
        _, _, scheme = make_scheme(r=3, seed=41)
        assert np.allclose(project(scheme, np.zeros((scheme.n_points, 3))), 0.0)

    def test_dense_lsq_oracle(self):
        _, _, scheme = make_scheme(r=5, seed=42)
        rng = np.random.default_rng(6)
        du = rng.normal(size=(scheme.n_points, 3))
        dq = project(scheme, du)
        sw = np.sqrt(scheme.weights)
        A = (sw[:, None, None] * scheme.W).reshape(-1, 5)
        b = (sw[:, None] * du).reshape(-1)
        expect, *_ = np.linalg.lstsq(A, b, rcond=None)
        assert np.allclose(dq, expect, rtol=1e-10, atol=1e-12)

    def test_normal_equation_residual(self):
        _, _, scheme = make_scheme(r=4, seed=43)
        rng = np.random.default_rng(7)
        du = rng.normal(size=(scheme.n_points, 3))
        dq = project(scheme, du)
        resid = np.einsum("n,nij,ni->j", scheme.weights, scheme.W, scheme.W @ dq - du)
        scale = np.abs(np.einsum("n,nij,ni->j", scheme.weights, scheme.W, du)).max()
        assert np.abs(resid).max() < 1e-8 * max(scale, 1e-30)

    def test_stale_factor_error(self):
        mesh, basis, scheme = make_scheme(r=3, seed=44)
        event = RemeshEvent(excise=Region(kind="halfspace", axis="y", op="ge", value=0.3))
        apply_remesh(scheme, event, basis, seed=1)
        with pytest.raises(StaleFactorError):
            project(scheme, np.zeros((scheme.n_points, 3)))


class TestReducedStep:
    def test_equilibrium_from_rest(self):
        _, _, scheme = make_scheme(r=3, seed=50)
        state = ReducedState.rest(3, h=0.01)
        out = reduced_step(scheme, state, LoadCase(), MAT, SolverConfig())
        assert np.allclose(out.q, 0.0, atol=1e-12)
        assert out.t == pytest.approx(0.01)

    def test_energy_monotonic(self):
        _, _, scheme = make_scheme(r=4, seed=51)
        state = ReducedState.rest(4, h=0.01)
        load = LoadCase(gravity=(0.0, -9.8, 0.0))
        trace = []
        reduced_step(scheme, state, load, MAT, SolverConfig(), energy_trace=trace)
        assert len(trace) >= 1
        assert all(b <= a + 1e-12 * abs(a) for a, b in zip(trace, trace[1:]))

    def test_latent_dim_mismatch(self):
        _, _, scheme = make_scheme(r=3, seed=52)
        state = ReducedState.rest(4, h=0.01)
        with pytest.raises(Exception):
            reduced_step(scheme, state, LoadCase(), MAT, SolverConfig())


class TestRemesh:
    def test_identity_remesh_cache_hits(self, small_grid):
        basis = NeuralBasis.create(r=3, seed=60)
        scheme = sample_cubature(small_grid, 6, seed=61, basis=basis)
        event = RemeshEvent(new_mesh=small_grid)
        fresh = apply_remesh(scheme, event, basis, seed=61)
        assert fresh.stats.n_new_evaluations == 0
        assert np.array_equal(fresh.point_vertices, scheme.point_vertices)
        assert np.array_equal(fresh.W, scheme.W)

    def test_hole_punch_volume_bookkeeping(self, small_grid):
        basis = NeuralBasis.create(r=3, seed=62)
        scheme = sample_cubature(small_grid, small_grid.n_vertices, seed=0, basis=basis)
        region = Region(kind="sphere", center=(0.0, 0.0, 0.0), radius=0.3)
        centroids = small_grid.vertices[small_grid.tets].mean(axis=1)
        vols = meshmod.tet_volumes(small_grid)
        excised = vols[region.contains(centroids)].sum()
        assert excised > 0
        fresh = apply_remesh(scheme, RemeshEvent(excise=region), basis, seed=0)
        assert fresh.weights.sum() == pytest.approx(scheme.weights.sum() - excised, rel=1e-9)

    def test_retained_points_not_reevaluated(self, small_grid):
        basis = NeuralBasis.create(r=3, seed=63)
        scheme = sample_cubature(small_grid, small_grid.n_vertices, seed=0, basis=basis)
        region = Region(kind="halfspace", axis="x", op="ge", value=0.3)
        fresh = apply_remesh(scheme, RemeshEvent(excise=region), basis, seed=0)
        # every surviving vertex was already cached: zero new evaluations
        assert fresh.stats.n_new_evaluations == 0
        assert fresh.stats.n_cache_hits == fresh.n_points
        assert fresh.verify_cache(basis)

    def test_whole_mesh_swap_preserves_latent(self):
        mesh_a = meshmod.box_mesh(resolution=(3, 3, 3), density=500.0)
        mesh_b = meshmod.box_mesh(
            lo=(0.1, 0.0, 0.0), hi=(0.9, 1.0, 1.0), resolution=(4, 2, 3), density=500.0
        )
        basis = NeuralBasis.create(r=3, seed=64)
        scheme = sample_cubature(mesh_a, mesh_a.n_vertices, seed=1, basis=basis)
        q = np.array([0.1, -0.2, 0.05])
        q_bytes = q.tobytes()
        fresh = apply_remesh(scheme, RemeshEvent(new_mesh=mesh_b), basis, seed=2)
        assert q.tobytes() == q_bytes  # untouched by construction
        # the new scheme decodes the SAME latent on the new geometry
        expect = basis.evaluate_invariant(fresh.points) @ q
        assert np.allclose(fresh.displacements(q), expect, atol=1e-14)


class TestReducedHessian:
    def test_symmetry(self):
        _, _, scheme = make_scheme(r=4, seed=70)
        rng = np.random.default_rng(8)
        H = reduced_hessian(scheme, 0.1 * rng.normal(size=4), MAT)
        assert np.abs(H - H.T).max() <= 1e-12 * max(1.0, np.abs(H).max())

    def test_fd_against_elastic_gradient(self):
        _, _, scheme = make_scheme(r=4, seed=71)
        rng = np.random.default_rng(9)
        q = 0.05 * rng.normal(size=4)
        H = reduced_hessian(scheme, q, MAT)
        eps = 1e-6
        fd = np.zeros((4, 4))
        for k in range(4):
            dq = np.zeros(4)
            dq[k] = eps
            gp = elastic_latent_gradient(scheme, q + dq, MAT)
            gm = elastic_latent_gradient(scheme, q - dq, MAT)
            fd[:, k] = (gp - gm) / (2 * eps)
        assert np.linalg.norm(H - fd) / np.linalg.norm(fd) < 1e-4

    def test_positive_semidefinite_at_rest(self):
        _, _, scheme = make_scheme(r=4, seed=72)
        H = reduced_hessian(scheme, np.zeros(4), MAT)
        eig = np.linalg.eigvalsh(H)
        assert eig.min() >= -1e-8 * max(1.0, abs(eig).max())


# ---------------------------------------------------------------------------
# Classical linear-ROM oracle: dense, independent implementation of the same
# step semantics (explicit loops + pivoted least squares, no shared machinery)
# ---------------------------------------------------------------------------


def dense_rom_reference(mesh, r, mat, gravity, tether_tags, h, steps, cfg, host):
    """Independent dense integrator over the same sampled configuration.

    ``host`` is the per-vertex host-tet assignment of the scheme under test;
    the oracle validates the step mathematics, not the sampling draw.
    """
    basis = PolynomialBasis(r=r)
    n = mesh.n_vertices
    order = np.arange(n)
    Wd = np.stack([basis.evaluate(mesh.vertices[v]) for v in order])
    vol = mesh.volume()
    w = vol / n
    rho = mesh.density
    mass = rho * w

    dm_list = []
    for t in host:
        c = mesh.vertices[mesh.tets[t]]
        dm_list.append(np.linalg.inv((c[1:] - c[0]).T))

    tether_k = np.zeros(n)
    tether_v = np.zeros((n, 3))
    for tag, vel in tether_tags.items():
        for v in range(n):
            if mesh.dirichlet_tags[v] == tag:
                tether_k[v] = rs.TETHER_STIFFNESS_SCALE * mass / h**2
                tether_v[v] = vel

    A = np.sqrt(w) * Wd.reshape(3 * n, r)

    def solve(rhs_pts):
        b = np.sqrt(w) * rhs_pts.reshape(3 * n)
        sol, *_ = scipy.linalg.lstsq(A, b, lapack_driver="gelsd")
        return sol

    def point_u(q):
        return Wd @ q

    def deformation(uq, i):
        tet = mesh.tets[host[i]]
        uc = uq[tet]
        return np.eye(3) + (uc[1:] - uc[0]).T @ dm_list[i]

    def energy(q, u_pred, targets):
        uq = point_u(q)
        total = 0.0
        for i in range(n):
            d = uq[i] - u_pred[i]
            total += 0.5 * mass / h**2 * float(d @ d)
            total += w * energy_density(mat, deformation(uq, i))
            if tether_k[i] > 0:
                dt_ = uq[i] - targets[i]
                total += 0.5 * tether_k[i] * float(dt_ @ dt_)
        return total

    def gradients(q, u_pred, targets):
        uq = point_u(q)
        g = (rho / h**2) * (uq - u_pred)
        accum = np.zeros((n, 3))
        for i in range(n):
            F = deformation(uq, i)
            J = np.linalg.det(F)
            cof = np.stack(
                [
                    np.cross(F[:, 1], F[:, 2]),
                    np.cross(F[:, 2], F[:, 0]),
                    np.cross(F[:, 0], F[:, 1]),
                ],
                axis=1,
            )
            P = mat.mu * F + mat.lam * (J - mat.rest_det) * cof
            corner = P @ dm_list[i].T
            tet = mesh.tets[host[i]]
            for c in range(1, 4):
                accum[tet[c]] += w * corner[:, c - 1]
            accum[tet[0]] -= w * corner.sum(axis=1)
        g += accum / w
        mask = tether_k > 0
        g[mask] += (tether_k[mask] / w)[:, None] * (uq[mask] - targets[mask])
        return g

    q = np.zeros(r)
    q_prev = np.zeros(r)
    t = 0.0
    trajectory = []
    for _ in range(steps):
        uq = point_u(q)
        v = Wd @ ((q - q_prev) / h)
        f = mass * np.tile(gravity, (n, 1))
        u_pred = uq + h * v + h**2 * f / mass
        targets = np.where(tether_k[:, None] > 0, (t + h) * tether_v, uq)

        qn = q + solve(u_pred - uq)
        e = energy(qn, u_pred, targets)
        precondition = 1.0 / (1.0 + tether_k * h**2 / mass)
        for _ in range(cfg.max_iterations):
            g = gradients(qn, u_pred, targets)
            dq = solve(precondition[:, None] * -(cfg.step_size * h**2 / rho) * g)
            if np.abs(dq).max() <= cfg.tolerance * (1.0 + np.abs(qn).max()):
                break
            beta = 1.0
            accepted = False
            for _ in range(40):
                trial = qn + beta * dq
                e_trial = energy(trial, u_pred, targets)
                if e_trial <= e:
                    qn, e, accepted = trial, e_trial, True
                    break
                beta *= cfg.backtrack_factor
            if not accepted:
                break
        q_prev, q = q, qn
        t += h
        trajectory.append(q.copy())
    return np.array(trajectory)


class TestClassicalRomOracle:
    def test_full_cubature_matches_dense_reference(self):
        mesh = meshmod.box_mesh(
            lo=(0.0, 0.0, 0.0), hi=(1.0, 0.25, 0.25), resolution=(6, 2, 2), density=800.0
        )
        clamp = select_vertices(mesh, VertexSelector.halfspace("x", "le", 1e-9))
        mesh = mesh.with_tags(clamp, "clamp")
        mat = Material(youngs_modulus=5e4, poisson_ratio=0.25)
        r = 12
        basis = PolynomialBasis(r=r)
        h = 0.01
        steps = 50
        cfg = SolverConfig(step_size=0.5, max_iterations=15, tolerance=0.0)
        load = LoadCase(
            gravity=(0.0, -9.8, 0.0),
            prescribed=((VertexSelector.by_tag("clamp"), (0.0, 0.0, 0.0)),),
        )

        scheme = sample_cubature(mesh, mesh.n_vertices, seed=0, basis=basis)
        state = ReducedState.rest(r, h=h)
        ours = []
        for _ in range(steps):
            state = reduced_step(scheme, state, load, mat, cfg)
            ours.append(state.q.copy())
        ours = np.array(ours)

        # hand the reference the same sampled hosts, ordered by vertex id
        host_by_vertex = np.empty(mesh.n_vertices, dtype=int)
        host_by_vertex[scheme.point_vertices] = scheme.host_tets
        reference = dense_rom_reference(
            mesh, r, mat, np.array([0.0, -9.8, 0.0]), {"clamp": np.zeros(3)},
            h, steps, cfg, host_by_vertex,
        )
        assert ours.shape == reference.shape
        assert np.abs(ours - reference).max() < 1e-8
