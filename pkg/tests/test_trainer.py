import numpy as np
import pytest

from neuralrom.dataset import Frame, SnapshotSet, SubsampleSpec, subsample
from neuralrom.errors import DivergenceError
from neuralrom.networks import Encoder, NeuralBasis, encode, load_checkpoint
from neuralrom.trainer import AdamState, TrainConfig, adam_step, fit, learning_rate, loss


def make_dataset(n_frames=4, n_points=12, seed=0, displacement=None):
    rng = np.random.default_rng(seed)
    frames = []
    for k in range(n_frames):
        X = rng.uniform(-0.5, 0.5, size=(n_points, 3))
        u = displacement(X, k) if displacement else 0.1 * rng.normal(size=(n_points, 3))
        frames.append(Frame(t=float(k), positions=X, displacements=u))
    return SnapshotSet(frames=frames, cardinality=n_points)


def test_config_defaults_match_published_recipe():
    cfg = TrainConfig()
    assert cfg.epochs == 3750
    assert cfg.base_lr == 1e-3
    assert cfg.lr_drops == ((1250, 5.0), (2500, 10.0))
    assert cfg.batch_frames == 16
    assert cfg.encoder_samples == 2500
    assert cfg.latent_dim == 20


class TestSchedule:
    def test_exact_values(self):
        cfg = TrainConfig()
        assert learning_rate(cfg, 0) == 1e-3
        assert learning_rate(cfg, 1249) == 1e-3
        assert learning_rate(cfg, 1250) == pytest.approx(2e-4, rel=1e-12)
        assert learning_rate(cfg, 1300) == pytest.approx(2e-4, rel=1e-12)
        assert learning_rate(cfg, 2500) == pytest.approx(2e-5, rel=1e-12)
        assert learning_rate(cfg, 2600) == pytest.approx(2e-5, rel=1e-12)


class TestAdam:
    def test_first_step_closed_form(self):
        p = np.array([1.0])
        st = AdamState.zeros(1)
        adam_step(p, np.array([1.0]), st, lr=1e-3)
        # bias-corrected m_hat = v_hat = 1 -> delta = -lr / (1 + eps)
        assert p[0] == pytest.approx(1.0 - 1e-3 / (1.0 + 1e-8), abs=1e-15)

    def test_zero_gradient_fixed_point(self):
        p = np.array([0.3, -0.7])
        st = AdamState.zeros(2)
        for _ in range(25):
            adam_step(p, np.zeros(2), st, lr=1e-2)
        assert np.array_equal(p, [0.3, -0.7])

    def test_determinism(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=5) for _ in range(10)]
        outs = []
        for _ in range(2):
            p = np.ones(5)
            st = AdamState.zeros(5)
            for g in grads:
                adam_step(p, g, st, lr=1e-3)
            outs.append(p.copy())
        assert np.array_equal(outs[0], outs[1])

    def test_non_finite_gradient_aborts(self):
        p = np.ones(3)
        st = AdamState.zeros(3)
        with pytest.raises(DivergenceError, match="non-finite gradient"):
            adam_step(p, np.array([0.0, np.nan, 1.0]), st, lr=1e-3)


class TestLoss:
    def test_matches_direct_double_loop(self):
        sset = make_dataset(n_frames=3, n_points=4, seed=1)
        basis = NeuralBasis.create(r=2, seed=0)
        enc = Encoder.create(r=2, seed=1)
        spec = SubsampleSpec(count=3, seed=5)
        got = loss(sset.frames, basis, enc, spec)
        expected = 0.0
        for f in sset.frames:
            sub = subsample(f, spec)
            q = encode(enc, sub.positions, sub.displacements)
            for X, u in zip(f.positions, f.displacements):
                expected += np.linalg.norm(basis.evaluate(X) @ q - u)
        assert got == pytest.approx(expected, rel=1e-10)

    def test_squared_variant(self):
        sset = make_dataset(n_frames=2, n_points=5, seed=2)
        basis = NeuralBasis.create(r=2, seed=3)
        enc = Encoder.create(r=2, seed=4)
        spec = SubsampleSpec(count=5, seed=0)
        unsq = loss(sset.frames, basis, enc, spec, squared=False)
        sq = loss(sset.frames, basis, enc, spec, squared=True)
        assert sq != pytest.approx(unsq)
        expected = 0.0
        for f in sset.frames:
            q = encode(enc, f.positions, f.displacements)
            for X, u in zip(f.positions, f.displacements):
                expected += np.linalg.norm(basis.evaluate(X) @ q - u) ** 2
        assert sq == pytest.approx(expected, rel=1e-10)

    def test_exact_reconstruction_zero_loss(self):
        # zero displacements with zero output-layer weights/biases -> q irrelevant
        sset = make_dataset(n_frames=2, n_points=6, seed=3, displacement=lambda X, k: np.zeros_like(X))
        basis = NeuralBasis.create(r=2, seed=5)
        last = len(basis.dims) - 2
        basis.params.view(f"w{last}")[:] = 0.0
        basis.params.view(f"b{last}")[:] = 0.0
        enc = Encoder.create(r=2, seed=6)
        assert loss(sset.frames, basis, enc, SubsampleSpec(count=6, seed=0)) == 0.0

    def test_permutation_invariance_full_subsample(self):
        sset = make_dataset(n_frames=1, n_points=8, seed=4)
        f = sset.frames[0]
        basis = NeuralBasis.create(r=3, seed=7)
        enc = Encoder.create(r=3, seed=8)
        spec = SubsampleSpec(count=8, seed=0)
        ref = loss([f], basis, enc, spec)
        perm = np.random.default_rng(9).permutation(8)
        shuffled = Frame(t=f.t, positions=f.positions[perm], displacements=f.displacements[perm])
        assert loss([shuffled], basis, enc, spec) == pytest.approx(ref, rel=1e-12)


class TestFit:
    def test_rigid_translation_smoke(self):
        c = np.array([0.4, -0.2, 0.3])
        sset = make_dataset(
            n_frames=1, n_points=24, seed=5, displacement=lambda X, k: np.tile(c, (len(X), 1))
        )
        # desk-scale run: same schedule shape, drop points scaled to 500 epochs
        cfg = TrainConfig(
            epochs=500,
            lr_drops=((200, 5.0), (350, 10.0)),
            batch_frames=16,
            encoder_samples=24,
            latent_dim=2,
            seed=0,
        )
        basis, enc, metrics = fit(sset, cfg)
        f = sset.frames[0]
        q = encode(enc, f.positions, f.displacements)
        recon = basis.evaluate(f.positions) @ q
        rms = np.sqrt(np.mean(np.sum((recon - f.displacements) ** 2, axis=1)))
        assert rms < 0.01 * np.linalg.norm(c)
        assert metrics[-1]["loss"] < metrics[0]["loss"]

    def test_bitwise_determinism(self):
        sset = make_dataset(n_frames=3, n_points=10, seed=6)
        cfg = TrainConfig(epochs=5, batch_frames=2, encoder_samples=8, latent_dim=2, seed=3)
        b1, e1, m1 = fit(sset, cfg)
        b2, e2, m2 = fit(sset, cfg)
        assert np.array_equal(b1.params.values, b2.params.values)
        assert np.array_equal(e1.params.values, e2.params.values)
        assert [m["loss"] for m in m1] == [m["loss"] for m in m2]

    def test_metrics_and_checkpoint_files(self, tmp_path):
        sset = make_dataset(n_frames=2, n_points=8, seed=7)
        cfg = TrainConfig(
            epochs=4, batch_frames=2, encoder_samples=8, latent_dim=2, seed=1, checkpoint_every=2
        )
        ck = tmp_path / "model.lcrw"
        metrics_path = tmp_path / "metrics.ndjson"
        fit(sset, cfg, checkpoint_path=ck, metrics_path=metrics_path)
        lines = metrics_path.read_text().strip().splitlines()
        assert len(lines) == 4
        loaded = load_checkpoint(ck)
        assert loaded.train_meta["next_epoch"] == 4

    def test_resume_continues_epoch_counter(self, tmp_path):
        sset = make_dataset(n_frames=2, n_points=8, seed=8)
        ck = tmp_path / "model.lcrw"

        cfg_full = TrainConfig(epochs=6, batch_frames=2, encoder_samples=8, latent_dim=2, seed=2)
        b_full, e_full, m_full = fit(sset, cfg_full)

        cfg_half = TrainConfig(epochs=3, batch_frames=2, encoder_samples=8, latent_dim=2, seed=2)
        fit(sset, cfg_half, checkpoint_path=ck)
        resumed = load_checkpoint(ck)
        b_res, e_res, m_res = fit(sset, cfg_full, resume=resumed)

        assert [m["epoch"] for m in m_res] == [3, 4, 5]
        assert np.allclose(b_res.params.values, b_full.params.values, atol=1e-12)
        assert np.allclose(e_res.params.values, e_full.params.values, atol=1e-12)
