import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rss_atlas import autoencoder as ae
from rss_atlas.errors import ConfigError, DataError, TrainingDivergedError

TOY_CFG = ae.TrainConfig(
    latent_dim=3, hidden_dim=4, lambda_r=0.3, lambda_d=0.7,
    batch_size=4, dropout_rate=0.0, seed=1,
)


def toy_params(rng, input_dim=6, cfg=TOY_CFG, perturb_bn=True):
    params = ae.init_params(input_dim, cfg)
    if perturb_bn:
        for layer in (params.enc_hidden, params.dec_hidden):
            h = layer.weights.shape[0]
            layer.bn_gamma = rng.uniform(0.5, 1.5, size=h)
            layer.bn_beta = rng.normal(size=h) * 0.2
            layer.bn_running_mean = rng.normal(size=h) * 0.3
            layer.bn_running_var = rng.uniform(0.5, 2.0, size=h)
    return params


def fd_gradient(params, batch, cfg, key, mode, seed, step=1e-5):
    """Central finite differences of total_loss along one tensor."""
    tensor = params.get_tensor(key)
    grad = np.zeros_like(tensor)
    it = np.nditer(tensor, flags=["multi_index"])

    def loss():
        latent, recon, _ = ae.forward(
            params, batch, mode=mode, seed=seed,
            dropout_rate=cfg.dropout_rate if mode == "training" else 0.0,
        )
        return ae.total_loss(batch, latent, recon, cfg)

    for _ in it:
        i = it.multi_index
        orig = tensor[i]
        tensor[i] = orig + step
        lp = loss()
        tensor[i] = orig - step
        lm = loss()
        tensor[i] = orig
        grad[i] = (lp - lm) / (2.0 * step)
    return grad


class TestForward:
    def test_zero_network_outputs_zero(self, rng):
        params = toy_params(rng, perturb_bn=False)
        for key in params.tensor_keys():
            if key.endswith("weights") or key.endswith("biases"):
                params.set_tensor(key, np.zeros_like(params.get_tensor(key)))
        batch = rng.normal(size=(4, 6))
        latent, recon, _ = ae.forward(params, batch)
        assert np.all(latent == 0.0) and np.all(recon == 0.0)

    def test_inference_deterministic(self, rng):
        params = toy_params(rng)
        batch = rng.normal(size=(5, 6))
        a = ae.forward(params, batch, mode="inference", seed=1)
        b = ae.forward(params, batch, mode="inference", seed=99)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_matches_hand_computed_dense_tanh_dense(self):
        # BN frozen to identity and no dropout: the half reduces to
        # dense -> tanh -> dense, checked with explicit loops.
        cfg = replace(TOY_CFG, latent_dim=2, hidden_dim=3)
        params = ae.init_params(3, cfg)
        rng = np.random.default_rng(0)
        for key in params.tensor_keys():
            if key.endswith("weights"):
                params.set_tensor(key, rng.normal(size=params.get_tensor(key).shape))
            elif key.endswith("biases"):
                params.set_tensor(key, rng.normal(size=params.get_tensor(key).shape))
        batch = rng.normal(size=(2, 3))
        latent, recon, _ = ae.forward(params, batch, mode="inference")

        def half(x, hidden, head):
            h = np.tanh(hidden.weights @ x + hidden.biases)
            h = (h - hidden.bn_running_mean) / np.sqrt(hidden.bn_running_var + ae.BN_EPS)
            h = hidden.bn_gamma * h + hidden.bn_beta
            return head.weights @ h + head.biases

        for i in range(2):
            want_latent = half(batch[i], params.enc_hidden, params.enc_out)
            want_recon = half(want_latent, params.dec_hidden, params.dec_out)
            np.testing.assert_allclose(latent[i], want_latent, rtol=1e-12)
            np.testing.assert_allclose(recon[i], want_recon, rtol=1e-12)

    def test_training_single_row_rejected(self, rng):
        params = toy_params(rng)
        with pytest.raises(DataError, match="batch"):
            ae.forward(params, rng.normal(size=(1, 6)), mode="training")

    def test_dropout_mask_seeded(self, rng):
        params = toy_params(rng)
        batch = rng.normal(size=(4, 6))
        a = ae.forward(params, batch, mode="training", seed=7, dropout_rate=0.5)
        b = ae.forward(params, batch, mode="training", seed=7, dropout_rate=0.5)
        c = ae.forward(params, batch, mode="training", seed=8, dropout_rate=0.5)
        assert np.array_equal(a[1], b[1])
        assert not np.array_equal(a[1], c[1])


class TestLosses:
    def test_reconstruction_zero_at_match(self, rng):
        z = rng.normal(size=(3, 5))
        assert ae.reconstruction_loss(z, z) == 0.0

    def test_reconstruction_direct(self):
        z = np.array([[1.0, 2.0]])
        z_hat = np.zeros((1, 2))
        assert ae.reconstruction_loss(z, z_hat) == 5.0

    def test_reconstruction_brute_force(self, rng):
        z = rng.normal(size=(5, 7))
        z_hat = rng.normal(size=(5, 7))
        want = sum(
            (z[i, j] - z_hat[i, j]) ** 2 for i in range(5) for j in range(7)
        )
        assert ae.reconstruction_loss(z, z_hat) == pytest.approx(want, rel=1e-12)

    def test_sparsity_zero_latent(self):
        assert ae.sparsity_loss(np.zeros((4, 3)), 0.5) == 0.0

    def test_sparsity_direct(self):
        assert ae.sparsity_loss(np.array([[-1.0, 2.0]]), 0.5) == 1.5

    def test_sparsity_brute_force(self, rng):
        latent = rng.normal(size=(8, 3))
        want = 0.25 * sum(abs(latent[i, j]) for i in range(8) for j in range(3))
        assert ae.sparsity_loss(latent, 0.25) == pytest.approx(want, rel=1e-12)

    def test_distance_isometric_zero(self, rng):
        z = rng.normal(size=(6, 4))
        assert ae.distance_loss(z, z, 1.0) == 0.0

    def test_distance_two_rows_direct(self):
        # Squared pair distances 4 (input) and 1 (latent); both ordered
        # pairs contribute (4 - 1)^2 = 9 each.
        z = np.array([[0.0, 0.0], [2.0, 0.0]])
        latent = np.array([[0.0], [1.0]])
        assert ae.distance_loss(z, latent, 1.0) == 18.0

    def test_distance_brute_force(self, rng):
        z = rng.normal(size=(6, 5))
        latent = rng.normal(size=(6, 2))
        lam = 0.3
        want = 0.0
        for i in range(6):
            for j in range(6):
                dz = np.sum((z[i] - z[j]) ** 2)
                dl = np.sum((latent[i] - latent[j]) ** 2)
                want += (dz - dl) ** 2
        assert ae.distance_loss(z, latent, lam) == pytest.approx(lam * want, rel=1e-12)

    def test_distance_absolute_mode_brute_force(self, rng):
        z = rng.normal(size=(5, 4))
        latent = rng.normal(size=(5, 2))
        want = 0.0
        for i in range(5):
            for j in range(5):
                dz = math.sqrt(np.sum((z[i] - z[j]) ** 2))
                dl = math.sqrt(np.sum((latent[i] - latent[j]) ** 2))
                want += (dz - dl) ** 2
        got = ae.distance_loss(z, latent, 1.0, mode="absolute")
        assert got == pytest.approx(want, rel=1e-12)

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_distance_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(5, 3))
        latent = rng.normal(size=(5, 2))
        perm = rng.permutation(5)
        a = ae.distance_loss(z, latent, 1.0)
        b = ae.distance_loss(z[perm], latent[perm], 1.0)
        assert a == pytest.approx(b, rel=1e-12)

    def test_total_is_sum_of_terms(self, rng):
        z = rng.normal(size=(4, 6))
        latent = rng.normal(size=(4, 3))
        z_hat = rng.normal(size=(4, 6))
        want = (
            ae.reconstruction_loss(z, z_hat)
            + ae.sparsity_loss(latent, TOY_CFG.lambda_r)
            + ae.distance_loss(z, latent, TOY_CFG.lambda_d)
        )
        assert ae.total_loss(z, latent, z_hat, TOY_CFG) == pytest.approx(want, rel=1e-12)

    def test_total_reduces_to_reconstruction(self, rng):
        cfg = replace(TOY_CFG, lambda_r=0.0, lambda_d=0.0)
        z = rng.normal(size=(4, 6))
        latent = rng.normal(size=(4, 3))
        z_hat = rng.normal(size=(4, 6))
        assert ae.total_loss(z, latent, z_hat, cfg) == ae.reconstruction_loss(z, z_hat)


class TestGradients:
    @pytest.mark.parametrize("mode", ["inference", "training"])
    def test_finite_difference_all_tensors(self, rng, mode):
        params = toy_params(rng)
        batch = rng.normal(size=(4, 6))
        grads = ae.gradients(params, batch, TOY_CFG, seed=3, mode=mode)
        for key in params.tensor_keys():
            fd = fd_gradient(params, batch, TOY_CFG, key, mode, seed=3)
            denom = max(float(np.abs(fd).max()), 1e-8)
            rel = float(np.abs(grads[key] - fd).max()) / denom
            assert rel < 1e-5, f"{key} rel err {rel:.2e} in {mode} mode"

    def test_perfect_reconstruction_gives_zero_recon_gradient(self, rng):
        # With lambda_r = lambda_d = 0 and recon == batch the whole
        # gradient vanishes: the output error signal is zero.
        cfg = replace(TOY_CFG, lambda_r=0.0, lambda_d=0.0)
        params = toy_params(rng)
        latent, recon, cache = ae.forward(params, rng.normal(size=(4, 6)))
        grads = ae._backward_from_cache(params, recon, cfg, cache)
        # Trick: treating the actual reconstruction as the target batch
        # only zeroes the head error, so check the head bias gradient.
        assert np.allclose(grads["dec_out.biases"], 0.0)

    def test_distance_gradient_matches_hand_formula(self, rng):
        # Ordered pairs double the single-count gradient:
        # g_k = 8 lam sum_j (|l_k-l_j|^2 - |z_k-z_j|^2)(l_k - l_j).
        z = rng.normal(size=(3, 4))
        latent = rng.normal(size=(3, 2))
        lam = 0.7
        got = ae._distance_loss_grad(z, latent, lam, "squared")
        want = np.zeros_like(latent)
        for k in range(3):
            for j in range(3):
                dl = np.sum((latent[k] - latent[j]) ** 2)
                dz = np.sum((z[k] - z[j]) ** 2)
                want[k] += 8.0 * lam * (dl - dz) * (latent[k] - latent[j])
        np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_distance_gradient_by_finite_differences(self, rng):
        z = rng.normal(size=(4, 5))
        latent = rng.normal(size=(4, 2))
        for mode in ("squared", "absolute"):
            got = ae._distance_loss_grad(z, latent, 0.9, mode)
            fd = np.zeros_like(latent)
            for i in range(4):
                for j in range(2):
                    orig = latent[i, j]
                    latent[i, j] = orig + 1e-6
                    lp = ae.distance_loss(z, latent, 0.9, mode)
                    latent[i, j] = orig - 1e-6
                    lm = ae.distance_loss(z, latent, 0.9, mode)
                    latent[i, j] = orig
                    fd[i, j] = (lp - lm) / 2e-6
            np.testing.assert_allclose(got, fd, rtol=1e-4, atol=1e-7)

    def test_dropout_gradient_fixed_mask(self, rng):
        # With an active dropout mask the analytic gradient must match
        # finite differences computed under the same seed.
        cfg = replace(TOY_CFG, dropout_rate=0.4)
        params = toy_params(rng)
        batch = rng.normal(size=(4, 6))
        grads = ae.gradients(params, batch, cfg, seed=11, mode="training")
        for key in ("enc_hidden.weights", "dec_out.weights", "enc_hidden.bn_gamma"):
            fd = fd_gradient(params, batch, cfg, key, "training", seed=11)
            denom = max(float(np.abs(fd).max()), 1e-8)
            assert float(np.abs(grads[key] - fd).max()) / denom < 1e-5


class TestTrain:
    def test_zero_epochs_returns_init(self, small_survey_normalized):
        norm, _ = small_survey_normalized
        cfg = ae.TrainConfig(latent_dim=4, hidden_dim=8, epochs=0, batch_size=16, seed=3)
        params, report = ae.train(norm, cfg)
        init = ae.init_params(norm.m, cfg)
        for key in params.tensor_keys():
            assert np.array_equal(params.get_tensor(key), init.get_tensor(key))
        assert report.recon_losses == []

    def test_loss_decreases(self, small_survey_normalized):
        norm, _ = small_survey_normalized
        cfg = ae.TrainConfig(latent_dim=4, hidden_dim=12, epochs=60, batch_size=32, seed=0)
        _, report = ae.train(norm, cfg)
        first = report.recon_losses[0] + report.sparsity_losses[0] + report.distance_losses[0]
        last = report.recon_losses[-1] + report.sparsity_losses[-1] + report.distance_losses[-1]
        assert last <= first

    def test_deterministic(self, small_survey_normalized):
        norm, _ = small_survey_normalized
        cfg = ae.TrainConfig(latent_dim=3, hidden_dim=8, epochs=5, batch_size=32, seed=9)
        p1, _ = ae.train(norm, cfg)
        p2, _ = ae.train(norm, cfg)
        for key in p1.tensor_keys():
            assert np.array_equal(p1.get_tensor(key), p2.get_tensor(key))

    def test_distance_weight_improves_isometry(self, small_survey_normalized):
        norm, _ = small_survey_normalized
        base = ae.TrainConfig(latent_dim=4, hidden_dim=16, epochs=250, batch_size=32, seed=1)
        with_d = replace(base, lambda_d=1e-2)
        without_d = replace(base, lambda_d=0.0)
        corr = {}
        for name, cfg in (("on", with_d), ("off", without_d)):
            params, _ = ae.train(norm, cfg)
            latent = ae.encode(params, norm.Z)
            din = np.sqrt(np.sum((norm.Z[:, None] - norm.Z[None, :]) ** 2, axis=2))
            dlat = np.sqrt(np.sum((latent[:, None] - latent[None, :]) ** 2, axis=2))
            iu = np.triu_indices(norm.n, k=1)
            corr[name] = np.corrcoef(din[iu], dlat[iu])[0, 1]
        assert corr["on"] > corr["off"]
        assert corr["on"] > 0.9

    def test_requires_normalized(self, small_survey):
        with pytest.raises(DataError, match="normalized"):
            ae.train(small_survey, ae.TrainConfig(epochs=1, batch_size=16))

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_divergence_reports_epoch(self, small_survey_normalized):
        # Adam steps scale with the learning rate, so a pathological rate
        # overflows the squared losses within the first epochs.
        norm, _ = small_survey_normalized
        cfg = ae.TrainConfig(
            latent_dim=4, hidden_dim=8, epochs=3, batch_size=32,
            learning_rate=1e160, seed=0,
        )
        with pytest.raises(TrainingDivergedError, match="epoch"):
            ae.train(norm, cfg)


@pytest.fixture(scope="module")
def trained(small_survey_normalized):
    norm, stats = small_survey_normalized
    cfg = ae.TrainConfig(latent_dim=4, hidden_dim=12, epochs=40, batch_size=32, seed=5)
    params, _ = ae.train(norm, cfg, stats)
    return params, norm


class TestEncodeDecode:

    def test_single_row_matches_batch(self, trained):
        params, norm = trained
        full = ae.encode(params, norm.Z)
        one = ae.encode(params, norm.Z[7])
        np.testing.assert_allclose(one, full[7], rtol=1e-12, atol=1e-15)

    def test_encode_deterministic(self, trained):
        params, norm = trained
        assert np.array_equal(ae.encode(params, norm.Z), ae.encode(params, norm.Z))

    def test_decode_dim_check(self, trained):
        params, _ = trained
        with pytest.raises(DataError):
            ae.decode(params, np.zeros((2, params.latent_dim + 1)))

    def test_undercomplete_enforced(self):
        cfg = ae.TrainConfig(latent_dim=6, hidden_dim=8)
        with pytest.raises(ConfigError):
            ae.init_params(6, cfg)


class TestSerialization:
    def test_roundtrip_exact(self, rng, tmp_path):
        params = toy_params(rng)
        params.train_config = TOY_CFG
        path = tmp_path / "ae.json"
        ae.save_model(params, path)
        back = ae.load_model(path)
        for key in params.tensor_keys():
            assert np.array_equal(params.get_tensor(key), back.get_tensor(key))
        for layer in ("enc_hidden", "dec_hidden"):
            a, b = getattr(params, layer), getattr(back, layer)
            assert np.array_equal(a.bn_running_mean, b.bn_running_mean)
            assert np.array_equal(a.bn_running_var, b.bn_running_var)
        assert back.train_config == TOY_CFG

    def test_wrong_version_rejected(self, tmp_path):
        p = tmp_path / "ae.json"
        p.write_text('{"format_version": 42}')
        with pytest.raises(DataError, match="format_version"):
            ae.load_model(p)

    def test_corrupt_file_rejected(self, tmp_path):
        p = tmp_path / "ae.json"
        p.write_text('{"format_version": 1, "input_dim": ')
        with pytest.raises(DataError, match="corrupt"):
            ae.load_model(p)

    def test_behavioral_roundtrip(self, rng, tmp_path):
        params = toy_params(rng)
        Z = rng.normal(size=(5, 6))
        before = ae.encode(params, Z)
        path = tmp_path / "ae.json"
        ae.save_model(params, path)
        after = ae.encode(ae.load_model(path), Z)
        assert np.array_equal(before, after)
