import numpy as np
import pytest

from raedesk import tensor as T
from raedesk import datagen
from raedesk import rae
from raedesk.rae import (CompressedAutoencoder, Decoder, FrozenEncoder,
                         LatentShape, LossWeights, NoiseAugConfig,
                         frechet_feature_distance, gram_loss, half_normal_sigmas,
                         noise_augment, patchify, recon_loss, train_decoder,
                         unpatchify)
from raedesk.tensor import Tensor


class TestPatches:
    def test_roundtrip(self):
        imgs = T.rng(1).normal(size=(3, 1, 32, 32))
        tokens = patchify(imgs, 8)
        assert tokens.shape == (3, 16, 64)
        np.testing.assert_array_equal(unpatchify(tokens, 8, 32), imgs)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((1, 1, 30, 30)), 8)


class TestFrozenEncoder:
    def test_zero_image_zero_tokens(self):
        enc = FrozenEncoder()
        np.testing.assert_array_equal(enc(np.zeros((2, 1, 32, 32))), 0.0)

    def test_deterministic(self):
        imgs = datagen.render_domain_batch("texture", 2, 5)
        a = FrozenEncoder(seed=99)(imgs)
        b = FrozenEncoder(seed=99)(imgs)
        np.testing.assert_array_equal(a, b)

    def test_injective_on_patches(self):
        enc = FrozenEncoder()
        imgs = np.full((2, 1, 32, 32), 0.5)
        imgs[1, 0, :8, :8] += 0.25
        z = enc(imgs)
        assert not np.allclose(z[0, 0], z[1, 0])
        np.testing.assert_array_equal(z[0, 1:], z[1, 1:])

    def test_projection_orthonormal_columns(self):
        enc = FrozenEncoder()
        gram = enc.projection.T @ enc.projection
        np.testing.assert_allclose(gram, np.eye(64), atol=1e-10)

    def test_frozen_through_training(self):
        enc = FrozenEncoder()
        before = enc.param_hash()
        dec = Decoder(enc.shape, seed=1)
        train_decoder(enc, dec, datagen.DomainMix(), LossWeights(),
                      NoiseAugConfig(), epochs=1, seed=0,
                      samples_per_epoch=8, batch_size=8, val_per_domain=2)
        assert enc.param_hash() == before


class TestDecoder:
    def test_output_shape(self):
        enc = FrozenEncoder()
        dec = Decoder(enc.shape, seed=0)
        imgs = datagen.render_domain_batch("smooth", 2, 1)
        out = dec(enc(imgs))
        assert out.shape == (2, 1, 32, 32)

    def test_linear_decoder_inverts_linear_encoder(self):
        # with tanh disabled and a square orthogonal projection the exact
        # inverse is the transpose, reachable by a depth-0 decoder
        enc = FrozenEncoder(squash=False)
        dec = Decoder(enc.shape, depth=0, seed=0)
        dec.params["decoder/l0/w"].data = enc.projection.T.copy()
        dec.params["decoder/l0/b"].data = np.zeros(64)
        imgs = datagen.render_domain_batch("texture", 4, 2)
        rec = dec(enc(imgs)).data
        assert np.abs(rec - imgs).mean() <= 1e-3

    def test_shape_mismatch(self):
        dec = Decoder(LatentShape(16, 64))
        with pytest.raises(ValueError):
            dec(np.zeros((1, 16, 32)))

    def test_decode_counter_increments(self):
        dec = Decoder(LatentShape(16, 64), seed=0)
        before = rae.DECODE_CALLS
        dec(np.zeros((1, 16, 64)))
        assert rae.DECODE_CALLS == before + 1


class TestGramLoss:
    def test_equal_inputs_zero(self):
        f = Tensor(T.rng(3).normal(size=(2, 4, 5)))
        assert gram_loss(f, f).item() == 0.0

    def test_token_permutation_anchor(self):
        f1 = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        f2 = Tensor(np.array([[[0.0, 1.0], [1.0, 0.0]]]))
        assert gram_loss(f1, f2).item() == pytest.approx(0.0, abs=1e-15)

    def test_hand_computed_anchor(self):
        f1 = Tensor(np.array([[[1.0, 0.0], [0.0, 0.0]]]))
        f2 = Tensor(np.zeros((1, 2, 2)))
        assert gram_loss(f1, f2).item() == pytest.approx(1.0 / 16.0, abs=1e-15)

    def test_symmetric_and_permutation_invariant(self):
        g = T.rng(4)
        a, b = Tensor(g.normal(size=(1, 5, 3))), Tensor(g.normal(size=(1, 5, 3)))
        assert gram_loss(a, b).item() == pytest.approx(gram_loss(b, a).item())
        perm = g.permutation(5)
        ap, bp = Tensor(a.data[:, perm]), Tensor(b.data[:, perm])
        assert gram_loss(ap, bp).item() == pytest.approx(gram_loss(a, b).item(),
                                                         abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gram_loss(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 3, 2))))


class TestReconLoss:
    ENC = FrozenEncoder()

    def test_perfect_reconstruction(self):
        x = datagen.render_domain_batch("smooth", 2, 7)
        total, breakdown = recon_loss(x, Tensor(x.copy()), LossWeights(),
                                      self.ENC.features)
        assert total.item() == 0.0
        assert all(v == 0.0 for v in breakdown.values())

    def test_pure_l1(self):
        x = np.zeros((2, 1, 32, 32))
        x_hat = Tensor(np.full((2, 1, 32, 32), 0.5))
        total, _ = recon_loss(x, x_hat, LossWeights(0.0, 0.0, 0.0),
                              self.ENC.features)
        assert total.item() == pytest.approx(0.5, abs=1e-15)

    def test_breakdown_sums_to_total(self):
        x = datagen.render_domain_batch("texture", 2, 8)
        x_hat = Tensor(x + 0.05)
        w = LossWeights()
        total, br = recon_loss(x, x_hat, w, self.ENC.features)
        weighted = (br["l1"] + w.omega_l * br["perceptual"]
                    + w.omega_g * br["gram"] + w.omega_a * br["adv"])
        assert abs(weighted - total.item()) <= 1e-12
        assert all(v >= 0 for v in br.values())

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(omega_g=-1.0)


class TestNoiseAugment:
    def test_tau_zero_identity(self):
        z = T.rng(5).normal(size=(4, 2, 3))
        out = noise_augment(z, NoiseAugConfig(tau=0.0), seed=1)
        np.testing.assert_array_equal(out, z)
        assert out is not z

    def test_disabled_identity(self):
        z = T.rng(6).normal(size=(4, 2, 3))
        out = noise_augment(z, NoiseAugConfig(tau=0.2, enabled=False), seed=1)
        np.testing.assert_array_equal(out, z)

    def test_half_normal_mean(self):
        n = 10 ** 5
        sig = half_normal_sigmas(0.2, n, 77)
        mean = 0.2 * np.sqrt(2 / np.pi)
        se = 0.2 * np.sqrt(1 - 2 / np.pi) / np.sqrt(n)
        assert abs(sig.mean() - mean) <= 3 * se
        assert (sig >= 0).all()

    def test_zero_mean_perturbation(self):
        z = np.zeros((10 ** 5, 1, 1))
        out = noise_augment(z, NoiseAugConfig(tau=0.2), seed=78)
        delta = out - z
        se = 0.2 / np.sqrt(10 ** 5)
        assert abs(delta.mean()) <= 4 * se

    def test_variance_integrates_to_tau_squared(self):
        z = np.zeros((10 ** 5, 1, 1))
        out = noise_augment(z, NoiseAugConfig(tau=0.2), seed=79)
        assert out.var() == pytest.approx(0.2 ** 2, rel=0.05)

    def test_negative_tau_rejected(self):
        with pytest.raises(ValueError):
            NoiseAugConfig(tau=-0.1)


class TestFrechet:
    def test_identical_sets(self):
        a = T.rng(7).normal(size=(50, 6))
        assert frechet_feature_distance(a, a.copy()) <= 1e-8

    def test_mean_shift_closed_form(self):
        g = T.rng(8)
        delta = 1.5
        a = g.normal(size=(10 ** 4, 8))
        b = g.normal(size=(10 ** 4, 8))
        b[:, 0] += delta
        d = frechet_feature_distance(a, b)
        assert d == pytest.approx(delta ** 2, rel=0.05)

    def test_symmetry(self):
        g = T.rng(9)
        a, b = g.normal(size=(40, 5)), 0.5 * g.normal(size=(40, 5)) + 1.0
        assert frechet_feature_distance(a, b) == pytest.approx(
            frechet_feature_distance(b, a), rel=1e-9)

    def test_sample_order_invariance(self):
        g = T.rng(10)
        a, b = g.normal(size=(40, 5)), g.normal(size=(40, 5))
        perm = g.permutation(40)
        assert frechet_feature_distance(a[perm], b) == pytest.approx(
            frechet_feature_distance(a, b), abs=1e-9)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            frechet_feature_distance(np.zeros((1, 3)), np.zeros((5, 3)))


class TestCompressedAutoencoder:
    def test_shapes(self):
        cae = CompressedAutoencoder(seed=0)
        assert cae.shape == LatentShape(16, 4)
        imgs = datagen.render_domain_batch("smooth", 2, 3)
        z = cae.encode(imgs)
        assert z.shape == (2, 16, 4)
        assert cae.decode(z).shape == (2, 1, 32, 32)

    def test_fit_improves_reconstruction(self):
        imgs = datagen.render_domain_batch("smooth", 32, 4)
        cae = CompressedAutoencoder(seed=1)
        before = np.abs(cae.decode(cae.encode(imgs)).data - imgs).mean()
        cae.fit(imgs, steps=150, seed=2)
        after = np.abs(cae.decode(cae.encode(imgs)).data - imgs).mean()
        assert after < before


class TestTrainDecoder:
    def test_zero_epochs(self):
        enc = FrozenEncoder()
        dec = Decoder(enc.shape, seed=3)
        report = train_decoder(enc, dec, datagen.DomainMix(), LossWeights(),
                               NoiseAugConfig(), epochs=0, seed=1,
                               val_per_domain=2)
        assert all(r.step == 0 for r in report.records)
        assert report.last("val_l1_combined") > 0

    def test_training_improves_validation(self):
        enc = FrozenEncoder()
        dec = Decoder(enc.shape, seed=4)
        report = train_decoder(enc, dec, datagen.DomainMix(), LossWeights(),
                               NoiseAugConfig(enabled=False), epochs=2, seed=2,
                               samples_per_epoch=64, batch_size=16,
                               lr=3e-3, val_per_domain=4)
        vals = [v for _, v in report.values("val_l1_combined")]
        assert vals[-1] < vals[0]
