import numpy as np
import pytest

from raedesk import tensor as T
from raedesk.denoiser import (Denoiser, DenoiserConfig, backbone_widths, build,
                              param_count, param_specs, sinusoidal_embedding)
from raedesk.flow import fm_loss, interpolate
from raedesk.tensor import Tensor
from raedesk.train import gradcheck

SMALL = DenoiserConfig(hidden=32, depth=1, heads=2, num_tokens=4, token_dim=8,
                       cond_dim=8)


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValueError):
            DenoiserConfig(hidden=30, heads=4)

    def test_head_must_exceed_backbone(self):
        with pytest.raises(ValueError):
            DenoiserConfig(hidden=64, ddt_head_width=64)

    def test_head_depth_positive(self):
        with pytest.raises(ValueError):
            DenoiserConfig(hidden=64, ddt_head_width=160, ddt_head_depth=0)


class TestBuild:
    def test_deterministic(self):
        a = build(SMALL, 11)
        b = build(SMALL, 11)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_seeds_differ(self):
        a = build(SMALL, 11)
        b = build(SMALL, 12)
        assert not np.array_equal(a.params["denoiser/in_proj/w"].data,
                                  b.params["denoiser/in_proj/w"].data)

    def test_initial_output_is_zero(self):
        model = build(SMALL, 3)
        x = T.seeded_normal((5, 4, 8), 4)
        out = model(x, np.full(5, 0.7), T.rng(5).normal(size=(5, 8)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_output_shape(self):
        cfg = DenoiserConfig()
        model = build(cfg, 0)
        out = model(T.seeded_normal((3, 8, 16), 1), np.full(3, 0.5))
        assert out.shape == (3, 8, 16)

    def test_shape_mismatch_rejected(self):
        model = build(SMALL, 0)
        with pytest.raises(ValueError):
            model(T.seeded_normal((2, 4, 9), 1), np.full(2, 0.5))


class TestParamCount:
    def test_head_strictly_increases_count(self):
        base = DenoiserConfig(hidden=64, depth=2)
        headed = DenoiserConfig(hidden=64, depth=2, ddt_head_width=160)
        assert param_count(base) < param_count(headed)

    def test_matches_built_model(self):
        for seed in (0, 1):
            model = build(SMALL, seed)
            total = sum(int(np.prod(p.shape)) for p in model.parameters())
            assert total == param_count(SMALL)

    def test_spec_ordering_is_stable(self):
        names = [n for n, _, _ in param_specs(SMALL)]
        assert names == [n for n, _, _ in param_specs(SMALL)]
        assert len(names) == len(set(names))


class TestStructure:
    def test_backbone_never_exceeds_hidden_with_head(self):
        cfg = DenoiserConfig(hidden=48, depth=2, heads=4, ddt_head_width=160)
        assert max(backbone_widths(cfg)) <= cfg.hidden

    def test_headed_forward_shape(self):
        cfg = DenoiserConfig(hidden=32, depth=1, heads=2, num_tokens=4,
                             token_dim=8, cond_dim=8, ddt_head_width=48,
                             ddt_head_depth=1)
        model = build(cfg, 2)
        out = model(T.seeded_normal((2, 4, 8), 3), np.full(2, 0.5))
        assert out.shape == (2, 4, 8)

    def test_sinusoidal_embedding_range_and_shape(self):
        emb = sinusoidal_embedding(np.linspace(0, 1, 7), 32)
        assert emb.shape == (7, 32)
        assert np.abs(emb).max() <= 1.0 + 1e-12
        assert not np.array_equal(emb[0], emb[1])


class TestForward:
    def _trained_small(self):
        model = build(SMALL, 6)
        g = T.rng(7)
        for p in model.parameters():
            p.data = p.data + 0.02 * g.normal(size=p.shape)
        return model

    def test_batch_permutation_equivariance(self):
        model = self._trained_small()
        g = T.rng(8)
        x = g.normal(size=(5, 4, 8))
        t = g.random(5)
        cond = g.normal(size=(5, 8))
        out = model(Tensor(x), t, cond).data
        perm = g.permutation(5)
        out_p = model(Tensor(x[perm]), t[perm], cond[perm]).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-10)

    def test_condition_changes_output(self):
        model = self._trained_small()
        x = T.seeded_normal((2, 4, 8), 9)
        t = np.full(2, 0.5)
        a = model(x, t, np.zeros((2, 8))).data
        b = model(x, t, np.ones((2, 8))).data
        assert not np.allclose(a, b)

    def test_gradcheck_scope(self):
        for name, err in gradcheck("denoiser").items():
            assert err <= 1e-4, f"{name}: {err}"


class TestTrainingSmoke:
    def test_loss_decreases_on_fixed_gaussian_task(self):
        model = build(SMALL, 13)
        state = T.OptimizerState(model.parameters(), lr=1e-3)
        g = T.rng(14)
        first = last = None
        for step in range(200):
            x = 0.5 * g.normal(size=(16, 4, 8))
            eps = g.normal(size=(16, 4, 8))
            sample = interpolate(x, eps, g.random(16))
            loss = fm_loss(model, sample)
            if step == 0:
                first = loss.item()
            last = loss.item()
            T.zero_grads(model.parameters())
            loss.backward()
            T.adamw_step(state)
        assert last < first
