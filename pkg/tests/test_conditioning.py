import numpy as np
import pytest

from raedesk import tensor as T
from raedesk import datagen
from raedesk import rae
from raedesk.conditioning import (Conditioner, ConditionerConfig, ConditionProbe,
                                  VerifierScore, best_k_of_n, confidence_verifier,
                                  oracle_verifier, select_best_k, tts_experiment)
from raedesk.datagen import MixtureSpec, default_mixture_spec
from raedesk.schedule import ShiftedSchedule
from raedesk.tensor import Tensor


def _unit_spec():
    spec = MixtureSpec(num_tokens=2, token_dim=4)
    spec.means.append(np.zeros((1, 2, 4)))
    spec.stds.append(np.array([1.0]))
    spec.weights.append(np.array([1.0]))
    spec.validate()
    return spec


class TestConditioner:
    CFG = ConditionerConfig(num_conditions=4, cond_dim=8)

    def test_same_id_same_vector(self):
        cond = Conditioner(self.CFG, seed=1)
        a = cond(np.array([2, 2])).data
        np.testing.assert_array_equal(a[0], a[1])

    def test_distinct_ids_distinct_vectors(self):
        cond = Conditioner(self.CFG, seed=1)
        vecs = cond(np.arange(4)).data
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.array_equal(vecs[i], vecs[j])

    def test_out_of_range(self):
        cond = Conditioner(self.CFG, seed=1)
        with pytest.raises(ValueError):
            cond(np.array([4]))

    def test_gradient_reaches_table(self):
        cond = Conditioner(self.CFG, seed=1)
        state = T.OptimizerState(cond.parameters(), lr=1e-2)
        before = cond.table.data.copy()
        loss = T.square(cond(np.array([0, 1]))).sum()
        T.zero_grads(cond.parameters())
        loss.backward()
        T.adamw_step(state)
        assert not np.array_equal(cond.table.data, before)


class TestOracleVerifier:
    def test_score_at_mean(self):
        spec = _unit_spec()
        score = oracle_verifier(np.zeros((1, 2, 4)), 0, spec)
        assert score[0] == pytest.approx(-(8 / 2) * np.log(2 * np.pi), abs=1e-12)

    def test_monotone_in_distance(self):
        spec = _unit_spec()
        pts = np.array([0.0, 0.5, 1.0, 3.0])[:, None, None] * np.ones((4, 2, 4))
        scores = oracle_verifier(pts, 0, spec)
        assert (np.diff(scores) < 0).all()

    def test_deterministic(self):
        spec = default_mixture_spec()
        z = datagen.sample_latents(spec, 1, 5, 3)
        np.testing.assert_array_equal(oracle_verifier(z, 1, spec),
                                      oracle_verifier(z, 1, spec))


class TestConfidenceVerifier:
    def test_untrained_probe_rejected(self):
        probe = ConditionProbe(16, 4)
        with pytest.raises(RuntimeError):
            confidence_verifier(np.zeros((2, 8, 16)), 0, probe)

    def test_uniform_probe_scores(self):
        probe = ConditionProbe(16, 4, seed=0)
        probe.w2.data[:] = 0.0
        probe.b2.data[:] = 0.0
        probe.trained = True
        scores = confidence_verifier(T.rng(1).normal(size=(3, 8, 16)), 2, probe)
        np.testing.assert_allclose(scores, -np.log(4.0), atol=1e-12)

    def test_trained_probe_beats_chance(self):
        spec = default_mixture_spec()
        probe = ConditionProbe(spec.token_dim, spec.num_conditions, seed=5)
        acc = probe.fit(spec, steps=120, seed=6)
        assert acc > 1.0 / spec.num_conditions

    def test_correct_condition_scores_higher(self):
        spec = default_mixture_spec()
        probe = ConditionProbe(spec.token_dim, spec.num_conditions, seed=5)
        probe.fit(spec, steps=120, seed=6)
        z = datagen.sample_latents(spec, 0, 64, 9)
        right = confidence_verifier(z, 0, probe).mean()
        wrong = confidence_verifier(z, 1, probe).mean()
        assert right > wrong

    def test_order_invariance(self):
        spec = default_mixture_spec()
        probe = ConditionProbe(spec.token_dim, spec.num_conditions, seed=5)
        probe.fit(spec, steps=40, seed=6)
        z = datagen.sample_latents(spec, 0, 10, 11)
        perm = T.rng(12).permutation(10)
        np.testing.assert_allclose(confidence_verifier(z[perm], 0, probe),
                                   confidence_verifier(z, 0, probe)[perm])


class TestSelection:
    def test_sort_anchor(self):
        assert select_best_k(np.array([3.0, 1.0, 2.0]), 2) == [0, 2]

    def test_identity_when_k_equals_n(self):
        assert select_best_k(np.array([1.0, 5.0, 2.0]), 3) == [0, 1, 2]

    def test_single_candidate(self):
        assert select_best_k(np.array([7.0]), 1) == [0]

    def test_tie_break_lower_index(self):
        assert select_best_k(np.array([1.0, 1.0, 1.0]), 2) == [0, 1]

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            select_best_k(np.array([1.0, 2.0]), 3)
        with pytest.raises(ValueError):
            select_best_k(np.array([1.0, 2.0]), 0)

    def test_permutation_consistency(self):
        g = T.rng(13)
        scores = g.normal(size=12)
        sel = set(select_best_k(scores, 4))
        perm = g.permutation(12)
        sel_p = {perm[i] for i in select_best_k(scores[perm], 4)}
        assert sel_p == sel

    def test_no_mutation_and_copy(self):
        g = T.rng(14)
        cands = g.normal(size=(5, 2, 3))
        before = cands.copy()
        scores = g.normal(size=5)
        selected, vs = best_k_of_n(cands, scores, 2)
        np.testing.assert_array_equal(cands, before)
        selected[:] = 0.0
        np.testing.assert_array_equal(cands, before)
        assert all(isinstance(v, VerifierScore) for v in vs)
        assert [v.candidate for v in vs] == select_best_k(scores, 2)

    def test_max_of_iid_monotone_in_n(self):
        # prefix property: best of the first 16 is at least best of the
        # first 8, checked exactly over 200 trials
        g = T.rng(15)
        wins = ties = 0
        for _ in range(200):
            scores = g.normal(size=16)
            m8 = scores[select_best_k(scores[:8], 1)[0]]
            m16 = scores[select_best_k(scores, 1)[0]]
            assert m16 >= m8
            wins += m16 > m8
            ties += m16 == m8
        assert wins + ties == 200 and wins > 0


class TestTtsExperiment:
    SPEC = default_mixture_spec()
    SCHED = ShiftedSchedule.from_alpha(1.0)

    def _zero_model(self):
        return lambda x, t, c: Tensor(np.zeros(x.shape))

    def _conditioner(self):
        return Conditioner(ConditionerConfig(num_conditions=4, cond_dim=32), 3)

    def test_report_shape(self):
        report = tts_experiment(self._zero_model(), self._conditioner(),
                                self.SCHED, self.SPEC, "oracle", k=2,
                                n_grid=[4, 8], trials=3, seed=1, steps=2)
        for n in (4, 8):
            assert len(report.values(f"selected_oracle_mean_n{n}")) == 3

    def test_oracle_monotone_per_trial(self):
        report = tts_experiment(self._zero_model(), self._conditioner(),
                                self.SCHED, self.SPEC, "oracle", k=2,
                                n_grid=[4, 8, 16], trials=4, seed=2, steps=2)
        for trial in range(4):
            means = [dict(report.values(f"selected_oracle_mean_n{n}"))[trial]
                     for n in (4, 8, 16)]
            assert means[0] <= means[1] <= means[2]

    def test_no_decode_calls(self):
        before = rae.DECODE_CALLS
        tts_experiment(self._zero_model(), self._conditioner(), self.SCHED,
                       self.SPEC, "oracle", k=1, n_grid=[2], trials=2,
                       seed=3, steps=2)
        assert rae.DECODE_CALLS == before

    def test_confidence_requires_probe(self):
        with pytest.raises(RuntimeError):
            tts_experiment(self._zero_model(), self._conditioner(), self.SCHED,
                           self.SPEC, "confidence", k=1, n_grid=[2], trials=1,
                           seed=4, steps=2)

    def test_n_below_k_rejected(self):
        with pytest.raises(ValueError):
            tts_experiment(self._zero_model(), self._conditioner(), self.SCHED,
                           self.SPEC, "oracle", k=4, n_grid=[2], trials=1,
                           seed=5, steps=2)
