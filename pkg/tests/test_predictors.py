import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptkg import tensor as T
from promptkg.errors import ConfigError, ContractError
from promptkg.gradcheck import check_gradients
from promptkg.predictors import (AblationMode, ConvE, DistMult, FusionWeights, StructuralHead, TextualHead,
                                 TransE, component_attention, component_scores, ensemble_scores, kge_score,
                                 make_scorer, map_prompt_to_struct, select_single_component,
                                 structural_scores, textual_loss, textual_scores, total_loss)
from promptkg.tensor import Parameter, Tensor


def loop_rank(scores, gold):
    return 1 + sum(1 for i, s in enumerate(scores) if i != gold and s >= scores[gold])


class TestTextual:
    def test_orthonormal_retrieval(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        head = TextualHead(q.T.copy(), rng)
        head.w_o.data[:] = np.eye(6)
        for j in range(6):
            assert int(np.argmax(textual_scores(Tensor(q.T[j:j + 1]), head).data)) == j

    def test_zero_hidden(self, rng):
        head = TextualHead(rng.normal(size=(5, 4)), rng)
        assert np.all(textual_scores(Tensor(np.zeros((1, 4))), head).data == 0.0)

    def test_loop_oracle(self, rng):
        table = rng.normal(size=(5, 4))
        head = TextualHead(table, rng)
        m = rng.normal(size=4)
        got = textual_scores(Tensor(m[None]), head).data[0]
        W = head.w_o.data
        for i in range(5):
            want = sum(table[i, a] * W[a, b] * m[b] for a in range(4) for b in range(4))
            assert got[i] == pytest.approx(want, abs=1e-10)

    def test_text_table_frozen(self, rng):
        head = TextualHead(rng.normal(size=(5, 4)), rng)
        assert head.e_text.frozen and head.e_text not in head.trainable_parameters()

    def test_loss_bad_gold(self):
        with pytest.raises(IndexError):
            textual_loss(Tensor(np.zeros((1, 3))), [3])


class TestMapping:
    def head(self, rng):
        return StructuralHead(4, 3, 2, DistMult(4), rng)

    def test_zero_block(self, rng):
        assert np.all(map_prompt_to_struct(Tensor(np.zeros((2, 3))), self.head(rng)).data == 0)

    def test_linear(self, rng):
        head = self.head(rng)
        x = rng.normal(size=(2, 3))
        np.testing.assert_allclose(map_prompt_to_struct(Tensor(2 * x), head).data,
                                   2 * map_prompt_to_struct(Tensor(x), head).data, atol=1e-14)

    def test_loop_oracle(self, rng):
        head = self.head(rng)
        x = rng.normal(size=(2, 3))
        got = map_prompt_to_struct(Tensor(x), head).data
        flat = [x[i, j] for i in range(2) for j in range(3)]
        for o in range(4):
            assert got[o] == pytest.approx(sum(head.w_p2s.data[o, c] * flat[c] for c in range(6)), abs=1e-10)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ConfigError):
            map_prompt_to_struct(Tensor(np.zeros((3, 3))), self.head(rng))


class TestScorers:
    def test_transe_zero(self):
        assert kge_score(TransE(2, gamma=1.0), np.zeros(2), np.zeros(2), np.zeros(2)) == 1.0

    def test_distmult_hand(self):
        assert kge_score(DistMult(2), [1.0, 2.0], [1.0, 1.0], [3.0, 1.0]) == 5.0

    def test_transe_hand(self):
        assert kge_score(TransE(2, gamma=2.0), [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]) == 2.0

    def test_conve_reshape_mismatch(self, rng):
        with pytest.raises(ConfigError):
            ConvE(10, 3, 2, 2, rng)
        with pytest.raises(ConfigError):
            ConvE(8, 4, 2, 3, rng)

    def test_conve_matches_manual_pipeline(self, rng):
        conv = ConvE(8, 2, 3, 2, rng)
        vh, r, vt = rng.normal(size=8), rng.normal(size=8), rng.normal(size=8)
        image = np.concatenate([vh.reshape(2, 4), r.reshape(2, 4)], axis=0)
        k = conv.kernels.data
        feat = np.zeros((3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    feat[o, i, j] = np.sum(image[i:i + 2, j:j + 2] * k[o, 0]) + conv.conv_bias.data[o, 0, 0]
        hidden = np.maximum(np.maximum(feat, 0).reshape(-1) @ conv.fc.data + conv.fc_bias.data, 0)
        assert kge_score(conv, vh, r, vt) == pytest.approx(float(hidden @ vt), abs=1e-12)

    @pytest.mark.parametrize("kind", ["transe", "distmult", "conve"])
    def test_score_all_matches_pairwise(self, kind, rng):
        scorer = make_scorer(kind, 8, rng, conve_rows=2, conve_kernels=2, conve_kernel_size=2)
        heads, rel, cands = rng.normal(size=(3, 2, 8)), rng.normal(size=(3, 8)), rng.normal(size=(2, 5, 8))
        got = scorer.score_all(Tensor(heads), Tensor(rel), Tensor(cands)).data
        for b, k, e in itertools.product(range(3), range(2), range(5)):
            assert got[b, k, e] == pytest.approx(kge_score(scorer, heads[b, k], rel[b], cands[k, e]), abs=1e-9)

    def test_unknown_scorer(self, rng):
        with pytest.raises(ConfigError):
            make_scorer("rotate", 8, rng)


class TestComponentAttention:
    def test_single(self):
        np.testing.assert_array_equal(component_attention(Tensor(np.ones((1, 3))), Tensor(np.ones(3))).data, [[1.0]])

    def test_equidistant(self):
        beta = component_attention(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([1.0, 1.0])).data
        np.testing.assert_allclose(beta, [[0.5, 0.5]])

    def test_k4_hand(self, rng):
        comps, rel = rng.normal(size=(4, 3)), rng.normal(size=3)
        logits = [sum(comps[k, i] * rel[i] for i in range(3)) for k in range(4)]
        expected = np.exp(logits) / np.sum(np.exp(logits))
        np.testing.assert_allclose(component_attention(Tensor(comps), Tensor(rel)).data[0], expected, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from([1, 2, 4, 6]), st.integers(0, 10_000))
    def test_normalized(self, K, seed):
        r = np.random.default_rng(seed)
        beta = component_attention(Tensor(r.normal(scale=10, size=(3, K, 5))), Tensor(r.normal(size=(3, 5)))).data
        np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-9)


class TestStructuralScores:
    def setup(self, rng, K):
        head = StructuralHead(4, 2, 1, TransE(4), rng)
        return head, Tensor(rng.normal(size=(2, K, 4))), Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(5, K, 4)))

    def test_single_component(self, rng):
        head, comps, rel, cands = self.setup(rng, 1)
        scores, beta = structural_scores(comps, rel, cands, head)
        np.testing.assert_array_equal(beta.data, np.ones((2, 1)))
        np.testing.assert_allclose(scores.data, component_scores(comps, rel, cands, head).data[:, 0], atol=0)

    def test_degenerate_beta(self, rng):
        head, comps, rel, cands = self.setup(rng, 2)
        beta = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        scores, _ = structural_scores(comps, rel, cands, head, beta=beta)
        np.testing.assert_array_equal(scores.data, component_scores(comps, rel, cands, head).data[:, 0])

    def test_brute_force(self, rng):
        head, comps, rel, cands = self.setup(rng, 2)
        scores, beta = structural_scores(comps, rel, cands, head)
        for b, e in itertools.product(range(2), range(5)):
            want = sum(beta.data[b, k] * (9.0 - np.sum((comps.data[b, k] + rel.data[b] - cands.data[e, k]) ** 2))
                       for k in range(2))
            assert scores.data[b, e] == pytest.approx(want, abs=1e-9)


class TestFusion:
    def test_unit_weights(self):
        fusion = FusionWeights()
        assert total_loss(Tensor(1.5), Tensor(2.0), Tensor(3.0), fusion, 0.0).item() == 3.5

    def test_mi_linear(self):
        fusion = FusionWeights()
        a = total_loss(Tensor(1.0), Tensor(1.0), Tensor(2.0), fusion, 0.1).item()
        b = total_loss(Tensor(1.0), Tensor(1.0), Tensor(2.0), fusion, 0.3).item()
        assert b - 2.0 == pytest.approx(3 * (a - 2.0))

    def test_log_sigma_gradient(self):
        fusion = FusionWeights()
        fusion.log_sigma.data[:] = [0.4, -0.7]
        lt, ls = Parameter([1.3], name="lt"), Parameter([0.6], name="ls")
        errs = check_gradients(lambda: total_loss(T.reduce_sum(lt), T.reduce_sum(ls), Tensor(0.2), fusion),
                               [fusion.log_sigma, lt, ls])
        assert max(errs.values()) < 1e-6

    def test_swap_symmetry(self):
        f1, f2 = FusionWeights(), FusionWeights()
        f1.log_sigma.data[:] = [0.2, 0.9]
        f2.log_sigma.data[:] = [0.9, 0.2]
        a = total_loss(Tensor(1.0), Tensor(4.0), Tensor(0.5), f1).item()
        b = total_loss(Tensor(4.0), Tensor(1.0), Tensor(0.5), f2).item()
        assert a == b

    def test_no_textual_term(self):
        fusion = FusionWeights()
        fusion.log_sigma.data[:] = [5.0, 0.5]
        got = total_loss(None, Tensor(2.0), Tensor(0.0), fusion).item()
        assert got == pytest.approx(np.exp(-0.5) * 2.0 + 0.5)

    def test_weights_positive(self):
        fusion = FusionWeights()
        fusion.log_sigma.data[:] = [50.0, -50.0]
        assert np.all(fusion.weights() > 0)
        assert fusion.normalized().sum() == pytest.approx(1.0)

    def test_ensemble_equal_inputs(self, rng):
        q = rng.normal(size=(2, 5))
        np.testing.assert_allclose(ensemble_scores(q, q, FusionWeights()), q, atol=1e-15)

    def test_ensemble_degenerate_weight(self, rng):
        fusion = FusionWeights()
        fusion.log_sigma.data[:] = [0.0, 800.0]
        qt, qs = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
        assert list(np.argsort(-ensemble_scores(qt, qs, fusion)[0])) == list(np.argsort(-qt[0]))

    def test_ensemble_manual_sort(self):
        fusion = FusionWeights()
        fusion.log_sigma.data[:] = [-np.log(0.7), -np.log(0.3)]
        qt = np.array([[1.0, 0.0, 0.5]])
        qs = np.array([[0.0, 3.0, 1.0]])
        combined = ensemble_scores(qt, qs, fusion)[0]
        np.testing.assert_allclose(combined, [0.7, 0.9, 0.65])
        assert [loop_rank(combined, g) for g in range(3)] == [2, 1, 3]

    def test_ensemble_needs_both(self, rng):
        with pytest.raises(ContractError):
            ensemble_scores(None, rng.normal(size=(1, 3)), FusionWeights())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_ensemble_monotone(self, seed):
        r = np.random.default_rng(seed)
        fusion = FusionWeights()
        fusion.log_sigma.data[:] = r.normal(size=2)
        qt, qs = r.normal(size=(1, 8)), r.normal(size=(1, 8))
        c = ensemble_scores(qt, qs, fusion)[0]
        for a, b in itertools.permutations(range(8), 2):
            if qt[0, a] > qt[0, b] and qs[0, a] > qs[0, b]:
                assert c[a] > c[b]


class TestSelectSingle:
    def test_k1(self):
        assert select_single_component(np.ones((1, 3)), np.ones(3)) == 0

    def test_hand(self):
        assert select_single_component(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.0, 2.0])) == 1

    def test_tie_lowest(self):
        assert select_single_component(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([1.0, 0.0])) == 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_positive_scale_invariant(self, seed, scale):
        r = np.random.default_rng(seed)
        comps, rel = r.normal(size=(4, 5)), r.normal(size=5)
        assert select_single_component(comps, rel) == select_single_component(comps, rel * scale)

    def test_batched(self, rng):
        comps, rel = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 5))
        got = select_single_component(comps, rel)
        assert list(got) == [select_single_component(comps[b], rel[b]) for b in range(3)]


def test_ablation_modes():
    assert [m.value for m in AblationMode] == ["full", "single_component", "no_disen", "no_textual_predictor"]
    assert not AblationMode.NO_TEXTUAL_PREDICTOR.textual and AblationMode.FULL.textual
