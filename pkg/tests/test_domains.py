import math

import numpy as np
import pytest

from lvattack import data as D
from lvattack import domains as A
from lvattack import tensor as T
from lvattack.domains import InfluencerMask, Vocabulary
from lvattack.tensor import SeededRng, Tensor


def toy_vocab(v=8, d=4, seed=0):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((v, d))
    return Vocabulary([f"w{i}" for i in range(v)], Tensor(emb))


class TestCombineAdditive:
    def test_zero_delta_is_identity(self):
        x = Tensor([0.2, 0.4])
        out = A.combine_additive(Tensor([0.0, 0.0]), x)
        assert np.array_equal(out.data, x.data)

    def test_clamp_only_at_evaluation(self):
        x = Tensor([0.9])
        delta = Tensor([0.3])
        train = A.combine_additive(delta, x, evaluation=False, clamp=(0.0, 1.0))
        ev = A.combine_additive(delta, x, evaluation=True, clamp=(0.0, 1.0))
        assert train.data[0] == pytest.approx(1.2)
        assert ev.data[0] == 1.0

    def test_l2_similarity_equals_delta_norm(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal(6))
        delta = Tensor(rng.standard_normal(6))
        x_prime = A.combine_additive(delta, x)
        got = A.similarity("l2", x, x_prime).item()
        assert got == pytest.approx(np.linalg.norm(delta.data), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            A.combine_additive(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestCombineMasked:
    def _mask(self, n, attacker, target):
        b = np.zeros(n)
        b[attacker] = 1.0
        return InfluencerMask(b, np.asarray(attacker, dtype=np.intp), np.asarray(target, dtype=np.intp))

    def test_all_zero_mask_is_identity_bits(self):
        x = Tensor(np.random.default_rng(2).standard_normal((4, 3)))
        delta = Tensor(np.random.default_rng(3).standard_normal((4, 3)))
        mask = self._mask(4, [], [2])
        out = A.combine_masked(delta, x, mask)
        assert out.data.tobytes() == x.data.tobytes()

    def test_target_row_never_changes(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = Tensor(rng.standard_normal((5, 3)))
            delta = Tensor(rng.standard_normal((5, 3)) * 10)
            mask = self._mask(5, [0, 2], [3])
            out = A.combine_masked(delta, x, mask)
            assert out.data[3].tobytes() == x.data[3].tobytes()

    def test_full_mask_equals_additive(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 2)))
        delta = Tensor(rng.standard_normal((3, 2)))
        mask = self._mask(3, [0, 1, 2], [0, 1, 2])
        masked = A.combine_masked(delta, x, mask)
        additive = A.combine_additive(delta, x)
        assert np.array_equal(masked.data, additive.data)

    def test_gradient_blocked_on_masked_rows(self):
        mask = self._mask(3, [1], [0])
        x = Tensor(np.random.default_rng(6).standard_normal((3, 2)))

        def f(delta):
            return T.reduce_sum(T.mul(A.combine_masked(delta, x, mask), A.combine_masked(delta, x, mask)))

        rep = T.finite_diff_check(f, Tensor(np.random.default_rng(7).standard_normal((3, 2))))
        assert rep.passed
        # rows outside the attacker set contribute nothing
        assert np.array_equal(rep.analytic[[0, 2]], np.zeros((2, 2)))

    def test_mask_invariants(self):
        with pytest.raises(ValueError, match="exclude"):
            self._mask(4, [1, 2], [2])
        with pytest.raises(ValueError, match="attacker"):
            InfluencerMask(np.ones(3), np.array([0]), np.array([1]))


class TestSoftNearestNeighbor:
    def test_low_temperature_recovers_nearest(self):
        vocab = Vocabulary(["a", "b"], Tensor([[1.0, 0.0], [0.0, 1.0]]))
        mixed, weights = A.soft_nn_mixture(Tensor([0.9, 0.1]), vocab, tau=0.01)
        assert np.max(np.abs(mixed.data - np.array([1.0, 0.0]))) < 1e-6
        assert weights.data[0] > 1.0 - 1e-6

    def test_equidistant_gives_uniform_average(self):
        vocab = Vocabulary(["a", "b"], Tensor([[1.0, 0.0], [0.0, 1.0]]))
        mixed, weights = A.soft_nn_mixture(Tensor([1.0, 1.0]), vocab, tau=1.0)
        assert np.allclose(weights.data, [0.5, 0.5], atol=1e-12)
        assert np.allclose(mixed.data, [0.5, 0.5], atol=1e-12)

    def test_weights_match_scalar_oracle(self):
        vocab = toy_vocab(v=6, d=3, seed=8)
        rng = np.random.default_rng(9)
        p = rng.standard_normal(3)
        # independent scalar computation of softmax over negated angles
        alphas = []
        for row in vocab.embeddings.data:
            cos = float(np.dot(row, p) / (np.linalg.norm(row) * np.linalg.norm(p)))
            alphas.append(math.acos(max(-1.0, min(1.0, cos))))
        exps = [math.exp(-a / 1.0) for a in alphas]
        expected = np.array([e / sum(exps) for e in exps])
        _, weights = A.soft_nn_mixture(Tensor(p), vocab, tau=1.0)
        assert np.max(np.abs(weights.data - expected)) < 1e-12

    def test_weights_sum_to_one(self):
        vocab = toy_vocab(v=12, d=5, seed=10)
        rng = np.random.default_rng(11)
        for tau in (0.05, 1.0, 10.0):
            for _ in range(20):
                _, weights = A.soft_nn_mixture(Tensor(rng.standard_normal(5)), vocab, tau)
                assert abs(weights.data.sum() - 1.0) < 1e-12
                assert np.all(weights.data >= 0)

    def test_zero_vector_degeneracy(self):
        vocab = toy_vocab()
        with pytest.raises(ValueError, match="zero"):
            A.soft_nn_mixture(Tensor(np.zeros(4)), vocab, tau=1.0)

    def test_combine_adds_to_token_embedding(self):
        vocab = toy_vocab(v=5, d=4, seed=12)
        delta = Tensor(np.zeros(4))
        out = A.soft_nn_combine(delta, 2, vocab, tau=0.01)
        # zero delta at low temperature reproduces the token's own embedding
        assert np.max(np.abs(out.data - vocab.row(2))) < 1e-6

    def test_gradient_wrt_delta(self):
        vocab = toy_vocab(v=7, d=4, seed=13)
        probe = Tensor(np.random.default_rng(14).standard_normal(4))

        def f(delta):
            mixed = A.soft_nn_combine(delta, 1, vocab, tau=0.7)
            return T.matmul(mixed, probe)

        rep = T.finite_diff_check(f, Tensor(np.random.default_rng(15).standard_normal(4) * 0.3))
        assert rep.passed, rep.max_rel_error


class TestHardProjection:
    def test_exact_hit(self):
        vocab = toy_vocab(v=6, d=4, seed=16)
        for i in range(6):
            assert A.hard_nn_project(vocab.row(i), vocab) == i

    def test_scale_invariance(self):
        vocab = toy_vocab(v=6, d=4, seed=17)
        for i in range(6):
            assert A.hard_nn_project(2.0 * vocab.row(i), vocab) == i

    def test_thousand_queries_match_linear_scan(self):
        vocab = toy_vocab(v=30, d=6, seed=18)
        rng = np.random.default_rng(19)
        emb = vocab.embeddings.data
        norms = np.linalg.norm(emb, axis=1)
        agree = 0
        for _ in range(1000):
            q = rng.standard_normal(6)
            best, best_alpha = -1, np.inf
            for w in range(len(vocab)):
                cos = np.dot(emb[w], q) / (norms[w] * np.linalg.norm(q))
                alpha = math.acos(max(-1.0, min(1.0, cos)))
                if alpha < best_alpha:
                    best, best_alpha = w, alpha
            agree += int(A.hard_nn_project(q, vocab) == best)
        assert agree == 1000

    def test_zero_vector(self):
        with pytest.raises(ValueError, match="zero"):
            A.hard_nn_project(np.zeros(4), toy_vocab())

    def test_soft_converges_to_hard(self):
        vocab = toy_vocab(v=100, d=16, seed=20)
        rng = np.random.default_rng(21)
        agree = 0
        for _ in range(1000):
            q = rng.standard_normal(16)
            mixed, _ = A.soft_nn_mixture(Tensor(q), vocab, tau=0.01)
            agree += int(A.hard_nn_project(mixed, vocab) == A.hard_nn_project(q, vocab))
        assert agree >= 990


class TestInfluencerSelection:
    def _graph(self, adjacency):
        n = adjacency.shape[0]
        return D.GraphDataset(adjacency, np.ones((n, 2)), np.zeros(n, dtype=np.intp), 2)

    def _ring(self, n, degree):
        adj = np.zeros((n, n))
        for i in range(n):
            for d in range(1, degree // 2 + 1):
                adj[i, (i + d) % n] = adj[(i + d) % n, i] = 1
        return self._graph(adj)

    def test_rich_neighborhood_samples_neighbors(self):
        graph = self._ring(20, 8)  # every node has 8 neighbors
        mask = A.select_influencer_set(graph, 3, k=5, rng=SeededRng(0))
        assert len(mask.attacker_set) == 5
        neighbors = set(np.flatnonzero(graph.adjacency[3]))
        assert set(mask.attacker_set) <= neighbors

    def test_sparse_neighborhood_padded_to_k(self):
        adj = np.zeros((10, 10))
        for j in (1, 2, 3):
            adj[0, j] = adj[j, 0] = 1
        graph = self._graph(adj)
        mask = A.select_influencer_set(graph, 0, k=5, rng=SeededRng(1))
        assert len(mask.attacker_set) == 5
        assert {1, 2, 3} <= set(mask.attacker_set)
        assert 0 not in mask.attacker_set

    def test_target_never_in_attacker_set(self):
        graph = self._ring(12, 4)
        for seed in range(1000):
            mask = A.select_influencer_set(graph, seed % 12, k=5, rng=SeededRng(seed))
            assert (seed % 12) not in mask.attacker_set
            assert len(mask.attacker_set) == 5

    def test_single_node_graph(self):
        graph = D.GraphDataset(np.zeros((1, 1)), np.ones((1, 2)), np.zeros(1, dtype=np.intp), 2)
        with pytest.raises(ValueError, match="single-node"):
            A.select_influencer_set(graph, 0, rng=SeededRng(0))

    def test_determinism_per_stream(self):
        graph = self._ring(16, 6)
        a = A.select_influencer_set(graph, 4, rng=SeededRng(7).derive(4))
        b = A.select_influencer_set(graph, 4, rng=SeededRng(7).derive(4))
        assert np.array_equal(a.attacker_set, b.attacker_set)


class TestSimilarity:
    def test_identical_inputs(self):
        x = Tensor([1.0, 2.0])
        assert A.similarity("l2", x, Tensor([1.0, 2.0])).item() == 0.0
        assert A.similarity("angular", x, Tensor([1.0, 2.0])).item() == pytest.approx(0.0, abs=2e-6)

    def test_l2_distance(self):
        assert A.similarity("l2", Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == 5.0

    def test_angular_right_angle(self):
        got = A.similarity("angular", Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item()
        assert got == pytest.approx(np.pi / 2, abs=1e-9)

    def test_angular_zero_vector(self):
        with pytest.raises(ValueError, match="zero"):
            A.similarity("angular", Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))

    def test_l2_zero_iff_equal(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal(5)
        y = x + 1e-9
        assert A.similarity("l2", Tensor(x), Tensor(x.copy())).item() == 0.0
        assert A.similarity("l2", Tensor(x), Tensor(y)).item() > 0.0


class TestTokenMetrics:
    def test_identical(self):
        assert A.token_change_rate([1, 2, 3], [1, 2, 3]) == 0.0

    def test_all_changed(self):
        assert A.token_change_rate([1, 2], [2, 1]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="lengths"):
            A.token_change_rate([1, 2], [1, 2, 3])

    def test_cap_enforcement(self):
        orig = np.zeros(20, dtype=int)
        cand = np.ones(20, dtype=int)  # tries to change every position
        norms = np.arange(20.0)
        capped = A.enforce_token_cap(orig, cand, norms, cap_fraction=0.15)
        changed = np.flatnonzero(capped != orig)
        assert len(changed) == 3  # floor(0.15 * 20)
        assert set(changed) == {17, 18, 19}  # the largest perturbations win

    def test_cap_keeps_small_change_sets(self):
        orig = np.array([5, 6, 7, 8])
        cand = np.array([5, 9, 7, 8])
        capped = A.enforce_token_cap(orig, cand, np.ones(4), cap_fraction=0.5)
        assert np.array_equal(capped, cand)


class TestVocabulary:
    def test_duplicate_tokens_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Vocabulary(["a", "a"], Tensor(np.ones((2, 3))))

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError, match="nonzero"):
            Vocabulary(["a", "b"], Tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="tokens"):
            Vocabulary(["a"], Tensor(np.ones((2, 3))))

    def test_save_load_round_trip(self, tmp_path):
        vocab = toy_vocab(v=9, d=4, seed=23)
        base = str(tmp_path / "vocab")
        A.save_vocabulary(base, vocab)
        back = A.load_vocabulary(base)
        assert back.tokens == vocab.tokens
        assert back.embeddings.data.tobytes() == vocab.embeddings.data.tobytes()
