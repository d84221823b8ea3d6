import numpy as np
import pytest

from lvattack import data as D
from lvattack import layers as L
from lvattack import targets as M
from lvattack import tensor as T
from lvattack.tensor import GradientTape, SeededRng, Tensor


def blobs(n=200, seed=0, std=0.4, radius=1.0, dim=4):
    return D.gen_synthetic(
        "blobs", {"n": n, "classes": 2, "dim": dim, "radius": radius, "std": std}, SeededRng(seed)
    )


class TestScores:
    def test_zero_weight_mlp_gives_zero_logits(self):
        model = M.MlpClassifier(3, 8, 2, SeededRng(0))
        for _, t in model.parameters():
            t.data[:] = 0.0
        out = model.scores(Tensor([1.0, -2.0, 0.5]))
        assert np.array_equal(out.data, [0.0, 0.0])

    def test_prediction_tie_breaks_to_lowest_class(self):
        model = M.MlpClassifier(2, 4, 3, SeededRng(1))
        for _, t in model.parameters():
            t.data[:] = 0.0
        assert M.predict(model, Tensor([1.0, 1.0])) == 0

    def test_input_gradient_of_max_logit(self):
        model = M.MlpClassifier(4, 6, 3, SeededRng(2))

        def f(x):
            return T.reduce_max(model.scores(x))

        rep = T.finite_diff_check(f, Tensor(np.random.default_rng(3).standard_normal(4)))
        assert rep.passed, rep.max_rel_error

    def test_scores_deterministic(self):
        model = M.MlpClassifier(4, 6, 3, SeededRng(4))
        x = Tensor(np.random.default_rng(5).standard_normal(4))
        assert model.scores(x).data.tobytes() == model.scores(x).data.tobytes()

    def test_zero_perturbation_leaves_scores_bit_identical(self):
        model = M.MlpClassifier(4, 6, 3, SeededRng(6))
        x = np.random.default_rng(7).standard_normal(4)
        a = model.scores(Tensor(x)).data.tobytes()
        b = model.scores(Tensor(x + np.zeros(4))).data.tobytes()
        assert a == b

    def test_shape_mismatch(self):
        model = M.MlpClassifier(4, 6, 3, SeededRng(8))
        with pytest.raises(ValueError, match="in_dim"):
            model.scores(Tensor(np.zeros(5)))


class TestLstmClassifier:
    def test_token_and_embedding_paths_agree(self):
        model = M.LstmClassifier(vocab_size=11, emb_dim=5, hidden=7, n_classes=2, rng=SeededRng(9))
        ids = np.array([3, 1, 4, 1, 5])
        via_tokens = model.scores_tokens(ids).data
        via_emb = model.scores_embeddings(Tensor(model.embeddings.data[ids])).data
        assert np.allclose(via_tokens, via_emb, atol=1e-14)

    def test_embedding_input_gradient(self):
        model = M.LstmClassifier(vocab_size=9, emb_dim=4, hidden=5, n_classes=2, rng=SeededRng(10))

        def f(seq):
            return T.reduce_max(model.scores_embeddings(seq))

        rep = T.finite_diff_check(f, Tensor(np.random.default_rng(11).standard_normal((3, 4))))
        assert rep.passed, rep.max_rel_error

    def test_rejects_out_of_range_tokens(self):
        model = M.LstmClassifier(vocab_size=5, emb_dim=3, hidden=4, n_classes=2, rng=SeededRng(0))
        with pytest.raises(ValueError, match="ids"):
            model.scores_tokens(np.array([0, 5]))


class TestGcnClassifier:
    def _setup(self, seed=12):
        graph = D.gen_synthetic("sbm-graph", {"n": 40, "classes": 2, "dim": 10}, SeededRng(seed))
        a_hat = L.gcn_normalize(Tensor(graph.adjacency))
        model = M.GcnClassifier(a_hat, 10, 2, SeededRng(seed + 1))
        return graph, model

    def test_incremental_scores_match_full_recompute(self):
        graph, model = self._setup()
        rng = np.random.default_rng(13)
        node = 7
        attacker_idx = np.array([3, 7, 19])
        delta = rng.standard_normal((3, 10))
        clean = model.scores(Tensor(graph.features)).data

        perturbed = graph.features.copy()
        perturbed[attacker_idx] += delta
        full = model.scores(Tensor(perturbed)).data[node]

        fast = model.node_scores_with_delta(clean[node], Tensor(delta), attacker_idx, node).data
        assert np.allclose(fast, full, atol=1e-10)

    def test_incremental_scores_gradient(self):
        graph, model = self._setup(14)
        clean = model.scores(Tensor(graph.features)).data

        def f(delta):
            s = model.node_scores_with_delta(clean[5], delta, [2, 5], 5)
            return T.reduce_max(s)

        rep = T.finite_diff_check(f, Tensor(np.random.default_rng(15).standard_normal((2, 10))))
        assert rep.passed, rep.max_rel_error


class TestTraining:
    def test_mlp_on_separable_blobs(self):
        ds = blobs(n=200, seed=20, std=0.2, radius=1.0)
        model = M.MlpClassifier(4, 16, 2, SeededRng(21))
        _, history = M.train_target(model, ds, epochs=40, lr=1e-2, seed=22)
        assert history["validation"][-1] >= 0.95
        assert model.frozen
        assert len(history["train"]) == 40

    def test_constant_label_dataset(self):
        ds = blobs(n=60, seed=23)
        ds.labels[:] = 1
        model = M.MlpClassifier(4, 8, 2, SeededRng(24))
        M.train_target(model, ds, epochs=15, lr=1e-2)
        assert M.accuracy(model, ds) == 1.0

    def test_gcn_on_block_model(self):
        graph = D.gen_synthetic(
            "sbm-graph", {"n": 120, "classes": 2, "dim": 16, "p_in": 0.2, "p_out": 0.01}, SeededRng(25)
        )
        a_hat = L.gcn_normalize(Tensor(graph.adjacency))
        model = M.GcnClassifier(a_hat, 16, 2, SeededRng(26))
        _, history = M.train_target(model, graph, epochs=100, lr=1e-2)
        assert history["validation"][-1] >= 0.8

    def test_lstm_on_toy_tokens(self):
        ds = D.gen_synthetic(
            "tokens", {"n": 80, "classes": 2, "vocab_size": 20, "seq_len": 8, "signal": 0.8}, SeededRng(27)
        )
        model = M.LstmClassifier(20, 8, 16, 2, SeededRng(28))
        _, history = M.train_target(model, ds, epochs=12, lr=1e-2, batch_size=16, seed=29)
        assert history["train"][-1] >= 0.9

    def test_empty_dataset_rejected(self):
        ds = blobs(n=20, seed=30)
        ds.splits[:] = "test"
        model = M.MlpClassifier(4, 8, 2, SeededRng(31))
        with pytest.raises(ValueError, match="empty"):
            M.train_target(model, ds, epochs=1, lr=1e-2)


class TestAccuracy:
    def test_empty_selection_scores_zero_with_warning(self, caplog):
        ds = blobs(n=20, seed=32)
        ds.splits[:] = "train"
        model = M.MlpClassifier(4, 8, 2, SeededRng(33))
        with caplog.at_level("WARNING"):
            value = M.accuracy(model, ds, split="test")
        assert value == 0.0
        assert any("empty" in rec.message for rec in caplog.records)

    def test_random_guess_baseline(self):
        rng = SeededRng(34)
        ds = blobs(n=1000, seed=35)
        # labels independent of inputs: accuracy must sit near 1/C
        ds.labels = rng.integers(0, 2, 1000).astype(np.intp)
        model = M.MlpClassifier(4, 8, 2, SeededRng(36))
        assert abs(M.accuracy(model, ds) - 0.5) < 0.05


class TestPersistence:
    def test_round_trip_preserves_scores(self, tmp_path):
        model = M.MlpClassifier(4, 8, 3, SeededRng(37))
        base = str(tmp_path / "target")
        M.save_target(base, model)
        back = M.load_target(base)
        x = Tensor(np.random.default_rng(38).standard_normal(4))
        assert np.array_equal(back.scores(x).data, model.scores(x).data)
        assert back.frozen

    def test_checksum_stable_across_scores(self):
        model = M.MlpClassifier(4, 8, 2, SeededRng(39))
        before = M.param_checksum(model)
        model.scores(Tensor(np.zeros(4)))
        tape = GradientTape()
        T.backward(T.reduce_max(model.scores(Tensor(np.ones(4)), tape)))
        assert M.param_checksum(model) == before
