import os

import numpy as np
import pytest

from lvattack import data as D
from lvattack.tensor import SeededRng

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def linear_classifier_accuracy(inputs, labels, n_classes):
    # least-squares one-vs-rest fit, evaluated on the same points
    x = np.hstack([inputs, np.ones((len(inputs), 1))])
    onehot = np.eye(n_classes)[labels]
    w, *_ = np.linalg.lstsq(x, onehot, rcond=None)
    return float(np.mean(np.argmax(x @ w, axis=1) == labels))


class TestSyntheticGenerators:
    def test_well_separated_blobs_are_linearly_separable(self):
        ds = D.gen_synthetic("blobs", {"n": 300, "classes": 2, "dim": 4, "radius": 0.5, "std": 0.1}, SeededRng(0))
        # centers are 1.0 apart = 10 standard deviations
        assert linear_classifier_accuracy(ds.inputs, ds.labels, 2) >= 0.99

    def test_same_seed_identical_bytes(self):
        a = D.gen_synthetic("blobs", {"n": 50, "classes": 3, "dim": 5}, SeededRng(7))
        b = D.gen_synthetic("blobs", {"n": 50, "classes": 3, "dim": 5}, SeededRng(7))
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.splits, b.splits)

    def test_labels_balanced_within_one(self):
        for kind, params in (
            ("blobs", {"n": 101, "classes": 3, "dim": 4}),
            ("tokens", {"n": 50, "classes": 4, "vocab_size": 30, "seq_len": 6}),
        ):
            ds = D.gen_synthetic(kind, params, SeededRng(1))
            counts = np.bincount(ds.labels, minlength=params["classes"])
            assert counts.max() - counts.min() <= 1

    def test_tokens_shape_and_range(self):
        ds = D.gen_synthetic("tokens", {"n": 20, "classes": 2, "vocab_size": 15, "seq_len": 9}, SeededRng(2))
        assert ds.domain == "text"
        assert ds.inputs.shape == (20, 9)
        assert ds.inputs.min() >= 0 and ds.inputs.max() < 15

    def test_images_shape_and_range(self):
        ds = D.gen_synthetic("images", {"n": 12, "classes": 2, "channels": 2, "size": 8}, SeededRng(3))
        assert ds.domain == "image"
        assert ds.inputs.shape == (12, 2, 8, 8)
        assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0

    def test_rings(self):
        ds = D.gen_synthetic("rings", {"n": 40, "classes": 2}, SeededRng(4))
        assert ds.inputs.shape == (40, 2)

    def test_sbm_graph_invariants(self):
        g = D.gen_synthetic("sbm-graph", {"n": 60, "classes": 3, "dim": 12, "p_in": 0.3, "p_out": 0.02}, SeededRng(5))
        assert np.max(np.abs(g.adjacency - g.adjacency.T)) == 0
        assert np.all(np.diag(g.adjacency) == 0)
        assert set(np.unique(g.adjacency)) <= {0.0, 1.0}
        overlap = (
            (g.train_mask & g.val_mask).any()
            or (g.train_mask & g.test_mask).any()
            or (g.val_mask & g.test_mask).any()
        )
        assert not overlap
        assert (g.train_mask | g.val_mask | g.test_mask).all()

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            D.gen_synthetic("blobs", {"n": 1, "classes": 2}, SeededRng(0))
        with pytest.raises(ValueError):
            D.gen_synthetic("blobs", {"n": 10, "classes": 1}, SeededRng(0))
        with pytest.raises(ValueError, match="unknown"):
            D.gen_synthetic("genomes", {}, SeededRng(0))


class TestCitationLoader:
    def test_mini_fixture_loads(self):
        g = D.load_citation_graph(os.path.join(FIXTURES, "mini.content"), os.path.join(FIXTURES, "mini.cites"))
        with open(os.path.join(FIXTURES, "mini.content")) as fh:
            n_lines = sum(1 for line in fh if line.strip())
        assert g.n_nodes == n_lines
        assert np.max(np.abs(g.adjacency - g.adjacency.T)) == 0
        assert np.all(np.diag(g.adjacency) == 0)
        assert g.n_classes == 3
        assert g.meta["skipped_edges"] == 0
        sums = g.features.sum(axis=1)
        assert np.allclose(sums[sums > 0], 1.0)

    def test_three_node_golden_fixture(self, tmp_path):
        content = tmp_path / "g.content"
        cites = tmp_path / "g.cites"
        content.write_text("a\t1\t0\tx\nb\t1\t1\ty\nc\t0\t1\tx\n")
        cites.write_text("a\tb\nb\tc\n")
        g = D.load_citation_graph(content, cites)
        assert np.array_equal(g.adjacency, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        assert np.array_equal(g.features, [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
        assert np.array_equal(g.labels, [0, 1, 0])  # classes sorted: x=0, y=1

    def test_unknown_edge_skipped_with_count(self, tmp_path):
        (tmp_path / "g.content").write_text("a\t1\t0\tx\nb\t0\t1\ty\n")
        (tmp_path / "g.cites").write_text("a\tb\na\tghost\n")
        g = D.load_citation_graph(tmp_path / "g.content", tmp_path / "g.cites")
        assert g.meta["skipped_edges"] == 1
        assert g.adjacency.sum() == 2

    def test_malformed_line_reports_number(self, tmp_path):
        (tmp_path / "g.content").write_text("a\t1\t0\tx\nb\n")
        (tmp_path / "g.cites").write_text("")
        with pytest.raises(ValueError, match=":2"):
            D.load_citation_graph(tmp_path / "g.content", tmp_path / "g.cites")

    def test_inconsistent_feature_width(self, tmp_path):
        (tmp_path / "g.content").write_text("a\t1\t0\tx\nb\t1\t0\t1\ty\n")
        (tmp_path / "g.cites").write_text("")
        with pytest.raises(ValueError, match=":2"):
            D.load_citation_graph(tmp_path / "g.content", tmp_path / "g.cites")


class TestSplitNodes:
    def _graph(self, n):
        return D.GraphDataset(np.zeros((n, n)), np.ones((n, 2)), np.zeros(n, dtype=np.intp), 2)

    def test_hundred_nodes(self):
        train, val, test = D.split_nodes(self._graph(100), SeededRng(0))
        assert (train.sum(), val.sum(), test.sum()) == (10, 10, 80)

    def test_disjoint_and_exhaustive(self):
        train, val, test = D.split_nodes(self._graph(57), SeededRng(1))
        assert not (train & val).any() and not (train & test).any() and not (val & test).any()
        assert (train | val | test).all()

    def test_deterministic(self):
        a = D.split_nodes(self._graph(40), SeededRng(3))
        b = D.split_nodes(self._graph(40), SeededRng(3))
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_alternative_reading(self):
        train, val, test = D.split_nodes(self._graph(100), SeededRng(0), scheme="tenth-of-labeled")
        assert (train.sum(), val.sum(), test.sum()) == (2, 18, 80)

    def test_too_small(self):
        with pytest.raises(ValueError, match="10"):
            D.split_nodes(self._graph(9), SeededRng(0))


class TestPersistence:
    def test_vector_round_trip(self, tmp_path):
        ds = D.gen_synthetic("blobs", {"n": 30, "classes": 2, "dim": 3}, SeededRng(9))
        base = str(tmp_path / "ds")
        D.save_dataset(base, ds)
        back = D.load_dataset(base)
        assert back.inputs.tobytes() == ds.inputs.tobytes()
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.splits, ds.splits)
        assert back.domain == ds.domain and back.n_classes == ds.n_classes

    def test_text_round_trip_keeps_integer_tokens(self, tmp_path):
        ds = D.gen_synthetic("tokens", {"n": 10, "classes": 2, "vocab_size": 9, "seq_len": 5}, SeededRng(10))
        base = str(tmp_path / "tok")
        D.save_dataset(base, ds)
        back = D.load_dataset(base)
        assert back.inputs.dtype == np.intp
        assert np.array_equal(back.inputs, ds.inputs)

    def test_graph_round_trip(self, tmp_path):
        g = D.gen_synthetic("sbm-graph", {"n": 25, "classes": 2, "dim": 8}, SeededRng(11))
        base = str(tmp_path / "graph")
        D.save_dataset(base, g)
        back = D.load_dataset(base)
        assert back.adjacency.tobytes() == g.adjacency.tobytes()
        assert back.features.tobytes() == g.features.tobytes()
        assert np.array_equal(back.train_mask, g.train_mask)

    def test_version_mismatch_names_both(self, tmp_path):
        ds = D.gen_synthetic("blobs", {"n": 10, "classes": 2, "dim": 3}, SeededRng(12))
        base = str(tmp_path / "v")
        D.save_dataset(base, ds)
        doctored = (tmp_path / "v.json").read_text().replace('"v": 1', '"v": 3')
        (tmp_path / "v.json").write_text(doctored)
        with pytest.raises(ValueError) as err:
            D.load_dataset(base)
        assert "3" in str(err.value) and "1" in str(err.value)

    def test_truncated_sidecar(self, tmp_path):
        ds = D.gen_synthetic("blobs", {"n": 10, "classes": 2, "dim": 3}, SeededRng(13))
        base = str(tmp_path / "t")
        D.save_dataset(base, ds)
        raw = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ValueError, match="truncated"):
            D.load_dataset(base)
