import numpy as np
import pytest

from sve.data import (CORRUPTIONS, CorruptionSpec, CsvSchema, DataError, Dataset, TaskSpec,
                      class_centres, corrupt, load_csv, load_csv_splits, load_idx, make_clusters,
                      ood_pair, sample, source_target_split, write_idx)

SPEC = TaskSpec(n_classes=4, dim=8, signal_dim=2, spread=0.1, geometry_seed=3)


def test_sample_shapes_and_balance():
    d = sample(SPEC, 25, seed=0)
    assert d.x.shape == (100, 8)
    assert np.bincount(d.y).tolist() == [25] * 4
    assert d.provenance["seed"] == 0


def test_sample_is_deterministic_and_seeded():
    a, b = sample(SPEC, 10, 1), sample(SPEC, 10, 1)
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.x, sample(SPEC, 10, 2).x)
    assert not np.array_equal(a.x, sample(SPEC, 10, 1, "test").x)


def test_class_means_near_centres():
    d = sample(TaskSpec(n_classes=3, dim=5, signal_dim=2, spread=0.05), 400, 0)
    centres = class_centres(TaskSpec(n_classes=3, dim=5, signal_dim=2))
    norms = [np.linalg.norm(d.x[d.y == c].mean(axis=0)) for c in range(3)]
    np.testing.assert_allclose(norms, np.linalg.norm(centres[:, 0], axis=1), atol=0.02)


def test_make_clusters():
    d = make_clusters(3, 5, 4, 0.1, seed=0)
    assert d.x.shape == (15, 4) and d.n_classes == 3
    with pytest.raises(ValueError):
        make_clusters(1, 5, 4, 0.1, seed=0)


def test_source_target_overlap():
    spec = TaskSpec(n_classes=4, dim=8, signal_dim=4, modes=1, spread=0.01, geometry_seed=2)
    src, tgt = source_target_split(spec, 0.5, 50, 50, seed=0)
    for c in range(4):
        gap = np.linalg.norm(src.x[src.y == c].mean(0) - tgt.x[tgt.y == c].mean(0))
        assert (gap < 0.05) == (c < 2)
    with pytest.raises(ValueError):
        source_target_split(spec, 1.5, 5, 5, 0)


@pytest.mark.parametrize("kind", sorted(CORRUPTIONS))
def test_corruption_grows_with_severity(kind):
    d = sample(SPEC, 50, 0)
    dist = [np.linalg.norm(corrupt(d, CorruptionSpec(kind, s), 0).x - d.x) for s in range(1, 6)]
    assert all(a < b for a, b in zip(dist, dist[1:]))
    again = corrupt(d, CorruptionSpec(kind, 3), 0)
    np.testing.assert_array_equal(again.x, corrupt(d, CorruptionSpec(kind, 3), 0).x)
    assert again.provenance["severity"] == 3


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("blur", 1)
    with pytest.raises(ValueError):
        CorruptionSpec("gaussian_noise", 6)


def test_ood_pair_warns_on_identical_specs():
    with pytest.warns(UserWarning):
        ood_pair(SPEC, SPEC, 5, 0)
    ind, ood = ood_pair(SPEC, TaskSpec(n_classes=4, dim=8, geometry_seed=99), 5, 0)
    assert ood.split_tag == "ood" and len(ind) == 20


def test_dataset_validation():
    with pytest.raises(IndexError):
        Dataset(np.zeros((2, 3)), [0, 5], 3)
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), [0], 1)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3)), [0], 3)


class TestCsv:
    def write(self, tmp_path, name, text):
        p = tmp_path / name
        p.write_text(text)
        return p

    def test_round_trip_and_standardization(self, tmp_path):
        train = self.write(tmp_path, "train.csv", "a,b,label\n1,10,0\n3,30,1\n")
        test = self.write(tmp_path, "test.csv", "a,b,label\n2,20,1\n")
        tr, te = load_csv_splits(train, test, CsvSchema("label"))
        np.testing.assert_allclose(tr.x, [[-1, -1], [1, 1]])
        np.testing.assert_allclose(te.x, [[0, 0]])
        assert len(tr.provenance["sha256"]) == 64

    def test_errors_name_the_line(self, tmp_path):
        p = self.write(tmp_path, "bad.csv", "a,label\n1,0\nx,1\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(p, CsvSchema("label"))
        p = self.write(tmp_path, "short.csv", "a,label\n1\n")
        with pytest.raises(DataError, match="line 2"):
            load_csv(p, CsvSchema("label"))

    def test_missing_label_column(self, tmp_path):
        p = self.write(tmp_path, "nolabel.csv", "a,b\n1,2\n")
        with pytest.raises(DataError, match="label"):
            load_csv(p, CsvSchema("label"))

    def test_test_split_needs_train_statistics(self, tmp_path):
        p = self.write(tmp_path, "t.csv", "a,label\n1,0\n")
        with pytest.raises(ValueError):
            load_csv(p, CsvSchema("label"), split_tag="test")


def test_idx_round_trip(tmp_path):
    images = (np.arange(2 * 3 * 3) % 256).reshape(2, 3, 3)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", [0, 1])
    d = load_idx(tmp_path / "img", tmp_path / "lab")
    assert d.x.shape == (2, 9) and d.y.tolist() == [0, 1]
    with pytest.raises(DataError):
        load_idx(tmp_path / "lab", tmp_path / "img")
