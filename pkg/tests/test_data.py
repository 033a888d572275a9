import numpy as np
import pytest

from lcwof.data import (TEST, TRAIN, DatasetError, FeatureDataset, SplitConfig, generate_synthetic, load_features,
                        save_binary, save_csv, split)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(6, 5, 4, 3, 0.3, 0)


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_round_trip_is_exact(ds, tmp_path, suffix):
    path = tmp_path / f"d{suffix}"
    (save_csv if suffix == ".csv" else save_binary)(ds, path)
    back = load_features(path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.split, ds.split)


def test_explicit_format_overrides_suffix(ds, tmp_path):
    path = tmp_path / "d.data"
    save_csv(ds, path)
    assert len(load_features(path, format="csv")) == len(ds)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_features("/nonexistent/features.csv")


@pytest.mark.parametrize("text,msg", [
    ("", "empty"),
    ("a,b,label,split\n", "f0"),
    ("f0,label,split\n1.0,0\n", "expected 3"),
    ("f0,label,split\n1.0,0,val\n", "unknown split"),
    ("f0,label,split\nx,0,train\n", ":2:"),
    ("f0,label,split\n1.0,0,train\n2.0,2,test\n", "label gaps"),
    ("f0,label,split\nnan,0,train\n", "NaN"),
])
def test_malformed_csv(tmp_path, text, msg):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DatasetError, match=msg):
        load_features(path)


def test_truncated_binary(ds, tmp_path):
    path = tmp_path / "d.bin"
    save_binary(ds, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DatasetError, match="size"):
        load_features(path)


def test_synthetic_counts_and_determinism(ds):
    assert len(ds) == 6 * 7 and ds.dim == 5
    assert (ds.split == TRAIN).sum() == 24 and (ds.split == TEST).sum() == 18
    again = generate_synthetic(6, 5, 4, 3, 0.3, 0)
    assert np.array_equal(again.features, ds.features)


def test_synthetic_nearest_centroid_is_separable():
    d = generate_synthetic(25, 32, 50, 15, 0.3, 0)
    tr, te = d.with_split(TRAIN), d.with_split(TEST)
    cents = np.stack([tr.features[tr.labels == c].mean(0) for c in range(25)])
    pred = np.argmin(((te.features[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == te.labels) >= 0.9


def test_spread_is_pairwise_difference_std():
    d = generate_synthetic(1, 2000, 2, 1, 0.3, 1)
    x = d.features
    assert np.std(x[0] - x[1]) == pytest.approx(0.3, rel=0.05)


def test_split_partitions_classes():
    d = generate_synthetic(10, 3, 2, 2, 0.3, 0)
    base, val, novel = split(d, SplitConfig.contiguous(5, 2, 3))
    assert base.class_ids == [0, 1, 2, 3, 4] and val.class_ids == [5, 6] and novel.class_ids == [7, 8, 9]
    _, none_val, _ = split(d, SplitConfig((0,), (1,)))
    assert none_val is None


def test_split_validation():
    d = generate_synthetic(4, 3, 2, 2, 0.3, 0)
    with pytest.raises(DatasetError, match="disjoint"):
        SplitConfig((0, 1), (1, 2))
    with pytest.raises(DatasetError, match="not present"):
        split(d, SplitConfig((0,), (9,)))


def test_dataset_rejects_inconsistent_arrays():
    with pytest.raises(DatasetError):
        FeatureDataset(np.zeros((3, 2)), np.zeros(2), np.zeros(3))
    with pytest.raises(DatasetError):
        FeatureDataset(np.zeros((1, 2)), np.zeros(1), np.full(1, 7))
