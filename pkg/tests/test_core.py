import numpy as np
import pytest

from envshift.core import (ContentLabel, EnvDataset, RngHandle, Sample, Split, dataset_view,
                           dumps_dataset, load_dataset, loads_dataset, save_dataset, split_rng)
from envshift.errors import ConfigError, EmptySelection, UnknownEnv


def _toy():
    X = np.arange(12, dtype=float).reshape(6, 2)
    env = [0, 0, 1, 1, 2, 2]
    lab = [0, 1, 0, 1, 0, 2]
    spl = [0, 0, 0, 0, 1, 1]
    return EnvDataset(X, env, lab, spl, {0, 1}, {2}, regime="C", seed=3)


def test_rng_same_label_same_stream():
    a = RngHandle(5, "x").generator().standard_normal(4)
    b = RngHandle(5, "x").generator().standard_normal(4)
    assert np.array_equal(a, b)


def test_rng_children_are_independent():
    root = RngHandle(5, "root")
    a = split_rng(root, "a").generator().standard_normal(4)
    b = split_rng(root, "b").generator().standard_normal(4)
    assert not np.array_equal(a, b)
    assert root.child("a").stream_label == "root/a"


def test_rng_child_does_not_depend_on_sibling_use():
    root = RngHandle(1, "r")
    g = root.child("a").generator()
    g.standard_normal(100)
    assert np.array_equal(root.child("b").generator().uniform(size=3),
                          RngHandle(1, "r/b").generator().uniform(size=3))


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(ConfigError):
        RngHandle(-1)
    with pytest.raises(ConfigError):
        RngHandle(2**64)


def test_dataset_is_read_only():
    ds = _toy()
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0
    assert ds.d_x == 2 and len(ds) == 6


def test_dataset_rejects_train_anomalies():
    with pytest.raises(ValueError):
        EnvDataset(np.zeros((2, 1)), [0, 0], [0, 2], [0, 0], {0}, set())


def test_dataset_rejects_undeclared_env():
    with pytest.raises(ValueError):
        EnvDataset(np.zeros((2, 1)), [0, 5], [0, 1], [0, 0], {0}, set())


def test_dataset_rejects_train_rows_in_test_only_env():
    with pytest.raises(ValueError):
        EnvDataset(np.zeros((2, 1)), [0, 1], [0, 1], [0, 0], {0}, {1})


def test_view_and_mask():
    ds = _toy()
    X, y, env = dataset_view(ds, Split.TEST)
    assert X.shape == (2, 2) and list(y) == [0, 1] and list(env) == [2, 2]
    X, y, env = dataset_view(ds, Split.TRAIN, envs=[1])
    assert list(env) == [1, 1] and np.array_equal(X, [[4, 5], [6, 7]])


def test_view_errors():
    ds = _toy()
    with pytest.raises(UnknownEnv):
        ds.mask(Split.TRAIN, envs=[9])
    with pytest.raises(EmptySelection):
        dataset_view(ds, Split.TEST, envs=[0])


def test_samples_round_trip():
    ds = _toy()
    again = EnvDataset.from_samples(ds.samples, ds.train_envs, ds.test_envs, ds.regime, ds.seed)
    assert dumps_dataset(again) == dumps_dataset(ds)
    assert isinstance(ds.samples[0], Sample)
    assert ds.samples[5].content_label is ContentLabel.ANOMALY


def test_text_format_round_trip_is_bit_exact(tmp_path):
    g = np.random.default_rng(0)
    X = g.standard_normal((5, 3)) * 10.0 ** g.integers(-300, 300, size=(5, 3))
    ds = EnvDataset(X, [0, 1, 0, 1, 2], [0, 1, 1, 0, 2], [0, 0, 0, 0, 1], {0, 1}, {2}, seed=9)
    path = tmp_path / "d.ds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.features, ds.features)
    assert back.fingerprint() == ds.fingerprint()
    assert path.read_text().splitlines()[1].startswith("d_x=3 regime=D seed=9 train_envs=0,1")


def test_text_format_rejects_garbage():
    with pytest.raises(ValueError):
        loads_dataset("hello\n")
    text = dumps_dataset(_toy()).splitlines()
    with pytest.raises(ValueError):
        loads_dataset("\n".join(text[:-1]) + "\n")
