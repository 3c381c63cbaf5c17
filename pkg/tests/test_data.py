import numpy as np
import pytest

from pbn import pbnt
from pbn.data import (Dataset, FeatureScaler, SynthSpec, extract_features, load_dataset, save_dataset,
                      synth_dataset, two_fold_split)
from pbn.errors import FormatError

SMALL = SynthSpec(classes=3, per_class=4, length=1024)


def test_synth_is_deterministic_and_bounded():
    a, b = synth_dataset(SMALL, seed=1), synth_dataset(SMALL, seed=1)
    np.testing.assert_array_equal(a.signals, b.signals)
    assert a.signals.shape == (12, 1024)
    np.testing.assert_allclose(np.abs(a.signals).max(axis=1), 0.25)
    np.testing.assert_array_equal(np.bincount(a.labels), [4, 4, 4])
    assert a.classes == 3
    assert not np.array_equal(a.signals, synth_dataset(SMALL, seed=2).signals)


def test_classes_have_distinct_spectra():
    data = synth_dataset(SynthSpec(classes=2, per_class=20, length=2048), seed=0)
    feats = extract_features(data.signals, 96, 32).mean(axis=1)
    mean0, mean1 = feats[data.labels == 0].mean(0), feats[data.labels == 1].mean(0)
    spread = feats[data.labels == 0].std(0).mean()
    assert np.abs(mean0 - mean1).max() > 3 * spread


def test_dataset_round_trip(tmp_path):
    data = synth_dataset(SMALL)
    save_dataset(tmp_path / "d", data)
    back = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.signals, data.signals)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert back.rate == data.rate
    # the seed fixes the file bytes
    save_dataset(tmp_path / "e", synth_dataset(SMALL))
    assert (tmp_path / "d" / "signals.pbnt").read_bytes() == (tmp_path / "e" / "signals.pbnt").read_bytes()


def test_inconsistent_dataset(tmp_path):
    save_dataset(tmp_path, Dataset(np.zeros((3, 8)), np.array([0, 1, 0])))
    pbnt.save(tmp_path / "labels.pbnt", np.array([8000.0, 0.0, 1.5, 0.0]))
    with pytest.raises(FormatError):
        load_dataset(tmp_path)
    pbnt.save(tmp_path / "labels.pbnt", np.array([8000.0, 0.0]))
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_two_fold_split_is_stratified():
    labels = np.repeat([0, 1, 2], [10, 7, 4])
    a, b = two_fold_split(labels, seed=0)
    assert len(np.intersect1d(a, b)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([a, b])), np.arange(len(labels)))
    np.testing.assert_array_equal(np.bincount(labels[a]), [5, 3, 2])


def test_scaler_standardizes_each_bin():
    feats = np.random.default_rng(0).normal(3.0, 2.0, size=(20, 7, 5)) * np.arange(1, 6)
    sc = FeatureScaler.fit(feats)
    z = sc.transform(feats)
    np.testing.assert_allclose(z.mean(axis=(0, 1)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 1)), 1.0, rtol=1e-12)
    assert sc.flat(feats).shape == (20, 35)


class TestPBNT:
    @pytest.mark.parametrize("shape", [(), (3,), (2, 3, 4), (0, 5)])
    def test_round_trip(self, shape):
        x = np.random.default_rng(0).standard_normal(shape)
        np.testing.assert_array_equal(pbnt.from_bytes(pbnt.to_bytes(x)), x)

    def test_layout(self):
        buf = pbnt.to_bytes(np.array([[1.0, 2.0]]))
        assert buf[:4] == b"PBNT"
        assert buf[4:8] == b"\x01\x00\x02\x00"
        assert buf[8:16] == b"\x01\x00\x00\x00\x02\x00\x00\x00"
        assert np.frombuffer(buf[16:], "<f8").tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("mangle", [lambda b: b"XXXX" + b[4:], lambda b: b[:-1],
                                        lambda b: b[:4] + b"\x02\x00" + b[6:], lambda b: b[:10]])
    def test_corrupt(self, mangle):
        with pytest.raises(FormatError):
            pbnt.from_bytes(mangle(pbnt.to_bytes(np.ones((2, 2)))))
