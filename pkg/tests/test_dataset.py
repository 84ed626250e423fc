import math
from collections import Counter

import numpy as np
import pytest

from shared_dml.dataset import (
    Dataset,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_by_class,
)
from shared_dml.errors import ConfigError, DatasetFormatError


def small_cfg(**kw):
    base = dict(num_classes=4, samples_per_class=10, num_shared_factors=3, ambient_dim=5, seed=3)
    base.update(kw)
    return SynthConfig(**base)


class TestGenerate:
    def test_counts(self):
        ds = generate_synthetic(small_cfg())
        assert len(ds) == 40
        assert Counter(ds.labels.tolist()) == {0: 10, 1: 10, 2: 10, 3: 10}
        assert ds.features.shape == (40, 5)

    def test_deterministic(self):
        a = generate_synthetic(small_cfg())
        b = generate_synthetic(small_cfg())
        assert a.features.tobytes() == b.features.tobytes()
        assert a == b

    def test_other_seed_differs(self):
        assert generate_synthetic(small_cfg()) != generate_synthetic(small_cfg(seed=4))

    def test_noise_free_class_code(self):
        ds = generate_synthetic(small_cfg(noise_scale=0.0, shared_signal_scale=0.0))
        for c in range(4):
            rows = ds.features[ds.labels == c]
            assert np.all(rows == rows[0])

    def test_linear_factor_form(self):
        # without noise every sample is a class code plus a shared code
        ds = generate_synthetic(small_cfg(noise_scale=0.0, class_signal_scale=2.0, shared_signal_scale=0.5))
        pure = generate_synthetic(small_cfg(noise_scale=0.0, shared_signal_scale=0.0, class_signal_scale=2.0))
        residual = ds.features - pure.features
        for k in range(3):
            rows = residual[ds.shared_factors == k]
            np.testing.assert_allclose(rows - rows[0], 0.0, atol=1e-12)
            assert np.linalg.norm(rows[0]) == pytest.approx(0.5)

    @pytest.mark.parametrize(
        "field,value",
        [("num_classes", 3), ("samples_per_class", 1), ("noise_scale", -1.0), ("class_signal_scale", math.nan)],
    )
    def test_invalid_config_names_field(self, field, value):
        with pytest.raises(ConfigError) as info:
            generate_synthetic(small_cfg(**{field: value}))
        assert info.value.field == field

    def test_class_shared_independence(self):
        ds = generate_synthetic(
            SynthConfig(num_classes=10, samples_per_class=200, num_shared_factors=4, seed=11)
        )
        joint = Counter(zip(ds.labels.tolist(), ds.shared_factors.tolist()))
        n = len(ds)
        pc = Counter(ds.labels.tolist())
        ps = Counter(ds.shared_factors.tolist())
        mi = sum(
            (c / n) * math.log2((c / n) / ((pc[a] / n) * (ps[b] / n))) for (a, b), c in joint.items()
        )
        assert mi < 0.05


class TestSplit:
    def test_first_half_trains(self):
        train, test = split_by_class(generate_synthetic(small_cfg()))
        assert set(train.labels.tolist()) == {0, 1}
        assert set(test.labels.tolist()) == {2, 3}

    def test_two_classes(self):
        train, test = split_by_class(generate_synthetic(small_cfg(num_classes=2)))
        assert train.class_ids.size == 1 and test.class_ids.size == 1

    def test_partition_and_order(self):
        ds = generate_synthetic(small_cfg(num_classes=6))
        train, test = split_by_class(ds)
        assert len(train) + len(test) == len(ds)
        assert not set(train.labels.tolist()) & set(test.labels.tolist())
        np.testing.assert_array_equal(train.features, ds.features[ds.labels < 3])
        np.testing.assert_array_equal(test.features, ds.features[ds.labels >= 3])

    def test_needs_two_classes(self):
        ds = Dataset(np.zeros((2, 3)), [0, 0], 1)
        with pytest.raises(ValueError):
            split_by_class(ds)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = generate_synthetic(small_cfg())
        path = tmp_path / "ds.csv"
        save_dataset(ds, path)
        assert load_dataset(path) == ds
        assert path.read_text().splitlines()[0] == "dim=5,classes=4"

    def test_round_trip_without_shared(self, tmp_path):
        ds = Dataset(np.array([[0.1, 1 / 3], [2.5e-300, -7.0]]), [0, 1], 2)
        save_dataset(ds, tmp_path / "x.csv")
        back = load_dataset(tmp_path / "x.csv")
        assert back == ds and back.shared_factors is None

    def test_wrong_arity_cites_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("dim=2,classes=2\n0.1,0.2,0\n0.3,1\n")
        with pytest.raises(DatasetFormatError) as info:
            load_dataset(path)
        assert info.value.line == 3
        assert "line 3" in str(info.value)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DatasetFormatError, match="missing header"):
            load_dataset(path)

    @pytest.mark.parametrize(
        "body,line",
        [
            ("dim=2\n", 1),
            ("dim=x,classes=2\n", 1),
            ("dim=2,classes=2\n0.1,nan,0\n", 2),
            ("dim=2,classes=2\n0.1,0.2,0\n0.1,0.2,5\n", 3),
            ("dim=2,classes=2\n0.1,abc,0\n", 2),
        ],
    )
    def test_malformed(self, tmp_path, body, line):
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(DatasetFormatError) as info:
            load_dataset(path)
        assert info.value.line == line
