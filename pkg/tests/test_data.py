import math
import struct

import numpy as np
import pytest

from icaps.data import (
    Dataset,
    DatasetError,
    DatasetValidationError,
    SyntheticSpec,
    convert_idx,
    generate_synthetic,
    load_dataset,
    read_idx,
    save_dataset,
)
from icaps.evaluation import mutual_information


def test_round_trip(tmp_path, small_synth):
    ds, _ = small_synth
    path = tmp_path / "d.icds"
    save_dataset(ds, path)
    back = load_dataset(path, 2)
    expected = np.round(ds.images * 255) / 255
    np.testing.assert_array_equal(back.images, expected.astype(np.float32))
    np.testing.assert_array_equal(back.labels, ds.labels)
    # a second trip is exact
    save_dataset(back, tmp_path / "e.icds")
    again = load_dataset(tmp_path / "e.icds", 2)
    np.testing.assert_array_equal(again.images, back.images)


def test_header_layout(tmp_path):
    ds = Dataset(np.zeros((3, 1, 2, 2)), [0, 1, 1], 2)
    path = tmp_path / "d.icds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    assert raw[:4] == b"ICDS"
    assert struct.unpack_from("<5I", raw, 4) == (1, 3, 1, 2, 2)
    assert len(raw) == 24 + 12 + 6


def test_truncated_and_corrupt_files(tmp_path, small_synth):
    ds, _ = small_synth
    path = tmp_path / "d.icds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    for n, needle in ((10, "header"), (100, "pixel"), (len(raw) - 3, "label")):
        (tmp_path / "t.icds").write_bytes(raw[:n])
        with pytest.raises(DatasetError, match=needle):
            load_dataset(tmp_path / "t.icds")
    (tmp_path / "m.icds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetError, match="magic"):
        load_dataset(tmp_path / "m.icds")
    (tmp_path / "x.icds").write_bytes(raw + b"\0")
    with pytest.raises(DatasetError, match="trailing"):
        load_dataset(tmp_path / "x.icds")


def test_label_out_of_range(tmp_path):
    path = tmp_path / "d.icds"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4s5I", b"ICDS", 1, 2, 1, 1, 1) + bytes([0, 0]))
        fh.write(struct.pack("<2H", 0, 255))
    with pytest.raises(DatasetValidationError):
        load_dataset(path, n_classes=2)


def test_synthetic_deterministic():
    a, fa = generate_synthetic(SyntheticSpec(seed=11), 300)
    b, fb = generate_synthetic(SyntheticSpec(seed=11), 300)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    c, _ = generate_synthetic(SyntheticSpec(seed=12), 300)
    assert not np.array_equal(a.images, c.images)
    assert a.images.shape == (300, 1, 16, 16)
    assert np.bincount(a.labels).tolist() == [150, 150]


def test_synthetic_needs_two_per_class():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(), 3)


def test_relevant_factor_determines_label():
    spec = SyntheticSpec(seed=1)
    ds, f = generate_synthetic(spec, 2000)
    for j in range(spec.n_classes):
        lo, hi = spec.band(j)
        e = f["elongation"][ds.labels == j]
        assert e.min() >= lo and e.max() <= hi


@pytest.fixture(scope="module")
def big_factors():
    return generate_synthetic(SyntheticSpec(seed=2), 10_000)


def test_factor_label_mutual_information(big_factors):
    ds, f = big_factors
    for name in f.nuisance:
        assert mutual_information(f[name], ds.labels, 20) < 0.02, name
    assert abs(mutual_information(f["elongation"], ds.labels, 20) - math.log(2)) < 0.02


def _write_idx(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    header = bytes([0, 0, 8, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path.write_bytes(header + arr.tobytes())


def test_convert_idx(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (6, 28, 28))
    _write_idx(tmp_path / "img", imgs)
    _write_idx(tmp_path / "lab", [0, 1, 2, 1, 0, 2])
    assert read_idx(tmp_path / "img").shape == (6, 28, 28)
    ds = convert_idx(tmp_path / "img", tmp_path / "lab", tmp_path / "out.icds")
    assert ds.images.shape == (6, 1, 16, 16)
    back = load_dataset(tmp_path / "out.icds")
    assert back.n_classes == 3
    np.testing.assert_array_equal(back.labels, [0, 1, 2, 1, 0, 2])


def test_read_idx_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"\1\2\3\4")
    with pytest.raises(DatasetError):
        read_idx(tmp_path / "bad")
