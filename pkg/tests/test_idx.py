import numpy as np
import pytest

from fprog.idx import DatasetError, load_digits_idx, read_idx, to_input, write_idx


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_round_trip(tmp_path, dtype, suffix):
    a = (np.arange(24) % 7).astype(dtype).reshape(2, 3, 4)
    path = tmp_path / f"a.idx{suffix}"
    write_idx(path, a)
    back = read_idx(path)
    assert back.dtype == a.dtype
    np.testing.assert_array_equal(back, a)


def test_corrupt_files(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(DatasetError, match="magic"):
        read_idx(bad)
    write_idx(bad, np.zeros((4,), np.uint8))
    bad.write_bytes(bad.read_bytes()[:-1])
    with pytest.raises(DatasetError, match="bytes"):
        read_idx(bad)
    with pytest.raises(DatasetError):
        read_idx(tmp_path / "missing")


def test_to_input_crop_and_scale():
    imgs = np.zeros((1, 28, 28), np.uint8)
    imgs[0, 14, 14] = 200
    x = to_input(imgs)
    assert x.shape == (1, 20, 20, 1) and x.max() == 1.0 and x[0, 10, 10, 0] == 1.0
    small = to_input(np.ones((2, 8, 8)) * 3)
    assert small.shape == (2, 20, 20, 1) and np.allclose(small, 1.0)


def test_load_digits_idx(tmp_path):
    write_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((5, 20, 20), np.uint8))
    write_idx(tmp_path / "train-labels-idx1-ubyte.gz", np.arange(5, dtype=np.uint8))
    x, y = load_digits_idx(tmp_path, limit=3)
    assert x.shape == (3, 20, 20, 1) and y.tolist() == [0, 1, 2]
    write_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((4, 20, 20), np.uint8))
    with pytest.raises(DatasetError):
        load_digits_idx(tmp_path)
    with pytest.raises(DatasetError, match="missing"):
        load_digits_idx(tmp_path / "nowhere")
