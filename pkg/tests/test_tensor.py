import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedseg import tensor as T
from fedseg.errors import FormatError, ParameterError, ShapeError


def test_zeros_and_fill():
    np.testing.assert_array_equal(T.zeros([2, 2]), [[0, 0], [0, 0]])
    np.testing.assert_array_equal(T.fill([3], 1.5), [1.5, 1.5, 1.5])
    assert T.zeros([2, 3]).dtype == np.float32
    assert T.zeros([2], dtype=np.float64).dtype == np.float64


@pytest.mark.parametrize("shape", [[0], [], [2, 0], [1, 1, 1, 1, 1]])
def test_bad_shapes(shape):
    with pytest.raises(ShapeError):
        T.zeros(shape)


def test_elementwise():
    np.testing.assert_array_equal(T.add(np.array([1.0, 2.0]), np.array([3.0, 4.0])), [4, 6])
    np.testing.assert_array_equal(T.scale(np.array([2.0, 4.0]), 0.5), [1, 2])
    np.testing.assert_array_equal(T.sub(np.array([3.0]), np.array([1.0])), [2])
    np.testing.assert_array_equal(T.mul(np.array([3.0, 2.0]), 2.0), [6, 4])
    with pytest.raises(ShapeError):
        T.add(np.array([1.0, 2.0]), np.array([1.0, 2.0, 3.0]))


def test_reshape_round_trip(nprng):
    t = nprng.normal(size=(2, 3, 4)).astype(np.float32)
    back = T.reshape(T.reshape(t, [6, 4]), [2, 3, 4])
    assert back.tobytes() == t.tobytes()
    with pytest.raises(ShapeError):
        T.reshape(t, [5, 5])


def test_rng_normal_deterministic():
    a = T.rng_normal(T.Rng(7), [4], 0, 1)
    b = T.rng_normal(T.Rng(7), [4], 0, 1)
    assert a.tobytes() == b.tobytes()


def test_rng_normal_mean():
    z = T.rng_normal(T.Rng(7), [10000], 0, 1, dtype=np.float64)
    assert abs(z.mean()) < 0.05
    assert abs(z.std() - 1) < 0.05


def test_rng_normal_zero_std_and_negative():
    np.testing.assert_array_equal(T.rng_normal(T.Rng(1), [5], 2.5, 0.0), np.full(5, 2.5))
    with pytest.raises(ParameterError):
        T.rng_normal(T.Rng(1), [5], 0.0, -1.0)


def test_rng_stream_frozen():
    # PCG64 raw stream for seed 0; pins the documented generator.
    assert T.Rng(0).raw(2).tolist() == np.random.PCG64(0).random_raw(2).tolist()
    u = T.Rng(42).uniform(1000)
    assert u.min() >= 0 and u.max() < 1


def test_splitmix64_reference_values():
    # Reference outputs of SplitMix64 seeded with 0 (state advanced once per call).
    state, outs = 0, []
    for _ in range(3):
        outs.append(T.splitmix64(state))
        state = (state + 0x9E3779B97F4A7C15) & T.MASK64
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_permutation_is_permutation():
    p = T.Rng(3).permutation(50)
    assert sorted(p) == list(range(50))
    assert p == T.Rng(3).permutation(50)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.sampled_from([np.float32, np.float64]),
       st.integers(0, 2 ** 32))
def test_fdt1_round_trip(shape, dtype, seed):
    t = T.rng_normal(T.Rng(seed), shape, 0, 3, dtype)
    buf = T.tensor_to_bytes(t)
    assert buf[:4] == b"FDT1"
    assert buf[4] == (0 if dtype == np.float32 else 1)
    assert buf[5] == len(shape)
    back, end = T.tensor_from_bytes(buf)
    assert end == len(buf)
    assert back.dtype == t.dtype and back.shape == t.shape and back.tobytes() == t.tobytes()


def test_fdt1_layout_and_errors(tmp_path):
    t = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    buf = T.tensor_to_bytes(t)
    assert buf == b"FDT1" + bytes([0, 2]) + (1).to_bytes(4, "little") + (3).to_bytes(4, "little") \
        + np.array([1, 2, 3], "<f4").tobytes()
    T.save_tensor(t, tmp_path / "t.fdt1")
    assert T.load_tensor(tmp_path / "t.fdt1").tobytes() == t.tobytes()
    with pytest.raises(FormatError):
        T.tensor_from_bytes(b"XDT1" + buf[4:])
    with pytest.raises(FormatError):
        T.tensor_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        T.tensor_from_bytes(buf[:4] + bytes([9]) + buf[5:])
