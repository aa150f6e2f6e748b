import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedseg.errors import AlignmentError, ProtocolError, UsageError
from fedseg.federation import (FedConfig, FedMessage, Kind, decode, diff_norm, encode, fedavg,
                               read_frame)
from fedseg.params import ParameterSet


def ps(**tensors):
    return ParameterSet((k, np.asarray(v, dtype=np.float64)) for k, v in tensors.items())


def test_fedavg_examples():
    out = fedavg([(ps(w=[1, 2]), 5), (ps(w=[3, 4]), 5)])
    np.testing.assert_array_equal(out["w"], [2, 3])
    out = fedavg([(ps(w=[0]), 1), (ps(w=[4]), 3)])
    np.testing.assert_array_equal(out["w"], [3])
    out = fedavg([(ps(w=[0]), 1), (ps(w=[4]), 3)], "uniform")
    np.testing.assert_array_equal(out["w"], [2])
    single = ParameterSet([("a", np.array([0.1, 1e-30], np.float32))])
    assert fedavg([(single, 7)]) == single


def test_fedavg_keeps_dtype_and_order():
    a = ParameterSet([("z", np.ones(2, np.float32)), ("a", np.zeros(3, np.float32))])
    out = fedavg([(a, 1), (a.copy(), 1)])
    assert out.names() == ["z", "a"]
    assert out["z"].dtype == np.float32


def test_fedavg_errors():
    with pytest.raises(UsageError):
        fedavg([])
    with pytest.raises(AlignmentError) as e:
        fedavg([(ps(a=[1], b=[1]), 1), (ps(a=[1], c=[1]), 1)])
    assert e.value.name == "b"
    with pytest.raises(AlignmentError):
        fedavg([(ps(a=[1, 2]), 1), (ps(a=[1]), 1)])


def _random_sets(rng, k):
    shapes = [tuple(rng.integers(1, 4, size=rng.integers(1, 4))) for _ in range(3)]
    return [ParameterSet((f"t{i}", rng.normal(size=s)) for i, s in enumerate(shapes))
            for _ in range(k)]


def test_fedavg_identical_uniform(nprng):
    for k in (1, 2, 3, 5, 7):
        base = _random_sets(nprng, 1)[0]
        out = fedavg([(base.copy(), 1) for _ in range(k)], "uniform")
        for name, t in base.items():
            ulp = np.spacing(np.abs(t))
            assert np.all(np.abs(out[name] - t) <= k * ulp)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_fedavg_convex(k, seed):
    rng = np.random.default_rng(seed)
    sets = _random_sets(rng, k)
    counts = [int(c) for c in rng.integers(1, 100, size=k)]
    out = fedavg(list(zip(sets, counts)))
    for name in out:
        stack = np.stack([s[name] for s in sets])
        assert np.all(out[name] >= stack.min(axis=0)) and np.all(out[name] <= stack.max(axis=0))


def test_diff_norm():
    a = ps(w=[3.0])
    assert diff_norm(a, a) == 0
    assert diff_norm(a, ps(w=[0.0])) == 3.0
    b = ps(w=[1.0])
    assert diff_norm(a, b) == diff_norm(b, a)
    with pytest.raises(AlignmentError):
        diff_norm(a, ps(v=[1.0]))


def test_fed_config_validation():
    from fedseg.errors import ConfigError
    with pytest.raises(ConfigError):
        FedConfig(rounds=0)
    with pytest.raises(ConfigError):
        FedConfig(weighting="median")
    with pytest.raises(ConfigError):
        FedConfig(batch_size=1)


# --- codec ---------------------------------------------------------------------

def three_tensor_set():
    return ParameterSet([("enc.w", np.arange(6, dtype=np.float32).reshape(2, 3)),
                         ("enc.b", np.array([0.5, -1.0], np.float32)),
                         ("stat", np.array([1e-300], np.float64))])


def test_round_trip_global_model():
    msg = FedMessage(Kind.GLOBAL_MODEL, 3, 1, 0, three_tensor_set())
    frame = encode(msg)
    back = decode(frame)
    assert back == msg
    assert back.params.to_bytes() == msg.params.to_bytes()
    assert encode(back) == frame


def test_frame_layout():
    frame = encode(FedMessage(Kind.DONE, 7, 2))
    assert len(frame) == 31
    length, magic, ver, kind, rnd, node, count, plen = struct.unpack("<I4sHBIIQI", frame)
    assert (length, magic, ver, kind, rnd, node, count, plen) == (27, b"FDLP", 1, 4, 7, 2, 0, 0)


def test_bad_magic_offset():
    frame = bytearray(encode(FedMessage(Kind.HELLO, 0, 1, 35)))
    frame[4] ^= 0xFF
    with pytest.raises(ProtocolError) as e:
        decode(bytes(frame))
    assert e.value.offset == 4


def test_bad_version_and_kind():
    frame = bytearray(encode(FedMessage(Kind.HELLO, 0, 1, 35)))
    bad = bytearray(frame)
    bad[8] = 2
    with pytest.raises(ProtocolError) as e:
        decode(bytes(bad))
    assert e.value.offset == 8
    bad = bytearray(frame)
    bad[10] = 99
    with pytest.raises(ProtocolError) as e:
        decode(bytes(bad))
    assert e.value.offset == 10


def test_oversize_frame():
    frame = encode(FedMessage(Kind.GLOBAL_MODEL, 1, 0, 0, three_tensor_set()))
    with pytest.raises(ProtocolError):
        decode(frame, max_frame=40)
    lie = struct.pack("<I", 2 ** 31) + frame[4:]
    with pytest.raises(ProtocolError):
        decode(lie)
    with pytest.raises(ProtocolError):
        read_frame(lambda n: lie[:n], max_frame=1024)


def test_message_invariants():
    with pytest.raises(UsageError):
        FedMessage(Kind.GLOBAL_MODEL, 1, 0)
    with pytest.raises(UsageError):
        FedMessage(Kind.DONE, 1, 0, 0, three_tensor_set())
    with pytest.raises(UsageError):
        FedMessage(Kind.HELLO, -1, 0)
    err = FedMessage(Kind.ERROR, 2, 0, error_text="round 2: délai ➜ nœud 1")
    assert decode(encode(err)) == err


def test_read_frame_stream():
    frames = [encode(FedMessage(Kind.HELLO, 0, i, 10 * i)) for i in range(3)]
    stream = memoryview(b"".join(frames))
    pos = 0

    def read_exact(n):
        nonlocal pos
        chunk = bytes(stream[pos:pos + n])
        pos += n
        return chunk

    for i in range(3):
        assert decode(read_frame(read_exact)).node_id == i


names = st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=0x2FFF), min_size=1, max_size=12)


@st.composite
def messages(draw):
    kind = draw(st.sampled_from(list(Kind)))
    params = None
    text = None
    if kind in (Kind.GLOBAL_MODEL, Kind.LOCAL_UPDATE):
        keys = draw(st.lists(names, min_size=0, max_size=4, unique=True))
        items = []
        for k in keys:
            shape = draw(st.lists(st.integers(1, 3), min_size=1, max_size=4))
            dtype = draw(st.sampled_from([np.float32, np.float64]))
            seed = draw(st.integers(0, 2 ** 32 - 1))
            items.append((k, np.random.default_rng(seed).normal(size=shape).astype(dtype)))
        params = ParameterSet(items)
    elif kind == Kind.ERROR:
        text = draw(st.text(max_size=40))
    return FedMessage(kind, draw(st.integers(0, 2 ** 32 - 1)), draw(st.integers(0, 2 ** 32 - 1)),
                      draw(st.integers(0, 2 ** 64 - 1)), params, text)


@settings(max_examples=200, deadline=None)
@given(messages())
def test_codec_bijection(msg):
    frame = encode(msg)
    back = decode(frame)
    assert back == msg
    assert encode(back) == frame


@settings(max_examples=300, deadline=None)
@given(messages(), st.data())
def test_corrupted_frames_raise_protocol_error(msg, data):
    frame = bytearray(encode(msg))
    how = data.draw(st.sampled_from(["truncate", "flip", "length", "extend"]))
    if how == "truncate":
        frame = frame[:data.draw(st.integers(0, len(frame) - 1))]
    elif how == "flip":
        i = data.draw(st.integers(0, len(frame) - 1))
        frame[i] ^= data.draw(st.integers(1, 255))
    elif how == "length":
        frame[:4] = struct.pack("<I", data.draw(st.integers(0, 2 ** 32 - 1)))
    else:
        frame += bytes(data.draw(st.integers(1, 8)))
    try:
        out = decode(bytes(frame))
    except ProtocolError:
        return
    # a flip inside tensor data or a length rewrite to the true value can still decode
    assert isinstance(out, FedMessage)
