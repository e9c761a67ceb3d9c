import numpy as np
import pytest

from rar.buffer import (
    BufferError,
    BufferVersionError,
    EmptyBufferError,
    MemoryBuffer,
    MissingEmbeddingsError,
    brute_force_query,
)
from rar.features import Embedding
from rar.geometry import PlanarPose4
from rar.scene import render, setup_world


def test_counts(small_buffer, library):
    assert len(small_buffer) == len(library.train)
    assert small_buffer.observation_count == len(library.train) * 13
    assert [d.demo_id for d in small_buffer.demos] == list(range(len(library.train)))


def test_stored_records_carry_no_meta(small_buffer, library):
    assert all(d.object_meta is None for d in small_buffer.demos)
    assert small_buffer.train_meta(0).name == library.train[0].name


@pytest.mark.parametrize("ext", ["patch", "moments", "colorhist"])
def test_self_retrieval(small_buffer, ext):
    for d in small_buffer.demos:
        for key, o in zip(d.keys(), d.observations()):
            r = small_buffer.query(o, ext)
            assert r.score == pytest.approx(1.0, abs=1e-12)
            assert r.demo_id == d.demo_id


@pytest.mark.parametrize("ext", ["patch", "colorhist"])
def test_query_matches_brute_force(small_buffer, library, ext):
    rng = np.random.default_rng(1)
    for spec in library.intra[:3]:
        o = render(setup_world(spec, PlanarPose4(*rng.uniform(-0.05, 0.05, 2), 0.0, 0.3)))
        r = small_buffer.query(o, ext)
        key, score = brute_force_query(small_buffer, o, ext)
        assert r.matched_key == key
        assert r.score == pytest.approx(score, abs=1e-12)


def test_top_k_sorted(small_buffer):
    o = small_buffer.demos[2].bottleneck_obs
    top = small_buffer.top_k(o, "patch", 6)
    scores = [s for _, s in top]
    assert scores == sorted(scores, reverse=True)
    assert top[0] == ((2, -1), pytest.approx(1.0))


def test_roundtrip_is_bit_exact(small_buffer, tmp_path):
    p = tmp_path / "b.rarbuf"
    small_buffer.save(p)
    back = MemoryBuffer.load(p)
    assert back.to_bytes() == small_buffer.to_bytes()
    o = small_buffer.demos[1].samples[3].observation
    assert back.query(o, "patch").matched_key == small_buffer.query(o, "patch").matched_key
    assert back.train_meta(1).to_json() == small_buffer.train_meta(1).to_json()


def test_corruption_detected(small_buffer, tmp_path):
    data = bytearray(small_buffer.to_bytes())
    with pytest.raises(BufferVersionError):
        MemoryBuffer.from_bytes(b"XXXXXXX" + bytes(data[7:]))
    data[100] ^= 0xFF
    with pytest.raises(BufferError):
        MemoryBuffer.from_bytes(bytes(data))
    with pytest.raises(BufferError):
        MemoryBuffer.from_bytes(small_buffer.to_bytes()[:-9])


def test_empty_buffer_query():
    with pytest.raises(EmptyBufferError):
        MemoryBuffer().query(None, "patch")


def test_duplicate_demo_id(small_buffer):
    buf = MemoryBuffer(extractors=())
    buf.add_demo(small_buffer.demos[0])
    with pytest.raises(BufferError):
        buf.add_demo(small_buffer.demos[0])


def test_missing_embeddings(small_buffer):
    with pytest.raises(MissingEmbeddingsError):
        small_buffer.embedding_matrix("hog")


def test_registered_embeddings(small_buffer):
    buf = MemoryBuffer.from_bytes(small_buffer.to_bytes())
    rng = np.random.default_rng(0)
    table = {}
    for d, i in buf.keys():
        v = rng.standard_normal(4)
        table["%d:%d" % (d, i)] = Embedding(v / np.linalg.norm(v), "external:t")
    buf.register_embeddings("external:t", table)
    keys, mat = buf.embedding_matrix("external:t")
    assert mat.shape == (buf.observation_count, 4)
    table.pop("0:-1")
    with pytest.raises(MissingEmbeddingsError):
        buf.register_embeddings("external:u", table)
