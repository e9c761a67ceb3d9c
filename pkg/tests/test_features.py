import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rar import features
from rar.features import (
    BUILTIN,
    Embedding,
    FeatureError,
    ImportedEmbeddings,
    export_embeddings,
    extract,
    get_extractor,
    import_embeddings,
    read_raw_embeddings,
    similarity,
)
from rar.geometry import PlanarPose4
from rar.scene import default_library, render, setup_world
from rar.scene.world import Observation


def flat_obs(gray=51, depth=0.5):
    return Observation(np.full((128, 128, 3), gray, np.uint8), np.full((128, 128), depth, np.float32))


@pytest.fixture(scope="module")
def views():
    lib = default_library()
    return [render(setup_world(s, PlanarPose4(0.02 * i, -0.01 * i, 0, 0.2 * i))) for i, s in enumerate(lib.train)]


def test_patch_of_flat_image():
    # uniform gray and flat depth: the gray half is constant, the depth half is zero
    e = extract(get_extractor("patch"), flat_obs())
    assert e.dim == 512
    assert np.allclose(e.values[:256], 1 / 16, atol=1e-15)
    assert np.allclose(e.values[256:], 0.0)


def test_patch_rgb_variant_dim():
    assert get_extractor("patch:rgb").dim == 256


@pytest.mark.parametrize("ext", sorted(BUILTIN))
def test_builtin_extractors_are_unit_and_deterministic(ext, views):
    x = get_extractor(ext)
    for o in views[:3]:
        a, b = extract(x, o), extract(x, o)
        assert a.dim == x.dim
        assert np.linalg.norm(a.values) == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(a.values, b.values)


@pytest.mark.parametrize("ext", sorted(BUILTIN))
def test_self_similarity_is_one(ext, views):
    e = extract(get_extractor(ext), views[0])
    assert similarity(e, e) == pytest.approx(1.0, abs=1e-12)


def test_randproj_is_fixed_seed():
    a = features.RandomProjection().matrix
    b = features.RandomProjection().matrix
    assert np.array_equal(a[:5, :5], b[:5, :5])


def test_unknown_extractor():
    with pytest.raises(FeatureError):
        get_extractor("dino")


def test_blind_view_has_no_moments():
    # no valid depth anywhere: the moments descriptor is all zeros and cannot be normalized
    with pytest.raises(FeatureError):
        extract(get_extractor("moments"), flat_obs(depth=0.0))


def test_similarity_mismatch_errors():
    a = Embedding(np.ones(4) / 2, "a")
    with pytest.raises(FeatureError):
        similarity(a, Embedding(np.ones(4) / 2, "b"))
    with pytest.raises(FeatureError):
        similarity(a, Embedding(np.ones(3), "a"))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_similarity_bounded_and_symmetric(u, v):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    a, b = Embedding(np.array(u), "x"), Embedding(np.array(v), "x")
    s = similarity(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(similarity(b, a), abs=1e-15)


def test_embedding_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    items = {"0:-1": rng.standard_normal(8), "0:0": rng.standard_normal(8)}
    p = tmp_path / "e.bin"
    export_embeddings(p, "clip", items)
    file_id, raw = read_raw_embeddings(p)
    assert file_id == "clip"
    for k, v in items.items():
        assert np.array_equal(raw[k], v.astype(np.float32))
    table = import_embeddings(p)
    assert next(iter(table.values())).extractor_id == "external:clip"
    for k, v in items.items():
        assert np.allclose(table[k].values, v.astype(np.float32) / np.linalg.norm(v.astype(np.float32)))


def test_embedding_file_errors(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"nope")
    with pytest.raises(FeatureError):
        import_embeddings(p)
    export_embeddings(p, "x", {"a": np.ones(4)})
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(FeatureError):
        import_embeddings(p)
    export_embeddings(p, "x", {"a": np.zeros(4)})
    with pytest.raises(FeatureError, match="record 0"):
        import_embeddings(p)


def test_imported_extractor_lookup():
    table = {"k": Embedding(np.array([1.0, 0.0]), "external:t")}
    x = ImportedEmbeddings(table, lambda o: "k")
    assert x.dim == 2 and x.id == "external:t"
    assert np.array_equal(extract(x, flat_obs()).values, [1.0, 0.0])
    with pytest.raises(FeatureError):
        extract(ImportedEmbeddings(table, lambda o: "other"), flat_obs())
