import numpy as np
import pytest

from dgfm import autodiff as ad
from dgfm.autodiff import Tensor
from dgfm.conditioning import (AlignmentError, ClipAudioEmbedding,
                               ConditioningError, EmbeddingShapeError,
                               FileEmbeddingProvider, GenreEmbedding,
                               MusicFusion, StubEmbeddingProvider,
                               build_prompt, load_embedding, save_embedding,
                               stub_embedding, stub_genre_embedding)
from dgfm.tensorfile import TensorFileError, save_tensor


# -- prompts -----------------------------------------------------------------

def test_prompt_for_jazz():
    assert build_prompt("Jazz") == "This is a Jazz type of music."


def test_prompt_for_breaking():
    assert build_prompt("Breaking") == "This is a Breaking type of music."


def test_empty_genre_rejected():
    with pytest.raises(ConditioningError):
        build_prompt("")
    with pytest.raises(ConditioningError):
        build_prompt("   ")


# -- embedding files -----------------------------------------------------------

def test_audio_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    emb = ClipAudioEmbedding(
        rng.standard_normal((120, 512)).astype(np.float32))
    path = tmp_path / "e.dgfm"
    save_embedding(path, emb)
    back = load_embedding(path)
    assert isinstance(back, ClipAudioEmbedding)
    np.testing.assert_array_equal(back.frames, emb.frames)


def test_genre_embedding_round_trip(tmp_path):
    vec = np.linspace(-1, 1, 512).astype(np.float32)
    path = tmp_path / "g.dgfm"
    save_embedding(path, GenreEmbedding(vec))
    back = load_embedding(path)
    assert isinstance(back, GenreEmbedding)
    np.testing.assert_array_equal(back.vector, vec)


def test_wrong_trailing_dim_is_shape_error(tmp_path):
    path = tmp_path / "bad.dgfm"
    save_tensor(path, np.zeros((10, 256)))
    with pytest.raises(EmbeddingShapeError, match="256"):
        load_embedding(path)


def test_truncated_file_is_format_error(tmp_path):
    path = tmp_path / "e.dgfm"
    save_tensor(path, np.zeros((4, 512)))
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(TensorFileError):
        load_embedding(path)


def test_nan_payload_is_data_error(tmp_path):
    arr = np.zeros((4, 512))
    arr[1, 5] = np.inf
    path = tmp_path / "e.dgfm"
    save_tensor(path, arr)
    from dgfm.tensorfile import TensorDataError
    with pytest.raises(TensorDataError):
        load_embedding(path)


# -- stubs ------------------------------------------------------------------------

def test_stub_embedding_deterministic():
    a = stub_embedding(7, 4)
    b = stub_embedding(7, 4)
    assert np.array_equal(a.frames, b.frames)


def test_stub_rows_unit_norm():
    emb = stub_embedding(3, 16)
    np.testing.assert_allclose(np.linalg.norm(emb.frames, axis=1), 1.0,
                               atol=1e-9)


def test_stub_seeds_differ():
    assert not np.array_equal(stub_embedding(1, 4).frames,
                              stub_embedding(2, 4).frames)


def test_genre_stub_depends_on_genre_and_seed():
    a = stub_genre_embedding("Jazz")
    b = stub_genre_embedding("Breaking")
    c = stub_genre_embedding("Jazz", base_seed=5)
    assert not np.array_equal(a.vector, b.vector)
    assert not np.array_equal(a.vector, c.vector)
    assert np.array_equal(a.vector, stub_genre_embedding("Jazz").vector)


def test_providers(tmp_path):
    stub = StubEmbeddingProvider(9)
    e1 = stub.audio_embedding(4, 6)
    assert np.array_equal(e1.frames, stub.audio_embedding(4, 6).frames)
    g = stub.genre_embedding("Jazz")
    assert g.vector.shape == (512,)

    files = FileEmbeddingProvider()
    path = tmp_path / "a.dgfm"
    save_embedding(path, e1)
    assert np.allclose(files.audio_embedding(path, 6).frames, e1.frames,
                       atol=1e-7)
    with pytest.raises(AlignmentError):
        files.audio_embedding(path, 7)


# -- fusion --------------------------------------------------------------------

def test_fuse_zero_stft_is_pure_adapter_path():
    rng = np.random.default_rng(1)
    fusion = MusicFusion(np.random.default_rng(2))
    w2c = Tensor(rng.standard_normal((10, 512)))
    zero_stft = Tensor(np.zeros((10, 193)))
    fused = fusion.fuse(w2c, zero_stft)
    np.testing.assert_array_equal(fused.data, fusion.adapter(w2c).data)
    # second adapter layer starts at zero, so the adapter starts at identity
    np.testing.assert_array_equal(fusion.adapter(w2c).data, w2c.data)


def test_fuse_zero_audio_is_pure_projection_path():
    rng = np.random.default_rng(3)
    fusion = MusicFusion(np.random.default_rng(4))
    zero_w2c = Tensor(np.zeros((5, 512)))
    stft = Tensor(rng.standard_normal((5, 193)))
    fused = fusion.fuse(zero_w2c, stft)
    np.testing.assert_array_equal(fused.data, fusion.project_stft(stft).data)


def test_fuse_alignment_error():
    fusion = MusicFusion(np.random.default_rng(5))
    with pytest.raises(AlignmentError):
        fusion.fuse(Tensor(np.zeros((4, 512))), Tensor(np.zeros((5, 193))))


def test_fuse_gradients_pass_finite_differences():
    rng = np.random.default_rng(6)
    fusion = MusicFusion(np.random.default_rng(7))
    # move the adapter second layer off zero so its gradient is exercised
    fusion.params["adapter.w2"].data += rng.standard_normal((512, 512)) * 0.02
    w2c = Tensor(rng.standard_normal((3, 512)) * 0.5)
    stft = Tensor(rng.standard_normal((3, 193)) * 0.5)
    target = Tensor(rng.standard_normal((3, 512)))

    def f():
        return ad.mse(fusion.fuse(w2c, stft), target)

    err = ad.grad_check(f, list(fusion.params.values()), n_samples=8,
                        rng=np.random.default_rng(8))
    assert err <= 1e-5


def test_fusion_is_additive_with_linear_adapter():
    rng = np.random.default_rng(9)
    fusion = MusicFusion(np.random.default_rng(10), activation="identity")
    fusion.params["adapter.w2"].data += rng.standard_normal((512, 512)) * 0.05
    a = rng.standard_normal((4, 512))
    b = rng.standard_normal((4, 512))
    s = rng.standard_normal((4, 193))

    def fuse(w, st):
        return fusion.fuse(Tensor(w), Tensor(st)).data

    # with both paths linear, fusion decomposes path-wise
    combined = fuse(a + b, s)
    parts = fuse(a, s) + fuse(b, 0 * s) - fuse(0 * a, 0 * s)
    np.testing.assert_allclose(combined, parts, atol=1e-9)
