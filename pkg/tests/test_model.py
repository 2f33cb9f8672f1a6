import numpy as np
import pytest

from dgfm.denoiser import DenoiserConfig
from dgfm.diffusion import Normalizer
from dgfm.model import DGFMModel, ModelError
from dgfm.motion import POSE_DIM


def small_model(seed=0):
    cfg = DenoiserConfig(hidden=16, layers=1, heads=2, mlp_ratio=2,
                         dropout=0.1, max_frames=8)
    rng = np.random.default_rng(seed)
    norm = Normalizer(np.linspace(-1, 1, POSE_DIM), np.full(POSE_DIM, 0.5))
    return DGFMModel(cfg, norm, ["Breaking", "Jazz"], rng, schedule_T=64)


def test_checkpoint_round_trip(tmp_path):
    model = small_model()
    path = tmp_path / "ckpt.dgfm"
    model.save_checkpoint(path, extra={"train.step": np.asarray(42.0)})
    loaded, extra = DGFMModel.load_checkpoint(path)

    assert loaded.config == model.config
    assert loaded.genres == ["Breaking", "Jazz"]
    assert loaded.schedule_T == 64
    assert int(extra["train.step"]) == 42
    for name, p in model.params().items():
        stored = loaded.params()[name].data
        np.testing.assert_array_equal(stored,
                                      p.data.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(
        loaded.normalizer.mean,
        model.normalizer.mean.astype(np.float32).astype(np.float64))


def test_checkpoint_save_load_save_is_stable(tmp_path):
    model = small_model()
    p1 = tmp_path / "a.dgfm"
    p2 = tmp_path / "b.dgfm"
    model.save_checkpoint(p1)
    loaded, _ = DGFMModel.load_checkpoint(p1)
    loaded.save_checkpoint(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_missing_parameter_entry_rejected(tmp_path):
    from dgfm.tensorfile import load_container, save_container
    model = small_model()
    path = tmp_path / "ckpt.dgfm"
    model.save_checkpoint(path)
    tensors = load_container(path)
    del tensors["param.denoiser.out.w"]
    save_container(path, tensors)
    with pytest.raises(ModelError, match="missing parameter"):
        DGFMModel.load_checkpoint(path)


def test_param_name_map_covers_everything():
    model = small_model()
    names = model.param_names()
    params = model.params()
    assert len(names) == len(params)
    assert "null.music" in params and "null.genre" in params
    assert any(k.startswith("fusion.") for k in params)
    assert any(k.startswith("denoiser.") for k in params)
