import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dgfm.audio import AudioClip, write_wav
from dgfm.conditioning import stub_embedding
from dgfm.metrics import InsufficientDataError
from dgfm.pipeline import (GenerationRequest, IngestError, PairingError,
                           PipelineError, ProviderError, TrainConfig,
                           crossfade_join, evaluate, generate, ingest,
                           parse_manifest, train, write_report)
from dgfm.synthetic import make_audio_clip, make_motion_clip, make_synthetic_dataset
from dgfm.tensorfile import load_container, load_tensor, save_tensor

TINY = dict(lr=1e-3, batch=4, epochs=2, hidden=16, layers=1, heads=2,
            mlp_ratio=2, dropout=0.0, T=32, seed=7, checkpoint_every=50)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_synthetic_dataset(root, n_clips=4, seconds=4.0, seed=0)
    return root


def tiny_config(root, **over):
    cfg = dict(TINY, manifest=str(root / "manifest.tsv"))
    cfg.update(over)
    return TrainConfig(**cfg)


# -- manifest / ingest ------------------------------------------------------------

def test_manifest_parses_four_records(dataset_dir):
    records = parse_manifest(dataset_dir / "manifest.tsv")
    assert len(records) == 4
    assert records[0].split == "train"
    assert records[0].genre == "Jazz"
    assert records[0].w2c_source == "stub:100"


def test_manifest_rejects_bad_field_count(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("train\tmotion.dgfm\taudio.wav\n")
    with pytest.raises(PipelineError, match="5 tab-separated"):
        parse_manifest(p)


def test_manifest_rejects_bad_split(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("val\ta.dgfm\tb.wav\tstub:1\tJazz\n")
    with pytest.raises(PipelineError, match="train|test"):
        parse_manifest(p)


def test_ingest_valid_dataset(dataset_dir):
    ds = ingest(dataset_dir / "manifest.tsv")
    assert len(ds.train_windows) == 4
    assert ds.genres == ["Breaking", "Jazz", "Locking", "Popping"]
    win = ds.train_windows[0]
    assert win.m0_raw.shape == (120, 319)
    assert win.stft.shape == (120, 193)
    assert win.w2c.shape == (120, 512)
    assert np.allclose(win.m0_norm, ds.normalizer.normalize(win.m0_raw))


def test_ingest_reports_all_diagnostics_at_once(dataset_dir, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    save_tensor(bad / "narrow.dgfm", np.zeros((120, 318)))
    save_tensor(bad / "short_audio.dgfm", np.zeros((60, 193)))
    motion_ok = make_motion_clip(0, 120)
    save_tensor(bad / "ok_motion.dgfm", motion_ok)
    manifest = bad / "m.tsv"
    manifest.write_text(
        "train\tnarrow.dgfm\tshort_audio.dgfm\tstub:1\tJazz\n"
        "train\tok_motion.dgfm\tshort_audio.dgfm\tstub:2\tJazz\n"
        "train\tmissing.dgfm\tshort_audio.dgfm\tstub:3\tJazz\n")
    with pytest.raises(IngestError) as exc:
        ingest(manifest)
    text = str(exc.value)
    assert "narrow.dgfm" in text        # wrong width
    assert "ok_motion.dgfm" in text     # T != k alignment
    assert "missing.dgfm" in text       # unresolvable path
    assert len(exc.value.diagnostics) == 3


def test_ingest_persists_stats(dataset_dir, tmp_path):
    stats = tmp_path / "stats.dgfm"
    ds = ingest(dataset_dir / "manifest.tsv", stats_out=stats)
    stored = load_container(stats)
    np.testing.assert_array_equal(
        stored["norm.mean"],
        ds.normalizer.mean.astype(np.float32).astype(np.float64))


def test_ingest_round_trip_motion_is_bit_exact(dataset_dir, tmp_path):
    ds = ingest(dataset_dir / "manifest.tsv")
    out = tmp_path / "export.dgfm"
    save_tensor(out, ds.train_windows[0].m0_raw)
    original = (dataset_dir / "motion" / "clip0.dgfm").read_bytes()
    assert out.read_bytes() == original


# -- training ----------------------------------------------------------------------

def test_train_writes_checkpoint_and_log(dataset_dir, tmp_path):
    cfg = tiny_config(dataset_dir)
    out = tmp_path / "model.dgfm"
    train(cfg, out)
    assert out.exists()
    log = (tmp_path / "model.log.csv").read_text().splitlines()
    assert log[0] == "step,epoch,loss_s,loss_j,loss_v,loss_c,total"
    assert len(log) == 1 + 2  # 2 epochs x 1 step (batch 4 over 4 windows)
    from dgfm.model import DGFMModel
    model, extra = DGFMModel.load_checkpoint(out)
    assert int(extra["train.step"]) == 2
    assert "optim.step" in extra


def test_train_seed_reproducible_loss_curve(dataset_dir, tmp_path):
    cfg = tiny_config(dataset_dir, epochs=3)
    train(cfg, tmp_path / "a.dgfm")
    train(cfg, tmp_path / "b.dgfm")
    assert (tmp_path / "a.log.csv").read_text() == \
        (tmp_path / "b.log.csv").read_text()
    assert (tmp_path / "a.dgfm").read_bytes() == (tmp_path / "b.dgfm").read_bytes()


def test_train_resume_continues_close_to_interrupted_loss(dataset_dir, tmp_path):
    full_cfg = tiny_config(dataset_dir, epochs=8)
    half_cfg = tiny_config(dataset_dir, epochs=4)
    half = tmp_path / "half.dgfm"
    train(half_cfg, half)
    resumed = tmp_path / "resumed.dgfm"
    train(full_cfg, resumed, resume=half)
    rows = [line.split(",") for line in
            (tmp_path / "resumed.log.csv").read_text().splitlines()[1:]]
    first_resumed_total = float(rows[0][-1])
    half_rows = [line.split(",") for line in
                 (tmp_path / "half.log.csv").read_text().splitlines()[1:]]
    last_half_total = float(half_rows[-1][-1])
    assert first_resumed_total <= last_half_total * 1.10


# -- generation -------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "model.dgfm"
    train(tiny_config(dataset_dir, epochs=2), out)
    return out


def test_generate_eight_seconds_gives_240_frames(dataset_dir, trained, tmp_path):
    wav = tmp_path / "music.wav"
    write_wav(wav, make_audio_clip(0, 8.0), pcm16=True)
    out = tmp_path / "dance.dgfm"
    request = GenerationRequest(audio=str(wav), genre="Jazz", seconds=8.0,
                                seed=5, out=str(out), stub_embeddings=11)
    generate(request, trained)
    motion = load_tensor(out)
    assert motion.shape == (240, 319)


def test_generate_is_byte_reproducible(dataset_dir, trained, tmp_path):
    wav = tmp_path / "music.wav"
    write_wav(wav, make_audio_clip(1, 4.0), pcm16=True)
    outs = []
    for name in ("a.dgfm", "b.dgfm"):
        out = tmp_path / name
        request = GenerationRequest(audio=str(wav), genre="Jazz", seconds=4.0,
                                    seed=9, out=str(out), stub_embeddings=3)
        generate(request, trained)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_generate_requires_embedding_source(dataset_dir, trained, tmp_path):
    wav = tmp_path / "music.wav"
    write_wav(wav, make_audio_clip(0, 4.0), pcm16=True)
    request = GenerationRequest(audio=str(wav), genre="Jazz", seconds=4.0,
                                seed=1, out=str(tmp_path / "x.dgfm"))
    with pytest.raises(ProviderError, match="stub-embeddings"):
        generate(request, trained)


def test_generate_validates_genre_and_length(dataset_dir, trained, tmp_path):
    wav = tmp_path / "music.wav"
    write_wav(wav, make_audio_clip(0, 4.0), pcm16=True)
    bad_genre = GenerationRequest(audio=str(wav), genre="Polka", seconds=4.0,
                                  seed=1, out=str(tmp_path / "x.dgfm"),
                                  stub_embeddings=1)
    with pytest.raises(PipelineError, match="vocabulary"):
        generate(bad_genre, trained)
    too_long = GenerationRequest(audio=str(wav), genre="Jazz", seconds=8.0,
                                 seed=1, out=str(tmp_path / "x.dgfm"),
                                 stub_embeddings=1)
    with pytest.raises(PipelineError, match="shorter"):
        generate(too_long, trained)


def test_generate_with_w2c_file_and_bvh(dataset_dir, trained, tmp_path):
    wav = tmp_path / "music.wav"
    write_wav(wav, make_audio_clip(2, 4.0), pcm16=True)
    emb_path = tmp_path / "emb.dgfm"
    save_tensor(emb_path, stub_embedding(55, 120).frames)
    genre_path = tmp_path / "genre.dgfm"
    save_tensor(genre_path, np.random.default_rng(5).standard_normal(512))
    out = tmp_path / "dance.dgfm"
    request = GenerationRequest(audio=str(wav), genre="Jazz", seconds=4.0,
                                seed=2, out=str(out), w2c=str(emb_path),
                                genre_embedding=str(genre_path), bvh=True)
    generate(request, trained)
    assert out.exists()
    assert (tmp_path / "dance.bvh").read_text().startswith("HIERARCHY")


def test_crossfade_preserves_length_and_blends():
    k = 20
    a = np.zeros((k, 3))
    b = np.ones((k, 3))
    joined = crossfade_join([a, b], overlap=5)
    assert joined.shape == (2 * k, 3)
    assert np.all(joined[:k - 3] == 0.0)
    assert np.all(joined[k + 2:] == 1.0)
    seam = joined[k - 3:k + 2, 0]
    assert np.all(np.diff(seam) > 0)  # monotone ramp across the boundary


# -- evaluation --------------------------------------------------------------------

@pytest.fixture(scope="module")
def eval_dirs(dataset_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    gen_dir, ref_dir, audio_dir = root / "gen", root / "ref", root / "audio"
    for d in (gen_dir, ref_dir, audio_dir):
        d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        motion = make_motion_clip(i, 120)
        save_tensor(ref_dir / f"clip{i}.dgfm", motion)
        save_tensor(gen_dir / f"clip{i}.dgfm",
                    make_motion_clip(i, 120, seed=9))
        write_wav(audio_dir / f"clip{i}.wav", make_audio_clip(i, 4.0),
                  pcm16=True)
    return gen_dir, ref_dir, audio_dir


def test_reference_evaluated_against_itself_has_zero_fid(eval_dirs, tmp_path):
    _gen, ref, audio = eval_dirs
    report = evaluate(ref, ref, audio)
    assert report.fid_hand <= 1e-6
    assert report.fid_body <= 1e-6
    assert 0.0 <= report.bas <= 1.0


def test_generated_equal_reference_gives_identical_bas(eval_dirs):
    _gen, ref, audio = eval_dirs
    r1 = evaluate(ref, ref, audio)
    r2 = evaluate(ref, ref, audio)
    assert r1.bas == r2.bas


def test_evaluate_report_files(eval_dirs, tmp_path):
    gen, ref, audio = eval_dirs
    report = evaluate(gen, ref, audio)
    assert report.fid_hand > 0
    out = tmp_path / "report.csv"
    write_report(report, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "fid_hand,fid_body,div_body,div_hand,pfc,bas"
    assert (tmp_path / "report.txt").exists()


def test_evaluate_unpaired_audio_lists_offenders(eval_dirs, tmp_path):
    gen, ref, _audio = eval_dirs
    empty_audio = tmp_path / "noaudio"
    empty_audio.mkdir()
    with pytest.raises(PairingError, match="clip0"):
        evaluate(gen, ref, empty_audio)


def test_evaluate_needs_two_sequences(eval_dirs, tmp_path):
    gen, _ref, audio = eval_dirs
    single = tmp_path / "single"
    single.mkdir()
    save_tensor(single / "one.dgfm", make_motion_clip(0, 120))
    with pytest.raises(InsufficientDataError):
        evaluate(gen, single, audio)


def test_synthetic_fid_close_to_gaussian_closed_form(tmp_path):
    """Sets with known Gaussian kinetic features: empirical FID within 5%."""
    from dgfm.metrics import FeatureDist, fid
    from tests.test_metrics import closed_form_frechet, random_psd
    rng = np.random.default_rng(1)
    d, n = 6, 10000
    mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d) + 0.5
    c1, c2 = random_psd(rng, d), random_psd(rng, d)
    x1 = rng.standard_normal((n, d)) @ np.linalg.cholesky(c1).T + mu1
    x2 = rng.standard_normal((n, d)) @ np.linalg.cholesky(c2).T + mu2
    empirical = fid(FeatureDist.fit(x1), FeatureDist.fit(x2))
    exact = closed_form_frechet(mu1, c1, mu2, c2)
    assert abs(empirical - exact) / exact < 0.05


# -- config ------------------------------------------------------------------------

def test_train_config_from_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"manifest": "m.tsv", "lr": 0.01, "epochs": 3}))
    cfg = TrainConfig.from_json(path)
    assert cfg.lr == 0.01 and cfg.epochs == 3
    assert cfg.batch == 16  # desk default


def test_train_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"learning_rate": 0.01}))
    with pytest.raises(PipelineError, match="unknown config keys"):
        TrainConfig.from_json(path)


# -- cli ---------------------------------------------------------------------------

def run_cli(*args, env_extra=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run([sys.executable, "-m", "dgfm.cli", *args],
                          capture_output=True, text=True, env=env)


def test_cli_features_and_determinism(dataset_dir, tmp_path):
    wav = dataset_dir / "audio" / "clip0.wav"
    out1, out2 = tmp_path / "f1.dgfm", tmp_path / "f2.dgfm"
    r1 = run_cli("features", "--audio", str(wav), "--out", str(out1))
    assert r1.returncode == 0, r1.stderr
    assert "120x193" in r1.stdout
    r2 = run_cli("features", "--audio", str(wav), "--out", str(out2))
    assert r2.returncode == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert load_tensor(out1).shape == (120, 193)


def test_cli_ingest(dataset_dir, tmp_path):
    stats = tmp_path / "stats.dgfm"
    result = run_cli("ingest", "--manifest", str(dataset_dir / "manifest.tsv"),
                     "--stats-out", str(stats))
    assert result.returncode == 0, result.stderr
    assert "4 train" in result.stdout
    assert stats.exists()


def test_cli_end_to_end_train_generate_evaluate(dataset_dir, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(
        dict(TINY, manifest=str(dataset_dir / "manifest.tsv"))))
    ckpt = tmp_path / "model.dgfm"
    result = run_cli("train", "--config", str(cfg_path), "--out", str(ckpt))
    assert result.returncode == 0, result.stderr

    wav = dataset_dir / "audio" / "clip0.wav"
    gen_dir = tmp_path / "gen"
    gen_dir.mkdir()
    audio_dir = tmp_path / "audio"
    audio_dir.mkdir()
    for i, seed in enumerate((1, 2)):
        out = gen_dir / f"take{i}.dgfm"
        result = run_cli("generate", "--ckpt", str(ckpt), "--audio", str(wav),
                         "--genre", "Jazz", "--seconds", "4", "--seed",
                         str(seed), "--out", str(out),
                         "--stub-embeddings", "7",
                         env_extra={"DGFM_THREADS": "1"})
        assert result.returncode == 0, result.stderr
        (audio_dir / f"take{i}.wav").write_bytes(wav.read_bytes())

    report = tmp_path / "report.csv"
    result = run_cli("evaluate", "--generated", str(gen_dir), "--reference",
                     str(dataset_dir / "motion"), "--audio", str(audio_dir),
                     "--out", str(report))
    assert result.returncode == 0, result.stderr
    assert report.exists()
    header = report.read_text().splitlines()[0]
    assert header == "fid_hand,fid_body,div_body,div_hand,pfc,bas"


def test_cli_generate_byte_reproducible(dataset_dir, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(
        dict(TINY, manifest=str(dataset_dir / "manifest.tsv"), epochs=1)))
    ckpt = tmp_path / "model.dgfm"
    assert run_cli("train", "--config", str(cfg_path), "--out",
                   str(ckpt)).returncode == 0
    wav = dataset_dir / "audio" / "clip1.wav"
    blobs = []
    for name in ("r1.dgfm", "r2.dgfm"):
        out = tmp_path / name
        result = run_cli("generate", "--ckpt", str(ckpt), "--audio", str(wav),
                         "--genre", "Breaking", "--seconds", "4",
                         "--seed", "123", "--out", str(out),
                         "--stub-embeddings", "9")
        assert result.returncode == 0, result.stderr
        blobs.append(out.read_bytes())
    assert blobs[0] == blobs[1]
