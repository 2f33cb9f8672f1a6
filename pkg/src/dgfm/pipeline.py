"""Dataset ingestion, training orchestration, generation, and evaluation.

Manifests are tab-separated text, one record per line:

    split<TAB>motion_path<TAB>music_path<TAB>w2c_source<TAB>genre

where split is train or test, music_path is a .wav file or a precomputed
(T, 193) feature file, and w2c_source is a (T, 512) embedding file or
``stub:<seed>``.  Paths resolve relative to the manifest.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics as me
from .audio import (AudioClip, detect_beats, read_wav, resample,
                    ANALYSIS_RATE, N_BINS, stft_features)
from .bvh import export_bvh
from .conditioning import (EMBED_DIM, stub_embedding, stub_genre_embedding,
                           load_embedding, ClipAudioEmbedding, GenreEmbedding)
from .denoiser import DenoiserConfig
from .diffusion import (DiffusionError, GuidanceConfig, LossWeights,
                        TrainingBatch, guided_predict, make_schedule,
                        sample_loop, training_step, Normalizer)
from .metrics import EvalReport
from .model import DGFMModel
from .motion import MotionSequence, POSE_DIM, SkeletonDef, default_skeleton, fk, load_skeleton
from .optim import Adam
from .tensorfile import TensorDataError, TensorFileError, load_tensor, save_tensor

SEGMENT_SECONDS = 4.0
SEGMENT_FRAMES = 120
CROSSFADE_FRAMES = 15


class PipelineError(Exception):
    pass


class IngestError(PipelineError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("ingest failed:\n" + "\n".join(diagnostics))


class ProviderError(PipelineError):
    pass


class PairingError(PipelineError):
    pass


def max_threads() -> int:
    value = os.environ.get("DGFM_THREADS", "").strip()
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


# -- manifest ----------------------------------------------------------------

@dataclass
class ManifestRecord:
    split: str
    motion_path: Path
    music_path: Path
    w2c_source: str      # path string or "stub:<seed>"
    genre: str


def parse_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise PipelineError(
                f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        split, motion, music, w2c, genre = (p.strip() for p in parts)
        if split not in ("train", "test"):
            raise PipelineError(f"{path}:{lineno}: split must be train|test, "
                                f"got {split!r}")
        if not genre:
            raise PipelineError(f"{path}:{lineno}: empty genre label")
        records.append(ManifestRecord(
            split=split,
            motion_path=path.parent / motion,
            music_path=path.parent / music,
            w2c_source=w2c,
            genre=genre,
        ))
    if not records:
        raise PipelineError(f"{path}: manifest has no records")
    return records


# -- ingest --------------------------------------------------------------------

@dataclass
class Window:
    m0_raw: np.ndarray
    m0_norm: np.ndarray | None
    stft: np.ndarray
    w2c: np.ndarray
    genre: str
    genre_vec: np.ndarray
    source: str


@dataclass
class Dataset:
    train_windows: list[Window]
    test_windows: list[Window]
    genres: list[str]
    normalizer: Normalizer


def _record_features(rec: ManifestRecord, n_frames: int) -> np.ndarray:
    if rec.music_path.suffix.lower() == ".wav":
        clip = read_wav(rec.music_path)
        feats = stft_features(clip, allow_resample=True).frames
    else:
        feats = load_tensor(rec.music_path)
        if feats.ndim != 2 or feats.shape[1] != N_BINS:
            raise PipelineError(
                f"{rec.music_path}: features must be (T, {N_BINS}), "
                f"got {feats.shape}")
    if feats.shape[0] != n_frames:
        raise PipelineError(
            f"{rec.music_path}: {feats.shape[0]} feature frames vs "
            f"{n_frames} motion frames (30 fps alignment)")
    return feats


def _record_w2c(rec: ManifestRecord, manifest_dir: Path,
                n_frames: int) -> np.ndarray:
    src = rec.w2c_source
    if src.startswith("stub:"):
        return stub_embedding(int(src[len("stub:"):]), n_frames).frames
    path = manifest_dir / src
    emb = load_embedding(path)
    if not isinstance(emb, ClipAudioEmbedding):
        raise PipelineError(f"{path}: expected a (T, {EMBED_DIM}) audio embedding")
    if emb.frames.shape[0] != n_frames:
        raise PipelineError(
            f"{path}: {emb.frames.shape[0]} embedding rows vs {n_frames} "
            "motion frames")
    return emb.frames


def ingest(manifest_path, genre_embedding_dir=None, stub_seed: int = 0,
           window_frames: int = SEGMENT_FRAMES,
           stats_out=None) -> Dataset:
    """Validate every record, cut aligned windows, and fit normalization.

    All diagnostics are collected before failing so one bad file does not
    mask the rest; nothing is persisted unless every record validates.
    """
    manifest_path = Path(manifest_path)
    records = parse_manifest(manifest_path)
    diagnostics: list[str] = []
    loaded = []
    for rec in records:
        try:
            motion = load_tensor(rec.motion_path)
            if motion.ndim != 2 or motion.shape[1] != POSE_DIM:
                raise PipelineError(
                    f"{rec.motion_path}: motion must be (k, {POSE_DIM}), "
                    f"got {motion.shape}")
            if motion.shape[0] < window_frames:
                raise PipelineError(
                    f"{rec.motion_path}: {motion.shape[0]} frames is shorter "
                    f"than one {window_frames}-frame window")
            n_frames = motion.shape[0]
            feats = _record_features(rec, n_frames)
            w2c = _record_w2c(rec, manifest_path.parent, n_frames)
            loaded.append((rec, motion, feats, w2c))
        except (PipelineError, TensorFileError, TensorDataError, OSError,
                ValueError) as exc:
            diagnostics.append(f"{rec.motion_path.name}: {exc}")
    if diagnostics:
        raise IngestError(diagnostics)

    genres = sorted({rec.genre for rec in records})
    genre_vecs = {}
    for genre in genres:
        vec = None
        if genre_embedding_dir is not None:
            candidate = Path(genre_embedding_dir) / f"{genre}.dgfm"
            if candidate.exists():
                emb = load_embedding(candidate)
                if not isinstance(emb, GenreEmbedding):
                    raise PipelineError(f"{candidate}: expected a genre embedding")
                vec = emb.vector
        if vec is None:
            vec = stub_genre_embedding(genre, base_seed=stub_seed).vector
        genre_vecs[genre] = vec

    train_windows: list[Window] = []
    test_windows: list[Window] = []
    for rec, motion, feats, w2c in loaded:
        n_win = motion.shape[0] // window_frames
        for w in range(n_win):
            sl = slice(w * window_frames, (w + 1) * window_frames)
            win = Window(
                m0_raw=motion[sl], m0_norm=None, stft=feats[sl], w2c=w2c[sl],
                genre=rec.genre, genre_vec=genre_vecs[rec.genre],
                source=f"{rec.motion_path.name}[{w}]")
            (train_windows if rec.split == "train" else test_windows).append(win)
    if not train_windows:
        raise PipelineError("manifest has no train-split windows")

    normalizer = Normalizer.fit(
        np.concatenate([w.m0_raw for w in train_windows], axis=0))
    for win in train_windows + test_windows:
        win.m0_norm = normalizer.normalize(win.m0_raw)
    if stats_out is not None:
        from .tensorfile import save_container
        save_container(stats_out, {"norm.mean": normalizer.mean,
                                   "norm.std": normalizer.std})
    return Dataset(train_windows=train_windows, test_windows=test_windows,
                   genres=genres, normalizer=normalizer)


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    manifest: str = ""
    lr: float = 1e-4           # paper value
    batch: int = 16            # desk default; the paper trains at 512
    epochs: int = 50           # desk default; the paper trains for 2000
    hidden: int = 512
    layers: int = 4
    heads: int = 8
    mlp_ratio: int = 4
    dropout: float = 0.1
    T: int = 1000
    guidance_w: float = 2.7
    p_uncond: float = 0.1
    lambda_joint: float = 1.0
    lambda_velocity: float = 1.0
    lambda_contact: float = 0.5
    seed: int = 0
    checkpoint_every: int = 50  # epochs
    stub_seed: int = 0
    genre_embedding_dir: str | None = None
    skeleton: str | None = None
    fusion_activation: str = "gelu"

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise PipelineError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**raw)


def _skeleton_from(path: str | None) -> SkeletonDef:
    return load_skeleton(path) if path else default_skeleton()


def train(config: TrainConfig, out_path, log_path=None,
          resume=None) -> Path:
    """Run the full training loop; returns the checkpoint path.

    Loss terms are logged per step as CSV; checkpoints are written
    atomically every ``checkpoint_every`` epochs and at the end.  A
    non-finite loss aborts without touching the last good checkpoint.
    """
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path else out_path.with_suffix(".log.csv")
    dataset = ingest(config.manifest, config.genre_embedding_dir,
                     stub_seed=config.stub_seed)
    skel = _skeleton_from(config.skeleton)
    ss = np.random.SeedSequence(config.seed)
    init_seed, data_seed = ss.spawn(2)
    init_rng = np.random.default_rng(init_seed)
    data_rng = np.random.default_rng(data_seed)

    den_config = DenoiserConfig(hidden=config.hidden, layers=config.layers,
                                heads=config.heads, mlp_ratio=config.mlp_ratio,
                                dropout=config.dropout)
    step = 0
    if resume is not None:
        model, extra = DGFMModel.load_checkpoint(resume)
        optimizer = Adam(model.params(), lr=config.lr)
        optimizer.load_state_tensors(extra)
        if "train.step" in extra:
            step = int(round(float(extra["train.step"])))
        data_rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, step)))
    else:
        model = DGFMModel(den_config, dataset.normalizer, dataset.genres,
                          init_rng, schedule_T=config.T,
                          fusion_activation=config.fusion_activation)
        optimizer = Adam(model.params(), lr=config.lr)

    schedule = make_schedule(config.T)
    weights = LossWeights(config.lambda_joint, config.lambda_velocity,
                          config.lambda_contact)
    guidance = GuidanceConfig(config.guidance_w, config.p_uncond)
    windows = dataset.train_windows
    steps_per_epoch = math.ceil(len(windows) / config.batch)
    start_epoch = step // steps_per_epoch

    def save(path):
        extra = optimizer.state_tensors()
        extra["train.step"] = np.asarray(float(step))
        model.save_checkpoint(path, extra)

    mode = "a" if resume is not None and log_path.exists() else "w"
    with open(log_path, mode) as log:
        if mode == "w":
            log.write("step,epoch,loss_s,loss_j,loss_v,loss_c,total\n")
        for epoch in range(start_epoch, config.epochs):
            order = data_rng.permutation(len(windows))
            for lo in range(0, len(windows), config.batch):
                chunk = [windows[i] for i in order[lo:lo + config.batch]]
                batch = TrainingBatch(
                    m0_raw=np.stack([w.m0_raw for w in chunk]),
                    m0_norm=np.stack([w.m0_norm for w in chunk]),
                    stft=np.stack([w.stft for w in chunk]),
                    w2c=np.stack([w.w2c for w in chunk]),
                    genre_vec=np.stack([w.genre_vec for w in chunk]),
                )
                detail, grads = training_step(model, batch, schedule, weights,
                                              guidance, data_rng, skel)
                optimizer.step(grads)
                step += 1
                log.write(f"{step},{epoch},{detail.reconstruction!r},"
                          f"{detail.joint!r},{detail.velocity!r},"
                          f"{detail.contact!r},{detail.total!r}\n")
            if (epoch + 1) % config.checkpoint_every == 0:
                save(out_path)
        save(out_path)
    return out_path


# -- generation -------------------------------------------------------------------

@dataclass
class GenerationRequest:
    audio: str
    genre: str
    seconds: float
    seed: int
    out: str
    stub_embeddings: int | None = None
    w2c: str | None = None
    genre_embedding: str | None = None
    bvh: bool = False
    skeleton: str | None = None
    guidance_w: float | None = None   # default: the training value


def crossfade_join(segments: list[np.ndarray],
                   overlap: int = CROSSFADE_FRAMES) -> np.ndarray:
    """Concatenate equal-length segments, blending a linear crossfade over
    the frames straddling each boundary (edge poses are held to synthesize
    the overlap).  The total frame count is preserved."""
    out = np.concatenate(segments, axis=0)
    k = segments[0].shape[0]
    half = overlap // 2
    for b_idx in range(1, len(segments)):
        left = segments[b_idx - 1]
        right = segments[b_idx]
        b = b_idx * k
        for d in range(overlap):
            g = b - half - 1 + d
            w = (d + 1) / (overlap + 1)
            a_val = left[g - (b - k)] if g < b else left[k - 1]
            b_val = right[g - b] if g >= b else right[0]
            out[g] = (1.0 - w) * a_val + w * b_val
    return out


def generate(request: GenerationRequest, ckpt_path) -> Path:
    """Long-form generation: segment audio, sample each window, join."""
    model, _extra = DGFMModel.load_checkpoint(ckpt_path)
    if request.genre not in model.genres:
        raise PipelineError(
            f"genre {request.genre!r} not in the model vocabulary "
            f"{model.genres}")
    if request.seconds < SEGMENT_SECONDS:
        raise PipelineError(
            f"output length must be >= {SEGMENT_SECONDS}s, got {request.seconds}")
    clip = read_wav(request.audio)
    if clip.duration < request.seconds - 1e-9:
        raise PipelineError(
            f"audio is {clip.duration:.2f}s, shorter than the requested "
            f"{request.seconds}s")
    if clip.sample_rate != ANALYSIS_RATE:
        clip = resample(clip, ANALYSIS_RATE)
    n_seg = int(request.seconds // SEGMENT_SECONDS)
    seg_samples = int(SEGMENT_SECONDS * ANALYSIS_RATE)
    total_frames = n_seg * SEGMENT_FRAMES

    seg_stft = []
    for i in range(n_seg):
        seg = AudioClip(clip.samples[i * seg_samples:(i + 1) * seg_samples],
                        ANALYSIS_RATE)
        seg_stft.append(stft_features(seg).frames)

    if request.w2c is not None:
        emb = load_embedding(request.w2c)
        if not isinstance(emb, ClipAudioEmbedding):
            raise ProviderError(f"{request.w2c}: expected a (T, {EMBED_DIM}) "
                                "audio embedding")
        if emb.frames.shape[0] < total_frames:
            raise ProviderError(
                f"{request.w2c}: {emb.frames.shape[0]} rows < {total_frames} "
                "frames required")
        seg_w2c = [emb.frames[i * SEGMENT_FRAMES:(i + 1) * SEGMENT_FRAMES]
                   for i in range(n_seg)]
    elif request.stub_embeddings is not None:
        whole = stub_embedding(request.stub_embeddings, total_frames).frames
        seg_w2c = [whole[i * SEGMENT_FRAMES:(i + 1) * SEGMENT_FRAMES]
                   for i in range(n_seg)]
    else:
        raise ProviderError(
            "no audio embedding source: pass an embedding file (--w2c) or "
            "enable the stub provider (--stub-embeddings SEED)")

    if request.genre_embedding is not None:
        emb = load_embedding(request.genre_embedding)
        if not isinstance(emb, GenreEmbedding):
            raise ProviderError(f"{request.genre_embedding}: expected a "
                                "rank-1 genre embedding")
        c_e = emb.vector
    elif request.stub_embeddings is not None:
        c_e = stub_genre_embedding(request.genre,
                                   base_seed=request.stub_embeddings).vector
    else:
        raise ProviderError(
            "no genre embedding source: pass --genre-emb or --stub-embeddings")

    w = request.guidance_w if request.guidance_w is not None else 2.7
    schedule = make_schedule(model.schedule_T)
    from .autodiff import Tensor

    seeds = np.random.SeedSequence(request.seed).spawn(n_seg)

    def sample_segment(i: int) -> np.ndarray:
        c_m = model.fusion.fuse(Tensor(seg_w2c[i]), Tensor(seg_stft[i])).data

        def predict(d_t, t):
            return guided_predict(model, d_t, t, c_m, c_e, w)

        rng = np.random.default_rng(seeds[i])
        normed = sample_loop(predict, schedule, SEGMENT_FRAMES, rng)
        return model.normalizer.denormalize(normed)

    with ThreadPoolExecutor(max_workers=max_threads()) as pool:
        segments = list(pool.map(sample_segment, range(n_seg)))

    frames = crossfade_join(segments)
    frames[:, 0:4] = (frames[:, 0:4] > 0.5).astype(np.float64)
    motion = MotionSequence(frames)
    out = Path(request.out)
    save_tensor(out, motion.frames)
    if request.bvh:
        skel = _skeleton_from(request.skeleton)
        export_bvh(out.with_suffix(".bvh"), motion, skel)
    return out


# -- evaluation ----------------------------------------------------------------

def _load_motion_dir(directory) -> list[tuple[str, MotionSequence]]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.dgfm"))
    out = []
    for p in paths:
        out.append((p.stem, MotionSequence(load_tensor(p))))
    if len(out) < 2:
        raise me.InsufficientDataError(
            f"{directory}: need at least 2 motion files, found {len(out)}")
    return out


def evaluate(generated_dir, reference_dir, audio_dir,
             skeleton: str | None = None) -> EvalReport:
    """All six report metrics for a generated set against a reference set.

    BAS pairs each generated motion with the same-stem .wav in audio_dir.
    """
    skel = _skeleton_from(skeleton)
    gen = _load_motion_dir(generated_dir)
    ref = _load_motion_dir(reference_dir)
    audio_dir = Path(audio_dir)

    missing = [name for name, _ in gen
               if not (audio_dir / f"{name}.wav").exists()]
    if missing:
        raise PairingError(
            "no paired audio for generated motions: " + ", ".join(missing))

    def positions_of(items):
        with ThreadPoolExecutor(max_workers=max_threads()) as pool:
            return list(pool.map(lambda kv: fk(kv[1], skel), items))

    gen_pos = positions_of(gen)
    ref_pos = positions_of(ref)

    def feature_matrix(positions, joints):
        return np.stack([me.kinetic_features(p, joints) for p in positions])

    report_values = {}
    for label, joints in (("hand", skel.hand_joints), ("body", skel.body_joints)):
        gen_feats = feature_matrix(gen_pos, joints)
        ref_feats = feature_matrix(ref_pos, joints)
        report_values[f"fid_{label}"] = me.fid(me.FeatureDist.fit(gen_feats),
                                               me.FeatureDist.fit(ref_feats))
        report_values[f"div_{label}"] = me.diversity(gen_feats)

    report_values["pfc"] = float(np.mean([me.pfc(p, skel) for p in gen_pos]))

    bas_scores = []
    for (name, _motion), pos in zip(gen, gen_pos):
        music = detect_beats(read_wav(audio_dir / f"{name}.wav"))
        if len(music) == 0:
            continue
        bas_scores.append(me.bas(music, me.dance_beats(pos)))
    if not bas_scores:
        raise me.InsufficientDataError(
            "no music beats detected in any paired audio")
    report_values["bas"] = float(np.mean(bas_scores))
    return EvalReport(**report_values)


def write_report(report: EvalReport, out_path) -> None:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    text_path = out_path.with_suffix(".txt") if out_path.suffix != ".txt" \
        else out_path.with_suffix(".report.txt")
    text_path.write_text(report.text_report())
