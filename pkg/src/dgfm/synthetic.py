"""Synthetic clips for tests and desk-scale experiments.

Each clip pairs a small audio mixture (sines plus a click track) with a
sinusoidal joint-trajectory motion and scripted alternating foot contacts.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .audio import ANALYSIS_RATE, AudioClip, write_wav
from .motion import IDENTITY_6D, N_JOINTS, POSE_DIM, matrix_to_rot6d
from .tensorfile import save_tensor

DEFAULT_GENRES = ("Jazz", "Breaking", "Popping", "Locking")

# torso, head, and arm joints only: the leg chains stay at identity so the
# feet genuinely plant, keeping the scripted contacts physically consistent
_ANIMATED_JOINTS = (3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21,
                    22, 25, 28, 37, 40, 43)


def make_motion_clip(index: int, n_frames: int, fps: int = 30,
                     seed: int = 0) -> np.ndarray:
    """One (k, 319) clip of smooth sinusoidal upper-body motion with scripted
    alternating foot contacts and planted feet."""
    rng = np.random.default_rng(seed + 1000 * index)
    t = np.arange(n_frames) / fps
    base_freq = 0.5 + 0.25 * index
    frames = np.zeros((n_frames, POSE_DIM))

    phase = (t * base_freq) % 1.0
    left = (phase < 0.5).astype(np.float64)
    frames[:, 0] = left          # L ankle
    frames[:, 2] = left          # L toe
    frames[:, 1] = 1.0 - left
    frames[:, 3] = 1.0 - left

    frames[:, 4] = 0.25 * index - 0.4
    frames[:, 5] = 0.95
    frames[:, 6] = 0.1 * (index % 2)

    rot6d = np.tile(IDENTITY_6D, (n_frames, N_JOINTS, 1))
    for j in _ANIMATED_JOINTS:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        amp = 0.25 + 0.15 * rng.random()
        freq = base_freq * (1.0 + 0.5 * rng.random())
        angle = amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        mats = Rotation.from_rotvec(angle[:, None] * axis).as_matrix()
        rot6d[:, j] = matrix_to_rot6d(mats)
    frames[:, 7:] = rot6d.reshape(n_frames, N_JOINTS * 6)
    return frames


def make_audio_clip(index: int, seconds: float,
                    sample_rate: int = ANALYSIS_RATE) -> AudioClip:
    """A tone mixture with a 2 Hz click train starting at 0.5 s."""
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    tone = 220.0 * (1.0 + 0.3 * index)
    x = 0.3 * np.sin(2 * np.pi * tone * t) \
        + 0.15 * np.sin(2 * np.pi * 2 * tone * t)
    click_len = int(0.01 * sample_rate)
    envelope = np.exp(-np.arange(click_len) / (0.002 * sample_rate))
    pos = int(0.5 * sample_rate)
    while pos + click_len < n:
        x[pos:pos + click_len] += 0.5 * envelope
        pos += int(0.5 * sample_rate)
    return AudioClip(np.clip(x, -1.0, 1.0), sample_rate)


def make_synthetic_dataset(root, n_clips: int = 4, seconds: float = 4.0,
                           seed: int = 0,
                           genres: tuple[str, ...] = DEFAULT_GENRES) -> Path:
    """Write motion/audio files plus a manifest; returns the manifest path."""
    root = Path(root)
    (root / "motion").mkdir(parents=True, exist_ok=True)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    n_frames = int(round(seconds * 30))
    lines = ["# split\tmotion\tmusic\tw2c\tgenre"]
    for i in range(n_clips):
        motion = make_motion_clip(i, n_frames, seed=seed)
        save_tensor(root / "motion" / f"clip{i}.dgfm", motion)
        write_wav(root / "audio" / f"clip{i}.wav", make_audio_clip(i, seconds),
                  pcm16=True)
        genre = genres[i % len(genres)]
        lines.append(f"train\tmotion/clip{i}.dgfm\taudio/clip{i}.wav\t"
                     f"stub:{100 + i}\t{genre}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
