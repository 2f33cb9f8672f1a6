"""Evaluation metrics: FID, diversity, physical foot contact, beat alignment.

FID and diversity operate on kinetic features (per-joint velocity-energy
statistics) computed separately over the body and hand joint subsets, which
is what produces the hand/body metric split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .audio import BeatTimes, _peak_runs, _plateau_tol, moving_average
from .motion import SkeletonDef, UP_AXIS

BAS_SIGMA = 0.1  # seconds (3 frames at 30 fps)


class MetricError(Exception):
    pass


class InsufficientDataError(MetricError):
    pass


def kinetic_features(positions: np.ndarray, joints: np.ndarray,
                     fps: float = 30.0) -> np.ndarray:
    """Per-sequence feature vector: for each joint in the subset, the mean
    kinetic energy 0.5*|v|^2 and the std of speed (velocities in m/s)."""
    if positions.shape[0] < 2:
        raise InsufficientDataError("kinetic features need at least 2 frames")
    vel = np.diff(positions[:, joints], axis=0) * fps    # (k-1, J, 3)
    speed = np.linalg.norm(vel, axis=-1)                 # (k-1, J)
    energy = 0.5 * speed ** 2
    feats = np.stack([energy.mean(axis=0), speed.std(axis=0)], axis=1)
    return feats.reshape(-1)


@dataclass
class FeatureDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (len(self.mean), len(self.mean)):
            raise MetricError(
                f"cov shape {self.cov.shape} does not match mean {self.mean.shape}")
        asym = np.max(np.abs(self.cov - self.cov.T)) if self.cov.size else 0.0
        if asym > 1e-10:
            raise MetricError(f"covariance asymmetric by {asym:.2e}")

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureDist":
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 2:
            raise InsufficientDataError(
                "distribution fit needs a (n>=2, d) feature matrix")
        cov = np.cov(features, rowvar=False)
        cov = np.atleast_2d(cov)
        cov = 0.5 * (cov + cov.T)
        return cls(features.mean(axis=0), cov)


def _psd_sqrt_eigvals(sym: np.ndarray, what: str) -> np.ndarray:
    vals = np.linalg.eigvalsh(sym)
    if np.any(vals < -1e-8):
        raise MetricError(
            f"{what}: strongly negative eigenvalue {vals.min():.3e}")
    return np.sqrt(np.clip(vals, 0.0, None))


def fid(a: FeatureDist, b: FeatureDist) -> float:
    """Frechet distance between two Gaussian feature fits.

    The cross term uses the symmetric form sqrt(A) B sqrt(A), whose
    eigenvalues give the trace of (A B)^(1/2) without a nonsymmetric sqrtm.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(
            f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    vals_a, vecs_a = np.linalg.eigh(a.cov)
    if np.any(vals_a < -1e-8):
        raise MetricError(
            f"covariance A: strongly negative eigenvalue {vals_a.min():.3e}")
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = root_a @ b.cov @ root_a
    inner = 0.5 * (inner + inner.T)
    cross = _psd_sqrt_eigvals(inner, "cross covariance").sum()
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    traces = float(np.trace(a.cov) + np.trace(b.cov))
    value = mean_term + traces - 2.0 * cross
    # eigensolve error is relative to the covariance scale; the clamp floor
    # has to follow it or large-but-exact fits would be rejected
    if value < -1e-6 * max(1.0, traces):
        raise MetricError(f"fid produced {value:.3e}, below the numerical floor")
    return max(value, 0.0)


def diversity(features: np.ndarray) -> float:
    """Mean pairwise euclidean distance over per-sequence features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise InsufficientDataError("diversity needs at least 2 sequences")
    return float(pdist(features).mean())


def pfc(positions: np.ndarray, skel: SkeletonDef) -> float:
    """Physical foot contact score; penalizes root acceleration while both
    feet are moving.  Lower is better, 0 for static motion."""
    k = positions.shape[0]
    if k < 3:
        raise InsufficientDataError("pfc needs at least 3 frames")
    com = positions[:, 0]                             # root joint as COM proxy
    accel = com[2:] - 2.0 * com[1:-1] + com[:-2]      # (k-2, 3), m/frame^2
    adj = accel.copy()
    adj[:, UP_AXIS] = np.maximum(adj[:, UP_AXIS], 0.0)
    accel_mag = np.linalg.norm(adj, axis=-1)
    peak = accel_mag.max() if len(accel_mag) else 0.0
    if peak < 1e-12:
        return 0.0
    left = positions[:, skel.foot_joints[[0, 2]]].mean(axis=1)   # (k, 3)
    right = positions[:, skel.foot_joints[[1, 3]]].mean(axis=1)
    vel_l = np.linalg.norm(np.diff(left, axis=0), axis=-1)[:k - 2]
    vel_r = np.linalg.norm(np.diff(right, axis=0), axis=-1)[:k - 2]
    scores = accel_mag * vel_l * vel_r
    return float(scores.sum() / (k * peak))


def bas(music_beats: BeatTimes, dance_beats: BeatTimes,
        sigma: float = BAS_SIGMA) -> float:
    """Beat alignment: Gaussian-kernel agreement of dance beats with each
    music beat, averaged over music beats; in [0, 1]."""
    if len(music_beats) == 0:
        raise InsufficientDataError("bas needs at least one music beat")
    if len(dance_beats) == 0:
        return 0.0
    tm = music_beats.times[:, None]
    td = dance_beats.times[None, :]
    nearest_sq = np.min((td - tm) ** 2, axis=1)
    return float(np.exp(-nearest_sq / (2.0 * sigma ** 2)).mean())


def dance_beats(positions: np.ndarray, fps: float = 30.0) -> BeatTimes:
    """Kinematic beats: local minima of the smoothed mean joint speed."""
    k = positions.shape[0]
    if k < 5:
        raise InsufficientDataError("dance beats need at least 5 frames")
    speed = np.linalg.norm(np.diff(positions, axis=0), axis=-1).mean(axis=1)
    smooth = moving_average(speed, 5)
    minima = _peak_runs(-smooth, -np.inf, tol=_plateau_tol(smooth))
    frames = sorted(idx for idx, _ in minima)
    # speed sample i spans frames [i, i+1]; report the midpoint
    return BeatTimes(np.asarray([(i + 0.5) / fps for i in frames]))


@dataclass
class EvalReport:
    fid_hand: float
    fid_body: float
    div_body: float
    div_hand: float
    pfc: float
    bas: float

    CSV_COLUMNS = ("fid_hand", "fid_body", "div_body", "div_hand", "pfc", "bas")

    def csv_header(self) -> str:
        return ",".join(self.CSV_COLUMNS)

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, c)) for c in self.CSV_COLUMNS)

    def text_report(self) -> str:
        lines = ["metric        value", "-" * 26]
        for c in self.CSV_COLUMNS:
            lines.append(f"{c:<12}  {getattr(self, c):.6f}")
        return "\n".join(lines) + "\n"
