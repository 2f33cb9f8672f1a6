"""Pose representation, 6D rotations, skeleton, and forward kinematics.

A pose frame is a 319-vector: 4 foot-contact values, 3 root translation
components (meters), then 52 joint rotations in the 6D representation.
The world is y-up.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_JOINTS = 52
POSE_DIM = 4 + 3 + N_JOINTS * 6  # 319
CONTACT_SLICE = slice(0, 4)
ROOT_SLICE = slice(4, 7)
ROT_SLICE = slice(7, POSE_DIM)
UP_AXIS = 1  # y

CONTACT_SPEED_THRESHOLD = 0.005  # m/frame
CONTACT_HEIGHT_THRESHOLD = 0.05  # m above per-sequence ground level


class MotionError(Exception):
    pass


class SingularRotationError(MotionError):
    pass


class SkeletonError(MotionError):
    pass


@dataclass
class MotionSequence:
    frames: np.ndarray  # (k, 319)
    fps: int = 30

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != POSE_DIM:
            raise MotionError(
                f"motion must be (k, {POSE_DIM}), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise MotionError("motion contains NaN/Inf")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def contact(self) -> np.ndarray:
        return self.frames[:, CONTACT_SLICE]

    @property
    def root_translation(self) -> np.ndarray:
        return self.frames[:, ROOT_SLICE]

    @property
    def rotations_6d(self) -> np.ndarray:
        return self.frames[:, ROT_SLICE].reshape(len(self.frames), N_JOINTS, 6)


@dataclass
class SkeletonDef:
    names: list[str]
    parents: np.ndarray       # (52,), parent index, root = -1
    offsets: np.ndarray       # (52, 3) bone offsets, meters
    foot_joints: np.ndarray   # (4,): L ankle, R ankle, L toe, R toe
    body_joints: np.ndarray
    hand_joints: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.foot_joints = np.asarray(self.foot_joints, dtype=np.int64)
        self.body_joints = np.asarray(sorted(self.body_joints), dtype=np.int64)
        self.hand_joints = np.asarray(sorted(self.hand_joints), dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        n = len(self.parents)
        if n != N_JOINTS:
            raise SkeletonError(f"expected {N_JOINTS} joints, got {n}")
        if len(self.names) != n or self.offsets.shape != (n, 3):
            raise SkeletonError("names/offsets do not match joint count")
        if self.parents[0] != -1:
            raise SkeletonError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise SkeletonError(
                    f"joint {j}: parent {self.parents[j]} must precede it "
                    "(topological order, single tree)")
        if len(self.foot_joints) != 4:
            raise SkeletonError("exactly 4 foot joints required")
        all_joints = set(range(n))
        body, hand = set(self.body_joints.tolist()), set(self.hand_joints.tolist())
        if body & hand or body | hand != all_joints:
            raise SkeletonError("body/hand sets must partition the joints")

    def children(self, j: int) -> list[int]:
        return [c for c in range(len(self.parents)) if self.parents[c] == j]


def load_skeleton(path) -> SkeletonDef:
    """Parse the text key-value skeleton config."""
    names: dict[int, str] = {}
    parents: dict[int, int] = {}
    offsets: dict[int, np.ndarray] = {}
    feet = body = hand = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        try:
            if key == "joint":
                idx = int(parts[1])
                names[idx] = parts[2]
                parents[idx] = int(parts[3])
                offsets[idx] = np.array([float(v) for v in parts[4:7]])
            elif key == "feet":
                feet = [int(v) for v in parts[1:]]
            elif key == "body":
                body = [int(v) for v in parts[1:]]
            elif key == "hand":
                hand = [int(v) for v in parts[1:]]
            else:
                raise SkeletonError(f"line {lineno}: unknown key {key!r}")
        except (ValueError, IndexError) as exc:
            raise SkeletonError(f"line {lineno}: {raw!r}: {exc}") from exc
    if sorted(names) != list(range(len(names))):
        raise SkeletonError("joint indices must be contiguous from 0")
    if feet is None or body is None or hand is None:
        raise SkeletonError("config must define feet, body, and hand sets")
    n = len(names)
    return SkeletonDef(
        names=[names[i] for i in range(n)],
        parents=np.array([parents[i] for i in range(n)]),
        offsets=np.stack([offsets[i] for i in range(n)]),
        foot_joints=np.array(feet),
        body_joints=np.array(body),
        hand_joints=np.array(hand),
    )


def default_skeleton() -> SkeletonDef:
    ref = resources.files("dgfm.data").joinpath("skeleton52.txt")
    with resources.as_file(ref) as path:
        return load_skeleton(path)


# -- 6D rotation representation ----------------------------------------------

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

_DEGENERACY_EPS = 1e-8


def _rot6d_forward(r: np.ndarray):
    """Gram-Schmidt; returns (R, cache) with R columns (a, b, c)."""
    r1, r2 = r[..., 0:3], r[..., 3:6]
    n1 = np.linalg.norm(r1, axis=-1, keepdims=True)
    if np.any(n1 <= _DEGENERACY_EPS):
        raise SingularRotationError(
            "first 6D triple has near-zero norm; rotation is undefined")
    a = r1 / n1
    s = (a * r2).sum(axis=-1, keepdims=True)
    u = r2 - s * a
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n2 <= _DEGENERACY_EPS):
        raise SingularRotationError(
            "second 6D triple is parallel to the first; rotation is undefined")
    b = u / n2
    c = np.cross(a, b)
    rot = np.stack([a, b, c], axis=-1)
    return rot, (a, b, c, s, n1, n2, r2)


def _rot6d_backward(g: np.ndarray, cache) -> np.ndarray:
    a, b, c, s, n1, n2, r2 = cache
    ga, gb, gc = g[..., 0], g[..., 1], g[..., 2]
    gb_total = gb + np.cross(gc, a)
    gu = (gb_total - b * (b * gb_total).sum(-1, keepdims=True)) / n2
    gr2 = gu - a * (a * gu).sum(-1, keepdims=True)
    ga_total = ga + np.cross(b, gc) \
        - (a * gu).sum(-1, keepdims=True) * r2 - s * gu
    gr1 = (ga_total - a * (a * ga_total).sum(-1, keepdims=True)) / n1
    return np.concatenate([gr1, gr2], axis=-1)


def rot6d_to_matrix(r) -> np.ndarray:
    """Decode 6D rotations (..., 6) into rotation matrices (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise MotionError(f"6D rotation input must end in 6, got {r.shape}")
    return _rot6d_forward(r)[0]


def rot6d_to_matrix_t(r: Tensor) -> Tensor:
    """Differentiable 6D decode."""
    out_data, cache = _rot6d_forward(r.data)

    def bw(g: np.ndarray) -> None:
        ad._accumulate(r, _rot6d_backward(g, cache))

    return ad._make_node("rot6d_to_matrix", out_data, (r,), bw)


def matrix_to_rot6d(rot: np.ndarray) -> np.ndarray:
    """First two columns, the inverse of rot6d_to_matrix on orthonormal input."""
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


# -- forward kinematics -------------------------------------------------------

def _fk_forward(frames: np.ndarray, skel: SkeletonDef):
    k = frames.shape[0]
    root = frames[:, ROOT_SLICE]
    rot6d = frames[:, ROT_SLICE].reshape(k, N_JOINTS, 6)
    local, cache = _rot6d_forward(rot6d)
    world_rot = np.empty((k, N_JOINTS, 3, 3))
    pos = np.empty((k, N_JOINTS, 3))
    world_rot[:, 0] = local[:, 0]
    pos[:, 0] = root
    for j in range(1, N_JOINTS):
        p = skel.parents[j]
        world_rot[:, j] = world_rot[:, p] @ local[:, j]
        pos[:, j] = pos[:, p] + (world_rot[:, p] @ skel.offsets[j])
    return pos, (local, cache, world_rot)


def _fk_backward(g_pos: np.ndarray, frames_shape, skel: SkeletonDef, saved):
    local, cache, world_rot = saved
    k = frames_shape[0]
    g_p = g_pos.copy()                       # (k, 52, 3)
    g_w = np.zeros((k, N_JOINTS, 3, 3))
    g_local = np.zeros_like(local)
    for j in range(N_JOINTS - 1, 0, -1):
        p = skel.parents[j]
        g_p[:, p] += g_p[:, j]
        g_w[:, p] += np.einsum("ki,j->kij", g_p[:, j], skel.offsets[j])
        g_w[:, p] += g_w[:, j] @ local[:, j].transpose(0, 2, 1)
        g_local[:, j] = world_rot[:, p].transpose(0, 2, 1) @ g_w[:, j]
    g_local[:, 0] = g_w[:, 0]
    g_rot6d = _rot6d_backward(g_local, cache)
    g_frames = np.zeros(frames_shape)
    g_frames[:, ROOT_SLICE] = g_p[:, 0]
    g_frames[:, ROT_SLICE] = g_rot6d.reshape(k, N_JOINTS * 6)
    return g_frames


def fk(motion, skel: SkeletonDef):
    """World-space joint positions (k, 52, 3) from pose frames (k, 319).

    Accepts a MotionSequence or plain array (returns an array) or a Tensor
    (returns a differentiable Tensor).
    """
    if isinstance(motion, Tensor):
        pos, saved = _fk_forward(motion.data, skel)

        def bw(g: np.ndarray) -> None:
            ad._accumulate(motion, _fk_backward(g, motion.shape, skel, saved))

        return ad._make_node("fk", pos, (motion,), bw)
    frames = motion.frames if isinstance(motion, MotionSequence) else np.asarray(motion)
    return _fk_forward(np.asarray(frames, dtype=np.float64), skel)[0]


def extract_contact_labels(positions: np.ndarray, skel: SkeletonDef,
                           speed_threshold: float = CONTACT_SPEED_THRESHOLD,
                           height_threshold: float = CONTACT_HEIGHT_THRESHOLD,
                           ) -> np.ndarray:
    """Binary (k, 4) contact labels for the configured foot joints.

    A foot is in contact when it moves slower than the speed threshold and
    sits within the height threshold of that joint's own ground level (5th
    percentile of its height over the sequence).  The last frame copies the
    one before it.
    """
    k = positions.shape[0]
    if k < 2:
        raise MotionError("contact labels need at least 2 frames")
    feet = positions[:, skel.foot_joints]            # (k, 4, 3)
    speed = np.linalg.norm(np.diff(feet, axis=0), axis=-1)  # (k-1, 4)
    height = feet[..., UP_AXIS]                      # (k, 4)
    ground = np.percentile(height, 5, axis=0)
    labels = np.zeros((k, 4))
    near = height[:-1] < ground + height_threshold
    labels[:-1] = ((speed < speed_threshold) & near).astype(np.float64)
    labels[-1] = labels[-2]
    return labels
