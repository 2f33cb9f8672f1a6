"""BVH export for external motion viewers.

Hierarchy comes from the skeleton definition; channels are root position plus
intrinsic Z-Y-X Euler angles per joint, in degrees, at the motion's frame
rate.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .motion import MotionSequence, SkeletonDef, rot6d_to_matrix


def _write_joint(lines: list[str], skel: SkeletonDef, j: int, depth: int) -> None:
    pad = "  " * depth
    off = skel.offsets[j]
    if j == 0:
        lines.append(f"{pad}ROOT {skel.names[j]}")
    else:
        lines.append(f"{pad}JOINT {skel.names[j]}")
    lines.append(f"{pad}{{")
    inner = "  " * (depth + 1)
    lines.append(f"{inner}OFFSET {off[0]:.6f} {off[1]:.6f} {off[2]:.6f}")
    if j == 0:
        lines.append(f"{inner}CHANNELS 6 Xposition Yposition Zposition "
                     "Zrotation Yrotation Xrotation")
    else:
        lines.append(f"{inner}CHANNELS 3 Zrotation Yrotation Xrotation")
    kids = skel.children(j)
    if not kids:
        lines.append(f"{inner}End Site")
        lines.append(f"{inner}{{")
        lines.append(f"{inner}  OFFSET 0.000000 0.000000 0.000000")
        lines.append(f"{inner}}}")
    for c in kids:
        _write_joint(lines, skel, c, depth + 1)
    lines.append(f"{pad}}}")


def export_bvh(path, motion: MotionSequence, skel: SkeletonDef) -> None:
    lines: list[str] = ["HIERARCHY"]
    _write_joint(lines, skel, 0, 0)
    k = len(motion)
    lines.append("MOTION")
    lines.append(f"Frames: {k}")
    lines.append(f"Frame Time: {1.0 / motion.fps:.7f}")

    # BVH lists joints depth-first; build that ordering once
    order: list[int] = []

    def visit(j: int) -> None:
        order.append(j)
        for c in skel.children(j):
            visit(c)

    visit(0)

    mats = rot6d_to_matrix(motion.rotations_6d)  # (k, 52, 3, 3)
    eulers = np.empty((k, len(order), 3))
    for col, j in enumerate(order):
        rot = Rotation.from_matrix(mats[:, j])
        eulers[:, col] = rot.as_euler("ZYX", degrees=True)
    root = motion.root_translation
    for i in range(k):
        vals = [f"{v:.6f}" for v in root[i]]
        for col in range(len(order)):
            vals.extend(f"{v:.6f}" for v in eulers[i, col])
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")
