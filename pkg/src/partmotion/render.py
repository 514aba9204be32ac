"""Stick-figure rendering of motion sequences with matplotlib (Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .annotation_schema import PartId
from .motion_repr import MotionSequence, Skeleton

PART_COLORS = {
    PartId.HEAD: "tab:purple", PartId.SPINE: "tab:gray", PartId.LEFT_ARM: "tab:red",
    PartId.RIGHT_ARM: "tab:blue", PartId.LEFT_LEG: "tab:orange", PartId.RIGHT_LEG: "tab:cyan",
    PartId.TRAJECTORY: "black",
}


def _frame_labels(motion: MotionSequence, t: int) -> str:
    ann = motion.annotation
    if ann is None:
        return ""
    lines = [f"seq: {ann.sequence_label}"]
    for seg in ann.actions:
        if seg.start <= t < seg.end:
            lines.append(f"action: {seg.label}")
    return "\n".join(lines)


def render_frames(motions: Sequence[MotionSequence], skeleton: Skeleton, out_dir: str | Path,
                  every: int = 1, gif: bool = False) -> list[Path]:
    """Draw each motion in its own panel; returns the written PNG paths.

    Shorter motions hold their last pose. With ``gif`` an animated ``motion.gif``
    is written next to the frames.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pos = [m.joint_positions(skeleton) for m in motions]
    allp = np.concatenate(pos)
    lo, hi = allp.min((0, 1)), allp.max((0, 1))
    span = float((hi - lo).max()) / 2 + 0.1
    mid = (hi + lo) / 2
    T = max(p.shape[0] for p in pos)

    fig = plt.figure(figsize=(4 * len(motions), 4))
    axes = [fig.add_subplot(1, len(motions), i + 1, projection="3d") for i in range(len(motions))]
    paths = []
    for t in range(0, T, max(1, every)):
        for ax, p, m in zip(axes, pos, motions):
            ax.cla()
            frame = p[min(t, p.shape[0] - 1)]
            for j, par in enumerate(skeleton.parents):
                if par < 0:
                    continue
                c = PART_COLORS[skeleton.part_of[j]]
                ax.plot(*zip(frame[par], frame[j]), color=c, lw=2)
            ax.set_xlim(mid[0] - span, mid[0] + span)
            ax.set_ylim(mid[1] - span, mid[1] + span)
            ax.set_zlim(mid[2] - span, mid[2] + span)
            ax.set_title(_frame_labels(m, t), fontsize=7)
        fig.suptitle(f"frame {t}", fontsize=8)
        path = out_dir / f"frame_{t:04d}.png"
        fig.savefig(path, dpi=80)
        paths.append(path)
    plt.close(fig)
    if gif and paths:
        from matplotlib import image as mpimg
        from matplotlib.animation import ArtistAnimation, PillowWriter

        fig = plt.figure()
        ax = fig.add_axes([0, 0, 1, 1])
        ax.axis("off")
        frames = [[ax.imshow(mpimg.imread(p), animated=True)] for p in paths]
        fps = motions[0].fps / max(1, every)
        ArtistAnimation(fig, frames, interval=1000 / fps).save(out_dir / "motion.gif", writer=PillowWriter(fps=fps))
        plt.close(fig)
    return paths
