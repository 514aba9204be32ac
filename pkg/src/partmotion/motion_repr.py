"""Kinematic skeleton, 6D rotations and the per-frame pose feature encoding.

Coordinates are Z-up. A body faces along its root's local +X axis, so the
heading (yaw) is the angle of that axis projected onto the ground plane.

Feature layout of one frame (``d = 4 + 9J``)::

    [ root height | root xy velocity (2) | yaw rate | 6D rotations (6J) | joints (3J) ]

Velocities are forward differences scaled by fps and expressed in the body
frame of the current frame; the last frame repeats the previous velocity.
The first 6D block is the root orientation with its heading removed, the
remaining blocks are joint rotations local to their parent. Joint positions
are given relative to the root's ground projection, heading removed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .annotation_schema import PartId
from .errors import RepresentationError

EPS_6D = 1e-8
EPS_HEADING = 1e-6
STD_FLOOR = 1e-4


# --------------------------------------------------------------------------- rotations


def rot6d_encode(rot: np.ndarray) -> np.ndarray:
    """First two columns of each rotation matrix, column-major: ``(..., 6)``."""
    rot = np.asarray(rot, dtype=np.float64)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def rot6d_decode(vec: np.ndarray) -> np.ndarray:
    """Gram-Schmidt reconstruction of rotation matrices from 6D vectors."""
    vec = np.asarray(vec, dtype=np.float64)
    a, b = vec[..., :3], vec[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < EPS_6D):
        raise RepresentationError("DEGENERATE_6D", "first column has (near) zero norm")
    x = a / na
    b = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb < EPS_6D):
        raise RepresentationError("DEGENERATE_6D", "second column is parallel to the first")
    y = b / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def axis_rotation(axis: str, angle) -> np.ndarray:
    """Rotation matrices about a coordinate axis, broadcast over ``angle``."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    o, z = np.ones_like(angle), np.zeros_like(angle)
    if axis == "x":
        rows = [[o, z, z], [z, c, -s], [z, s, c]]
    elif axis == "y":
        rows = [[c, z, s], [z, o, z], [-s, z, c]]
    elif axis == "z":
        rows = [[c, -s, z], [s, c, z], [z, z, o]]
    else:
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def wrap_angle(angle):
    """Map angles into ``(-pi, pi]``."""
    angle = np.asarray(angle, dtype=np.float64)
    return angle - 2 * np.pi * np.ceil((angle - np.pi) / (2 * np.pi))


# --------------------------------------------------------------------------- skeleton


@dataclass(frozen=True)
class Skeleton:
    name: str
    joints: tuple
    parents: tuple
    offsets: np.ndarray
    part_of: tuple

    def __post_init__(self):
        J = len(self.parents)
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64).reshape(J, 3))
        object.__setattr__(self, "part_of", tuple(PartId.from_key(p) if isinstance(p, str) else PartId(p)
                                                  for p in self.part_of))
        if not self.joints:
            object.__setattr__(self, "joints", tuple(f"joint{i}" for i in range(J)))
        if len(self.joints) != J or len(self.part_of) != J:
            raise RepresentationError("BAD_SKELETON", "joints, parents, offsets, part_of lengths differ")
        if self.parents[0] != -1 or any(p == -1 for p in self.parents[1:]):
            raise RepresentationError("BAD_SKELETON", "joint 0 must be the single root")
        if any(not 0 <= p < i for i, p in enumerate(self.parents) if i):
            raise RepresentationError("BAD_SKELETON", "parents must precede children")
        covered = set(self.part_of[1:])
        missing = [p.key for p in PartId if p is not PartId.TRAJECTORY and p not in covered]
        if missing:
            raise RepresentationError("BAD_SKELETON", f"no joints for parts {missing}")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def feature_dim(self) -> int:
        return 4 + 9 * self.num_joints

    def index(self, joint: str) -> int:
        return self.joints.index(joint)

    def joints_of(self, part: PartId) -> list[int]:
        return [i for i, p in enumerate(self.part_of) if p is part and i > 0]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joints": list(self.joints),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "part_of": [p.key for p in self.part_of],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Skeleton":
        return cls(obj["name"], tuple(obj.get("joints", ())), tuple(obj["parents"]),
                   np.asarray(obj["offsets"]), tuple(obj["part_of"]))


def load_skeleton(path: str | Path) -> Skeleton:
    return Skeleton.from_dict(json.loads(Path(path).read_text()))


def default_skeleton() -> Skeleton:
    text = resources.files("partmotion").joinpath("resources/toy_skeleton.json").read_text()
    return Skeleton.from_dict(json.loads(text))


def forward_kinematics(skel: Skeleton, root_pos: np.ndarray, rotations: np.ndarray,
                       return_global: bool = False):
    """World joint positions ``(..., J, 3)`` from root translation and local rotations.

    ``rotations[..., 0]`` is the root's world orientation; every other entry is
    relative to its parent.
    """
    root_pos = np.asarray(root_pos, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    J = skel.num_joints
    glob = [None] * J
    pos = [None] * J
    glob[0] = rotations[..., 0, :, :]
    pos[0] = root_pos
    for j in range(1, J):
        p = skel.parents[j]
        pos[j] = pos[p] + glob[p] @ skel.offsets[j]
        glob[j] = glob[p] @ rotations[..., j, :, :]
    positions = np.stack(pos, axis=-2)
    if return_global:
        return positions, np.stack(glob, axis=-3)
    return positions


# --------------------------------------------------------------------------- motion


@dataclass
class MotionSequence:
    """Raw motion: root translation and per-joint rotations for T frames."""

    fps: float
    root_pos: np.ndarray  # (T, 3)
    rotations: np.ndarray  # (T, J, 3, 3); index 0 is the world root orientation
    annotation: Any = None
    feature_joints: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        T = self.root_pos.shape[0]
        if T < 2:
            raise RepresentationError("TOO_SHORT", "a motion needs at least 2 frames")
        if self.rotations.shape[0] != T or self.rotations.shape[-2:] != (3, 3):
            raise RepresentationError("SHAPE_MISMATCH", "rotations must be (T, J, 3, 3)")
        err = np.abs(self.rotations @ np.swapaxes(self.rotations, -1, -2) - np.eye(3)).max()
        if err > 1e-6:
            raise RepresentationError("NOT_ORTHONORMAL", f"rotation error {err:.2e}")

    @property
    def num_frames(self) -> int:
        return self.root_pos.shape[0]

    @property
    def root_yaw(self) -> np.ndarray:
        return heading(self.rotations[:, 0])

    def joint_positions(self, skel: Skeleton) -> np.ndarray:
        return forward_kinematics(skel, self.root_pos, self.rotations)


def heading(root_rot: np.ndarray) -> np.ndarray:
    """Yaw of the body's forward (+X) axis projected onto the ground plane."""
    fwd = np.asarray(root_rot)[..., :, 0]
    norm = np.hypot(fwd[..., 0], fwd[..., 1])
    if np.any(norm < EPS_HEADING):
        raise RepresentationError("SINGULAR_HEADING", "forward axis is vertical; yaw undefined")
    return np.arctan2(fwd[..., 1], fwd[..., 0])


@dataclass(frozen=True)
class CanonicalFrame:
    yaw: float
    residual: np.ndarray  # (3, 3) root orientation with heading removed
    joints: np.ndarray  # (J, 3) body-local joint positions


def _canonicalize(skel: Skeleton, root_pos: np.ndarray, rotations: np.ndarray):
    yaw = heading(rotations[..., 0, :, :])
    unyaw = axis_rotation("z", -yaw)
    residual = unyaw @ rotations[..., 0, :, :]
    joints = forward_kinematics(skel, root_pos, rotations)
    shift = np.asarray(root_pos, dtype=np.float64).copy()
    shift[..., 2] = 0.0
    local = np.einsum("...ab,...jb->...ja", unyaw, joints - shift[..., None, :])
    return yaw, residual, local


def canonicalize_frame(skel: Skeleton, root_pos: np.ndarray, rotations: np.ndarray) -> CanonicalFrame:
    """Remove heading and ground-plane translation from one frame."""
    yaw, residual, local = _canonicalize(skel, root_pos, rotations)
    return CanonicalFrame(float(yaw), residual, local)


# --------------------------------------------------------------------------- features


@dataclass(frozen=True)
class FeatureLayout:
    num_joints: int

    @property
    def dim(self) -> int:
        return 4 + 9 * self.num_joints

    @property
    def root_height(self) -> slice:
        return slice(0, 1)

    @property
    def root_velocity(self) -> slice:
        return slice(1, 3)

    @property
    def yaw_rate(self) -> slice:
        return slice(3, 4)

    @property
    def rotations(self) -> slice:
        return slice(4, 4 + 6 * self.num_joints)

    @property
    def joints(self) -> slice:
        return slice(4 + 6 * self.num_joints, self.dim)


@dataclass
class PoseFeatureMatrix:
    values: np.ndarray  # (T, d)
    fps: float

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def layout(self) -> FeatureLayout:
        d = self.values.shape[1]
        if (d - 4) % 9:
            raise RepresentationError("BAD_LAYOUT", f"feature width {d} is not 4 + 9J")
        return FeatureLayout((d - 4) // 9)


def encode_features(motion: MotionSequence, skel: Skeleton) -> PoseFeatureMatrix:
    T, J = motion.num_frames, skel.num_joints
    if motion.rotations.shape[1] != J:
        raise RepresentationError("SHAPE_MISMATCH", f"motion has {motion.rotations.shape[1]} joints, skeleton {J}")
    yaw, residual, local = _canonicalize(skel, motion.root_pos, motion.rotations)
    fps = motion.fps

    vel_world = np.zeros((T, 3))
    vel_world[:-1, :2] = np.diff(motion.root_pos[:, :2], axis=0) * fps
    vel_world[-1] = vel_world[-2]
    vel_body = np.einsum("tab,tb->ta", axis_rotation("z", -yaw), vel_world)[:, :2]

    yaw_rate = np.zeros(T)
    yaw_rate[:-1] = wrap_angle(np.diff(yaw)) * fps
    yaw_rate[-1] = yaw_rate[-2]

    rots = motion.rotations.copy()
    rots[:, 0] = residual
    out = np.concatenate([
        motion.root_pos[:, 2:3],
        vel_body,
        yaw_rate[:, None],
        rot6d_encode(rots).reshape(T, 6 * J),
        local.reshape(T, 3 * J),
    ], axis=1)
    return PoseFeatureMatrix(out, fps)


def decode_features(feat: PoseFeatureMatrix, skel: Skeleton, initial_xy=(0.0, 0.0),
                    initial_yaw: float = 0.0) -> MotionSequence:
    """Integrate velocities and rebuild rotations; inverse of :func:`encode_features`.

    The decoded motion also carries ``feature_joints``: the joint positions
    stored in the features, mapped back to world coordinates.
    """
    x = np.asarray(feat.values, dtype=np.float64)
    lay = feat.layout
    if lay.num_joints != skel.num_joints:
        raise RepresentationError("SHAPE_MISMATCH", "feature width does not match the skeleton")
    T, J, fps = x.shape[0], lay.num_joints, feat.fps

    yaw = np.empty(T)
    yaw[0] = initial_yaw
    yaw[1:] = initial_yaw + np.cumsum(x[:-1, 3]) / fps
    to_world = axis_rotation("z", yaw)
    vel_body = np.zeros((T, 3))
    vel_body[:, :2] = x[:, lay.root_velocity]
    step = np.einsum("tab,tb->ta", to_world, vel_body) / fps
    root = np.zeros((T, 3))
    root[0, :2] = initial_xy
    root[1:, :2] = np.asarray(initial_xy) + np.cumsum(step[:-1, :2], axis=0)
    root[:, 2] = x[:, 0]

    rots = rot6d_decode(x[:, lay.rotations].reshape(T, J, 6))
    rots[:, 0] = to_world @ rots[:, 0]
    joints = np.einsum("tab,tjb->tja", to_world, x[:, lay.joints].reshape(T, J, 3))
    joints[..., :2] += root[:, None, :2]
    return MotionSequence(fps, root, rots, feature_joints=joints)


# --------------------------------------------------------------------------- normalization


@dataclass
class FeatureNormalizer:
    mean: np.ndarray
    std: np.ndarray
    floor: float = STD_FLOOR

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "floor": self.floor}

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureNormalizer":
        return cls(np.asarray(obj["mean"]), np.asarray(obj["std"]), obj["floor"])


def fit_normalizer(corpus: Sequence, floor: float = STD_FLOOR) -> FeatureNormalizer:
    """Column-wise mean / population std over every frame of the corpus."""
    mats = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in corpus]
    stacked = np.concatenate(mats, axis=0)
    if stacked.shape[0] < 2:
        raise RepresentationError("INSUFFICIENT_FRAMES", "need at least two frames")
    return FeatureNormalizer(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), floor), floor)


# --------------------------------------------------------------------------- files


def motion_to_dict(motion: MotionSequence, skeleton_name: str = "") -> dict:
    T, J = motion.rotations.shape[:2]
    out = {
        "fps": motion.fps,
        "skeleton": skeleton_name,
        "num_frames": T,
        "root_pos": np.round(motion.root_pos, 9).tolist(),
        "joint_rot_6d": np.round(rot6d_encode(motion.rotations), 9).reshape(T, J, 6).tolist(),
    }
    if motion.annotation is not None:
        from .annotation_schema import annotation_to_dict
        out["annotation"] = annotation_to_dict(motion.annotation)
    return out


def motion_from_dict(obj: dict) -> MotionSequence:
    ann = None
    if obj.get("annotation") is not None:
        from .annotation_schema import annotation_from_dict
        ann = annotation_from_dict(obj["annotation"])
    return MotionSequence(float(obj["fps"]), np.asarray(obj["root_pos"]),
                          rot6d_decode(np.asarray(obj["joint_rot_6d"])), annotation=ann)


def save_motion(path: str | Path, motion: MotionSequence, skeleton_name: str = "") -> None:
    Path(path).write_text(json.dumps(motion_to_dict(motion, skeleton_name)))


def load_motion(path: str | Path) -> MotionSequence:
    return motion_from_dict(json.loads(Path(path).read_text()))
