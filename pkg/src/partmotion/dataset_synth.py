"""Procedural paired (motion, annotation) generator.

Each sample is tiled by 1-4 action windows. A window instantiates a
composition template: a set of atomic motions, each driving the joints of
one or more body parts, possibly over a sub-interval of the window. Part
tracks carry the atomic labels, the action track the template labels and
the sequence label a sentence joining the template fragments. Neighbouring
segments are cross-faded in 6D rotation space over ``CROSSFADE`` frames.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .annotation_schema import (
    UNKNOWN, HierarchicalAnnotation, PartId, TimedLabel, fill_unknown_gaps,
    read_annotations, write_annotations,
)
from .motion_repr import (
    MotionSequence, Skeleton, axis_rotation, default_skeleton, forward_kinematics,
    heading, rot6d_decode, rot6d_encode,
)

LIBRARY_VERSION = "toy-1"
CROSSFADE = 5
ROOT_HEIGHT = 0.95
MIN_WINDOW = 24
MIN_SEGMENT = 16

P = PartId


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _ramp(u, rise=0.4):
    return _smoothstep(u / rise)


@dataclass(frozen=True)
class Clip:
    """Frames of one segment, evaluated on an extended index range."""

    frames: np.ndarray  # frame offsets from the segment start (may be < 0 or >= length)
    length: int
    fps: float

    @property
    def u(self):
        return self.frames / max(self.length, 1)

    @property
    def t(self):
        return self.frames / self.fps


# A generator returns {"rot": {joint: (F,3,3)}, "vel": (F,2), "yaw_rate": (F,), "dz": (F,)}
Generator = Callable[[Clip, dict, PartId], dict]


@dataclass(frozen=True)
class AtomicMotionDef:
    name: str
    parts: tuple
    generator: Generator
    amplitude: tuple = (1.0, 1.0)
    frequency: tuple = (1.0, 1.0)
    phrasings: tuple = ()
    tags: frozenset = frozenset()

    @property
    def labels(self) -> tuple:
        return (self.name,) + tuple(p for p in self.phrasings if p != self.name)

    def sample_params(self, rng: np.random.Generator) -> dict:
        return {"amp": rng.uniform(*self.amplitude), "freq": rng.uniform(*self.frequency),
                "phase": rng.uniform(0, 2 * np.pi)}


# --------------------------------------------------------------------------- generators


def _raise_arm(side):
    sign = 1.0 if side == "left" else -1.0

    def gen(clip, prm, part):
        ang = sign * prm["amp"] * _ramp(clip.u)
        return {"rot": {f"{side}_shoulder": axis_rotation("x", ang)}}
    return gen


def _wave_arm(side):
    sign = 1.0 if side == "left" else -1.0

    def gen(clip, prm, part):
        env = _ramp(clip.u, 0.3)
        osc = 0.7 + 0.5 * np.sin(2 * np.pi * prm["freq"] * clip.t)
        return {"rot": {f"{side}_shoulder": axis_rotation("x", sign * prm["amp"] * env),
                        f"{side}_elbow": axis_rotation("x", sign * osc * env)}}
    return gen


def _step(clip, prm, part):
    env = _ramp(clip.u, 0.15)
    phase = prm["phase"] + (0.0 if part is P.LEFT_LEG else np.pi)
    swing = prm["amp"] * np.sin(2 * np.pi * prm["freq"] * clip.t + phase) * env
    bend = 0.6 * prm["amp"] * (1 - np.cos(2 * np.pi * prm["freq"] * clip.t + phase)) * env
    side = "left" if part is P.LEFT_LEG else "right"
    return {"rot": {f"{side}_hip": axis_rotation("y", swing), f"{side}_knee": axis_rotation("y", bend)}}


def _bend_spine(clip, prm, part):
    return {"rot": {"spine": axis_rotation("y", prm["amp"] * _ramp(clip.u))}}


def _nod(clip, prm, part):
    env = _ramp(clip.u, 0.2)
    return {"rot": {"head": axis_rotation("y", prm["amp"] * np.sin(2 * np.pi * prm["freq"] * clip.t) * env)}}


def _turn(clip, prm, part):
    seconds = clip.length / clip.fps
    rate = np.full(clip.frames.shape, prm["amp"] / seconds)
    return {"yaw_rate": rate}


def _advance(clip, prm, part):
    vel = np.zeros((len(clip.frames), 2))
    vel[:, 0] = prm["amp"]
    return {"vel": vel}


def _crouch(clip, prm, part):
    env = _ramp(clip.u)
    if part is P.SPINE:
        return {"rot": {"spine": axis_rotation("y", 0.35 * env)}}
    side = "left" if part is P.LEFT_LEG else "right"
    out = {"rot": {f"{side}_hip": axis_rotation("y", -prm["amp"] * env),
                   f"{side}_knee": axis_rotation("y", 2 * prm["amp"] * env)}}
    if part is P.LEFT_LEG:
        out["dz"] = -0.3 * env
    return out


def default_library() -> dict[str, AtomicMotionDef]:
    arm = frozenset({"arm"})
    defs = [
        AtomicMotionDef("raise left arm", (P.LEFT_ARM,), _raise_arm("left"), (2.2, 2.8),
                        phrasings=("lift left arm", "left arm goes up", "raise the left arm up"), tags=arm),
        AtomicMotionDef("raise right arm", (P.RIGHT_ARM,), _raise_arm("right"), (2.2, 2.8),
                        phrasings=("lift right arm", "right arm goes up", "raise the right arm up"), tags=arm),
        AtomicMotionDef("wave left arm", (P.LEFT_ARM,), _wave_arm("left"), (1.8, 2.3), (1.5, 2.5),
                        phrasings=("wave with left hand", "left hand waves", "wave the left arm"), tags=arm),
        AtomicMotionDef("wave right arm", (P.RIGHT_ARM,), _wave_arm("right"), (1.8, 2.3), (1.5, 2.5),
                        phrasings=("wave with right hand", "right hand waves", "wave the right arm"), tags=arm),
        AtomicMotionDef("step", (P.LEFT_LEG, P.RIGHT_LEG), _step, (0.3, 0.5), (0.8, 1.2),
                        phrasings=("take steps", "legs step", "stepping")),
        AtomicMotionDef("bend spine", (P.SPINE,), _bend_spine, (0.6, 1.0),
                        phrasings=("lean forward", "bend the torso", "spine bends forward"),
                        tags=frozenset({"torso"})),
        AtomicMotionDef("nod head", (P.HEAD,), _nod, (0.25, 0.4), (1.0, 2.0),
                        phrasings=("nod", "head nods", "nod the head"), tags=frozenset({"head"})),
        AtomicMotionDef("turn left", (P.TRAJECTORY,), _turn, (math.pi / 2, math.pi),
                        phrasings=("turn to the left", "rotate left", "turn around to the left")),
        AtomicMotionDef("move forward", (P.TRAJECTORY,), _advance, (0.8, 1.4),
                        phrasings=("go forward", "advance", "travel forward")),
        AtomicMotionDef("crouch", (P.LEFT_LEG, P.RIGHT_LEG, P.SPINE), _crouch, (0.9, 1.3),
                        phrasings=("squat down", "bend knees", "crouch down low")),
    ]
    return {d.name: d for d in defs}


@dataclass(frozen=True)
class Placement:
    atomic: str
    full: float = 1.0  # probability of covering the whole window


@dataclass(frozen=True)
class CompositionTemplate:
    name: str
    placements: tuple
    fragment: str
    phrasings: tuple = ()

    @property
    def labels(self) -> tuple:
        return (self.name,) + tuple(p for p in self.phrasings if p != self.name)

    def parts_used(self, library) -> set:
        return {p for pl in self.placements for p in library[pl.atomic].parts}


def default_templates() -> list[CompositionTemplate]:
    T = CompositionTemplate
    return [
        T("walk", (Placement("step"), Placement("move forward")), "walks forward",
          ("walk forward", "stroll")),
        T("turn around", (Placement("step"), Placement("turn left")), "turns around to the left",
          ("turn left", "turn to the left")),
        T("wave", (Placement("wave right arm", 0.3),), "waves the right hand", ("wave hand", "wave hello")),
        T("raise left arm", (Placement("raise left arm", 0.5),), "raises the left arm",
          ("lift left arm", "left arm up")),
        T("raise both arms", (Placement("raise left arm", 0.6), Placement("raise right arm", 0.6)),
          "raises both arms", ("lift both arms", "arms up")),
        T("crouch", (Placement("crouch"),), "crouches down", ("crouch down", "squat")),
        T("nod", (Placement("nod head", 0.3),), "nods", ("nod head", "nod yes")),
        T("bend over", (Placement("bend spine"),), "bends over", ("bend forward", "lean over")),
        T("walk and wave", (Placement("step"), Placement("move forward"), Placement("wave left arm", 0.3)),
          "walks while waving the left hand", ("wave while walking", "walk while waving")),
        T("stand", (), "stands still", ("stand still", "idle")),
    ]


def validate_templates(templates: Sequence[CompositionTemplate], library: dict) -> None:
    for tpl in templates:
        for pl in tpl.placements:
            if pl.atomic not in library:
                raise ValueError(f"template {tpl.name!r} references unknown atomic {pl.atomic!r}")


def label_vocabulary(templates=None, library=None) -> list[str]:
    """Every part and action label the generator can emit, sorted."""
    templates = templates or default_templates()
    library = library or default_library()
    labels = {l for d in library.values() for l in d.labels}
    labels |= {l for t in templates for l in t.labels}
    return sorted(labels)


# --------------------------------------------------------------------------- synthesis


@dataclass
class _Segment:
    start: int
    end: int
    atomic: AtomicMotionDef | None
    params: dict = field(default_factory=dict)
    label: object = UNKNOWN


def _window_bounds(T: int, rng) -> list[int]:
    n = int(rng.integers(1, min(4, T // MIN_WINDOW) + 1))
    slack = T - n * MIN_WINDOW
    cuts = np.sort(rng.integers(0, slack + 1, size=n - 1))
    bounds = [0] + [int(c) + MIN_WINDOW * (i + 1) for i, c in enumerate(cuts)] + [T]
    return bounds


def _place(w0: int, w1: int, full_prob: float, rng) -> tuple[int, int]:
    W = w1 - w0
    if rng.random() < full_prob or W <= MIN_SEGMENT:
        return w0, w1
    dur = int(rng.integers(max(MIN_SEGMENT, int(0.4 * W)), W + 1))
    start = w0 + int(rng.integers(0, W - dur + 1))
    return start, start + dur


def _weights(segs: Sequence[_Segment], T: int) -> np.ndarray:
    """Trapezoid weights per segment; they sum to one on every frame."""
    i = np.arange(T) + 0.5
    h = CROSSFADE / 2
    out = np.zeros((len(segs), T))
    for k, s in enumerate(segs):
        up = np.ones(T) if s.start == 0 else np.clip((i - (s.start - h)) / CROSSFADE, 0, 1)
        down = np.ones(T) if s.end == T else np.clip(((s.end + h) - i) / CROSSFADE, 0, 1)
        out[k] = np.minimum(up, down)
    return out / out.sum(axis=0, keepdims=True)


def _render(skel: Skeleton, tracks: dict, T: int, fps: float, rng, noise: float) -> MotionSequence:
    J = skel.num_joints
    rot6 = np.tile(rot6d_encode(np.eye(3)), (T, J, 1))
    vel = np.zeros((T, 2))
    yaw_rate = np.zeros(T)
    dz = np.zeros(T)
    for part, segs in tracks.items():
        joints = [skel.joints[j] for j in skel.joints_of(part)]
        weights = _weights(segs, T)
        acc6 = np.zeros((T, len(joints), 6))
        for seg, w in zip(segs, weights):
            idx = np.nonzero(w)[0]
            if seg.atomic is None:
                acc6 += w[:, None, None] * rot6d_encode(np.eye(3))
                continue
            clip = Clip((idx - seg.start).astype(np.float64), seg.end - seg.start, fps)
            out = seg.atomic.generator(clip, seg.params, part)
            for a, name in enumerate(joints):
                r = out.get("rot", {}).get(name)
                r6 = rot6d_encode(np.eye(3)) if r is None else rot6d_encode(r)
                acc6[idx, a] += w[idx, None] * r6
            if "vel" in out:
                vel[idx] += w[idx, None] * out["vel"]
            if "yaw_rate" in out:
                yaw_rate[idx] += w[idx] * out["yaw_rate"]
            if "dz" in out:
                dz[idx] += w[idx] * out["dz"]
        for a, j in enumerate(skel.joints_of(part)):
            rot6[:, j] = acc6[:, a]
    local = rot6d_decode(rot6)
    if noise > 0:
        jitter = np.cumsum(rng.normal(0, noise / 4, (T, J, 3)), axis=0)
        jitter = np.clip(jitter, -noise, noise)
        from scipy.spatial.transform import Rotation
        local = Rotation.from_rotvec(jitter.reshape(-1, 3)).as_matrix().reshape(T, J, 3, 3) @ local
    yaw0 = rng.uniform(-np.pi, np.pi)
    yaw = yaw0 + np.concatenate([[0.0], np.cumsum(yaw_rate[:-1]) / fps])
    world_vel = np.stack([np.cos(yaw) * vel[:, 0] - np.sin(yaw) * vel[:, 1],
                          np.sin(yaw) * vel[:, 0] + np.cos(yaw) * vel[:, 1]], axis=1)
    root = np.zeros((T, 3))
    root[0, :2] = rng.uniform(-1, 1, 2)
    root[1:, :2] = root[0, :2] + np.cumsum(world_vel[:-1], axis=0) / fps
    root[:, 2] = ROOT_HEIGHT + dz
    local[:, 0] = axis_rotation("z", yaw) @ local[:, 0]
    return MotionSequence(fps, root, local)


def _fill_idle(part_segs: dict, T: int) -> dict:
    tracks = {}
    for part in PartId:
        segs = sorted(part_segs.get(part, []), key=lambda s: s.start)
        filled, cursor = [], 0
        for seg in segs:
            if seg.start > cursor:
                filled.append(_Segment(cursor, seg.start, None))
            filled.append(seg)
            cursor = seg.end
        if cursor < T:
            filled.append(_Segment(cursor, T, None))
        tracks[part] = filled
    return tracks


def render_atomics(
    placements: Sequence[tuple[str, int, int]],
    num_frames: int,
    fps: float = 20.0,
    rng: np.random.Generator | None = None,
    skeleton: Skeleton | None = None,
    library: dict | None = None,
    noise: float = 0.02,
    action: str | None = None,
) -> tuple[MotionSequence, HierarchicalAnnotation]:
    """Render explicit ``(atomic name, start, end)`` placements; other parts idle."""
    library = library or default_library()
    rng = rng if rng is not None else np.random.default_rng()
    part_segs: dict[PartId, list[_Segment]] = {}
    for name, start, end in placements:
        atomic = library[name]
        params = atomic.sample_params(rng)
        for part in atomic.parts:
            part_segs.setdefault(part, []).append(_Segment(start, end, atomic, params, atomic.name))
    tracks = _fill_idle(part_segs, num_frames)
    ann = fill_unknown_gaps(
        num_frames, fps,
        actions=[TimedLabel(action, 0, num_frames)] if action else (),
        parts={p: [TimedLabel(s.label, s.start, s.end) for s in segs if s.atomic is not None]
               for p, segs in tracks.items()},
    )
    motion = _render(skeleton or default_skeleton(), tracks, num_frames, fps, rng, noise)
    motion.annotation = ann
    return motion, ann


def synthesize_sample(
    templates: Sequence[CompositionTemplate] | None = None,
    library: dict | None = None,
    frame_range: tuple[int, int] = (100, 140),
    fps: float = 20.0,
    rng: np.random.Generator | None = None,
    skeleton: Skeleton | None = None,
    extra_prob: float = 0.25,
    noise: float = 0.02,
    id: str = "",
) -> tuple[MotionSequence, HierarchicalAnnotation]:
    templates = templates or default_templates()
    library = library or default_library()
    rng = rng if rng is not None else np.random.default_rng()
    skel = skeleton or default_skeleton()
    if not library:
        raise ValueError("atomic library is empty")
    validate_templates(templates, library)

    T = int(rng.integers(frame_range[0], frame_range[1] + 1))
    bounds = _window_bounds(T, rng)
    actions, fragments = [], []
    part_segs: dict[PartId, list[_Segment]] = {p: [] for p in PartId}
    extras = [d for d in library.values() if P.TRAJECTORY not in d.parts and len(d.parts) == 1]

    for w0, w1 in zip(bounds[:-1], bounds[1:]):
        tpl = templates[int(rng.integers(len(templates)))]
        actions.append(TimedLabel(tpl.labels[int(rng.integers(len(tpl.labels)))], w0, w1))
        fragments.append(tpl.fragment)
        used = set()
        chosen = [(library[pl.atomic], pl.full) for pl in tpl.placements]
        for part in PartId:
            if part in tpl.parts_used(library) or rng.random() >= extra_prob:
                continue
            options = [d for d in extras if d.parts == (part,)]
            if options:
                chosen.append((options[int(rng.integers(len(options)))], 0.5))
        for atomic, full_prob in chosen:
            if used & set(atomic.parts):
                continue
            used |= set(atomic.parts)
            s, e = _place(w0, w1, full_prob, rng)
            params = atomic.sample_params(rng)
            label = atomic.labels[int(rng.integers(len(atomic.labels)))]
            for part in atomic.parts:
                part_segs[part].append(_Segment(s, e, atomic, params, label))

    tracks = _fill_idle(part_segs, T)
    sentence = "a person " + ", then ".join(fragments)
    ann = fill_unknown_gaps(
        T, fps,
        sequence=[TimedLabel(sentence, 0, T)],
        actions=actions,
        parts={p: [TimedLabel(s.label, s.start, s.end) for s in segs if s.atomic is not None]
               for p, segs in tracks.items()},
        id=id,
    )
    motion = _render(skel, tracks, T, fps, rng, noise)
    motion.annotation = ann
    return motion, ann


def synthesize_dataset(n: int, seed: int, **kwargs) -> list[tuple[MotionSequence, HierarchicalAnnotation]]:
    """``n`` samples; sample ``i`` draws from its own substream ``(seed, i)``."""
    return [synthesize_sample(rng=np.random.default_rng([seed, i]), id=f"synth_{i:05d}", **kwargs)
            for i in range(n)]


def sparsify_labels(ann: HierarchicalAnnotation, q: float, rng: np.random.Generator) -> HierarchicalAnnotation:
    """Replace each labeled part segment by ``UNKNOWN`` with probability ``q``."""
    if not 0 <= q < 1:
        raise ValueError("drop rate must lie in [0, 1)")
    parts = {}
    for part in PartId:
        track = []
        for seg in ann.parts[part]:
            if seg.known and rng.random() < q:
                seg = TimedLabel(UNKNOWN, seg.start, seg.end)
            track.append(seg)
        parts[part] = tuple(track)
    return ann.replace(parts=parts)


def build_dataset_splits(ids: Sequence[str], rng: np.random.Generator,
                         ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> dict[str, list[str]]:
    if len(ids) < 10:
        raise ValueError("need at least 10 samples to split")
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    return {"train": sorted(order[:n_train]), "val": sorted(order[n_train:n_train + n_val]),
            "test": sorted(order[n_train + n_val:])}


# --------------------------------------------------------------------------- probes


def elbow_height_gain(motion: MotionSequence, skel: Skeleton, side: str = "left") -> float:
    """Mean elbow height over the final quarter minus the first quarter."""
    z = forward_kinematics(skel, motion.root_pos, motion.rotations)[:, skel.index(f"{side}_elbow"), 2]
    q = max(1, len(z) // 4)
    return float(z[-q:].mean() - z[:q].mean())


# Minimum signature size of a labeled segment; the idle pose scores ~0 on each.
DETECTION_THRESHOLDS = {
    "raise left arm": 0.2, "raise right arm": 0.2, "wave left arm": 0.2, "wave right arm": 0.2,
    "step": 0.15, "crouch": 0.06, "bend spine": 0.06, "nod head": 0.15,
    "turn left": 0.5, "move forward": 0.3,
}


def atomic_for_label(label: str, library: dict | None = None) -> AtomicMotionDef:
    library = library or default_library()
    for d in library.values():
        if label in d.labels:
            return d
    raise KeyError(label)


def segment_signal(motion: MotionSequence, skel: Skeleton, atomic: str, part: PartId,
                   start: int, end: int) -> float:
    """Size of the atomic's kinematic signature on ``[start, end)``; 0 for the idle pose."""
    pos, glob = forward_kinematics(skel, motion.root_pos, motion.rotations, return_global=True)
    pos, glob = pos[start:end], glob[start:end]
    root = motion.root_pos[start:end]
    if atomic.startswith(("raise", "wave")):
        side = "left" if "left" in atomic else "right"
        rel = pos[:, skel.index(f"{side}_elbow"), 2] - pos[:, skel.index(f"{side}_shoulder"), 2]
        return float(rel.max() + skel.offsets[skel.index(f"{side}_elbow")][2] * -1)
    yaw = heading(motion.rotations[start:end, 0])
    fwd = np.stack([np.cos(yaw), np.sin(yaw)], axis=1)
    if atomic == "step" or (atomic == "crouch" and part is not P.SPINE):
        side = "left" if part is P.LEFT_LEG else "right"
        knee = pos[:, skel.index(f"{side}_knee"), :2] - root[:, :2]
        along = np.sum(knee * fwd, axis=1)
        if atomic == "crouch":
            return float(ROOT_HEIGHT - root[:, 2].min())
        return float(along.max() - along.min())
    if atomic in ("bend spine", "crouch"):
        head = pos[:, skel.index("head"), :2] - root[:, :2]
        return float(np.sum(head * fwd, axis=1).max())
    if atomic == "nod head":
        rel = np.einsum("tba,tbc->tac", glob[:, skel.index("spine")], glob[:, skel.index("head")])
        angle = np.arccos(np.clip((np.trace(rel, axis1=1, axis2=2) - 1) / 2, -1, 1))
        return float(angle.max())
    if atomic == "turn left":
        return float(abs(np.unwrap(yaw)[-1] - np.unwrap(yaw)[0]))
    if atomic == "move forward":
        return float(np.linalg.norm(root[-1, :2] - root[0, :2]))
    raise KeyError(atomic)


# --------------------------------------------------------------------------- files


def save_dataset(directory: str | Path, samples: Iterable, skeleton: Skeleton, seed: int,
                 splits: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    write_annotations(directory / "annotations.jsonl", [a for _, a in samples])
    arrays = {}
    for motion, ann in samples:
        T, J = motion.rotations.shape[:2]
        arrays[f"{ann.id}/root_pos"] = motion.root_pos.astype("<f4")
        arrays[f"{ann.id}/joint_rot_6d"] = rot6d_encode(motion.rotations).reshape(T, J, 6).astype("<f4")
        arrays[f"{ann.id}/fps"] = np.array(motion.fps)
    np.savez(directory / "motions.npz", **arrays)
    (directory / "skeleton.json").write_text(json.dumps(skeleton.to_dict(), indent=1))
    manifest = {"ids": [a.id for _, a in samples], "seed": seed, "library_version": LIBRARY_VERSION,
                "splits": splits or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(directory: str | Path) -> tuple[list, Skeleton, dict]:
    directory = Path(directory)
    anns = read_annotations(directory / "annotations.jsonl")
    skel = Skeleton.from_dict(json.loads((directory / "skeleton.json").read_text()))
    manifest = json.loads((directory / "manifest.json").read_text())
    samples = []
    with np.load(directory / "motions.npz") as data:
        for ann in anns:
            m = MotionSequence(float(data[f"{ann.id}/fps"]), data[f"{ann.id}/root_pos"].astype(np.float64),
                               rot6d_decode(data[f"{ann.id}/joint_rot_6d"]), annotation=ann)
            samples.append((m, ann))
    return samples, skel, manifest
