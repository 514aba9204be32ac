import numpy as np
import pytest

from partmotion.annotation_schema import UNKNOWN, PartId, validate_annotation
from partmotion.dataset_synth import (
    DETECTION_THRESHOLDS, atomic_for_label, render_atomics, build_dataset_splits, default_library,
    default_templates, elbow_height_gain, load_dataset, save_dataset, segment_signal,
    sparsify_labels, synthesize_dataset, synthesize_sample,
)


@pytest.fixture(scope="module")
def samples():
    return synthesize_dataset(200, seed=7)


def test_every_annotation_validates(samples):
    for motion, ann in samples:
        assert validate_annotation(ann).ok
        assert motion.num_frames == ann.num_frames and motion.annotation is ann
        assert 1 <= len(ann.actions) <= 4


def test_deterministic():
    a = synthesize_sample(rng=np.random.default_rng(3))
    b = synthesize_sample(rng=np.random.default_rng(3))
    assert a[1] == b[1]
    assert np.array_equal(a[0].root_pos, b[0].root_pos) and np.array_equal(a[0].rotations, b[0].rotations)


def test_leg_labels_follow_walk_and_crouch_windows(samples):
    walk_like = {l for t in default_templates() if t.name in ("walk", "turn around", "walk and wave")
                 for l in t.labels}
    crouch = set(next(t for t in default_templates() if t.name == "crouch").labels)
    step_labels = set(default_library()["step"].labels)
    crouch_labels = set(default_library()["crouch"].labels)
    seen = 0
    for _, ann in samples:
        for win in ann.actions:
            expected = step_labels if win.label in walk_like else crouch_labels if win.label in crouch else None
            if expected is None:
                continue
            seen += 1
            for part in (PartId.LEFT_LEG, PartId.RIGHT_LEG):
                inside = [s for s in ann.parts[part] if s.start == win.start and s.end == win.end]
                assert len(inside) == 1 and inside[0].label in expected
    assert seen > 20


def test_perfect_alignment(samples, skel):
    """Labeled segments exceed the detection threshold; idle segments never do."""
    checked = 0
    for motion, ann in samples[:80]:
        for part in PartId:
            for seg in ann.parts[part]:
                if seg.label is UNKNOWN:
                    continue
                atomic = atomic_for_label(seg.label).name
                assert segment_signal(motion, skel, atomic, part, seg.start, seg.end) > DETECTION_THRESHOLDS[atomic]
                checked += 1
    assert checked > 100
    # the idle pose stays below every threshold
    idle = synthesize_sample(templates=[t for t in default_templates() if t.name == "stand"],
                             extra_prob=0.0, rng=np.random.default_rng(0))[0]
    for atomic, part in [("raise left arm", PartId.LEFT_ARM), ("step", PartId.LEFT_LEG),
                         ("crouch", PartId.SPINE), ("nod head", PartId.HEAD),
                         ("turn left", PartId.TRAJECTORY), ("move forward", PartId.TRAJECTORY),
                         ("crouch", PartId.LEFT_LEG)]:
        assert segment_signal(idle, skel, atomic, part, 0, idle.num_frames) < DETECTION_THRESHOLDS[atomic]


def test_library_coverage():
    lib = default_library()
    seen = set()
    for _, ann in synthesize_dataset(200, seed=11):
        for part in PartId:
            seen |= {atomic_for_label(s.label, lib).name for s in ann.parts[part] if s.known}
    assert seen == set(lib)


def test_raise_left_arm_gain_on_ground_truth(skel):
    """Calibration of the generation check: clean clips clear 0.1 m by a wide margin."""
    gains = [elbow_height_gain(render_atomics([("raise left arm", 0, 120)], 120,
                                              rng=np.random.default_rng(s))[0], skel) for s in range(20)]
    assert min(gains) > 0.3
    idle = [elbow_height_gain(render_atomics([], 120, rng=np.random.default_rng(s))[0], skel)
            for s in range(20)]
    assert max(np.abs(idle)) < 0.05


def test_sparsify(samples):
    rng = np.random.default_rng(0)
    _, ann = samples[0]
    assert sparsify_labels(ann, 0.0, rng) == ann
    known = dropped = 0
    for _, ann in samples * 5:
        out = sparsify_labels(ann, 0.3, rng)
        assert validate_annotation(out).ok and out.actions == ann.actions and out.sequence == ann.sequence
        for p in PartId:
            for a, b in zip(ann.parts[p], out.parts[p]):
                if a.known:
                    known += 1
                    dropped += b.label is UNKNOWN
    assert known > 5000
    assert 0.28 <= dropped / known <= 0.32


def test_sparsify_twice_composes(samples):
    rng = np.random.default_rng(1)
    known = dropped = 0
    for _, ann in samples * 5:
        out = sparsify_labels(sparsify_labels(ann, 0.3, rng), 0.3, rng)
        for p in PartId:
            for a, b in zip(ann.parts[p], out.parts[p]):
                known += a.known
                dropped += a.known and b.label is UNKNOWN
    assert abs(dropped / known - 0.51) < 0.02


def test_splits():
    ids = [f"s{i}" for i in range(100)]
    s = build_dataset_splits(ids, np.random.default_rng(0))
    assert [len(s[k]) for k in ("train", "val", "test")] == [80, 10, 10]
    assert set(s["train"]) | set(s["val"]) | set(s["test"]) == set(ids)
    assert not (set(s["train"]) & set(s["val"])) and not (set(s["val"]) & set(s["test"]))
    assert s == build_dataset_splits(ids, np.random.default_rng(0))
    with pytest.raises(ValueError):
        build_dataset_splits(ids[:5], np.random.default_rng(0))


def test_dataset_files_roundtrip(tmp_path, samples, skel):
    save_dataset(tmp_path, samples[:5], skel, seed=7)
    loaded, skel2, manifest = load_dataset(tmp_path)
    assert manifest["ids"] == [a.id for _, a in samples[:5]] and skel2.name == skel.name
    for (m, a), (m2, a2) in zip(samples[:5], loaded):
        assert a == a2
        assert np.abs(m2.joint_positions(skel) - m.joint_positions(skel)).max() < 1e-5
