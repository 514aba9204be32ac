"""Three-level, temporally aligned motion annotations.

An annotation holds one sequence-level label, a contiguous track of action
windows and one contiguous track per body part. Every segment is a half-open
frame interval ``[start, end)``; labels may be the ``UNKNOWN`` sentinel.
"""

from __future__ import annotations

import enum
import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import AnnotationError

UNKNOWN_TOKEN = "unknown"


class _Unknown:
    """Singleton marking a segment whose text label is not available."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNKNOWN"

    def __reduce__(self):
        return (_Unknown, ())

    def __bool__(self) -> bool:
        return False


UNKNOWN = _Unknown()
Label = Union[str, _Unknown]


def is_unknown(label: object) -> bool:
    return label is UNKNOWN


def normalize_label(label: Label) -> Label:
    """Strip whitespace and map the reserved token (any case) to ``UNKNOWN``."""
    if label is UNKNOWN:
        return UNKNOWN
    if not isinstance(label, str):
        raise AnnotationError("SCHEMA_VIOLATION", f"label must be a string, got {label!r}")
    text = label.strip()
    if text.lower() == UNKNOWN_TOKEN:
        return UNKNOWN
    return text


class PartId(enum.IntEnum):
    HEAD = 0
    LEFT_ARM = 1
    RIGHT_ARM = 2
    SPINE = 3
    LEFT_LEG = 4
    RIGHT_LEG = 5
    TRAJECTORY = 6

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "PartId":
        try:
            return cls[key.strip().upper()]
        except KeyError:
            raise AnnotationError("SCHEMA_VIOLATION", f"unknown body part {key!r}") from None


NUM_PARTS = len(PartId)


@dataclass(frozen=True)
class TimedLabel:
    label: Label
    start: int
    end: int

    @property
    def duration(self) -> int:
        return self.end - self.start

    @property
    def known(self) -> bool:
        return self.label is not UNKNOWN


Track = tuple  # tuple[TimedLabel, ...]


class Rule(str, enum.Enum):
    OVERLAP = "OVERLAP"
    GAP = "GAP"
    OUT_OF_RANGE = "OUT_OF_RANGE"
    EMPTY_LABEL = "EMPTY_LABEL"
    BAD_SEQUENCE_SPAN = "BAD_SEQUENCE_SPAN"


@dataclass(frozen=True)
class Violation:
    track: str
    index: int
    rule: Rule
    message: str = ""

    def to_dict(self) -> dict:
        return {"track": self.track, "index": self.index, "rule": self.rule.value, "message": self.message}


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def rules(self) -> set:
        return {v.rule for v in self.violations}


@dataclass(frozen=True)
class HierarchicalAnnotation:
    num_frames: int
    fps: float
    sequence: Track
    actions: Track
    parts: Mapping[PartId, Track] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sequence", tuple(self.sequence))
        object.__setattr__(self, "actions", tuple(self.actions))
        parts = {PartId(k): tuple(v) for k, v in dict(self.parts).items()}
        object.__setattr__(self, "parts", {p: parts.get(p, ()) for p in PartId})

    @property
    def duration_seconds(self) -> float:
        return self.num_frames / self.fps

    @property
    def sequence_label(self) -> Label:
        return self.sequence[0].label if self.sequence else UNKNOWN

    def tiling_tracks(self) -> Iterator[tuple[str, Track]]:
        """The action track followed by the part tracks in ``PartId`` order."""
        yield "actions", self.actions
        for part in PartId:
            yield part.key, self.parts[part]

    def replace(self, **changes) -> "HierarchicalAnnotation":
        fields_ = dict(num_frames=self.num_frames, fps=self.fps, sequence=self.sequence,
                       actions=self.actions, parts=self.parts, id=self.id)
        fields_.update(changes)
        return HierarchicalAnnotation(**fields_)


# --------------------------------------------------------------------------- validation


def _check_labels(name: str, track: Sequence[TimedLabel]) -> list[Violation]:
    out = []
    for i, seg in enumerate(track):
        if seg.label is UNKNOWN:
            continue
        if not isinstance(seg.label, str) or not seg.label.strip():
            out.append(Violation(name, i, Rule.EMPTY_LABEL, "label is empty"))
    return out


def _check_tiling(name: str, track: Sequence[TimedLabel], num_frames: int) -> list[Violation]:
    out = _check_labels(name, track)
    if not track:
        return out + [Violation(name, 0, Rule.GAP, f"track is empty; must cover [0, {num_frames})")]
    for i, seg in enumerate(track):
        if seg.start < 0 or seg.end > num_frames or seg.start >= seg.end:
            out.append(Violation(name, i, Rule.OUT_OF_RANGE,
                                 f"[{seg.start}, {seg.end}) not a non-empty interval inside [0, {num_frames}]"))
        if i == 0:
            if seg.start > 0:
                out.append(Violation(name, 0, Rule.GAP, f"track starts at {seg.start}, not 0"))
            continue
        prev_end = track[i - 1].end
        if seg.start < prev_end:
            out.append(Violation(name, i, Rule.OVERLAP, f"starts at {seg.start} before previous end {prev_end}"))
        elif seg.start > prev_end:
            out.append(Violation(name, i, Rule.GAP, f"starts at {seg.start} after previous end {prev_end}"))
    last = track[-1]
    if last.end < num_frames:
        out.append(Violation(name, len(track) - 1, Rule.GAP, f"track ends at {last.end}, before {num_frames}"))
    return out


def validate_annotation(ann: HierarchicalAnnotation) -> ValidationResult:
    """Check every structural invariant; violations are returned, never raised."""
    T = ann.num_frames
    out: list[Violation] = []
    if len(ann.sequence) != 1:
        out.append(Violation("sequence", min(1, len(ann.sequence)), Rule.BAD_SEQUENCE_SPAN,
                             f"expected exactly one sequence segment, got {len(ann.sequence)}"))
    else:
        seg = ann.sequence[0]
        if seg.start != 0 or seg.end != T:
            out.append(Violation("sequence", 0, Rule.BAD_SEQUENCE_SPAN,
                                 f"sequence spans [{seg.start}, {seg.end}), expected [0, {T})"))
    out += _check_labels("sequence", ann.sequence)
    for name, track in ann.tiling_tracks():
        out += _check_tiling(name, track, T)
    return ValidationResult(tuple(out))


def require_valid(ann: HierarchicalAnnotation) -> None:
    result = validate_annotation(ann)
    if not result.ok:
        first = result.violations[0]
        raise AnnotationError(first.rule.value, f"invalid annotation {ann.id!r}",
                              [v.to_dict() for v in result.violations])


# --------------------------------------------------------------------------- normalization


def fill_track(segments: Iterable[TimedLabel], num_frames: int, track: str = "track") -> tuple:
    """Tile ``[0, num_frames)`` by inserting ``UNKNOWN`` segments into the gaps."""
    segs = [TimedLabel(normalize_label(s.label), int(s.start), int(s.end)) for s in segments]
    out: list[TimedLabel] = []
    cursor = 0
    for i, seg in enumerate(segs):
        if seg.start < 0 or seg.end > num_frames or seg.start >= seg.end:
            raise AnnotationError("OUT_OF_RANGE", f"{track}[{i}] = [{seg.start}, {seg.end})",
                                  {"track": track, "index": i})
        if seg.start < cursor:
            raise AnnotationError("OVERLAP", f"{track}[{i - 1}] and {track}[{i}] overlap",
                                  {"track": track, "pair": [_seg_dict(segs[i - 1]), _seg_dict(seg)]})
        if seg.start > cursor:
            out.append(TimedLabel(UNKNOWN, cursor, seg.start))
        out.append(seg)
        cursor = seg.end
    if cursor < num_frames:
        out.append(TimedLabel(UNKNOWN, cursor, num_frames))
    return tuple(out)


def fill_unknown_gaps(
    num_frames: int,
    fps: float,
    sequence: Sequence[TimedLabel] = (),
    actions: Sequence[TimedLabel] = (),
    parts: Mapping[PartId, Sequence[TimedLabel]] | None = None,
    id: str = "",
) -> HierarchicalAnnotation:
    """Build a valid annotation from sorted, possibly sparse raw tracks.

    Missing tracks become a single ``UNKNOWN`` segment. Overlapping or
    out-of-range input raises :class:`AnnotationError`.
    """
    parts = parts or {}
    if not sequence:
        seq = (TimedLabel(UNKNOWN, 0, num_frames),)
    else:
        if len(sequence) != 1 or sequence[0].start != 0 or sequence[0].end != num_frames:
            raise AnnotationError("BAD_SEQUENCE_SPAN", "sequence must be one segment over [0, T)")
        seq = (TimedLabel(normalize_label(sequence[0].label), 0, num_frames),)
    ann = HierarchicalAnnotation(
        num_frames=num_frames,
        fps=fps,
        sequence=seq,
        actions=fill_track(actions, num_frames, "actions"),
        parts={p: fill_track(parts.get(p, ()), num_frames, p.key) for p in PartId},
        id=id,
    )
    return ann


def coalesce(track: Sequence[TimedLabel]) -> tuple:
    """Merge neighbouring segments that carry the same label."""
    out: list[TimedLabel] = []
    for seg in track:
        if out and out[-1].label == seg.label and out[-1].end == seg.start:
            out[-1] = TimedLabel(seg.label, out[-1].start, seg.end)
        else:
            out.append(seg)
    return tuple(out)


# --------------------------------------------------------------------------- rasterization


@dataclass(frozen=True)
class FrameGrid:
    """Per-frame labels, columns = parts in ``PartId`` order then the action."""

    labels: np.ndarray  # object array, (T, K + 1)
    sequence: Label

    @property
    def num_frames(self) -> int:
        return self.labels.shape[0]

    def column_segments(self, column: int) -> tuple:
        return runs_to_segments(self.labels[:, column])

    def to_tracks(self) -> tuple[tuple, dict]:
        """Run-length encode back to ``(actions, parts)``."""
        actions = self.column_segments(NUM_PARTS)
        parts = {p: self.column_segments(int(p)) for p in PartId}
        return actions, parts


def runs_to_segments(column: Sequence[Label]) -> tuple:
    out: list[TimedLabel] = []
    start = 0
    for i in range(1, len(column) + 1):
        if i == len(column) or column[i] != column[start]:
            out.append(TimedLabel(column[start], start, i))
            start = i
    return tuple(out)


def to_frame_grid(ann: HierarchicalAnnotation) -> FrameGrid:
    require_valid(ann)
    grid = np.empty((ann.num_frames, NUM_PARTS + 1), dtype=object)
    for col, (_, track) in zip([NUM_PARTS] + [int(p) for p in PartId], ann.tiling_tracks()):
        for seg in track:
            grid[seg.start:seg.end, col] = [seg.label] * seg.duration
    return FrameGrid(grid, ann.sequence_label)


# --------------------------------------------------------------------------- statistics


@dataclass(frozen=True)
class DatasetStats:
    num_sequences: int
    hours: float
    label_counts: dict
    unknown_counts: dict
    vocabulary: frozenset

    @property
    def vocabulary_size(self) -> int:
        return len(self.vocabulary)

    @property
    def total_labels(self) -> int:
        return sum(self.label_counts.values())

    def to_dict(self) -> dict:
        return {
            "num_sequences": self.num_sequences,
            "hours": self.hours,
            "label_counts": dict(self.label_counts),
            "unknown_counts": dict(self.unknown_counts),
            "total_labels": self.total_labels,
            "vocabulary_size": self.vocabulary_size,
        }

    def table(self) -> str:
        rows = [("sequences", str(self.num_sequences)), ("hours", f"{self.hours:.4f}")]
        for level in ("sequence", "action", "part"):
            rows.append((f"{level} labels", str(self.label_counts[level])))
            rows.append((f"{level} unknown", str(self.unknown_counts[level])))
        rows += [("total labels", str(self.total_labels)), ("vocabulary", str(self.vocabulary_size))]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(label: str) -> list[str]:
    return label.lower().translate(_PUNCT).split()


def dataset_stats(annotations: Iterable[HierarchicalAnnotation]) -> DatasetStats:
    labels = Counter()
    unknown = Counter({"sequence": 0, "action": 0, "part": 0})
    vocab: set[str] = set()
    n = 0
    frames_over_fps = 0.0
    for ann in annotations:
        n += 1
        frames_over_fps += ann.num_frames / ann.fps
        levels = [("sequence", ann.sequence), ("action", ann.actions)]
        levels += [("part", track) for track in (ann.parts[p] for p in PartId)]
        for level, track in levels:
            for seg in track:
                if seg.label is UNKNOWN:
                    unknown[level] += 1
                else:
                    labels[level] += 1
                    vocab.update(tokenize(seg.label))
    counts = {k: labels.get(k, 0) for k in ("sequence", "action", "part")}
    return DatasetStats(n, frames_over_fps / 3600.0, counts, dict(unknown), frozenset(vocab))


# --------------------------------------------------------------------------- serialization


def _seg_dict(seg: TimedLabel) -> dict:
    label = UNKNOWN_TOKEN if seg.label is UNKNOWN else seg.label
    return {"label": label, "start": seg.start, "end": seg.end}


def _parse_segment(obj, where: str) -> TimedLabel:
    if not isinstance(obj, dict) or set(obj) != {"label", "start", "end"}:
        raise AnnotationError("SCHEMA_VIOLATION", f"{where}: expected {{label, start, end}}", obj)
    start, end = obj["start"], obj["end"]
    for v in (start, end):
        if isinstance(v, bool) or not isinstance(v, int):
            raise AnnotationError("SCHEMA_VIOLATION", f"{where}: frame bounds must be integers", obj)
    return TimedLabel(normalize_label(obj["label"]), start, end)


def _parse_track(obj, where: str) -> tuple:
    if not isinstance(obj, list):
        raise AnnotationError("SCHEMA_VIOLATION", f"{where}: expected a list", obj)
    return tuple(_parse_segment(s, f"{where}[{i}]") for i, s in enumerate(obj))


def annotation_to_dict(ann: HierarchicalAnnotation) -> dict:
    return {
        "id": ann.id,
        "fps": ann.fps,
        "num_frames": ann.num_frames,
        "sequence": [_seg_dict(s) for s in ann.sequence],
        "actions": [_seg_dict(s) for s in ann.actions],
        "parts": {p.key: [_seg_dict(s) for s in ann.parts[p]] for p in PartId},
    }


def annotation_from_dict(obj: dict) -> HierarchicalAnnotation:
    if not isinstance(obj, dict):
        raise AnnotationError("SCHEMA_VIOLATION", "annotation must be a JSON object")
    missing = {"fps", "num_frames", "sequence", "actions", "parts"} - set(obj)
    if missing:
        raise AnnotationError("SCHEMA_VIOLATION", f"missing fields {sorted(missing)}")
    num_frames = obj["num_frames"]
    if isinstance(num_frames, bool) or not isinstance(num_frames, int) or num_frames <= 0:
        raise AnnotationError("SCHEMA_VIOLATION", "num_frames must be a positive integer")
    fps = obj["fps"]
    if isinstance(fps, bool) or not isinstance(fps, (int, float)) or fps <= 0:
        raise AnnotationError("SCHEMA_VIOLATION", "fps must be a positive number")
    if not isinstance(obj["parts"], dict):
        raise AnnotationError("SCHEMA_VIOLATION", "parts must be an object")
    parts = {PartId.from_key(k): _parse_track(v, f"parts.{k}") for k, v in obj["parts"].items()}
    return HierarchicalAnnotation(
        num_frames=num_frames,
        fps=float(fps),
        sequence=_parse_track(obj["sequence"], "sequence"),
        actions=_parse_track(obj["actions"], "actions"),
        parts=parts,
        id=str(obj.get("id", "")),
    )


def dumps(ann: HierarchicalAnnotation) -> str:
    return json.dumps(annotation_to_dict(ann), ensure_ascii=False)


def loads(text: str) -> HierarchicalAnnotation:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError("MALFORMED_JSON", str(exc)) from None
    return annotation_from_dict(obj)


def write_annotations(path: str | Path, annotations: Iterable[HierarchicalAnnotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(dumps(ann) + "\n")


def read_annotations(path: str | Path) -> list[HierarchicalAnnotation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(loads(line))
            except AnnotationError as exc:
                raise AnnotationError(exc.code, f"{path}:{lineno}: {exc.message}", exc.detail) from None
    return out
