"""Pose records, skater tracking, the BIEO codec, air time and augmentation.

Joint order is the 17-keypoint COCO convention::

    0 nose, 1 left_eye, 2 right_eye, 3 left_ear, 4 right_ear,
    5 left_shoulder, 6 right_shoulder, 7 left_elbow, 8 right_elbow,
    9 left_wrist, 10 right_wrist, 11 left_hip, 12 right_hip,
    13 left_knee, 14 right_knee, 15 left_ankle, 16 right_ankle

Tags are integers ``O=0, B=1, I=2, E=3``. A flight ``(start, end)`` puts B on
the take-off frame, I on every frame strictly between, and E on the landing
frame, so a legal flight has at least one I frame (``end >= start + 2``) and
consecutive flights are separated by at least one O frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

NUM_JOINTS = 17
JOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
L_SHOULDER, R_SHOULDER, L_HIP, R_HIP = 5, 6, 11, 12
L_ANKLE, R_ANKLE = 15, 16

O, B, I, E = 0, 1, 2, 3
LABELS = "OBIE"
MIN_CONTEXT = 30


class PoseFormatError(ValueError):
    """Pose-estimator output violates the input schema."""


class TrackingError(RuntimeError):
    pass


class SpanError(ValueError):
    """Flight spans overlap, touch, or are shorter than B,I,E."""


class DegeneratePoseError(ValueError):
    pass


# ----------------------------------------------------------------------- types


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise PoseFormatError(f"non-finite keypoint ({self.x}, {self.y})")
        if not 0.0 <= self.score <= 1.0:
            raise PoseFormatError(f"keypoint score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class PoseCandidate:
    keypoints: tuple[Keypoint, ...]
    confidence: float

    def __post_init__(self):
        if len(self.keypoints) != NUM_JOINTS:
            raise PoseFormatError(f"expected {NUM_JOINTS} keypoints, got {len(self.keypoints)}")

    def coords(self) -> np.ndarray:
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=np.float64)


@dataclass(frozen=True)
class PoseSequence:
    """Tracked skater coordinates, shape ``(T, 17, 2)``.

    ``held`` marks frames that had no detection and repeat the previous pose.
    """

    frames: np.ndarray
    fps: float
    video_id: str = ""
    held: tuple[bool, ...] | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != (NUM_JOINTS, 2) or len(frames) < 1:
            raise PoseFormatError(f"pose sequence must be (T>=1, 17, 2), got {frames.shape}")
        if not self.fps > 0:
            raise PoseFormatError(f"fps must be positive, got {self.fps}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True, order=True)
class FlightSpan:
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start + 2:
            raise SpanError(f"flight ({self.start}, {self.end}) needs 0 <= start and end >= start + 2")

    @property
    def in_air_frames(self) -> int:
        return self.end - self.start - 1


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    category: str
    pose: PoseSequence
    flights: tuple[FlightSpan, ...] = field(default_factory=tuple)

    def __post_init__(self):
        flights = tuple(self.flights)
        object.__setattr__(self, "flights", flights)
        check_spans(flights, len(self.pose))

    @property
    def fps(self) -> float:
        return self.pose.fps

    def __len__(self) -> int:
        return len(self.pose)

    def tags(self) -> np.ndarray:
        return intervals_to_tags(self.flights, len(self.pose))


# ------------------------------------------------------------------- ingestion


def parse_pose_output(stream) -> list[list[PoseCandidate]]:
    """Parse multi-person pose-estimator JSON into per-frame candidate lists.

    ``stream`` may be a path, a JSON string, a file object, or already-decoded
    data. Schema: a list of frames, each a list of
    ``{"keypoints": [[x, y, score] * 17], "score": float}``.
    """
    if isinstance(stream, Path):
        stream = stream.read_text()
    if isinstance(stream, (str, bytes)):
        try:
            data = json.loads(stream)
        except json.JSONDecodeError as exc:
            raise PoseFormatError(f"malformed pose JSON: {exc}") from exc
    elif hasattr(stream, "read"):
        return parse_pose_output(stream.read())
    else:
        data = stream
    if not isinstance(data, list):
        raise PoseFormatError("pose JSON top level must be a list of frames")

    frames = []
    for i, frame in enumerate(data):
        if not isinstance(frame, list):
            raise PoseFormatError(f"frame {i}: expected a list of candidates")
        candidates = []
        for j, cand in enumerate(frame):
            try:
                kps = cand["keypoints"]
                if len(kps) != NUM_JOINTS:
                    raise PoseFormatError(f"frame {i}, candidate {j}: {len(kps)} keypoints, expected {NUM_JOINTS}")
                keypoints = tuple(Keypoint(float(x), float(y), float(s)) for x, y, s in kps)
                candidates.append(PoseCandidate(keypoints, float(cand["score"])))
            except PoseFormatError as exc:
                if str(exc).startswith("frame "):
                    raise
                raise PoseFormatError(f"frame {i}, candidate {j}: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise PoseFormatError(f"frame {i}, candidate {j}: malformed candidate ({exc!r})") from exc
        frames.append(candidates)
    return frames


def pose_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two flattened 17x2 poses."""
    return float(np.sqrt(np.sum((a - b) ** 2)))


def track_skater(candidates: Sequence[Sequence[PoseCandidate]], fps: float = 30.0, video_id: str = "") -> PoseSequence:
    """Follow one person: most confident in frame 0, then nearest to the previous pick."""
    if not candidates or not candidates[0]:
        raise TrackingError(f"{video_id or 'video'}: first frame has no pose candidates")
    first = max(candidates[0], key=lambda c: c.confidence)
    current = first.coords()
    frames = [current]
    held = [False]
    for frame in candidates[1:]:
        if frame:
            coords = [c.coords() for c in frame]
            current = min(coords, key=lambda xy: pose_distance(xy, current))
            held.append(False)
        else:
            held.append(True)
        frames.append(current)
    return PoseSequence(np.stack(frames), fps, video_id, tuple(held))


# ----------------------------------------------------------------------- codec


def check_spans(flights: Sequence[FlightSpan], T: int) -> None:
    prev_end = None
    for f in flights:
        if f.end >= T:
            raise SpanError(f"flight ({f.start}, {f.end}) exceeds sequence length {T}")
        if prev_end is not None and f.start <= prev_end + 1:
            raise SpanError(f"flight ({f.start}, {f.end}) overlaps or touches the previous one ending at {prev_end}")
        prev_end = f.end


def intervals_to_tags(flights: Iterable[FlightSpan | tuple[int, int]], T: int) -> np.ndarray:
    flights = [f if isinstance(f, FlightSpan) else FlightSpan(*f) for f in flights]
    check_spans(flights, T)
    tags = np.zeros(T, dtype=np.int64)
    for f in flights:
        tags[f.start] = B
        tags[f.start + 1 : f.end] = I
        tags[f.end] = E
    return tags


def tag_runs(tags: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal runs of non-O tags as inclusive ``(first, last)`` index pairs."""
    tags = np.asarray(tags)
    nz = np.concatenate([[False], tags != O, [False]])
    edges = np.flatnonzero(np.diff(nz.astype(np.int8)))
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def tags_to_intervals(tags: Sequence[int]) -> list[FlightSpan]:
    """Each maximal non-O run becomes a span, whatever its internal labels.

    Runs shorter than three frames cannot form a legal :class:`FlightSpan`
    and are returned as bare ``(start, end)`` tuples instead.
    """
    out = []
    for a, b in tag_runs(tags):
        out.append(FlightSpan(a, b) if b >= a + 2 else ShortSpan(a, b))
    return out


@dataclass(frozen=True, order=True)
class ShortSpan:
    """A predicted run too short for the grammar; only used for scoring."""

    start: int
    end: int

    @property
    def in_air_frames(self) -> int:
        return max(self.end - self.start - 1, 0)


def is_valid_tags(tags: Sequence[int]) -> bool:
    """True if ``tags`` follows O->B->I->E->O, starting in {O,B} and ending in {O,E}."""
    allowed = {(O, O), (O, B), (B, I), (I, I), (I, E), (E, O)}
    tags = [int(t) for t in tags]
    if not tags:
        return True
    if tags[0] not in (O, B) or tags[-1] not in (O, E):
        return False
    return all((a, b) in allowed for a, b in zip(tags, tags[1:]))


def air_time(tags: Sequence[int], fps: float) -> list[float]:
    """Seconds in the air for every flight: I-label count over fps."""
    if not fps > 0:
        raise ValueError(f"fps must be positive, got {fps}")
    tags = np.asarray(tags)
    return [int(np.sum(tags[a : b + 1] == I)) / fps for a, b in tag_runs(tags)]


def tags_to_string(tags: Sequence[int]) -> str:
    return "".join(LABELS[int(t)] for t in tags)


def tags_from_string(s: str) -> np.ndarray:
    return np.array([LABELS.index(c) for c in s], dtype=np.int64)


# --------------------------------------------------------------- normalization


def normalize_pose(seq: PoseSequence) -> PoseSequence:
    """Center every frame on its hip midpoint and divide by the median torso length."""
    x = seq.frames
    hip = 0.5 * (x[:, L_HIP] + x[:, R_HIP])
    shoulder = 0.5 * (x[:, L_SHOULDER] + x[:, R_SHOULDER])
    torso = np.linalg.norm(shoulder - hip, axis=-1)
    torso = torso[torso > 0]
    if torso.size == 0:
        raise DegeneratePoseError(f"{seq.video_id or 'video'}: zero torso length in every frame")
    scale = float(np.median(torso))
    return PoseSequence((x - hip[:, None, :]) / scale, seq.fps, seq.video_id, seq.held)


# ---------------------------------------------------------------- augmentation


def trim_offsets(available: int, stride: int) -> list[int]:
    """Trim amounts ``0, stride, ...`` that keep at least MIN_CONTEXT frames."""
    limit = available - MIN_CONTEXT
    return list(range(0, limit + 1, stride)) if limit > 0 else [0]


def trim(record: VideoRecord, left: int, right: int) -> VideoRecord:
    T = len(record)
    pose = record.pose
    held = pose.held[left : T - right] if pose.held is not None else None
    new_pose = PoseSequence(pose.frames[left : T - right], pose.fps, pose.video_id, held)
    flights = tuple(FlightSpan(f.start - left, f.end - left) for f in record.flights)
    vid = f"{record.video_id}#l{left}r{right}" if (left or right) else record.video_id
    return VideoRecord(vid, record.category, new_pose, flights)


def augment(record: VideoRecord, stride: int = 5) -> list[VideoRecord]:
    """Every left/right trim combination that leaves 30 frames of context around the flights."""
    if not record.flights:
        raise SpanError(f"{record.video_id}: augmentation needs at least one flight")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    T = len(record)
    lefts = trim_offsets(record.flights[0].start, stride)
    rights = trim_offsets(T - 1 - record.flights[-1].end, stride)
    return [trim(record, l, r) for l in lefts for r in rights]


# --------------------------------------------------------------- dataset files


def record_to_json(record: VideoRecord) -> dict:
    return {
        "video_id": record.video_id,
        "category": record.category,
        "fps": record.fps,
        "frames": record.pose.frames.tolist(),
        "flights": [{"start": f.start, "end": f.end} for f in record.flights],
    }


def record_from_json(obj: dict) -> VideoRecord:
    if "fps" not in obj:
        raise PoseFormatError(f"record {obj.get('video_id', '?')}: missing fps metadata")
    pose = PoseSequence(np.array(obj["frames"], dtype=np.float64), float(obj["fps"]), str(obj["video_id"]))
    flights = tuple(FlightSpan(int(f["start"]), int(f["end"])) for f in obj.get("flights", []))
    return VideoRecord(str(obj["video_id"]), str(obj.get("category", "")), pose, flights)


def write_jsonl(records: Iterable[VideoRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), separators=(",", ":")))
            fh.write("\n")


def iter_jsonl(path) -> Iterator[VideoRecord]:
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield record_from_json(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise PoseFormatError(f"{path}:{n}: {exc}") from exc


def read_jsonl(path) -> list[VideoRecord]:
    return list(iter_jsonl(path))


def split_records(records: Sequence[VideoRecord], seed: int, train_fraction: float = 0.8):
    """Seeded shuffle, then a train/validation cut."""
    from .numerics import make_rng

    order = make_rng(seed, 7).permutation(len(records))
    cut = int(round(train_fraction * len(records)))
    return [records[i] for i in order[:cut]], [records[i] for i in order[cut:]]


def dataset_stats(records: Sequence[VideoRecord]) -> dict[str, dict[str, float]]:
    """Per-category video count, multi-jump count and mean length, plus ``all``."""
    groups: dict[str, list[VideoRecord]] = {}
    for r in records:
        groups.setdefault(r.category, []).append(r)
    groups = dict(sorted(groups.items()))
    groups["all"] = list(records)
    out = {}
    for name, rs in groups.items():
        out[name] = {
            "videos": len(rs),
            "multi_jump": sum(len(r.flights) >= 2 for r in rs),
            "avg_frames": float(np.mean([len(r) for r in rs])) if rs else 0.0,
        }
    return out
