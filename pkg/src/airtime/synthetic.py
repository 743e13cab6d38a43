"""Synthetic skating clips with exact flight annotations.

A skater is a 17-joint skeleton posed in body coordinates (lateral, vertical,
depth), rotated about the vertical axis and projected orthographically into
image pixels. The skater glides horizontally; each flight lifts the whole
skeleton along a parabola that is zero on the take-off (B) and landing (E)
frames and peaks at ``jump_height`` mid-flight. Around each flight the
skeleton crouches before take-off and absorbs on landing; in the air the arms
pull in (tighter for faster rotation buckets), the legs cross and the body
spins ``bucket`` revolutions.

In a combination the second jump is taken straight out of the previous
landing: it is shorter and lower, and there is no separate wind-up crouch.

The category string is ``"j{n_flights}_r{bucket}"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FlightSpan, PoseSequence, VideoRecord
from .numerics import make_rng


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 200
    fps: float = 30.0
    flights_per_video: tuple[int, ...] = (1, 2, 3)
    flight_weights: tuple[float, ...] = (0.5, 0.3, 0.2)
    flight_frames: tuple[int, int] = (10, 18)  # inclusive B..E length
    rotation_buckets: tuple[int, ...] = (1, 2, 3)
    jump_height: tuple[float, float] = (0.25, 0.45)  # body heights
    lead_frames: tuple[int, int] = (15, 50)
    trail_frames: tuple[int, int] = (15, 50)
    combo_gap: tuple[int, int] = (3, 8)
    separate_gap: tuple[int, int] = (20, 40)
    combo_prob: float = 0.5
    combo_flight_frames: tuple[int, int] = (6, 10)  # follow-on jump of a combination
    combo_height_scale: float = 0.6
    # optional per-bucket B..E length range: more revolutions need more air time
    bucket_flight_frames: tuple[tuple[int, int], ...] | None = None
    max_frames: int = 200
    noise_px: float = 2.0
    cue_jitter: float = 2.0  # frames between true take-off/landing and the visible cues

    def validate(self) -> None:
        if self.n_videos <= 0 or self.fps <= 0:
            raise SynthConfigError("n_videos and fps must be positive")
        if not self.flights_per_video or min(self.flights_per_video) < 1:
            raise SynthConfigError("flights_per_video must list counts >= 1")
        if len(self.flight_weights) != len(self.flights_per_video) or min(self.flight_weights) < 0:
            raise SynthConfigError("flight_weights must be non-negative, one per flight count")
        ranges = [self.flight_frames, self.combo_flight_frames] + list(self.bucket_flight_frames or ())
        for a, b in ranges:
            if a < 3 or b < a:
                raise SynthConfigError(f"flight length range {a, b}: flights need >= 3 frames")
        if self.bucket_flight_frames is not None and len(self.bucket_flight_frames) != len(self.rotation_buckets):
            raise SynthConfigError("bucket_flight_frames needs one range per rotation bucket")
        if not 0 < self.combo_height_scale <= 1:
            raise SynthConfigError("combo_height_scale must be in (0, 1]")
        lo = min(r[0] for r in ranges)
        for name in ("lead_frames", "trail_frames", "combo_gap", "separate_gap"):
            a, b = getattr(self, name)
            if a < 0 or b < a:
                raise SynthConfigError(f"{name} range {a, b} is invalid")
        if self.combo_gap[0] < 1 or self.separate_gap[0] < 1:
            raise SynthConfigError("gaps between flights need at least one frame")
        worst = (
            self.lead_frames[0] + self.trail_frames[0]
            + max(self.flights_per_video) * lo
            + (max(self.flights_per_video) - 1) * min(self.combo_gap[0], self.separate_gap[0])
        )
        if worst > self.max_frames:
            raise SynthConfigError(
                f"flights do not fit: minimum clip length {worst} exceeds max_frames {self.max_frames}"
            )
        if self.noise_px < 0 or self.cue_jitter < 0:
            raise SynthConfigError("noise_px and cue_jitter must be >= 0")


# Standing skeleton in body units: (lateral, vertical up, depth toward camera).
_REST = np.array([
    [0.00, 0.62, 0.06],   # nose
    [0.03, 0.65, 0.05], [-0.03, 0.65, 0.05],   # eyes
    [0.07, 0.63, 0.00], [-0.07, 0.63, 0.00],   # ears
    [0.18, 0.45, 0.00], [-0.18, 0.45, 0.00],   # shoulders
    [0.22, 0.22, 0.00], [-0.22, 0.22, 0.00],   # elbows
    [0.24, 0.00, 0.02], [-0.24, 0.00, 0.02],   # wrists
    [0.10, 0.00, 0.00], [-0.10, 0.00, 0.00],   # hips
    [0.10, -0.45, 0.00], [-0.10, -0.45, 0.00],  # knees
    [0.10, -0.90, 0.00], [-0.10, -0.90, 0.00],  # ankles
])
_TUCK_ELBOW = np.array([[0.19, 0.33, 0.15], [-0.19, 0.33, 0.15]])
_TUCK_WRIST = np.array([[0.03, 0.38, 0.20], [-0.03, 0.38, 0.20]])
_LEG = 0.90


def body_pose(crouch: float, tuck: float, cross: float, swing: float, free_leg: float) -> np.ndarray:
    """Skeleton (17, 3) relative to the hip midpoint for one set of pose controls.

    ``crouch`` bends the knees (ankles rise toward the hips), ``tuck`` pulls the
    arms to the chest, ``cross`` brings the ankles together, ``swing`` is the
    arm oscillation phase offset and ``free_leg`` lifts the right foot.
    """
    p = _REST.copy()
    p[[7, 8]] += tuck * (_TUCK_ELBOW - _REST[[7, 8]])
    p[[9, 10]] += tuck * (_TUCK_WRIST - _REST[[9, 10]])
    arm = (1.0 - tuck) * 0.06 * swing
    p[[7, 9], 2] += arm
    p[[8, 10], 2] -= arm
    p[[13, 14], 1] += 0.10 * crouch
    p[[13, 14], 2] += 0.20 * crouch
    p[[15, 16], 1] += 0.30 * crouch
    p[:11, 2] += 0.10 * crouch
    p[:11, 1] -= 0.05 * crouch
    p[[13, 15], 0] -= 0.08 * cross
    p[[14, 16], 0] += 0.08 * cross
    p[16, 1] += 0.12 * free_leg
    p[16, 2] -= 0.15 * free_leg
    p[14, 2] -= 0.05 * free_leg
    return p


def hip_height(crouch: float) -> float:
    """Hip-midpoint height above the ice when both blades touch it."""
    return _LEG - 0.30 * crouch


def parabola(t: np.ndarray, start: int, end: int, height: float) -> np.ndarray:
    """Lift that is 0 at ``start`` and ``end`` and ``height`` half-way."""
    t = np.asarray(t, dtype=np.float64)
    u = (t - start) / (end - start)
    return np.where((u >= 0) & (u <= 1), 4.0 * height * u * (1.0 - u), 0.0)


def _bump(t: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((t - center) / width) ** 2)


@dataclass(frozen=True)
class _Video:
    """Everything needed to render a clip, kept for tests and the distractor."""

    T: int
    flights: tuple[tuple[int, int], ...]
    bucket: int
    heights: tuple[float, ...]
    combo: tuple[bool, ...]  # flight i follows flight i-1 in a combination
    cue_shifts: tuple[tuple[float, float], ...]
    scale: float
    ground: float
    x0: float
    velocity: float
    spin_dir: float
    stride_phase: float


def _plan_video(cfg: SynthConfig, rng: np.random.Generator) -> _Video:
    weights = np.asarray(cfg.flight_weights, dtype=np.float64)
    n = int(rng.choice(cfg.flights_per_video, p=weights / weights.sum()))
    b_idx = int(rng.integers(len(cfg.rotation_buckets)))
    bucket = int(cfg.rotation_buckets[b_idx])
    solo = cfg.bucket_flight_frames[b_idx] if cfg.bucket_flight_frames else cfg.flight_frames
    combo = [False] + [bool(rng.random() < cfg.combo_prob) for _ in range(n - 1)]
    lengths = []
    for c in combo:
        lo, hi = cfg.combo_flight_frames if c else solo
        lengths.append(int(rng.integers(lo, hi + 1)))
    gaps = []
    for c in combo[1:]:
        lo, hi = cfg.combo_gap if c else cfg.separate_gap
        gaps.append(int(rng.integers(lo, hi + 1)))
    lead = int(rng.integers(cfg.lead_frames[0], cfg.lead_frames[1] + 1))
    trail = int(rng.integers(cfg.trail_frames[0], cfg.trail_frames[1] + 1))
    core = sum(lengths) + sum(gaps)
    # Trim context, then gaps, until the clip fits.
    while lead + core + trail > cfg.max_frames:
        if lead > cfg.lead_frames[0] and lead >= trail:
            lead -= 1
        elif trail > cfg.trail_frames[0]:
            trail -= 1
        elif gaps:
            i = int(np.argmax(gaps))
            gaps[i] -= 1
            core -= 1
            if gaps[i] < 1:
                raise SynthConfigError("flights do not fit in max_frames")
        else:
            raise SynthConfigError("flights do not fit in max_frames")
    flights = []
    t = lead
    for i, length in enumerate(lengths):
        flights.append((t, t + length - 1))
        t += length + (gaps[i] if i < len(gaps) else 0)
    T = t + trail
    heights = tuple(float(rng.uniform(*cfg.jump_height)) * (cfg.combo_height_scale if c else 1.0)
                    for c in combo)
    j = cfg.cue_jitter
    shifts = tuple((float(rng.uniform(-j, j)), float(rng.uniform(-j, j))) for _ in range(n))
    return _Video(
        T=T,
        flights=tuple(flights),
        bucket=bucket,
        heights=heights,
        combo=tuple(combo),
        cue_shifts=shifts,
        scale=float(rng.uniform(120.0, 260.0)),
        ground=float(rng.uniform(650.0, 950.0)),
        x0=float(rng.uniform(300.0, 1600.0)),
        velocity=float(rng.choice([-1.0, 1.0]) * rng.uniform(2.0, 6.0)),
        spin_dir=float(rng.choice([-1.0, 1.0])),
        stride_phase=float(rng.uniform(0.0, 2 * np.pi)),
    )


def _controls(v: _Video, cfg: SynthConfig):
    """Per-frame pose controls, lift (body units) and spin angle."""
    t = np.arange(v.T, dtype=np.float64)
    crouch = np.zeros(v.T)
    tuck = np.zeros(v.T)
    cross = np.zeros(v.T)
    angle = np.zeros(v.T)
    lift = np.zeros(v.T)
    airborne = np.zeros(v.T, dtype=bool)
    tightness = {1: 0.55, 2: 0.8, 3: 1.0}.get(v.bucket, min(1.0, 0.3 + 0.25 * v.bucket))
    for (s, e), h, (ds, de), combo in zip(v.flights, v.heights, v.cue_shifts, v.combo):
        lift += parabola(t, s, e, h)
        airborne |= (t > s) & (t < e)
        # visible cues follow the true take-off/landing only up to a shift
        cs, ce = s + ds, e + de
        if not combo:
            crouch += 0.9 * _bump(t, cs - 3.0, 2.5) * (t < cs)
        crouch += 0.7 * _bump(t, ce + 2.0, 2.5) * (t > ce)
        inside = (t > cs) & (t < ce)
        ramp = np.clip((t - cs) / 2.0, 0.0, 1.0) * np.clip((ce - t) / 2.0, 0.0, 1.0)
        tuck = np.maximum(tuck, tightness * ramp * inside)
        cross = np.maximum(cross, ramp * inside)
        u = np.clip((t - cs) / (ce - cs), 0.0, 1.0)
        angle += np.where(t >= cs, 2 * np.pi * v.bucket * v.spin_dir * u, 0.0)
    crouch = np.clip(crouch, 0.0, 1.0)
    crouch[airborne] = 0.0
    swing = np.sin(2 * np.pi * t / 24.0 + v.stride_phase)
    free_leg = np.where(airborne, 0.0, np.clip(np.sin(2 * np.pi * t / 36.0 + v.stride_phase), 0.0, 1.0))
    free_leg = free_leg * (1.0 - crouch)
    return crouch, tuck, cross, swing, free_leg, angle, lift


def render(v: _Video, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Pixel coordinates ``(T, 17, 2)`` with image y pointing down."""
    crouch, tuck, cross, swing, free_leg, angle, lift = _controls(v, cfg)
    frames = np.empty((v.T, 17, 2))
    for i in range(v.T):
        p = body_pose(crouch[i], tuck[i], cross[i], swing[i], free_leg[i])
        c, s = np.cos(angle[i]), np.sin(angle[i])
        x = p[:, 0] * c + p[:, 2] * s
        root_y = hip_height(crouch[i]) + lift[i]
        frames[i, :, 0] = v.x0 + v.velocity * i + v.scale * x
        frames[i, :, 1] = v.ground - v.scale * (root_y + p[:, 1])
    if cfg.noise_px > 0:
        frames += rng.normal(0.0, cfg.noise_px, size=frames.shape)
    return frames


def generate_synthetic(config: SynthConfig | None = None, seed: int = 0) -> list[VideoRecord]:
    """Deterministic list of synthetic :class:`VideoRecord` for ``(config, seed)``."""
    cfg = config or SynthConfig()
    cfg.validate()
    records = []
    for k in range(cfg.n_videos):
        rng = make_rng(seed, 1000 + k)
        v = _plan_video(cfg, rng)
        frames = render(v, cfg, rng)
        vid = f"syn{seed}-{k:05d}"
        pose = PoseSequence(frames, cfg.fps, vid)
        flights = tuple(FlightSpan(s, e) for s, e in v.flights)
        records.append(VideoRecord(vid, f"j{len(flights)}_r{v.bucket}", pose, flights))
    return records


def plan_for(config: SynthConfig, seed: int, index: int) -> _Video:
    """The hidden plan behind video ``index`` (exposes scale, ground line, heights)."""
    return _plan_video(config, make_rng(seed, 1000 + index))


def rotation_bucket(category: str) -> int:
    return int(category.split("_r")[1])


def flight_count(category: str) -> int:
    return int(category.split("_")[0][1:])


def to_pose_output(record: VideoRecord, seed: int = 0, distractor: bool = False,
                   drop_prob: float = 0.0) -> list[list[dict]]:
    """Render a record as pose-estimator JSON frames.

    The skater is the first candidate with confidence 0.9. A distractor (a
    second person standing at the boards, confidence 0.5) is appended when
    requested; ``drop_prob`` empties random frames after the first.
    """
    rng = make_rng(seed, 77)
    frames = []
    skater = record.pose.frames
    offset = np.array([700.0, -250.0]) if skater[0, 0, 0] < 960 else np.array([-700.0, -250.0])
    for i, xy in enumerate(skater):
        if i > 0 and drop_prob > 0 and rng.random() < drop_prob:
            frames.append([])
            continue
        cands = [_candidate(xy, 0.9)]
        if distractor:
            coach = skater[0] + offset + rng.normal(0.0, 2.0, size=(17, 2))
            cands.append(_candidate(coach, 0.5))
        frames.append(cands)
    return frames


def _candidate(xy: np.ndarray, score: float) -> dict:
    return {"keypoints": [[float(x), float(y), 0.95] for x, y in xy], "score": score}

