"""Synthetic data factory and replay harness.

Generates micrograph-like frames with planted, class-distinct objects and
correlated six-channel sensor streams with injected contamination events.
The two modalities are coupled through the event process: an active event
simultaneously shifts sensor channels along a per-class signature and plants
objects of that class in concurrent frames.

The labeled dataset generator builds a deliberately cross-modal risk task:
a sample is anomalous only when visual contamination and a sensor signature
occur together.  Distractor episodes show each signal alone, so a model
reading one modality cannot exceed 75 % accuracy in expectation while a
fused model can separate all four episode kinds.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .evaluation import field_rates
from .temporal import (
    CHANNEL_BOUNDS,
    N_SENSOR_CHANNELS,
    SENSOR_CHANNELS,
    SENSOR_CSV_HEADER,
    NormStats,
    SensorWindow,
    normalize_window,
)
from .vision import CLASS_NAMES, PATHOGEN_CLASS_IDS

# ---------------------------------------------------------------------------
# profiles, signatures, events
# ---------------------------------------------------------------------------

# (mean, std) per channel: ph, turbidity NTU, TDS ppm, temp C, DO mg/L, ORP mV
DEFAULT_BASELINE_MEAN = np.array([7.2, 1.5, 220.0, 18.0, 8.5, 350.0])
DEFAULT_BASELINE_STD = np.array([0.08, 0.25, 6.0, 0.4, 0.25, 8.0])

# per-class channel response in units of baseline std per unit intensity
EVENT_SIGNATURES = {
    0: np.array([-0.8, 3.5, 0.8, 0.3, -3.0, -2.5]),   # e_coli
    1: np.array([-0.5, 2.5, 0.6, 0.2, -2.0, -1.8]),   # total_coliform
    2: np.array([-0.3, 1.5, 0.4, 0.5, -3.5, -1.2]),   # pseudomonas
    3: np.array([-0.6, 2.0, 0.5, 0.1, -1.5, -2.2]),   # enterococcus
    4: np.array([-0.2, 2.8, 0.3, 0.0, -1.0, -0.8]),   # giardia
    5: np.array([0.0, 2.2, 1.5, 0.0, -0.3, 0.3]),     # microplastics
    6: np.array([0.9, 1.8, 0.2, 0.4, 2.5, -0.5]),     # algae
    7: np.array([0.2, 3.8, 2.5, 0.0, -0.2, 0.9]),     # inorganic
}


@dataclass
class SiteProfile:
    """Baseline statistics and disturbance rates for one deployment node."""

    kind: str = "depot"
    baseline_mean: np.ndarray = field(
        default_factory=lambda: DEFAULT_BASELINE_MEAN.copy())
    baseline_std: np.ndarray = field(
        default_factory=lambda: DEFAULT_BASELINE_STD.copy())
    fouling_drift: float = 0.0   # turbidity NTU added per hour
    event_rate: float = 0.0     # contamination events per hour
    noise: float = 1.0           # multiplier on baseline std
    fault_rate: float = 0.0      # per-sample, per-channel dropout probability

    def __post_init__(self):
        if self.kind not in ("depot", "river_intake"):
            raise ValueError(f"unknown site kind {self.kind!r}")
        self.baseline_mean = np.asarray(self.baseline_mean, dtype=float)
        self.baseline_std = np.asarray(self.baseline_std, dtype=float)
        if self.baseline_mean.shape != (N_SENSOR_CHANNELS,):
            raise ValueError("baseline_mean must have one entry per channel")
        if np.any(self.baseline_std <= 0):
            raise ValueError("baseline_std must be positive")
        for rate in (self.fouling_drift, self.event_rate, self.noise,
                     self.fault_rate):
            if rate < 0:
                raise ValueError("rates must be non-negative")
        for i, name in enumerate(SENSOR_CHANNELS):
            lo, hi = CHANNEL_BOUNDS[name]
            v = self.baseline_mean[i]
            if (lo is not None and v < lo) or (hi is not None and v > hi):
                raise ValueError(f"baseline {name}={v} outside physical bounds")

    @classmethod
    def depot(cls) -> "SiteProfile":
        return cls(kind="depot", event_rate=0.2, noise=1.0, fault_rate=0.002)

    @classmethod
    def river_intake(cls) -> "SiteProfile":
        return cls(kind="river_intake", event_rate=0.6, noise=1.6,
                   fouling_drift=0.05, fault_rate=0.01)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "baseline_mean": self.baseline_mean.tolist(),
            "baseline_std": self.baseline_std.tolist(),
            "fouling_drift": self.fouling_drift,
            "event_rate": self.event_rate,
            "noise": self.noise,
            "fault_rate": self.fault_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SiteProfile":
        d = dict(d)
        d["baseline_mean"] = np.asarray(d["baseline_mean"])
        d["baseline_std"] = np.asarray(d["baseline_std"])
        return cls(**d)


@dataclass
class ContaminationEvent:
    start: float
    end: float
    class_id: int
    intensity: float = 1.0
    object_density: float = 4.0  # expected planted objects per frame at peak

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"event start {self.start} must precede end {self.end}")
        if self.object_density < 0:
            raise ValueError("object_density must be non-negative")
        self.class_id = int(self.class_id)

    def envelope(self, t) -> np.ndarray:
        """Trapezoid: 15 % ramp in, plateau, 15 % ramp out."""
        t = np.asarray(t, dtype=float)
        ramp = 0.15 * (self.end - self.start)
        up = (t - self.start) / ramp
        down = (self.end - t) / ramp
        return np.clip(np.minimum(np.minimum(up, down), 1.0), 0.0, 1.0)

    def signature(self) -> np.ndarray:
        return EVENT_SIGNATURES[self.class_id]

    def to_dict(self) -> dict:
        return {
            "start": self.start, "end": self.end, "class_id": self.class_id,
            "class_name": CLASS_NAMES[self.class_id],
            "intensity": self.intensity, "object_density": self.object_density,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContaminationEvent":
        return cls(d["start"], d["end"], d["class_id"],
                   d.get("intensity", 1.0), d.get("object_density", 4.0))


# ---------------------------------------------------------------------------
# frame rendering: eight class-distinct analytic shapes
# ---------------------------------------------------------------------------

_EDGE = 1.0  # soft-edge width in pixels

_CLASS_COLORS = {
    0: (0.35, 0.62, 0.30),  # rod, green
    1: (0.58, 0.58, 0.22),  # paired rods, olive
    2: (0.25, 0.55, 0.62),  # slim rod, teal
    3: (0.48, 0.33, 0.58),  # coccus chain, purple
    4: (0.30, 0.58, 0.52),  # nucleated cyst, sea green
    5: (0.75, 0.35, 0.25),  # fibre, red-orange
    6: (0.20, 0.66, 0.25),  # filament, bright green
    7: (0.52, 0.45, 0.38),  # grain, brown-gray
}

_BG_COLOR = np.array([0.47, 0.56, 0.62])


def _segment_distance(xs, ys, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    if denom == 0.0:
        return np.hypot(xs - x0, ys - y0)
    t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / denom, 0.0, 1.0)
    return np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))


def _soft(dist_inside):
    """Distance-to-coverage: >0 inside, soft 1-px transition at the edge."""
    return np.clip(dist_inside / _EDGE + 0.5, 0.0, 1.0)


def _capsule(xs, ys, cx, cy, length, radius, angle):
    hx = 0.5 * length * np.cos(angle)
    hy = 0.5 * length * np.sin(angle)
    d = _segment_distance(xs, ys, cx - hx, cy - hy, cx + hx, cy + hy)
    return _soft(radius - d)


def _polyline(xs, ys, points, radius):
    d = None
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        seg = _segment_distance(xs, ys, x0, y0, x1, y1)
        d = seg if d is None else np.minimum(d, seg)
    return _soft(radius - d)


def _ellipse(xs, ys, cx, cy, a, b, angle):
    u = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle)
    v = -(xs - cx) * np.sin(angle) + (ys - cy) * np.cos(angle)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return _soft((1.0 - r) * min(a, b))


def _blob(xs, ys, cx, cy, base_radius, harmonics):
    u, v = xs - cx, ys - cy
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    r_at = np.full_like(rho, base_radius)
    for k, amp, phase in harmonics:
        r_at = r_at + base_radius * amp * np.cos(k * theta + phase)
    return _soft(r_at - rho)


@dataclass
class PlantedObject:
    class_id: int
    cx: float  # pixels
    cy: float
    size: float  # pixels, class-specific base dimension
    angle: float
    params: dict = field(default_factory=dict)


def sample_object(class_id: int, resolution: int, rng) -> PlantedObject:
    """Draw a randomly posed instance of one class, kept inside the canvas."""
    s = resolution / 64.0
    margin = 0.14
    cx = float(rng.uniform(margin, 1 - margin)) * resolution
    cy = float(rng.uniform(margin, 1 - margin)) * resolution
    angle = float(rng.uniform(0, np.pi))
    size = s * float(rng.uniform(0.8, 1.25))
    params = {}
    if class_id == 3:
        params["n_beads"] = int(rng.integers(2, 4))
    if class_id == 6:
        params["phase"] = float(rng.uniform(0, 2 * np.pi))
        params["waves"] = float(rng.uniform(1.5, 2.5))
    if class_id == 7:
        params["harmonics"] = [
            (int(k), float(rng.uniform(0.06, 0.2)), float(rng.uniform(0, 2 * np.pi)))
            for k in (2, 3, 5)
        ]
    params["color_jitter"] = rng.uniform(-0.05, 0.05, size=3).tolist()
    return PlantedObject(int(class_id), cx, cy, size, angle, params)


def _object_mask(obj: PlantedObject, xs, ys):
    """Coverage mask plus optional overlay (mask, color) details."""
    c, x, y, s, a = obj.class_id, obj.cx, obj.cy, obj.size, obj.angle
    details = []
    if c == 0:
        mask = _capsule(xs, ys, x, y, 8.5 * s, 1.6 * s, a)
    elif c == 1:
        off = 2.1 * s
        ox, oy = -np.sin(a) * off, np.cos(a) * off
        mask = np.maximum(
            _capsule(xs, ys, x - ox, y - oy, 6.0 * s, 1.4 * s, a),
            _capsule(xs, ys, x + ox, y + oy, 6.0 * s, 1.4 * s, a),
        )
    elif c == 2:
        mask = _capsule(xs, ys, x, y, 9.5 * s, 1.0 * s, a)
    elif c == 3:
        n = obj.params.get("n_beads", 3)
        step = 3.1 * s
        mask = None
        for i in range(n):
            t = i - (n - 1) / 2.0
            bx, by = x + np.cos(a) * step * t, y + np.sin(a) * step * t
            bead = _capsule(xs, ys, bx, by, 0.0, 1.8 * s, 0.0)
            mask = bead if mask is None else np.maximum(mask, bead)
    elif c == 4:
        mask = _ellipse(xs, ys, x, y, 5.0 * s, 3.4 * s, a)
        for sign in (-1.0, 1.0):
            nx = x + sign * 1.7 * s * np.cos(a)
            ny = y + sign * 1.7 * s * np.sin(a)
            nucleus = _capsule(xs, ys, nx, ny, 0.0, 0.8 * s, 0.0)
            details.append((nucleus, np.array([0.12, 0.22, 0.20])))
    elif c == 5:
        half = 7.0 * s
        p0 = (x - np.cos(a) * half, y - np.sin(a) * half)
        p1 = (x + np.cos(a) * half, y + np.sin(a) * half)
        mask = _polyline(xs, ys, [p0, p1], 0.8 * s)
    elif c == 6:
        half = 8.0 * s
        ts = np.linspace(-1, 1, 25)
        waves = obj.params.get("waves", 2.0)
        phase = obj.params.get("phase", 0.0)
        wiggle = 3.0 * s * np.sin(waves * np.pi * ts + phase)
        px = x + np.cos(a) * half * ts - np.sin(a) * wiggle
        py = y + np.sin(a) * half * ts + np.cos(a) * wiggle
        mask = _polyline(xs, ys, list(zip(px, py)), 1.1 * s)
    elif c == 7:
        harmonics = obj.params.get("harmonics", [(3, 0.15, 0.0)])
        mask = _blob(xs, ys, x, y, 3.6 * s, harmonics)
    else:
        raise ValueError(f"unknown class id {obj.class_id}")
    return mask, details


def render_frame(objects, resolution: int, rng, specks: bool = True):
    """Compose planted objects over a water-like background.

    Returns (image (3,R,R) float64 in [0,1], boxes (N,4) normalized xyxy,
    classes (N,)).  Boxes are the tight pixel extents of each object's
    coverage mask; objects whose mask misses the canvas are dropped.
    """
    res = int(resolution)
    ys, xs = np.mgrid[0:res, 0:res] + 0.5
    # background: base tint, low-frequency mottle, fine grain
    img = np.empty((3, res, res))
    mottle = ndimage.gaussian_filter(rng.standard_normal((res, res)), res / 12.0)
    mottle = mottle / (np.abs(mottle).max() + 1e-9)
    grain = rng.standard_normal((res, res)) * 0.012
    for ch in range(3):
        img[ch] = _BG_COLOR[ch] + 0.04 * mottle + grain
    if specks:
        for _ in range(int(rng.poisson(3.0))):
            sx, sy = rng.uniform(2, res - 2, size=2)
            speck = _capsule(xs, ys, sx, sy, 0.0, 0.7, 0.0)
            img -= 0.08 * speck[None]

    boxes, classes = [], []
    for obj in objects:
        mask, details = _object_mask(obj, xs, ys)
        color = np.asarray(_CLASS_COLORS[obj.class_id], dtype=float)
        color = np.clip(color + np.asarray(obj.params.get("color_jitter", 0.0)), 0, 1)
        alpha = 0.88 * mask
        img = img * (1 - alpha[None]) + color[:, None, None] * alpha[None]
        for dmask, dcolor in details:
            dalpha = 0.9 * dmask
            img = img * (1 - dalpha[None]) + dcolor[:, None, None] * dalpha[None]
        hit = np.argwhere(mask > 0.1)
        if hit.size == 0:
            continue
        y0, x0 = hit.min(axis=0)
        y1, x1 = hit.max(axis=0) + 1
        boxes.append([
            max(x0 - 1, 0) / res, max(y0 - 1, 0) / res,
            min(x1 + 1, res) / res, min(y1 + 1, res) / res,
        ])
        classes.append(obj.class_id)
    img = np.clip(img, 0.0, 1.0)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    classes = np.asarray(classes, dtype=int)
    return img, boxes, classes


def save_png(path, image: np.ndarray):
    """Write a (3,H,W) float image in [0,1] as an 8-bit PNG."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.moveaxis(arr, -1, 0)


# ---------------------------------------------------------------------------
# sensor synthesis
# ---------------------------------------------------------------------------


def _clip_physical(values: np.ndarray) -> np.ndarray:
    for i, name in enumerate(SENSOR_CHANNELS):
        lo, hi = CHANNEL_BOUNDS[name]
        if lo is not None:
            values[i] = np.maximum(values[i], lo)
        if hi is not None:
            values[i] = np.minimum(values[i], hi)
    return values


def synthesize_sensors(profile: SiteProfile, times: np.ndarray,
                       events: list, rng):
    """Baseline + fouling drift + event signatures + noise, with dropouts.

    Returns (values (6,N), valid (6,N)); dropped samples read 0.0 and are
    flagged invalid.
    """
    times = np.asarray(times, dtype=float)
    n = times.size
    mean = profile.baseline_mean[:, None]
    std = profile.baseline_std[:, None]
    values = mean + std * profile.noise * rng.standard_normal((N_SENSOR_CHANNELS, n))
    turb = SENSOR_CHANNELS.index("turbidity")
    values[turb] += profile.fouling_drift * times / 3600.0
    for ev in events:
        env = ev.envelope(times)[None, :]
        values += ev.signature()[:, None] * ev.intensity * std * env
    values = _clip_physical(values)
    valid = rng.uniform(size=values.shape) >= profile.fault_rate
    values = np.where(valid, values, 0.0)
    return values, valid


def draw_events(profile: SiteProfile, duration: float, rng,
                class_pool=PATHOGEN_CLASS_IDS,
                event_duration=(600.0, 1200.0),
                intensity=(1.0, 1.6), min_gap: float = 120.0) -> list:
    """Non-overlapping Poisson event process over [0, duration)."""
    events = []
    if profile.event_rate == 0:
        return events
    rate_per_s = profile.event_rate / 3600.0
    t = 0.0
    while True:
        t += float(rng.exponential(1.0 / rate_per_s))
        length = float(rng.uniform(*event_duration))
        if t + length >= duration:
            break
        cid = int(rng.choice(class_pool))
        inten = float(rng.uniform(*intensity))
        events.append(ContaminationEvent(
            t, t + length, cid, inten,
            object_density=2.0 + 2.0 * inten,
        ))
        t += length + min_gap
    return events


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------


@dataclass
class FrameRecord:
    time: float
    image: np.ndarray  # (3,R,R)
    boxes: np.ndarray  # (N,4) normalized
    classes: np.ndarray  # (N,)


@dataclass
class Stream:
    times: np.ndarray  # (N,) seconds
    values: np.ndarray  # (6,N)
    valid: np.ndarray  # (6,N) bool
    frames: list  # [FrameRecord]
    events: list  # [ContaminationEvent]
    sample_period: float
    resolution: int
    profile: SiteProfile
    seed: int

    @property
    def duration(self) -> float:
        return float(self.times[-1] + self.sample_period) if self.times.size else 0.0

    def window_ending_at(self, t: float, window_len: int) -> SensorWindow | None:
        """The most recent ``window_len`` samples at or before ``t``."""
        end = int(np.searchsorted(self.times, t, side="right"))
        if end < window_len:
            return None
        sl = slice(end - window_len, end)
        return SensorWindow(self.values[:, sl].copy(), self.valid[:, sl].copy())


def generate_stream(profile: SiteProfile, duration: float, seed: int,
                    sample_period: float = 5.0, frame_interval: float = 60.0,
                    resolution: int = 64, class_pool=PATHOGEN_CLASS_IDS,
                    event_duration=(600.0, 1200.0), intensity=(1.0, 1.6),
                    specks: bool = True) -> Stream:
    """Seed-deterministic coupled sensor + frame stream with injected events."""
    rng = np.random.default_rng([seed, 0])
    events = draw_events(profile, duration, rng, class_pool=class_pool,
                         event_duration=event_duration, intensity=intensity)
    times = np.arange(0.0, duration, sample_period)
    values, valid = synthesize_sensors(profile, times, events, rng)

    frames = []
    frame_times = np.arange(0.0, duration, frame_interval)
    for idx, t in enumerate(frame_times):
        frng = np.random.default_rng([seed, 1, idx])
        objects = []
        for ev in events:
            if ev.start <= t < ev.end:
                env = float(ev.envelope(t))
                count = 1 + int(frng.poisson(max(ev.object_density * env - 1, 0)))
                objects += [sample_object(ev.class_id, resolution, frng)
                            for _ in range(count)]
        image, boxes, classes = render_frame(objects, resolution, frng,
                                             specks=specks)
        frames.append(FrameRecord(float(t), image, boxes, classes))
    return Stream(times, values, valid, frames, events, sample_period,
                  resolution, profile, seed)


def write_sensor_csv(path, times, values, valid):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(SENSOR_CSV_HEADER + "\n")
        for i, t in enumerate(times):
            row = ",".join(f"{values[c, i]:.6g}" for c in range(N_SENSOR_CHANNELS))
            bits = "".join("1" if valid[c, i] else "0"
                           for c in range(N_SENSOR_CHANNELS))
            f.write(f"{t:.1f},{row},{bits}\n")


def read_sensor_csv(path):
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != SENSOR_CSV_HEADER:
            raise ValueError(f"unexpected sensor CSV header: {header!r}")
        times, cols, masks = [], [], []
        for line in f:
            parts = line.strip().split(",")
            if len(parts) != N_SENSOR_CHANNELS + 2:
                raise ValueError(f"malformed sensor CSV row: {line!r}")
            times.append(float(parts[0]))
            cols.append([float(x) for x in parts[1:-1]])
            masks.append([ch == "1" for ch in parts[-1]])
    times = np.asarray(times)
    values = np.asarray(cols).T
    valid = np.asarray(masks).T
    return times, values, valid


def save_stream(stream: Stream, root) -> Path:
    """Write sensors.csv, frames/*.png, annotations, events, and metadata."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_sensor_csv(root / "sensors.csv", stream.times, stream.values,
                     stream.valid)
    annotations = []
    for i, fr in enumerate(stream.frames):
        rel = f"frames/frame_{i:05d}.png"
        save_png(root / rel, fr.image)
        annotations.append({
            "path": rel, "time": fr.time,
            "boxes": fr.boxes.tolist(),
            "classes": fr.classes.tolist(),
        })
    (root / "frames.json").write_text(
        json.dumps(annotations, indent=1, sort_keys=True) + "\n")
    (root / "events.json").write_text(
        json.dumps([e.to_dict() for e in stream.events], indent=1,
                   sort_keys=True) + "\n")
    meta = {
        "sample_period": stream.sample_period,
        "resolution": stream.resolution,
        "seed": stream.seed,
        "profile": stream.profile.to_dict(),
    }
    (root / "stream.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return root


def load_stream(root) -> Stream:
    root = Path(root)
    meta = json.loads((root / "stream.json").read_text())
    times, values, valid = read_sensor_csv(root / "sensors.csv")
    frames = []
    for rec in json.loads((root / "frames.json").read_text()):
        frames.append(FrameRecord(
            rec["time"], load_png(root / rec["path"]),
            np.asarray(rec["boxes"], dtype=float).reshape(-1, 4),
            np.asarray(rec["classes"], dtype=int),
        ))
    events = [ContaminationEvent.from_dict(d)
              for d in json.loads((root / "events.json").read_text())]
    return Stream(times, values, valid, frames, events,
                  meta["sample_period"], meta["resolution"],
                  SiteProfile.from_dict(meta["profile"]), meta["seed"])


# ---------------------------------------------------------------------------
# labeled cross-modal dataset
# ---------------------------------------------------------------------------

EPISODE_KINDS = ("both", "visual_only", "sensor_only", "clean")


@dataclass
class DatasetConfig:
    n_groups: int = 60
    frames_per_group: tuple = (1, 3)  # inclusive range
    resolution: int = 64
    window_len: int = 32
    seed: int = 0
    episode_mix: tuple = (0.25, 0.25, 0.25, 0.25)  # per EPISODE_KINDS order
    event_classes: tuple = PATHOGEN_CLASS_IDS
    n_objects: tuple = (3, 6)       # planted event-class objects, inclusive
    benign_extras: tuple = (0, 2)   # extra non-event detritus objects
    benign_classes: tuple = (5, 6, 7)
    intensity: tuple = (1.0, 1.6)
    profile: SiteProfile = field(default_factory=SiteProfile)

    def __post_init__(self):
        if abs(sum(self.episode_mix) - 1.0) > 1e-9:
            raise ValueError("episode_mix must sum to 1")
        if self.n_groups < 3:
            raise ValueError("need at least 3 groups to split")


def _episode_kinds(cfg: DatasetConfig, rng) -> list:
    """Exact-count kind assignment matching the configured mix."""
    counts = [int(np.floor(frac * cfg.n_groups)) for frac in cfg.episode_mix]
    i = 0
    while sum(counts) < cfg.n_groups:
        counts[i % len(counts)] += 1
        i += 1
    kinds = [k for k, c in zip(EPISODE_KINDS, counts) for _ in range(c)]
    return [kinds[i] for i in rng.permutation(len(kinds))]


def _episode_window(cfg: DatasetConfig, kind: str, class_id: int,
                    intensity: float, rng) -> SensorWindow:
    profile = cfg.profile
    t = np.arange(cfg.window_len, dtype=float)
    std = profile.baseline_std[:, None]
    values = profile.baseline_mean[:, None] + std * profile.noise * \
        rng.standard_normal((N_SENSOR_CHANNELS, cfg.window_len))
    if kind in ("both", "sensor_only"):
        ramp = np.clip(t / max(cfg.window_len // 4, 1), 0.0, 1.0)[None, :]
        values += EVENT_SIGNATURES[class_id][:, None] * intensity * std * ramp
    values = _clip_physical(values)
    valid = rng.uniform(size=values.shape) >= profile.fault_rate
    values = np.where(valid, values, 0.0)
    return SensorWindow(values, valid)


def _episode_frame(cfg: DatasetConfig, kind: str, class_id: int, rng):
    objects = []
    if kind in ("both", "visual_only"):
        lo, hi = cfg.n_objects
        for _ in range(int(rng.integers(lo, hi + 1))):
            objects.append(sample_object(class_id, cfg.resolution, rng))
    lo, hi = cfg.benign_extras
    for _ in range(int(rng.integers(lo, hi + 1))):
        cid = int(rng.choice(cfg.benign_classes))
        objects.append(sample_object(cid, cfg.resolution, rng))
    return render_frame(objects, cfg.resolution, rng)


def generate_labeled_dataset(cfg: DatasetConfig):
    """Samples for the cross-modal risk task plus their manifest.

    Each group is one physical sample: all its frames share an episode kind,
    an event class, and a sensor context.  The anomaly label is 1 only for
    'both' episodes — visual or sensor evidence alone is labeled clean.
    """
    rng = np.random.default_rng([cfg.seed, 17])
    kinds = _episode_kinds(cfg, rng)
    samples = []
    records = []
    for g, kind in enumerate(kinds):
        sample_id = f"S{g:04d}"
        class_id = int(rng.choice(cfg.event_classes))
        intensity = float(rng.uniform(*cfg.intensity))
        lo, hi = cfg.frames_per_group
        n_frames = int(rng.integers(lo, hi + 1))
        for f_idx in range(n_frames):
            frng = np.random.default_rng([cfg.seed, 23, g, f_idx])
            image, boxes, classes = _episode_frame(cfg, kind, class_id, frng)
            window = _episode_window(cfg, kind, class_id, intensity, frng)
            sample = {
                "image": image,
                "window_raw": window,
                "boxes": boxes,
                "classes": classes,
                "anomaly": 1 if kind == "both" else 0,
                "sample_id": sample_id,
                "kind": kind,
                "event_class": class_id if kind != "clean" else None,
            }
            samples.append(sample)
            records.append({
                "path": f"images/{sample_id}_{f_idx}.png",
                "sample_id": sample_id,
                "split": None,
                "primary_class": class_id if kind in ("both", "visual_only") else None,
                "n_objects": int(len(classes)),
                "classes": classes.tolist(),
                "kind": kind,
            })
    manifest = DatasetManifest.from_records(records)
    return samples, manifest


def assign_splits(samples, manifest: "DatasetManifest", seed: int = 0):
    """Stamp group-safe split tags onto samples and manifest records."""
    split_of = split_by_group(manifest.records, seed=seed)
    for rec in manifest.records:
        rec["split"] = split_of[rec["sample_id"]]
    for s in samples:
        s["split"] = split_of[s["sample_id"]]
    manifest.aggregates = DatasetManifest.compute_aggregates(manifest.records)
    return split_of


def prepare_for_training(samples, stats: NormStats | None = None):
    """Normalize windows with training-split statistics; returns the stats."""
    if stats is None:
        train_windows = [s["window_raw"] for s in samples
                         if s.get("split") == "train"]
        if not train_windows:
            raise ValueError("no training-split samples to fit stats on")
        stats = NormStats.from_windows(train_windows)
    for s in samples:
        normed, _ = normalize_window(s["window_raw"], stats)
        s["window"] = normed
    return stats


# ---------------------------------------------------------------------------
# manifest and splits
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    records: list
    class_names: tuple = CLASS_NAMES
    aggregates: dict = field(default_factory=dict)

    @staticmethod
    def compute_aggregates(records) -> dict:
        per_class = {}
        for cid, name in enumerate(CLASS_NAMES):
            rows = [r for r in records if r.get("primary_class") == cid]
            per_class[name] = {
                "images": len(rows),
                "mean_objects": (float(np.mean([r["n_objects"] for r in rows]))
                                 if rows else None),
            }
        total_objects = int(sum(r["n_objects"] for r in records))
        split_counts = {}
        for r in records:
            split_counts[r.get("split")] = split_counts.get(r.get("split"), 0) + 1
        return {
            "per_class": per_class,
            "total_images": len(records),
            "total_objects": total_objects,
            "mean_objects_per_image": (total_objects / len(records)
                                       if records else 0.0),
            "split_counts": {str(k): v for k, v in split_counts.items()},
        }

    @classmethod
    def from_records(cls, records) -> "DatasetManifest":
        return cls(records=list(records),
                   aggregates=cls.compute_aggregates(records))

    def validate(self):
        """Stored aggregates must equal a recount of the records."""
        fresh = self.compute_aggregates(self.records)
        if fresh != self.aggregates:
            raise ValueError("manifest aggregates do not match records")
        by_id = {}
        for r in self.records:
            by_id.setdefault(r["sample_id"], set()).add(r.get("split"))
        torn = {k: v for k, v in by_id.items() if len(v) > 1}
        if torn:
            raise ValueError(f"sample ids span multiple splits: {sorted(torn)}")

    def to_json(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "class_names": list(self.class_names),
            "records": self.records,
            "aggregates": self.aggregates,
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        payload = json.loads(Path(path).read_text())
        return cls(records=payload["records"],
                   class_names=tuple(payload["class_names"]),
                   aggregates=payload["aggregates"])


def split_by_group(records, ratios=(0.7, 0.15, 0.15), seed: int = 0,
                   key: str = "sample_id") -> dict:
    """Assign whole groups to train/val/test, greedily balancing image counts.

    Groups are processed in a seeded shuffle order; each goes to the split
    with the largest remaining image deficit.  Fewer than 3 groups is an
    error; a deviation beyond 2 points of the targets (possible when one
    group dominates) emits a warning.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive fractions summing to 1")
    sizes = {}
    for r in records:
        sizes[r[key]] = sizes.get(r[key], 0) + 1
    groups = sorted(sizes)
    if len(groups) < 3:
        raise ValueError(f"need at least 3 groups to split, got {len(groups)}")
    rng = np.random.default_rng(seed)
    order = [groups[i] for i in rng.permutation(len(groups))]
    total = sum(sizes.values())
    names = ("train", "val", "test")
    targets = [ratio * total for ratio in ratios]
    assigned = [0, 0, 0]
    split_of = {}
    for gid in order:
        deficits = [t - a for t, a in zip(targets, assigned)]
        pick = int(np.argmax(deficits))
        split_of[gid] = names[pick]
        assigned[pick] += sizes[gid]
    worst = max(abs(a - t) / total for a, t in zip(assigned, targets))
    if worst > 0.02 + 1e-9:
        warnings.warn(
            f"split ratios deviate by {worst:.1%} from targets "
            "(group sizes do not permit a closer fit)", stacklevel=2)
    return split_of


# -- full-scale manifest preset ---------------------------------------------

# default full-scale class mix: (images, planted objects per image)
FULL_SCALE_CLASS_MIX = {
    "e_coli": (2843, 6.4),
    "total_coliform": (2156, 5.1),
    "pseudomonas": (1789, 4.8),
    "enterococcus": (1412, 3.9),
    "giardia": (987, 1.2),
    "microplastics": (1234, 8.2),
    "algae": (1105, 12.1),
    "inorganic": (1320, 15.3),
}
FULL_SCALE_OBJECTS_PER_IMAGE = 7.1

# the per-class densities above average to ~6.86 objects/image; scale them
# uniformly so the realized overall density hits the configured target
_mix_total_images = sum(n for n, _ in FULL_SCALE_CLASS_MIX.values())
_mix_total_objects = sum(n * d for n, d in FULL_SCALE_CLASS_MIX.values())
_DENSITY_SCALE = (FULL_SCALE_OBJECTS_PER_IMAGE * _mix_total_images
                  / _mix_total_objects)


def full_scale_manifest(seed: int = 0, group_size: int = 4) -> DatasetManifest:
    """Manifest-only dataset at the full-scale class mix (no pixels rendered)."""
    records = []
    for cid, name in enumerate(CLASS_NAMES):
        n_images, density = FULL_SCALE_CLASS_MIX[name]
        total_objects = int(round(n_images * density * _DENSITY_SCALE))
        base, extra = divmod(total_objects, n_images)
        for i in range(n_images):
            n_obj = base + (1 if i < extra else 0)
            records.append({
                "path": f"images/{name}/{i:05d}.png",
                "sample_id": f"{name}-{i // group_size:04d}",
                "split": None,
                "primary_class": cid,
                "n_objects": n_obj,
                "classes": [cid] * n_obj,
                "kind": "catalog",
            })
    split_of = split_by_group(records, seed=seed)
    for r in records:
        r["split"] = split_of[r["sample_id"]]
    return DatasetManifest.from_records(records)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    crop_scale: tuple = (0.7, 1.0)
    blur_sigma: tuple = (0.0, 1.0)
    hue_delta: float = 0.03
    sat_range: tuple = (0.85, 1.15)
    val_range: tuple = (0.85, 1.15)
    min_visible: float = 0.3
    out_resolution: int | None = None  # None keeps the input size

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(p_hflip=0.0, p_vflip=0.0, crop_scale=(1.0, 1.0),
                   blur_sigma=(0.0, 0.0), hue_delta=0.0,
                   sat_range=(1.0, 1.0), val_range=(1.0, 1.0))


def hflip(image, boxes):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    out = boxes.copy()
    out[:, 0] = 1.0 - boxes[:, 2]
    out[:, 2] = 1.0 - boxes[:, 0]
    return image[:, :, ::-1].copy(), out


def vflip(image, boxes):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    out = boxes.copy()
    out[:, 1] = 1.0 - boxes[:, 3]
    out[:, 3] = 1.0 - boxes[:, 1]
    return image[:, ::-1, :].copy(), out


def _resize(image: np.ndarray, out: int) -> np.ndarray:
    _, h, w = image.shape
    if h == out and w == out:
        return image.copy()
    rows = (np.arange(out) + 0.5) * h / out - 0.5
    cols = (np.arange(out) + 0.5) * w / out - 0.5
    grid = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    resized = np.empty((image.shape[0], out, out))
    for c in range(image.shape[0]):
        resized[c] = ndimage.map_coordinates(
            image[c], coords, order=1, mode="nearest").reshape(out, out)
    return resized


def crop(image, boxes, classes, origin, side_fraction, min_visible=0.3,
         out_resolution=None):
    """Square crop in normalized units; boxes clipped, re-expressed, filtered."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    classes = np.asarray(classes, dtype=int)
    _, h, w = image.shape
    side = side_fraction
    x0n, y0n = origin
    x0 = int(round(x0n * w))
    y0 = int(round(y0n * h))
    sw = max(int(round(side * w)), 1)
    sh = max(int(round(side * h)), 1)
    x0 = min(x0, w - sw)
    y0 = min(y0, h - sh)
    patch = image[:, y0:y0 + sh, x0:x0 + sw]
    out_res = out_resolution or max(h, w)
    patch = _resize(patch, out_res)

    rect = np.array([x0 / w, y0 / h, (x0 + sw) / w, (y0 + sh) / h])
    kept_boxes, kept_classes = [], []
    for box, cid in zip(boxes, classes):
        ix0 = max(box[0], rect[0])
        iy0 = max(box[1], rect[1])
        ix1 = min(box[2], rect[2])
        iy1 = min(box[3], rect[3])
        iw, ih = ix1 - ix0, iy1 - iy0
        if iw <= 0 or ih <= 0:
            continue
        area = (box[2] - box[0]) * (box[3] - box[1])
        if area <= 0 or (iw * ih) / area < min_visible:
            continue
        kept_boxes.append([
            (ix0 - rect[0]) / side, (iy0 - rect[1]) / side,
            (ix1 - rect[0]) / side, (iy1 - rect[1]) / side,
        ])
        kept_classes.append(cid)
    kept = np.clip(np.asarray(kept_boxes, dtype=float).reshape(-1, 4), 0.0, 1.0)
    return patch, kept, np.asarray(kept_classes, dtype=int)


def _hsv_jitter(image, dh, ds, dv):
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    hsv = rgb_to_hsv(np.moveaxis(image, 0, -1))
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * dv, 0.0, 1.0)
    return np.moveaxis(hsv_to_rgb(hsv), -1, 0)


def augment(image, boxes, classes, policy: AugmentPolicy, rng):
    """Flips, random square crop, mild blur, HSV jitter — boxes kept aligned."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    classes = np.asarray(classes, dtype=int)
    if rng.uniform() < policy.p_hflip:
        image, boxes = hflip(image, boxes)
    if rng.uniform() < policy.p_vflip:
        image, boxes = vflip(image, boxes)

    side = float(rng.uniform(*policy.crop_scale))
    out_res = policy.out_resolution or image.shape[1]
    if side < 1.0:
        origin = tuple(rng.uniform(0.0, 1.0 - side, size=2))
        image, boxes, classes = crop(
            image, boxes, classes, origin, side,
            min_visible=policy.min_visible, out_resolution=out_res)
    elif out_res != image.shape[1]:
        image = _resize(image, out_res)

    sigma = float(rng.uniform(*policy.blur_sigma))
    if sigma > 0.05:
        image = np.stack([ndimage.gaussian_filter(image[c], sigma)
                          for c in range(image.shape[0])])

    dh = float(rng.uniform(-policy.hue_delta, policy.hue_delta))
    ds = float(rng.uniform(*policy.sat_range))
    dv = float(rng.uniform(*policy.val_range))
    if abs(dh) > 1e-12 or abs(ds - 1) > 1e-12 or abs(dv - 1) > 1e-12:
        image = _hsv_jitter(image, dh, ds, dv)
    return np.clip(image, 0.0, 1.0), boxes, classes


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


class OracleAlerter:
    """Reads ground-truth events; alerts once at the first frame of each."""

    def __init__(self, events):
        self.events = list(events)
        self._fired = set()

    def step(self, t, image, window):
        for i, ev in enumerate(self.events):
            if ev.start <= t < ev.end and i not in self._fired:
                self._fired.add(i)
                return {"alert": True, "risk": 1.0, "pathogen_score": 1.0}
        return {"alert": False, "risk": 0.0, "pathogen_score": 0.0}


class RandomAlerter:
    """Alert at pre-drawn uniform times — the rate-matched null baseline."""

    def __init__(self, n_alerts: int, t0: float, t1: float, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.times = np.sort(rng.uniform(t0, t1, size=int(n_alerts)))
        self._prev = -np.inf

    def step(self, t, image, window):
        due = np.any((self.times > self._prev) & (self.times <= t))
        self._prev = t
        return {"alert": bool(due), "risk": float(due), "pathogen_score": 0.0}


@dataclass
class ReplayReport:
    rates: "object"  # evaluation.FieldRates
    alert_times: list
    n_frames: int
    n_events: int

    def to_dict(self) -> dict:
        return {
            "rates": self.rates.to_dict(),
            "alert_times": list(self.alert_times),
            "n_frames": self.n_frames,
            "n_events": self.n_events,
        }


def replay(stream: Stream, alerter, window_len: int = 32,
           matching_window: float = 600.0, lab_period: float | None = None
           ) -> ReplayReport:
    """Drive an alerter over a stream frame by frame; score with field_rates.

    The alerter sees, per frame, the timestamp, the image, and the most
    recent ``window_len`` sensor samples (None during sensor warm-up).
    ``lab_period`` optionally subsamples events to those a periodic lab
    check would confirm, mimicking sparse ground truth.
    """
    alert_times = []
    for fr in stream.frames:
        window = stream.window_ending_at(fr.time, window_len)
        decision = alerter.step(fr.time, fr.image, window)
        if decision.get("alert"):
            alert_times.append(fr.time)
    events = stream.events
    if lab_period is not None:
        checks = np.arange(0.0, stream.duration, lab_period)
        events = [ev for ev in events
                  if np.any((checks >= ev.start) & (checks <= ev.end))]
    intervals = [(ev.start, ev.end) for ev in events]
    rates = field_rates(alert_times, intervals, matching_window=matching_window)
    return ReplayReport(rates, alert_times, len(stream.frames), len(events))
