"""Synthetic BEV scenes: births, deaths, constant-velocity motion, occlusion.

Motion model: each object has a nominal constant-velocity path and every frame
reports that path plus independent Gaussian jitter (the jitter does not
accumulate). Objects whose reported center leaves the square arena die.

Initial objects spawn in the inner half of the arena heading roughly toward
the center, with speed capped so their nominal path cannot reach the arena
edge within the scene; births spawn anywhere with a uniform heading and may
exit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .rng import SAMPLER_STREAM, substream

# Per-class nominal (length, width) in meters; classes beyond the table reuse it cyclically.
_CLASS_DIMS = (
    (4.6, 1.9),  # car
    (10.5, 2.9),  # truck
    (11.0, 2.9),  # bus
    (12.0, 2.9),  # trailer
    (2.2, 0.8),  # motorcycle
    (1.8, 0.6),  # bicycle
    (0.8, 0.7),  # pedestrian
)


def wrap_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    # float rounding can land exactly on +pi
    return -math.pi if w >= math.pi else w


@dataclass(frozen=True)
class BoxBEV:
    cx: float
    cy: float
    length: float
    width: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ParameterError(f"box extents must be positive, got {self.length}x{self.width}")
        if not (-math.pi <= self.yaw < math.pi):
            object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def center_distance(self, other: "BoxBEV") -> float:
        return math.hypot(self.cx - other.cx, self.cy - other.cy)


@dataclass(frozen=True)
class GtObject:
    track_id: int
    class_id: int
    box: BoxBEV
    velocity: tuple[float, float] = (0.0, 0.0)
    visible: bool = True


@dataclass(frozen=True)
class Frame:
    index: int
    timestamp_s: float
    objects: tuple[GtObject, ...] = ()

    def by_track_id(self) -> dict[int, GtObject]:
        return {o.track_id: o for o in self.objects}


@dataclass(frozen=True)
class ScenarioParams:
    num_frames: int = 40
    frame_rate_hz: float = 2.0
    initial_objects: int = 4
    birth_rate: float = 0.2
    death_prob: float = 0.02
    occlusion_prob: float = 0.05
    occlusion_mean_len: float = 2.0
    arena_half_extent: float = 20.0
    speed_range: tuple[float, float] = (0.0, 1.5)
    motion_noise_std: float = 0.05
    num_classes: int = 7
    class_weights: tuple[float, ...] | None = None

    def validate(self) -> None:
        def bad(name, why):
            raise ParameterError(f"ScenarioParams.{name}: {why}")

        if int(self.num_frames) < 1:
            bad("num_frames", "must be >= 1")
        if not self.frame_rate_hz > 0:
            bad("frame_rate_hz", "must be > 0")
        if int(self.initial_objects) < 0:
            bad("initial_objects", "must be >= 0")
        if not self.birth_rate >= 0:
            bad("birth_rate", "must be >= 0")
        for name in ("death_prob", "occlusion_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                bad(name, f"probability {p} outside [0, 1]")
        if not self.occlusion_mean_len >= 1.0:
            bad("occlusion_mean_len", "must be >= 1 frame")
        if not self.arena_half_extent > 0:
            bad("arena_half_extent", "must be > 0")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            bad("speed_range", f"need 0 <= lo <= hi, got {self.speed_range}")
        if not self.motion_noise_std >= 0:
            bad("motion_noise_std", "must be >= 0")
        if int(self.num_classes) < 1:
            bad("num_classes", "must be >= 1")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.shape != (self.num_classes,) or np.any(w < 0) or w.sum() <= 0:
                bad("class_weights", "need num_classes non-negative weights with positive sum")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioParams":
        d = dict(d)
        if "speed_range" in d:
            d["speed_range"] = tuple(d["speed_range"])
        if d.get("class_weights") is not None:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    scene_id: int
    seed: int
    params: ScenarioParams
    frames: tuple[Frame, ...]

    @property
    def track_ids(self) -> set[int]:
        return {o.track_id for f in self.frames for o in f.objects}

    def birth_frames(self) -> dict[int, int]:
        """track_id -> index of the first frame the object appears in."""
        out: dict[int, int] = {}
        for f in self.frames:
            for o in f.objects:
                out.setdefault(o.track_id, f.index)
        return out


@dataclass(frozen=True)
class Clip:
    scene_id: int
    frame_range: tuple[int, int]
    class_set: frozenset[int] = field(default_factory=frozenset)

    def __len__(self):
        return self.frame_range[1] - self.frame_range[0]


@dataclass
class _Agent:
    track_id: int
    class_id: int
    origin: np.ndarray
    velocity: np.ndarray
    birth: int
    dims: tuple[float, float]
    occluded_left: int = 0


def _max_inside_speed(p, heading, reach, duration):
    """Largest speed keeping p + speed*duration*u inside [-reach, reach]^2."""
    if duration <= 0:
        return math.inf
    u = (math.cos(heading), math.sin(heading))
    t = math.inf
    for pi, ui in zip(p, u):
        if ui > 1e-12:
            t = min(t, (reach - pi) / ui)
        elif ui < -1e-12:
            t = min(t, (-reach - pi) / ui)
    return max(t, 0.0) / duration


def generate_scenario(params: ScenarioParams, seed: int, scene_id: int = 0) -> Scene:
    """Simulate one scene; a deterministic function of (params, seed, scene_id)."""
    params.validate()
    rng = substream(seed, scene_id)
    h = float(params.arena_half_extent)
    dt = 1.0 / params.frame_rate_hz
    lo, hi = params.speed_range
    sigma = params.motion_noise_std
    if params.class_weights is None:
        cw = np.full(params.num_classes, 1.0 / params.num_classes)
    else:
        cw = np.asarray(params.class_weights, dtype=float)
        cw = cw / cw.sum()

    next_id = 0
    agents: list[_Agent] = []

    def spawn(frame_idx: int, initial: bool) -> None:
        nonlocal next_id
        cls = int(rng.choice(params.num_classes, p=cw))
        base = _CLASS_DIMS[cls % len(_CLASS_DIMS)]
        dims = (base[0] * float(rng.uniform(0.9, 1.1)), base[1] * float(rng.uniform(0.9, 1.1)))
        speed = float(rng.uniform(lo, hi))
        if initial:
            p = rng.uniform(-0.5 * h, 0.5 * h, size=2)
            heading = math.atan2(-p[1], -p[0]) + float(rng.uniform(-math.pi / 4, math.pi / 4))
            reach = max(h - 10.0 * sigma - 1e-6, 0.0)
            speed = min(speed, _max_inside_speed(p, heading, reach, (params.num_frames - 1) * dt))
        else:
            p = rng.uniform(-h, h, size=2)
            heading = float(rng.uniform(-math.pi, math.pi))
        vel = speed * np.array([math.cos(heading), math.sin(heading)])
        agents.append(_Agent(next_id, cls, p, vel, frame_idx, dims))
        next_id += 1

    frames: list[Frame] = []
    for t in range(params.num_frames):
        if t == 0:
            for _ in range(params.initial_objects):
                spawn(0, initial=True)
        else:
            survivors = []
            for a in agents:
                if rng.random() < params.death_prob:
                    continue
                survivors.append(a)
            agents = survivors
        for _ in range(int(rng.poisson(params.birth_rate))):
            spawn(t, initial=False)

        objects = []
        survivors = []
        for a in agents:
            center = a.origin + a.velocity * (t - a.birth) * dt
            if sigma > 0:
                center = center + rng.normal(0.0, sigma, size=2)
            if abs(center[0]) > h or abs(center[1]) > h:
                continue  # left the arena: dead from here on
            if a.occluded_left > 0:
                visible = False
                a.occluded_left -= 1
            elif params.occlusion_prob > 0 and rng.random() < params.occlusion_prob:
                visible = False
                a.occluded_left = int(rng.geometric(1.0 / params.occlusion_mean_len)) - 1
            else:
                visible = True
            survivors.append(a)
            objects.append(_as_gt(a, center, visible))
        agents = survivors
        frames.append(Frame(index=t, timestamp_s=t / params.frame_rate_hz, objects=tuple(objects)))

    return Scene(scene_id=scene_id, seed=seed, params=params, frames=tuple(frames))


def _as_gt(a: _Agent, center, visible: bool) -> GtObject:
    yaw = math.atan2(a.velocity[1], a.velocity[0]) if np.any(a.velocity) else 0.0
    return GtObject(
        track_id=a.track_id,
        class_id=a.class_id,
        box=BoxBEV(float(center[0]), float(center[1]), a.dims[0], a.dims[1], wrap_angle(yaw)),
        velocity=(float(a.velocity[0]), float(a.velocity[1])),
        visible=visible,
    )


def split_clips(scene: Scene, max_clip_len: int = 10) -> list[Clip]:
    """Cut the scene into consecutive clips of ``max_clip_len`` frames (last may be shorter)."""
    if max_clip_len < 2:
        raise ParameterError(f"max_clip_len must be >= 2, got {max_clip_len}")
    n = len(scene.frames)
    clips = []
    for start in range(0, n, max_clip_len):
        end = min(start + max_clip_len, n)
        classes = frozenset(o.class_id for f in scene.frames[start:end] for o in f.objects)
        clips.append(Clip(scene.scene_id, (start, end), classes))
    return clips


def class_balanced_clip_sampler(clips: Sequence[Clip], num_samples: int, seed: int) -> list[Clip]:
    """Draw clips with replacement: a class uniformly among present classes, then a clip holding it.

    Clips with an empty class set can never be drawn unless no clip has any class,
    in which case sampling falls back to uniform over clips.
    """
    if not clips:
        raise ParameterError("class_balanced_clip_sampler needs at least one clip")
    if num_samples < 1:
        raise ParameterError(f"num_samples must be >= 1, got {num_samples}")
    rng = substream(seed, SAMPLER_STREAM)
    classes = sorted(set().union(*(c.class_set for c in clips)))
    if not classes:
        return [clips[int(i)] for i in rng.integers(0, len(clips), size=num_samples)]
    holders = {k: [i for i, c in enumerate(clips) if k in c.class_set] for k in classes}
    out = []
    for _ in range(num_samples):
        k = classes[int(rng.integers(len(classes)))]
        members = holders[k]
        out.append(clips[members[int(rng.integers(len(members)))]])
    return out


# --- serialization -------------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    params = asdict(scene.params)
    params["speed_range"] = list(params["speed_range"])
    if params["class_weights"] is not None:
        params["class_weights"] = list(params["class_weights"])
    return {
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "params": params,
        "frames": [
            {
                "index": f.index,
                "objects": [
                    {
                        "track_id": o.track_id,
                        "class_id": o.class_id,
                        "cx": o.box.cx,
                        "cy": o.box.cy,
                        "length": o.box.length,
                        "width": o.box.width,
                        "yaw": o.box.yaw,
                        "vx": o.velocity[0],
                        "vy": o.velocity[1],
                        "visible": o.visible,
                    }
                    for o in f.objects
                ],
            }
            for f in scene.frames
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    params = ScenarioParams.from_dict(d["params"])
    frames = []
    for fd in d["frames"]:
        objs = tuple(
            GtObject(
                track_id=int(o["track_id"]),
                class_id=int(o["class_id"]),
                box=BoxBEV(o["cx"], o["cy"], o["length"], o["width"], o["yaw"]),
                velocity=(o["vx"], o["vy"]),
                visible=bool(o["visible"]),
            )
            for o in fd["objects"]
        )
        idx = int(fd["index"])
        frames.append(Frame(idx, idx / params.frame_rate_hz, objs))
    return Scene(int(d["scene_id"]), int(d["seed"]), params, tuple(frames))


def dumps_scene(scene: Scene) -> str:
    # json uses repr() for floats: shortest round-tripping form, up to 17 significant digits
    return json.dumps(scene_to_dict(scene), sort_keys=False, separators=(",", ":"))


def loads_scene(text: str) -> Scene:
    return scene_from_dict(json.loads(text))
