"""Kinematic latched-door world.

Frame convention: the door plane is ``x = 0`` and the room lies at ``x > 0``.
The robot starts in the corridor at ``x ~ -1`` facing ``+x``; ``+y`` is the
robot's left. A left-swing door is hinged on the ``+y`` jamb and pushed open
into the room.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import ConfigurationError, ContractViolation

SWINGS = ("left", "right")
FAILURE_REASONS = ("none", "collision", "timeout")
PALETTE_KEYS = ("door", "frame", "handle", "wall", "floor", "arm")


@dataclass(frozen=True)
class WorldConfig:
    arm_dof: int = 3
    dt: float = 0.1
    timeout_steps: int = 1200
    unlatch_threshold: float = math.radians(45.0)
    open_threshold: float = math.radians(70.0)
    ajar_angle: float = math.radians(10.0)     # a released latch lets the door swing this far
    handle_max: float = math.radians(60.0)
    grasp_radius: float = 0.12
    max_base_speed: float = 0.5
    max_yaw_rate: float = math.radians(40.0)
    max_joint_delta: float = math.radians(8.0)
    joint_limit: float = 1.4
    robot_half_length: float = 0.3
    robot_half_width: float = 0.25
    start_distance: float = 1.0
    shoulder_forward: float = 0.2
    shoulder_height: float = 0.8
    arm_reach: float = 0.6
    handle_offset: float = 0.1
    handle_protrusion: float = 0.06
    wall_thickness: float = 0.1
    doorway_cross_x: float = 0.35
    room_depth: float = 3.0
    room_half_width: float = 2.5
    corridor_length: float = 4.0
    corridor_half_width: float = 2.0
    gains: tuple = (("A", 1.0), ("B", 0.8))

    def __post_init__(self):
        if not 3 <= self.arm_dof <= 7:
            raise ConfigurationError(f"arm_dof must be in [3, 7], got {self.arm_dof}")

    def gain(self, variant: str) -> float:
        return dict(self.gains)[variant]


@dataclass(frozen=True)
class StyleParams:
    palette: dict
    texture_amplitude: float = 0.0
    noise_sigma_rgb: float = 0.0
    noise_sigma_depth: float = 0.0
    ambient_gain: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "StyleParams":
        pal = d["palette"]
        missing = [k for k in PALETTE_KEYS if k not in pal]
        if missing:
            raise ConfigurationError(f"palette missing colors: {missing}")
        return cls(
            palette={k: tuple(int(c) for c in pal[k]) for k in PALETTE_KEYS},
            texture_amplitude=float(d.get("texture_amplitude", 0.0)),
            noise_sigma_rgb=float(d.get("noise_sigma_rgb", 0.0)),
            noise_sigma_depth=float(d.get("noise_sigma_depth", 0.0)),
            ambient_gain=float(d.get("ambient_gain", 1.0)),
        )

    def to_dict(self) -> dict:
        return {
            "palette": {k: list(v) for k, v in self.palette.items()},
            "texture_amplitude": self.texture_amplitude,
            "noise_sigma_rgb": self.noise_sigma_rgb,
            "noise_sigma_depth": self.noise_sigma_depth,
            "ambient_gain": self.ambient_gain,
        }

    @property
    def is_clean(self) -> bool:
        return (self.texture_amplitude == 0.0 and self.noise_sigma_rgb == 0.0
                and self.noise_sigma_depth == 0.0)


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    swing: str
    handle_height: float
    door_width: float
    style_sim: StyleParams
    style_real: StyleParams
    lighting_on: bool
    brightness: float
    glass_translucency: float
    dynamics_variant: str
    split: str
    time_of_day: str = "noon"
    variant_b: Optional[dict] = field(default=None, compare=False, hash=False)

    @property
    def hinge_y(self) -> float:
        return self.door_width / 2 if self.swing == "left" else -self.door_width / 2

    @property
    def handle_y(self) -> float:
        # handle sits near the free (latch-side) edge
        free = -self.hinge_y
        return free - math.copysign(WorldConfig.handle_offset, free)

    @property
    def turn_sign(self) -> float:
        return 1.0 if self.swing == "left" else -1.0

    def under_variant(self, variant: str) -> "SceneSpec":
        """Conditions this door is evaluated under on the given robot variant."""
        if variant == self.dynamics_variant:
            return self
        if variant == "B" and self.variant_b is not None:
            b = self.variant_b
            return replace(self, dynamics_variant="B",
                           lighting_on=bool(b.get("lighting_on", self.lighting_on)),
                           brightness=float(b.get("brightness", self.brightness)),
                           time_of_day=b.get("time_of_day", self.time_of_day))
        return replace(self, dynamics_variant=variant)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            spec = cls(
                scene_id=str(d["scene_id"]),
                swing=d["swing"],
                handle_height=float(d["handle_height"]),
                door_width=float(d["door_width"]),
                style_sim=StyleParams.from_dict(d["style_sim"]),
                style_real=StyleParams.from_dict(d["style_real"]),
                lighting_on=bool(d["lighting_on"]),
                brightness=float(d["brightness"]),
                glass_translucency=float(d["glass_translucency"]),
                dynamics_variant=d.get("dynamics_variant", "A"),
                split=d["split"],
                time_of_day=d.get("time_of_day", "noon"),
                variant_b=d.get("variant_b"),
            )
        except KeyError as exc:
            raise ConfigurationError(f"scene record missing field {exc}") from None
        spec.validate()
        return spec

    def validate(self):
        if self.swing not in SWINGS:
            raise ConfigurationError(f"{self.scene_id}: swing must be left/right")
        if self.split not in ("train", "eval"):
            raise ConfigurationError(f"{self.scene_id}: split must be train/eval")
        if self.dynamics_variant not in ("A", "B"):
            raise ConfigurationError(f"{self.scene_id}: unknown dynamics variant")
        if not (0.0 <= self.brightness <= 1.0 and 0.0 <= self.glass_translucency <= 1.0):
            raise ConfigurationError(f"{self.scene_id}: brightness/translucency outside [0, 1]")
        if self.style_sim == self.style_real:
            raise ConfigurationError(f"{self.scene_id}: sim and real styles must differ")
        if not self.style_sim.is_clean:
            raise ConfigurationError(f"{self.scene_id}: sim style must be noiseless and flat")


def default_scene_file() -> Path:
    return Path(str(resources.files("doorlab") / "assets" / "scenes.yaml"))


def load_scenes(path=None) -> dict:
    """Read a scene registry file into ``{scene_id: SceneSpec}`` (file order kept)."""
    path = Path(path) if path is not None else default_scene_file()
    if not path.exists():
        raise ConfigurationError(f"scene file not found: {path}")
    with open(path) as f:
        doc = yaml.safe_load(f)
    scenes = {}
    for rec in doc.get("scenes", []):
        spec = SceneSpec.from_dict(rec)
        if spec.scene_id in scenes:
            raise ConfigurationError(f"duplicate scene id {spec.scene_id}")
        scenes[spec.scene_id] = spec
    return scenes


@lru_cache(maxsize=None)
def _default_registry():
    return load_scenes()


def registry() -> dict:
    return dict(_default_registry())


def get_scene(scene_id: str) -> SceneSpec:
    try:
        return _default_registry()[scene_id]
    except KeyError:
        raise ConfigurationError(f"unknown scene_id {scene_id!r}") from None


def scenes_by_split(split: str) -> list:
    return [s for s in _default_registry().values() if s.split == split]


@dataclass(frozen=True)
class RobotState:
    base_x: float
    base_y: float
    base_yaw: float
    arm_joints: tuple


@dataclass(frozen=True)
class DoorState:
    handle_angle: float = 0.0
    open_angle: float = 0.0
    latched: bool = True


@dataclass(frozen=True)
class WorldState:
    robot: RobotState
    door: DoorState
    step: int = 0
    failed: bool = False
    failure_reason: str = "none"
    # per-episode sensor noise seed, consumed by the renderer
    noise_seed: int = 0

    def to_vector(self) -> np.ndarray:
        r, d = self.robot, self.door
        head = [r.base_x, r.base_y, r.base_yaw, d.handle_angle, d.open_angle,
                float(d.latched), float(self.step), float(self.failed),
                float(FAILURE_REASONS.index(self.failure_reason)), float(self.noise_seed)]
        return np.array(head + list(r.arm_joints), dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "WorldState":
        v = [float(x) for x in v]
        return cls(
            robot=RobotState(v[0], v[1], v[2], tuple(v[10:])),
            door=DoorState(v[3], v[4], bool(v[5])),
            step=int(v[6]), failed=bool(v[7]),
            failure_reason=FAILURE_REASONS[int(v[8])], noise_seed=int(v[9]),
        )


@dataclass(frozen=True)
class Action:
    base: np.ndarray
    arm: np.ndarray
    terminate: bool = False

    @classmethod
    def zero(cls, arm_dof: int = 3, terminate: bool = False) -> "Action":
        return cls(np.zeros(2), np.zeros(arm_dof), terminate)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.base, float), np.asarray(self.arm, float),
                               [float(self.terminate)]])


def initial_arm(swing: str, arm_dof: int) -> tuple:
    # reach toward the latch side, which is opposite the hinge
    q = [-0.35 if swing == "left" else 0.35, -0.7, 0.0] + [0.0] * (arm_dof - 3)
    return tuple(q)


def reset(scene: SceneSpec, seed: int, config: WorldConfig = WorldConfig()) -> WorldState:
    if scene.scene_id not in _default_registry() and scene.scene_id not in _extra_scenes:
        raise ConfigurationError(f"unknown scene_id {scene.scene_id!r}")
    if seed < 0:
        raise ConfigurationError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    dx = rng.uniform(-0.25, 0.25)
    dy = rng.uniform(-0.1, 0.1)
    dpsi = math.radians(rng.uniform(-5.0, 5.0))
    robot = RobotState(-config.start_distance + dx, dy, dpsi,
                       initial_arm(scene.swing, config.arm_dof))
    return WorldState(robot=robot, door=DoorState(), noise_seed=int(seed))


_extra_scenes: set = set()


def register_scene(scene: SceneSpec):
    """Allow a scene outside the shipped registry (tests, custom layouts)."""
    scene.validate()
    _extra_scenes.add(scene.scene_id)


def wrist_angle(arm_joints) -> float:
    return float(sum(arm_joints[2:]))


def ee_position(robot: RobotState, config: WorldConfig = WorldConfig()) -> np.ndarray:
    """End-effector position in the world frame, ``(x, y, z)``."""
    q0, q1 = robot.arm_joints[0], robot.arm_joints[1]
    rho = config.arm_reach * math.cos(q1)
    fwd = config.shoulder_forward + rho * math.cos(q0)
    lat = rho * math.sin(q0)
    c, s = math.cos(robot.base_yaw), math.sin(robot.base_yaw)
    return np.array([robot.base_x + c * fwd - s * lat,
                     robot.base_y + s * fwd + c * lat,
                     config.shoulder_height + config.arm_reach * math.sin(q1)])


def handle_position(scene: SceneSpec, config: WorldConfig = WorldConfig()) -> np.ndarray:
    return np.array([-config.handle_protrusion, scene.handle_y, scene.handle_height])


def body_points(x: float, y: float, yaw: float, config: WorldConfig = WorldConfig()) -> np.ndarray:
    """Sample points on the robot footprint perimeter, world frame, shape (K, 2)."""
    hl, hw = config.robot_half_length, config.robot_half_width
    lat = np.linspace(-hw, hw, 7)
    lon = np.linspace(-hl, hl, 7)
    local = np.concatenate([
        np.stack([np.full_like(lat, hl), lat], 1),
        np.stack([lon, np.full_like(lon, hw)], 1),
        np.stack([lon, np.full_like(lon, -hw)], 1),
        np.stack([np.full_like(lat, -hl), lat], 1),
    ])
    c, s = math.cos(yaw), math.sin(yaw)
    return np.stack([x + c * local[:, 0] - s * local[:, 1],
                     y + s * local[:, 0] + c * local[:, 1]], 1)


def door_panel(scene: SceneSpec, open_angle: float) -> tuple:
    """Hinge and free-edge points of the door panel in the floor plane."""
    yh = scene.hinge_y
    direction = -math.copysign(1.0, yh)
    hinge = (0.0, yh)
    free = (scene.door_width * math.sin(open_angle),
            yh + direction * scene.door_width * math.cos(open_angle))
    return hinge, free


def _push_angle(px: float, py: float, scene: SceneSpec) -> Optional[float]:
    """Door angle needed to clear a point in the room, or None if out of sweep."""
    yh = scene.hinge_y
    along = math.copysign(1.0, yh) * (yh - py)
    if along < 0 or math.hypot(px, along) > scene.door_width:
        return None
    return math.atan2(px, along)


def is_terminal(state: WorldState, config: WorldConfig = WorldConfig()) -> bool:
    return state.failed or state.step >= config.timeout_steps


def step(state: WorldState, action: Action, scene: SceneSpec,
         config: WorldConfig = WorldConfig()) -> WorldState:
    """Advance one control period. Pure: the input state is never modified."""
    if is_terminal(state, config):
        raise ContractViolation("cannot step a terminal state")
    base = np.asarray(action.base, dtype=np.float64)
    arm = np.asarray(action.arm, dtype=np.float64)
    if base.shape != (2,) or arm.shape != (config.arm_dof,):
        raise ContractViolation(
            f"action dims base{base.shape} arm{arm.shape}, expected (2,) and ({config.arm_dof},)")
    v = float(np.clip(base[0], -config.max_base_speed, config.max_base_speed))
    w = float(np.clip(base[1], -config.max_yaw_rate, config.max_yaw_rate))
    dq = np.clip(arm, -config.max_joint_delta, config.max_joint_delta)

    g = config.gain(scene.dynamics_variant)
    r = state.robot
    yaw = r.base_yaw + g * w * config.dt
    x = r.base_x + g * v * config.dt * math.cos(yaw)
    y = r.base_y + g * v * config.dt * math.sin(yaw)
    q = np.clip(np.asarray(r.arm_joints) + g * dq, -config.joint_limit, config.joint_limit)
    robot = RobotState(x, y, yaw, tuple(float(a) for a in q))

    door = state.door
    handle, opened, latched = door.handle_angle, door.open_angle, door.latched
    ee = ee_position(robot, config)
    if latched and np.linalg.norm(ee - handle_position(scene, config)) <= config.grasp_radius:
        turn = wrist_angle(robot.arm_joints) - wrist_angle(r.arm_joints)
        handle = float(np.clip(handle + scene.turn_sign * turn, 0.0, config.handle_max))
        if handle >= config.unlatch_threshold:
            latched = False
            opened = max(opened, config.ajar_angle)

    failed, reason = False, "none"
    half_door = scene.door_width / 2
    for px, py in body_points(x, y, yaw, config):
        if px < 0:
            if px < -config.corridor_length or abs(py) > config.corridor_half_width:
                failed = True
            continue
        if px > config.room_depth or abs(py) > config.room_half_width:
            failed = True
        elif px <= config.wall_thickness and abs(py) >= half_door:
            failed = True
        elif latched and abs(py) < half_door:
            failed = True
        elif not latched:
            need = _push_angle(px, py, scene)
            if need is not None:
                opened = max(opened, need)
    if not latched and ee[0] > 0:
        need = _push_angle(ee[0], ee[1], scene)
        if need is not None:
            opened = max(opened, need)
    opened = min(opened, math.pi / 2)
    if failed:
        reason = "collision"

    n = state.step + 1
    if not failed and n >= config.timeout_steps:
        failed, reason = True, "timeout"
    return WorldState(robot=robot, door=DoorState(handle, opened, latched), step=n,
                      failed=failed, failure_reason=reason, noise_seed=state.noise_seed)


def is_success(state: WorldState, scene: SceneSpec, config: WorldConfig = WorldConfig()) -> bool:
    return (not state.failed and state.door.open_angle >= config.open_threshold
            and state.robot.base_x >= config.doorway_cross_x)
