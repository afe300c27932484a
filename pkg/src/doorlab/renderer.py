"""Egocentric RGB-D rendering in a clean "sim" or a noisy "real" style.

A column raycaster over the floor plan: every image column casts one ray,
every row turns the hit distance into a wall, floor or ceiling pixel. Depth is
z-depth along the optical axis in world units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import doorworld as dw

DOMAINS = ("sim", "real")

KIND_WALL, KIND_FRAME, KIND_DOOR = 0, 1, 2


@dataclass(frozen=True)
class RenderConfig:
    height: int = 64
    width: int = 64
    hfov: float = math.radians(90.0)
    camera_height: float = 1.2
    camera_forward: float = 0.1
    ceiling_height: float = 2.2
    depth_clip: float = 10.0
    glass_s: tuple = (0.25, 0.75)
    glass_z: tuple = (1.3, 1.9)
    trim_width: float = 0.06
    lights_off_gain: float = 0.55


@dataclass(frozen=True)
class FrameRef:
    scene_id: str
    episode_id: int
    step: int


@dataclass(frozen=True)
class Observation:
    rgb: np.ndarray
    depth: np.ndarray
    domain: str
    frame_ref: FrameRef

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (self.domain == other.domain and self.frame_ref == other.frame_ref
                and np.array_equal(self.rgb, other.rgb) and np.array_equal(self.depth, other.depth))

    __hash__ = None


@lru_cache(maxsize=8)
def _camera_grid(cfg: RenderConfig):
    f = (cfg.width / 2) / math.tan(cfg.hfov / 2)
    cols = np.arange(cfg.width)
    offsets = np.arctan((cfg.width / 2 - cols - 0.5) / f)
    slopes = (cfg.height / 2 - np.arange(cfg.height) - 0.5) / f
    return f, offsets, slopes


@lru_cache(maxsize=64)
def _static_segments(door_width: float, wcfg: dw.WorldConfig):
    half = door_width / 2
    L, chw, rhw, D, th = (wcfg.corridor_length, wcfg.corridor_half_width,
                          wcfg.room_half_width, wcfg.room_depth, wcfg.wall_thickness)
    segs = [
        ((-L, chw), (0.0, chw), KIND_WALL),
        ((-L, -chw), (0.0, -chw), KIND_WALL),
        ((-L, -chw), (-L, chw), KIND_WALL),
        ((0.0, half), (0.0, chw), KIND_WALL),
        ((0.0, -chw), (0.0, -half), KIND_WALL),
        ((0.0, half), (th, half), KIND_FRAME),
        ((0.0, -half), (th, -half), KIND_FRAME),
        ((th, half), (th, rhw), KIND_WALL),
        ((th, -rhw), (th, -half), KIND_WALL),
        ((th, rhw), (D, rhw), KIND_WALL),
        ((th, -rhw), (D, -rhw), KIND_WALL),
        ((D, -rhw), (D, rhw), KIND_WALL),
    ]
    a = np.array([s[0] for s in segs], dtype=np.float64)
    b = np.array([s[1] for s in segs], dtype=np.float64)
    kinds = np.array([s[2] for s in segs])
    return a, b, kinds


def _cast(origin, dirs, a, b):
    """Nearest ray/segment hit. Returns (t, segment index, param along segment)."""
    e = b - a
    ap = a - origin
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ap[None, :, 0] * e[None, :, 1] - ap[None, :, 1] * e[None, :, 0]) / denom
        s = (ap[None, :, 0] * dirs[:, 1:2] - ap[None, :, 1] * dirs[:, 0:1]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
    t = np.where(valid, t, np.inf)
    idx = np.argmin(t, axis=1)
    rows = np.arange(len(dirs))
    return t[rows, idx], idx, s[rows, idx]


def _texture(u, z, amp, phase):
    """Procedural grain pattern in [-amp, amp]."""
    return amp * (0.6 * np.sin(2 * np.pi * u / 0.37 + phase) * np.sin(2 * np.pi * z / 0.53 + 0.5 * phase)
                  + 0.4 * np.sin(2 * np.pi * (u + 0.7 * z) / 0.11 + 2.0 * phase))


def _noise_fields(noise_seed: int, cfg: RenderConfig):
    rng = np.random.default_rng([noise_seed, 0x5EED])
    rgb = rng.standard_normal((cfg.height, cfg.width, 3))
    depth = rng.standard_normal((cfg.height, cfg.width))
    glass = rng.random((cfg.height, cfg.width))
    return rgb, depth, glass


_noise_cache: dict = {}


def _noise(noise_seed, cfg):
    key = (noise_seed, cfg)
    hit = _noise_cache.get(key)
    if hit is None:
        if len(_noise_cache) > 256:
            _noise_cache.clear()
        hit = _noise_cache[key] = _noise_fields(noise_seed, cfg)
    return hit


def _layer(t, kind, cam_h, ceil_h, offsets, slopes):
    """Expand per-column hits into per-pixel depth, surface code and height.

    Surface codes: 0 wall, 1 frame, 2 door, 3 floor, 4 ceiling.
    """
    d_col = t * np.cos(offsets)
    z = cam_h + slopes[:, None] * d_col[None, :]
    code = np.broadcast_to(kind[None, :], z.shape).copy()
    depth = np.broadcast_to(d_col[None, :], z.shape).copy()
    below = z < 0.0
    above = z > ceil_h
    with np.errstate(divide="ignore"):
        d_floor = np.where(slopes < 0, cam_h / -slopes, np.inf)
        d_ceil = np.where(slopes > 0, (ceil_h - cam_h) / slopes, np.inf)
    depth = np.where(below, d_floor[:, None], depth)
    depth = np.where(above, d_ceil[:, None], depth)
    code[below] = 3
    code[above] = 4
    return depth, code, z


def render(state: dw.WorldState, scene: dw.SceneSpec, domain: str,
           config: RenderConfig = RenderConfig(), world_config: dw.WorldConfig = dw.WorldConfig(),
           episode_id=None) -> Observation:
    """Render one frame. Pure in (state, scene, domain, state.noise_seed)."""
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    real = domain == "real"
    style = scene.style_real if real else scene.style_sim
    pal = {k: np.asarray(v, dtype=np.float64) for k, v in style.palette.items()}
    cfg = config
    f, offsets, slopes = _camera_grid(cfg)
    r = state.robot
    cy, sy = math.cos(r.base_yaw), math.sin(r.base_yaw)
    cam = np.array([r.base_x + cfg.camera_forward * cy, r.base_y + cfg.camera_forward * sy])
    ang = r.base_yaw + offsets
    dirs = np.stack([np.cos(ang), np.sin(ang)], 1)

    # background: the world without the door panel
    a, b, kinds = _static_segments(scene.door_width, world_config)
    t_bg, i_bg, s_bg = _cast(cam, dirs, a, b)
    seg_len = np.linalg.norm(b - a, axis=1)
    u_bg = s_bg * seg_len[i_bg] + a[i_bg, 0] + a[i_bg, 1]
    hit_bg = cam[None, :] + t_bg[:, None] * dirs
    depth_bg, code_bg, z_bg = _layer(t_bg, kinds[i_bg], cfg.camera_height,
                                     cfg.ceiling_height, offsets, slopes)

    # door panel
    hinge, free = dw.door_panel(scene, state.door.open_angle)
    t_d, _, s_d = _cast(cam, dirs, np.array([hinge]), np.array([free]))
    door_col = t_d < t_bg
    t_d = np.where(door_col, t_d, t_bg)
    d_door = t_d * np.cos(offsets)
    z_door = cfg.camera_height + slopes[:, None] * d_door[None, :]
    door_px = door_col[None, :] & (z_door >= 0.0) & (z_door <= cfg.ceiling_height)
    s_door = np.broadcast_to((s_d * scene.door_width)[None, :], z_door.shape)

    H, W = cfg.height, cfg.width
    rgb = np.zeros((H, W, 3))
    # background colors
    trim = (code_bg == KIND_WALL) & (np.abs(hit_bg[None, :, 0]) < 1e-6) & \
        (np.abs(np.abs(hit_bg[None, :, 1]) - scene.door_width / 2) < cfg.trim_width)
    for code, key in ((KIND_WALL, "wall"), (KIND_FRAME, "frame"), (3, "floor")):
        rgb[code_bg == code] = pal[key]
    rgb[code_bg == 4] = 0.9 * pal["wall"]
    rgb[trim] = pal["frame"]

    glass = door_px & (s_door >= cfg.glass_s[0] * scene.door_width) & \
        (s_door <= cfg.glass_s[1] * scene.door_width) & \
        (z_door >= cfg.glass_z[0]) & (z_door <= cfg.glass_z[1])

    # handle lever drawn in panel coordinates
    s_h = scene.door_width - world_config.handle_offset
    ha = state.door.handle_angle
    lever = np.array([-math.cos(ha), -math.sin(ha)]) * 0.12
    ps, pz = s_door - s_h, z_door - scene.handle_height
    proj = np.clip((ps * lever[0] + pz * lever[1]) / (lever @ lever), 0.0, 1.0)
    dist = np.hypot(ps - proj * lever[0], pz - proj * lever[1])
    handle_px = door_px & ((dist < 0.025) | (np.hypot(ps, pz) < 0.035))

    if real:
        n_rgb, n_depth, n_glass = _noise(state.noise_seed, cfg)
        amp = style.texture_amplitude
        # world-anchored textures, one phase per surface family
        tex = np.zeros((H, W))
        u_pix = np.broadcast_to(u_bg[None, :], (H, W))
        wall_like = code_bg <= KIND_FRAME
        tex = np.where(wall_like, _texture(u_pix, z_bg, amp, 0.3), tex)
        fwd = depth_bg
        fx = cam[0] + fwd * (cy - sy * np.tan(offsets)[None, :])
        fy = cam[1] + fwd * (sy + cy * np.tan(offsets)[None, :])
        floor_tex = amp * 0.8 * np.sign(np.sin(2 * np.pi * fx / 0.5) * np.sin(2 * np.pi * fy / 0.5))
        tex = np.where(code_bg == 3, floor_tex, tex)
        rgb = rgb * (1.0 + tex[..., None])
        door_rgb = pal["door"][None, None, :] * (1.0 + _texture(s_door, z_door, amp, 1.7)[..., None])
        translucent = glass & (n_glass < scene.glass_translucency)
    else:
        door_rgb = np.broadcast_to(pal["door"], (H, W, 3))
        translucent = np.zeros((H, W), dtype=bool)

    depth = depth_bg.copy()
    opaque_door = door_px & ~translucent
    rgb[opaque_door] = door_rgb[opaque_door]
    glass_tint = 0.6 * pal["door"] + 0.4 * np.array([200.0, 220.0, 235.0])
    rgb[glass & ~translucent] = glass_tint
    if real:
        rgb[translucent] = 0.5 * rgb[translucent] + 0.5 * glass_tint
    depth = np.where(opaque_door, np.broadcast_to(d_door[None, :], (H, W)), depth)
    rgb[handle_px] = pal["handle"]
    depth = np.where(handle_px, np.maximum(depth - world_config.handle_protrusion, 0.0), depth)

    _draw_arm(rgb, depth, state, pal["arm"], cfg, world_config, f, cam)

    if real:
        gain = style.ambient_gain * scene.brightness * (1.0 if scene.lighting_on else cfg.lights_off_gain)
        rgb = rgb * gain + style.noise_sigma_rgb * n_rgb
        depth = depth + style.noise_sigma_depth * n_depth
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    depth = np.clip(np.nan_to_num(depth, nan=cfg.depth_clip, posinf=cfg.depth_clip),
                    0.0, cfg.depth_clip).astype(np.float32)
    ref = FrameRef(scene.scene_id, state.noise_seed if episode_id is None else episode_id, state.step)
    return Observation(rgb=rgb, depth=depth, domain=domain, frame_ref=ref)


def _draw_arm(rgb, depth, state, color, cfg, wcfg, f, cam):
    """Arm link and gripper as depth-tested discs projected into the image."""
    r = state.robot
    cy, sy = math.cos(r.base_yaw), math.sin(r.base_yaw)
    ee = dw.ee_position(r, wcfg)
    shoulder = np.array([r.base_x + wcfg.shoulder_forward * cy, r.base_y + wcfg.shoulder_forward * sy,
                         wcfg.shoulder_height])
    pts = [shoulder + (ee - shoulder) * k for k in np.linspace(0.35, 1.0, 10)]
    radii = [0.03] * len(pts)
    colors = [color] * len(pts)
    # wrist marker: a short bar whose image-plane angle follows the wrist
    w = dw.wrist_angle(r.arm_joints)
    left = np.array([-sy, cy, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    for k in (0.03, 0.06, 0.09):
        pts.append(ee + k * (math.cos(w) * left + math.sin(w) * up))
        radii.append(0.02)
        colors.append(0.45 * color + 0.55 * np.array([240.0, 240.0, 240.0]))
    H, W = cfg.height, cfg.width
    rows = np.arange(H)[:, None] + 0.5
    cols = np.arange(W)[None, :] + 0.5
    for p, rad, col in zip(pts, radii, colors):
        dx, dy = p[0] - cam[0], p[1] - cam[1]
        fwd = dx * cy + dy * sy
        if fwd < 0.05:
            continue
        lat = -dx * sy + dy * cy
        c = W / 2 - f * lat / fwd
        rr = H / 2 - f * (p[2] - cfg.camera_height) / fwd
        rad_px = max(f * rad / fwd, 0.7)
        if c < -rad_px or c > W + rad_px or rr < -rad_px or rr > H + rad_px:
            continue
        m = ((rows - rr) ** 2 + (cols - c) ** 2 <= rad_px ** 2) & (depth > fwd)
        rgb[m] = col
        depth[m] = fwd


def render_pair(state: dw.WorldState, scene: dw.SceneSpec, config: RenderConfig = RenderConfig(),
                world_config: dw.WorldConfig = dw.WorldConfig(), episode_id=None):
    sim = render(state, scene, "sim", config, world_config, episode_id)
    real = render(state, scene, "real", config, world_config, episode_id)
    return sim, real
