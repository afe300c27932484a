"""Episode files, dataset manifests, and lookahead-labelled batch sampling.

Episode file layout (little endian)::

    magic "DLEP" | u16 schema_version | u32 header_len | header JSON
    then `length` records, each:  u32 payload_len | u32 crc32 | payload
    payload = rgb u8[H*W*3] | depth f32[H*W] | action f64[2+dof+1] | state f64[S]

Actions stored in records are raw (physical units). Labels produced by the
sampler are normalized by the world's action limits so every head trains on
values in [-1, 1].
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import doorworld as dw
from .errors import ConfigurationError, FormatError
from .renderer import FrameRef, Observation, RenderConfig, render

MAGIC = b"DLEP"
SCHEMA_VERSION = 1
LOOKAHEAD = 10
_PRE = struct.Struct("<4sHI")
_REC = struct.Struct("<II")


@dataclass
class EpisodeHeader:
    scene_id: str
    domain: str
    seed: int
    dynamics_variant: str
    length: int
    height: int = 64
    width: int = 64
    arm_dof: int = 3


@dataclass
class Episode:
    header: EpisodeHeader
    frames: list                      # [(Observation, Action)]
    states: list = field(default_factory=list)   # WorldState per frame
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.header.length != len(self.frames):
            raise ConfigurationError("header length does not match frame count")

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        if self.header != other.header or self.schema_version != other.schema_version:
            return False
        for (o1, a1), (o2, a2) in zip(self.frames, other.frames):
            if o1 != o2 or not np.array_equal(a1.as_vector(), a2.as_vector()):
                return False
        return self.states == other.states


def build_episode(roll, scene: dw.SceneSpec, domain: str, seed: int,
                  config: dw.WorldConfig = dw.WorldConfig(),
                  render_config: RenderConfig | None = None) -> Episode:
    rc = render_config or RenderConfig()
    frames = [(render(s, scene, domain, rc, config, episode_id=seed), a)
              for s, a in zip(roll.states, roll.actions)]
    header = EpisodeHeader(scene.scene_id, domain, int(seed), scene.dynamics_variant,
                           len(frames), rc.height, rc.width, config.arm_dof)
    return Episode(header, frames, list(roll.states))


def write_episode(e: Episode, path) -> None:
    path = Path(path)
    hdr = json.dumps(e.header.__dict__, sort_keys=True).encode()
    chunks = [_PRE.pack(MAGIC, e.schema_version, len(hdr)), hdr]
    for (obs, act), st in zip(e.frames, e.states or [None] * len(e.frames)):
        state_vec = st.to_vector() if st is not None else np.zeros(0)
        payload = b"".join([
            np.ascontiguousarray(obs.rgb, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(obs.depth, dtype="<f4").tobytes(),
            np.asarray(act.as_vector(), dtype="<f8").tobytes(),
            np.asarray(state_vec, dtype="<f8").tobytes(),
        ])
        chunks.append(_REC.pack(len(payload), zlib.crc32(payload)))
        chunks.append(payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    tmp.replace(path)


def read_episode(path, load_depth: bool = True, load_rgb: bool = True) -> Episode:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PRE.size:
        raise FormatError(f"{path}: truncated preamble", 0)
    magic, version, hlen = _PRE.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != SCHEMA_VERSION:
        raise FormatError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}", 4)
    off = _PRE.size
    if off + hlen > len(data):
        raise FormatError(f"{path}: truncated header", off)
    try:
        header = EpisodeHeader(**json.loads(data[off:off + hlen]))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})", off) from None
    off += hlen
    H, W, dof = header.height, header.width, header.arm_dof
    n_rgb, n_depth, n_act = H * W * 3, H * W * 4, (dof + 3) * 8
    frames, states = [], []
    for i in range(header.length):
        if off + _REC.size > len(data):
            raise FormatError(f"{path}: truncated at record {i}", off)
        plen, crc = _REC.unpack_from(data, off)
        start = off + _REC.size
        payload = data[start:start + plen]
        if len(payload) != plen:
            raise FormatError(f"{path}: truncated record {i}", off)
        if zlib.crc32(payload) != crc:
            raise FormatError(f"{path}: checksum mismatch in record {i}", off)
        n_state = plen - n_rgb - n_depth - n_act
        if n_state < 0 or n_state % 8:
            raise FormatError(f"{path}: record {i} has inconsistent size {plen}", off)
        rgb = (np.frombuffer(payload, np.uint8, n_rgb).reshape(H, W, 3).copy()
               if load_rgb else None)
        depth = (np.frombuffer(payload, "<f4", H * W, n_rgb).reshape(H, W).astype(np.float32)
                 if load_depth else None)
        act = np.frombuffer(payload, "<f8", dof + 3, n_rgb + n_depth)
        obs = Observation(rgb, depth, header.domain, FrameRef(header.scene_id, header.seed, i))
        frames.append((obs, dw.Action(act[:2].copy(), act[2:2 + dof].copy(), bool(act[-1] > 0.5))))
        if n_state:
            states.append(dw.WorldState.from_vector(
                np.frombuffer(payload, "<f8", n_state // 8, n_rgb + n_depth + n_act)))
        off = start + plen
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes", off)
    return Episode(header, frames, states)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(entries: list, path, extra: dict | None = None) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "episodes": entries}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    for ent in doc["episodes"]:
        p = Path(ent["path"])
        if not p.is_absolute():
            ent["path"] = str(path.parent / p)
    return doc


def save_episodes(episodes: list, out_dir, prefix: str = "ep") -> Path:
    """Write episodes plus a manifest into ``out_dir``; return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(episodes):
        name = f"{prefix}_{e.header.domain}_{e.header.scene_id}_{i:05d}.dlep"
        write_episode(e, out_dir / name)
        entries.append({"path": name, "domain": e.header.domain, "scene_id": e.header.scene_id,
                        "seed": e.header.seed, "length": e.header.length,
                        "sha256": file_digest(out_dir / name)})
    manifest = out_dir / "manifest.json"
    write_manifest(entries, manifest)
    return manifest


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


@dataclass
class DemoLabel:
    arm: np.ndarray        # (LOOKAHEAD, arm_dof)
    base: np.ndarray       # (LOOKAHEAD, 2)
    terminate: np.ndarray  # (LOOKAHEAD,)


def action_scale(config: dw.WorldConfig = dw.WorldConfig()) -> tuple:
    base = np.array([config.max_base_speed, config.max_yaw_rate])
    arm = np.full(config.arm_dof, config.max_joint_delta)
    return base, arm


def episode_labels(actions: list, config: dw.WorldConfig = dw.WorldConfig()) -> dict:
    """Lookahead labels for every frame of one episode.

    Row k of frame t carries the action at t+k; rows at or past the final
    (terminate) frame are padding: zero motion with terminate=1.
    """
    n = len(actions)
    bs, as_ = action_scale(config)
    base = np.stack([np.asarray(a.base, float) for a in actions]) / bs
    arm = np.stack([np.asarray(a.arm, float) for a in actions]) / as_
    base = np.concatenate([base[:-1], np.zeros((LOOKAHEAD, 2))])
    arm = np.concatenate([arm[:-1], np.zeros((LOOKAHEAD, arm.shape[1]))])
    term = np.concatenate([np.zeros(n - 1), np.ones(LOOKAHEAD)])
    idx = np.arange(n)[:, None] + np.arange(LOOKAHEAD)[None, :]
    return {"arm": arm[idx].astype(np.float32), "base": base[idx].astype(np.float32),
            "terminate": term[idx].astype(np.float32)}


DOMAIN_CODE = {"sim": 0, "real": 1, "adapted": 2}   # adapted: sim frames translated to real style


class Dataset:
    """All frames of a set of episodes, stacked into flat arrays.

    ``domain`` tags the origin of every frame; ``states`` keeps the world state
    so frames can be re-rendered in the other domain.
    """

    def __init__(self, episodes: list, modalities=("rgb", "depth"),
                 config: dw.WorldConfig = dw.WorldConfig()):
        if not episodes:
            raise ConfigurationError("dataset has no episodes")
        self.config = config
        self.headers = [e.header for e in episodes]
        lengths = [e.header.length for e in episodes]
        self.rgb = (np.stack([o.rgb for e in episodes for o, _ in e.frames])
                    if "rgb" in modalities else None)
        self.depth = (np.stack([o.depth for e in episodes for o, _ in e.frames])
                      if "depth" in modalities else None)
        labels = [episode_labels([a for _, a in e.frames], config) for e in episodes]
        self.labels = {k: np.concatenate([lb[k] for lb in labels]) for k in ("arm", "base", "terminate")}
        self.episode = np.repeat(np.arange(len(episodes)), lengths).astype(np.int32)
        self.step = np.concatenate([np.arange(n) for n in lengths]).astype(np.int32)
        self.domain = np.repeat([DOMAIN_CODE[e.header.domain] for e in episodes], lengths).astype(np.int8)
        self.states = [s for e in episodes for s in e.states]

    @classmethod
    def from_manifest(cls, manifest, modalities=("rgb", "depth"), config=dw.WorldConfig()):
        doc = read_manifest(manifest)
        eps = [read_episode(ent["path"], load_depth="depth" in modalities,
                            load_rgb="rgb" in modalities) for ent in doc["episodes"]]
        return cls(eps, modalities, config)

    def __len__(self):
        return len(self.episode)

    @property
    def num_episodes(self):
        return len(self.headers)

    def composition(self) -> dict:
        return {d: int((self.domain == c).sum()) for d, c in DOMAIN_CODE.items()}

    def frame_domain(self, i: int) -> str:
        """Rendering style of frame ``i``; adapted frames look real."""
        return "sim" if self.domain[i] == 0 else "real"

    @classmethod
    def concat(cls, datasets: list) -> "Dataset":
        """Merge datasets loaded with the same modalities into one."""
        datasets = list(datasets)
        if not datasets:
            raise ConfigurationError("nothing to concatenate")
        if len({(d.rgb is None, d.depth is None) for d in datasets}) != 1:
            raise ConfigurationError("datasets were loaded with different modalities")
        out = object.__new__(cls)
        out.config = datasets[0].config
        out.headers = [h for d in datasets for h in d.headers]
        cat = lambda xs: None if xs[0] is None else np.concatenate(xs)
        out.rgb = cat([d.rgb for d in datasets])
        out.depth = cat([d.depth for d in datasets])
        out.labels = {k: np.concatenate([d.labels[k] for d in datasets]) for k in datasets[0].labels}
        offsets = np.cumsum([0] + [d.num_episodes for d in datasets[:-1]])
        out.episode = np.concatenate([d.episode + o for d, o in zip(datasets, offsets)]).astype(np.int32)
        out.step = np.concatenate([d.step for d in datasets])
        out.domain = np.concatenate([d.domain for d in datasets])
        out.states = [s for d in datasets for s in d.states]
        return out

    def with_adapted(self, source_idx, rgb=None, depth=None) -> "Dataset":
        """Copy of the dataset with translated versions of ``source_idx`` appended.

        Appended frames keep the labels, states and provenance of their
        sources and are tagged ``adapted``.
        """
        idx = np.asarray(source_idx, dtype=np.int64)
        for name, extra in (("rgb", rgb), ("depth", depth)):
            have = getattr(self, name) is not None
            if have != (extra is not None) or (have and len(extra) != len(idx)):
                raise ConfigurationError(f"adapted {name} frames do not match the sources")
        out = object.__new__(Dataset)
        out.config, out.headers = self.config, self.headers
        out.rgb = np.concatenate([self.rgb, rgb]) if rgb is not None else None
        out.depth = np.concatenate([self.depth, depth]) if depth is not None else None
        out.labels = {k: np.concatenate([v, v[idx]]) for k, v in self.labels.items()}
        out.episode = np.concatenate([self.episode, self.episode[idx]])
        out.step = np.concatenate([self.step, self.step[idx]])
        out.domain = np.concatenate([self.domain, np.full(len(idx), DOMAIN_CODE["adapted"], np.int8)])
        out.states = self.states + [self.states[i] for i in idx]
        return out

    def frame_ref(self, i: int) -> FrameRef:
        h = self.headers[self.episode[i]]
        return FrameRef(h.scene_id, h.seed, int(self.step[i]))

    def observation(self, i: int) -> Observation:
        return Observation(self.rgb[i] if self.rgb is not None else None,
                           self.depth[i] if self.depth is not None else None,
                           self.frame_domain(i), self.frame_ref(i))

    def label(self, i: int) -> DemoLabel:
        return DemoLabel(self.labels["arm"][i], self.labels["base"][i], self.labels["terminate"][i])


def split_episodes(episodes: list, val_fraction: float = 0.1, seed: int = 0):
    """Seeded per-episode train/validation split."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(episodes))
    n_val = int(round(val_fraction * len(episodes)))
    val = set(order[:n_val].tolist())
    return ([e for i, e in enumerate(episodes) if i not in val],
            [e for i, e in enumerate(episodes) if i in val])


class FrameSampler:
    """Seeded epoch-shuffled stream of frame indices."""

    def __init__(self, num_frames: int, batch_size: int, seed: int):
        if num_frames <= 0:
            raise ConfigurationError("cannot sample from an empty dataset")
        self.n, self.batch_size = num_frames, batch_size
        self.rng = np.random.default_rng(seed)
        self._perm = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._perm) < self.batch_size:
            self._perm = np.concatenate([self._perm, self.rng.permutation(self.n)])
        out, self._perm = self._perm[:self.batch_size], self._perm[self.batch_size:]
        return out


def sample_batch(dataset: Dataset, batch_size: int, seed: int) -> list:
    if dataset is None or len(dataset) == 0:
        raise ConfigurationError("cannot sample from an empty dataset")
    idx = FrameSampler(len(dataset), batch_size, seed).next()
    return [(dataset.observation(i), dataset.label(i)) for i in idx]
