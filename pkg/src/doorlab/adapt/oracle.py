"""Perfect domain translation by re-rendering the recorded world state."""
from __future__ import annotations

from dataclasses import dataclass

from .. import doorworld as dw
from ..errors import ContractViolation, ProvenanceError
from ..expert import run_expert
from ..renderer import FrameRef, Observation, RenderConfig, render

DIRECTIONS = {"sim2real": ("sim", "real"), "real2sim": ("real", "sim")}


class ReplayResolver:
    """Resolve a frame reference by replaying the seeded expert episode.

    Episodes are collected on robot variant A, so the replay uses the same.
    """

    def __init__(self, config: dw.WorldConfig = dw.WorldConfig(), scenes: dict | None = None):
        self.config = config
        self.scenes = scenes
        self._cache: dict = {}

    def _scene(self, scene_id):
        if self.scenes is not None:
            if scene_id not in self.scenes:
                raise ProvenanceError(f"unknown scene {scene_id!r}")
            return self.scenes[scene_id]
        try:
            return dw.get_scene(scene_id)
        except Exception:
            raise ProvenanceError(f"unknown scene {scene_id!r}") from None

    def __call__(self, ref: FrameRef):
        scene = self._scene(ref.scene_id).under_variant("A")
        key = (ref.scene_id, ref.episode_id)
        states = self._cache.get(key)
        if states is None:
            try:
                states = run_expert(scene, int(ref.episode_id), self.config).states
            except Exception as exc:
                raise ProvenanceError(f"cannot replay {ref}: {exc}") from None
            if len(self._cache) > 512:
                self._cache.clear()
            self._cache[key] = states
        if not 0 <= ref.step < len(states):
            raise ProvenanceError(f"{ref} is past the end of its episode ({len(states)} frames)")
        return states[ref.step], scene


class TableResolver:
    """Resolve frame references from recorded states (e.g. a loaded dataset)."""

    def __init__(self, entries: dict, scenes: dict | None = None):
        self.entries = entries
        self.scenes = scenes

    @classmethod
    def from_dataset(cls, dataset):
        table = {}
        for i, st in enumerate(dataset.states):
            h = dataset.headers[dataset.episode[i]]
            table[dataset.frame_ref(i)] = (st, h.dynamics_variant)
        return cls(table)

    def __call__(self, ref: FrameRef):
        try:
            st, variant = self.entries[ref]
        except KeyError:
            raise ProvenanceError(f"no recorded state for {ref}") from None
        scene = (self.scenes or dw.registry())[ref.scene_id].under_variant(variant)
        return st, scene


@dataclass(frozen=True)
class DomainAdapter:
    direction: str
    modality: str
    kind: str = "oracle"
    weights_ref: str | None = None


_default_resolver = None


def adapt_oracle(obs: Observation, direction: str, resolver=None,
                 render_config: RenderConfig = RenderConfig(),
                 world_config: dw.WorldConfig = dw.WorldConfig()) -> Observation:
    """Render the observation's exact world state in the other domain."""
    global _default_resolver
    if direction not in DIRECTIONS:
        raise ContractViolation(f"unknown direction {direction!r}")
    src, dst = DIRECTIONS[direction]
    if obs.domain != src:
        raise ContractViolation(f"{direction} adapter given a {obs.domain} observation")
    if obs.frame_ref is None:
        raise ProvenanceError("observation carries no frame reference")
    if resolver is None:
        if _default_resolver is None:
            _default_resolver = ReplayResolver(world_config)
        resolver = _default_resolver
    state, scene = resolver(obs.frame_ref)
    out = render(state, scene, dst, render_config, world_config, episode_id=obs.frame_ref.episode_id)
    return Observation(out.rgb, out.depth, dst, obs.frame_ref)
