"""Behavior-cloning network and its inference-time controller.

Per-modality residual encoders produce unit-norm embeddings. In RGB-D mode the
N variants of each modality are fused as all N*N ordered (rgb_i, depth_j)
concatenations before a shared two-layer MLP with three action heads (arm,
base, terminate), each predicting a 10-step lookahead.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import doorworld as dw
from .datastore import LOOKAHEAD, action_scale
from .errors import ContractViolation

MODALITIES = {"rgb": ("rgb",), "depth": ("depth",), "rgbd": ("rgb", "depth")}
IN_CHANNELS = {"rgb": 3, "depth": 1}


@dataclass(frozen=True)
class PolicyConfig:
    modality: str = "rgb"
    arm_dof: int = 3
    embed_dim: int = 64
    widths: tuple = (16, 32, 64, 64)
    blocks: tuple = (1, 1, 1, 1)
    hidden: int = 128
    lookahead: int = LOOKAHEAD
    fusion: str = "embedding"      # "embedding" (N^2 pairs) or "channel" (stacked RGB-D input)
    depth_clip: float = 10.0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractViolation(f"unknown modality {self.modality!r}")
        if self.fusion not in ("embedding", "channel"):
            raise ContractViolation(f"unknown fusion {self.fusion!r}")

    @property
    def encoders(self) -> tuple:
        if self.modality == "rgbd" and self.fusion == "channel":
            return ("rgbd",)
        return MODALITIES[self.modality]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("widths", "blocks"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def _norm(c):
    # at least two channels per group so 1x1 feature maps still normalise
    return nn.GroupNorm(max(1, min(8, c // 2)), c)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        y = F.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class Encoder(nn.Module):
    """ResNet-18 layout (stem + four stages) at configurable width and depth."""

    def __init__(self, in_ch: int, widths=(16, 32, 64, 64), blocks=(1, 1, 1, 1), embed_dim: int = 64):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_ch, widths[0], 5, 2, 2, bias=False), _norm(widths[0]),
                                  nn.ReLU(), nn.MaxPool2d(3, 2, 1))
        layers, cin = [], widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            for b in range(n):
                layers.append(BasicBlock(cin, w, 2 if (b == 0 and i > 0) else 1))
                cin = w
        self.stages = nn.Sequential(*layers)
        self.proj = nn.Linear(cin, embed_dim)

    def forward(self, x):
        h = self.stages(self.stem(x)).mean(dim=(2, 3))
        return F.normalize(self.proj(h), dim=-1, eps=1e-12)


class ActionHeads(nn.Module):
    def __init__(self, in_dim, hidden, arm_dof, lookahead):
        super().__init__()
        self.arm_dof, self.lookahead = arm_dof, lookahead
        self.fc = nn.Linear(in_dim, hidden)
        self.arm = nn.Linear(hidden, lookahead * arm_dof)
        self.base = nn.Linear(hidden, lookahead * 2)
        self.terminate = nn.Linear(hidden, lookahead)

    def forward(self, z):
        h = F.relu(self.fc(z))
        lead = z.shape[:-1]
        return {"arm": self.arm(h).reshape(*lead, self.lookahead, self.arm_dof),
                "base": self.base(h).reshape(*lead, self.lookahead, 2),
                "terminate": torch.sigmoid(self.terminate(h))}


@dataclass
class VariantSet:
    """N co-registered variants of a batch of frames and what the network made of them.

    ``images[m]`` has shape (N, B, C, H, W); ``embeddings[m]`` (N, B, D);
    predictions have a leading axis of N*N (fused RGB-D) or N. Variant 0 is
    always the distorted original, the consistency anchor.
    """
    images: dict
    embeddings: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return next(iter(self.images.values())).shape[0]

    @property
    def fused(self) -> bool:
        return len(self.embeddings) > 1


class Policy(nn.Module):
    def __init__(self, config: PolicyConfig = PolicyConfig()):
        super().__init__()
        self.config = config
        ch = {"rgb": 3, "depth": 1, "rgbd": 4}
        self.encoders = nn.ModuleDict({m: Encoder(ch[m], config.widths, config.blocks, config.embed_dim)
                                       for m in config.encoders})
        in_dim = config.embed_dim * len(config.encoders)
        self.heads = ActionHeads(in_dim, config.hidden, config.arm_dof, config.lookahead)

    def encode(self, images: torch.Tensor, modality: str) -> torch.Tensor:
        if modality not in self.encoders:
            raise ContractViolation(f"policy has no {modality} encoder (has {list(self.encoders)})")
        expect = {"rgb": 3, "depth": 1, "rgbd": 4}[modality]
        if images.shape[-3] != expect:
            raise ContractViolation(f"{modality} encoder expects {expect} channels, got {images.shape[-3]}")
        lead = images.shape[:-3]
        z = self.encoders[modality](images.reshape(-1, *images.shape[-3:]))
        return z.reshape(*lead, -1)

    def fuse_and_predict(self, variants: VariantSet) -> VariantSet:
        mods = self.config.encoders
        missing = [m for m in mods if m not in variants.embeddings]
        if missing:
            raise ContractViolation(f"missing embeddings for {missing}")
        if len(mods) == 2:
            er, ed = variants.embeddings["rgb"], variants.embeddings["depth"]
            n = er.shape[0]
            # ordered pairs, index i*n + j is (rgb_i, depth_j); pair 0 is the anchor (0, 0)
            z = torch.cat([er[:, None].expand(n, n, *er.shape[1:]),
                           ed[None, :].expand(n, n, *ed.shape[1:])], dim=-1)
            z = z.reshape(n * n, *z.shape[2:])
        else:
            z = variants.embeddings[mods[0]]
        variants.predictions = self.heads(z)
        return variants

    def forward_variants(self, images: dict) -> VariantSet:
        vs = VariantSet(images=images)
        if self.config.encoders == ("rgbd",):
            x = torch.cat([images["rgb"], images["depth"]], dim=-3)
            vs.embeddings = {"rgbd": self.encode(x, "rgbd")}
        else:
            for m in self.config.encoders:
                if m not in images:
                    raise ContractViolation(f"missing {m} images")
                vs.embeddings[m] = self.encode(images[m], m)
        return self.fuse_and_predict(vs)


def preprocess(rgb=None, depth=None, depth_clip: float = 10.0) -> dict:
    """Numpy frames -> network tensors. RGB to [0, 1]; depth divided by the clip."""
    out = {}
    if rgb is not None:
        x = torch.from_numpy(np.ascontiguousarray(rgb)).float().div_(255.0)
        out["rgb"] = x.movedim(-1, -3).contiguous()
    if depth is not None:
        d = torch.from_numpy(np.ascontiguousarray(depth, dtype=np.float32)).div_(depth_clip)
        out["depth"] = d.unsqueeze(-3).contiguous()
    return out


def _obs_arrays(observations, modality):
    rgb = np.stack([o.rgb for o in observations]) if "rgb" in MODALITIES[modality] else None
    depth = np.stack([o.depth for o in observations]) if "depth" in MODALITIES[modality] else None
    return rgb, depth


@torch.no_grad()
def predict_batch(policy: Policy, observations: list) -> dict:
    """Single-variant forward pass for a list of observations; numpy outputs."""
    rgb, depth = _obs_arrays(observations, policy.config.modality)
    images = {k: v[None] for k, v in preprocess(rgb, depth, policy.config.depth_clip).items()}
    preds = policy.forward_variants(images).predictions
    return {k: v[0].numpy() for k, v in preds.items()}


def decode_action(arm_row, base_row, terminate_p, config: dw.WorldConfig = dw.WorldConfig()) -> dw.Action:
    bs, as_ = action_scale(config)
    return dw.Action(np.asarray(base_row, np.float64) * bs, np.asarray(arm_row, np.float64) * as_,
                     bool(terminate_p > 0.5))


def act_batch(policy: Policy, observations: list, config: dw.WorldConfig = dw.WorldConfig()) -> list:
    """Execute lookahead row 0 for every observation."""
    p = predict_batch(policy, observations)
    return [decode_action(p["arm"][i, 0], p["base"][i, 0], float(p["terminate"][i, 0]), config)
            for i in range(len(observations))]


def act(obs, policy: Policy, config: dw.WorldConfig = dw.WorldConfig()) -> dw.Action:
    """``obs`` is an Observation, or an (rgb_obs, depth_obs) pair for RGB-D policies."""
    if isinstance(obs, tuple):
        rgb_obs, depth_obs = obs
        from .renderer import Observation
        obs = Observation(rgb_obs.rgb, depth_obs.depth, rgb_obs.domain, rgb_obs.frame_ref)
    return act_batch(policy, [obs], config)[0]


def save_checkpoint(path, policy: Policy, step: int, config_hash: str, manifest_hash: str,
                    extra: dict | None = None):
    blob = {"state_dict": policy.state_dict(), "policy_config": policy.config.to_dict(),
            "step": int(step), "config_hash": config_hash, "dataset_manifest_hash": manifest_hash}
    if extra:
        blob.update(extra)
    torch.save(blob, path)


def load_checkpoint(path) -> tuple:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    policy = Policy(PolicyConfig.from_dict(blob["policy_config"]))
    policy.load_state_dict(blob["state_dict"])
    policy.eval()
    return policy, blob
