"""Small unpaired CycleGAN for sim<->real translation of RGB or depth frames.

Images enter the networks in [0, 1]: RGB divided by 255, depth divided by the
depth clip. Generators are residual encoder-decoders; discriminators are
PatchGAN-style. Objective: least-squares adversarial + L1 cycle consistency.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, ContractViolation, TrainingError


@dataclass(frozen=True)
class GanConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    beta1: float = 0.5
    cycle_weight: float = 10.0
    identity_weight: float = 0.0
    width: int = 16
    res_blocks: int = 2
    checkpoint_interval: int = 500
    depth_clip: float = 10.0
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def channels(modality: str) -> int:
    if modality == "rgb":
        return 3
    if modality == "depth":
        return 1
    raise ConfigurationError(f"unknown modality {modality!r}")


class _Res(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.InstanceNorm2d(c), nn.ReLU(True),
                                  nn.Conv2d(c, c, 3, padding=1), nn.InstanceNorm2d(c))

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    def __init__(self, in_ch: int, width: int = 16, res_blocks: int = 2):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, w, 5, padding=2), nn.InstanceNorm2d(w), nn.ReLU(True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * w), nn.ReLU(True),
            *[_Res(2 * w) for _ in range(res_blocks)],
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1), nn.InstanceNorm2d(w), nn.ReLU(True),
            nn.Conv2d(w, in_ch, 5, padding=2),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class Discriminator(nn.Module):
    def __init__(self, in_ch: int, width: int = 16):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * w), nn.LeakyReLU(0.2, True),
            nn.Conv2d(2 * w, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def to_unit(images: np.ndarray, modality: str, depth_clip: float = 10.0) -> torch.Tensor:
    """(B,H,W[,3]) numpy images -> (B,C,H,W) float tensor in [0, 1]."""
    x = np.asarray(images)
    if modality == "rgb":
        t = torch.from_numpy(x.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    else:
        t = torch.from_numpy(np.clip(x, 0, depth_clip).astype(np.float32) / depth_clip)[:, None]
    return t.contiguous()


def from_unit(t: torch.Tensor, modality: str, depth_clip: float = 10.0) -> np.ndarray:
    t = t.detach().clamp(0.0, 1.0)
    if modality == "rgb":
        return np.rint(t.permute(0, 2, 3, 1).numpy() * 255.0).astype(np.uint8)
    return (t[:, 0].numpy() * depth_clip).astype(np.float32)


class GeneratorHandle:
    """A frozen generator plus the metadata needed to apply it."""

    def __init__(self, net: Generator, modality: str, direction: str, step: int = 0,
                 depth_clip: float = 10.0, config_hash: str = ""):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.modality, self.direction, self.step = modality, direction, step
        self.depth_clip, self.config_hash = depth_clip, config_hash

    def __call__(self, images: np.ndarray) -> np.ndarray:
        single = images.ndim == (3 if self.modality == "rgb" else 2)
        batch = images[None] if single else images
        out = adapt_learned(batch, self)
        return out[0] if single else out

    def save(self, path):
        save_generator(path, self.net, self.modality, self.direction, self.step,
                       self.depth_clip, self.config_hash)

    @classmethod
    def load(cls, path) -> "GeneratorHandle":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        net = Generator(channels(blob["modality"]), blob["width"], blob["res_blocks"])
        net.load_state_dict(blob["state_dict"])
        return cls(net, blob["modality"], blob["direction"], blob["step"], blob["depth_clip"],
                   blob["config_hash"])


def adapt_learned(images: np.ndarray, generator: GeneratorHandle) -> np.ndarray:
    """One forward pass over a batch; output clamped to the valid pixel range."""
    x = np.asarray(images)
    expect = 4 if generator.modality == "rgb" else 3
    if x.ndim != expect or (generator.modality == "rgb" and x.shape[-1] != 3):
        raise ContractViolation(f"{generator.modality} generator got images of shape {x.shape}")
    with torch.no_grad():
        y = generator.net(to_unit(x, generator.modality, generator.depth_clip))
    return from_unit(y, generator.modality, generator.depth_clip)


def save_generator(path, net: Generator, modality, direction, step, depth_clip, config_hash):
    torch.save({"state_dict": net.state_dict(), "modality": modality, "direction": direction,
                "step": step, "depth_clip": depth_clip, "config_hash": config_hash,
                "width": net.net[0].out_channels,
                "res_blocks": sum(isinstance(m, _Res) for m in net.net)}, path)


def _save_pair(out_dir: Path, g_s2r, g_r2s, modality, step, cfg, manifest):
    for name, net in (("sim2real", g_s2r), ("real2sim", g_r2s)):
        path = out_dir / f"G_{modality}_{name}_{step:06d}.pt"
        save_generator(path, net, modality, name, step, cfg.depth_clip, cfg.digest())
        manifest.append({"path": path.name, "modality": modality, "direction": name,
                         "step": step, "config_hash": cfg.digest()})
    (out_dir / f"gan_manifest_{modality}.json").write_text(json.dumps(manifest, indent=2))


def train_cyclegan(sim_images: np.ndarray, real_images: np.ndarray, modality: str,
                   cfg: GanConfig = GanConfig(), out_dir=None, log=None):
    """Fit sim<->real generators on unpaired image sets.

    Returns ``(G_sim2real, G_real2sim, history)`` where history holds the
    per-step losses. Checkpoints land in ``out_dir`` every
    ``cfg.checkpoint_interval`` steps when it is given.
    """
    if len(sim_images) == 0 or len(real_images) == 0:
        raise ConfigurationError("CycleGAN needs non-empty sim and real image sets")
    c = channels(modality)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    xs = to_unit(sim_images, modality, cfg.depth_clip)
    xr = to_unit(real_images, modality, cfg.depth_clip)
    g_s2r, g_r2s = Generator(c, cfg.width, cfg.res_blocks), Generator(c, cfg.width, cfg.res_blocks)
    d_real, d_sim = Discriminator(c, cfg.width), Discriminator(c, cfg.width)
    opt_g = torch.optim.Adam(itertools.chain(g_s2r.parameters(), g_r2s.parameters()),
                             lr=cfg.lr, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(itertools.chain(d_real.parameters(), d_sim.parameters()),
                             lr=cfg.lr, betas=(cfg.beta1, 0.999))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    manifest, history, last_good = [], [], None

    for step in range(cfg.steps + 1):
        a = xs[rng.integers(0, len(xs), cfg.batch_size)]
        b = xr[rng.integers(0, len(xr), cfg.batch_size)]
        fake_r, fake_s = g_s2r(a), g_r2s(b)
        adv = ((d_real(fake_r) - 1) ** 2).mean() + ((d_sim(fake_s) - 1) ** 2).mean()
        cyc = F.l1_loss(g_r2s(fake_r), a) + F.l1_loss(g_s2r(fake_s), b)
        loss_g = adv + cfg.cycle_weight * cyc
        if cfg.identity_weight:
            loss_g = loss_g + cfg.identity_weight * (F.l1_loss(g_s2r(b), b) + F.l1_loss(g_r2s(a), a))
        if not torch.isfinite(loss_g):
            raise TrainingError(f"CycleGAN diverged at step {step}", last_checkpoint=last_good)
        history.append({"step": step, "adv": adv.item(), "cycle": cyc.item()})
        if step == cfg.steps:
            break
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()
        loss_d = (((d_real(b) - 1) ** 2).mean() + (d_real(fake_r.detach()) ** 2).mean()
                  + ((d_sim(a) - 1) ** 2).mean() + (d_sim(fake_s.detach()) ** 2).mean()) * 0.5
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()
        if out_dir is not None and (step + 1) % cfg.checkpoint_interval == 0:
            _save_pair(out_dir, g_s2r, g_r2s, modality, step + 1, cfg, manifest)
            last_good = str(out_dir / f"G_{modality}_sim2real_{step + 1:06d}.pt")
        if log is not None and step % 100 == 0:
            print(f"[gan:{modality}] step {step} adv {adv.item():.4f} cycle {cyc.item():.4f}", file=log)
    if out_dir is not None and cfg.steps % cfg.checkpoint_interval:
        _save_pair(out_dir, g_s2r, g_r2s, modality, cfg.steps, cfg, manifest)
    return (GeneratorHandle(g_s2r, modality, "sim2real", cfg.steps, cfg.depth_clip, cfg.digest()),
            GeneratorHandle(g_r2s, modality, "real2sim", cfg.steps, cfg.depth_clip, cfg.digest()),
            history)
