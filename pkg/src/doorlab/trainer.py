"""Policy training: variant construction, optimisation and checkpoint export.

Three methods share one loop. ``naive`` clones from the raw sim+real mix,
``gan_mix`` adds sim frames translated to the real style, and ``tcl`` builds
N variants per frame (two distortions of the original and one distortion of
its domain translation) and adds the consistency terms to the cloning loss.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import doorworld as dw
from .adapt.augment import AugmentConfig, augment
from .adapt.oracle import DIRECTIONS, TableResolver, adapt_oracle
from .datastore import DOMAIN_CODE, Dataset, FrameSampler
from .errors import ConfigurationError, ContractViolation, TrainingError
from .losses import objective
from .policy import MODALITIES, Policy, PolicyConfig, VariantSet, preprocess, save_checkpoint
from .renderer import Observation, RenderConfig

METHODS = ("naive", "gan_mix", "tcl")
ADAPTERS = ("oracle", "cyclegan")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    steps: int = 2000
    checkpoint_interval_steps: int = 500
    n_variants: int = 3
    modality: str = "rgb"
    adapter_kind: str = "oracle"
    method: str = "tcl"
    seed: int = 0
    huber_delta: float = 1.0
    augment: AugmentConfig = AugmentConfig()
    network: dict = field(default_factory=dict)   # PolicyConfig overrides
    gan_dir: str | None = None

    def __post_init__(self):
        checks = [(self.method in METHODS, f"method must be one of {METHODS}"),
                  (self.adapter_kind in ADAPTERS, f"adapter_kind must be one of {ADAPTERS}"),
                  (self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd"),
                  (self.modality in MODALITIES, f"modality must be one of {tuple(MODALITIES)}"),
                  (self.batch_size >= 1 and self.steps >= 0, "batch_size >= 1 and steps >= 0"),
                  (self.checkpoint_interval_steps >= 1, "checkpoint_interval_steps must be positive"),
                  (1 <= self.n_variants <= 3, "n_variants must be 1, 2 or 3"),
                  (self.learning_rate > 0 and self.huber_delta > 0, "learning_rate and huber_delta must be positive")]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)
        try:
            self.policy_config()
        except (TypeError, ContractViolation) as exc:
            raise ConfigurationError(f"bad network block: {exc}") from None

    @property
    def variants(self) -> int:
        """Variants actually built per frame; the ablations use the distorted original only."""
        return self.n_variants if self.method == "tcl" else 1

    @property
    def needs_adapter(self) -> bool:
        return self.method != "naive" and (self.method == "gan_mix" or self.variants == 3)

    def policy_config(self, arm_dof: int = 3) -> PolicyConfig:
        net = dict(self.network)
        for k in ("widths", "blocks"):
            if k in net:
                net[k] = tuple(net[k])
        return PolicyConfig(modality=self.modality, arm_dof=arm_dof, **net)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        if isinstance(d.get("augment"), dict):
            try:
                d["augment"] = AugmentConfig(**d["augment"])
            except TypeError as exc:
                raise ConfigurationError(f"bad augment block: {exc}") from None
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------- adapters

class OracleAdapter:
    """Pixel-perfect translation by re-rendering recorded states."""

    kind = "oracle"

    def __init__(self, resolver=None, render_config: RenderConfig = RenderConfig(),
                 world_config: dw.WorldConfig = dw.WorldConfig()):
        self.resolver = resolver
        self.render_config, self.world_config = render_config, world_config

    @classmethod
    def for_dataset(cls, dataset: Dataset, **kw) -> "OracleAdapter":
        return cls(TableResolver.from_dataset(dataset), **kw)

    def __call__(self, observations: list, direction: str) -> list:
        out = []
        for obs in observations:
            t = adapt_oracle(obs, direction, self.resolver, self.render_config, self.world_config)
            out.append(Observation(t.rgb if obs.rgb is not None else None,
                                   t.depth if obs.depth is not None else None, t.domain, t.frame_ref))
        return out


class LearnedAdapter:
    """Translation through frozen CycleGAN generators keyed by (modality, direction)."""

    kind = "cyclegan"

    def __init__(self, generators: dict):
        self.generators = dict(generators)

    @classmethod
    def from_dir(cls, gan_dir, modalities) -> "LearnedAdapter":
        from .adapt.cyclegan import GeneratorHandle
        gan_dir = Path(gan_dir)
        gens = {}
        for m in modalities:
            mf = gan_dir / f"gan_manifest_{m}.json"
            if not mf.exists():
                raise ConfigurationError(f"no {m} generators in {gan_dir}")
            entries = json.loads(mf.read_text())
            for direction in DIRECTIONS:
                last = max((e for e in entries if e["direction"] == direction), key=lambda e: e["step"])
                gens[(m, direction)] = GeneratorHandle.load(gan_dir / last["path"])
        return cls(gens)

    def __call__(self, observations: list, direction: str) -> list:
        dst = DIRECTIONS[direction][1]
        out = {}
        for m in ("rgb", "depth"):
            imgs = [getattr(o, m) for o in observations]
            if imgs[0] is None:
                continue
            if (m, direction) not in self.generators:
                raise ConfigurationError(f"no {direction} generator for {m}")
            out[m] = self.generators[(m, direction)](np.stack(imgs))
        return [Observation(out["rgb"][i] if "rgb" in out else None,
                            out["depth"][i] if "depth" in out else None, dst, o.frame_ref)
                for i, o in enumerate(observations)]


def build_adapter(cfg: TrainConfig, dataset: Dataset):
    if cfg.adapter_kind == "oracle":
        return OracleAdapter.for_dataset(dataset)
    if cfg.gan_dir is None:
        raise ConfigurationError("adapter_kind=cyclegan needs gan_dir")
    return LearnedAdapter.from_dir(cfg.gan_dir, MODALITIES[cfg.modality])


def _modalities(dataset: Dataset) -> tuple:
    return tuple(m for m in ("rgb", "depth") if getattr(dataset, m) is not None)


def translate_frames(dataset: Dataset, idx, adapter, chunk: int = 256) -> dict:
    """G(I) for the given frames, routed by origin: sim2real for sim, real2sim for real."""
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(dataset.domain[idx] == DOMAIN_CODE["adapted"]):
        raise ContractViolation("adapted frames have no origin domain to translate from")
    mods = _modalities(dataset)
    out = {m: np.empty((len(idx),) + getattr(dataset, m).shape[1:], getattr(dataset, m).dtype) for m in mods}
    for code, direction in ((DOMAIN_CODE["sim"], "sim2real"), (DOMAIN_CODE["real"], "real2sim")):
        pos = np.flatnonzero(dataset.domain[idx] == code)
        for s in range(0, len(pos), chunk):
            p = pos[s:s + chunk]
            res = adapter([dataset.observation(int(i)) for i in idx[p]], direction)
            for m in mods:
                out[m][p] = np.stack([getattr(r, m) for r in res])
    return out


# ---------------------------------------------------------------- variants

def variant_images(raw: dict, translated: dict | None, n: int, aug: AugmentConfig, seed) -> dict:
    """``{modality: [N images]}`` for one frame: D(I), D(I), D(G(I)).

    Variant v is distorted with seed ``seed + [v]`` in every modality, so the
    RGB and depth images of a variant share crop and cutouts.
    """
    if n >= 3 and translated is None:
        raise ConfigurationError("third variant needs a domain adapter")
    out = {}
    for m, img in raw.items():
        src = [img, img, translated[m] if n >= 3 else None][:n]
        out[m] = [augment(s, m, list(seed) + [v], aug) for v, s in enumerate(src)]
    return out


def make_variants(frame, cfg: TrainConfig, adapter=None, seed=0) -> VariantSet:
    """Variant images for one frame, ``frame`` being an Observation or (Observation, DemoLabel).

    The result's images have shape (N, 1, C, H, W) per active modality.
    """
    obs = frame[0] if isinstance(frame, tuple) else frame
    if obs.domain not in ("sim", "real"):
        raise ContractViolation("frame has no domain tag")
    mods = MODALITIES[cfg.modality]
    raw = {}
    for m in mods:
        if getattr(obs, m) is None:
            raise ContractViolation(f"frame has no {m} image")
        raw[m] = getattr(obs, m)
    translated = None
    if cfg.variants >= 3:
        if adapter is None:
            raise ConfigurationError("third variant needs a domain adapter")
        direction = "sim2real" if obs.domain == "sim" else "real2sim"
        g = adapter([obs], direction)[0]
        translated = {}
        for m in mods:
            if getattr(g, m) is None:
                raise ConfigurationError(f"adapter produced no {m} image")
            translated[m] = getattr(g, m)
    seed = seed if isinstance(seed, (list, tuple)) else [seed]
    imgs = variant_images(raw, translated, cfg.variants, cfg.augment, seed)
    return VariantSet(images=_to_tensors({m: [v] for m, v in imgs.items()}))


def _to_tensors(per_mod: dict, depth_clip: float = 10.0) -> dict:
    """{m: [B lists of N images]} -> {m: (N, B, C, H, W) tensor}."""
    out = {}
    for m, items in per_mod.items():
        arr = np.stack(items).swapaxes(0, 1)
        out[m] = preprocess(arr if m == "rgb" else None, arr if m == "depth" else None, depth_clip)[m]
    return out


def build_batch(dataset: Dataset, idx, step: int, cfg: TrainConfig, translated: dict | None = None):
    """Images (N, B, C, H, W) per modality and label arrays for frames ``idx``."""
    mods = MODALITIES[cfg.modality]
    per_mod = {m: [] for m in mods}
    for slot, i in enumerate(idx):
        raw = {m: getattr(dataset, m)[i] for m in mods}
        g = {m: translated[m][i] for m in mods} if translated is not None else None
        imgs = variant_images(raw, g, cfg.variants, cfg.augment, [cfg.seed, int(step), slot])
        for m in mods:
            per_mod[m].append(imgs[m])
    images = _to_tensors(per_mod)
    labels = {k: dataset.labels[k][idx] for k in ("arm", "base", "terminate")}
    return images, labels


# ---------------------------------------------------------------- training

def prepare_dataset(dataset: Dataset, cfg: TrainConfig, adapter=None, cache_dir=None):
    """Apply the method's data recipe. Returns (training dataset, per-frame translations or None)."""
    comp = dataset.composition()
    if len(dataset) == 0:
        raise ConfigurationError("empty training dataset")
    missing = [m for m in MODALITIES[cfg.modality] if getattr(dataset, m) is None]
    if missing:
        raise ConfigurationError(f"dataset was loaded without {missing}")
    if cfg.method == "naive":
        return dataset, None
    if comp["adapted"]:
        raise ConfigurationError("dataset already contains adapted frames")
    if cfg.method == "tcl" and (comp["sim"] == 0 or comp["real"] == 0):
        raise ConfigurationError("tcl needs both sim and real demonstrations")
    if not cfg.needs_adapter:
        return dataset, None
    if adapter is None:
        adapter = build_adapter(cfg, dataset)
    if cfg.method == "gan_mix":
        sim_idx = np.flatnonzero(dataset.domain == DOMAIN_CODE["sim"])
        g = _cached(lambda: translate_frames(dataset, sim_idx, adapter), cache_dir,
                    f"sim2real_{adapter.kind}", dataset, cfg)
        mixed = dataset.with_adapted(sim_idx, g.get("rgb"), g.get("depth"))
        assert len(mixed) == len(dataset) + comp["sim"]
        assert mixed.composition() == {"sim": comp["sim"], "real": comp["real"], "adapted": comp["sim"]}
        return mixed, None
    g = _cached(lambda: translate_frames(dataset, np.arange(len(dataset)), adapter), cache_dir,
                f"translated_{adapter.kind}", dataset, cfg)
    return dataset, g


def _dataset_key(dataset: Dataset, cfg: TrainConfig) -> str:
    h = hashlib.sha256()
    for hd in dataset.headers:
        h.update(f"{hd.scene_id}|{hd.domain}|{hd.seed}|{hd.length}".encode())
    h.update(repr(_modalities(dataset)).encode())
    if cfg.adapter_kind == "cyclegan":
        h.update(str(cfg.gan_dir).encode())
    return h.hexdigest()[:16]


def _cached(fn, cache_dir, name, dataset, cfg):
    if cache_dir is None:
        return fn()
    path = Path(cache_dir) / f"{name}_{_dataset_key(dataset, cfg)}.npz"
    if path.exists():
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    out = fn()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **out)
    os.replace(tmp, path)
    return out


def _optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)


def _atomic_json(path: Path, doc):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2))
    os.replace(tmp, path)


def train(datasets, cfg: TrainConfig, out_dir, adapter=None, manifest_hash: str = "",
          run_id: str | None = None, cache_dir=None, log=None) -> list:
    """Optimise a fresh policy for ``cfg.steps`` steps; returns checkpoint paths in step order.

    ``datasets`` is a Dataset or a sequence of them (e.g. sim and real),
    merged before training. Writes ``train_log.jsonl``, ``checkpoints/`` and
    ``checkpoints.json`` under ``out_dir``.
    """
    if isinstance(datasets, Dataset):
        dataset = datasets
    else:
        datasets = [d for d in datasets if d is not None]
        if not datasets:
            raise ConfigurationError("no training data")
        dataset = Dataset.concat(datasets)
    arm_dof = dataset.labels["arm"].shape[-1]
    data, translated = prepare_dataset(dataset, cfg, adapter, cache_dir)

    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    run_id = run_id or out_dir.name
    config_hash = cfg.digest()

    torch.manual_seed(cfg.seed)
    policy = Policy(cfg.policy_config(arm_dof))
    policy.train()
    opt = _optimizer(cfg, policy.parameters())
    sampler = FrameSampler(len(data), cfg.batch_size, cfg.seed)
    use_tcl = cfg.method == "tcl"

    manifest = {"run_id": run_id, "config_hash": config_hash, "dataset_manifest_hash": manifest_hash,
                "method": cfg.method, "modality": cfg.modality, "seed": cfg.seed,
                "composition": data.composition(), "checkpoints": []}
    paths = []

    def export(step):
        path = ckpt_dir / f"ckpt_{step:06d}.pt"
        if path.exists():
            raise ContractViolation(f"refusing to overwrite checkpoint {path}")
        tmp = path.with_name(path.name + ".tmp")
        save_checkpoint(tmp, policy, step, config_hash, manifest_hash,
                        {"method": cfg.method, "run_id": run_id, "train_config": cfg.to_dict()})
        os.replace(tmp, path)
        manifest["checkpoints"].append({"id": f"{run_id}/{step:06d}", "step": step,
                                        "path": str(path.relative_to(out_dir))})
        _atomic_json(out_dir / "checkpoints.json", manifest)
        paths.append(path)

    with open(out_dir / "train_log.jsonl", "w") as logf:
        for step in range(cfg.steps):
            idx = sampler.next()
            images, labels = build_batch(data, idx, step, cfg, translated)
            variants = policy.forward_variants(images)
            loss, report = objective(variants, labels, cfg.huber_delta, use_tcl)
            if not torch.isfinite(loss):
                bad = out_dir / f"nan_batch_{step:06d}.npz"
                np.savez(bad, indices=idx, **{f"img_{m}": v.numpy() for m, v in images.items()},
                         **{f"label_{k}": v for k, v in labels.items()})
                raise TrainingError(f"non-finite loss at step {step} ({report.to_dict()}); batch saved to {bad}",
                                    last_checkpoint=str(paths[-1]) if paths else None)
            logf.write(json.dumps({"step": step, "lr": opt.param_groups[0]["lr"], **report.to_dict()}) + "\n")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if (step + 1) % cfg.checkpoint_interval_steps == 0:
                export(step + 1)
            if log is not None and step % 100 == 0:
                print(f"[train:{run_id}] step {step} loss {report.total:.4f}", file=log, flush=True)
        if not paths or manifest["checkpoints"][-1]["step"] != cfg.steps:
            export(cfg.steps)
    return paths


def read_log(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


