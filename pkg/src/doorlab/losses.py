"""Huber, task-consistency, and behavior-cloning losses.

Reductions: Huber averages over tensor elements; consistency and cloning
terms sum over heads and variants; a batch loss is the mean of per-frame
losses. There are no weights between terms.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ContractViolation

HEADS = ("arm", "base", "terminate")


@dataclass(frozen=True)
class LossReport:
    tcl_embed: float
    tcl_action: float
    bcl_arm: float
    bcl_base: float
    bcl_terminate: float

    @property
    def bcl_sum(self) -> float:
        return self.bcl_arm + self.bcl_base + self.bcl_terminate

    @property
    def total(self) -> float:
        return self.bcl_sum + self.tcl_embed + self.tcl_action

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def huber_elements(x: torch.Tensor, y: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    if delta <= 0:
        raise ContractViolation("huber delta must be positive")
    d = (x - y).abs()
    return torch.where(d <= delta, 0.5 * d * d, delta * (d - 0.5 * delta))


def huber(x, y, delta: float = 1.0):
    """Mean elementwise Huber loss; returns a float for non-tensor inputs."""
    plain = not isinstance(x, torch.Tensor) and not isinstance(y, torch.Tensor)
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ContractViolation(f"huber shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    out = huber_elements(x, y, delta).mean()
    return float(out) if plain else out


def _per_frame(x, y, delta):
    """Huber averaged over everything after the (variant, batch) axes."""
    h = huber_elements(x, y, delta)
    return h.flatten(2).mean(dim=2) if h.dim() > 2 else h


def tcl_terms(variants, delta: float = 1.0):
    """Per-frame (embedding, action) consistency against variant 0. Shapes (B,)."""
    if not variants.embeddings or not variants.predictions:
        raise ContractViolation("variant set has no embeddings/predictions")
    embed = 0.0
    for e in variants.embeddings.values():
        if e.shape[0] > 1:
            embed = embed + _per_frame(e[1:], e[:1].expand_as(e[1:]), delta).sum(dim=0)
    action = 0.0
    for j in HEADS:
        a = variants.predictions[j]
        if a.shape[0] > 1:
            action = action + _per_frame(a[1:], a[:1].expand_as(a[1:]), delta).sum(dim=0)
    b = next(iter(variants.predictions.values())).shape[1]
    zero = next(iter(variants.predictions.values())).new_zeros(b)
    return embed + zero, action + zero


def label_tensors(label, dtype=torch.float32) -> dict:
    """DemoLabel, list of DemoLabel, or dict of (B, ...) arrays -> dict of tensors."""
    if isinstance(label, dict):
        return {j: _as_tensor(label[j]).to(dtype) for j in HEADS}
    if isinstance(label, (list, tuple)):
        return {j: torch.as_tensor(np.stack([getattr(lb, j) for lb in label])).to(dtype) for j in HEADS}
    return {j: torch.as_tensor(np.asarray(getattr(label, j))[None]).to(dtype) for j in HEADS}


def bcl_terms(variants, label, delta: float = 1.0) -> dict:
    """Per-frame cloning loss for each head, summed over all predictions. Shapes (B,)."""
    lab = label_tensors(label, next(iter(variants.predictions.values())).dtype)
    out = {}
    for j in HEADS:
        a, lj = variants.predictions[j], lab[j]
        if a.shape[1:] != lj.shape:
            raise ContractViolation(f"{j} prediction {tuple(a.shape[1:])} vs label {tuple(lj.shape)}")
        out[j] = _per_frame(a, lj[None].expand_as(a), delta).sum(dim=0)
    return out


def tcl(variants, delta: float = 1.0) -> tuple:
    e, a = tcl_terms(variants, delta)
    return float(e.mean()), float(a.mean())


def bcl(variants, label, delta: float = 1.0) -> dict:
    return {j: float(v.mean()) for j, v in bcl_terms(variants, label, delta).items()}


def objective(variants, label, delta: float = 1.0, use_tcl: bool = True):
    """Differentiable batch-mean loss and its report."""
    b = bcl_terms(variants, label, delta)
    parts = {f"bcl_{j}": b[j].mean() for j in HEADS}
    if use_tcl:
        e, a = tcl_terms(variants, delta)
        parts["tcl_embed"], parts["tcl_action"] = e.mean(), a.mean()
    else:
        zero = parts["bcl_arm"].new_zeros(())
        parts["tcl_embed"], parts["tcl_action"] = zero, zero
    loss = (parts["bcl_arm"] + parts["bcl_base"] + parts["bcl_terminate"]
            + parts["tcl_embed"] + parts["tcl_action"])
    report = LossReport(**{k: float(v.detach()) for k, v in parts.items()})
    return loss, report


def total(variants, label, delta: float = 1.0, use_tcl: bool = True) -> LossReport:
    return objective(variants, label, delta, use_tcl)[1]
