"""Checkpoint evaluation over the door protocol.

Every (scene, domain, trial) rollout gets its seed from the trial index, and
rollouts are grouped into fixed chunks that run in lockstep so the policy
sees batched observations. Chunks are the unit of parallel work; since their
composition never depends on the pool size, reports are identical for any
number of workers.

"Real" throughout means the real-style rendered domain of the simulator.
"""
from __future__ import annotations

import csv
import math
import multiprocessing as mp
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import doorworld as dw
from .errors import ConfigurationError, DoorlabError, IncompleteDataError
from .policy import Policy, act_batch, load_checkpoint
from .renderer import RenderConfig, render

REAL_NOTE = "# domain 'real' denotes the real-style rendered simulator domain, not physical hardware"
ROW_FIELDS = ("checkpoint_id", "method", "step", "domain", "scene", "split", "swing", "lighting",
              "variant", "n", "k", "p", "stddev")


class CheckpointLoadError(DoorlabError):
    """A checkpoint named for evaluation could not be loaded."""


@dataclass(frozen=True)
class ProtocolSpec:
    scenes: tuple = ()                 # empty means every registered scene
    trials_per_scene: int = 6
    domains: tuple = ("sim", "real")
    variants: tuple = ("A", "B")       # robot variant for trial t is variants[t % len(variants)]
    timeout_steps: int = 1200
    base_seed: int = 0
    chunk_size: int = 8

    def __post_init__(self):
        if self.trials_per_scene < 1 or self.chunk_size < 1 or self.timeout_steps < 1:
            raise ConfigurationError("trials_per_scene, chunk_size and timeout_steps must be positive")
        bad = set(self.domains) - {"sim", "real"}
        if bad or not self.domains:
            raise ConfigurationError(f"bad evaluation domains {self.domains}")
        if not self.variants or set(self.variants) - {"A", "B"}:
            raise ConfigurationError(f"bad robot variants {self.variants}")

    def scene_ids(self) -> tuple:
        return tuple(self.scenes) if self.scenes else tuple(dw.registry())

    def with_domains(self, domains) -> "ProtocolSpec":
        return replace(self, domains=tuple(domains))


@dataclass(frozen=True)
class Trial:
    scene_id: str
    domain: str
    index: int
    variant: str
    seed: int


@dataclass(frozen=True)
class Outcome:
    trial: Trial
    success: bool
    failure_reason: str
    steps: int


def trial_seed(base_seed: int, scene_id: str, trial: int) -> int:
    """Seed shared by the sim and real rollouts of one trial, so domains are paired."""
    return int(np.random.default_rng([base_seed, zlib.crc32(scene_id.encode()), trial]).integers(0, 2**31 - 1))


def plan(protocol: ProtocolSpec) -> list:
    trials = []
    reg = dw.registry()
    for sid in protocol.scene_ids():
        if sid not in reg:
            raise ConfigurationError(f"unknown scene {sid!r}")
        for dom in protocol.domains:
            for t in range(protocol.trials_per_scene):
                trials.append(Trial(sid, dom, t, protocol.variants[t % len(protocol.variants)],
                                    trial_seed(protocol.base_seed, sid, t)))
    return trials


def run_trials(policy: Policy, trials: list, timeout_steps: int = 1200,
               world_config: dw.WorldConfig = dw.WorldConfig(),
               render_config: RenderConfig = RenderConfig()) -> list:
    """Roll out ``trials`` in lockstep with one batched policy call per step."""
    wc = replace(world_config, timeout_steps=timeout_steps)
    reg = dw.registry()
    scenes = [reg[t.scene_id].under_variant(t.variant) for t in trials]
    states = [dw.reset(sc, t.seed, wc) for sc, t in zip(scenes, trials)]
    results = [None] * len(trials)
    active = list(range(len(trials)))
    while active:
        obs = [render(states[i], scenes[i], trials[i].domain, render_config, wc) for i in active]
        actions = act_batch(policy, obs, wc)
        still = []
        for i, a in zip(active, actions):
            s = states[i]
            if a.terminate:
                ok = dw.is_success(s, scenes[i], wc)
                results[i] = Outcome(trials[i], ok, "none" if ok else "early_terminate", s.step)
                continue
            s = dw.step(s, a, scenes[i], wc)
            states[i] = s
            if dw.is_terminal(s, wc):
                results[i] = Outcome(trials[i], False, s.failure_reason, s.step)
            else:
                still.append(i)
        active = still
    return results


def _resolve(checkpoint):
    """(policy, checkpoint_id, step, method) from a path or an in-memory policy."""
    if isinstance(checkpoint, Policy):
        return checkpoint, "in-memory", 0, ""
    if isinstance(checkpoint, tuple):
        pol, cid = checkpoint
        return pol, cid, 0, ""
    try:
        pol, blob = load_checkpoint(checkpoint)
    except Exception as exc:
        raise CheckpointLoadError(f"cannot load checkpoint {checkpoint}: {exc}") from None
    cid = f"{blob.get('run_id', Path(checkpoint).parent.name)}/{int(blob.get('step', 0)):06d}"
    return pol, cid, int(blob.get("step", 0)), blob.get("method", "")


def rollout(checkpoint, scene, domain: str, seed: int, variant: str | None = None,
            timeout_steps: int = 1200, world_config: dw.WorldConfig = dw.WorldConfig()) -> Outcome:
    """One rollout: reset, then act and step until terminate, failure or timeout."""
    policy = _resolve(checkpoint)[0]
    sid = scene.scene_id if isinstance(scene, dw.SceneSpec) else scene
    sc = dw.get_scene(sid)
    trial = Trial(sid, domain, 0, variant or sc.dynamics_variant, int(seed))
    return run_trials(policy, [trial], timeout_steps, world_config)[0]


# worker state lives in module globals so forked children inherit the loaded policy
_WORKER = {}


def _init_worker(policy, timeout, world_config, render_config, pooled=True):
    if pooled:
        torch.set_num_threads(1)
    _WORKER.update(policy=policy, timeout=timeout, wc=world_config, rc=render_config)


def _run_chunk(trials):
    w = _WORKER
    return run_trials(w["policy"], trials, w["timeout"], w["wc"], w["rc"])


def run_protocol(policy: Policy, protocol: ProtocolSpec, workers: int = 1,
                 world_config: dw.WorldConfig = dw.WorldConfig(),
                 render_config: RenderConfig = RenderConfig()) -> list:
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    trials = plan(protocol)
    chunks = [trials[i:i + protocol.chunk_size] for i in range(0, len(trials), protocol.chunk_size)]
    policy.eval()
    args = (policy, protocol.timeout_steps, world_config, render_config)
    if workers == 1:
        _init_worker(*args, pooled=False)
        parts = [_run_chunk(c) for c in chunks]
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker, initargs=args) as pool:
            parts = pool.map(_run_chunk, chunks, chunksize=1)
    return [o for part in parts for o in part]


# ---------------------------------------------------------------- statistics

def stddev(p: float, n: int) -> float:
    """Bernoulli standard-error estimate sqrt(p(1-p)/(n-1)); NaN when n < 2."""
    if n < 2:
        return float("nan")
    return math.sqrt(p * (1.0 - p) / (n - 1))


@dataclass(frozen=True)
class EvalResult:
    checkpoint_id: str
    domain: str
    scene_id: str
    variant: str
    n: int
    k: int
    method: str = ""
    step: int = 0

    def __post_init__(self):
        if not 0 <= self.k <= self.n:
            raise ConfigurationError(f"k={self.k} outside [0, n={self.n}]")

    @property
    def p(self) -> float:
        return self.k / self.n if self.n else float("nan")

    @property
    def stddev(self) -> float:
        return stddev(self.p, self.n)


def summarize(outcomes: list, checkpoint_id: str, method: str = "", step: int = 0) -> list:
    groups = defaultdict(lambda: [0, 0])
    for o in outcomes:
        g = groups[(o.trial.domain, o.trial.scene_id, o.trial.variant)]
        g[0] += 1
        g[1] += int(o.success)
    return [EvalResult(checkpoint_id, d, s, v, n, k, method, step)
            for (d, s, v), (n, k) in sorted(groups.items())]


def evaluate_checkpoint(checkpoint, protocol: ProtocolSpec = ProtocolSpec(), workers: int = 1,
                        world_config: dw.WorldConfig = dw.WorldConfig(),
                        render_config: RenderConfig = RenderConfig()) -> list:
    """EvalResults per (domain, scene, robot variant) for one checkpoint."""
    policy, cid, step, method = _resolve(checkpoint)
    outcomes = run_protocol(policy, protocol, workers, world_config, render_config)
    return summarize(outcomes, cid, method, step)


def aggregate(results, **filters) -> tuple:
    """Trial-weighted (k, n, p) over results matching ``filters`` (attribute or scene property)."""
    reg = dw.registry()
    k = n = 0
    for r in results:
        sc = reg[r.scene_id]
        props = {"domain": r.domain, "variant": r.variant, "split": sc.split, "swing": sc.swing,
                 "lighting": "on" if sc.under_variant(r.variant).lighting_on else "off",
                 "checkpoint_id": r.checkpoint_id, "scene_id": r.scene_id}
        if all(props[key] == val for key, val in filters.items()):
            k += r.k
            n += r.n
    return k, n, (k / n if n else float("nan"))


def select_top_k(results, k: int = 3) -> list:
    """Checkpoint ids with the highest aggregate sim success; ties go to the later step."""
    by_ckpt = defaultdict(list)
    for r in results:
        if r.domain == "sim":
            by_ckpt[r.checkpoint_id].append(r)
    if len(by_ckpt) < k:
        raise IncompleteDataError(f"need {k} checkpoints evaluated in sim, have {len(by_ckpt)}")
    score = {c: (aggregate(rs)[2], max(r.step for r in rs), c) for c, rs in by_ckpt.items()}
    return sorted(score, key=lambda c: score[c], reverse=True)[:k]


@dataclass
class GapReport:
    per_checkpoint: list                   # dicts: checkpoint_id, method, step, sim, real, gap
    per_method: dict                       # method -> {top_k, mean_gap, mean_sim, mean_real, ...}
    breakdowns: list = field(default_factory=list)


BREAKDOWNS = (("total", {}), ("seen", {"split": "train"}), ("unseen", {"split": "eval"}),
              ("swing_left", {"swing": "left"}), ("swing_right", {"swing": "right"}),
              ("lights_on", {"lighting": "on"}), ("lights_off", {"lighting": "off"}),
              ("robot_A", {"variant": "A"}), ("robot_B", {"variant": "B"}))


def run_of(checkpoint_id: str) -> str:
    return checkpoint_id.rsplit("/", 1)[0]


def gap_report(results, k: int = 3, require_all: bool = False, by: str = "method") -> GapReport:
    """Per-checkpoint sim/real success and gap, and per-method means over the top-k by sim.

    Checkpoints evaluated in sim only (e.g. not among the top-k) are listed
    with ``real`` NaN unless ``require_all`` is set, in which case a missing
    domain raises. ``by="run"`` selects the top-k within each training run
    instead of across all runs of a method.
    """
    if by not in ("method", "run"):
        raise ConfigurationError("gap_report groups by 'method' or 'run'")
    group_of = (lambda r: r.method) if by == "method" else (lambda r: run_of(r.checkpoint_id))
    by_ckpt = defaultdict(list)
    for r in results:
        by_ckpt[r.checkpoint_id].append(r)
    rows = []
    for cid, rs in sorted(by_ckpt.items(), key=lambda kv: (kv[1][0].method, kv[1][0].step, kv[0])):
        doms = {r.domain for r in rs}
        if "sim" not in doms or ("real" not in doms and require_all):
            raise IncompleteDataError(f"checkpoint {cid} lacks {'sim' if 'sim' not in doms else 'real'} results")
        sim = aggregate(rs, domain="sim")[2]
        real = aggregate(rs, domain="real")[2] if "real" in doms else float("nan")
        rows.append({"checkpoint_id": cid, "method": rs[0].method, "step": rs[0].step,
                     "sim": sim, "real": real, "gap": sim - real})
    per_method, breakdowns = {}, []
    for m in sorted({group_of(r) for r in results}):
        mres = [r for r in results if group_of(r) == m]
        top = select_top_k(mres, k)
        if any(not any(r.domain == "real" for r in by_ckpt[c]) for c in top):
            raise IncompleteDataError(f"top-{k} checkpoints of {m} lack real results")
        sel = [r for r in mres if r.checkpoint_id in top]
        gaps = [next(x for x in rows if x["checkpoint_id"] == c)["gap"] for c in top]
        entry = {"top_k": top, "mean_gap": float(np.mean(gaps))}
        for name, flt in BREAKDOWNS:
            for dom in ("sim", "real"):
                kk, nn, p = aggregate(sel, domain=dom, **flt)
                entry[f"{dom}_{name}"] = p
                breakdowns.append({"method": m, "group": name, "domain": dom, "n": nn, "k": kk,
                                   "p": p, "stddev": stddev(p, nn)})
        per_method[m] = entry
    return GapReport(rows, per_method, breakdowns)


# ---------------------------------------------------------------- files

def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def result_row(r: EvalResult) -> dict:
    sc = dw.registry()[r.scene_id]
    return {"checkpoint_id": r.checkpoint_id, "method": r.method, "step": r.step, "domain": r.domain,
            "scene": r.scene_id, "split": sc.split, "swing": sc.swing,
            "lighting": "on" if sc.under_variant(r.variant).lighting_on else "off",
            "variant": r.variant, "n": r.n, "k": r.k, "p": r.p, "stddev": r.stddev}


def write_results(results, path) -> Path:
    """Delimited report; the header comment states what 'real' means here."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        f.write(REAL_NOTE + "\n")
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in results:
            row = result_row(r)
            w.writerow([_fmt(row[c]) for c in ROW_FIELDS])
    tmp.replace(path)
    return path


def read_results(path) -> list:
    out = []
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    for row in csv.DictReader(lines, delimiter="\t"):
        out.append(EvalResult(row["checkpoint_id"], row["domain"], row["scene"], row["variant"],
                              int(row["n"]), int(row["k"]), row["method"], int(row["step"])))
    return out


def write_gap_curve(report: GapReport, path) -> Path:
    """step -> sim success, real success, per method."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        f.write(REAL_NOTE + "\n")
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(("method", "checkpoint_id", "step", "sim_success", "real_success", "gap"))
        for r in report.per_checkpoint:
            w.writerow([r["method"], r["checkpoint_id"], r["step"], _fmt(r["sim"]), _fmt(r["real"]),
                        _fmt(r["gap"])])
    return path


def outcome_dicts(outcomes) -> list:
    return [{**asdict(o.trial), "success": o.success, "failure_reason": o.failure_reason, "steps": o.steps}
            for o in outcomes]
