"""Command-line entry point: ``doorlab collect | train-gan | train | eval | sweep | report``.

Configuration is layered: built-in defaults, then an optional user YAML file
(``--config``), then ``--set section.key=value`` overrides and the
subcommand's own flags. ``DOORLAB_OUT`` overrides the output root. Every run
directory receives a ``resolved_config.yaml`` holding the merged config and seed.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigurationError, DoorlabError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ENV_OUT = "DOORLAB_OUT"
FREE_FORM = {("train", "network"), ("train", "augment")}


# ---------------------------------------------------------------- config

def default_config() -> dict:
    text = resources.files("doorlab").joinpath("assets/defaults.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, over: dict, path=()) -> dict:
    """Deep merge. Keys must already exist in ``base`` except inside free-form blocks."""
    free = tuple(path[:2]) in FREE_FORM
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if key not in base and not free:
            raise ConfigurationError(f"unknown config key {'.'.join(path + (key,))!r}")
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            out[key] = _merge(base[key], val, path + (key,))
        else:
            out[key] = val
    return out


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        val = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"override {item!r}: {exc}") from None
    node = val
    for part in reversed(key.strip().split(".")):
        node = {part: node}
    return node


def load_config(user_file=None, overrides=(), env=None) -> dict:
    """defaults < user file < overrides; the environment may move the output root."""
    cfg = default_config()
    if user_file:
        try:
            with open(user_file) as f:
                user = yaml.safe_load(f) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {user_file}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{user_file}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigurationError(f"{user_file}: top level must be a mapping")
        cfg = _merge(cfg, user)
    for ov in overrides:
        cfg = _merge(cfg, ov)
    env = os.environ if env is None else env
    if env.get(ENV_OUT):
        cfg["out_root"] = env[ENV_OUT]
    return cfg


def _root(cfg) -> Path:
    return Path(cfg["out_root"])


def _under(cfg, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else _root(cfg) / p


def write_resolved(run_dir: Path, cfg: dict, section: str, seed) -> dict:
    doc = {"doorlab_version": __version__, "command": section, "seed": seed,
           "out_root": str(cfg["out_root"]), section: cfg[section]}
    if section == "sweep":
        doc.update({k: cfg[k] for k in ("collect", "train", "eval")})
    run_dir.mkdir(parents=True, exist_ok=True)
    tmp = run_dir / "resolved_config.yaml.tmp"
    tmp.write_text(yaml.safe_dump(doc, sort_keys=True))
    tmp.replace(run_dir / "resolved_config.yaml")
    return doc


def _same_config(run_dir: Path, doc: dict) -> bool:
    path = run_dir / "resolved_config.yaml"
    return path.exists() and yaml.safe_load(path.read_text()) == yaml.safe_load(yaml.safe_dump(doc))


def record_time(run_dir: Path, key: str, seconds: float) -> None:
    """Accumulate wall time spent on real work (skipped stages add nothing)."""
    path = Path(run_dir) / "timing.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc[key] = round(doc.get(key, 0.0) + seconds, 3)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def total_time(root: Path) -> float:
    return sum(v for p in Path(root).rglob("timing.json") for v in json.loads(p.read_text()).values())


def _say(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- collect

def _scene_list(spec):
    from . import doorworld as dw
    reg = dw.registry()
    if spec in ("train", "eval"):
        return dw.scenes_by_split(spec)
    if spec == "all":
        return list(reg.values())
    ids = spec.split(",") if isinstance(spec, str) else list(spec)
    missing = [s for s in ids if s not in reg]
    if missing:
        raise ConfigurationError(f"unknown scenes {missing}")
    return [reg[s] for s in ids]


def cmd_collect(cfg: dict, section: dict | None = None, out_dir=None) -> Path:
    from .datastore import save_episodes
    from .expert import collect
    c = section or cfg["collect"]
    out = Path(out_dir) if out_dir else _under(cfg, Path("data") / (c["name"] or c["domain"]))
    doc = {"doorlab_version": __version__, "command": "collect", "seed": c["seed"],
           "out_root": str(cfg["out_root"]), "collect": c}
    if (out / "manifest.json").exists():
        if _same_config(out, doc):
            _say(f"collect: {out} is up to date, skipping")
            return out / "manifest.json"
        raise ConfigurationError(f"{out} holds a collection with a different config; choose another name")
    scenes = _scene_list(c["scenes"])
    t0 = time.time()
    eps = collect(scenes, int(c["per_scene"]), c["domain"], int(c["seed"]))
    write_resolved(out, {**cfg, "collect": c}, "collect", c["seed"])
    manifest = save_episodes(eps, out)
    record_time(out, "collect", time.time() - t0)
    _say(f"collect: {len(eps)} {c['domain']} episodes in {time.time() - t0:.0f}s -> {manifest}")
    return manifest


# ---------------------------------------------------------------- datasets

def _manifest(path: Path) -> Path:
    return path / "manifest.json" if path.is_dir() else path


def load_datasets(cfg, data_dirs, modalities):
    from .datastore import Dataset, manifest_hash
    import hashlib
    sets, h = [], hashlib.sha256()
    for d in data_dirs:
        m = _manifest(_under(cfg, d))
        if not m.exists():
            raise ConfigurationError(f"no dataset manifest at {m}")
        sets.append(Dataset.from_manifest(m, modalities))
        h.update(manifest_hash(m).encode())
    return sets, h.hexdigest()[:16]


# ---------------------------------------------------------------- train-gan

def cmd_train_gan(cfg: dict) -> Path:
    from .adapt.cyclegan import GanConfig, train_cyclegan
    from .datastore import DOMAIN_CODE
    g = cfg["gan"]
    mod = g["modality"]
    if mod not in ("rgb", "depth"):
        raise ConfigurationError("gan.modality must be rgb or depth")
    out = _under(cfg, Path("gan") / (g["name"] or mod))
    gcfg = GanConfig(**{k: g[k] for k in ("steps", "batch_size", "lr", "cycle_weight", "width",
                                          "res_blocks", "checkpoint_interval", "seed")})
    doc = {"doorlab_version": __version__, "command": "gan", "seed": g["seed"],
           "out_root": str(cfg["out_root"]), "gan": g}
    if (out / f"gan_manifest_{mod}.json").exists() and _same_config(out, doc):
        _say(f"train-gan: {out} is up to date, skipping")
        return out
    (sim,), _ = load_datasets(cfg, [g["sim_data"]], (mod,))
    (real,), _ = load_datasets(cfg, [g["real_data"]], (mod,))
    rng = np.random.default_rng(g["seed"])

    def pick(ds, code):
        arr = getattr(ds, mod)[ds.domain == code]
        n = min(len(arr), int(g["max_frames"]))
        return arr[np.sort(rng.choice(len(arr), n, replace=False))]

    write_resolved(out, cfg, "gan", g["seed"])
    _, _, hist = train_cyclegan(pick(sim, DOMAIN_CODE["sim"]), pick(real, DOMAIN_CODE["real"]), mod, gcfg,
                                out, log=sys.stderr)
    with open(out / "gan_log.jsonl", "w") as f:
        for rec in hist:
            f.write(json.dumps(rec) + "\n")
    return out


# ---------------------------------------------------------------- train

def _train_config(t: dict):
    from .trainer import TrainConfig
    keys = set(TrainConfig.__dataclass_fields__)
    return TrainConfig.from_dict({k: v for k, v in t.items() if k in keys})


def run_name(t: dict) -> str:
    return t["name"] or f"{t['method']}_{t['modality']}_s{t['seed']}"


def cmd_train(cfg: dict, section: dict | None = None, run_dir=None) -> Path:
    from .policy import MODALITIES
    from .trainer import train
    t = section or cfg["train"]
    if t.get("gan_dir"):
        t = {**t, "gan_dir": str(_under(cfg, t["gan_dir"]))}
    tcfg = _train_config(t)
    out = Path(run_dir) if run_dir else _under(cfg, Path("runs") / run_name(t))
    doc = {"doorlab_version": __version__, "command": "train", "seed": t["seed"],
           "out_root": str(cfg["out_root"]), "train": t}
    done = out / "checkpoints.json"
    if done.exists():
        man = json.loads(done.read_text())
        steps = [c["step"] for c in man["checkpoints"]]
        if _same_config(out, doc) and steps and steps[-1] == tcfg.steps:
            _say(f"train: {out} is complete, skipping")
            return out
        raise ConfigurationError(f"{out} already holds a different or unfinished run; remove it or rename")
    sets, mhash = load_datasets(cfg, t["data"], MODALITIES[tcfg.modality])
    write_resolved(out, {**cfg, "train": t}, "train", t["seed"])
    t0 = time.time()
    paths = train(sets, tcfg, out, manifest_hash=mhash, run_id=out.name,
                  cache_dir=_under(cfg, t["cache_dir"]) if t.get("cache_dir") else None, log=sys.stderr)
    record_time(out, "train", time.time() - t0)
    _say(f"train: {len(paths)} checkpoints in {time.time() - t0:.0f}s -> {out}")
    return out


# ---------------------------------------------------------------- eval

def _protocol(e: dict):
    from .evalharness import ProtocolSpec
    p = dict(e["protocol"])
    for k in ("scenes", "domains", "variants"):
        if k in p:
            p[k] = tuple(p[k] or ())
    try:
        return ProtocolSpec(**p)
    except TypeError as exc:
        raise ConfigurationError(f"bad eval.protocol: {exc}") from None


def cmd_eval(cfg: dict, run_dir=None, section: dict | None = None) -> Path:
    """Evaluate a run's checkpoints; resumes by skipping checkpoint ids already in eval.tsv."""
    from . import evalharness as eh
    e = section or cfg["eval"]
    run = Path(run_dir) if run_dir else (_under(cfg, e["run"]) if e.get("run") else None)
    if run is None or not (run / "checkpoints.json").exists():
        raise ConfigurationError(f"no trained run at {run}")
    proto = _protocol(e)
    man = json.loads((run / "checkpoints.json").read_text())
    tsv = run / "eval.tsv"
    doc = {"doorlab_version": __version__, "command": "eval", "seed": proto.base_seed,
           "out_root": str(cfg["out_root"]), "eval": e}
    if tsv.exists() and not _same_config(run / "eval", doc):
        raise ConfigurationError(f"{tsv} was produced with a different eval config; move it aside")
    write_resolved(run / "eval", {**cfg, "eval": e}, "eval", proto.base_seed)
    results = eh.read_results(tsv) if tsv.exists() else []

    def have(cid, dom):
        return any(r.checkpoint_id == cid and r.domain == dom for r in results)

    def run_domain(entry, dom):
        t0 = time.time()
        new = eh.evaluate_checkpoint(run / entry["path"], proto.with_domains([dom]), int(e["workers"]))
        results.extend(new)
        results.sort(key=lambda r: (r.step, r.domain, r.scene_id, r.variant))
        eh.write_results(results, tsv)
        record_time(run / "eval", f"eval_{dom}", time.time() - t0)
        _say(f"eval: {entry['id']} {dom} {eh.aggregate(new)[2]:.3f} ({time.time() - t0:.0f}s)")

    ckpts = man["checkpoints"]
    first = [d for d in proto.domains if d == "sim"] or list(proto.domains)
    for entry in ckpts:
        for dom in first:
            if not have(entry["id"], dom):
                run_domain(entry, dom)
    rest = [d for d in proto.domains if d not in first]
    if rest:
        k = int(e["top_k_real"])
        chosen = ({c["id"] for c in ckpts} if k <= 0 or k >= len(ckpts)
                  else set(eh.select_top_k(results, k)))
        for entry in ckpts:
            if entry["id"] in chosen:
                for dom in rest:
                    if not have(entry["id"], dom):
                        run_domain(entry, dom)
    return tsv


# ---------------------------------------------------------------- report

def _grid_pairs(cfg, data_dirs, samples, seed):
    from .adapt.oracle import TableResolver, adapt_oracle
    from .datastore import Dataset, read_episode, read_manifest
    rng = np.random.default_rng(seed)
    pairs = []
    for d in data_dirs:
        doc = read_manifest(_manifest(_under(cfg, d)))
        picks = rng.choice(len(doc["episodes"]), min(samples, len(doc["episodes"])), replace=False)
        eps = [read_episode(doc["episodes"][int(i)]["path"]) for i in picks]
        ds = Dataset(eps)
        resolver = TableResolver.from_dataset(ds)
        for j, e in enumerate(eps):
            start = int(sum(x.header.length for x in eps[:j]))
            i = start + int(rng.integers(0, e.header.length))
            obs = ds.observation(i)
            direction = "sim2real" if obs.domain == "sim" else "real2sim"
            out = adapt_oracle(obs, direction, resolver)
            label = f"{obs.frame_ref.scene_id} {direction}"
            pairs.append((obs.rgb, out.rgb, label + " rgb"))
            pairs.append((obs.depth, out.depth, label + " depth"))
    return pairs


def cmd_report(cfg: dict, section: dict | None = None) -> Path:
    from . import evalharness as eh
    from .report import adaptation_grid, write_report, write_tables
    r = section or cfg["report"]
    runs = [_under(cfg, p) for p in r["runs"]]
    if not runs:
        raise ConfigurationError("report needs at least one run directory (report.runs)")
    results = []
    for run in runs:
        tsv = run / "eval.tsv"
        if not tsv.exists():
            raise ConfigurationError(f"{run} has not been evaluated")
        results.extend(eh.read_results(tsv))
    out = _under(cfg, r["out"])
    write_resolved(out, cfg, "report", None)
    rep = eh.gap_report(results, int(r["top_k"]))
    write_report(rep, out)
    write_tables(eh.gap_report(results, int(r["top_k"]), by="run"), out / "per_run")
    if r.get("adaptation_grid"):
        data = cfg["train"]["data"]
        adaptation_grid(_grid_pairs(cfg, data, int(r["grid_samples"]), 0), out / "adaptation_grid.png")
    _say(f"report: {out}")
    for m, entry in sorted(rep.per_method.items()):
        _say(f"  {m}: mean gap {100 * entry['mean_gap']:.1f} pts, real unseen "
             f"{100 * entry['real_unseen']:.1f}%, sim {100 * entry['sim_total']:.1f}%")
    return out


# ---------------------------------------------------------------- sweep

def cmd_sweep(cfg: dict) -> Path:
    """Collect, train every method x seed, evaluate and report. Completed stages are skipped."""
    s = cfg["sweep"]
    root = Path(s["name"])
    data = {}
    for dom, n in (("sim", s["sim_per_scene"]), ("real", s["real_per_scene"])):
        c = {**cfg["collect"], "domain": dom, "per_scene": n, "scenes": "train",
             "seed": int(s["collect_seed"]) + (0 if dom == "sim" else 1), "name": None}
        cmd_collect(cfg, c, _under(cfg, root / "data" / dom))
        data[dom] = str(root / "data" / dom)
    write_resolved(_under(cfg, root), cfg, "sweep", s["seeds"])
    runs = []
    for method in s["methods"]:
        for seed in s["seeds"]:
            t = {**cfg["train"], "method": method, "seed": int(seed), "data": [data["sim"], data["real"]],
                 "cache_dir": str(root / "cache"), "name": None}
            run = _under(cfg, root / "runs" / run_name(t))
            cmd_train(cfg, t, run)
            cmd_eval(cfg, run)
            runs.append(str(run))
    rep = {**cfg["report"], "runs": runs, "out": str(root / "report")}
    cfg = {**cfg, "train": {**cfg["train"], "data": [data["sim"], data["real"]]}}
    out = cmd_report(cfg, rep)
    _say(f"sweep: {total_time(_under(cfg, root)) / 60:.1f} min of collection, training and evaluation")
    return out


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doorlab", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"doorlab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="user YAML merged over the defaults")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override, e.g. --set train.steps=500 (repeatable)")
    common.add_argument("--out-root", help="output root (DOORLAB_OUT takes precedence)")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common], help="record expert demonstrations")
    c.add_argument("--domain", dest="collect.domain", choices=["sim", "real"])
    c.add_argument("--per-scene", dest="collect.per_scene", type=int)
    c.add_argument("--scenes", dest="collect.scenes")
    c.add_argument("--seed", dest="collect.seed", type=int)
    c.add_argument("--name", dest="collect.name")

    g = sub.add_parser("train-gan", parents=[common], help="fit CycleGAN adapters")
    g.add_argument("--modality", dest="gan.modality", choices=["rgb", "depth"])
    g.add_argument("--steps", dest="gan.steps", type=int)
    g.add_argument("--seed", dest="gan.seed", type=int)
    g.add_argument("--name", dest="gan.name")

    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.add_argument("--method", dest="train.method", choices=["naive", "gan_mix", "tcl"])
    t.add_argument("--modality", dest="train.modality", choices=["rgb", "depth", "rgbd"])
    t.add_argument("--adapter", dest="train.adapter_kind", choices=["oracle", "cyclegan"])
    t.add_argument("--steps", dest="train.steps", type=int)
    t.add_argument("--seed", dest="train.seed", type=int)
    t.add_argument("--data", dest="train.data", nargs="+")
    t.add_argument("--name", dest="train.name")

    e = sub.add_parser("eval", parents=[common], help="evaluate a run's checkpoints")
    e.add_argument("run", nargs="?", help="run directory")
    e.add_argument("--workers", dest="eval.workers", type=int)
    e.add_argument("--trials", dest="eval.protocol.trials_per_scene", type=int)
    e.add_argument("--timeout", dest="eval.protocol.timeout_steps", type=int)
    e.add_argument("--top-k-real", dest="eval.top_k_real", type=int)

    s = sub.add_parser("sweep", parents=[common], help="collect, train, evaluate and report")
    s.add_argument("--name", dest="sweep.name")
    s.add_argument("--seeds", dest="sweep.seeds", type=int, nargs="+")
    s.add_argument("--methods", dest="sweep.methods", nargs="+", choices=["naive", "gan_mix", "tcl"])

    r = sub.add_parser("report", parents=[common], help="tables and figures from evaluated runs")
    r.add_argument("runs", nargs="*", help="evaluated run directories")
    r.add_argument("--out", dest="report.out")
    r.add_argument("--top-k", dest="report.top_k", type=int)
    r.add_argument("--adaptation-grid", dest="report.adaptation_grid", action="store_const", const=True)
    return p


def _flag_overrides(ns) -> list:
    out = []
    for key, val in vars(ns).items():
        if "." in key and val is not None:
            node = val
            for part in reversed(key.split(".")):
                node = {part: node}
            out.append(node)
    return out


COMMANDS = {"collect": cmd_collect, "train-gan": cmd_train_gan, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        overrides = [parse_override(s) for s in ns.set] + _flag_overrides(ns)
        if ns.out_root:
            overrides.insert(0, {"out_root": ns.out_root})
        if ns.command == "eval" and ns.run:
            overrides.append({"eval": {"run": ns.run}})
        if ns.command == "report" and ns.runs:
            overrides.append({"report": {"runs": ns.runs}})
        cfg = load_config(ns.config, overrides)
        COMMANDS[ns.command](cfg)
    except ConfigurationError as exc:
        _say(f"doorlab: configuration error: {exc}")
        return EXIT_CONFIG
    except DoorlabError as exc:
        _say(f"doorlab: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as exc:
        _say(f"doorlab: runtime error: {exc}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
