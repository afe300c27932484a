import json

import numpy as np
import pytest
import torch

from doorlab import doorworld as dw, expert
from doorlab.datastore import Dataset
from doorlab.errors import ConfigurationError, ContractViolation
from doorlab.policy import load_checkpoint
from doorlab.trainer import (OracleAdapter, TrainConfig, make_variants, prepare_dataset, read_log,
                             train, translate_frames)

SMALL = {"widths": [8, 8, 16, 16], "embed_dim": 16, "hidden": 32}


@pytest.fixture(scope="module")
def data():
    scenes = dw.scenes_by_split("train")[:2]
    sim = Dataset(expert.collect(scenes, 2, "sim", 1), ("rgb",))
    real = Dataset(expert.collect(scenes, 2, "real", 2), ("rgb",))
    return Dataset.concat([sim, real])


def cfg(**kw):
    base = dict(batch_size=8, steps=20, checkpoint_interval_steps=10, network=SMALL, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(method="dann")
    with pytest.raises(ConfigurationError):
        TrainConfig(n_variants=4)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"method": "tcl", "bogus": 1})
    c = cfg(method="tcl")
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    assert cfg(method="naive").variants == 1 and cfg(method="gan_mix").variants == 1
    assert c.variants == 3


@pytest.mark.parametrize("method", ["naive", "gan_mix", "tcl"])
def test_loss_decreases(tmp_path, data, method):
    c = cfg(method=method, steps=200, checkpoint_interval_steps=200, learning_rate=1e-3)
    train(data, c, tmp_path / method)
    log = read_log(tmp_path / method / "train_log.jsonl")
    assert len(log) == 200
    early = np.mean([r["total"] for r in log[:10]])
    late = np.mean([r["total"] for r in log[-10:]])
    assert late < early


def test_naive_has_no_consistency_term(tmp_path, data):
    train(data, cfg(method="naive"), tmp_path)
    for r in read_log(tmp_path / "train_log.jsonl"):
        assert r["tcl_embed"] == 0.0 and r["tcl_action"] == 0.0


def test_tcl_logs_consistency_term(tmp_path, data):
    train(data, cfg(method="tcl", steps=5), tmp_path)
    assert all(r["tcl_embed"] > 0 for r in read_log(tmp_path / "train_log.jsonl"))


def test_training_is_deterministic(tmp_path, data):
    c = cfg(method="tcl", steps=12)
    pa = train(data, c, tmp_path / "a")
    pb = train(data, c, tmp_path / "b")
    assert (tmp_path / "a/train_log.jsonl").read_bytes() == (tmp_path / "b/train_log.jsonl").read_bytes()
    sa = load_checkpoint(pa[-1])[0].state_dict()
    sb = load_checkpoint(pb[-1])[0].state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_checkpoint_manifest(tmp_path, data):
    paths = train(data, cfg(method="naive", steps=25), tmp_path, run_id="r1", manifest_hash="abc")
    assert [p.name for p in paths] == ["ckpt_000010.pt", "ckpt_000020.pt", "ckpt_000025.pt"]
    doc = json.loads((tmp_path / "checkpoints.json").read_text())
    assert [c["id"] for c in doc["checkpoints"]] == ["r1/000010", "r1/000020", "r1/000025"]
    assert doc["dataset_manifest_hash"] == "abc" and doc["method"] == "naive"
    with pytest.raises(ContractViolation):
        train(data, cfg(method="naive", steps=10), tmp_path)


def test_gan_mix_adds_translated_sim_frames(data):
    c = cfg(method="gan_mix")
    mixed, translated = prepare_dataset(data, c, OracleAdapter.for_dataset(data))
    before = data.composition()
    after = mixed.composition()
    assert translated is None
    assert after["adapted"] == before["sim"]
    assert after["sim"] == before["sim"] and after["real"] == before["real"]


def test_translate_routes_by_origin(data):
    adapter = OracleAdapter.for_dataset(data)
    sim_i = int(np.nonzero(data.domain == 0)[0][0])
    real_i = int(np.nonzero(data.domain == 1)[0][0])
    out = translate_frames(data, [sim_i, real_i], adapter)
    # a sim frame is translated to real style and vice versa; neither is unchanged
    assert not np.array_equal(out["rgb"][0], data.rgb[sim_i])
    assert not np.array_equal(out["rgb"][1], data.rgb[real_i])
    mixed = data.with_adapted([sim_i], rgb=out["rgb"][:1])
    with pytest.raises(ContractViolation):
        translate_frames(mixed, [len(mixed) - 1], adapter)


def test_variants_shape(data):
    frame = data.observation(0)
    c = cfg(method="tcl")
    vs = make_variants(frame, c, OracleAdapter.for_dataset(data), seed=3)
    img = vs.images["rgb"]
    assert tuple(img.shape) == (3, 1, 3, 64, 64)
    # the first two variants distort the same frame differently
    assert not torch.equal(img[0], img[1])
