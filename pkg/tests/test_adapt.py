import numpy as np
import pytest

from doorlab import doorworld as dw, expert
from doorlab.adapt import AugmentConfig, ReplayResolver, TableResolver, adapt_oracle, augment
from doorlab.adapt.augment import crop_resize, cutout_mask, draw_params
from doorlab.datastore import Dataset
from doorlab.errors import ContractViolation, ProvenanceError
from doorlab.renderer import FrameRef, Observation, render

CFG = dw.WorldConfig()


@pytest.fixture(scope="module")
def frame():
    scene = dw.get_scene("TL1")
    return render(dw.reset(scene, 0, CFG), scene, "real")


def test_augment_keeps_shape_and_dtype(frame):
    for mod, img in (("rgb", frame.rgb), ("depth", frame.depth)):
        out = augment(img, mod, 5)
        assert out.shape == img.shape and out.dtype == img.dtype


def test_augment_is_seeded(frame):
    a, b = augment(frame.rgb, "rgb", [1, 2]), augment(frame.rgb, "rgb", [1, 2])
    assert np.array_equal(a, b)
    assert not np.array_equal(a, augment(frame.rgb, "rgb", [1, 3]))


def test_identity_config(frame):
    cfg = AugmentConfig.identity()
    assert np.array_equal(augment(frame.rgb, "rgb", 0, cfg), frame.rgb)
    assert np.array_equal(augment(frame.depth, "depth", 0, cfg), frame.depth)


@pytest.mark.parametrize("seed", range(20))
def test_depth_gets_no_photometric_change(frame, seed):
    cfg = AugmentConfig()
    p = draw_params(frame.depth.shape, seed, cfg)
    out = augment(frame.depth, "depth", seed, cfg)
    ref = crop_resize(frame.depth, p.crop)
    keep = ~cutout_mask(out.shape, p.cutouts)
    # outside cutouts, values are exactly the cropped input: same histogram
    assert np.array_equal(out[keep], ref[keep])
    assert np.array_equal(np.sort(out[keep]), np.sort(ref[keep]))
    assert (out[~keep] == 0).all()


def test_rgb_gets_photometric_change(frame):
    cfg = AugmentConfig(crop_fraction=1.0, cutout_count=0)
    out = augment(frame.rgb, "rgb", 4, cfg)
    assert not np.array_equal(out, frame.rgb)


def test_unknown_modality(frame):
    with pytest.raises(ValueError):
        augment(frame.rgb, "ir", 0)


def test_oracle_round_trip_on_expert_frames():
    res = ReplayResolver(CFG)
    rng = np.random.default_rng(0)
    for sc in dw.scenes_by_split("train"):
        sc_a = sc.under_variant("A")
        seed = int(rng.integers(0, 2**31 - 1))
        roll = expert.run_expert(sc_a, seed, CFG)
        step = int(rng.integers(0, len(roll.states)))
        sim = render(roll.states[step], sc_a, "sim", episode_id=seed)
        real = adapt_oracle(sim, "sim2real", res)
        back = adapt_oracle(real, "real2sim", res)
        assert real.domain == "real" and back.domain == "sim"
        assert back == sim
        assert real == render(roll.states[step], sc_a, "real", episode_id=seed)


def test_oracle_contracts(frame):
    with pytest.raises(ContractViolation):
        adapt_oracle(frame, "sim2real")
    with pytest.raises(ContractViolation):
        adapt_oracle(frame, "sideways")
    bogus = Observation(frame.rgb, frame.depth, "sim", FrameRef("NOPE", 0, 0))
    with pytest.raises(ProvenanceError):
        adapt_oracle(bogus, "sim2real", ReplayResolver(CFG))
    past = Observation(frame.rgb, frame.depth, "sim", FrameRef("TL1", 0, 10_000))
    with pytest.raises(ProvenanceError):
        adapt_oracle(past, "sim2real", ReplayResolver(CFG))


def test_table_resolver_matches_dataset():
    eps = expert.collect(dw.scenes_by_split("train")[:1], 1, "sim", 2)
    ds = Dataset(eps, ("rgb", "depth"))
    res = TableResolver.from_dataset(ds)
    for i in (0, len(ds) // 2, len(ds) - 1):
        real = adapt_oracle(ds.observation(i), "sim2real", res)
        assert adapt_oracle(real, "real2sim", res) == ds.observation(i)
    with pytest.raises(ProvenanceError):
        res(FrameRef("TL1", -1, 0))


@pytest.mark.slow
def test_cyclegan_short_run(tmp_path):
    from doorlab.adapt.cyclegan import GanConfig, GeneratorHandle, train_cyclegan
    scene = dw.get_scene("TL1")
    roll = expert.run_expert(scene, 0, CFG)
    sim = np.stack([render(s, scene, "sim").rgb for s in roll.states[:16]])
    real = np.stack([render(s, scene, "real").rgb for s in roll.states[:16]])
    cfg = GanConfig(steps=20, batch_size=2, width=4, res_blocks=1, checkpoint_interval=10)
    g, h, hist = train_cyclegan(sim, real, "rgb", cfg, out_dir=tmp_path)
    assert len(hist) == 21 and all(np.isfinite(r["cycle"]) for r in hist)
    out = g(sim[:3])
    assert out.shape == sim[:3].shape and out.dtype == np.uint8
    assert g(sim[0]).shape == sim[0].shape
    loaded = GeneratorHandle.load(tmp_path / "G_rgb_sim2real_000020.pt")
    assert np.array_equal(loaded(sim[:3]), out)
    with pytest.raises(ContractViolation):
        g(sim[:, :, :, :1])
    assert (tmp_path / "gan_manifest_rgb.json").exists()
