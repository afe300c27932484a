import numpy as np
import pytest

from doorlab import doorworld as dw, expert
from doorlab.datastore import (LOOKAHEAD, Dataset, FrameSampler, action_scale, build_episode,
                               episode_labels, read_episode, read_manifest, sample_batch,
                               save_episodes, split_episodes, write_episode)
from doorlab.errors import ConfigurationError, FormatError

CFG = dw.WorldConfig()


@pytest.fixture(scope="module")
def episodes():
    scenes = dw.scenes_by_split("train")[:2]
    return expert.collect(scenes, 2, "sim", 5) + expert.collect(scenes[:1], 1, "real", 6)


def test_round_trip(tmp_path, episodes):
    for i, ep in enumerate(episodes):
        p = tmp_path / f"e{i}.dlep"
        write_episode(ep, p)
        back = read_episode(p)
        assert back == ep
        assert back.states == ep.states


def test_write_is_deterministic(tmp_path, episodes):
    write_episode(episodes[0], tmp_path / "a.dlep")
    write_episode(episodes[0], tmp_path / "b.dlep")
    assert (tmp_path / "a.dlep").read_bytes() == (tmp_path / "b.dlep").read_bytes()


def _corrupt(tmp_path, ep, edit):
    p = tmp_path / "x.dlep"
    write_episode(ep, p)
    data = bytearray(p.read_bytes())
    p.write_bytes(bytes(edit(data)))
    return p


def test_flipped_byte_is_detected(tmp_path, episodes):
    def flip(d):
        d[-100] ^= 0xFF
        return d
    with pytest.raises(FormatError, match="checksum"):
        read_episode(_corrupt(tmp_path, episodes[0], flip))


@pytest.mark.parametrize("edit,msg", [
    (lambda d: d[:-7], "truncated"),
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + b"\x09\x00" + d[6:], "schema"),
    (lambda d: d + b"\x00", "trailing"),
])
def test_malformed_files(tmp_path, episodes, edit, msg):
    with pytest.raises(FormatError, match=msg):
        read_episode(_corrupt(tmp_path, episodes[0], edit))


def test_manifest_and_dataset(tmp_path, episodes):
    m = save_episodes(episodes, tmp_path / "d")
    doc = read_manifest(m)
    assert len(doc["episodes"]) == len(episodes)
    ds = Dataset.from_manifest(m, ("rgb", "depth"))
    assert len(ds) == sum(e.header.length for e in episodes)
    comp = ds.composition()
    assert comp["real"] == episodes[-1].header.length
    assert comp["sim"] + comp["real"] == len(ds)
    with pytest.raises(ConfigurationError):
        read_manifest(tmp_path / "missing.json")


def test_labels_pad_with_terminate(episodes):
    acts = [a for _, a in episodes[0].frames]
    lb = episode_labels(acts, CFG)
    n = len(acts)
    assert lb["arm"].shape == (n, LOOKAHEAD, CFG.arm_dof)
    # final frame: every row is padding
    assert (lb["terminate"][-1] == 1).all()
    assert (lb["base"][-1] == 0).all() and (lb["arm"][-1] == 0).all()
    # first frame looks at the first ten executed actions
    bs, as_ = action_scale(CFG)
    np.testing.assert_allclose(lb["base"][0, 3], acts[3].base / bs, rtol=1e-6)
    assert (lb["terminate"][0] == 0).all()
    # frame n-3: two real rows, then padding
    assert list(lb["terminate"][n - 3][:4]) == [0, 0, 1, 1]
    assert np.abs(lb["base"]).max() <= 1 + 1e-6 and np.abs(lb["arm"]).max() <= 1 + 1e-6


def test_sampler_covers_each_epoch():
    s = FrameSampler(50, 10, seed=3)
    seen = np.concatenate([s.next() for _ in range(5)])
    assert sorted(seen) == list(range(50))
    a = FrameSampler(50, 7, seed=3)
    b = FrameSampler(50, 7, seed=3)
    for _ in range(20):
        assert np.array_equal(a.next(), b.next())


def test_sampler_rejects_empty():
    with pytest.raises(ConfigurationError):
        FrameSampler(0, 4, 0)


def test_sample_batch(episodes):
    ds = Dataset(episodes, ("rgb",))
    batch = sample_batch(ds, 5, 0)
    assert len(batch) == 5


def test_concat_and_adapted(episodes):
    a = Dataset(episodes[:2], ("rgb",))
    b = Dataset(episodes[2:], ("rgb",))
    ab = Dataset.concat([a, b])
    full = Dataset(episodes, ("rgb",))
    assert np.array_equal(ab.rgb, full.rgb)
    assert np.array_equal(ab.episode, full.episode)
    assert ab.frame_ref(len(ab) - 1) == full.frame_ref(len(full) - 1)
    src = np.nonzero(ab.domain == 0)[0][:4]
    ad = ab.with_adapted(src, rgb=255 - ab.rgb[src])
    assert len(ad) == len(ab) + 4
    assert ad.composition()["adapted"] == 4
    assert ad.frame_domain(len(ab)) == "real"
    assert ad.frame_ref(len(ab)) == ab.frame_ref(src[0])
    np.testing.assert_array_equal(ad.labels["arm"][len(ab):], ab.labels["arm"][src])
    with pytest.raises(ConfigurationError):
        ab.with_adapted(src, rgb=ab.rgb[src[:2]])
    with pytest.raises(ConfigurationError):
        Dataset.concat([a, Dataset(episodes[2:], ("depth",))])


def test_split_is_seeded(episodes):
    t1, v1 = split_episodes(episodes, 0.4, seed=1)
    t2, v2 = split_episodes(episodes, 0.4, seed=1)
    assert [e.header.seed for e in v1] == [e.header.seed for e in v2]
    assert len(t1) + len(v1) == len(episodes)


def test_build_episode_header():
    sc = dw.get_scene("TL1")
    roll = expert.run_expert(sc, 9, CFG)
    ep = build_episode(roll, sc, "real", 9, CFG)
    assert ep.header.length == len(roll.states)
    assert ep.frames[0][0].domain == "real"
