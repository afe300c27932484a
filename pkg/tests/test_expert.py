import numpy as np
import pytest

from doorlab import doorworld as dw, expert
from doorlab.errors import ProtocolError

CFG = dw.WorldConfig()


@pytest.mark.parametrize("sid", sorted(dw.registry()))
@pytest.mark.parametrize("variant", ["A", "B"])
def test_expert_opens_every_door(sid, variant):
    sc = dw.get_scene(sid).under_variant(variant)
    wins = sum(expert.run_expert(sc, seed, CFG).success for seed in range(10))
    assert wins >= 9


def test_noise_free_expert_is_also_competent():
    sc = dw.get_scene("ER3")
    assert all(expert.run_expert(sc, s, CFG, expert.NO_NOISE).success for s in range(10))


def test_episode_is_reproducible_from_seed():
    sc = dw.get_scene("TR2")
    a, b = expert.run_expert(sc, 42, CFG), expert.run_expert(sc, 42, CFG)
    assert a.states == b.states
    assert all(np.array_equal(x.as_vector(), y.as_vector()) for x, y in zip(a.actions, b.actions))
    c = expert.run_expert(sc, 43, CFG)
    assert a.states != c.states


def test_recorded_actions_replay_the_episode():
    sc = dw.get_scene("TL2")
    roll = expert.run_expert(sc, 5, CFG)
    st = roll.states[0]
    for nxt, act in zip(roll.states[1:], roll.actions):
        st = dw.step(st, act, sc, CFG)
        assert st == nxt
    assert roll.actions[-1].terminate and not any(a.terminate for a in roll.actions[:-1])


def test_actions_within_limits():
    sc = dw.get_scene("EL1")
    roll = expert.run_expert(sc, 1, CFG)
    for a in roll.actions:
        assert abs(a.base[0]) <= CFG.max_base_speed + 1e-12
        assert abs(a.base[1]) <= CFG.max_yaw_rate + 1e-12
        assert np.abs(a.arm).max() <= CFG.max_joint_delta + 1e-12


def test_phases_progress_in_order():
    sc = dw.get_scene("TL1")
    roll = expert.run_expert(sc, 0, CFG, expert.NO_NOISE)
    phases = [expert.phase_of(s, sc, CFG) for s in roll.states]
    seen = list(dict.fromkeys(phases))
    assert seen[0] == expert.ExpertPhase.APPROACH
    assert seen[-1] == expert.ExpertPhase.TERMINATE
    assert expert.ExpertPhase.TURN in seen and expert.ExpertPhase.PUSH in seen
    assert seen == sorted(seen)


def test_collect_rules():
    with pytest.raises(ProtocolError):
        expert.collect(dw.scenes_by_split("eval")[:1], 1, "sim", 0)
    with pytest.raises(ProtocolError):
        expert.collect(dw.scenes_by_split("train")[:1], 1, "adapted", 0)
    eps = expert.collect(dw.scenes_by_split("train")[:2], 2, "real", 0)
    assert len(eps) == 4
    assert {e.header.domain for e in eps} == {"real"}
    again = expert.collect(dw.scenes_by_split("train")[:2], 2, "real", 0)
    assert [e.header.seed for e in eps] == [e.header.seed for e in again]


def test_recovery_episodes_start_fumbled_and_replay():
    sc = dw.get_scene("TR1")
    for seed in range(5):
        roll = expert.run_recovery(sc, seed, CFG)
        first = roll.states[0]
        assert roll.success and first.door.latched and first.door.handle_angle > 0
        assert expert.phase_of(first, sc, CFG) != expert.ExpertPhase.TURN
        st = first
        for nxt, act in zip(roll.states[1:], roll.actions):
            st = dw.step(st, act, sc, CFG)
            assert st == nxt
