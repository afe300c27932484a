import math

import pytest
import torch

from doorlab import doorworld as dw
from doorlab.errors import ConfigurationError, IncompleteDataError
from doorlab.evalharness import (EvalResult, ProtocolSpec, aggregate, evaluate_checkpoint, gap_report,
                                 plan, read_results, run_protocol, select_top_k, stddev, trial_seed,
                                 write_results)
from doorlab.policy import Policy, PolicyConfig

SMALL = PolicyConfig(widths=(4, 4, 8, 8), embed_dim=8, hidden=16)


@pytest.fixture(scope="module")
def policy():
    torch.manual_seed(0)
    return Policy(SMALL)


PROTO = ProtocolSpec(scenes=("TL1", "EL2"), trials_per_scene=3, timeout_steps=15, chunk_size=4)


@pytest.mark.parametrize("p,n,want", [(0.31, 480, 2.1), (0.48, 480, 2.3), (0.63, 480, 2.2), (0.72, 480, 2.1)])
def test_stddev_reproduces_published_values(p, n, want):
    assert abs(100 * stddev(p, n) - want) <= 0.05


def test_stddev_edge_cases():
    assert stddev(0.0, 10) == 0.0 and stddev(1.0, 10) == 0.0
    assert math.isnan(stddev(0.5, 1))


def test_plan_pairs_domains_and_alternates_variants():
    trials = plan(PROTO)
    assert len(trials) == 2 * 2 * 3
    sim = {(t.scene_id, t.index): t for t in trials if t.domain == "sim"}
    real = {(t.scene_id, t.index): t for t in trials if t.domain == "real"}
    assert sim.keys() == real.keys()
    for key in sim:
        assert sim[key].seed == real[key].seed
        assert sim[key].variant == real[key].variant == "AB"[key[1] % 2]
    assert trial_seed(0, "TL1", 0) != trial_seed(0, "TL2", 0)
    assert trial_seed(0, "TL1", 0) != trial_seed(1, "TL1", 0)


def test_protocol_validation():
    with pytest.raises(ConfigurationError):
        ProtocolSpec(domains=("sim", "adapted"))
    with pytest.raises(ConfigurationError):
        ProtocolSpec(variants=("C",))
    with pytest.raises(ConfigurationError):
        plan(ProtocolSpec(scenes=("NOPE",)))


def test_results_do_not_depend_on_worker_count(policy):
    one = run_protocol(policy, PROTO, workers=1)
    two = run_protocol(policy, PROTO, workers=2)
    assert one == two
    assert all(o.steps <= PROTO.timeout_steps for o in one)
    assert all(o.success or o.failure_reason != "none" for o in one)


def test_evaluate_and_round_trip(tmp_path, policy):
    res = evaluate_checkpoint((policy, "r/000001"), PROTO)
    assert {r.domain for r in res} == {"sim", "real"}
    assert sum(r.n for r in res) == 12
    p = write_results(res, tmp_path / "eval.tsv")
    assert p.read_text().startswith("#")
    assert read_results(p) == res


def _fake(cid, method, step, sim_k, real_k=None, n=10):
    out = [EvalResult(cid, "sim", "TL1", "A", n, sim_k, method, step)]
    if real_k is not None:
        out.append(EvalResult(cid, "real", "TL1", "A", n, real_k, method, step))
    return out


def test_top_k_and_gap_report():
    res = (_fake("a/1", "m", 1, 2, 1) + _fake("a/2", "m", 2, 8, 3) + _fake("a/3", "m", 3, 8, 6)
           + _fake("a/4", "m", 4, 5, 5) + _fake("a/5", "m", 5, 1))
    top = select_top_k(res, 3)
    assert top == ["a/3", "a/2", "a/4"]           # tie at 0.8 broken by later step
    rep = gap_report(res, k=3)
    assert rep.per_method["m"]["mean_gap"] == pytest.approx((0.2 + 0.5 + 0.0) / 3)
    row = next(r for r in rep.per_checkpoint if r["checkpoint_id"] == "a/5")
    assert math.isnan(row["real"])
    with pytest.raises(IncompleteDataError):
        gap_report(res, k=3, require_all=True)
    with pytest.raises(IncompleteDataError):
        select_top_k(res, 6)


def test_top_k_requires_real_results():
    res = _fake("a/1", "m", 1, 9) + _fake("a/2", "m", 2, 2, 1)
    with pytest.raises(IncompleteDataError):
        gap_report(res, k=1)


def test_aggregate_filters():
    res = [EvalResult("c", "real", "TL1", "A", 4, 1), EvalResult("c", "real", "EL1", "B", 6, 3),
           EvalResult("c", "sim", "EL1", "B", 6, 6)]
    assert aggregate(res, domain="real") == (4, 10, 0.4)
    assert aggregate(res, domain="real", split="eval") == (3, 6, 0.5)
    assert aggregate(res, swing="left", domain="sim")[:2] == (6, 6)
    k, n, p = aggregate(res, scene_id="TR1")
    assert n == 0 and math.isnan(p)
