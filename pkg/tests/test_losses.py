import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from doorlab.datastore import DemoLabel
from doorlab.errors import ContractViolation
from doorlab.losses import HEADS, LossReport, bcl, huber, objective, tcl, total
from doorlab.policy import VariantSet


def make_variants(n=3, b=2, dof=3, look=10, d=8, seed=0, fused=False):
    g = torch.Generator().manual_seed(seed)
    emb = {"rgb": torch.nn.functional.normalize(torch.randn(n, b, d, generator=g), dim=-1)}
    if fused:
        emb["depth"] = torch.nn.functional.normalize(torch.randn(n, b, d, generator=g), dim=-1)
    p = n * n if fused else n
    preds = {"arm": torch.randn(p, b, look, dof, generator=g),
             "base": torch.randn(p, b, look, 2, generator=g),
             "terminate": torch.rand(p, b, look, generator=g)}
    return VariantSet(images={"rgb": torch.zeros(n, b, 3, 4, 4)}, embeddings=emb, predictions=preds)


def labels_like(vs):
    return {j: vs.predictions[j][0].detach().clone() for j in HEADS}


def test_huber_closed_form():
    assert abs(huber(0.5, 0.0) - 0.125) < 1e-9
    assert abs(huber(2.0, 0.0) - 1.5) < 1e-9
    assert huber(np.zeros(4), np.zeros(4)) == 0.0


def test_huber_is_elementwise_mean():
    assert abs(huber([0.5, 2.0], [0.0, 0.0]) - (0.125 + 1.5) / 2) < 1e-12


def test_huber_shape_mismatch():
    with pytest.raises(ContractViolation):
        huber(np.zeros(3), np.zeros(4))


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 5))
@settings(max_examples=200, deadline=None)
def test_huber_properties(a, b, delta):
    h = huber(a, b, delta)
    assert h >= 0
    assert abs(h - huber(b, a, delta)) < 1e-9
    d = abs(a - b)
    assert h <= 0.5 * d * d + 1e-9
    assert h <= delta * d + 1e-9


def test_tcl_zero_for_single_variant():
    e, a = tcl(make_variants(n=1))
    assert e == 0.0 and a == 0.0


def test_tcl_zero_for_identical_variants():
    vs = make_variants(n=3)
    for k, v in vs.embeddings.items():
        vs.embeddings[k] = v[:1].expand_as(v).clone()
    for k, v in vs.predictions.items():
        vs.predictions[k] = v[:1].expand_as(v).clone()
    assert tcl(vs) == (0.0, 0.0)


def test_tcl_positive_for_distinct_variants():
    e, a = tcl(make_variants(n=3))
    assert e > 0 and a > 0


def test_bcl_zero_when_predictions_match_labels():
    vs = make_variants(n=3)
    lab = labels_like(vs)
    for k in HEADS:
        vs.predictions[k] = lab[k][None].expand_as(vs.predictions[k]).clone()
    assert all(v == 0.0 for v in bcl(vs, lab).values())


def test_bcl_accepts_demolabel():
    vs = make_variants(n=1, b=1)
    lab = DemoLabel(np.zeros((10, 3)), np.zeros((10, 2)), np.zeros(10))
    assert set(bcl(vs, lab)) == set(HEADS)


def test_total_is_exact_sum():
    for fused in (False, True):
        vs = make_variants(n=3, fused=fused)
        rep = total(vs, {j: torch.zeros_like(vs.predictions[j][0]) for j in HEADS})
        assert rep.total == rep.bcl_arm + rep.bcl_base + rep.bcl_terminate + rep.tcl_embed + rep.tcl_action


def test_objective_matches_report():
    vs = make_variants(n=3, fused=True)
    loss, rep = objective(vs, labels_like(vs))
    assert abs(float(loss) - rep.total) < 1e-5


def test_naive_objective_has_zero_tcl():
    vs = make_variants(n=3)
    _, rep = objective(vs, labels_like(vs), use_tcl=False)
    assert rep.tcl_embed == 0.0 and rep.tcl_action == 0.0


def test_label_shape_mismatch_raises():
    vs = make_variants(n=1, b=2)
    with pytest.raises(ContractViolation):
        bcl(vs, {j: torch.zeros(3, 10) for j in HEADS})


def test_loss_report_dict():
    r = LossReport(0.1, 0.2, 0.3, 0.4, 0.5)
    assert r.to_dict()["total"] == r.total
