import numpy as np
import pytest
import torch

from doorlab import doorworld as dw
from doorlab.errors import ContractViolation
from doorlab.losses import objective
from doorlab.policy import (Policy, PolicyConfig, act, decode_action, load_checkpoint, preprocess,
                            save_checkpoint)
from doorlab.renderer import render

TINY = dict(embed_dim=8, widths=(4, 4, 4, 4), blocks=(1, 1, 1, 1), hidden=8)


def rand_images(n, b, hw=16, seed=0, mods=("rgb", "depth")):
    g = torch.Generator().manual_seed(seed)
    ch = {"rgb": 3, "depth": 1}
    return {m: torch.rand(n, b, ch[m], hw, hw, generator=g) for m in mods}


def test_embeddings_unit_norm():
    torch.manual_seed(0)
    pol = Policy(PolicyConfig(modality="rgbd"))
    vs = pol.forward_variants(rand_images(3, 4, 64))
    for e in vs.embeddings.values():
        assert torch.allclose(e.norm(dim=-1), torch.ones(e.shape[:-1]), atol=1e-5)


def test_rgbd_fusion_yields_n_squared_predictions():
    torch.manual_seed(0)
    pol = Policy(PolicyConfig(modality="rgbd", **TINY))
    vs = pol.forward_variants(rand_images(3, 2))
    for v in vs.predictions.values():
        assert v.shape[0] == 9
    assert vs.predictions["arm"].shape == (9, 2, 10, 3)
    assert vs.predictions["base"].shape == (9, 2, 10, 2)
    assert vs.predictions["terminate"].shape == (9, 2, 10)


def test_fusion_pair_ordering():
    torch.manual_seed(0)
    pol = Policy(PolicyConfig(modality="rgbd", **TINY))
    vs = pol.forward_variants(rand_images(3, 2))
    er, ed = vs.embeddings["rgb"], vs.embeddings["depth"]
    i, j = 1, 2
    z = torch.cat([er[i], ed[j]], dim=-1)
    assert torch.allclose(pol.heads(z)["arm"], vs.predictions["arm"][i * 3 + j], atol=1e-6)


def test_single_modality_predictions_per_variant():
    pol = Policy(PolicyConfig(modality="depth", **TINY))
    vs = pol.forward_variants(rand_images(3, 2, mods=("depth",)))
    assert vs.predictions["arm"].shape[0] == 3


def test_encoder_shared_across_variants():
    torch.manual_seed(0)
    pol = Policy(PolicyConfig(modality="rgbd", **TINY))
    # one encoder per modality; every variant goes through the very same parameters
    assert set(pol.encoders) == {"rgb", "depth"}
    n_params = sum(p.numel() for p in pol.parameters())
    expected = sum(p.numel() for p in pol.encoders.parameters()) + sum(p.numel() for p in pol.heads.parameters())
    assert n_params == expected
    imgs = rand_images(3, 2)
    vs = pol.forward_variants(imgs)
    vs.embeddings["rgb"].sum().backward()
    for p in pol.encoders["rgb"].parameters():
        assert p.grad is not None
    ids = {id(p) for p in pol.encoders["rgb"].parameters()}
    for v in range(3):
        # re-encoding one variant alone touches the identical parameter objects
        pol.zero_grad()
        pol.encode(imgs["rgb"][v], "rgb").sum().backward()
        touched = {id(p) for p in pol.encoders["rgb"].parameters() if p.grad is not None}
        assert touched == ids
        assert torch.allclose(pol.encode(imgs["rgb"][v], "rgb"), vs.embeddings["rgb"][v], atol=1e-6)


def test_batch_independence():
    torch.manual_seed(0)
    pol = Policy(PolicyConfig(modality="rgb", **TINY)).eval()
    imgs = rand_images(1, 4, mods=("rgb",))
    full = pol.forward_variants(imgs).predictions["arm"][0]
    one = pol.forward_variants({"rgb": imgs["rgb"][:, 1:2]}).predictions["arm"][0, 0]
    assert torch.allclose(full[1], one, atol=1e-5)


def test_channel_mismatch_raises():
    pol = Policy(PolicyConfig(modality="rgb", **TINY))
    with pytest.raises(ContractViolation):
        pol.encode(torch.zeros(1, 1, 16, 16), "rgb")
    with pytest.raises(ContractViolation):
        pol.encode(torch.zeros(1, 1, 16, 16), "depth")


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    pol = Policy(PolicyConfig(modality="rgbd", **TINY)).double()
    imgs = {k: v.double() for k, v in rand_images(3, 2, seed=1).items()}
    g = torch.Generator().manual_seed(2)
    label = {"arm": torch.randn(2, 10, 3, generator=g, dtype=torch.float64),
             "base": torch.randn(2, 10, 2, generator=g, dtype=torch.float64),
             "terminate": torch.rand(2, 10, generator=g, dtype=torch.float64)}

    def loss_fn():
        return objective(pol.forward_variants(imgs), label, 1.0, use_tcl=True)[0]

    params = list(pol.parameters())
    pol.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = []
    eps = 1e-6
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).norm() / max(analytic.norm(), numeric.norm())
    assert rel < 1e-4, rel


def test_preprocess_ranges():
    rgb = np.full((2, 8, 8, 3), 255, np.uint8)
    depth = np.full((2, 8, 8), 20.0, np.float32)
    t = preprocess(rgb, depth, 10.0)
    assert t["rgb"].shape == (2, 3, 8, 8) and float(t["rgb"].max()) == 1.0
    assert t["depth"].shape == (2, 1, 8, 8)


def test_decode_action_thresholds_terminate():
    assert decode_action(np.zeros(3), np.zeros(2), 0.51).terminate
    assert not decode_action(np.zeros(3), np.zeros(2), 0.5).terminate


def test_act_on_rendered_frame_and_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    pol = Policy(PolicyConfig(modality="rgbd", embed_dim=16, widths=(8, 8, 8, 8)))
    sc = dw.get_scene("TL1")
    obs = render(dw.reset(sc, 0), sc, "sim")
    a = act(obs, pol)
    assert a.base.shape == (2,) and a.arm.shape == (3,)
    path = tmp_path / "p.pt"
    save_checkpoint(path, pol, 7, "cfg", "man")
    pol2, blob = load_checkpoint(path)
    assert blob["step"] == 7
    b = act((obs, obs), pol2)
    assert np.allclose(a.base, b.base) and np.allclose(a.arm, b.arm)
