import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.func import functional_call

from finet.distributions import DiagonalGaussian, DimensionError
from finet.netcore import (
    GaussEncoder,
    GenNetwork,
    R2Block,
    box_masks,
    broadcast_latent,
    channel_schedule,
    crop_resize,
    init_params,
    kaiming_bound,
    load_checkpoint,
    param_digest,
    paste_back,
    save_checkpoint,
)
from finet.tensorio import FormatError

from gradcheck import relative_errors


def micro_net(head="softmax"):
    return init_params(GenNetwork(3, 4, latent_dim=2, levels=2, base_channels=4, head=head), seed=0)


def test_channel_schedule():
    assert channel_schedule(4, 32) == [32, 64, 64, 64]
    assert channel_schedule(2, 4) == [4, 8]


def test_generator_shapes_and_heads():
    x, z = torch.randn(2, 3, 8, 8), torch.randn(2, 2)
    soft = micro_net("softmax")(x, z)
    assert soft.shape == (2, 4, 8, 8)
    assert torch.allclose(soft.sum(1), torch.ones(2, 8, 8), atol=1e-6)
    tanh = micro_net("tanh")(x, z)
    assert tanh.abs().max() < 1


def test_generator_rejects_bad_inputs():
    net = micro_net()
    with pytest.raises(DimensionError):
        net(torch.randn(1, 5, 8, 8), torch.randn(1, 2))
    with pytest.raises(DimensionError):
        net(torch.randn(1, 3, 8, 8), torch.randn(1, 3))
    with pytest.raises(DimensionError):
        net(torch.randn(1, 3, 6, 6), torch.randn(1, 2))


def test_generator_depends_on_latent():
    net = micro_net("none")
    for p in net.parameters():
        torch.nn.init.normal_(p, std=0.3)
    x = torch.randn(1, 3, 8, 8)
    assert not torch.allclose(net(x, torch.zeros(1, 2)), net(x, torch.ones(1, 2)))


def test_broadcast_latent():
    h = torch.zeros(2, 3, 4, 5)
    z = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = broadcast_latent(h, z)
    assert out.shape == (2, 5, 4, 5)
    assert torch.all(out[1, 4] == 4.0) and torch.all(out[0, 3] == 1.0)


def test_r2_block_projects_channels():
    assert R2Block(7, 5)(torch.randn(1, 7, 4, 4)).shape == (1, 5, 4, 4)


def test_encoder_returns_gaussian():
    enc = init_params(GaussEncoder(1, 8, levels=2, base_channels=4, input_size=8), seed=1)
    q = enc(torch.randn(3, 1, 8, 8))
    assert isinstance(q, DiagonalGaussian) and q.mean.shape == (3, 8)
    with pytest.raises(DimensionError):
        enc(torch.randn(3, 1, 16, 16))


def test_init_is_seeded_and_bounded():
    a, b, c = micro_net(), micro_net(), init_params(GenNetwork(3, 4, 2, 2, 4, "softmax"), seed=1)
    assert param_digest(a) == param_digest(b) != param_digest(c)
    w = a.down[0].weight
    assert w.abs().max() <= kaiming_bound(w)
    assert all(torch.all(m.bias == 0) for m in a.modules() if isinstance(m, torch.nn.Conv2d))


def test_micro_generator_gradients():
    # The zeroed residual branches of the default init put ReLU inputs exactly on
    # the kink; move to a generic point where the loss is differentiable.
    torch.manual_seed(0)
    net = micro_net("tanh")
    for p in net.parameters():
        torch.nn.init.normal_(p, std=0.2)
    names = [n for n, _ in net.named_parameters()]
    params = [p.detach() for _, p in net.named_parameters()]
    x, z = torch.randn(2, 3, 8, 8), torch.randn(2, 2)
    target = torch.randn(2, 4, 8, 8)

    def loss(x, z, *ps):
        state = dict(zip(names, ps))
        out = functional_call(net.to(x.dtype), state, (x, z))
        return ((out - target.to(x.dtype)) ** 2).mean()

    errs = relative_errors(loss, [x, z, *params], eps=1e-4)
    assert max(errs) <= 1e-2, dict(zip(["x", "z", *names], errs))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10), st.integers(0, 10), st.integers(1, 6), st.integers(1, 6))
def test_paste_back_is_exact_outside(r0, c0, h, w):
    box = torch.tensor([[r0, c0, r0 + h, c0 + w]])
    gen, orig = torch.randn(1, 3, 16, 16), torch.randn(1, 3, 16, 16)
    out = paste_back(gen, orig, box)
    m = box_masks(box, 16, 16).expand_as(orig)
    assert torch.equal(out[~m], orig[~m]) and torch.equal(out[m], gen[m])


def test_crop_resize_identity_and_gradient():
    x = torch.randn(2, 3, 8, 8)
    full = torch.tensor([[0, 0, 8, 8]] * 2)
    assert torch.allclose(crop_resize(x, full, 8), x, atol=1e-5)
    # Integer 2x downscale of a box is average pooling of its pixels.
    box = torch.tensor([[2, 2, 6, 6]] * 2)
    ref = torch.nn.functional.avg_pool2d(x[:, :, 2:6, 2:6], 2)
    assert torch.allclose(crop_resize(x, box, 2), ref, atol=1e-5)
    errs = relative_errors(lambda t: crop_resize(t, box.to(t.device), 5).pow(2).sum(), [x])
    assert errs[0] <= 1e-2


def test_checkpoint_roundtrip(tmp_path):
    net = micro_net()
    save_checkpoint(tmp_path / "c", {"g": net}, {"note": "x"})
    groups, meta = load_checkpoint(tmp_path / "c")
    other = GenNetwork(3, 4, 2, 2, 4, "softmax")
    other.load_state_dict(groups["g"])
    assert param_digest(other) == param_digest(net) and meta["note"] == "x"


def test_checkpoint_version_checked(tmp_path):
    save_checkpoint(tmp_path / "c", {"g": micro_net()})
    text = (tmp_path / "c" / "manifest.txt").read_text()
    (tmp_path / "c" / "manifest.txt").write_text(text.replace("finet-ckpt/1", "finet-ckpt/9"))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c")


def test_failed_write_leaves_nothing(tmp_path):
    from finet.tensorio import write_container

    with pytest.raises(ValueError):
        write_container(tmp_path / "c", "v/1", {"bad name": np.zeros(2)})
    assert list(tmp_path.iterdir()) == []
