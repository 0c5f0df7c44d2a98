import pytest
import torch

from oracles import central_fd_check
from safemark.autoencoder import (BaseAutoencoder, InjectionConv, WatermarkAutoencoder, emit_straight_through,
                                  frozen_digest, stage1_loss, train_stage1)
from safemark.datamodel import DomainError, RunConfig, ShapeError


def micro_ae(dtype=torch.float64):
    torch.manual_seed(0)
    ae = WatermarkAutoencoder(d=2, f=2, channels=(4,), n_res=0, groups=2).to(dtype)
    return ae


def test_shapes():
    ae = WatermarkAutoencoder(d=4, f=4, channels=(8, 16), groups=4)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    z = ae.encode(x)
    assert z.shape == (2, 4, 8, 8)
    zm = ae.inject(z, ae.encode(x.flip(0)))
    assert zm.shape == z.shape
    assert ae.decode_image(zm).shape == x.shape and ae.decode_watermark(zm).shape == x.shape
    assert ae.extract(x).shape == x.shape


def test_shape_errors():
    ae = WatermarkAutoencoder(d=4, f=4, channels=(8, 16), groups=4)
    with pytest.raises(ShapeError):
        ae.encode(torch.zeros(1, 3, 30, 30))
    with pytest.raises(ShapeError):
        ae.encode(torch.zeros(1, 3, 32, 16))
    with pytest.raises(ShapeError):
        ae.inject(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 4))
    with pytest.raises(ShapeError):
        ae.decode_image(torch.zeros(1, 3, 8, 8))


def test_pass_through_injection():
    inj = InjectionConv(4)
    a, b = torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8)
    assert torch.equal(inj(a, b), a)


def test_dual_decoders_share_init_and_freeze():
    base = BaseAutoencoder(channels=(8, 16), groups=4)
    ae = WatermarkAutoencoder.from_base(base)
    z = torch.randn(1, 4, 8, 8)
    assert torch.equal(ae.decode_image(z), ae.decode_watermark(z))
    assert not any(p.requires_grad for p in ae.dec_i.parameters())
    names = {id(p) for p in ae.trainable_parameters()}
    assert not any(id(p) in names for p in ae.dec_i.parameters())


def test_stage1_loss_values():
    x = torch.zeros(1, 3, 4, 4)
    w = torch.zeros(1, 3, 4, 4)
    loss = stage1_loss(x, w, x + 0.1, w + 0.2, gamma=0.5)
    assert loss.img.item() == pytest.approx(0.01)
    assert loss.wm.item() == pytest.approx(0.04)
    assert loss.total.item() == pytest.approx(0.01 + 0.5 * 0.04)
    with pytest.raises(DomainError):
        stage1_loss(x, w, x, w, gamma=0.0)


def test_stage1_gradient_fd():
    ae = micro_ae()
    params = ae.trainable_parameters()
    assert sum(p.numel() for p in params) <= 1000
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    w = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1

    def loss_fn():
        zm = ae.inject(ae.encode(x), ae.encode(w))
        return stage1_loss(x, w, ae.decode_image(zm), ae.decode_watermark(zm), gamma=1.0).total

    assert central_fd_check(loss_fn, params) < 1e-4


def test_emit_straight_through():
    x = torch.tensor([0.1234, -2.0, 0.999], requires_grad=True)
    y = emit_straight_through(x)
    assert torch.allclose(y, torch.round((x.clamp(-1, 1) + 1) * 127.5) / 127.5 - 1)
    y.sum().backward()
    assert torch.equal(x.grad, torch.ones(3))


def test_train_stage1_short_run_keeps_frozen_decoder():
    torch.manual_seed(0)
    base = BaseAutoencoder(channels=(8, 8), groups=4)
    ae = WatermarkAutoencoder.from_base(base)
    digest = frozen_digest(ae)
    x = torch.rand(8, 3, 16, 16) * 2 - 1
    cfg = RunConfig(resolution=16, batch=4)
    ae, curves = train_stage1(x, x.flip(0), cfg, ae, steps=5)
    assert len(curves) == 5 and all(r["img"] >= 0 and r["wm"] >= 0 for r in curves)
    assert frozen_digest(ae) == digest


def test_train_stage1_zero_budget():
    ae = WatermarkAutoencoder(channels=(8, 8), groups=4)
    before = {k: v.clone() for k, v in ae.state_dict().items()}
    ae, curves = train_stage1(torch.zeros(2, 3, 16, 16), torch.zeros(2, 3, 16, 16), RunConfig(resolution=16), ae,
                              steps=0)
    assert curves == [] and all(torch.equal(before[k], v) for k, v in ae.state_dict().items())
