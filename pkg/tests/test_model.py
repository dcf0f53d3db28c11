import numpy as np
import pytest

from dcnet.engine import Tensor, activation, channel_offset, default_dtype, no_grad
from dcnet.model import (
    MODEL_VARIANTS,
    ModelSpec,
    OdeBlock,
    block_sigmas,
    build_autoencoder,
    build_model,
    count_params,
    discrete_rhs,
    forward,
    groups_for,
    ode_rhs,
)
from dcnet.ode import SolverConfig

SMALL = (4, 8, 8)


def _images(n=2, size=8, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 3, size, size)))


def test_groups_for():
    assert groups_for(64) == 32
    assert groups_for(16) == 16
    assert groups_for(48) == 16
    assert groups_for(3) == 1


def test_spec_validation_and_text_round_trip():
    with pytest.raises(ValueError):
        ModelSpec(variant="bogus")
    with pytest.raises(ValueError):
        ModelSpec(widths=(4, 8))
    with pytest.raises(ValueError):
        ModelSpec(task="segment")
    s = ModelSpec(variant="dcn_meta_sigma_t", widths=(3, 5, 7), rtol=1e-4, T=1.5)
    assert ModelSpec.from_text(s.to_text()) == s
    assert ModelSpec.from_text(ModelSpec().to_text()).T is None


@pytest.mark.parametrize("variant", MODEL_VARIANTS)
def test_every_variant_classifies(variant):
    model = build_model(ModelSpec(variant=variant, widths=SMALL))
    with no_grad():
        logits, results = forward(model, _images(), record_trajectories=True)
    assert logits.shape == (2, 10)
    assert np.all(np.isfinite(logits.data))
    assert len(results) == 3
    for res in results:
        ts = [t for t, _ in res.trajectory]
        assert ts[0] == 0.0 and all(b > a for a, b in zip(ts, ts[1:]))
        if model.spec.residual:
            assert res.nfe == 0
        else:
            assert res.nfe >= 8 and ts[-1] == model.spec.block_T


def test_same_seed_same_parameters():
    a = build_model(ModelSpec(widths=SMALL), seed=3).named_parameters()
    b = build_model(ModelSpec(widths=SMALL), seed=3).named_parameters()
    c = build_model(ModelSpec(widths=SMALL), seed=4).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_structured_filters_use_fewer_parameters():
    widths = (16, 32, 64)
    dcn = count_params(build_model(ModelSpec("dcn_ode", widths)))
    ode = count_params(build_model(ModelSpec("ode_net", widths)))
    assert dcn < ode
    blk_srf = OdeBlock(8, "shared_sigma")
    blk_pix = OdeBlock(8, "pixel")
    srf_conv = sum(p.data.size for p in blk_srf.conv1.named_parameters().values())
    pix_conv = sum(p.data.size for p in blk_pix.conv1.named_parameters().values())
    assert srf_conv == 8 * 8 * 6 + 1
    assert pix_conv == 8 * 8 * 9


def test_head_parameter_count():
    model = build_model(ModelSpec(widths=SMALL, num_classes=7))
    head = model.head.named_parameters()
    assert head["weight"].shape == (7, 8) and head["bias"].shape == (7,)


def test_per_channel_sigma_kernels_are_seven():
    model = build_model(ModelSpec("dcn_sigma_ji", widths=SMALL))
    for blk in model.blocks:
        assert blk.kernel_sizes() == (7, 7)


def test_rhs_is_the_composed_pipeline():
    with default_dtype(np.float64):
        rng = np.random.default_rng(1)
        blk = OdeBlock(64, rng=rng)
        blk.d1.data = rng.normal(size=64)
        blk.d2.data = rng.normal(size=64)
        h = Tensor(rng.normal(size=(1, 64, 5, 5)))
        t = 0.7
        x = activation(blk.norm1(h), "celu")
        x = channel_offset(blk.conv1(x, t), blk.d1, t)
        x = activation(blk.norm2(x), "celu")
        x = channel_offset(blk.conv2(x, t), blk.d2, t)
        expected = blk.norm3(x).data
        assert np.array_equal(ode_rhs(h, t, blk).data, expected)


def test_time_offsets_make_field_time_dependent():
    with default_dtype(np.float64):
        rng = np.random.default_rng(2)
        blk = OdeBlock(64, rng=rng)
        h = Tensor(rng.normal(size=(1, 64, 5, 5)))
        # zero offsets and a time-free kernel: autonomous
        assert np.array_equal(blk.rhs(h, 0.0).data, blk.rhs(h, 1.3).data)
        blk.d1.data = rng.normal(size=64)
        assert not np.allclose(blk.rhs(h, 0.0).data, blk.rhs(h, 1.3).data)


def test_one_channel_groups_cancel_offsets():
    # with one channel per norm group a per-channel constant is normalized away
    with default_dtype(np.float64):
        rng = np.random.default_rng(3)
        blk = OdeBlock(4, rng=rng)
        h = Tensor(rng.normal(size=(1, 4, 6, 6)))
        base = blk.rhs(h, 0.5).data
        blk.d1.data = rng.normal(size=4)
        blk.d2.data = rng.normal(size=4)
        np.testing.assert_allclose(blk.rhs(h, 0.5).data, base, atol=1e-10)


def test_rhs_rejects_wrong_channels():
    blk = OdeBlock(4)
    with pytest.raises(ValueError):
        blk.rhs(Tensor(np.zeros((1, 3, 4, 4))), 0.0)


def test_residual_block_adds_branch():
    blk = OdeBlock(4, kind="pixel", act="relu", residual=True)
    h = Tensor(np.random.default_rng(0).normal(size=(2, 4, 6, 6)))
    out, res = blk(h)
    assert np.array_equal(out.data, (h + discrete_rhs(h, blk)).data)
    assert res.nfe == 0
    assert "offsets.d1" not in blk.named_parameters()


def test_block_end_time_override():
    blk = OdeBlock(4, solver=SolverConfig(1e-4, 1e-4))
    h = Tensor(np.random.default_rng(0).normal(size=(1, 4, 6, 6)))
    with no_grad():
        _, full = blk(h, record=True)
        _, short = blk(h, record=True, T=0.5)
    assert full.trajectory[-1][0] == 2.0 and short.trajectory[-1][0] == 0.5


def test_block_sigmas():
    sig = block_sigmas(build_model(ModelSpec("dcn_ode", widths=SMALL)))
    assert [s.shape for s in sig] == [(2,)] * 3
    assert np.all(sig[0] > 0)
    assert all(s.size == 0 for s in block_sigmas(build_model(ModelSpec("ode_net", widths=SMALL))))


def test_autoencoder_shapes_and_encoder_transfer():
    spec = ModelSpec(widths=SMALL, task="reconstruct")
    ae = build_model(spec)
    with no_grad():
        out, results = ae(_images())
    assert out.shape == (2, 3, 8, 8)
    assert len(results) == 5
    clf = build_model(ModelSpec(widths=SMALL), seed=9)
    enc = {f"encoder.{k}": v.data for k, v in clf.encoder.named_parameters().items()}
    ae2 = build_autoencoder(ModelSpec(widths=SMALL), encoder_params=enc)
    assert ae2.spec.task == "reconstruct"
    for k, v in ae2.encoder.named_parameters().items():
        assert np.array_equal(v.data, enc[f"encoder.{k}"])
    with pytest.raises(ValueError):
        build_autoencoder(spec, encoder_params={})


def test_contrast_scale_one_is_identity():
    model = build_model(ModelSpec(widths=SMALL))
    x = _images()
    with no_grad():
        a, _ = forward(model, x)
        b, _ = forward(model, x, contrast_block_scale=1.0)
    assert np.array_equal(a.data, b.data)


def test_gradients_reach_every_parameter():
    model = build_model(ModelSpec("dcn_ode", widths=(32, 64, 64)))
    logits, _ = forward(model, _images(n=1))
    logits.sum().backward()
    missing = [k for k, p in model.named_parameters().items() if p.grad is None]
    assert not missing
