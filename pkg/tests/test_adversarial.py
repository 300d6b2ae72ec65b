import math

import pytest
import torch
from pydantic import ValidationError as PydanticValidationError

from arbinpaint.adversarial import (
    DiscOutput,
    Discriminator,
    DiscriminatorConfig,
    ExtractorConfig,
    ExtractorProfile,
    FeaturePyramid,
    LossParts,
    LossWeights,
    build_extractor,
    extractor_fingerprint,
    loss_d_adv,
    loss_feature_matching,
    loss_g_adv,
    loss_perceptual,
    loss_total,
    r1_penalty,
    save_extractor_weights,
)
from arbinpaint.errors import ConfigError, IncompatibleCheckpointError, TrainingAbortError, ValidationError
from arbinpaint.primitives import grad_check


def _out(logits: torch.Tensor, activations: list[torch.Tensor] | None = None) -> DiscOutput:
    return DiscOutput(logits=logits, activations=activations or [])


# discriminator


def test_discriminator_patch_grid():
    disc = Discriminator(DiscriminatorConfig(base_channels=8))
    out = disc(torch.rand(2, 3, 64, 64))

    assert out.logits.shape == (2, 1, 4, 4)
    assert [a.shape[-1] for a in out.activations] == [32, 16, 8, 4]


def test_discriminator_accepts_non_square():
    out = Discriminator(DiscriminatorConfig(base_channels=8))(torch.rand(1, 3, 72, 56))
    assert out.logits.shape == (1, 1, 4, 3)
    assert torch.isfinite(out.logits).all()


def test_discriminator_zero_params_give_zero_logits():
    disc = Discriminator(DiscriminatorConfig(base_channels=8))
    with torch.no_grad():
        for p in disc.parameters():
            p.zero_()
    assert disc(torch.rand(1, 3, 32, 32)).logits.abs().max() == 0.0


def test_discriminator_rejects_tiny_inputs():
    with pytest.raises(ValidationError):
        Discriminator(DiscriminatorConfig(base_channels=8))(torch.rand(1, 3, 12, 64))


# adversarial terms


def test_adversarial_closed_forms():
    zeros = _out(torch.zeros(1, 1, 4, 4))
    assert loss_g_adv(zeros).item() == pytest.approx(math.log(2), abs=1e-6)
    assert loss_g_adv(_out(torch.full((1, 1, 4, 4), -2.0))).item() == pytest.approx(2.126928, abs=1e-6)
    assert loss_d_adv(zeros, zeros).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    real, fake = _out(torch.ones(1, 1, 4, 4)), _out(-torch.ones(1, 1, 4, 4))
    assert loss_d_adv(real, fake).item() == pytest.approx(0.626523, abs=1e-6)


def test_adversarial_terms_stay_finite_at_extremes():
    assert loss_g_adv(_out(torch.full((1, 1, 2, 2), 50.0))).item() < 1e-20
    assert loss_g_adv(_out(torch.full((1, 1, 2, 2), -200.0))).item() == pytest.approx(200.0)


def test_generator_loss_is_softplus_identity():
    z = torch.randn(2, 1, 5, 5, generator=torch.Generator().manual_seed(0))
    lhs = loss_g_adv(_out(z)) - torch.nn.functional.softplus(z).mean()
    assert lhs.item() == pytest.approx(-z.mean().item(), abs=1e-6)


# R1


def test_r1_of_linear_discriminator_is_weight_norm():
    w = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    disc = lambda x: (x * w).sum(dim=(1, 2, 3))  # noqa: E731
    real = torch.rand(4, 3, 8, 8, dtype=torch.float64)

    assert r1_penalty(real, disc).item() == pytest.approx(w.pow(2).sum().item(), rel=1e-6)
    assert r1_penalty(real, disc, unsquared=True).item() == pytest.approx(w.norm().item(), rel=1e-6)


def test_r1_of_constant_discriminator_is_zero():
    assert r1_penalty(torch.rand(2, 3, 8, 8), lambda x: torch.zeros(x.shape[0])).item() == 0.0
    disc = Discriminator(DiscriminatorConfig(base_channels=4))
    with torch.no_grad():
        for p in disc.parameters():
            p.zero_()
    assert r1_penalty(torch.rand(1, 3, 32, 32), disc).item() == 0.0


def test_r1_is_differentiable_in_discriminator_params():
    disc = Discriminator(DiscriminatorConfig(base_channels=4))
    r1_penalty(torch.rand(1, 3, 32, 32), disc).backward()
    assert disc.stages[0][0].weight.grad is not None


def test_discriminator_input_gradient_matches_finite_differences():
    torch.manual_seed(2)
    disc = Discriminator(DiscriminatorConfig(base_channels=4)).double()
    img = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda x: disc(x).logits, [img], n_probe=20)
    assert report.passed, str(report)


# perceptual and feature matching


def test_perceptual_zero_on_identical_inputs():
    extractor = FeaturePyramid(ExtractorConfig(channels=[8, 16]))
    x = torch.rand(2, 3, 16, 16)
    assert loss_perceptual(x, x.clone(), extractor).item() == 0.0


def test_pixel_only_extractor_is_mean_abs_difference():
    extractor = FeaturePyramid(ExtractorConfig(channels=[]))
    a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    assert loss_perceptual(a, b, extractor).item() == pytest.approx((a - b).abs().mean().item(), abs=1e-7)


def test_perceptual_sums_layers():
    layers = lambda x: [x, 2 * x]  # noqa: E731
    a, b = torch.zeros(1, 3, 4, 4), torch.full((1, 3, 4, 4), 0.25)
    assert loss_perceptual(a, b, layers).item() == pytest.approx(0.75)


def test_perceptual_needs_layers():
    with pytest.raises(ConfigError):
        loss_perceptual(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), lambda x: [])


def test_feature_matching_offset():
    real = _out(torch.zeros(1), [torch.zeros(1, 4, 8, 8), torch.zeros(1, 8, 4, 4)])
    fake = _out(torch.zeros(1), [torch.full((1, 4, 8, 8), 0.5), torch.zeros(1, 8, 4, 4)])
    assert loss_feature_matching(real, fake).item() == pytest.approx(0.5)

    # mean over elements, so the spatial size does not matter
    real = _out(torch.zeros(1), [torch.zeros(1, 4, 32, 32), torch.zeros(1, 8, 16, 16)])
    fake = _out(torch.zeros(1), [torch.full((1, 4, 32, 32), 0.5), torch.zeros(1, 8, 16, 16)])
    assert loss_feature_matching(real, fake).item() == pytest.approx(0.5)


def test_feature_matching_identical_is_zero():
    acts = [torch.rand(1, 4, 8, 8)]
    assert loss_feature_matching(_out(torch.zeros(1), acts), _out(torch.zeros(1), [a.clone() for a in acts])) == 0.0


def test_feature_matching_mismatch():
    a = _out(torch.zeros(1), [torch.zeros(1, 4, 8, 8)])
    with pytest.raises(ValidationError):
        loss_feature_matching(a, _out(torch.zeros(1), [torch.zeros(1, 4, 8, 8)] * 2))
    with pytest.raises(ValidationError):
        loss_feature_matching(a, _out(torch.zeros(1), [torch.zeros(1, 4, 4, 8)]))


def test_feature_matching_does_not_reach_real_branch():
    real_act = torch.rand(1, 4, 8, 8, requires_grad=True)
    fake_act = torch.rand(1, 4, 8, 8, requires_grad=True)
    loss_feature_matching(_out(torch.zeros(1), [real_act]), _out(torch.zeros(1), [fake_act])).backward()

    assert real_act.grad is None
    assert fake_act.grad is not None


# total


def test_loss_total():
    weights = LossWeights()
    assert loss_total(LossParts(adv=1.0, per=1.0, fm=1.0, r1=1.0), weights) == pytest.approx(21.1)
    assert loss_total(LossParts(adv=0.0), weights) == 0.0
    zero = LossWeights(lambda_per=0, lambda_fm=0, lambda_r1=0)
    assert loss_total(LossParts(adv=0.7, per=5.0, fm=5.0, r1=5.0), zero) == pytest.approx(0.7)


def test_loss_total_aborts_on_nan():
    with pytest.raises(TrainingAbortError) as info:
        loss_total(LossParts(adv=torch.tensor(1.0), fm=torch.tensor(float("nan"))))
    assert info.value.part == "fm"


def test_loss_total_keeps_graph_of_tensor_parts():
    w = torch.tensor(2.0, requires_grad=True)
    total = loss_total(LossParts(adv=w * 1.5, per=w**2), LossWeights(lambda_per=1.0))
    total.backward()
    assert float(total.detach()) == pytest.approx(7.0)
    assert float(w.grad) == pytest.approx(5.5)
    assert LossParts(adv=w * 1.5).values()["adv"] == pytest.approx(3.0)


# extractor


def test_extractor_is_frozen_and_seeded():
    a = FeaturePyramid(ExtractorConfig(channels=[8, 16]))
    b = FeaturePyramid(ExtractorConfig(channels=[8, 16]))

    assert not any(p.requires_grad for p in a.parameters())
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values(), strict=True))
    assert [w.shape[0] for w in a.channel_weights] == [3, 8, 16]
    assert [t.shape[-1] for t in a(torch.rand(1, 3, 16, 16))] == [16, 16, 8]


def test_build_extractor_requires_config():
    with pytest.raises(ConfigError):
        build_extractor(None)


def test_pretrained_profile_requires_weights():
    with pytest.raises(PydanticValidationError):
        ExtractorConfig(profile=ExtractorProfile.PRETRAINED)


def test_pretrained_weights_load(tmp_path):
    trained = FeaturePyramid(ExtractorConfig(channels=[8], seed=7))
    path = save_extractor_weights(trained, tmp_path / "extractor.arb")

    loaded = FeaturePyramid(ExtractorConfig(channels=[8], profile=ExtractorProfile.PRETRAINED, weights=path))

    assert torch.equal(loaded.convs[0].weight, trained.convs[0].weight)
    assert extractor_fingerprint(loaded.cfg) == extractor_fingerprint(trained.cfg)


def test_pretrained_weights_must_match_layers(tmp_path):
    path = save_extractor_weights(FeaturePyramid(ExtractorConfig(channels=[8])), tmp_path / "extractor.arb")
    with pytest.raises(IncompatibleCheckpointError):
        FeaturePyramid(ExtractorConfig(channels=[16], profile=ExtractorProfile.PRETRAINED, weights=path))
