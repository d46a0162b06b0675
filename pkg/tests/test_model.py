import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advdepth.geometry import D_MAX
from advdepth.model import (
    Backbone,
    ConfigError,
    GeneratorConfig,
    Norm,
    affine_norm_parameters,
    build_generator,
    count_parameters,
)


def tiny(**kw):
    base = dict(backbone=Backbone.TINY, normalization=Norm.NONE, num_output_scales=4, width_multiplier=0.125)
    base.update(kw)
    return GeneratorConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = GeneratorConfig()
        assert (c.backbone, c.normalization, c.num_output_scales) == (Backbone.VGG30, Norm.NONE, 4)

    @pytest.mark.parametrize("kw", [
        {"backbone": "VGG31"},
        {"normalization": "LAYER"},
        {"num_output_scales": 0},
        {"num_output_scales": 5},
        {"width_multiplier": 0.5},
        {"backbone": "TINY", "width_multiplier": 0.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            GeneratorConfig(**kw)

    def test_string_enums_and_dict_roundtrip(self):
        c = GeneratorConfig(backbone="RESNET18", normalization="BATCH", num_output_scales=2)
        assert GeneratorConfig(**c.to_dict()) == c


class TestParameterCounts:
    def test_vgg30_near_published_size(self):
        n = count_parameters(build_generator(GeneratorConfig()))
        assert abs(n - 31.6e6) / 31.6e6 <= 0.10

    @pytest.mark.parametrize("backbone", ["VGG30", "RESNET18", "RESNET50", "TINY"])
    @pytest.mark.parametrize("norm", ["BATCH", "INSTANCE"])
    def test_normalization_changes_only_affine_parameters(self, backbone, norm):
        kw = {"width_multiplier": 0.25} if backbone == "TINY" else {}
        plain = build_generator(GeneratorConfig(backbone=backbone, normalization="NONE", **kw))
        normed = build_generator(GeneratorConfig(backbone=backbone, normalization=norm, **kw))
        assert affine_norm_parameters(plain) == 0
        assert affine_norm_parameters(normed) > 0
        assert count_parameters(normed) - affine_norm_parameters(normed) == count_parameters(plain)

    def test_fewer_scales_fewer_parameters(self):
        counts = [count_parameters(build_generator(tiny(num_output_scales=s))) for s in (1, 2, 3, 4)]
        assert counts == sorted(counts) and len(set(counts)) == 4

    def test_backbone_ordering(self):
        r18 = count_parameters(build_generator(GeneratorConfig(backbone="RESNET18")))
        r50 = count_parameters(build_generator(GeneratorConfig(backbone="RESNET50")))
        assert r18 < r50


class TestForward:
    def test_vgg30_two_scales_shapes(self):
        gen = build_generator(GeneratorConfig(num_output_scales=2)).eval()
        with torch.no_grad():
            out = gen(torch.rand(1, 3, 256, 512))
        assert [tuple(o.shape) for o in out] == [(1, 2, 256, 512), (1, 2, 128, 256)]

    def test_zero_heads_give_half_dmax(self):
        gen = build_generator(tiny())
        gen.zero_heads()
        with torch.no_grad():
            out = gen(torch.rand(2, 3, 64, 128))
        for d in out:
            assert torch.allclose(d, torch.full_like(d, 0.5 * D_MAX))
        assert 0.5 * D_MAX == pytest.approx(0.15)

    def test_eval_mode_deterministic(self):
        gen = build_generator(tiny(normalization="BATCH")).eval()
        x = torch.rand(2, 3, 32, 64)
        with torch.no_grad():
            a, b = gen(x), gen(x)
        assert all(torch.equal(p, q) for p, q in zip(a, b))

    def test_indivisible_input(self):
        gen = build_generator(tiny())
        with pytest.raises(ValueError, match="divisible"):
            gen(torch.rand(1, 3, 48, 100))

    def test_gradient_reaches_encoder_from_every_scale(self):
        gen = build_generator(tiny())
        x = torch.rand(2, 3, 32, 64)
        for s in range(4):
            gen.zero_grad()
            gen(x)[s].sum().backward()
            first = gen.encoder.stages[0][0][0].weight.grad
            assert first is not None and float(first.norm()) > 0, f"scale {s}"

    @settings(max_examples=12, deadline=None)
    @given(
        backbone=st.sampled_from(["TINY", "RESNET18"]),
        norm=st.sampled_from(["NONE", "BATCH", "INSTANCE"]),
        scales=st.integers(1, 4),
        seed=st.integers(0, 100),
    )
    def test_shape_and_range_contract(self, backbone, norm, scales, seed):
        torch.manual_seed(seed)
        kw = {"width_multiplier": 0.125} if backbone == "TINY" else {}
        gen = build_generator(GeneratorConfig(backbone=backbone, normalization=norm, num_output_scales=scales, **kw))
        gen.train()
        x = torch.randn(2, 3, 64, 64) * 3
        with torch.no_grad():
            out = gen(x)
        assert len(out) == scales
        for s, d in enumerate(out):
            assert d.shape == (2, 2, 64 >> s, 64 >> s)
            assert float(d.min()) >= 0 and float(d.max()) <= D_MAX
