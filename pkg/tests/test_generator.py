import pytest
import torch

from uapkit.generator import GeneratorArch, init_generator, make_seed_pattern

SMALL = GeneratorArch(in_channels=3, height=8, width=8, base_width=8, num_resnet_blocks=1)


class TestGeneratorArch:
    def test_defaults_valid(self):
        arch = GeneratorArch()
        assert arch.base_width == 64 and arch.num_resnet_blocks == 2

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"height": 30},  # not a multiple of 4
            {"width": 34},
            {"height": 4, "width": 4},  # too small for a usable bottleneck
            {"base_width": 4},
            {"num_resnet_blocks": 0},
            {"in_channels": 0},
        ],
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            GeneratorArch(**kwargs)


class TestSeedPattern:
    def test_deterministic_and_seed_sensitive(self):
        a = make_seed_pattern(SMALL, 42)
        b = make_seed_pattern(SMALL, 42)
        c = make_seed_pattern(SMALL, 43)
        assert torch.equal(a.data, b.data)
        assert not torch.equal(a.data, c.data)
        assert a.data.shape == (3, 8, 8)

    def test_digest_is_32_bytes_and_tracks_content(self):
        a = make_seed_pattern(SMALL, 0)
        b = make_seed_pattern(SMALL, 1)
        assert len(a.digest()) == 32
        assert a.digest() == make_seed_pattern(SMALL, 0).digest()
        assert a.digest() != b.digest()


class TestPerturbationGenerator:
    @pytest.mark.parametrize(
        "arch",
        [
            SMALL,
            GeneratorArch(in_channels=1, height=16, width=12, base_width=8, num_resnet_blocks=2),
        ],
    )
    def test_output_shapes_and_ranges(self, arch):
        gen = init_generator(arch, 0)
        z = make_seed_pattern(arch, 0)
        noise, flow = gen(z.data)
        assert noise.shape == (arch.in_channels, arch.height, arch.width)
        assert flow.shape == (2, arch.height, arch.width)
        assert noise.abs().max().item() < 1.0
        assert flow.abs().max().item() < 1.0

    def test_signed_flow_output_straddles_zero(self):
        gen = init_generator(SMALL, 3)
        _, flow = gen(make_seed_pattern(SMALL, 3).data)
        assert flow.min().item() < 0 < flow.max().item()

    def test_unsigned_flow_variant_stays_positive(self):
        arch = GeneratorArch(3, 8, 8, base_width=8, num_resnet_blocks=1, signed_flow=False)
        gen = init_generator(arch, 3)
        _, flow = gen(make_seed_pattern(arch, 3).data)
        assert flow.min().item() > 0.0
        assert flow.max().item() < 1.0

    def test_init_is_deterministic_per_seed(self):
        g1 = init_generator(SMALL, 7)
        g2 = init_generator(SMALL, 7)
        g3 = init_generator(SMALL, 8)
        s1, s2, s3 = g1.state_dict(), g2.state_dict(), g3.state_dict()
        assert all(torch.equal(s1[k], s2[k]) for k in s1)
        assert any(not torch.equal(s1[k], s3[k]) for k in s1)
        z = make_seed_pattern(SMALL, 7)
        n1, f1 = g1(z.data)
        n2, f2 = g2(z.data)
        assert torch.equal(n1, n2) and torch.equal(f1, f2)

    def test_rejects_wrong_pattern_shape(self):
        gen = init_generator(SMALL, 0)
        with pytest.raises(ValueError):
            gen(torch.randn(3, 8, 4))
        with pytest.raises(ValueError):
            gen(torch.randn(1, 3, 8, 8))

    def test_all_parameters_receive_gradient(self):
        gen = init_generator(SMALL, 1)
        noise, flow = gen(make_seed_pattern(SMALL, 1).data)
        (noise.square().sum() + flow.square().sum()).backward()
        missing = [n for n, p in gen.named_parameters() if p.grad is None]
        assert not missing
        # encoder feeds both heads, so its gradients should carry signal
        enc_norm = sum(
            p.grad.abs().sum().item() for n, p in gen.named_parameters() if n.startswith("encoder")
        )
        assert enc_norm > 0

    def test_weight_gradients_match_finite_differences(self):
        arch = SMALL
        gen = init_generator(arch, 2).double()
        z = make_seed_pattern(arch, 2).data.double()
        target_n = torch.randn(3, 8, 8, dtype=torch.float64)
        target_f = torch.randn(2, 8, 8, dtype=torch.float64)

        def loss_fn():
            noise, flow = gen(z)
            return ((noise - target_n) ** 2).sum() + ((flow - target_f) ** 2).sum()

        loss = loss_fn()
        loss.backward()
        params = dict(gen.named_parameters())
        eps = 1e-6
        checked = 0
        torch.manual_seed(0)
        for name in ["encoder.0.weight", "noise_decoder.9.weight", "flow_decoder.0.bias"]:
            p = params[name]
            flat = p.data.flatten()
            idx = int(torch.randint(0, flat.numel(), (1,)))
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                hi = loss_fn().item()
                flat[idx] = orig - eps
                lo = loss_fn().item()
                flat[idx] = orig
            fd = (hi - lo) / (2 * eps)
            an = p.grad.flatten()[idx].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-3)
            checked += 1
        assert checked == 3
