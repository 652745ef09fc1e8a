import numpy as np
import pytest

from pnrdiff import nn
from pnrdiff.gradchecks import randomized_unet
from pnrdiff.nn import ParamStore, const
from pnrdiff.schedule import training_schedule
from pnrdiff.trainer import AdamW, train_step
from pnrdiff.unet import (
    BlockSpec,
    Nets,
    UNetConfig,
    conv_flops,
    denoiser_forward,
    init_res_block,
    make_denoiser,
    make_predictor,
    predictor_forward,
    res_block,
)


@pytest.fixture(scope="module")
def small_predictor():
    return make_predictor(1, base_channels=4, seed=3)


class TestConfig:
    def test_fixed_depths(self):
        cfg = UNetConfig(8, 1, 1)
        assert cfg.channel_multipliers == (1, 2, 3, 4)

    @pytest.mark.parametrize("kw", [dict(base_channels=0), dict(in_channels=0), dict(blocks_per_depth=0)])
    def test_rejects_nonpositive(self, kw):
        args = dict(base_channels=4, in_channels=1, out_channels=1)
        args.update(kw)
        with pytest.raises(ValueError):
            UNetConfig(**args)

    def test_to_dict_round_trip(self):
        cfg = UNetConfig(6, 3, 1, 2)
        assert UNetConfig(**{k: v for k, v in cfg.to_dict().items() if k != "channel_multipliers"}) == cfg


class TestResBlock:
    def test_zero_second_conv_gives_skip_path(self):
        rng = np.random.default_rng(0)
        store = ParamStore()
        spec = BlockSpec("b", 3, 5)
        init_res_block(store, rng, spec, np.float64)
        x = const(rng.standard_normal((2, 6, 6, 3)))
        out = res_block(x, store, spec).value
        skip = nn.conv2d(x, store["b.skip.w"], store["b.skip.b"]).value
        np.testing.assert_allclose(out, skip, atol=1e-12)

    def test_identity_when_channels_match(self):
        rng = np.random.default_rng(1)
        store = ParamStore()
        spec = BlockSpec("b", 4, 4)
        init_res_block(store, rng, spec, np.float64)
        assert not spec.needs_skip_conv
        x = rng.standard_normal((1, 4, 4, 4))
        np.testing.assert_allclose(res_block(const(x), store, spec).value, x, atol=1e-12)

    @pytest.mark.parametrize("resample,h,w,ho,wo", [("down", 7, 10, 4, 5), ("up", 3, 5, 6, 10), ("none", 5, 3, 5, 3)])
    def test_shapes(self, resample, h, w, ho, wo):
        store = ParamStore()
        spec = BlockSpec("b", 2, 6, resample)
        init_res_block(store, np.random.default_rng(2), spec)
        out = res_block(const(np.zeros((3, h, w, 2), np.float32)), store, spec)
        assert out.shape == (3, ho, wo, 6)


class TestShapes:
    @pytest.mark.parametrize("h,w", [(17, 23), (32, 32), (128, 128), (9, 31)])
    def test_predictor_preserves_size(self, small_predictor, h, w):
        y = np.random.default_rng(0).uniform(-1, 1, (1, 1, h, w)).astype(np.float32)
        assert predictor_forward(small_predictor, y).shape == (1, 1, h, w)

    def test_zero_output_at_init(self, small_predictor):
        y = np.random.default_rng(1).uniform(-1, 1, (2, 1, 17, 23)).astype(np.float32)
        np.testing.assert_array_equal(predictor_forward(small_predictor, y).value, 0.0)

    def test_denoiser_shape(self):
        net = make_denoiser(1, base_channels=2)
        z = np.zeros((1, 1, 32, 32), np.float32)
        assert denoiser_forward(net, z, 0.5, z).shape == (1, 1, 32, 32)

    def test_color_channels(self):
        net = make_denoiser(3, base_channels=2)
        assert net.config.in_channels == 7
        z = np.zeros((2, 3, 12, 12), np.float32)
        assert denoiser_forward(net, z, np.array([0.2, 0.9]), z).shape == (2, 3, 12, 12)

    def test_denoiser_rejects_misaligned(self):
        net = make_denoiser(1, base_channels=2)
        with pytest.raises(ValueError):
            denoiser_forward(net, np.zeros((1, 1, 8, 8)), 0.5, np.zeros((1, 1, 8, 9)))

    def test_params_independent_of_size(self):
        net = make_predictor(1, base_channels=4)
        before = {n: p.value.shape for n, p in net.store.params.items()}
        for h, w in [(17, 23), (128, 128)]:
            net(np.zeros((1, 1, h, w), np.float32))
        assert {n: p.value.shape for n, p in net.store.params.items()} == before


class TestStructure:
    def test_three_halvings_four_skips(self):
        net = make_predictor(1, base_channels=2)
        assert sum(s.resample == "down" for s in net.down) == 3
        assert sum(s.resample == "up" for s in net.up) == 3
        assert net.n_skips == 4

    @pytest.mark.parametrize("skip", range(4))
    def test_removing_any_skip_changes_output(self, skip):
        net = randomized_unet(UNetConfig(2, 1, 1), np.random.default_rng(4))
        x = np.random.default_rng(5).standard_normal((1, 1, 16, 16))
        full = net(x).value
        cut = net(x, skip_mask={skip}).value
        assert np.abs(full - cut).max() > 1e-6

    def test_deterministic(self):
        net = randomized_unet(UNetConfig(2, 3, 1), np.random.default_rng(6))
        z = np.random.default_rng(7).standard_normal((2, 1, 11, 13))
        a = denoiser_forward(net, z, 0.4, z).value
        b = denoiser_forward(net, z, 0.4, z).value
        np.testing.assert_array_equal(a, b)

    def test_same_seed_same_weights(self):
        a, b = make_predictor(1, 4, seed=9), make_predictor(1, 4, seed=9)
        for pa, pb in zip(a.store, b.store):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_level_conditioning_after_one_step(self):
        rng = np.random.default_rng(8)
        nets = Nets(make_predictor(1, 2, seed=0), make_denoiser(1, 2, seed=1))
        x0 = rng.uniform(-1, 1, (2, 1, 16, 16)).astype(np.float32)
        opt = AdamW(nets.stores(), lr=1e-3)
        train_step(nets, x0, x0, training_schedule().level_intervals(), opt, rng)
        z = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
        y = x0[:1]
        diff = np.abs(nets.denoise(z, 0.2, y) - nets.denoise(z, 0.9, y)).sum()
        assert diff > 0


class TestCounts:
    def test_single_conv_closed_form(self):
        assert conv_flops(3, 1, 1, 8, 8) == 1152
        store = ParamStore()
        store.add("w", nn.conv_init(np.random.default_rng(0), 3, 1, 1))
        store.add("b", np.zeros(1))
        assert store.count() == 10

    def test_params_match_store(self):
        net = make_predictor(1, 4, blocks_per_depth=2)
        assert net.count_params() == sum(p.value.size for p in net.store)

    def test_doubling_channels_roughly_quadruples(self):
        a = make_predictor(1, 8).count_params()
        b = make_predictor(1, 16).count_params()
        assert 3.8 < b / a < 4.0

    def test_flops_linear_in_pixels(self):
        net = make_denoiser(1, 4)
        f1 = net.count_flops(32, 32)
        assert net.count_flops(64, 64) == 4 * f1
        assert net.count_flops(32, 64) == 2 * f1

    def test_flops_use_padded_size(self):
        net = make_denoiser(1, 4)
        assert net.count_flops(17, 23) == net.count_flops(24, 24)

    @pytest.mark.parametrize("h,w", [(16, 16), (17, 23)])
    def test_flops_match_instrumented_forward(self, monkeypatch, h, w):
        # tally every convolution actually executed, from its real output shape
        tally = []
        real = nn.conv2d

        def counting(x, wt, b=None, stride=1):
            out = real(x, wt, b, stride)
            k, _, cin, cout = wt.value.shape
            _, ho, wo, _ = out.value.shape
            tally.append(2 * k * k * cin * cout * ho * wo)
            return out

        monkeypatch.setattr(nn, "conv2d", counting)
        net = make_denoiser(1, 2, blocks_per_depth=2)
        z = np.zeros((1, 1, h, w), np.float32)
        denoiser_forward(net, z, 0.5, z)
        assert net.count_flops(h, w) == sum(tally)

    def test_default_split_predictor_larger(self):
        assert make_predictor(1).count_params() > make_denoiser(1).count_params()
