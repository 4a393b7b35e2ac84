"""Gated layer semantics, network shape contracts, init, checkpoints."""

import numpy as np
import pytest

from floodseg import autodiff as ad
from floodseg.autodiff import ConvParams, Tensor
from floodseg.model import FloodNet, GatedConv, ModelConfig

from oracles import conv2d_reference


def conv_params(rng, out_ch, in_ch):
    return ConvParams(
        Tensor(rng.normal(size=(out_ch, in_ch, 3, 3))),
        Tensor(rng.normal(size=out_ch)),
    )


def small_config(**kw):
    base = dict(
        spectral_channels=3, use_elevation_path=True, blocks=2,
        base_channels=4, patch_size=16, dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


class TestGatedConv:
    def test_zero_elevation_conv_halves_spectral(self):
        rng = np.random.default_rng(0)
        spec = conv_params(rng, 3, 2)
        elev = ConvParams(Tensor(np.zeros((3, 1, 3, 3))), Tensor(np.zeros(3)))
        layer = GatedConv(spec, elev)
        x = Tensor(rng.normal(size=(2, 6, 6)))
        xe = Tensor(rng.normal(size=(1, 6, 6)))
        y, ye = layer.forward(x, xe)
        np.testing.assert_allclose(ye.data, 0.5)
        ref = conv2d_reference(x.data, spec.kernel.data, spec.bias.data)
        np.testing.assert_allclose(y.data, 0.5 * ref, rtol=1e-12)

    def test_zero_spectral_input_zero_output(self):
        rng = np.random.default_rng(1)
        spec = ConvParams(Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(np.zeros(3)))
        layer = GatedConv(spec, conv_params(rng, 3, 1))
        y, _ = layer.forward(Tensor(np.zeros((2, 5, 5))), Tensor(rng.normal(size=(1, 5, 5))))
        np.testing.assert_allclose(y.data, 0.0)

    def test_matches_conv_oracle_composition(self):
        rng = np.random.default_rng(2)
        spec = conv_params(rng, 4, 3)
        elev = conv_params(rng, 4, 2)
        layer = GatedConv(spec, elev)
        x = Tensor(rng.normal(size=(3, 7, 7)))
        xe = Tensor(rng.normal(size=(2, 7, 7)))
        y, ye = layer.forward(x, xe)
        gate = 1.0 / (1.0 + np.exp(-conv2d_reference(xe.data, elev.kernel.data, elev.bias.data)))
        want = conv2d_reference(x.data, spec.kernel.data, spec.bias.data) * gate
        np.testing.assert_allclose(y.data, want, rtol=1e-10)
        np.testing.assert_allclose(ye.data, gate, rtol=1e-10)

    def test_gate_strictly_inside_unit_interval(self):
        # normalized elevation inputs keep the gate away from saturation
        rng = np.random.default_rng(3)
        layer = GatedConv(conv_params(rng, 2, 1), conv_params(rng, 2, 1))
        _, ye = layer.forward(
            Tensor(rng.normal(size=(1, 8, 8))), Tensor(rng.uniform(0, 1, size=(1, 8, 8)))
        )
        assert (ye.data > 0).all() and (ye.data < 1).all()

    def test_out_channels_must_match(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError, match="out_ch"):
            GatedConv(conv_params(rng, 2, 1), conv_params(rng, 3, 1))

    def test_gate_saturation_monotone(self):
        # driving the elevation conv output to +-inf opens/closes the gate
        rng = np.random.default_rng(5)
        spec = conv_params(rng, 2, 1)
        x = Tensor(rng.normal(size=(1, 6, 6)))
        xe = Tensor(rng.normal(size=(1, 6, 6)))
        ref = conv2d_reference(x.data, spec.kernel.data, spec.bias.data)
        for bias, target in ((-30.0, np.zeros_like(ref)), (30.0, ref)):
            elev = ConvParams(
                Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.full(2, bias))
            )
            y, _ = GatedConv(spec, elev).forward(x, xe)
            np.testing.assert_allclose(y.data, target, atol=1e-10)


class TestModelShapes:
    def test_output_contract_128(self):
        m = FloodNet(ModelConfig(spectral_channels=6, patch_size=128, dtype="float32"))
        rng = np.random.default_rng(0)
        spec = Tensor(rng.normal(size=(6, 128, 128)).astype(np.float32))
        elev = Tensor(rng.uniform(0, 1, size=(1, 128, 128)).astype(np.float32))
        assert m.forward(spec, elev).shape == (2, 128, 128)

    def test_bottleneck_trace_p32(self):
        cfg = ModelConfig(spectral_channels=3, patch_size=32, dtype="float64")
        m = FloodNet(cfg)
        m.init_params(0)
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 32, 32)))
        xe = Tensor(rng.uniform(0, 1, size=(1, 32, 32)))
        for b in range(cfg.blocks):  # encoder half only
            for layer in m.enc[b]:
                x, xe = layer.forward(x, xe)
                x = ad.relu(x)
            x = ad.max_pool_2(x)
            xe = ad.avg_pool_2(xe)
        assert x.shape == (32, 4, 4)
        assert xe.shape == (32, 4, 4)

    def test_zero_params_give_uniform_scores(self):
        m = FloodNet(small_config())
        rng = np.random.default_rng(2)
        scores = m.forward(
            Tensor(rng.normal(size=(3, 16, 16))),
            Tensor(rng.uniform(0, 1, size=(1, 16, 16))),
        )
        np.testing.assert_array_equal(scores.data, np.zeros((2, 16, 16)))

    @pytest.mark.parametrize("patch,blocks", [(16, 2), (32, 3), (16, 1)])
    def test_decoder_restores_input_resolution(self, patch, blocks):
        m = FloodNet(small_config(patch_size=patch, blocks=blocks))
        m.init_params(1)
        rng = np.random.default_rng(3)
        scores = m.forward(
            Tensor(rng.normal(size=(3, patch, patch))),
            Tensor(rng.uniform(0, 1, size=(1, patch, patch))),
        )
        assert scores.shape == (2, patch, patch)

    def test_no_elevation_path_mode(self):
        m = FloodNet(small_config(use_elevation_path=False))
        m.init_params(4)
        rng = np.random.default_rng(4)
        scores = m.forward(Tensor(rng.normal(size=(3, 16, 16))))
        assert scores.shape == (2, 16, 16)

    def test_elevation_required_when_path_enabled(self):
        m = FloodNet(small_config())
        with pytest.raises(ValueError, match="elevation"):
            m.forward(Tensor(np.zeros((3, 16, 16))))

    def test_wrong_patch_size_rejected(self):
        m = FloodNet(small_config())
        with pytest.raises(ValueError, match="16x16"):
            m.forward(Tensor(np.zeros((3, 8, 8))), Tensor(np.zeros((1, 8, 8))))

    def test_patch_not_divisible_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(patch_size=20, blocks=3)

    def test_skipless_variant_runs(self):
        m = FloodNet(small_config(skip_connections=False))
        m.init_params(5)
        rng = np.random.default_rng(5)
        scores = m.forward(
            Tensor(rng.normal(size=(3, 16, 16))),
            Tensor(rng.uniform(0, 1, size=(1, 16, 16))),
        )
        assert scores.shape == (2, 16, 16)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = FloodNet(small_config()), FloodNet(small_config())
        a.init_params(7)
        b.init_params(7)
        for name, t in a.parameters().items():
            np.testing.assert_array_equal(t.data, b.parameters()[name].data)

    def test_different_seeds_differ(self):
        a, b = FloodNet(small_config()), FloodNet(small_config())
        a.init_params(1)
        b.init_params(2)
        assert any(
            not np.array_equal(t.data, b.parameters()[n].data)
            for n, t in a.parameters().items()
        )

    def test_kaiming_std(self):
        # uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) has std sqrt(2/fan_in)
        cfg = ModelConfig(spectral_channels=8, base_channels=8, patch_size=32,
                          dtype="float64")
        m = FloodNet(cfg)
        m.init_params(123)
        k = m.parameters()["enc.0.0.spec.w"].data  # (8, 8, 3, 3): fan_in 72
        want = np.sqrt(2.0 / 72.0)
        assert abs(k.std() - want) / want < 0.2

    def test_biases_zero(self):
        m = FloodNet(small_config())
        m.init_params(9)
        assert all(
            np.all(t.data == 0)
            for n, t in m.parameters().items()
            if n.endswith(".b")
        )


class TestCheckpointNames:
    def test_expected_naming_scheme(self):
        m = FloodNet(small_config(blocks=2))
        names = set(m.parameters())
        assert "enc.0.0.spec.w" in names
        assert "enc.1.1.elev.b" in names
        assert "dec.0.up.spec.w" in names
        assert "dec.1.0.elev.w" in names
        assert {"head.w", "head.b"} <= names

    def test_save_load_round_trip(self, tmp_path):
        m = FloodNet(small_config())
        m.init_params(11)
        path = tmp_path / "model.evaw"
        m.save(path)
        m2 = FloodNet(small_config())
        m2.load(path)
        for name, t in m.parameters().items():
            np.testing.assert_allclose(
                m2.parameters()[name].data, t.data.astype(np.float32), rtol=1e-6
            )

    def test_missing_parameter_rejected(self, tmp_path):
        m = FloodNet(small_config())
        with pytest.raises(ValueError, match="missing parameter"):
            m.load_state({"head.w": np.zeros((2, 4))})
