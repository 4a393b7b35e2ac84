"""Canonical finite-difference checks: every operator, the gated layer,
a small full network, and all three loss schemes.

All checks run at float64 with inputs steered away from kinks (relu
zeros, pool ties, confidence branch switches); any sample the checker
still flags as kinked is skipped by design.

Each scalar objective is a constant-weighted sum of the op output, so a
transposed or mirrored gradient cannot cancel out.
"""

import numpy as np

from . import autodiff, loss as loss_mod
from .autodiff import ConvParams, Tensor, grad_check
from .model import FloodNet, GatedConv, ModelConfig


def _weighted_sum(t, rng):
    w = Tensor(rng.normal(size=t.data.shape))
    return (w * t).sum()


def _distinct(rng, shape, gap=0.1):
    # strictly separated values: safe under +-eps probing
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * gap).astype(np.float64)


def _split_branches(scores, margin=0.05):
    # keep s_flood vs s_dry comparisons away from the switch surface
    d = scores[1] - scores[0]
    bump = np.where(d >= 0, margin, -margin) * (np.abs(d) < margin)
    scores[1] += bump
    return scores


def _conv_params(rng, out_ch, in_ch):
    return ConvParams(
        Tensor(rng.normal(size=(out_ch, in_ch, 3, 3))),
        Tensor(rng.normal(size=out_ch)),
    )


def run_suite(eps=1e-3, tol=1e-4, seed=0):
    """Run every check; returns [(name, GradCheckReport)]."""
    rng = np.random.default_rng(seed)
    reports = []

    def check(name, build, params, samples=None):
        reports.append(
            (name, grad_check(build, params, eps=eps, tol=tol, samples=samples, seed=seed))
        )

    x = Tensor(rng.normal(size=(2, 4, 4)))
    y = Tensor(rng.normal(size=(2, 4, 4)))
    check("add", lambda: _weighted_sum(autodiff.add(x, y), np.random.default_rng(1)),
          [("x", x), ("y", y)])
    check("mul", lambda: _weighted_sum(autodiff.mul(x, y), np.random.default_rng(2)),
          [("x", x), ("y", y)])
    check("scale_shift", lambda: _weighted_sum(
        autodiff.shift(autodiff.scale(x, 1.7), -0.3), np.random.default_rng(3)),
        [("x", x)])
    check("sigmoid", lambda: _weighted_sum(autodiff.sigmoid(x), np.random.default_rng(4)),
          [("x", x)])

    xr = Tensor(rng.uniform(0.5, 1.5, size=(2, 4, 4)) * rng.choice([-1.0, 1.0], (2, 4, 4)))
    check("relu", lambda: _weighted_sum(autodiff.relu(xr), np.random.default_rng(5)),
          [("x", xr)])

    xp = Tensor(rng.uniform(0.5, 3.0, size=(2, 4, 4)))
    check("log", lambda: _weighted_sum(autodiff.log(xp), np.random.default_rng(6)),
          [("x", xp)])
    check("sum", lambda: autodiff.sum_all(autodiff.sigmoid(x)), [("x", x)])

    xs = Tensor(rng.normal(size=(2, 4, 4)))
    check("softmax_channel", lambda: _weighted_sum(
        autodiff.softmax_channel(xs), np.random.default_rng(7)), [("x", xs)])

    check("concat_channel", lambda: _weighted_sum(
        autodiff.concat_channel(x, y), np.random.default_rng(8)),
        [("x", x), ("y", y)])

    w1 = Tensor(rng.normal(size=(3, 2)))
    b1 = Tensor(rng.normal(size=3))
    check("conv1x1", lambda: _weighted_sum(
        autodiff.conv1x1(x, w1, b1), np.random.default_rng(9)),
        [("x", x), ("w", w1), ("b", b1)])

    xc = Tensor(rng.normal(size=(2, 5, 5)))
    pc = _conv_params(rng, 3, 2)
    check("conv2d_replicate", lambda: _weighted_sum(
        autodiff.conv2d_replicate(xc, pc), np.random.default_rng(10)),
        [("x", xc), ("k", pc.kernel), ("b", pc.bias)])

    xt = Tensor(rng.normal(size=(2, 3, 3)))
    pt = _conv_params(rng, 3, 2)
    check("conv2d_transpose", lambda: _weighted_sum(
        autodiff.conv2d_transpose(xt, pt), np.random.default_rng(11)),
        [("x", xt), ("k", pt.kernel), ("b", pt.bias)])

    xm = Tensor(_distinct(rng, (2, 4, 4)))
    check("max_pool_2", lambda: _weighted_sum(
        autodiff.max_pool_2(xm), np.random.default_rng(12)), [("x", xm)])
    check("avg_pool_2", lambda: _weighted_sum(
        autodiff.avg_pool_2(x), np.random.default_rng(13)), [("x", x)])

    # gated dual-path layer
    gx = Tensor(rng.normal(size=(2, 6, 6)))
    ge = Tensor(rng.normal(size=(1, 6, 6)))
    layer = GatedConv(_conv_params(rng, 3, 2), _conv_params(rng, 3, 1))

    def build_gated():
        yy, ye = layer.forward(gx, ge)
        r = np.random.default_rng(14)
        return _weighted_sum(yy, r) + _weighted_sum(ye, r)

    check("gated_layer", build_gated,
          [("x", gx), ("x_e", ge),
           ("spec.w", layer.spectral_conv.kernel), ("spec.b", layer.spectral_conv.bias),
           ("elev.w", layer.elevation_conv.kernel), ("elev.b", layer.elevation_conv.bias)])

    # losses on leaf scores
    sc = rng.normal(size=(2, 6, 6))
    _split_branches(sc)
    scores = Tensor(sc)
    gt = rng.choice([-1, 0, 1], size=(6, 6)).astype(np.int8)
    hgt = rng.normal(size=(6, 6)) * 3.0

    check("loss_ce", lambda: loss_mod.cross_entropy_loss(scores, gt),
          [("scores", scores)])
    for scheme in loss_mod.WEIGHTING_SCHEMES:
        check(f"loss_eva[{scheme}]",
              lambda s=scheme: loss_mod.elevation_loss(scores, gt, hgt, s),
              [("scores", scores)])
    hybrid = loss_mod.LossConfig(scheme="ce+eva", lambda_=0.7)
    check("loss_hybrid", lambda: loss_mod.total_loss(scores, gt, hgt, hybrid),
          [("scores", scores)])

    # Full model, 2 blocks, 16x16 patch, both paths. Finite differences
    # probe +-eps, so a relu zero or a pool-argmax flip crossing inside
    # that interval corrupts every sample it touches; the kink-avoiding
    # configuration swaps those two ops for their smooth alternatives
    # (they carry their own controlled checks above). The gating, both
    # conv types, skips and the losses are all still in the path.
    mc = ModelConfig(
        spectral_channels=6, use_elevation_path=True, blocks=2,
        base_channels=4, patch_size=16, dtype="float64",
        pooling_spectral="avg", pooling_elevation="avg",
        spectral_activation="none",
    )
    model = FloodNet(mc)
    model.init_params(seed)
    spec_in = Tensor(rng.normal(size=(6, 16, 16)))
    elev_in = Tensor(rng.uniform(0, 1, size=(1, 16, 16)))
    gt16 = rng.choice([-1, 0, 1], size=(16, 16)).astype(np.int8)
    h16 = rng.normal(size=(16, 16)) * 4.0

    for scheme, cfg in (
        ("ce", loss_mod.LossConfig(scheme="ce")),
        ("eva", loss_mod.LossConfig(scheme="eva")),
        ("ce+eva", loss_mod.LossConfig(scheme="ce+eva", lambda_=1.0)),
    ):
        def build_model_loss(cfg=cfg):
            scores16 = model.forward(spec_in, elev_in)
            return loss_mod.total_loss(scores16, gt16, h16, cfg)

        check(f"model_2block[{scheme}]", build_model_loss,
              list(model.parameters().items()), samples=3)

    return reports
