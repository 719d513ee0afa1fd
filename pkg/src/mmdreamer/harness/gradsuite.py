"""Finite-difference checks over every differentiable op and the toy ELBO."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import DiagGaussian, Tensor
from ..autodiff.gradcheck import check_gradients
from ..worldmodel import TOY_CONFIG, VARIANTS, ModelConfig, WorldModel

TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error <= TOLERANCE


def _param(rng, *shape, positive=False, away_from_zero=False):
    data = rng.uniform(0.2, 2.0, shape) if positive else rng.standard_normal(shape)
    if away_from_zero:
        # keep relu/abs probes off their kink
        data = np.where(np.abs(data) < 0.05, 0.3, data)
    return Tensor(data, requires_grad=True)


def op_cases(seed: int = 0):
    """``(name, loss_fn, params)`` for each differentiable op."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((3, 4)))  # fixed projection so every loss is a generic scalar
    cases = []

    def unary(name, fn, **kw):
        x = _param(rng, 3, 4, **kw)
        cases.append((name, lambda: ad.tsum(ad.mul(fn(x), w)), [x]))

    unary("tanh", ad.tanh)
    unary("sigmoid", ad.sigmoid)
    unary("relu", ad.relu, away_from_zero=True)
    unary("elu", ad.elu, away_from_zero=True)
    unary("softplus", ad.softplus)
    unary("exp", ad.exp)
    unary("log", ad.log, positive=True)
    unary("square", ad.square)
    unary("sqrt", ad.sqrt, positive=True)
    unary("reciprocal", ad.reciprocal, positive=True)
    unary("absolute", ad.absolute, away_from_zero=True)
    unary("affine-scale", lambda t: ad.affine(t, 1.7, -0.3))
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    cases.append(("add", lambda: ad.tsum(ad.mul(ad.add(a, b), w)), [a, b]))
    cases.append(("sub", lambda: ad.tsum(ad.mul(ad.sub(a, b), w)), [a, b]))
    cases.append(("mul", lambda: ad.tsum(ad.mul(ad.mul(a, b), w)), [a, b]))
    m1, m2 = _param(rng, 3, 4), _param(rng, 4, 2)
    cases.append(("matmul", lambda: ad.tsum(ad.square(ad.matmul(m1, m2))), [m1, m2]))
    dx, dw, db = _param(rng, 5, 3), _param(rng, 3, 4), _param(rng, 4)
    cases.append(("dense", lambda: ad.tsum(ad.tanh(ad.dense(dx, dw, db))), [dx, dw, db]))
    cx, ck, cb = _param(rng, 2, 8, 8), _param(rng, 3, 2, 3, 3), _param(rng, 3)
    cy = Tensor(rng.standard_normal((3, 3, 3)))
    cases.append(("conv2d", lambda: ad.tsum(ad.mul(ad.conv2d(cx, ck, 2, bias=cb), cy)), [cx, ck, cb]))
    tx, tk = _param(rng, 3, 3, 3), _param(rng, 3, 2, 3, 3)
    ty = Tensor(rng.standard_normal((2, 7, 7)))
    cases.append(("conv2d_transpose", lambda: ad.tsum(ad.mul(ad.conv2d_transpose(tx, tk, 2), ty)), [tx, tk]))
    sx = _param(rng, 3, 4)
    cases.append(("reshape+transpose", lambda: ad.tsum(ad.mul(ad.reshape(sx, (4, 3)).T, w)), [sx]))
    cases.append(("concat+split", lambda: ad.tsum(ad.mul(
        ad.concat(list(reversed(ad.split(sx, [1, 3], axis=1))), axis=1), w)), [sx]))
    cases.append(("stack+mean", lambda: ad.tmean(ad.square(ad.stack([sx, ad.mul(sx, w)]))), [sx]))
    cases.append(("getitem", lambda: ad.tsum(ad.square(sx[1:, ::2])), [sx]))
    mu, sd, mu2, sd2 = _param(rng, 5), _param(rng, 5, positive=True), _param(rng, 5), _param(rng, 5, positive=True)
    noise, proj = rng.standard_normal(5), Tensor(rng.standard_normal(5))
    cases.append(("reparameterize", lambda: ad.tsum(ad.mul(
        ad.reparameterize(DiagGaussian(mu, sd), noise), proj)), [mu, sd]))
    cases.append(("gaussian_kl", lambda: ad.gaussian_kl(DiagGaussian(mu, sd), DiagGaussian(mu2, sd2)),
                  [mu, sd, mu2, sd2]))
    tgt = rng.standard_normal(5)
    cases.append(("gaussian_nll", lambda: ad.gaussian_nll(Tensor(tgt), mu), [mu]))
    grid = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
    lg = _param(rng, 4, 4)
    cases.append(("bernoulli_nll", lambda: ad.bernoulli_nll(Tensor(grid), ad.affine(lg, 3.0)), [lg]))
    return cases


def toy_elbo_case(variant: str, seed: int = 0):
    cfg = ModelConfig(variant=variant, **TOY_CONFIG)
    model = WorldModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    B, T = 2, 3
    lidar = rng.uniform(0, 15, (B, T, cfg.lidar_beams))
    image = rng.uniform(0, 1, (B, T, cfg.image_hw, cfg.image_hw, 3))
    action = rng.uniform(-1, 1, (B, T, 2))
    reward = rng.normal(size=(B, T))
    maps = (rng.uniform(size=(B, T, cfg.map_cells, cfg.map_cells)) > 0.5).astype(float)
    noise = {"z": rng.standard_normal((T, B, cfg.z_dim)), "zpi": rng.standard_normal((T, B, cfg.zpi_dim))}
    loss = lambda: model.observe_sequence(lidar, image, action, reward, maps, noise=noise).loss
    return loss, list(model.parameters().values())


def run_suite(seed: int = 0, elbo_entries: int = 12, eps: float = 1e-5) -> list[GradCase]:
    out = []
    for name, fn, params in op_cases(seed):
        out.append(GradCase(name, check_gradients(fn, params, eps=eps)))
    for variant in VARIANTS:
        fn, params = toy_elbo_case(variant, seed)
        err = check_gradients(fn, params, eps=eps, max_entries=elbo_entries,
                              rng=np.random.default_rng(seed), scale_floor=1e-3)
        out.append(GradCase(f"elbo[{variant}]", err))
    return out
