"""Central-difference checks for every differentiable op and both heads."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import head as H
from . import losses as L
from . import ndmath as nd

EPS = 1e-6
TOL = 1e-5


def _check(params: nd.Params, loss: Callable[[], float], analytic: Callable[[], nd.Params]) -> float:
    grads = analytic()
    numeric = nd.finite_diff_grad(loss, params, EPS)
    return max(nd.rel_error(grads[k], numeric[k]) for k in params)


def check_softmax(rng) -> float:
    p = {"z": rng.normal(size=(2, 4, 4))}
    wx, wy = rng.normal(size=(2, 2, 4, 4))
    f = lambda: float((wx * nd.softmax_along("y", p["z"])).sum() + (wy * nd.softmax_along("x", p["z"])).sum())
    def g():
        return {"z": nd.softmax_backward("y", nd.softmax_along("y", p["z"]), wx)
                + nd.softmax_backward("x", nd.softmax_along("x", p["z"]), wy)}
    return _check(p, f, g)


def check_aggregate(rng) -> float:
    p = {"F": rng.normal(size=(2, 4, 4, 3)), "mx": rng.random((2, 4, 4)), "my": rng.random((2, 4, 4))}
    wx, wy = rng.normal(size=(2, 2, 4, 3))
    def f():
        fx, fy = nd.aggregate(p["F"], p["mx"], p["my"])
        return float((wx * fx).sum() + (wy * fy).sum())
    def g():
        dF, dmx, dmy = nd.aggregate_backward(p["F"], p["mx"], p["my"], wx, wy)
        return {"F": dF, "mx": dmx, "my": dmy}
    return _check(p, f, g)


def check_conv1d(rng) -> float:
    p = {"x": rng.normal(size=(2, 5, 3)), "w": rng.normal(size=(3, 3, 2)), "b": rng.normal(size=2)}
    wo = rng.normal(size=(2, 5, 2))
    f = lambda: float((wo * nd.conv1d(p["x"], p["w"], p["b"])).sum())
    def g():
        dx, dw, db = nd.conv1d_backward(p["x"], p["w"], wo)
        return {"x": dx, "w": dw, "b": db}
    return _check(p, f, g)


def check_deconv(rng) -> float:
    p = {"x": rng.normal(size=(2, 4, 3)), "w": rng.normal(size=(2, 3, 2)), "b": rng.normal(size=2)}
    wo = rng.normal(size=(2, 8, 2))
    f = lambda: float((wo * nd.deconv1d_x2(p["x"], p["w"], p["b"])).sum())
    def g():
        dx, dw, db = nd.deconv1d_x2_backward(p["x"], p["w"], wo)
        return {"x": dx, "w": dw, "b": db}
    return _check(p, f, g)


def check_dense(rng) -> float:
    p = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2)), "b": rng.normal(size=2)}
    wo = rng.normal(size=(3, 2))
    f = lambda: float((wo * nd.dense(p["x"], p["w"], p["b"])).sum())
    def g():
        dx, dw, db = nd.dense_backward(p["x"], p["w"], wo)
        return {"x": dx, "w": dw, "b": db}
    return _check(p, f, g)


def check_bce(rng) -> float:
    p = {"z": rng.normal(scale=3.0, size=6)}
    y = rng.integers(0, 2, size=6)
    f = lambda: float(L.bce_with_logits(p["z"], y)[0].sum())
    return _check(p, f, lambda: {"z": L.bce_with_logits(p["z"], y)[1]})


def check_smooth_l1(rng) -> float:
    # keep |d| clear of the kink at beta so central differences stay one-sided-free
    d = rng.uniform(0.05, 3.0, size=6) * rng.choice([-1, 1], size=6)
    d = np.where(np.abs(np.abs(d) - 1.0) < 0.05, d * 1.2, d)
    t = rng.normal(size=6)
    p = {"x": t + d}
    f = lambda: float(L.smooth_l1(p["x"], t)[0].sum())
    return _check(p, f, lambda: {"x": L.smooth_l1(p["x"], t)[1]})


def _random_targets(rng, n, k) -> L.TargetArrays:
    labels = rng.integers(-1, 2, size=(n, 4, k))
    offsets = rng.uniform(-1.5, 1.5, size=(n, 4, k))
    valid = rng.random((n, 4, k)) < 0.4
    in_range = rng.random((n, 4)) < 0.8
    return L.TargetArrays(labels, offsets, valid, in_range)


def check_bucketing_loss(rng) -> float:
    t = _random_targets(rng, 2, 4)
    p = {"z": rng.normal(size=(2, 4, 4))}
    return _check(p, lambda: L.bucketing_loss(t, p["z"])[0], lambda: {"z": L.bucketing_loss(t, p["z"])[1]})


def check_regression_loss(rng) -> float:
    t = _random_targets(rng, 2, 4)
    p = {"o": t.offsets + rng.uniform(0.05, 0.9, size=t.offsets.shape) * rng.choice([-1, 1], size=t.offsets.shape)}
    return _check(p, lambda: L.regression_loss(t, p["o"])[0], lambda: {"o": L.regression_loss(t, p["o"])[1]})


def _head_case(rng, variant: H.Variant):
    cfg = H.HeadConfig(k=3, channels=3)
    params = H.init_params(variant, cfg, rng)
    for v in params.values():
        v += rng.normal(scale=0.1, size=v.shape)
    grid = rng.normal(size=(2, 3, 3, 3))
    obj = np.array([1.0, 0.0])
    return cfg, params, grid, obj


def check_sabl_head(rng) -> float:
    cfg, p, grid, obj = _head_case(rng, H.Variant.SABL)
    t = _random_targets(rng, 2, cfg.k)
    w = L.LossWeights(0.0, 1.0)

    def f():
        out = H.sabl_forward(grid, p, cfg)
        return L.total_loss(L.objectness_loss(out.objectness_logit, obj)[0],
                            L.bucketing_loss(t, out.cls_logits)[0],
                            L.regression_loss(t, out.offsets)[0], w)

    def g():
        out = H.sabl_forward(grid, p, cfg)
        _, d_obj, _ = L.objectness_loss(out.objectness_logit, obj)
        _, d_log, _ = L.bucketing_loss(t, out.cls_logits)
        _, d_off, _ = L.regression_loss(t, out.offsets)
        return H.sabl_backward(out, d_log * w.lambda2, d_off * w.lambda2, d_obj, p, cfg)

    return _check(p, f, g)


def check_baseline_head(rng) -> float:
    variant = H.Variant.BOUNDARY_REG
    cfg, p, grid, obj = _head_case(rng, variant)
    target = rng.normal(size=(2, 4))
    mask = np.array([True, False])

    def f():
        out = H.baseline_forward(grid, p, cfg)
        return L.objectness_loss(out.objectness_logit, obj)[0] + L.delta_loss(out.deltas, target, mask)[0]

    def g():
        out = H.baseline_forward(grid, p, cfg)
        _, d_obj, _ = L.objectness_loss(out.objectness_logit, obj)
        _, d_d, _ = L.delta_loss(out.deltas, target, mask)
        return H.baseline_backward(out, d_d, d_obj, p, cfg)

    return _check(p, f, g)


CHECKS: dict[str, Callable] = {
    "softmax_along": check_softmax,
    "aggregate": check_aggregate,
    "conv1d": check_conv1d,
    "deconv1d_x2": check_deconv,
    "dense": check_dense,
    "bce_with_logits": check_bce,
    "smooth_l1": check_smooth_l1,
    "bucketing_loss": check_bucketing_loss,
    "regression_loss": check_regression_loss,
    "sabl_head": check_sabl_head,
    "baseline_head": check_baseline_head,
}


def run_all(seed: int = 0, n_seeds: int = 20, ops=None) -> dict[str, float]:
    """Max relative error per op across ``n_seeds`` consecutive seeds."""
    worst = {}
    for name, fn in CHECKS.items():
        if ops and name not in ops:
            continue
        worst[name] = max(fn(np.random.default_rng([seed, s])) for s in range(n_seeds))
    return worst
