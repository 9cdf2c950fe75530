"""Prediction heads: the side-aware bucketing head and two regression baselines.

Both heads start from the same learned feature map ``F = tanh(dense(flat(G)))``
built from a ``[k, k, C]`` RoI grid ``G``. The bucketing head then pools ``F``
with two attention maps into 1-D row/column features, refines them with a
3-tap conv, doubles their length with a stride-2 deconv and splits each into
two side features that feed per-side bucket classifiers and offset
regressors. The baselines regress four box deltas from ``F`` through one
hidden layer of matched parameter budget.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .bucketing import SIDES, SidePrediction, decode_batch
from .geometry import Box

Params = nd.Params


class Variant(str, enum.Enum):
    SABL = "sabl"
    BBOX_REG = "bbox_reg"
    BOUNDARY_REG = "boundary_reg"


# Faster R-CNN style target normalisation for the regression baselines.
DELTA_STDS = {
    Variant.BBOX_REG: np.array([0.1, 0.1, 0.2, 0.2]),
    Variant.BOUNDARY_REG: np.array([0.1, 0.1, 0.1, 0.1]),
}


@dataclass(frozen=True)
class HeadConfig:
    k: int = 7
    channels: int = 8
    feat_channels: int | None = None
    hidden: int | None = None

    @property
    def cf(self) -> int:
        return self.feat_channels or self.channels

    @property
    def grid_size(self) -> int:
        return self.k * self.k * self.channels


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def _feature_params(cfg: HeadConfig, rng) -> Params:
    n_in = cfg.grid_size
    n_out = cfg.k * cfg.k * cfg.cf
    return {"feat.w": _init(rng, (n_in, n_out), n_in), "feat.b": np.zeros(n_out)}


def init_sabl_params(cfg: HeadConfig, rng: np.random.Generator) -> Params:
    k, cf = cfg.k, cfg.cf
    p = _feature_params(cfg, rng)
    for ax in ("x", "y"):
        # no bias: softmax is invariant to a shift shared across the normalized axis
        p[f"att_{ax}.w"] = _init(rng, (cf,), cf)
        p[f"conv_{ax}.w"] = _init(rng, (3, cf, cf), 3 * cf)
        p[f"conv_{ax}.b"] = np.zeros(cf)
        p[f"deconv_{ax}.w"] = _init(rng, (2, cf, cf), cf)
        p[f"deconv_{ax}.b"] = np.zeros(cf)
    for s in SIDES:
        p[f"cls_{s.value}.w"] = _init(rng, (k * cf, k), k * cf)
        p[f"cls_{s.value}.b"] = np.zeros(k)
        p[f"reg_{s.value}.w"] = _init(rng, (k * cf, k), k * cf)
        p[f"reg_{s.value}.b"] = np.zeros(k)
    p["obj.w"] = _init(rng, (cf, 1), cf)
    p["obj.b"] = np.zeros(1)
    return p


def sabl_tail_size(cfg: HeadConfig) -> int:
    """Parameter count of the bucketing head after the shared feature layer."""
    k, cf = cfg.k, cfg.cf
    per_axis = cf + (3 * cf * cf + cf) + (2 * cf * cf + cf)
    per_side = 2 * (k * cf * k + k)
    return 2 * per_axis + 4 * per_side + cf + 1


def matched_hidden_width(cfg: HeadConfig) -> int:
    d = cfg.k * cfg.k * cfg.cf
    # d*H + H (hidden) + 5*H + 5 (four deltas and objectness)
    return max(1, round((sabl_tail_size(cfg) - 5) / (d + 6)))


def init_baseline_params(cfg: HeadConfig, rng: np.random.Generator) -> Params:
    d = cfg.k * cfg.k * cfg.cf
    hidden = cfg.hidden or matched_hidden_width(cfg)
    p = _feature_params(cfg, rng)
    p["hid.w"] = _init(rng, (d, hidden), d)
    p["hid.b"] = np.zeros(hidden)
    p["delta.w"] = _init(rng, (hidden, 4), hidden)
    p["delta.b"] = np.zeros(4)
    p["obj.w"] = _init(rng, (hidden, 1), hidden)
    p["obj.b"] = np.zeros(1)
    return p


def init_params(variant: Variant, cfg: HeadConfig, rng: np.random.Generator) -> Params:
    if Variant(variant) is Variant.SABL:
        return init_sabl_params(cfg, rng)
    return init_baseline_params(cfg, rng)


@dataclass
class HeadOutput:
    """Batched head output. Bucket arrays are ``[N, 4, k]`` in side order
    left, right, top, down; regression baselines fill ``deltas`` instead."""

    objectness_logit: np.ndarray
    cls_logits: np.ndarray | None = None
    offsets: np.ndarray | None = None
    deltas: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)
    version: int = 0

    @property
    def objectness(self) -> np.ndarray:
        return nd.sigmoid(self.objectness_logit)

    @property
    def confidences(self) -> np.ndarray:
        return nd.sigmoid(self.cls_logits)

    def side_predictions(self, i: int = 0) -> dict:
        conf = self.confidences[i]
        return {s: SidePrediction(conf[j], self.offsets[i, j]) for j, s in enumerate(SIDES)}


def _feature_forward(grid: np.ndarray, p: Params, cfg: HeadConfig):
    if grid.shape[1:] != (cfg.k, cfg.k, cfg.channels):
        raise ValueError(f"feature grid {grid.shape[1:]} does not match config {(cfg.k, cfg.k, cfg.channels)}")
    x = grid.reshape(grid.shape[0], -1)
    F = np.tanh(nd.dense(x, p["feat.w"], p["feat.b"]))
    return x, F


def sabl_forward(grid: np.ndarray, p: Params, cfg: HeadConfig) -> HeadOutput:
    """Forward pass on a ``[N, k, k, C]`` batch (a single ``[k, k, C]`` grid is promoted)."""
    if grid.ndim == 3:
        grid = grid[None]
    n, k, cf = grid.shape[0], cfg.k, cfg.cf
    x, Ff = _feature_forward(grid, p, cfg)
    F = Ff.reshape(n, k, k, cf)
    mx = nd.softmax_along("y", F @ p["att_x.w"])
    my = nd.softmax_along("x", F @ p["att_y.w"])
    fx, fy = nd.aggregate(F, mx, my)
    rx = np.tanh(nd.conv1d(fx, p["conv_x.w"], p["conv_x.b"]))
    ry = np.tanh(nd.conv1d(fy, p["conv_y.w"], p["conv_y.b"]))
    ux = nd.deconv1d_x2(rx, p["deconv_x.w"], p["deconv_x.b"])
    uy = nd.deconv1d_x2(ry, p["deconv_y.w"], p["deconv_y.b"])
    left, right = nd.split_halves(ux)
    top, down = nd.split_halves(uy)
    S = np.stack([left, right, top, down], axis=1)
    flat = S.reshape(n, 4, k * cf)
    logits = np.empty((n, 4, k))
    offsets = np.empty((n, 4, k))
    for j, s in enumerate(SIDES):
        logits[:, j] = nd.dense(flat[:, j], p[f"cls_{s.value}.w"], p[f"cls_{s.value}.b"])
        offsets[:, j] = nd.dense(flat[:, j], p[f"reg_{s.value}.w"], p[f"reg_{s.value}.b"])
    pooled = S.mean(axis=(1, 2))
    obj = nd.dense(pooled, p["obj.w"], p["obj.b"])[:, 0]
    cache = dict(x=x, F=F, mx=mx, my=my, fx=fx, fy=fy, rx=rx, ry=ry, flat=flat, pooled=pooled)
    return HeadOutput(obj, logits, offsets, cache=cache)


def sabl_backward(out: HeadOutput, d_logits, d_offsets, d_obj, p: Params, cfg: HeadConfig) -> Params:
    """Gradients of a scalar loss w.r.t. every parameter, given upstream
    gradients on the cls logits, offsets and objectness logit."""
    c = out.cache
    if not c:
        raise RuntimeError("stale cache: output carries no forward cache")
    k, cf = cfg.k, cfg.cf
    n = c["x"].shape[0]
    g: Params = {}
    d_obj = np.asarray(d_obj, dtype=np.float64).reshape(n, 1)
    d_pooled, g["obj.w"], g["obj.b"] = nd.dense_backward(c["pooled"], p["obj.w"], d_obj)
    d_flat = np.broadcast_to(d_pooled[:, None, None, :] / (4 * k), (n, 4, k, cf)).reshape(n, 4, k * cf).copy()
    for j, s in enumerate(SIDES):
        dx, g[f"cls_{s.value}.w"], g[f"cls_{s.value}.b"] = nd.dense_backward(
            c["flat"][:, j], p[f"cls_{s.value}.w"], d_logits[:, j])
        d_flat[:, j] += dx
        dx, g[f"reg_{s.value}.w"], g[f"reg_{s.value}.b"] = nd.dense_backward(
            c["flat"][:, j], p[f"reg_{s.value}.w"], d_offsets[:, j])
        d_flat[:, j] += dx
    dS = d_flat.reshape(n, 4, k, cf)
    d_ux = np.concatenate([dS[:, 0], dS[:, 1]], axis=1)
    d_uy = np.concatenate([dS[:, 2], dS[:, 3]], axis=1)

    F = c["F"]
    d_f = {}
    for ax, d_u in (("x", d_ux), ("y", d_uy)):
        r = c[f"r{ax}"]
        d_r, g[f"deconv_{ax}.w"], g[f"deconv_{ax}.b"] = nd.deconv1d_x2_backward(r, p[f"deconv_{ax}.w"], d_u)
        d_pre = d_r * (1.0 - r * r)
        d_f[ax], g[f"conv_{ax}.w"], g[f"conv_{ax}.b"] = nd.conv1d_backward(c[f"f{ax}"], p[f"conv_{ax}.w"], d_pre)

    dF, d_mx, d_my = nd.aggregate_backward(F, c["mx"], c["my"], d_f["x"], d_f["y"])
    d_ax = nd.softmax_backward("y", c["mx"], d_mx)
    d_ay = nd.softmax_backward("x", c["my"], d_my)
    g["att_x.w"] = (F * d_ax[..., None]).sum(axis=(0, 1, 2))
    g["att_y.w"] = (F * d_ay[..., None]).sum(axis=(0, 1, 2))
    dF = dF + d_ax[..., None] * p["att_x.w"] + d_ay[..., None] * p["att_y.w"]

    dh = dF.reshape(n, -1) * (1.0 - F.reshape(n, -1) ** 2)
    _, g["feat.w"], g["feat.b"] = nd.dense_backward(c["x"], p["feat.w"], dh)
    return g


def baseline_forward(grid: np.ndarray, p: Params, cfg: HeadConfig) -> HeadOutput:
    if grid.ndim == 3:
        grid = grid[None]
    x, F = _feature_forward(grid, p, cfg)
    z = np.tanh(nd.dense(F, p["hid.w"], p["hid.b"]))
    deltas = nd.dense(z, p["delta.w"], p["delta.b"])
    obj = nd.dense(z, p["obj.w"], p["obj.b"])[:, 0]
    return HeadOutput(obj, deltas=deltas, cache=dict(x=x, F=F, z=z))


def baseline_backward(out: HeadOutput, d_deltas, d_obj, p: Params, cfg: HeadConfig) -> Params:
    c = out.cache
    if not c:
        raise RuntimeError("stale cache: output carries no forward cache")
    g: Params = {}
    z, F = c["z"], c["F"]
    d_obj = np.asarray(d_obj, dtype=np.float64).reshape(-1, 1)
    dz1, g["delta.w"], g["delta.b"] = nd.dense_backward(z, p["delta.w"], d_deltas)
    dz2, g["obj.w"], g["obj.b"] = nd.dense_backward(z, p["obj.w"], d_obj)
    d_hid = (dz1 + dz2) * (1.0 - z * z)
    dF, g["hid.w"], g["hid.b"] = nd.dense_backward(F, p["hid.w"], d_hid)
    dh = dF * (1.0 - F * F)
    _, g["feat.w"], g["feat.b"] = nd.dense_backward(c["x"], p["feat.w"], dh)
    return g


def encode_deltas(proposals: np.ndarray, gts: np.ndarray, variant: Variant) -> np.ndarray:
    """Raw (unnormalised) regression targets for the baseline heads."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    if Variant(variant) is Variant.BBOX_REG:
        pcx, pcy = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
        tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
        tcx, tcy = t[:, 0] + 0.5 * tw, t[:, 1] + 0.5 * th
        return np.stack([(tcx - pcx) / pw, (tcy - pcy) / ph, np.log(tw / pw), np.log(th / ph)], axis=1)
    if Variant(variant) is Variant.BOUNDARY_REG:
        size = np.stack([pw, ph, pw, ph], axis=1)
        return (t - p) / size
    raise ValueError(f"no delta encoding for {variant}")


def decode_deltas(proposals: np.ndarray, deltas: np.ndarray, variant: Variant) -> np.ndarray:
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    if Variant(variant) is Variant.BBOX_REG:
        pcx, pcy = p[:, 0] + 0.5 * pw, p[:, 1] + 0.5 * ph
        cx, cy = pcx + d[:, 0] * pw, pcy + d[:, 1] * ph
        w, h = pw * np.exp(d[:, 2]), ph * np.exp(d[:, 3])
        return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if Variant(variant) is Variant.BOUNDARY_REG:
        out = p + d * np.stack([pw, ph, pw, ph], axis=1)
        x1, x2 = np.minimum(out[:, 0], out[:, 2]), np.maximum(out[:, 0], out[:, 2])
        y1, y2 = np.minimum(out[:, 1], out[:, 3]), np.maximum(out[:, 1], out[:, 3])
        return np.stack([x1, y1, x2, y2], axis=1)
    raise ValueError(f"no delta decoding for {variant}")


def baseline_decode(proposal: Box, deltas, variant: Variant) -> Box:
    out = decode_deltas(np.array([proposal.to_list()]), np.asarray(deltas, float), variant)[0]
    return Box.from_seq(out)


def rescore(cls_prob, loc_confidence):
    """Multiply the classification score by the localization confidence."""
    return cls_prob * loc_confidence


def refine(variant: Variant, out: HeadOutput, proposals: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Turn head outputs into ``(boxes [N, 4], loc_confidence [N])``."""
    variant = Variant(variant)
    if variant is Variant.SABL:
        return decode_batch(proposals, out.confidences, out.offsets, sigma)
    deltas = out.deltas * DELTA_STDS[variant]
    return decode_deltas(proposals, deltas, variant), np.ones(len(proposals))


def sgd_step(params: Params, grads: Params, velocity: Params, lr: float, momentum: float = 0.0) -> Params:
    """In-place momentum SGD: ``v = momentum * v + g``; ``theta -= lr * v``."""
    if lr <= 0 or not 0 <= momentum < 1:
        raise ValueError("need lr > 0 and 0 <= momentum < 1")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {params[name].shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(g)
        v *= momentum
        v += g
        params[name] -= lr * v
    return params


class Head:
    """A head variant bound to its parameters, with a cache version guard."""

    def __init__(self, variant: Variant, cfg: HeadConfig, params: Params):
        self.variant = Variant(variant)
        self.cfg = cfg
        self.params = params
        self.velocity: Params = {}
        self.version = 0

    @classmethod
    def initialize(cls, variant: Variant, cfg: HeadConfig, seed: int) -> "Head":
        return cls(variant, cfg, init_params(variant, cfg, np.random.default_rng(seed)))

    def forward(self, grid: np.ndarray) -> HeadOutput:
        fwd = sabl_forward if self.variant is Variant.SABL else baseline_forward
        out = fwd(grid, self.params, self.cfg)
        out.version = self.version
        return out

    def backward(self, out: HeadOutput, d_obj, d_logits=None, d_offsets=None, d_deltas=None) -> Params:
        if out.version != self.version:
            raise RuntimeError("stale cache: parameters changed since forward")
        if self.variant is Variant.SABL:
            return sabl_backward(out, d_logits, d_offsets, d_obj, self.params, self.cfg)
        return baseline_backward(out, d_deltas, d_obj, self.params, self.cfg)

    def step(self, grads: Params, lr: float, momentum: float) -> None:
        sgd_step(self.params, grads, self.velocity, lr, momentum)
        self.version += 1
