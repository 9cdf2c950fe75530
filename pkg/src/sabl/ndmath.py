"""Small dense-array kernels with hand-written backward passes.

Every op accepts arbitrary leading batch dimensions. Spatial grids are laid
out ``[..., y, x, channel]`` and 1-D features ``[..., position, channel]``.
All arithmetic is float64.
"""
from __future__ import annotations

import json
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]


def _axis_index(axis: str) -> int:
    axis = axis.lower()
    if axis == "y":
        return -2
    if axis == "x":
        return -1
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def softmax_along(axis: str, logits: np.ndarray) -> np.ndarray:
    """Softmax over the ``y`` (rows) or ``x`` (columns) axis of a ``[..., k, k]`` map.

    Normalizing along ``y`` makes every column sum to one.
    """
    ax = _axis_index(axis)
    z = logits - np.max(logits, axis=ax, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=ax, keepdims=True)


def softmax_backward(axis: str, probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    ax = _axis_index(axis)
    return probs * (grad - np.sum(grad * probs, axis=ax, keepdims=True))


def aggregate(F: np.ndarray, mx: np.ndarray, my: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention-weighted collapse of a ``[..., k, k, C]`` grid.

    ``Fx[j] = sum_y F[y, j] * mx[y, j]`` and ``Fy[i] = sum_x F[i, x] * my[i, x]``.
    """
    if F.shape[:-1] != mx.shape or F.shape[:-1] != my.shape:
        raise ValueError(f"grid {F.shape} does not match masks {mx.shape}/{my.shape}")
    fx = (F * mx[..., None]).sum(axis=-3)
    fy = (F * my[..., None]).sum(axis=-2)
    return fx, fy


def aggregate_backward(F, mx, my, d_fx, d_fy):
    dF = d_fx[..., None, :, :] * mx[..., None] + d_fy[..., :, None, :] * my[..., None]
    d_mx = (F * d_fx[..., None, :, :]).sum(axis=-1)
    d_my = (F * d_fy[..., :, None, :]).sum(axis=-1)
    return dF, d_mx, d_my


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded cross-correlation. ``x: [..., n, C]``, ``w: [K, C, C']``."""
    kk, cin, cout = w.shape
    if kk % 2 != 1:
        raise ValueError("kernel size must be odd")
    if x.shape[-1] != cin or b.shape != (cout,):
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    pad = (kk - 1) // 2
    n = x.shape[-2]
    xp = np.zeros(x.shape[:-2] + (n + 2 * pad, cin))
    xp[..., pad:pad + n, :] = x
    out = np.zeros(x.shape[:-2] + (n, cout)) + b
    for t in range(kk):
        out += xp[..., t:t + n, :] @ w[t]
    return out


def conv1d_backward(x, w, d_out):
    kk, cin, cout = w.shape
    pad = (kk - 1) // 2
    n = x.shape[-2]
    xp = np.zeros(x.shape[:-2] + (n + 2 * pad, cin))
    xp[..., pad:pad + n, :] = x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    lead = d_out.reshape(-1, n, cout)
    for t in range(kk):
        seg = xp[..., t:t + n, :].reshape(-1, n, cin)
        dw[t] = seg.reshape(-1, cin).T @ lead.reshape(-1, cout)
        dxp[..., t:t + n, :] += d_out @ w[t].T
    db = lead.sum(axis=(0, 1))
    return dxp[..., pad:pad + n, :], dw, db


def deconv1d_x2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transposed conv, kernel 2 / stride 2: ``out[2i + t] = x[i] @ w[t] + b``."""
    if w.shape[0] != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[2],):
        raise ValueError(f"deconv shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    n = x.shape[-2]
    out = np.empty(x.shape[:-2] + (2 * n, w.shape[2]))
    out[..., 0::2, :] = x @ w[0] + b
    out[..., 1::2, :] = x @ w[1] + b
    return out


def deconv1d_x2_backward(x, w, d_out):
    d_even = d_out[..., 0::2, :]
    d_odd = d_out[..., 1::2, :]
    dx = d_even @ w[0].T + d_odd @ w[1].T
    cin = x.shape[-1]
    cout = w.shape[2]
    xf = x.reshape(-1, cin)
    dw = np.stack([xf.T @ d_even.reshape(-1, cout), xf.T @ d_odd.reshape(-1, cout)])
    db = d_out.reshape(-1, cout).sum(axis=0)
    return dx, dw, db


def split_halves(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``[..., 2k, C]`` into the lower and upper ``k`` positions."""
    n = x.shape[-2]
    if n % 2:
        raise ValueError(f"cannot split odd length {n}")
    h = n // 2
    return x[..., :h, :], x[..., h:, :]


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w + b


def dense_backward(x, w, d_out):
    xf = x.reshape(-1, w.shape[0])
    df = d_out.reshape(-1, w.shape[1])
    return d_out @ w.T, xf.T @ df, df.sum(axis=0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def finite_diff_grad(f: Callable[[], float], params: Mapping[str, np.ndarray], eps: float = 1e-6) -> Params:
    """Central differences of ``f`` w.r.t. every entry of every array in ``params``.

    ``f`` reads the arrays in place, so they are perturbed and restored here.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
        grads[name] = g
    return grads


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def params_to_json(params: Mapping[str, np.ndarray]) -> str:
    payload = {
        name: {"shape": list(arr.shape), "data": [float(v) for v in np.ravel(arr)]}
        for name, arr in sorted(params.items())
    }
    return json.dumps(payload, sort_keys=True)


def params_from_json(text: str) -> Params:
    payload = json.loads(text)
    out = {}
    for name, entry in payload.items():
        data = np.asarray(entry["data"], dtype=np.float64)
        out[name] = data.reshape(entry["shape"])
    return out
