"""Dual-stain mid-fusion block: ReLU(Conv1x1(LayerNorm(Cat(H, P)))).

Feature maps are float64 arrays of shape (C, H, W). LayerNorm normalises the
2C concatenated channel values at every spatial location and applies a
per-channel affine; the 1x1 convolution maps 2C channels back to C.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import RangeError, SchemaError, ShapeMismatchError

DEFAULT_EPS = 1e-5


def feature_map(data, c: int, h: int, w: int) -> np.ndarray:
    """Reshape a flat row-major (c, y, x) buffer into a checked feature map."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.size != c * h * w:
        raise ShapeMismatchError(f"{arr.size} values for declared shape ({c}, {h}, {w})")
    if not np.all(np.isfinite(arr)):
        raise RangeError("feature map contains non-finite values")
    return arr.reshape(c, h, w)


@dataclass(frozen=True)
class FusionWeights:
    ln_gamma: np.ndarray  # (2C,)
    ln_beta: np.ndarray  # (2C,)
    conv_weight: np.ndarray  # (C, 2C)
    conv_bias: np.ndarray  # (C,)
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        c = self.conv_weight.shape[0]
        if self.conv_weight.shape != (c, 2 * c):
            raise ShapeMismatchError(f"conv_weight must be C x 2C, got {self.conv_weight.shape}")
        if self.ln_gamma.shape != (2 * c,) or self.ln_beta.shape != (2 * c,):
            raise ShapeMismatchError("ln_gamma / ln_beta must have length 2C")
        if self.conv_bias.shape != (c,):
            raise ShapeMismatchError("conv_bias must have length C")
        if not self.epsilon > 0:
            raise RangeError("epsilon must be positive")

    @property
    def c(self) -> int:
        return self.conv_weight.shape[0]

    @classmethod
    def identity(cls, c: int, epsilon: float = DEFAULT_EPS) -> "FusionWeights":
        return cls(np.ones(2 * c), np.zeros(2 * c), np.hstack([np.eye(c), np.zeros((c, c))]), np.zeros(c), epsilon)

    @classmethod
    def random(cls, c: int, rng: np.random.Generator, epsilon: float = DEFAULT_EPS) -> "FusionWeights":
        return cls(
            1.0 + 0.1 * rng.standard_normal(2 * c),
            0.1 * rng.standard_normal(2 * c),
            rng.standard_normal((c, 2 * c)) / np.sqrt(2 * c),
            0.1 * rng.standard_normal(c),
            epsilon,
        )

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "epsilon": self.epsilon,
            "ln_gamma": self.ln_gamma.tolist(),
            "ln_beta": self.ln_beta.tolist(),
            "conv_weight": self.conv_weight.tolist(),
            "conv_bias": self.conv_bias.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FusionWeights":
        keys = {"c", "epsilon", "ln_gamma", "ln_beta", "conv_weight", "conv_bias"}
        if not isinstance(doc, dict) or set(doc) != keys:
            raise SchemaError(f"weight file needs exactly the keys {sorted(keys)}")
        w = cls(
            np.asarray(doc["ln_gamma"], dtype=np.float64),
            np.asarray(doc["ln_beta"], dtype=np.float64),
            np.asarray(doc["conv_weight"], dtype=np.float64).reshape(doc["c"], -1),
            np.asarray(doc["conv_bias"], dtype=np.float64),
            float(doc["epsilon"]),
        )
        if w.c != doc["c"]:
            raise ShapeMismatchError("declared c does not match conv_weight")
        return w

    @classmethod
    def loads(cls, data: bytes | str) -> "FusionWeights":
        return cls.from_dict(json.loads(data))


def concat_channels(h: np.ndarray, p: np.ndarray) -> np.ndarray:
    if h.shape != p.shape or h.ndim != 3:
        raise ShapeMismatchError(f"cannot concatenate {h.shape} and {p.shape}")
    return np.concatenate([h, p], axis=0)


def _ln_stats(x: np.ndarray, epsilon: float):
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    return (x - mu) * inv_std, inv_std


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    if gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise ShapeMismatchError("affine parameters must match the channel count")
    xhat, _ = _ln_stats(x, epsilon)
    return gamma[:, None, None] * xhat + beta[:, None, None]


def normalized(x: np.ndarray, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """LayerNorm output before the affine step."""
    return _ln_stats(x, epsilon)[0]


def conv1x1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if weight.ndim != 2 or weight.shape[1] != x.shape[0] or bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(f"weight {weight.shape} / bias {bias.shape} incompatible with input {x.shape}")
    return np.einsum("oc,chw->ohw", weight, x) + bias[:, None, None]


def _forward(h, p, wts: FusionWeights):
    if h.shape[0] != wts.c:
        raise ShapeMismatchError(f"weights are for C={wts.c}, feature maps have C={h.shape[0]}")
    x = concat_channels(h, p)
    xhat, inv_std = _ln_stats(x, wts.epsilon)
    y = wts.ln_gamma[:, None, None] * xhat + wts.ln_beta[:, None, None]
    z = conv1x1(y, wts.conv_weight, wts.conv_bias)
    return np.maximum(z, 0.0), (xhat, inv_std, y, z)


def fuse_forward(h: np.ndarray, p: np.ndarray, weights: FusionWeights) -> np.ndarray:
    return _forward(h, p, weights)[0]


@dataclass(frozen=True)
class FusionGrads:
    h: np.ndarray
    p: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    conv_weight: np.ndarray
    conv_bias: np.ndarray

    def items(self):
        return [(k, getattr(self, k)) for k in ("h", "p", "ln_gamma", "ln_beta", "conv_weight", "conv_bias")]


def fuse_backward(h: np.ndarray, p: np.ndarray, weights: FusionWeights, upstream: np.ndarray) -> FusionGrads:
    """Reverse-mode gradients of ``sum(upstream * fuse_forward(h, p))``."""
    out, (xhat, inv_std, y, z) = _forward(h, p, weights)
    if upstream.shape != out.shape:
        raise ShapeMismatchError(f"upstream gradient {upstream.shape} vs output {out.shape}")
    dz = upstream * (z > 0)  # ReLU'(0) = 0
    d_bias = dz.sum(axis=(1, 2))
    d_weight = np.einsum("ohw,chw->oc", dz, y)
    dy = np.einsum("oc,ohw->chw", weights.conv_weight, dz)
    d_gamma = (dy * xhat).sum(axis=(1, 2))
    d_beta = dy.sum(axis=(1, 2))
    dxhat = dy * weights.ln_gamma[:, None, None]
    n = xhat.shape[0]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    c = h.shape[0]
    return FusionGrads(dx[:c], dx[c:], d_gamma, d_beta, d_weight, d_bias)


def finite_difference_grads(
    h: np.ndarray, p: np.ndarray, weights: FusionWeights, upstream: np.ndarray, step: float = 1e-6
) -> FusionGrads:
    """Central differences of the same scalar loss, one coordinate at a time."""
    params = {
        "h": h.copy(),
        "p": p.copy(),
        "ln_gamma": weights.ln_gamma.copy(),
        "ln_beta": weights.ln_beta.copy(),
        "conv_weight": weights.conv_weight.copy(),
        "conv_bias": weights.conv_bias.copy(),
    }

    def loss() -> float:
        w = FusionWeights(
            params["ln_gamma"], params["ln_beta"], params["conv_weight"], params["conv_bias"], weights.epsilon
        )
        return float(np.sum(upstream * fuse_forward(params["h"], params["p"], w)))

    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = loss()
            flat[i] = orig - step
            minus = loss()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * step)
        grads[name] = g
    return FusionGrads(**grads)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradient_check(
    h: np.ndarray, p: np.ndarray, weights: FusionWeights, upstream: np.ndarray, step: float = 1e-6
) -> dict[str, float]:
    """Relative error of every analytic gradient against finite differences."""
    analytic = fuse_backward(h, p, weights, upstream)
    numeric = finite_difference_grads(h, p, weights, upstream, step)
    return {name: relative_error(a, n) for (name, a), (_, n) in zip(analytic.items(), numeric.items())}
