"""Dense linear-algebra helpers, nonlinearities and a finite-difference checker.

Every forward function here accepts either a single vector ``(n,)`` or a batch
of row vectors ``(batch, n)``. Training math is float64 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when an input does not match a parameter's expected shape."""


class NonFiniteError(ArithmeticError):
    """Raised when a function under finite-difference check returns NaN/Inf."""


@dataclass(frozen=True)
class AffineParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"weight has {self.weight.shape[0]} rows but bias has {self.bias.shape[0]}"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class FeedForwardParams:
    """Two affine layers with a tanh in between."""

    layer1: AffineParams
    layer2: AffineParams
    activation: str = "tanh"

    def __post_init__(self):
        if self.layer1.n_out != self.layer2.n_in:
            raise DimensionError(
                f"layer1 emits {self.layer1.n_out} but layer2 expects {self.layer2.n_in}"
            )
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer1.n_in

    @property
    def n_hidden(self) -> int:
        return self.layer1.n_out

    @property
    def n_out(self) -> int:
        return self.layer2.n_out


def _check_in(x: np.ndarray, n_in: int) -> None:
    if x.shape[-1] != n_in:
        raise DimensionError(f"expected input of length {n_in}, got shape {x.shape}")


def affine_forward(p: AffineParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    _check_in(x, p.n_in)
    return x @ p.weight.T + p.bias


def affine_backward(p: AffineParams, x: np.ndarray, dy: np.ndarray):
    """Return ``(d_weight, d_bias, d_x)`` for a batch ``x`` of shape (n, in)."""
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    d_weight = dy2.T @ x2
    d_bias = dy2.sum(axis=0)
    d_x = dy @ p.weight
    return d_weight, d_bias, d_x


def ffn_forward(p: FeedForwardParams, x) -> np.ndarray:
    return ffn_forward_cached(p, x)[0]


def ffn_forward_cached(p: FeedForwardParams, x):
    """Forward pass that also returns the ``(x, hidden)`` cache for backprop."""
    x = np.asarray(x, dtype=DTYPE)
    _check_in(x, p.n_in)
    hidden = np.tanh(affine_forward(p.layer1, x))
    return affine_forward(p.layer2, hidden), (x, hidden)


def ffn_backward(p: FeedForwardParams, cache, dy: np.ndarray):
    """Backprop through one expert.

    Returns ``(grads, d_x)`` where ``grads`` maps the local parameter names
    ``l1.w``, ``l1.b``, ``l2.w``, ``l2.b`` to arrays shaped like the weights.
    """
    x, hidden = cache
    d_w2, d_b2, d_hidden = affine_backward(p.layer2, hidden, dy)
    d_pre = d_hidden * (1.0 - hidden * hidden)
    d_w1, d_b1, d_x = affine_backward(p.layer1, x, d_pre)
    grads = {"l1.w": d_w1, "l1.b": d_b1, "l2.w": d_w2, "l2.b": d_b2}
    return grads, d_x


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=DTYPE)
    return np.logaddexp(0.0, x)


def central_diff_grad(
    f: Callable[[np.ndarray], float], theta, eps: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``theta``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    theta = np.array(theta, dtype=DTYPE)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(theta))
        flat[i] = orig - eps
        f_minus = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(theta.shape)


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def init_affine(rng: np.random.Generator, n_in: int, n_out: int) -> AffineParams:
    bound = 1.0 / np.sqrt(n_in)
    weight = rng.uniform(-bound, bound, size=(n_out, n_in))
    bias = rng.uniform(-bound, bound, size=n_out)
    return AffineParams(weight, bias)


def init_ffn(rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int) -> FeedForwardParams:
    return FeedForwardParams(init_affine(rng, n_in, n_hidden), init_affine(rng, n_hidden, n_out))


def ffn_arrays(p: FeedForwardParams, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.l1.w": p.layer1.weight,
        f"{prefix}.l1.b": p.layer1.bias,
        f"{prefix}.l2.w": p.layer2.weight,
        f"{prefix}.l2.b": p.layer2.bias,
    }


def ffn_from_arrays(arrays: dict[str, np.ndarray], prefix: str) -> FeedForwardParams:
    return FeedForwardParams(
        AffineParams(arrays[f"{prefix}.l1.w"], arrays[f"{prefix}.l1.b"]),
        AffineParams(arrays[f"{prefix}.l2.w"], arrays[f"{prefix}.l2.b"]),
    )
