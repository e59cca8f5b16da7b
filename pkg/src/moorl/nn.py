"""Flat-parameter dense networks with hand-written backprop, plus Adam.

Parameters for a network live in one float64 vector laid out layer by layer as
``W (fan_in x fan_out, row-major)`` followed by ``b (fan_out)``.  Inputs may be a
single vector or a batch (rows); parameter gradients are summed over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericalError

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str | tuple[str, ...] = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise InvalidArgumentError("MlpSpec needs at least input and output widths")
        if any(w < 1 for w in widths):
            raise InvalidArgumentError(f"layer widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)
        acts = self.activation
        if isinstance(acts, str):
            acts = (acts,) * (len(widths) - 2)
        acts = tuple(acts)
        if len(acts) != len(widths) - 2:
            raise InvalidArgumentError("one activation per hidden layer expected")
        for a in acts:
            if a not in ACTIVATIONS:
                raise InvalidArgumentError(f"unknown activation {a!r}")
        object.__setattr__(self, "activation", acts)

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @cached_property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    @cached_property
    def _slices(self):
        out, off = [], 0
        w = self.layer_widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            out.append((off, off + fan_in * fan_out, off + fan_in * fan_out + fan_out, fan_in, fan_out))
            off += fan_in * fan_out + fan_out
        return tuple(out)

    def layers(self, params: np.ndarray) -> list:
        """(W, b) views into ``params`` for each layer.

        A stacked ``(P, n_params)`` array yields ``(P, fan_in, fan_out)`` weights and
        ``(P, 1, fan_out)`` biases so P networks evaluate in one batched matmul.
        """
        if params.ndim == 1:
            return [(params[a:b].reshape(fi, fo), params[b:c]) for a, b, c, fi, fo in self._slices]
        P = params.shape[0]
        return [(params[:, a:b].reshape(P, fi, fo), params[:, b:c].reshape(P, 1, fo))
                for a, b, c, fi, fo in self._slices]


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    params = np.zeros(spec.n_params)
    for W, _ in spec.layers(params):
        limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return params


def _check_params(spec: MlpSpec, params: np.ndarray) -> None:
    if params.ndim not in (1, 2) or params.shape[-1] != spec.n_params:
        raise InvalidArgumentError(
            f"parameter vector has shape {params.shape}, spec needs ({spec.n_params},)")


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim not in (2, 3) or x.shape[-1] != spec.n_in:
        raise InvalidArgumentError(f"input shape {x.shape} does not match input width {spec.n_in}")
    return x, single


def forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Batched forward pass returning the output and the activations needed by backprop.

    With stacked ``(P, n)`` params the input may be shared ``(B, in)`` or per-network
    ``(P, B, in)``; the output is ``(P, B, out)``.
    """
    _check_params(spec, params)
    x, single = _as_batch(spec, x)
    single = single and params.ndim == 1
    acts = [x]
    h = x
    layers = spec.layers(params)
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        h = h @ W
        h += b
        if i < last:
            kind = spec.activation[i]
            if kind == "relu":
                np.maximum(h, 0.0, out=h)
            elif kind == "tanh":
                np.tanh(h, out=h)
        acts.append(h)
    out = h[0] if single else h
    return out, (acts, single)


def backward_cached(spec: MlpSpec, params: np.ndarray, cache, upstream_grad,
                    input_grad: bool = True):
    """Parameter and input gradients from a forward cache.

    For stacked params the input gradient keeps the leading network axis.  With
    ``input_grad=False`` the second return value is ``None``.
    """
    acts, single = cache
    g = np.array(upstream_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise InvalidArgumentError(f"upstream grad shape {g.shape} != output shape {acts[-1].shape}")
    grad = np.empty_like(params)
    layers = spec.layers(params)
    gviews = spec.layers(grad)
    stacked = params.ndim == 2
    n = len(layers)
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            kind = spec.activation[i]
            out = acts[i + 1]
            if kind == "relu":
                g *= out > 0.0
            elif kind == "tanh":
                g *= 1.0 - out * out
        gW, gb = gviews[i]
        a = acts[i]
        gW[...] = (a.swapaxes(-1, -2) if a.ndim == 3 else a.T) @ g
        gb[...] = g.sum(axis=-2, keepdims=stacked)
        if i == 0 and not input_grad:
            return grad, None
        # fresh array, so the in-place activation masks above never touch the caller's data
        g = g @ layers[i][0].swapaxes(-1, -2)
    return grad, (g[0] if single else g)


def mlp_forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    return forward_cached(spec, params, x)[0]


def mlp_backward(spec: MlpSpec, params: np.ndarray, x, upstream_grad):
    """Gradient of ``sum(upstream_grad * forward(x))`` w.r.t. parameters and input."""
    _, cache = forward_cached(spec, params, x)
    return backward_cached(spec, params, cache, upstream_grad)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step_count,
                         self.lr, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              lr: float | None = None) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step.  ``lr`` overrides ``state.lr`` for scheduled rates."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise InvalidArgumentError("adam_step: params, grad and moments must have equal length")
    if not np.isfinite(grad.sum()):
        idx = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericalError(f"non-finite gradient at index {idx}: {grad.flat[idx]}")
    lr = state.lr if lr is None else lr
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m * b1
    m += (1.0 - b1) * grad
    v = state.v * b2
    v += (1.0 - b2) * grad * grad
    # bias-corrected step: lr * m_hat / (sqrt(v_hat) + eps)
    denom = np.sqrt(v)
    denom *= 1.0 / np.sqrt(1.0 - b2 ** t)
    denom += state.eps
    step = m / denom
    step *= lr / (1.0 - b1 ** t)
    return params - step, AdamState(m, v, t, state.lr, b1, b2, state.eps)


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params: Sequence[float],
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0:
        raise InvalidArgumentError("h must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.empty_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + h
        up = loss_fn(p.copy())
        p[i] = old - h
        down = loss_fn(p.copy())
        p[i] = old
        grad[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
