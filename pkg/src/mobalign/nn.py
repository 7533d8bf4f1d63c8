"""Minimal dense layers with hand-written backprop, plus Adam.

Parameters live in flat ``{name: ndarray}`` dicts so the optimizer and the
gradient checks can treat every trainable path uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; returns ``(y, norms)`` for use in the backward pass."""
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    return x / norms, norms


def l2_normalize_backward(y: np.ndarray, norms: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    return (grad_y - y * np.sum(y * grad_y, axis=1, keepdims=True)) / norms


@dataclass
class MLP:
    """ReLU MLP; ``sizes = [in, h1, ..., out]``, linear output layer."""

    sizes: list
    prefix: str = "mlp"
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, prefix="mlp", dtype=np.float64,
             scheme: str = "he") -> "MLP":
        """``he``: Gaussian He weights, zero biases.  ``uniform``: weights and
        biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), which keeps deep
        stacks alive under large Adam steps."""
        params = {}
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if scheme == "he":
                last = k == len(sizes) - 2
                std = np.sqrt(1.0 / fan_in) if last else np.sqrt(2.0 / fan_in)
                w = rng.standard_normal((fan_in, fan_out)) * std
                b = np.zeros(fan_out)
            elif scheme == "uniform":
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, (fan_in, fan_out))
                b = rng.uniform(-bound, bound, fan_out)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
            params[f"{prefix}.w{k}"] = w.astype(dtype)
            params[f"{prefix}.b{k}"] = b.astype(dtype)
        return cls(list(sizes), prefix, params)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray, params: dict | None = None):
        p = self.params if params is None else params
        acts = [x]
        h = x
        for k in range(self.n_layers):
            h = h @ p[f"{self.prefix}.w{k}"]
            h += p[f"{self.prefix}.b{k}"]
            if k < self.n_layers - 1:
                np.maximum(h, 0.0, out=h)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray, params: dict | None = None, need_input_grad=True):
        p = self.params if params is None else params
        grads = {}
        g = grad_out
        for k in reversed(range(self.n_layers)):
            if k < self.n_layers - 1:
                # g is a fresh product here, safe to mask in place
                np.multiply(g, acts[k + 1] > 0, out=g)
            grads[f"{self.prefix}.w{k}"] = acts[k].T @ g
            grads[f"{self.prefix}.b{k}"] = g.sum(axis=0)
            if k > 0 or need_input_grad:
                g = g @ p[f"{self.prefix}.w{k}"].T
        return (g if need_input_grad else None), grads


@numba.njit(cache=True, fastmath=True)
def _adam_kernel(p, g, m, v, beta1, one_m_beta1, beta2, one_m_beta2, step_size, root_c2, eps, decay, tiny):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + one_m_beta1 * gi
        vi = beta2 * v[i] + one_m_beta2 * gi * gi
        # Moments of dead units decay geometrically into subnormals, which
        # are slow on x86; values this small cannot move a parameter anyway.
        if abs(mi) < tiny:
            mi = 0 * mi
        if vi < tiny:
            vi = 0 * vi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * decay - step_size * mi / (np.sqrt(vi) / root_c2 + eps)


@dataclass
class Adam:
    """Adam with decoupled weight decay: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        decay = 1.0 - self.lr * self.weight_decay
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            if not p.flags.c_contiguous:
                raise ValueError(f"parameter {name} must be C-contiguous")
            g = np.ascontiguousarray(g, dtype=p.dtype)
            # scalars in the parameter dtype keep float32 loops in float32
            f = p.dtype.type
            _adam_kernel(p.reshape(-1), g.reshape(-1), self.m[name].reshape(-1), self.v[name].reshape(-1),
                         f(self.beta1), f(1.0 - self.beta1), f(self.beta2), f(1.0 - self.beta2), f(self.lr / c1), f(np.sqrt(c2)), f(self.eps), f(decay),
                         f(np.finfo(p.dtype).tiny))
