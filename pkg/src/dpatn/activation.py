"""Learnable piecewise-linear activations on a uniform control grid over [-1, 1].

Values ``q`` at the grid nodes are the learnable degrees of freedom; the hat
functions interpolating between nodes are fixed. Outside [-1, 1] the end
segments are extended linearly, so the negative antiderivative ``rho`` is a
globally defined piecewise quadratic with ``rho(0) = 0``.

Vectorized helpers take ``q`` as (M,) or as a bank (K, M) paired with inputs of
shape (K, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_M = 31


def grid(m=DEFAULT_M):
    if m < 3 or m % 2 == 0:
        raise ValueError(f"control point count must be odd and >= 3, got {m}")
    return np.linspace(-1.0, 1.0, m)


def influence_values(m=DEFAULT_M):
    """Samples of 2z / (1 + z^2) at the control grid."""
    p = grid(m)
    return 2.0 * p / (1.0 + p * p)


def _locate(z, m):
    h = 2.0 / (m - 1)
    u = (np.asarray(z, dtype=np.float64) + 1.0) / h
    r = np.rint(u)
    u = np.where(np.abs(u - r) < 1e-9, r, u)
    s = np.clip(np.floor(u), 0, m - 2).astype(np.intp)
    return s, u - s, h


def _gather(q, s):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        return q[s], q[s + 1]
    k = q.shape[0]
    flat = s.reshape(k, -1)
    lo = np.take_along_axis(q, flat, axis=1).reshape(s.shape)
    hi = np.take_along_axis(q, flat + 1, axis=1).reshape(s.shape)
    return lo, hi


def evaluate(q, z):
    s, f, _ = _locate(z, np.shape(q)[-1])
    lo, hi = _gather(q, s)
    return (1.0 - f) * lo + f * hi


def slope(q, z):
    """Derivative of the activation, the slope of the segment containing z."""
    s, _, h = _locate(z, np.shape(q)[-1])
    lo, hi = _gather(q, s)
    return (hi - lo) / h


def evaluate_with_slope(q, z):
    s, f, h = _locate(z, np.shape(q)[-1])
    lo, hi = _gather(q, s)
    return (1.0 - f) * lo + f * hi, (hi - lo) / h


def _node_integrals(q):
    # integral of the activation from 0 to each node, exact (trapezoid on linear pieces)
    q = np.asarray(q, dtype=np.float64)
    m = q.shape[-1]
    h = 2.0 / (m - 1)
    seg = 0.5 * h * (q[..., :-1] + q[..., 1:])
    cum = np.concatenate([np.zeros(q.shape[:-1] + (1,)), np.cumsum(seg, axis=-1)], axis=-1)
    return cum - cum[..., (m - 1) // 2: (m + 1) // 2]


def antiderivative(q, z):
    """rho(z) = -integral_0^z phi, so that d rho / dz = -phi."""
    m = np.shape(q)[-1]
    s, f, h = _locate(z, m)
    lo, hi = _gather(q, s)
    nodes, _ = _gather(_node_integrals(q), s)
    return -(nodes + h * (lo * f + 0.5 * (hi - lo) * f * f))


def value_gradient(z, g, m):
    """Gradient of sum(g * phi(z)) with respect to the node values.

    ``z`` and ``g`` are (K, ...) banks; returns (K, m).
    """
    z = np.asarray(z, dtype=np.float64)
    k = z.shape[0]
    s, f, _ = _locate(z, m)
    s = s.reshape(k, -1)
    f = f.reshape(k, -1)
    g = np.asarray(g, dtype=np.float64).reshape(k, -1)
    offs = (np.arange(k) * m)[:, None]
    out = np.bincount((s + offs).ravel(), weights=(g * (1.0 - f)).ravel(), minlength=k * m)
    out += np.bincount((s + 1 + offs).ravel(), weights=(g * f).ravel(), minlength=k * m)
    return out.reshape(k, m)


@dataclass
class PiecewiseActivation:
    values: np.ndarray = field(default_factory=influence_values)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        grid(self.values.size)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("activation values must be finite")

    @property
    def positions(self):
        return grid(self.values.size)

    def __call__(self, z):
        return evaluate(self.values, z)

    def derivative(self, z):
        return slope(self.values, z)

    def rho(self, z):
        return antiderivative(self.values, z)
