"""Unrolled aggregated residual propagation of transmission maps.

Each stage updates ``t`` by a learned filter-activation-filter residual plus a
weighted copy of the physics prior. Filters live in the zero-mean DCT basis,
activations are piecewise linear on a fixed grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import activation
from .imaging import as_field, conv_bank, conv_sum, dct_atoms, rot180
from .prior import PriorParams, estimate_airlight, prior_transmission

CONVENTIONS = ("paper_eq2", "unrolled_eq11")
DEFAULT_EPSILON = 0.01


class AuditUnavailableError(ValueError):
    """The energy audit needs the second filter to be the 180-degree rotation of the first."""


@lru_cache(maxsize=None)
def _atoms(n):
    atoms = dct_atoms(n)
    atoms.setflags(write=False)
    return atoms


def realize(coeffs, n):
    """Filters (K, n, n) from DCT coefficients (K, n*n - 1)."""
    return np.tensordot(np.asarray(coeffs, dtype=np.float64), _atoms(n), axes=1)


def project(kernels, n):
    """Coefficients of kernels (K, n, n) in the DCT atom basis (adjoint of ``realize``)."""
    return np.tensordot(np.asarray(kernels), _atoms(n), axes=([1, 2], [1, 2]))


@dataclass
class StageParams:
    """One residual stage.

    ``alpha`` holds the coefficients of the output filters (K, n*n - 1); the
    filters applied to ``t`` first are their rotations unless ``alpha_check``
    is given (untied mode).
    """

    alpha: np.ndarray
    q: np.ndarray
    lambda_p: float = 0.1
    alpha_check: np.ndarray | None = None

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=np.float64))
        self.q = np.atleast_2d(np.asarray(self.q, dtype=np.float64))
        self.lambda_p = float(self.lambda_p)
        if self.alpha_check is not None:
            self.alpha_check = np.atleast_2d(np.asarray(self.alpha_check, dtype=np.float64))
            if self.alpha_check.shape != self.alpha.shape:
                raise ValueError("alpha_check must match alpha in shape")
        if self.alpha.shape[0] != self.q.shape[0] or self.alpha.shape[0] < 1:
            raise ValueError("filters and activations must come in K >= 1 pairs")
        n = int(round(np.sqrt(self.alpha.shape[1] + 1)))
        if n * n - 1 != self.alpha.shape[1]:
            raise ValueError(f"{self.alpha.shape[1]} coefficients do not match an n x n DCT basis")
        activation.grid(self.q.shape[1])
        for arr in (self.alpha, self.q, self.alpha_check):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("stage parameters must be finite")

    @property
    def tied(self):
        return self.alpha_check is None

    @property
    def kernel_size(self):
        return int(round(np.sqrt(self.alpha.shape[1] + 1)))

    @property
    def n_filters(self):
        return self.alpha.shape[0]

    @property
    def n_controls(self):
        return self.q.shape[1]

    def output_filters(self):
        return realize(self.alpha, self.kernel_size)

    def input_filters(self):
        if self.tied:
            return np.stack([rot180(k) for k in self.output_filters()])
        return realize(self.alpha_check, self.kernel_size)

    def n_params(self):
        return self.alpha.size * (1 if self.tied else 2) + self.q.size + 1


@dataclass
class NetworkParams:
    stages: list
    convention: str = "unrolled_eq11"

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown sign convention {self.convention!r}")
        if not self.stages:
            raise ValueError("a network needs at least one stage")
        first = self.stages[0]
        shape = (first.kernel_size, first.n_filters, first.n_controls, first.tied)
        for s in self.stages[1:]:
            if (s.kernel_size, s.n_filters, s.n_controls, s.tied) != shape:
                raise ValueError("all stages must share kernel size, K, M and tying")

    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def kernel_size(self):
        return self.stages[0].kernel_size

    @property
    def n_filters(self):
        return self.stages[0].n_filters

    @property
    def n_controls(self):
        return self.stages[0].n_controls

    @property
    def tied(self):
        return self.stages[0].tied

    @property
    def prior_sign(self):
        # t+ = t - D - sign * lambda * P
        return 1.0 if self.convention == "paper_eq2" else -1.0

    def n_params(self):
        return sum(s.n_params() for s in self.stages)

    def copy(self):
        return NetworkParams([replace(s, alpha=s.alpha.copy(), q=s.q.copy(),
                                      alpha_check=None if s.tied else s.alpha_check.copy())
                              for s in self.stages], self.convention)


def default_stage(n_filters=24, kernel_size=5, n_controls=activation.DEFAULT_M,
                  lambda_p=0.1, tied=True, filter_scale=0.1):
    """Stage initialized with the first K DCT atoms and influence-function activations."""
    n_coef = kernel_size * kernel_size - 1
    if n_filters > n_coef:
        raise ValueError(f"at most {n_coef} filters fit a {kernel_size}x{kernel_size} DCT basis")
    alpha = filter_scale * np.eye(n_coef)[:n_filters]
    q = np.tile(activation.influence_values(n_controls), (n_filters, 1))
    alpha_check = None
    if not tied:
        # rot180 of a DCT atom is +-1 times itself
        alpha_check = np.stack([project(rot180(k)[None], kernel_size)[0]
                                for k in realize(alpha, kernel_size)])
    return StageParams(alpha, q, lambda_p, alpha_check)


def default_network(n_stages=5, n_filters=24, kernel_size=5, n_controls=activation.DEFAULT_M,
                    convention="unrolled_eq11", tied=True, lambda_p=0.1, filter_scale=0.1):
    stages = [default_stage(n_filters, kernel_size, n_controls, lambda_p, tied, filter_scale)
              for _ in range(n_stages)]
    return NetworkParams(stages, convention)


def zero_network(n_stages=1, n_filters=24, kernel_size=5, n_controls=activation.DEFAULT_M,
                 convention="unrolled_eq11", tied=True):
    """All parameters zero: propagation reduces to the pure prior."""
    k, c = n_filters, kernel_size * kernel_size - 1
    stages = [StageParams(np.zeros((k, c)), np.zeros((k, n_controls)), 0.0,
                          None if tied else np.zeros((k, c)))
              for _ in range(n_stages)]
    return NetworkParams(stages, convention)


def data_submodule(t, stage):
    """sum_k w_k (*) phi_k(w'_k (*) t), with w' = rot180(w) for tied stages."""
    t = as_field(t, "t")
    u = conv_bank(t, stage.input_filters())
    return conv_sum(activation.evaluate(stage.q, u), stage.output_filters())


def stage_forward(t, prior_map, stage, convention="unrolled_eq11"):
    t = as_field(t, "t")
    prior_map = as_field(prior_map, "prior_map")
    if t.shape != prior_map.shape:
        raise ValueError(f"shape mismatch: t {t.shape} vs prior {prior_map.shape}")
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown sign convention {convention!r}")
    sign = 1.0 if convention == "paper_eq2" else -1.0
    return t - data_submodule(t, stage) - sign * stage.lambda_p * prior_map


def propagate(t0, prior_map, params):
    """Unclamped trace [t^0, ..., t^L]."""
    trace = [as_field(t0, "t0")]
    for stage in params.stages:
        trace.append(stage_forward(trace[-1], prior_map, stage, params.convention))
    return trace


def network_forward(img, params, prior=PriorParams(), epsilon=DEFAULT_EPSILON, airlight=None):
    """Transmission estimate for a hazy RGB image.

    Returns the final map clamped to [epsilon, 1] and the unclamped trace of
    length L + 1 whose first entry is the prior map.
    """
    if airlight is None:
        airlight = estimate_airlight(img, prior.window)
    prior_map = prior_transmission(img, airlight, prior)
    trace = propagate(prior_map, prior_map, params)
    return np.clip(trace[-1], epsilon, 1.0), trace


# ---------------------------------------------------------------- energy audit

def energy_eval(t, stage):
    """Energy whose negative gradient is the data submodule.

    Sum over filters and pixels of rho_k applied to the responses of the
    filters that act on ``t`` first (rot180 of the output filters).
    """
    if not stage.tied:
        raise AuditUnavailableError("energy audit requires tied (rotated) filter pairs")
    t = as_field(t, "t")
    u = conv_bank(t, stage.input_filters())
    return float(activation.antiderivative(stage.q, u).sum())


def gibbs_log_density(t, stage):
    """Unnormalized log density sum_k sum_x log exp(-rho_k(response))."""
    if not stage.tied:
        raise AuditUnavailableError("energy audit requires tied (rotated) filter pairs")
    u = conv_bank(as_field(t, "t"), stage.input_filters())
    return float(-activation.antiderivative(stage.q, u).sum())


def energy_grad_check(t, stage, n_pixels=100, step=1e-5, seed=0, abs_floor=1e-6):
    """Compare the data submodule with the central-difference gradient of the energy.

    Pixels are sampled at least n - 1 away from the border, where reflective
    padding does not couple the two sides. Only the responses inside the
    perturbed pixel's footprint change, so the energy difference is summed over
    that window.
    """
    if not stage.tied:
        raise AuditUnavailableError("energy audit requires tied (rotated) filter pairs")
    t = as_field(t, "t")
    n = stage.kernel_size
    r = n // 2
    margin = n - 1
    h, w = t.shape
    if h <= 2 * margin or w <= 2 * margin:
        raise ValueError(f"field {t.shape} has no interior for kernel size {n}")
    rng = np.random.default_rng(seed)
    ys = rng.integers(margin, h - margin, n_pixels)
    xs = rng.integers(margin, w - margin, n_pixels)
    d = data_submodule(t, stage)
    filt = stage.input_filters()
    u = conv_bank(t, filt)
    fd = np.empty(n_pixels)
    for i, (y, x) in enumerate(zip(ys, xs)):
        win = u[:, y - r:y + r + 1, x - r:x + r + 1]
        # response change at pixel y+a from a unit bump at y is filt[r + a]
        plus = activation.antiderivative(stage.q, win + step * filt).sum()
        minus = activation.antiderivative(stage.q, win - step * filt).sum()
        fd[i] = -(plus - minus) / (2 * step)
    analytic = d[ys, xs]
    err = np.abs(analytic - fd)
    rel = err / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), abs_floor)
    return {
        "pixels": list(zip(ys.tolist(), xs.tolist())),
        "analytic": analytic,
        "finite_difference": fd,
        "max_abs_error": float(err.max()),
        "max_rel_error": float(rel.max()),
    }
