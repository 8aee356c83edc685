"""Task-aware layer separation by half-quadratic iterations with plug-in priors.

The observation is split as I = L + P with both layers kept inside the box
[0, I]. Each iteration pulls L and P toward the outputs of two prior operators
with penalties mu_L, mu_P that grow geometrically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .imaging import as_image

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- finite differences

def grad(f):
    """Forward differences with zero flux across the border (axis 0 and 1)."""
    gy = np.zeros_like(f)
    gx = np.zeros_like(f)
    gy[:-1] = f[1:] - f[:-1]
    gx[:, :-1] = f[:, 1:] - f[:, :-1]
    return gy, gx


def grad_adjoint(gy, gx):
    out = np.zeros_like(gy)
    out[:-1] -= gy[:-1]
    out[1:] += gy[:-1]
    out[:, :-1] -= gx[:, :-1]
    out[:, 1:] += gx[:, :-1]
    return out


_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def laplacian(f):
    """Five-point Laplacian with reflective (Neumann) borders; equals -grad^T grad."""
    return cv2.filter2D(np.asarray(f, dtype=np.float64), -1, _LAPLACE, borderType=cv2.BORDER_REPLICATE)


def conjugate_gradient(apply_a, b, x0, iters):
    """Fixed-budget CG; a trailing channel axis holds independent systems."""
    x = np.array(x0, dtype=np.float64)
    r = b - apply_a(x)
    p = r.copy()
    tmp = np.empty_like(r)

    def dots(u, v):
        # per-channel inner products over the two spatial axes
        return np.einsum("ij...,ij...->...", u, v)

    rr = dots(r, r)
    for _ in range(iters):
        ap = apply_a(p)
        pap = dots(p, ap)
        step = np.divide(rr, pap, out=np.zeros_like(rr), where=pap > 0)
        np.multiply(p, step, out=tmp)
        x += tmp
        np.multiply(ap, step, out=tmp)
        r -= tmp
        rr_new = dots(r, r)
        beta = np.divide(rr_new, rr, out=np.zeros_like(rr), where=rr > 0)
        p *= beta
        p += r
        rr = rr_new
    return x


# ---------------------------------------------------------------- prior operators

def operator_truncated_gradient(img, tau, mu=1.0, inner_iters=30):
    """Edge-preserving step for the truncated quadratic gradient prior.

    Gradients with squared magnitude below ``tau`` are dropped, the rest kept;
    Y then solves (mu Id + 2 grad^T grad) Y = mu img + 2 grad^T g.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    img = np.asarray(img, dtype=np.float64)
    gy, gx = grad(img)
    keep = gy * gy + gx * gx >= tau
    rhs = mu * img + 2.0 * grad_adjoint(gy * keep, gx * keep)

    def apply_a(y):
        return mu * y - 2.0 * laplacian(y)

    return conjugate_gradient(apply_a, rhs, img, inner_iters)


def operator_laplacian_smooth(img, mu, inner_iters=30):
    """argmin_Y ||lap Y||^2 + mu/2 ||Y - img||^2 via CG on (mu Id + 2 lap^T lap) Y = mu img."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    img = np.asarray(img, dtype=np.float64)

    def apply_a(y):
        return mu * y + 2.0 * laplacian(laplacian(y))

    return conjugate_gradient(apply_a, mu * img, img, inner_iters)


class TruncatedGradient:
    name = "truncated-gradient"

    def __init__(self, tau=0.01, inner_iters=30):
        self.tau = tau
        self.inner_iters = inner_iters

    def __call__(self, x, mu):
        return operator_truncated_gradient(x, self.tau, mu, self.inner_iters)

    @property
    def params(self):
        return {"tau": self.tau, "inner_iters": self.inner_iters}


class LaplacianSmooth:
    name = "laplacian-smooth"

    def __init__(self, inner_iters=30):
        self.inner_iters = inner_iters

    def __call__(self, x, mu):
        return operator_laplacian_smooth(x, mu, self.inner_iters)

    @property
    def params(self):
        return {"inner_iters": self.inner_iters}


class Identity:
    name = "identity"
    params = {}

    def __call__(self, x, mu):
        return np.array(x, dtype=np.float64)


# ---------------------------------------------------------------- iterations

@dataclass(frozen=True)
class SeparationOptions:
    mu_l: float = 0.1
    mu_p: float = 0.5
    eta: float = 1.05
    max_iter: int = 500
    tol: float = 1e-4
    min_iter: int = 0
    window: int = 100
    growth_frac: float = 0.25

    def __post_init__(self):
        if self.mu_l <= 0 or self.mu_p <= 0:
            raise ValueError("penalty parameters must be positive")
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.min_iter > self.max_iter:
            raise ValueError("min_iter exceeds max_iter")


@dataclass
class SeparationState:
    L: np.ndarray
    P: np.ndarray
    Y_L: np.ndarray
    Y_P: np.ndarray
    mu_l0: float = 0.1
    mu_p0: float = 0.5
    eta: float = 1.05
    k: int = 0
    box_violations: int = 0

    @property
    def mu_l(self):
        return self.mu_l0 * self.eta ** self.k

    @property
    def mu_p(self):
        return self.mu_p0 * self.eta ** self.k

    @classmethod
    def initial(cls, img, opts=SeparationOptions()):
        img = as_image(img)
        zero = np.zeros_like(img)
        return cls(img.copy(), zero, img.copy(), zero.copy(), opts.mu_l, opts.mu_p, opts.eta)


def _into_box(y, upper, state, label):
    if np.any(y < 0) or np.any(y > upper):
        if state.box_violations == 0:
            log.warning("%s operator output left the feasible box; projecting", label)
        state.box_violations += 1
    return np.clip(y, 0.0, upper)


def hq_step(img, state, op_l, op_p):
    """One half-quadratic iteration; returns a new state."""
    img = as_image(img)
    mu_l, mu_p = state.mu_l, state.mu_p
    y_l = _into_box(op_l(state.L, mu_l), img, state, "L")
    new_l = np.clip((img - state.P + mu_l * y_l) / (1.0 + mu_l), 0.0, img)
    y_p = _into_box(op_p(state.P, mu_p), img, state, "P")
    new_p = (img - new_l + mu_p * y_p) / (1.0 + mu_p)
    # keep L + P <= I
    new_p = np.clip(new_p, 0.0, img - new_l)
    return replace(state, L=new_l, P=new_p, Y_L=y_l, Y_P=y_p, k=state.k + 1)


def _rms(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class ConvergenceReport:
    """Difference sequences of a separation run and their boundedness certificate.

    ``status`` is "pass", "fail", or "insufficient" when the run is shorter
    than the certification window.
    """

    diffs: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    mu_l: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged_at: int | None = None
    growth_rate: float = 0.0
    decay_rate: float = 0.0
    bound: float = 0.0
    status: str = "insufficient"

    COLUMNS = ("L", "P", "Y_L", "Y_P")

    @property
    def iterations(self):
        return len(self.diffs)

    @property
    def converged(self):
        return self.converged_at is not None

    @property
    def certificate(self):
        return self.status == "pass"

    def scaled(self):
        """Successive differences times the penalty in force when they were produced."""
        mu = np.stack([self.mu_l, self.mu_p, self.mu_l, self.mu_p], axis=1)
        return self.diffs * mu

    def as_dict(self):
        return {
            "iterations": self.iterations,
            "converged_at": self.converged_at,
            "status": self.status,
            "growth_rate": self.growth_rate,
            "decay_rate": self.decay_rate,
            "bound": self.bound,
            "final_diffs": dict(zip(self.COLUMNS, self.diffs[-1].tolist())) if len(self.diffs) else {},
        }


def _log_slope(values):
    # least-squares slope of log(values) against iteration, ignoring exact zeros
    v = np.asarray(values)
    k = np.arange(v.size)
    ok = v > 0
    if ok.sum() < 2:
        return -np.inf
    return float(np.polyfit(k[ok], np.log(v[ok]), 1)[0])


def certify(report, opts=SeparationOptions()):
    """Check that penalty-scaled differences show no growth over the final window.

    A sequence obeying diff_k <= C / mu^k has a scaled log-slope that tends to
    zero; one that fails to decay grows at log(eta) per iteration. The test
    passes when the fitted slope stays below ``growth_frac * log(eta)``.
    """
    if report.iterations == 0:
        return report
    scaled = report.scaled()
    tail = slice(max(0, report.iterations - opts.window), None)
    report.growth_rate = max(_log_slope(scaled[tail, j]) for j in range(4))
    report.decay_rate = max(_log_slope(report.diffs[tail, j]) for j in range(4))
    report.bound = float(scaled.max())
    if not np.all(np.isfinite(scaled)):
        report.status = "fail"
    elif report.iterations < opts.window:
        report.status = "insufficient"
    else:
        ok = report.converged and report.growth_rate <= opts.growth_frac * np.log(opts.eta)
        report.status = "pass" if ok else "fail"
    return report


def run_separation(img, op_l, op_p, opts=SeparationOptions(), callback=None):
    """Iterate until the per-pixel RMS change of all four variables drops below tol.

    With ``opts.min_iter`` the run continues past convergence so that the
    certificate sees a full window. Returns (L, P, report); never raises on
    non-convergence.
    """
    img = as_image(img)
    state = SeparationState.initial(img, opts)
    diffs, mus_l, mus_p = [], [], []
    converged_at = None
    for _ in range(opts.max_iter):
        mu_l, mu_p = state.mu_l, state.mu_p
        new = hq_step(img, state, op_l, op_p)
        if np.any(new.L < 0) or np.any(new.L > img) or np.any(new.P < 0) or np.any(new.P > img):
            raise AssertionError("separation iterate left the feasible box")
        d = (_rms(new.L, state.L), _rms(new.P, state.P),
             _rms(new.Y_L, state.Y_L), _rms(new.Y_P, state.Y_P))
        diffs.append(d)
        mus_l.append(mu_l)
        mus_p.append(mu_p)
        state = new
        if callback is not None:
            callback(state, d)
        if converged_at is None and max(d) < opts.tol:
            converged_at = state.k
        if converged_at is not None and state.k >= opts.min_iter:
            break
    report = ConvergenceReport(np.array(diffs), np.array(mus_l), np.array(mus_p), converged_at)
    certify(report, opts)
    if report.status == "fail" or not report.converged:
        log.warning("separation %s after %d iterations (certificate: %s)",
                    "converged" if report.converged else "did not converge",
                    report.iterations, report.status)
    return state.L, state.P, report
