"""Quadratic training loss, analytic backpropagation through the unrolled stages,
and an L-BFGS driver with greedy / joint scheduling.

Gradient vectors use a fixed layout: stage by stage, each stage contributing
its output-filter coefficients, then (untied only) its input-filter
coefficients, then its activation values, then its prior weight.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning

from . import activation
from .imaging import as_field, as_image, conv2d_adjoint, conv2d_same, kernel_gradient, rot180
from .network import NetworkParams, StageParams, default_network, default_stage, project
from .prior import PriorParams, estimate_airlight, prior_transmission

log = logging.getLogger(__name__)

MODES = ("greedy", "joint", "greedy_then_joint")


@dataclass
class TrainingPair:
    observation: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.observation = as_image(self.observation, "observation")
        self.target = as_field(self.target, "target")
        if self.observation.shape[:2] != self.target.shape:
            raise ValueError(f"observation {self.observation.shape} and target "
                             f"{self.target.shape} differ in size")
        if self.target.min() < 0 or self.target.max() > 1:
            raise ValueError("target transmission must lie in [0, 1]")


@dataclass
class FitOptions:
    memory: int = 10
    max_iter: int = 200
    tol: float = 1e-5
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 20
    nonneg_lambda: bool = False


@dataclass
class FitReport:
    iterations: int = 0
    losses: list = field(default_factory=list)
    grad_norm: float = 0.0
    n_evaluations: int = 0
    line_search_failed: bool = False
    message: str = ""
    seconds: float = field(default=0.0, compare=False)

    def as_dict(self):
        return {
            "iterations": self.iterations,
            "losses": [float(v) for v in self.losses],
            "grad_norm": float(self.grad_norm),
            "n_evaluations": self.n_evaluations,
            "line_search_failed": self.line_search_failed,
            "message": self.message,
            "seconds": self.seconds,
        }


def loss(t_final, t_star):
    """Half the squared Euclidean distance, unnormalized."""
    t_final = np.asarray(t_final, dtype=np.float64)
    t_star = np.asarray(t_star, dtype=np.float64)
    if t_final.shape != t_star.shape:
        raise ValueError(f"shape mismatch: {t_final.shape} vs {t_star.shape}")
    diff = t_final - t_star
    return 0.5 * float(np.dot(diff.ravel(), diff.ravel()))


# ---------------------------------------------------------------- parameter vectors

def _stage_blocks(stage):
    blocks = [stage.alpha.ravel()]
    if not stage.tied:
        blocks.append(stage.alpha_check.ravel())
    blocks += [stage.q.ravel(), np.array([stage.lambda_p])]
    return blocks


def stage_to_vector(stage):
    return np.concatenate(_stage_blocks(stage))


def vector_to_stage(x, template):
    k, c = template.alpha.shape
    m = template.n_controls
    pos = 0
    alpha = x[pos:pos + k * c].reshape(k, c)
    pos += k * c
    alpha_check = None
    if not template.tied:
        alpha_check = x[pos:pos + k * c].reshape(k, c)
        pos += k * c
    q = x[pos:pos + k * m].reshape(k, m)
    pos += k * m
    return StageParams(alpha.copy(), q.copy(), float(x[pos]),
                       None if alpha_check is None else alpha_check.copy())


def params_to_vector(params):
    return np.concatenate([stage_to_vector(s) for s in params.stages])


def vector_to_params(x, template):
    stages = []
    pos = 0
    for st in template.stages:
        n = st.n_params()
        stages.append(vector_to_stage(x[pos:pos + n], st))
        pos += n
    if pos != x.size:
        raise ValueError(f"vector of length {x.size} does not match {pos} parameters")
    return NetworkParams(stages, template.convention)


# ---------------------------------------------------------------- backpropagation

@dataclass
class _Sample:
    prior_map: np.ndarray
    target: np.ndarray
    start: np.ndarray


def prepare_samples(pairs, prior=PriorParams()):
    samples = []
    for p in pairs:
        a = estimate_airlight(p.observation, prior.window)
        pm = prior_transmission(p.observation, a, prior)
        samples.append(_Sample(pm, p.target, pm))
    return samples


def _forward_cached(t, prior_map, stage, sign):
    w_in = stage.input_filters()
    w_out = stage.output_filters()
    u = np.stack([conv2d_same(t, k) for k in w_in])
    v, dv = activation.evaluate_with_slope(stage.q, u)
    d = np.zeros_like(t)
    for vk, k in zip(v, w_out):
        d += conv2d_same(vk, k)
    t_next = t - d - sign * stage.lambda_p * prior_map
    return t_next, (t, u, v, dv, w_in, w_out)


def _backward(g, prior_map, stage, sign, cache):
    """Propagate dJ/dt^{l+1} to dJ/dt^l and the stage's parameter gradient."""
    t, u, v, dv, w_in, w_out = cache
    n = stage.kernel_size
    g_d = -g
    grad_out = kernel_gradient(v, g_d, n)
    g_v = np.stack([conv2d_adjoint(g_d, k) for k in w_out])
    grad_q = activation.value_gradient(u, g_v, stage.n_controls)
    g_u = dv * g_v
    grad_in = kernel_gradient(t, g_u, n)
    g_t = g.copy()
    for gk, k in zip(g_u, w_in):
        g_t += conv2d_adjoint(gk, k)
    grad_lambda = -sign * float(np.dot(g.ravel(), prior_map.ravel()))
    if stage.tied:
        blocks = [project(grad_out + np.stack([rot180(k) for k in grad_in]), n).ravel()]
    else:
        blocks = [project(grad_out, n).ravel(), project(grad_in, n).ravel()]
    blocks += [grad_q.ravel(), np.array([grad_lambda])]
    return g_t, np.concatenate(blocks)


def _loss_grad(samples, stages, sign):
    """Summed loss and gradient for ``stages`` applied from each sample's start state."""
    total = 0.0
    grad = None
    for s in samples:
        t = s.start
        caches = []
        for st in stages:
            t, c = _forward_cached(t, s.prior_map, st, sign)
            caches.append(c)
        r = t - s.target
        total += 0.5 * float(np.dot(r.ravel(), r.ravel()))
        g = r
        parts = []
        for st, c in zip(reversed(stages), reversed(caches)):
            g, gp = _backward(g, s.prior_map, st, sign, c)
            parts.append(gp)
        vec = np.concatenate(parts[::-1])
        grad = vec if grad is None else grad + vec
    return total, grad


def backprop(pair, params, prior=PriorParams()):
    """Loss and exact gradient (flat layout) for one training pair."""
    samples = prepare_samples([pair], prior)
    return _loss_grad(samples, params.stages, params.prior_sign)


def backprop_samples(samples, params):
    return _loss_grad(samples, params.stages, params.prior_sign)


# ---------------------------------------------------------------- L-BFGS

class _Objective:
    """Caches the last (f, g) so separate value and gradient calls cost one evaluation."""

    def __init__(self, fun):
        self.fun = fun
        self.key = None
        self.value = None
        self.evaluations = 0

    def __call__(self, x):
        key = x.tobytes()
        if key != self.key:
            self.value = self.fun(x)
            self.key = key
            self.evaluations += 1
        return self.value

    def f(self, x):
        return self(x)[0]

    def g(self, x):
        return self(x)[1]


def minimize_lbfgs(fun, x0, opts=FitOptions(), project_fn=None):
    """Minimize ``fun(x) -> (f, g)`` by L-BFGS with a strong-Wolfe line search.

    Never raises on line-search failure; the best iterate is returned with
    ``report.line_search_failed`` set.
    """
    start = time.perf_counter()
    obj = _Objective(fun)
    x = np.array(x0, dtype=np.float64)
    f, g = obj(x)
    g0 = np.linalg.norm(g)
    report = FitReport(losses=[f])
    s_hist, y_hist = [], []
    old_f = f + g0 / 2
    tol = opts.tol * g0
    message = "max_iter reached"
    k = 0
    while True:
        gnorm = np.linalg.norm(g)
        if gnorm <= tol or gnorm == 0.0:
            message = "gradient tolerance reached"
            break
        if k >= opts.max_iter:
            break
        d = _two_loop(g, s_hist, y_hist)
        if np.dot(g, d) >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LineSearchWarning)
            step, _, _, f_new, _, g_new = line_search(
                obj.f, obj.g, x, d, gfk=g, old_fval=f, old_old_fval=old_f,
                c1=opts.c1, c2=opts.c2, maxiter=opts.max_line_search)
        if step is None and s_hist:
            # retry once along steepest descent with a fresh memory
            s_hist.clear()
            y_hist.clear()
            d = -g
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LineSearchWarning)
                step, _, _, f_new, _, g_new = line_search(
                    obj.f, obj.g, x, d, gfk=g, old_fval=f, old_old_fval=f + gnorm / 2,
                    c1=opts.c1, c2=opts.c2, maxiter=opts.max_line_search)
        if step is None or f_new is None or not np.isfinite(f_new):
            report.line_search_failed = True
            message = "line search failed"
            break
        x_new = x + step * d
        if g_new is None:
            g_new = obj.g(x_new)
        if project_fn is not None:
            x_proj = project_fn(x_new)
            if not np.array_equal(x_proj, x_new):
                x_new = x_proj
                f_new, g_new = obj(x_new)
                s_hist.clear()
                y_hist.clear()
        s_vec = x_new - x
        y_vec = g_new - g
        if np.dot(s_vec, y_vec) > 1e-12 * np.dot(y_vec, y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > opts.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        old_f = f
        x, f, g = x_new, f_new, g_new
        k += 1
        report.losses.append(f)
        log.debug("iter %d loss %.6g |g| %.3g step %.3g", k, f, np.linalg.norm(g), step)
    report.iterations = k
    report.grad_norm = float(np.linalg.norm(g))
    report.n_evaluations = obj.evaluations
    report.message = message
    report.seconds = time.perf_counter() - start
    return x, report


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append((rho, a))
        q -= a * y
    if s_hist:
        q *= np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def _lambda_projector(template):
    idx = []
    pos = 0
    for st in template.stages:
        pos += st.n_params()
        idx.append(pos - 1)
    idx = np.array(idx)

    def project_fn(x):
        if np.all(x[idx] >= 0):
            return x
        x = x.copy()
        x[idx] = np.maximum(x[idx], 0.0)
        return x
    return project_fn


def _fit_stages(samples, stages, convention, opts):
    template = NetworkParams(stages, convention)
    sign = template.prior_sign

    def fun(x):
        return _loss_grad(samples, vector_to_params(x, template).stages, sign)

    project_fn = _lambda_projector(template) if opts.nonneg_lambda else None
    x, report = minimize_lbfgs(fun, params_to_vector(template), opts, project_fn)
    return vector_to_params(x, template), report


def lbfgs_fit(pairs, params0, opts=FitOptions(), prior=PriorParams()):
    """Jointly fit every learnable scalar of ``params0`` to the training pairs."""
    if not pairs:
        raise ValueError("need at least one training pair")
    samples = prepare_samples(pairs, prior)
    return _fit_stages(samples, params0.copy().stages, params0.convention, opts)


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class NetworkShape:
    n_stages: int = 5
    n_filters: int = 24
    kernel_size: int = 5
    n_controls: int = activation.DEFAULT_M
    convention: str = "unrolled_eq11"
    tied: bool = True
    lambda_p: float = 0.1
    filter_scale: float = 0.1

    def initial_stage(self):
        return default_stage(self.n_filters, self.kernel_size, self.n_controls,
                             self.lambda_p, self.tied, self.filter_scale)

    def initial_network(self):
        return default_network(self.n_stages, self.n_filters, self.kernel_size,
                               self.n_controls, self.convention, self.tied,
                               self.lambda_p, self.filter_scale)


def train_schedule(pairs, shape=NetworkShape(), mode="greedy_then_joint", opts=FitOptions(),
                   prior=PriorParams()):
    """Train a network; returns (params, list of FitReports, one per fit)."""
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}; choose from {MODES}")
    if not pairs:
        raise ValueError("need at least one training pair")
    samples = prepare_samples(pairs, prior)
    sign = 1.0 if shape.convention == "paper_eq2" else -1.0
    reports = []
    if mode == "joint":
        params, rep = _fit_stages(samples, shape.initial_network().stages, shape.convention, opts)
        return params, [rep]

    stages = []
    for l in range(shape.n_stages):
        fitted, rep = _fit_stages(samples, [shape.initial_stage()], shape.convention, opts)
        stage = fitted.stages[0]
        stages.append(stage)
        reports.append(rep)
        log.info("greedy stage %d: loss %.6g -> %.6g in %d iterations",
                 l, rep.losses[0], rep.losses[-1], rep.iterations)
        for s in samples:
            s.start = _forward_cached(s.start, s.prior_map, stage, sign)[0]
    params = NetworkParams(stages, shape.convention)
    if mode == "greedy_then_joint":
        for s in samples:
            s.start = s.prior_map
        params, rep = _fit_stages(samples, params.stages, shape.convention, opts)
        reports.append(rep)
        log.info("joint refinement: loss %.6g -> %.6g in %d iterations",
                 rep.losses[0], rep.losses[-1], rep.iterations)
    return params, reports


def dataset_loss(pairs, params, prior=PriorParams()):
    samples = prepare_samples(pairs, prior)
    total = 0.0
    for s in samples:
        t = s.start
        for st in params.stages:
            t = _forward_cached(t, s.prior_map, st, params.prior_sign)[0]
        total += loss(t, s.target)
    return total


def gradient_check(pair, params, prior=PriorParams(), coords=None, step=1e-5, abs_floor=1e-6):
    """Backprop against central differences of the loss, coordinate by coordinate.

    ``coords`` selects flat parameter indices (all of them by default).
    """
    samples = prepare_samples([pair], prior)
    x0 = params_to_vector(params)
    _, grad = _loss_grad(samples, params.stages, params.prior_sign)
    idx = np.arange(x0.size) if coords is None else np.asarray(coords, dtype=int)
    fd = np.empty(idx.size)
    for i, j in enumerate(idx):
        x = x0.copy()
        x[j] = x0[j] + step
        fp = _loss_grad(samples, vector_to_params(x, params).stages, params.prior_sign)[0]
        x[j] = x0[j] - step
        fm = _loss_grad(samples, vector_to_params(x, params).stages, params.prior_sign)[0]
        fd[i] = (fp - fm) / (2 * step)
    analytic = grad[idx]
    err = np.abs(analytic - fd)
    rel = err / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), abs_floor)
    return {
        "coords": idx,
        "analytic": analytic,
        "finite_difference": fd,
        "max_abs_error": float(err.max()),
        "max_rel_error": float(rel.max()),
    }
