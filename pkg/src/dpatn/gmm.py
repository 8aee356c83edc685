"""Gaussian mixture patch prior: EM fitting on mean-removed patches and the
EPLL-style plug-in operator used for rain-streak layers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .imaging import as_field, dct_atoms

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EIG_FLOOR = 1e-6


class UnfittedModelError(ValueError):
    pass


@dataclass
class GMMModel:
    """Mixture over patch coordinates in the zero-mean DCT basis (patch**2 - 1 dims)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    patch: int
    log_likelihood: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        d = self.patch * self.patch - 1
        k = self.weights.size
        if k < 1:
            raise UnfittedModelError("GMM has no components")
        if self.means.shape != (k, d) or self.covs.shape != (k, d, d):
            raise ValueError(f"GMM arrays inconsistent with {k} components of dimension {d}")
        if not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("GMM weights must sum to one")

    @property
    def n_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def eig(self):
        vals, vecs = np.linalg.eigh(self.covs)
        return np.maximum(vals, EIG_FLOOR), vecs

    def to_dict(self):
        return {
            "format": "dpatn-gmm",
            "version": FORMAT_VERSION,
            "patch": self.patch,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "log_likelihood": [float(v) for v in self.log_likelihood],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "dpatn-gmm":
            raise ValueError("not a GMM file")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported GMM file version {d.get('version')!r}")
        return cls(d["weights"], d["means"], d["covs"], int(d["patch"]), list(d.get("log_likelihood", [])))


def _basis(patch):
    if patch < 3 or patch % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 3, got {patch}")
    return dct_atoms(patch).reshape(patch * patch - 1, -1)


def extract_patches(f, patch, stride=1):
    """All patch x patch windows of a 2-D field at the given stride, flattened."""
    f = as_field(f)
    if f.shape[0] < patch or f.shape[1] < patch:
        raise ValueError(f"field {f.shape} smaller than patch {patch}")
    win = np.lib.stride_tricks.sliding_window_view(f, (patch, patch))[::stride, ::stride]
    return win.reshape(-1, patch * patch)


def patch_coordinates(samples, patch, stride=1):
    basis = _basis(patch)
    rows = [extract_patches(s, patch, stride) for s in samples]
    return np.concatenate(rows) @ basis.T


def _log_gauss(z, means, vals, vecs):
    # log N(z; m_k, U diag(vals) U^T) for every component, shape (N, K)
    d = z.shape[1]
    out = np.empty((z.shape[0], means.shape[0]))
    for k in range(means.shape[0]):
        proj = (z - means[k]) @ vecs[k]
        maha = np.sum(proj * proj / vals[k], axis=1)
        out[:, k] = -0.5 * (maha + np.sum(np.log(vals[k])) + d * np.log(2 * np.pi))
    return out


def _floor_cov(c):
    vals, vecs = np.linalg.eigh(c)
    return (vecs * np.maximum(vals, EIG_FLOOR)) @ vecs.T


def _kmeanspp(z, k, rng):
    centers = [z[rng.integers(len(z))]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(z), p=d2 / total) if total > 0 else rng.integers(len(z))
        centers.append(z[idx])
        d2 = np.minimum(d2, np.sum((z - z[idx]) ** 2, axis=1))
    return np.array(centers)


def _single(z, patch):
    mean = z.mean(axis=0, keepdims=True)
    cov = _floor_cov(np.atleast_2d(np.cov(z, rowvar=False, bias=True)))[None]
    return GMMModel(np.ones(1), mean, cov, patch)


def fit_gmm_patches(samples, patch=7, n_components=5, em_iters=50, seed=0, stride=1,
                    max_patches=20000, tol=1e-8):
    """EM on mean-removed patches with k-means++ seeding and an eigenvalue floor.

    The floored covariance is the constrained maximizer of the M-step objective,
    so the log-likelihood history stays non-decreasing.
    """
    if n_components < 1:
        raise ValueError("n_components must be positive")
    rng = np.random.default_rng(seed)
    z = patch_coordinates(samples, patch, stride)
    if len(z) < 10 * n_components:
        raise ValueError(f"need at least {10 * n_components} patches, found {len(z)}")
    if len(z) > max_patches:
        z = z[np.sort(rng.choice(len(z), max_patches, replace=False))]
    n = len(z)

    n_distinct = len(np.unique(np.round(z, 12), axis=0))
    if n_distinct < n_components or float(z.var(axis=0).sum()) < 1e-12:
        log.warning("degenerate patch data; falling back to a single component")
        return _single(z, patch)

    centers = _kmeanspp(z, n_components, rng)
    label = np.argmin(((z[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    d = z.shape[1]
    weights = np.empty(n_components)
    means = np.empty((n_components, d))
    covs = np.empty((n_components, d, d))
    for k in range(n_components):
        members = z[label == k]
        if len(members) < 2:
            members = z
        weights[k] = max((label == k).sum(), 1) / n
        means[k] = centers[k]
        covs[k] = _floor_cov(np.cov(members, rowvar=False, bias=True))
    weights /= weights.sum()

    history = []
    for _ in range(em_iters):
        vals, vecs = np.linalg.eigh(covs)
        logp = _log_gauss(z, means, np.maximum(vals, EIG_FLOOR), vecs) + np.log(weights)
        norm = logsumexp(logp, axis=1)
        history.append(float(norm.sum()))
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = (resp.T @ z) / nk[:, None]
        for k in range(n_components):
            diff = z - means[k]
            covs[k] = _floor_cov((resp[:, k, None] * diff).T @ diff / nk[k])
        if len(history) > 1 and history[-1] - history[-2] < tol * abs(history[-1]):
            break
    model = GMMModel(weights, means, covs, patch, history)
    return model


def wiener_patches(z, model, mu):
    """Highest-responsibility component per patch, then its Wiener estimate."""
    noise = 1.0 / mu
    vals, vecs = model.eig()
    logp = _log_gauss(z, model.means, vals + noise, vecs) + np.log(model.weights)
    pick = np.argmax(logp, axis=1)
    out = np.empty_like(z)
    for k in np.unique(pick):
        sel = pick == k
        proj = (z[sel] - model.means[k]) @ vecs[k]
        out[sel] = model.means[k] + (proj * (vals[k] / (vals[k] + noise))) @ vecs[k].T
    return out, pick


def _positions(size, patch, stride):
    last = size - patch
    pos = list(range(0, last + 1, stride))
    if pos[-1] != last:
        pos.append(last)
    return np.array(pos)


def operator_patch_gmm(field_in, model, mu, stride=1):
    """Approximate MAP under the patch GMM for one field, or per channel of an image."""
    if not isinstance(model, GMMModel):
        raise UnfittedModelError("operator needs a fitted GMMModel")
    if mu <= 0:
        raise ValueError("mu must be positive")
    arr = np.asarray(field_in, dtype=np.float64)
    if arr.ndim == 3:
        return np.stack([operator_patch_gmm(arr[:, :, c], model, mu, stride)
                         for c in range(arr.shape[2])], axis=2)
    f = as_field(arr)
    p = model.patch
    basis = _basis(p)
    rows, cols = _positions(f.shape[0], p, stride), _positions(f.shape[1], p, stride)
    win = np.lib.stride_tricks.sliding_window_view(f, (p, p))[np.ix_(rows, cols)]
    flat = win.reshape(-1, p * p)
    dc = flat.mean(axis=1, keepdims=True)
    z_hat, _ = wiener_patches(flat @ basis.T, model, mu)
    rec = (dc + z_hat @ basis).reshape(len(rows), len(cols), p, p)
    acc = np.zeros_like(f)
    cnt = np.zeros_like(f)
    for i in range(p):
        for j in range(p):
            acc[np.ix_(rows + i, cols + j)] += rec[:, :, i, j]
            cnt[np.ix_(rows + i, cols + j)] += 1.0
    return acc / cnt


class PatchGMM:
    name = "patch-gmm"

    def __init__(self, model, stride=1):
        if not isinstance(model, GMMModel):
            raise UnfittedModelError("operator needs a fitted GMMModel")
        self.model = model
        self.stride = stride

    def __call__(self, x, mu):
        return operator_patch_gmm(x, self.model, mu, self.stride)

    @property
    def params(self):
        return {"patch": self.model.patch, "n_components": self.model.n_components,
                "stride": self.stride}
