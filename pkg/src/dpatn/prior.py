"""Physics-derived quantities: airlight, the bounded-radiance transmission prior,
the dark channel baseline and underwater background light."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import as_image, min_filter

AIRLIGHT_FLOOR = 0.05
_DENOM_EPS = 1e-6


@dataclass(frozen=True)
class PriorParams:
    alpha_hat: float = 1.5
    alpha_check: float = 0.0
    window: int = 15

    def __post_init__(self):
        if self.alpha_hat < 0 or self.alpha_check < 0:
            raise ValueError("alpha_hat and alpha_check must be non-negative")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"airlight window must be a positive odd integer, got {self.window}")


def estimate_airlight(img, window=15):
    """Per-channel maximum of the min-filtered channel, clamped to [0.05, 1]."""
    img = as_image(img)
    a = np.array([min_filter(img[:, :, c], window).max() for c in range(3)])
    return np.clip(a, AIRLIGHT_FLOOR, 1.0)


def prior_transmission(img, airlight, params=PriorParams()):
    """Transmission lower bound implied by bounded latent radiance.

    For every channel the radiance is assumed to lie in
    [alpha_check * min(I_c), alpha_hat * max(I_c)]; each bound yields a ratio
    candidate and the pixel takes the largest candidate, projected to [0, 1].
    Candidates with a vanishing denominator are skipped; a pixel without any
    candidate gets 1.
    """
    img = as_image(img)
    airlight = np.asarray(airlight, dtype=np.float64)
    best = np.full(img.shape[:2], -np.inf)
    for c in range(3):
        chan = img[:, :, c]
        num = chan - airlight[c]
        for denom in (params.alpha_hat * chan.max() - airlight[c],
                      params.alpha_check * chan.min() - airlight[c]):
            if abs(denom) < _DENOM_EPS:
                continue
            np.maximum(best, num / denom, out=best)
    best[np.isneginf(best)] = 1.0
    return np.clip(best, 0.0, 1.0)


def dark_channel(img, patch=15):
    img = as_image(img)
    return min_filter(img.min(axis=2), patch)


def dcp_transmission(img, airlight, patch=15, omega=0.95):
    """Dark-channel-prior transmission, used only as a comparison baseline."""
    img = as_image(img)
    normalized = img / np.asarray(airlight, dtype=np.float64)
    return np.clip(1.0 - omega * dark_channel(normalized, patch), 0.0, 1.0)


def underwater_background_light(img):
    """Background light from the most blue/green-shifted of the brightest 0.1% pixels.

    The candidate set is the brightest 0.1% of pixels by channel mean (at least
    one pixel). Among them the pixel maximizing min(I_g - I_r, I_b - I_r) is
    returned; ties go to the first pixel in row-major order.
    """
    img = as_image(img)
    flat = img.reshape(-1, 3)
    n_omega = max(1, int(flat.shape[0] * 0.001))
    lum = flat.mean(axis=1)
    omega = np.sort(np.argsort(-lum, kind="stable")[:n_omega])
    shift = np.minimum(flat[omega, 1] - flat[omega, 0], flat[omega, 2] - flat[omega, 0])
    return flat[omega[np.argmax(shift)]].copy()
