"""Radiance recovery, underwater color constancy and the end-to-end pipelines."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .gmm import PatchGMM
from .imaging import as_field, as_image
from .network import network_forward
from .prior import (AIRLIGHT_FLOOR, PriorParams, dcp_transmission, estimate_airlight,
                    underwater_background_light)
from .separation import LaplacianSmooth, SeparationOptions, TruncatedGradient, run_separation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecoveryConfig:
    epsilon: float = 0.01
    clamp_output: bool = True

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.1:
            raise ValueError(f"epsilon must lie in (0, 0.1], got {self.epsilon}")


def recover_radiance(img, t, airlight, cfg=RecoveryConfig()):
    """J = A + (I - A) / max(t, eps), per channel."""
    img = as_image(img)
    t = as_field(t, "t")
    if img.shape[:2] != t.shape:
        raise ValueError("image and transmission differ in size")
    a = np.asarray(airlight, dtype=np.float64)
    out = a + (img - a) / np.maximum(t, cfg.epsilon)[..., None]
    return np.clip(out, 0.0, 1.0) if cfg.clamp_output else out


def recover_radiance_per_channel(img, t_rgb, background, cfg=RecoveryConfig()):
    """Channelwise inversion with per-channel transmission (H, W, 3) and background light."""
    img = as_image(img)
    t_rgb = as_image(t_rgb, "t_rgb")
    if img.shape != t_rgb.shape:
        raise ValueError("image and transmission stack differ in size")
    b = np.asarray(background, dtype=np.float64)
    out = b + (img - b) / np.maximum(t_rgb, cfg.epsilon)
    return np.clip(out, 0.0, 1.0) if cfg.clamp_output else out


def color_constancy_normalize(img, clip=True):
    """Scale channels so that all channel means equal the mean of the channel means."""
    img = as_image(img)
    means = img.reshape(-1, 3).mean(axis=0)
    target = means.mean()
    gains = np.ones(3)
    for c in range(3):
        if means[c] < 1e-6:
            log.warning("channel %d mean %.3g too small to rescale; left unchanged", c, means[c])
        else:
            gains[c] = target / means[c]
    out = img * gains
    return np.clip(out, 0.0, 1.0) if clip else out


def pipeline_dehaze(img, model, prior=PriorParams(), cfg=RecoveryConfig()):
    """Returns (radiance, transmission, airlight)."""
    img = as_image(img)
    airlight = estimate_airlight(img, prior.window)
    t, _ = network_forward(img, model, prior, cfg.epsilon, airlight=airlight)
    return recover_radiance(img, t, airlight, cfg), t, airlight


def pipeline_dcp(img, prior=PriorParams(), cfg=RecoveryConfig(), patch=15, omega=0.95):
    """Dark-channel baseline with the same airlight estimate and inversion."""
    img = as_image(img)
    airlight = estimate_airlight(img, prior.window)
    t = np.clip(dcp_transmission(img, airlight, patch, omega), cfg.epsilon, 1.0)
    return recover_radiance(img, t, airlight, cfg), t, airlight


def pipeline_underwater(img, model, prior=PriorParams(), sep_opts=SeparationOptions(),
                        cfg=RecoveryConfig(), separate=True, tau=0.01):
    """Returns (radiance, transmission stack, background light, separation report or None).

    With ``separate`` the color-shift layer is split off first and the result is
    color-balanced; without it the observation is inverted directly.
    """
    img = as_image(img)
    background = underwater_background_light(img)
    report = None
    latent = img
    if separate:
        latent, _, report = run_separation(img, TruncatedGradient(tau), LaplacianSmooth(), sep_opts)
    # the bounded-radiance prior needs all three channels, so one map is propagated
    # against the background light and shared by the channel inversions
    light = np.clip(background, AIRLIGHT_FLOOR, 1.0)
    t, _ = network_forward(latent, model, prior, cfg.epsilon, airlight=light)
    t_rgb = np.repeat(t[..., None], 3, axis=2)
    out = recover_radiance_per_channel(latent, t_rgb, background, cfg)
    if separate:
        out = color_constancy_normalize(out)
    return out, t_rgb, background, report


def pipeline_derain(img, model, gmm, prior=PriorParams(), sep_opts=SeparationOptions(),
                    cfg=RecoveryConfig(), tau=0.08, stride=1):
    """Returns (radiance, rain layer, transmission, separation report)."""
    img = as_image(img)
    latent, rain, report = run_separation(img, TruncatedGradient(tau), PatchGMM(gmm, stride), sep_opts)
    out, t, _ = pipeline_dehaze(latent, model, prior, cfg)
    return out, rain, t, report
