"""Procedural ground truth: depth fields, clean scenes, hazy and underwater
synthesis, and training-set assembly."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import cv2
import numpy as np
from scipy import ndimage

from .imaging import as_field, as_image, load_image
from .training import TrainingPair

DEPTH_KINDS = ("ramp", "radial", "steps", "perlin-like")
SYNTH_KINDS = ("haze", "underwater")
DEPTH_MIN, DEPTH_MAX = 0.5, 5.0

HAZE_A_RANGE = (0.7, 1.0)
HAZE_BETA_RANGE = (0.7, 1.2)
UNDERWATER_B_RANGES = ((0.05, 0.2), (0.6, 0.8), (0.7, 1.0))
UNDERWATER_BETA_RANGES = ((0.05, 0.15), (0.6, 0.9), (0.7, 1.0))


def _check_range(name, value, lo, hi):
    if not lo <= value <= hi:
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class HazeRecipe:
    a: float = 0.85
    beta: float = 1.0
    crop: int | None = 180
    seed: int = 0

    def __post_init__(self):
        _check_range("a", self.a, *HAZE_A_RANGE)
        _check_range("beta", self.beta, *HAZE_BETA_RANGE)

    @classmethod
    def sample(cls, rng, crop=180):
        return cls(float(rng.uniform(*HAZE_A_RANGE)), float(rng.uniform(*HAZE_BETA_RANGE)),
                   crop, int(rng.integers(2**31)))


@dataclass(frozen=True)
class UnderwaterRecipe:
    background: tuple = (0.1, 0.7, 0.85)
    beta: tuple = (0.1, 0.75, 0.85)
    crop: int | None = 180
    seed: int = 0

    def __post_init__(self):
        for c, name in enumerate("rgb"):
            _check_range(f"B_{name}", self.background[c], *UNDERWATER_B_RANGES[c])
            _check_range(f"beta_{name}", self.beta[c], *UNDERWATER_BETA_RANGES[c])

    @classmethod
    def sample(cls, rng, crop=180):
        b = tuple(float(rng.uniform(*r)) for r in UNDERWATER_B_RANGES)
        beta = tuple(float(rng.uniform(*r)) for r in UNDERWATER_BETA_RANGES)
        return cls(b, beta, crop, int(rng.integers(2**31)))


def _rescale(f, lo=DEPTH_MIN, hi=DEPTH_MAX):
    span = f.max() - f.min()
    if span == 0:
        return np.full_like(f, lo)
    return lo + (hi - lo) * (f - f.min()) / span


def _smooth_noise(rng, h, w, octaves=4):
    out = np.zeros((h, w))
    for o in range(octaves):
        cells = 2 ** (o + 2)
        coarse = rng.standard_normal((cells + 1, cells + 1))
        fine = ndimage.zoom(coarse, ((h + 1) / (cells + 1), (w + 1) / (cells + 1)), order=3)
        out += fine[:h, :w] / 2 ** o
    return out


def procedural_depth(kind, h, w, seed=0):
    """Depth field in [0.5, 5.0] standing in for measured depth maps."""
    if h < 8 or w < 8:
        raise ValueError("depth fields need at least 8 x 8 pixels")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "ramp":
        return _rescale(np.broadcast_to(xx[0], (h, w)).copy())
    if kind == "radial":
        r = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2)
        return _rescale(r)
    if kind == "steps":
        n = int(rng.integers(3, 7))
        edges = np.sort(rng.choice(np.arange(1, w), n - 1, replace=False))
        levels = np.linspace(DEPTH_MIN, DEPTH_MAX, n)
        rng.shuffle(levels)
        return levels[np.searchsorted(edges, xx, side="right")]
    if kind == "perlin-like":
        return _rescale(_smooth_noise(rng, h, w))
    raise ValueError(f"unknown depth kind {kind!r}; choose from {DEPTH_KINDS}")


def load_depth(path, lo=DEPTH_MIN, hi=DEPTH_MAX):
    """User-supplied grayscale depth image, rescaled linearly to [lo, hi]."""
    d = load_image(path)
    if d.ndim != 2:
        raise ValueError(f"{path}: depth maps must be grayscale")
    return _rescale(d, lo, hi)


def procedural_scene(h, w, seed=0, n_regions=12):
    """Clean RGB scene: saturated Voronoi regions with smooth shading and fine texture."""
    rng = np.random.default_rng(seed)
    seeds = rng.uniform(0, 1, (n_regions, 2)) * (h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    label = dist.argmin(axis=-1)
    hue = rng.uniform(0, 1, n_regions)
    sat = rng.uniform(0.6, 1.0, n_regions)
    val = rng.uniform(0.35, 1.0, n_regions)
    colors = _hsv_to_rgb(hue, sat, val)
    img = colors[label]
    shading = 0.8 + 0.2 * np.tanh(_smooth_noise(rng, h, w, octaves=3))
    texture = 0.03 * ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), (0.7, 0.7, 0))
    return np.clip(img * shading[..., None] + texture, 0.0, 1.0)


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1)])
    return table[i, np.arange(h.size)]


def crop_window(shape, crop, seed):
    """(top, left) of a seeded random crop window."""
    h, w = shape
    if crop > h or crop > w:
        raise ValueError(f"source of size {h}x{w} is smaller than the {crop}x{crop} crop")
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))


def _crop(arrays, crop, seed):
    if crop is None:
        return arrays
    top, left = crop_window(arrays[0].shape[:2], crop, seed)
    return [a[top:top + crop, left:left + crop] for a in arrays]


def synth_hazy(clean, depth, recipe):
    """Hazy observation and transmission from a clean image and depth.

    Returns (observation, transmission), both cropped to the recipe window.
    """
    clean = as_image(clean, "clean")
    depth = as_field(depth, "depth")
    if clean.shape[:2] != depth.shape:
        raise ValueError("clean image and depth map differ in size")
    t = np.exp(-recipe.beta * depth)
    hazy = clean * t[..., None] + recipe.a * (1.0 - t[..., None])
    hazy, t = _crop([hazy, t], recipe.crop, recipe.seed)
    return hazy, t


def synth_underwater(clean, depth, recipe):
    """Underwater observation with per-channel transmission and background light.

    Returns (observation, transmission stack of shape (H, W, 3)).
    """
    clean = as_image(clean, "clean")
    depth = as_field(depth, "depth")
    if clean.shape[:2] != depth.shape:
        raise ValueError("clean image and depth map differ in size")
    beta = np.asarray(recipe.beta, dtype=np.float64)
    b = np.asarray(recipe.background, dtype=np.float64)
    t = np.exp(-depth[..., None] * beta)
    obs = clean * t + b * (1.0 - t)
    obs, t = _crop([obs, t], recipe.crop, recipe.seed)
    return obs, t


def make_sources(n, size=200, seed=0):
    """Procedural (clean image, depth) source pairs cycling through the depth kinds."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = int(rng.integers(2**31))
        kind = DEPTH_KINDS[i % len(DEPTH_KINDS)]
        out.append((procedural_scene(size, size, s), procedural_depth(kind, size, size, s + 1)))
    return out


def synthesize(sources, n_pairs=50, seed=0, crop=180, kind="haze"):
    """Seeded records {observation, transmission, clean, recipe} from (clean, depth) sources.

    For ``kind="underwater"`` the transmission is an (H, W, 3) stack.
    """
    if not sources:
        raise ValueError("need at least one (clean, depth) source")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {SYNTH_KINDS}")
    for clean, _ in sources:
        h, w = np.shape(clean)[:2]
        if crop is not None and (crop > h or crop > w):
            raise ValueError(f"source of size {h}x{w} is smaller than the {crop}x{crop} crop")
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n_pairs):
        src = int(rng.integers(len(sources)))
        clean, depth = sources[src]
        if kind == "underwater":
            recipe = UnderwaterRecipe.sample(rng, crop)
            obs, t = synth_underwater(clean, depth, recipe)
        else:
            recipe = HazeRecipe.sample(rng, crop)
            obs, t = synth_hazy(clean, depth, recipe)
        (gt,) = _crop([as_image(clean)], recipe.crop, recipe.seed)
        info = {"source": src, **asdict(recipe)}
        records.append({"observation": obs, "transmission": t, "clean": gt, "recipe": info})
    return records


def build_dataset(sources, n_pairs=50, seed=0, crop=180):
    """Hazy training pairs (observation, transmission) with recipes drawn uniformly."""
    return [TrainingPair(r["observation"], r["transmission"])
            for r in synthesize(sources, n_pairs, seed, crop, "haze")]


def rain_streaks(h, w, angle=75.0, density=0.004, length=15, amplitude=0.25, width=1, seed=0):
    """Additive layer of thin parallel streaks; ``angle`` in degrees from the x axis.

    Meant for test overlays and for fitting a streak GMM without a rain corpus.

    Streak seeds are drawn uniformly at the given per-pixel density and each is
    drawn as a segment of the given length; overlaps saturate at ``amplitude``.
    """
    if h < 1 or w < 1:
        raise ValueError("rain layer needs a positive size")
    rng = np.random.default_rng(seed)
    n = max(1, int(round(density * h * w)))
    layer = np.zeros((h, w), dtype=np.float64)
    theta = np.deg2rad(angle)
    dx, dy = np.cos(theta) * length / 2, -np.sin(theta) * length / 2
    for _ in range(n):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        scale = rng.uniform(0.6, 1.0)
        p0 = (int(round(cx - dx * scale)), int(round(cy - dy * scale)))
        p1 = (int(round(cx + dx * scale)), int(round(cy + dy * scale)))
        cv2.line(layer, p0, p1, 1.0, int(width), cv2.LINE_AA)
    return amplitude * np.clip(layer, 0.0, 1.0)


def oriented_energy(f, angle):
    """Mean squared derivative across streaks of the given orientation (per channel summed)."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 3:
        return float(sum(oriented_energy(f[:, :, c], angle) for c in range(f.shape[2])))
    gy, gx = np.gradient(f)
    theta = np.deg2rad(angle)
    # unit normal to the streak direction (x right, y down)
    nx, ny = np.sin(theta), np.cos(theta)
    return float(np.mean((nx * gx + ny * gy) ** 2))
