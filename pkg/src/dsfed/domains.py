"""Procedural non-IID federated segmentation tasks.

Every client shares the same structural mask distribution (random filled
ellipses) but renders it with its own modality style: region intensity
levels, a deterministic sinusoidal texture field scaled by the region std,
additive Gaussian noise and a contrast gain. The whole federation is a pure
function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import rng_for

MIN_FG_FRACTION = 0.05
MAX_FG_FRACTION = 0.6
MIN_MEAN_GAP = 0.15


@dataclass(frozen=True)
class DomainStyle:
    fg_mean: float
    fg_std: float
    bg_mean: float
    bg_std: float
    texture_freq: int
    noise_sigma: float
    contrast: float

    def __post_init__(self):
        if abs(self.fg_mean - self.bg_mean) < MIN_MEAN_GAP:
            raise ValueError(
                f"|fg_mean - bg_mean| must be >= {MIN_MEAN_GAP}, got {abs(self.fg_mean - self.bg_mean):.3f}"
            )
        if min(self.fg_std, self.bg_std, self.noise_sigma) < 0:
            raise ValueError("std/sigma values must be non-negative")


@dataclass(frozen=True)
class TaskSample:
    image: np.ndarray  # (H, W) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    domain_id: int


@dataclass
class ClientDataset:
    domain_id: int
    style: DomainStyle
    samples: list[TaskSample]
    mask_bank: list[np.ndarray]

    def train_val_split(self, val_fraction: float = 0.25) -> tuple[list[TaskSample], list[TaskSample]]:
        n_val = max(1, int(round(val_fraction * len(self.samples)))) if val_fraction > 0 else 0
        if n_val >= len(self.samples):
            raise ValueError("val_fraction leaves no training samples")
        cut = len(self.samples) - n_val
        return self.samples[:cut], self.samples[cut:]


def _one_mask(rng: np.random.Generator, grid: int) -> np.ndarray:
    yy, xx = np.mgrid[0:grid, 0:grid]
    mask = np.zeros((grid, grid))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2 * grid, 0.8 * grid, size=2)
        ry = rng.uniform(0.08 * grid, 0.28 * grid)
        rx = rng.uniform(0.08 * grid, 0.28 * grid)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = 1.0
    return mask


def gen_mask(seed: int, grid: int = 32) -> np.ndarray:
    """Binary ellipse mask with foreground fraction in [0.05, 0.6]; deterministic per seed."""
    if grid < 16:
        raise ValueError(f"grid must be >= 16, got {grid}")
    for attempt in range(1000):
        mask = _one_mask(rng_for(seed, "mask", attempt), grid)
        frac = mask.mean()
        if MIN_FG_FRACTION <= frac <= MAX_FG_FRACTION:
            return mask
    raise RuntimeError("mask rejection sampling failed")  # unreachable for grid >= 16


def texture_field(grid: int, freq: int) -> np.ndarray:
    """Deterministic unit-amplitude texture shared by renderer and generator fit."""
    yy, xx = np.mgrid[0:grid, 0:grid]
    return np.sin(2 * np.pi * freq * xx / grid) * np.sin(2 * np.pi * freq * yy / grid)


def render(mask: np.ndarray, style: DomainStyle, seed: int) -> np.ndarray:
    """pixel = contrast * (region_mean + region_std*texture + noise), clamped to [0,1]."""
    grid = mask.shape[0]
    tex = texture_field(grid, style.texture_freq)
    base = np.where(mask > 0.5, style.fg_mean + style.fg_std * tex, style.bg_mean + style.bg_std * tex)
    noise = rng_for(seed, "render").normal(0.0, style.noise_sigma, size=mask.shape) if style.noise_sigma > 0 else 0.0
    return np.clip(style.contrast * (base + noise), 0.0, 1.0)


# style-sampler ranges; fg is always the brighter region so the task family is
# shared across domains, while intensity levels, contrast gap, texture and
# noise level all shift per client
STYLE_RANGES = {
    "bg_mean": (0.05, 0.45),
    "fg_gap": (0.15, 0.45),  # fg_mean = bg_mean + fg_gap
    "fg_std": (0.02, 0.15),
    "bg_std": (0.02, 0.15),
    "texture_freq": (2, 8),
    "noise_sigma": (0.05, 0.32),
    "contrast": (0.95, 1.05),
}
MIN_STYLE_GAP = 0.08


def sample_style(rng: np.random.Generator) -> DomainStyle:
    r = STYLE_RANGES
    bg_mean = rng.uniform(*r["bg_mean"])
    return DomainStyle(
        fg_mean=bg_mean + rng.uniform(*r["fg_gap"]),
        fg_std=rng.uniform(*r["fg_std"]),
        bg_mean=bg_mean,
        bg_std=rng.uniform(*r["bg_std"]),
        texture_freq=int(rng.integers(r["texture_freq"][0], r["texture_freq"][1] + 1)),
        noise_sigma=rng.uniform(*r["noise_sigma"]),
        contrast=rng.uniform(*r["contrast"]),
    )


def _styles_distinct(a: DomainStyle, b: DomainStyle) -> bool:
    return abs(a.fg_mean - b.fg_mean) >= MIN_STYLE_GAP or abs(a.noise_sigma - b.noise_sigma) >= MIN_STYLE_GAP


def make_federation(n_clients: int, samples_per_client: int, seed: int, grid: int = 32) -> list[ClientDataset]:
    """Seeded federation with pairwise-distinct client styles."""
    if n_clients < 2:
        raise ValueError(f"n_clients must be >= 2, got {n_clients}")
    styles: list[DomainStyle] = []
    attempt = 0
    while len(styles) < n_clients:
        cand = sample_style(rng_for(seed, "style", attempt))
        attempt += 1
        if all(_styles_distinct(cand, s) for s in styles):
            styles.append(cand)
        if attempt > 10000:
            raise RuntimeError("could not sample pairwise-distinct styles")
    clients = []
    for cid, style in enumerate(styles):
        samples = []
        for i in range(samples_per_client):
            mask = gen_mask(rng_for(seed, "mseed", cid, i).integers(2**31), grid)
            image = render(mask, style, rng_for(seed, "rseed", cid, i).integers(2**31))
            samples.append(TaskSample(image=image, mask=mask, domain_id=cid))
        clients.append(ClientDataset(domain_id=cid, style=style, samples=samples,
                                     mask_bank=[s.mask for s in samples]))
    return clients


def split_leave_one_out(federation: list[ClientDataset], held_out: int):
    """-> (train_clients, test_samples); held-out client's samples become the test set."""
    ids = [c.domain_id for c in federation]
    if held_out not in ids:
        raise KeyError(f"unknown domain_id {held_out}; have {ids}")
    train = [c for c in federation if c.domain_id != held_out]
    test = next(c for c in federation if c.domain_id == held_out).samples
    return train, test
