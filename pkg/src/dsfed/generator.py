"""Client-fitted conditional mask-to-image generators and the global generated set.

Each client fits a small parametric generator (per-region intensity moments,
texture frequency and residual noise level) from its private image-mask
pairs. Only these parameters and the client's mask bank ever reach the
server, which samples the global generated dataset from them. A simplified
Fréchet distance over per-image pixel statistics measures style fidelity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .domains import ClientDataset, sample_style, texture_field
from .seeding import rng_for

MIN_FIT_SAMPLES = 5
GENERATOR_RECORD_BYTES = 2 + 7 * 8  # u16 client id + 7 little-endian float64 fields


@dataclass(frozen=True)
class GeneratorParams:
    est_fg_mean: float
    est_fg_std: float
    est_bg_mean: float
    est_bg_std: float
    est_texture_freq: int
    est_noise_sigma: float
    source_client: int

    def __post_init__(self):
        vals = (self.est_fg_mean, self.est_fg_std, self.est_bg_mean, self.est_bg_std, self.est_noise_sigma)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("generator statistics must be finite")
        if self.est_fg_std < 0 or self.est_bg_std < 0 or self.est_noise_sigma < 0:
            raise ValueError("estimated stds must be non-negative")


@dataclass(frozen=True)
class GeneratedSample:
    image: np.ndarray
    mask: np.ndarray
    source_client: int
    index: int


def fit_generator(client_data: ClientDataset) -> GeneratorParams:
    """Moment-fit a conditional generator from a client's private samples.

    Means/stds are empirical per-region moments in rendered (post-contrast)
    space; the texture frequency is recovered by matched filtering the
    noise-averaged residual, and the noise level is the residual std after
    texture removal.
    """
    samples = client_data.samples
    if len(samples) < MIN_FIT_SAMPLES:
        raise ValueError(f"need >= {MIN_FIT_SAMPLES} samples to fit a generator, got {len(samples)}")
    grid = samples[0].image.shape[0]

    fg_pix = np.concatenate([s.image[s.mask > 0.5] for s in samples])
    bg_pix = np.concatenate([s.image[s.mask <= 0.5] for s in samples])
    fg_mean, bg_mean = fg_pix.mean(), bg_pix.mean()

    # noise averages out across samples; texture survives since the field is
    # deterministic given the frequency
    residuals = [s.image - np.where(s.mask > 0.5, fg_mean, bg_mean) for s in samples]
    mean_resid = np.mean(residuals, axis=0)

    lo, hi = 2, max(2, grid // 8)
    freqs = range(lo, hi + 1)
    scores = [abs(np.sum(mean_resid * texture_field(grid, f))) for f in freqs]
    freq = int(list(freqs)[int(np.argmax(scores))])
    tex = texture_field(grid, freq)

    def amp(foreground: bool) -> float:
        # per-sample projection of the region residual onto the texture basis
        num = den = 0.0
        for r, s in zip(residuals, samples):
            sel = (s.mask > 0.5) if foreground else (s.mask <= 0.5)
            num += np.sum(r[sel] * tex[sel])
            den += np.sum(tex[sel] ** 2)
        return max(0.0, num / den) if den > 1e-12 else 0.0

    fg_std = amp(True)
    bg_std = amp(False)

    noise = np.concatenate([
        (r - np.where(s.mask > 0.5, fg_std, bg_std) * tex).reshape(-1)
        for r, s in zip(residuals, samples)
    ])
    params = GeneratorParams(
        est_fg_mean=float(fg_mean),
        est_fg_std=float(fg_std),
        est_bg_mean=float(bg_mean),
        est_bg_std=float(bg_std),
        est_texture_freq=freq,
        est_noise_sigma=float(noise.std()),
        source_client=client_data.domain_id,
    )
    return _moment_correct(params, samples)


def _region_moments(images, masks):
    fg = np.concatenate([im[m > 0.5] for im, m in zip(images, masks)])
    bg = np.concatenate([im[m <= 0.5] for im, m in zip(images, masks)])
    return fg.mean(), fg.std(), bg.mean(), bg.std()


def _moment_correct(params: GeneratorParams, samples, iters: int = 3) -> GeneratorParams:
    """Counter the clipping bias of the [0,1] range.

    Raw moment estimates come from clipped pixels, and rendering clips again,
    so synthetic sets drift away from the client's real distribution at high
    noise levels. Simulate the renderer on the client's own masks and nudge
    the means/noise until the synthetic region moments match the real ones.
    """
    masks = [s.mask for s in samples]
    real_fg_m, real_fg_s, real_bg_m, real_bg_s = _region_moments(
        [s.image for s in samples], masks)
    for it in range(iters):
        synth = [
            generate(params, m, int(rng_for(params.source_client, "fit-sim", it, i).integers(2**31)))
            for i, m in enumerate(masks)
        ]
        syn_fg_m, syn_fg_s, syn_bg_m, syn_bg_s = _region_moments(
            [s.image for s in synth], masks)
        sigma_scale = 1.0
        syn_spread = 0.5 * (syn_fg_s + syn_bg_s)
        if syn_spread > 1e-9:
            sigma_scale = 0.5 * (real_fg_s + real_bg_s) / syn_spread
        params = GeneratorParams(
            est_fg_mean=params.est_fg_mean + (real_fg_m - syn_fg_m),
            est_fg_std=params.est_fg_std,
            est_bg_mean=params.est_bg_mean + (real_bg_m - syn_bg_m),
            est_bg_std=params.est_bg_std,
            est_texture_freq=params.est_texture_freq,
            est_noise_sigma=max(0.0, params.est_noise_sigma * sigma_scale),
            source_client=params.source_client,
        )
    return params


def generate(gen: GeneratorParams, mask: np.ndarray, seed: int, index: int = 0) -> GeneratedSample:
    """Render an image from a mask with the fitted statistics; the mask is the label."""
    grid = mask.shape[0]
    tex = texture_field(grid, gen.est_texture_freq)
    base = np.where(mask > 0.5, gen.est_fg_mean + gen.est_fg_std * tex, gen.est_bg_mean + gen.est_bg_std * tex)
    if gen.est_noise_sigma > 0:
        base = base + rng_for(seed, "generate").normal(0.0, gen.est_noise_sigma, size=mask.shape)
    return GeneratedSample(image=np.clip(base, 0.0, 1.0), mask=mask, source_client=gen.source_client, index=index)


def jitter_params(gen: GeneratorParams, rng: np.random.Generator, strength: float) -> GeneratorParams:
    """Server-side style augmentation in generator-parameter space.

    The fitted statistics live in the same parameter space as the shared
    style prior (the modality family every domain is drawn from), so the
    server can interpolate each sample's style between the client's fitted
    point and a fresh draw from that prior. strength caps the interpolation
    weight; 0 returns the input unchanged (and draws nothing from rng).
    """
    if strength <= 0:
        return gen
    prior = sample_style(rng)
    u = rng.uniform(0.0, strength)

    def mix(a: float, b: float) -> float:
        return (1.0 - u) * a + u * b

    return GeneratorParams(
        est_fg_mean=mix(gen.est_fg_mean, prior.fg_mean),
        est_fg_std=max(0.0, mix(gen.est_fg_std, prior.fg_std)),
        est_bg_mean=mix(gen.est_bg_mean, prior.bg_mean),
        est_bg_std=max(0.0, mix(gen.est_bg_std, prior.bg_std)),
        est_texture_freq=max(1, int(round(mix(gen.est_texture_freq, prior.texture_freq)))),
        est_noise_sigma=max(0.0, mix(gen.est_noise_sigma, prior.noise_sigma)),
        source_client=gen.source_client,
    )


def build_global_set(
    generators: list[GeneratorParams],
    mask_banks: dict[int, list[np.ndarray]],
    n_per_client: int,
    seed: int,
    augment: float = 0.0,
) -> list[GeneratedSample]:
    """Union over clients of n_per_client samples conditioned on bank masks.

    augment > 0 jitters each sample's generator parameters (style
    augmentation); 0 reproduces the fitted styles exactly.
    """
    out: list[GeneratedSample] = []
    idx = 0
    for gen in generators:
        bank = mask_banks.get(gen.source_client)
        if not bank:
            raise ValueError(f"empty mask bank for client {gen.source_client}")
        rng = rng_for(seed, "dtilde", gen.source_client)
        for _ in range(n_per_client):
            mask = bank[int(rng.integers(len(bank)))]
            params = jitter_params(gen, rng, augment)
            out.append(generate(params, mask, int(rng.integers(2**31)), index=idx))
            idx += 1
    return out


# -- style fidelity metric -------------------------------------------------


def image_summary(image: np.ndarray) -> np.ndarray:
    """3-dim pixel-statistic summary: mean, std, mean gradient magnitude."""
    gy, gx = np.gradient(image)
    return np.array([image.mean(), image.std(), np.hypot(gx, gy).mean()])


def frechet_gaussian(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """Squared Fréchet distance between two Gaussians; clamped at zero."""
    diff = mu_a - mu_b
    covmean = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean) or not np.isfinite(covmean).all():
        # degenerate covariance: regularize before the matrix square root
        eps = 1e-6 * np.eye(cov_a.shape[0])
        covmean = scipy.linalg.sqrtm((cov_a + eps) @ (cov_b + eps))
        covmean = np.real(covmean)
    d2 = float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean))
    if d2 < -1e-9:
        raise ValueError(f"Fréchet distance unexpectedly negative: {d2}")
    return max(0.0, d2)


def frechet_pixel_distance(set_a: list[np.ndarray], set_b: list[np.ndarray]) -> float:
    """Fréchet distance between Gaussian fits to per-image summary statistics."""
    if len(set_a) < 10 or len(set_b) < 10:
        raise ValueError(f"both sets need >= 10 images, got {len(set_a)} and {len(set_b)}")
    feat_a = np.stack([image_summary(im) for im in set_a])
    feat_b = np.stack([image_summary(im) for im in set_b])
    return frechet_gaussian(
        feat_a.mean(axis=0), np.cov(feat_a, rowvar=False),
        feat_b.mean(axis=0), np.cov(feat_b, rowvar=False),
    )


# -- wire formats ------------------------------------------------------------


def generator_to_bytes(gen: GeneratorParams) -> bytes:
    """Fixed-layout record: u16 client id + 7 little-endian float64 values."""
    return struct.pack(
        "<Hddddddd",
        gen.source_client,
        gen.est_fg_mean, gen.est_fg_std, gen.est_bg_mean, gen.est_bg_std,
        float(gen.est_texture_freq), gen.est_noise_sigma,
        0.0,  # reserved: contrast slot (always folded into the means)
    )


def generator_from_bytes(buf: bytes) -> GeneratorParams:
    cid, fgm, fgs, bgm, bgs, freq, noise, _ = struct.unpack("<Hddddddd", buf)
    return GeneratorParams(fgm, fgs, bgm, bgs, int(freq), noise, cid)


def mask_bank_to_bytes(bank: list[np.ndarray]) -> bytes:
    """Packed bitmaps: u32 count + u16 grid + per-mask ceil(grid^2/8) bytes."""
    grid = bank[0].shape[0]
    out = [struct.pack("<IH", len(bank), grid)]
    for mask in bank:
        out.append(np.packbits(mask.reshape(-1).astype(np.uint8)).tobytes())
    return b"".join(out)


def mask_bank_from_bytes(buf: bytes) -> list[np.ndarray]:
    n, grid = struct.unpack_from("<IH", buf, 0)
    per_mask = (grid * grid + 7) // 8
    bank = []
    off = 6
    for _ in range(n):
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=per_mask, offset=off))
        bank.append(bits[: grid * grid].reshape(grid, grid).astype(np.float64))
        off += per_mask
    return bank


def mask_bank_bytes(n_masks: int, grid: int) -> int:
    return 6 + n_masks * ((grid * grid + 7) // 8)
