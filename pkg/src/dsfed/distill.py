"""Learnability-guided mutual distillation over the generated sample pool.

Every generated sample is scored each round by blending the foundation
model's supervised loss (reliability) with the symmetric KL divergence
between the two model scales (disagreement); the pool is refreshed at a
fixed selection rate and both models take KL + supervised-anchor gradient
steps over the selected subset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import PROB_FLOOR, OptimizerState, ShapeError, Tensor, sgd_step
from .generator import GeneratedSample
from .models import ModelParams, forward_batch, supervised_loss
from .seeding import rng_for


def _bernoulli_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))


def symmetric_kl(p: np.ndarray, q: np.ndarray) -> float:
    """Mean per-pixel Bernoulli KL(p||q) + KL(q||p); symmetric, >= 0."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {q.shape}")
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    qc = np.clip(q, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(np.mean(_bernoulli_kl(pc, qc)) + np.mean(_bernoulli_kl(qc, pc)))


def symmetric_kl_loss(p: Tensor, q: Tensor) -> Tensor:
    """Differentiable counterpart of symmetric_kl for distillation steps."""
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {q.shape}")
    pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    qc = q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)

    def kl(a: Tensor, b: Tensor) -> Tensor:
        return (a * (a.log() - b.log()) + (1.0 - a) * ((1.0 - a).log() - (1.0 - b).log())).mean()

    return kl(pc, qc) + kl(qc, pc)


def _sup_loss_np(p: np.ndarray, m: np.ndarray) -> float:
    """Per-sample numpy mirror of models.supervised_loss (BCE + 1 - soft-Dice)."""
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    bce = float(-np.mean(m * np.log(pc) + (1.0 - m) * np.log(1.0 - pc)))
    eps = 1e-7
    soft_dice = (2.0 * float(np.sum(p * m)) + eps) / (float(p.sum() + m.sum()) + eps)
    return bce + (1.0 - soft_dice)


@dataclass(frozen=True)
class ScoredSample:
    sample: GeneratedSample
    l_gt: float
    l_kl: float
    score: float
    round_scored: int


@dataclass
class SamplePool:
    all_samples: list[GeneratedSample]
    selected: list[int]
    selection_rate: float
    mode: str = "topk"  # "topk" | "softmax"

    def __post_init__(self):
        if not 0.0 < self.selection_rate <= 1.0:
            raise ValueError(f"selection_rate must be in (0, 1], got {self.selection_rate}")
        if self.mode not in ("topk", "softmax"):
            raise ValueError(f"unknown selection mode {self.mode!r}")


def selected_count(rate: float, n: int) -> int:
    return max(1, int(rate * n + 0.5))


def score_samples(
    d_tilde: list[GeneratedSample],
    foundation: ModelParams,
    lightweight: ModelParams,
    lam: float,
    normalize: bool = True,
    round_idx: int = 0,
    batch_size: int = 8,
) -> list[ScoredSample]:
    """Score every generated sample: s = lam*(-L_gt) + (1-lam)*L_kl.

    Both terms are min-max normalized across the current set by default so a
    lam of 0.5 is a genuinely equal-weight blend; raw combination is kept for
    fidelity comparison.
    """
    if not d_tilde:
        raise ValueError("cannot score an empty generated set")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    l_gt = np.empty(len(d_tilde))
    l_kl = np.empty(len(d_tilde))
    for start in range(0, len(d_tilde), batch_size):
        batch = d_tilde[start:start + batch_size]
        images = np.stack([s.image for s in batch])
        p_f = forward_batch(foundation, images).data
        p_l = forward_batch(lightweight, images).data
        for j, s in enumerate(batch):
            l_gt[start + j] = _sup_loss_np(p_f[j], s.mask)
            l_kl[start + j] = symmetric_kl(p_f[j], p_l[j])

    def _norm(v: np.ndarray) -> np.ndarray:
        span = v.max() - v.min()
        return (v - v.min()) / span if span > 0 else np.zeros_like(v)

    gt_term, kl_term = (_norm(l_gt), _norm(l_kl)) if normalize else (l_gt, l_kl)
    scores = lam * (-gt_term) + (1.0 - lam) * kl_term
    return [
        ScoredSample(sample=s, l_gt=float(l_gt[i]), l_kl=float(l_kl[i]), score=float(scores[i]),
                     round_scored=round_idx)
        for i, s in enumerate(d_tilde)
    ]


def refresh_pool(pool: SamplePool, scores: list[ScoredSample], seed: int) -> SamplePool:
    """New pool selection from updated scores; deterministic per seed."""
    n = len(pool.all_samples)
    if len(scores) != n:
        raise ValueError(f"scores cover {len(scores)} samples, pool holds {n}")
    n_sel = selected_count(pool.selection_rate, n)
    s = np.array([sc.score for sc in scores])
    if pool.mode == "topk":
        order = sorted(range(n), key=lambda i: (-s[i], i))
        chosen = sorted(order[:n_sel])
    else:
        # Gumbel top-k == sampling without replacement with prob ∝ exp(s_i)
        keys = s + rng_for(seed, "pool").gumbel(size=n)
        chosen = sorted(np.argsort(-keys)[:n_sel].tolist())
    return SamplePool(all_samples=pool.all_samples, selected=[int(i) for i in chosen],
                      selection_rate=pool.selection_rate, mode=pool.mode)


@dataclass
class DistillStats:
    pool_size: int
    selected_count: int
    mean_score: float
    mean_l_gt: float
    mean_l_kl: float
    grad_sample_evals: int
    scoring_forward_passes: int
    kl_start: float = 0.0
    kl_end: float = 0.0


def _pool_mean_kl(foundation: ModelParams, lightweight: ModelParams,
                  samples: list[GeneratedSample], batch_size: int) -> float:
    vals = []
    for start in range(0, len(samples), batch_size):
        images = np.stack([s.image for s in samples[start:start + batch_size]])
        p_f = forward_batch(foundation, images).data
        p_l = forward_batch(lightweight, images).data
        vals.extend(symmetric_kl(a, b) for a, b in zip(p_f, p_l))
    return float(np.mean(vals))


def mutual_distill_phase(
    foundation: ModelParams,
    lightweight: ModelParams,
    pool: SamplePool,
    epochs: int,
    lr: float,
    mutual: bool = True,
    alpha: float = 0.5,
    seed: int = 0,
    batch_size: int = 4,
    momentum: float = 0.9,
) -> tuple[ModelParams, ModelParams, DistillStats]:
    """Bidirectional KD over the selected pool for `epochs` full passes.

    Batch loss: symmetric KL between the two probability maps plus an
    alpha-weighted supervised anchor on the (exact) generating masks. With
    mutual=False the foundation output is a frozen target and only the
    lightweight model updates.
    """
    if not pool.selected:
        raise ValueError("selected pool is empty")
    selected = [pool.all_samples[i] for i in pool.selected]
    stats = DistillStats(
        pool_size=len(pool.all_samples), selected_count=len(selected),
        mean_score=0.0, mean_l_gt=0.0, mean_l_kl=0.0,
        grad_sample_evals=0, scoring_forward_passes=0,
    )
    fnd = foundation.copy() if mutual else foundation
    lw = lightweight.copy()
    if epochs == 0:
        return fnd, lw, stats
    stats.kl_start = _pool_mean_kl(fnd, lw, selected, batch_size)

    fnd_frozen = None
    if not mutual:
        fnd_frozen = ModelParams(fnd.spec, Tensor(fnd.values.data.copy()))
    opt_f = OptimizerState(learning_rate=lr, momentum=momentum)
    opt_l = OptimizerState(learning_rate=lr, momentum=momentum)

    for epoch in range(epochs):
        order = rng_for(seed, "distill-order", epoch).permutation(len(selected))
        for start in range(0, len(order), batch_size):
            batch = [selected[i] for i in order[start:start + batch_size]]
            images = np.stack([s.image for s in batch])
            masks = np.stack([s.mask for s in batch])
            p_l = forward_batch(lw, images)
            if mutual:
                p_f = forward_batch(fnd, images)
                loss = symmetric_kl_loss(p_f, p_l) + alpha * (
                    supervised_loss(p_f, masks) + supervised_loss(p_l, masks)
                )
            else:
                p_f = forward_batch(fnd_frozen, images)
                loss = symmetric_kl_loss(p_f, p_l) + alpha * supervised_loss(p_l, masks)
            loss.backward()
            if mutual:
                sgd_step(fnd.values, opt_f)
            sgd_step(lw.values, opt_l)
            stats.grad_sample_evals += len(batch)

    stats.kl_end = _pool_mean_kl(fnd, lw, selected, batch_size)
    return fnd, lw, stats
