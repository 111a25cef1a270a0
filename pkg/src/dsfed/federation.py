"""Synchronous federated rounds with byte-exact communication accounting.

Per round: broadcast the global lightweight model, train it locally on every
participating client, FedAvg the uploads, fine-tune the server-side
foundation model on the current generated pool, optionally run the
learnability-guided distillation phase, then evaluate. The ledger records
the exact serialized size of every cross-party transfer; foundation
parameters and generated images never leave the server.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from fractions import Fraction

import numpy as np

from .autodiff import OptimizerState, Tensor, sgd_step
from .config import ExperimentConfig
from .distill import (DistillStats, SamplePool, mutual_distill_phase,
                      refresh_pool, score_samples)
from .domains import ClientDataset, TaskSample, gen_mask, make_federation, render, split_leave_one_out
from .generator import (GENERATOR_RECORD_BYTES, GeneratedSample, build_global_set,
                        fit_generator, mask_bank_bytes)
from .metrics import evaluate, evaluate_generated
from .models import (ModelParams, ModelSpec, foundation_spec, forward_batch,
                     init_model, lightweight_spec, supervised_loss)
from .seeding import rng_for

CLIENT_TO_SERVER = "client->server"
SERVER_TO_CLIENT = "server->client"


@dataclass(frozen=True)
class LedgerEntry:
    fold: int
    round: int
    direction: str
    payload_kind: str  # lightweight_params | generator_params | mask_bank
    n_bytes: int


@dataclass
class CommLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def add(self, fold: int, round_idx: int, direction: str, payload_kind: str, n_bytes: int) -> None:
        self.entries.append(LedgerEntry(fold, round_idx, direction, payload_kind, n_bytes))

    def total_bytes(self) -> int:
        return sum(e.n_bytes for e in self.entries)


@dataclass
class RoundReport:
    round: int
    client_train_loss: dict[int, float]
    lw_dice: float
    lw_iou: float
    fnd_dice: float
    fnd_iou: float
    fnd_gen_dice: float
    fnd_gen_iou: float
    pool_size: int
    selected: int
    mean_score: float
    mean_l_gt: float
    mean_l_kl: float
    distill_sample_evals: int
    scoring_forward_passes: int
    local_grad_steps: int
    server_grad_steps: int
    distill_grad_steps: int
    cumulative_bytes: int


# -- core operations -----------------------------------------------------------


def local_train(
    client: ClientDataset,
    params: ModelParams,
    steps: int,
    lr: float,
    batch_size: int = 4,
    momentum: float = 0.9,
    seed: int = 0,
    round_idx: int = 0,
    val_fraction: float = 0.25,
) -> ModelParams:
    """SGD on the client's private train split; input params are not mutated."""
    if not client.samples:
        raise ValueError(f"client {client.domain_id} has no samples")
    train, _ = client.train_val_split(val_fraction)
    out = params.copy()
    if steps == 0:
        return out
    opt = OptimizerState(learning_rate=lr, momentum=momentum)
    rng = rng_for(seed, "local", round_idx, client.domain_id)
    for _ in range(steps):
        idx = rng.integers(len(train), size=min(batch_size, len(train)))
        images = np.stack([train[i].image for i in idx])
        masks = np.stack([train[i].mask for i in idx])
        loss = supervised_loss(forward_batch(out, images), masks)
        loss.backward()
        sgd_step(out.values, opt)
    return out


def fedavg(client_params: list[ModelParams], sizes: list[int]) -> ModelParams:
    """Dataset-size-weighted mean, exact per coordinate (rational arithmetic).

    Exact rational evaluation with a single final rounding makes the result
    independent of client order and bit-identical to the inputs when they all
    agree.
    """
    if not client_params:
        raise ValueError("no client params to aggregate")
    if len(client_params) != len(sizes):
        raise ValueError("client_params and sizes length mismatch")
    spec = client_params[0].spec
    for p in client_params[1:]:
        if p.spec != spec:
            raise ValueError(f"spec mismatch: {p.spec} vs {spec}")
    if any(n <= 0 for n in sizes):
        raise ValueError(f"all dataset sizes must be positive, got {sizes}")
    if len(client_params) == 1:
        return client_params[0].copy()
    mats = [p.values.data for p in client_params]
    if all(np.array_equal(m, mats[0]) for m in mats[1:]):
        return client_params[0].copy()
    n = sum(sizes)
    out = np.empty_like(mats[0])
    flat = [m.reshape(-1) for m in mats]
    of = out.reshape(-1)
    for i in range(of.size):
        acc = Fraction(0)
        for vals, nk in zip(flat, sizes):
            acc += Fraction(nk) * Fraction(float(vals[i]))
        of[i] = float(acc / n)
    return ModelParams(spec, Tensor(out, requires_grad=True))


def server_finetune_foundation(
    foundation: ModelParams,
    d_tilde: list[GeneratedSample],
    steps: int,
    lr: float,
    batch_size: int = 4,
    momentum: float = 0.9,
    seed: int = 0,
    round_idx: int = 0,
) -> ModelParams:
    """Supervised SGD on generated (image, mask) pairs; value semantics."""
    if not d_tilde:
        raise ValueError("generated set is empty")
    out = foundation.copy()
    if steps == 0:
        return out
    opt = OptimizerState(learning_rate=lr, momentum=momentum)
    rng = rng_for(seed, "server-ft", round_idx)
    for _ in range(steps):
        idx = rng.integers(len(d_tilde), size=min(batch_size, len(d_tilde)))
        images = np.stack([d_tilde[i].image for i in idx])
        masks = np.stack([d_tilde[i].mask for i in idx])
        loss = supervised_loss(forward_batch(out, images), masks)
        loss.backward()
        sgd_step(out.values, opt)
    return out


# -- per-fold state --------------------------------------------------------------


@dataclass
class FoldState:
    config: ExperimentConfig
    fold: int
    train_clients: list[ClientDataset]
    test_samples: list[TaskSample]
    lightweight: ModelParams
    foundation: ModelParams
    d_tilde: list[GeneratedSample]
    d_holdout: list[GeneratedSample]
    pool: SamplePool
    ledger: CommLedger
    trace: list[dict] = field(default_factory=list)
    round_idx: int = 0


def model_specs(cfg: ExperimentConfig) -> tuple[ModelSpec, ModelSpec]:
    m, grid = cfg.model, cfg.data.grid
    lw = lightweight_spec(grid, m.lightweight_width, m.lightweight_depth)
    fnd = foundation_spec(grid, m.foundation_width, m.foundation_depth)
    return lw, fnd


def _fixed_test_samples(cfg: ExperimentConfig, federation: list[ClientDataset]) -> list[TaskSample]:
    # independent test set rendered from every client's style with held-out seeds
    seed, grid = cfg.federation.seed, cfg.data.grid
    samples = []
    for client in federation:
        for i in range(cfg.data.test_per_client):
            mask = gen_mask(rng_for(seed, "test-mask", client.domain_id, i).integers(2**31), grid)
            image = render(mask, client.style, rng_for(seed, "test-render", client.domain_id, i).integers(2**31))
            samples.append(TaskSample(image=image, mask=mask, domain_id=client.domain_id))
    return samples


def init_fold(
    cfg: ExperimentConfig,
    federation: list[ClientDataset],
    fold: int,
    held_out: int | None,
    d_tilde_cache: dict[int, list[GeneratedSample]] | None = None,
) -> FoldState:
    """Asynchronous phase: generator fitting/upload, D-tilde build, model init."""
    fc = cfg.federation
    if held_out is None:
        train_clients = federation
        test_samples = _fixed_test_samples(cfg, federation)
    else:
        train_clients, test_samples = split_leave_one_out(federation, held_out)

    lw_spec, fnd_spec = model_specs(cfg)
    lightweight = init_model(lw_spec, rng_for(fc.seed, "lw-init", fold).integers(2**31))
    foundation = init_model(fnd_spec, rng_for(fc.seed, "fnd-init", fold).integers(2**31))

    # asynchronous phase: every federation member uploads its generator and
    # mask bank once, including the domain that sits out the training rounds
    # (it contributes style statistics, never real images)
    ledger = CommLedger()
    trace: list[dict] = []
    generators = []
    mask_banks: dict[int, list[np.ndarray]] = {}
    for client in federation:
        gen = fit_generator(client)
        generators.append(gen)
        mask_banks[client.domain_id] = client.mask_bank
        ledger.add(fold, 0, CLIENT_TO_SERVER, "generator_params", GENERATOR_RECORD_BYTES)
        ledger.add(fold, 0, CLIENT_TO_SERVER, "mask_bank",
                   mask_bank_bytes(len(client.mask_bank), cfg.data.grid))
        trace.append({"round": 0, "event": "upload_generator", "client": client.domain_id,
                      "server_inputs": ["GeneratorParams", "MaskBank"]})

    if d_tilde_cache is not None and d_tilde_cache.get("train"):
        d_tilde = list(d_tilde_cache["train"])
    else:
        d_tilde = build_global_set(generators, mask_banks, fc.n_generated_per_client,
                                   rng_for(fc.seed, "gen-train").integers(2**31),
                                   augment=fc.style_augment)
    if d_tilde_cache is not None and d_tilde_cache.get("holdout"):
        d_holdout = list(d_tilde_cache["holdout"])
    else:
        d_holdout = build_global_set(generators, mask_banks, fc.n_holdout_per_client,
                                     rng_for(fc.seed, "gen-holdout").integers(2**31))
    trace.append({"round": 0, "event": "build_global_set",
                  "server_inputs": ["GeneratorParams", "MaskBank"]})

    pool = SamplePool(all_samples=d_tilde, selected=list(range(len(d_tilde))),
                      selection_rate=fc.selection_rate if fc.lg_selection else 1.0,
                      mode=cfg.distill.mode)
    return FoldState(config=cfg, fold=fold, train_clients=train_clients,
                     test_samples=test_samples, lightweight=lightweight,
                     foundation=foundation, d_tilde=d_tilde, d_holdout=d_holdout,
                     pool=pool, ledger=ledger, trace=trace)


def run_round(state: FoldState, jobs: int = 1) -> RoundReport:
    cfg = state.config
    fc, dc = cfg.federation, cfg.distill
    state.round_idx += 1
    r = state.round_idx
    lw_bytes = state.lightweight.spec.stream_bytes()

    # (1) broadcast global lightweight params
    for client in state.train_clients:
        state.ledger.add(state.fold, r, SERVER_TO_CLIENT, "lightweight_params", lw_bytes)
    state.trace.append({"round": r, "event": "broadcast_lightweight",
                        "server_inputs": []})

    # (2) local training, parallelizable per client; results read in client-id order
    def _train(client: ClientDataset) -> ModelParams:
        return local_train(client, state.lightweight, fc.local_steps, fc.lr_client,
                           fc.batch_size, fc.momentum, fc.seed, r, cfg.data.val_fraction)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool_exec:
            locals_ = list(pool_exec.map(_train, state.train_clients))
    else:
        locals_ = [_train(c) for c in state.train_clients]

    client_loss: dict[int, float] = {}
    for client, params in zip(state.train_clients, locals_):
        train, _ = client.train_val_split(cfg.data.val_fraction)
        images = np.stack([s.image for s in train])
        masks = np.stack([s.mask for s in train])
        client_loss[client.domain_id] = supervised_loss(forward_batch(params, images), masks).item()

    # (3) upload + FedAvg (weighted by private train-split sizes)
    sizes = [len(c.train_val_split(cfg.data.val_fraction)[0]) for c in state.train_clients]
    for client in state.train_clients:
        state.ledger.add(state.fold, r, CLIENT_TO_SERVER, "lightweight_params", lw_bytes)
    state.trace.append({"round": r, "event": "upload_lightweight",
                        "server_inputs": ["ModelParams"]})
    state.lightweight = fedavg(locals_, sizes)

    # (4) server-side foundation fine-tuning on the full generated set
    # (learnability selection governs only the distillation phase)
    state.foundation = server_finetune_foundation(
        state.foundation, state.d_tilde, fc.server_steps, fc.lr_server,
        fc.batch_size, fc.momentum, fc.seed, r)
    server_steps_done = fc.server_steps if state.d_tilde else 0

    # (5) learnability-guided mutual distillation
    distill_on = fc.mutual_kd or fc.lg_selection
    stats = DistillStats(pool_size=len(state.d_tilde), selected_count=len(state.pool.selected),
                         mean_score=0.0, mean_l_gt=0.0, mean_l_kl=0.0,
                         grad_sample_evals=0, scoring_forward_passes=0)
    if distill_on:
        scores = score_samples(state.d_tilde, state.foundation, state.lightweight,
                               fc.lambda_, dc.normalize_terms, round_idx=r)
        stats.scoring_forward_passes = 2 * len(state.d_tilde)
        state.pool = refresh_pool(state.pool, scores,
                                  seed=int(rng_for(fc.seed, "pool-seed", state.fold, r).integers(2**31)))
        state.foundation, state.lightweight, dstats = mutual_distill_phase(
            state.foundation, state.lightweight, state.pool,
            epochs=dc.epochs, lr=fc.lr_distill, mutual=fc.mutual_kd, alpha=dc.alpha,
            seed=int(rng_for(fc.seed, "distill-seed", state.fold, r).integers(2**31)),
            batch_size=dc.batch_size, momentum=dc.momentum)
        stats.grad_sample_evals = dstats.grad_sample_evals
        stats.selected_count = dstats.selected_count
        stats.kl_start, stats.kl_end = dstats.kl_start, dstats.kl_end
        stats.mean_score = float(np.mean([s.score for s in scores]))
        stats.mean_l_gt = float(np.mean([s.l_gt for s in scores]))
        stats.mean_l_kl = float(np.mean([s.l_kl for s in scores]))

    # (6) evaluate the deployment (lightweight) and foundation models
    lw_metrics = evaluate(state.lightweight, state.test_samples)
    fnd_metrics = evaluate(state.foundation, state.test_samples)
    fnd_gen = evaluate_generated(state.foundation, state.d_holdout)

    distill_batches = 0
    if stats.grad_sample_evals:
        per_epoch = len(state.pool.selected)
        n_batches = -(-per_epoch // dc.batch_size)  # ceil
        distill_batches = n_batches * dc.epochs

    return RoundReport(
        round=r,
        client_train_loss=client_loss,
        lw_dice=lw_metrics.dice, lw_iou=lw_metrics.iou,
        fnd_dice=fnd_metrics.dice, fnd_iou=fnd_metrics.iou,
        fnd_gen_dice=fnd_gen.dice, fnd_gen_iou=fnd_gen.iou,
        pool_size=stats.pool_size, selected=stats.selected_count,
        mean_score=stats.mean_score, mean_l_gt=stats.mean_l_gt, mean_l_kl=stats.mean_l_kl,
        distill_sample_evals=stats.grad_sample_evals,
        scoring_forward_passes=stats.scoring_forward_passes,
        local_grad_steps=fc.local_steps * len(state.train_clients),
        server_grad_steps=server_steps_done,
        distill_grad_steps=distill_batches,
        cumulative_bytes=state.ledger.total_bytes(),
    )


# -- experiment-level API ----------------------------------------------------------


@dataclass
class FoldReport:
    held_out: int | None
    rounds: list[RoundReport]
    final_lw_dice: float
    final_lw_iou: float
    final_fnd_gen_dice: float
    server_input_types: list[str]


@dataclass
class ExperimentReport:
    folds: list[FoldReport]
    mean_dice: float
    mean_iou: float
    mean_fnd_gen_dice: float
    total_bytes: int
    distill_sample_evals: int
    step_counts: dict[str, int]
    ledger: CommLedger

    def to_dict(self) -> dict:
        return {
            "folds": [
                {
                    "held_out": f.held_out,
                    "final_lw_dice": f.final_lw_dice,
                    "final_lw_iou": f.final_lw_iou,
                    "final_fnd_gen_dice": f.final_fnd_gen_dice,
                    "server_input_types": f.server_input_types,
                    "rounds": [asdict(r) for r in f.rounds],
                }
                for f in self.folds
            ],
            "summary": {
                "mean_dice": self.mean_dice,
                "mean_iou": self.mean_iou,
                "mean_fnd_gen_dice": self.mean_fnd_gen_dice,
                "total_bytes": self.total_bytes,
                "distill_sample_evals": self.distill_sample_evals,
                "step_counts": self.step_counts,
            },
        }


def run_fold(cfg: ExperimentConfig, federation: list[ClientDataset], fold: int,
             held_out: int | None, jobs: int = 1,
             d_tilde_cache: dict | None = None) -> tuple[FoldReport, FoldState]:
    state = init_fold(cfg, federation, fold, held_out, d_tilde_cache)
    rounds = [run_round(state, jobs=jobs) for _ in range(cfg.federation.n_rounds)]
    server_types = sorted({t for ev in state.trace for t in ev["server_inputs"]})
    report = FoldReport(
        held_out=held_out, rounds=rounds,
        # report the tail mean rather than the single last round to damp
        # round-to-round evaluation noise
        final_lw_dice=float(np.mean([r.lw_dice for r in rounds[-3:]])),
        final_lw_iou=float(np.mean([r.lw_iou for r in rounds[-3:]])),
        final_fnd_gen_dice=float(np.mean([r.fnd_gen_dice for r in rounds[-3:]])),
        server_input_types=server_types,
    )
    return report, state


def run_experiment(cfg: ExperimentConfig, jobs: int = 1,
                   d_tilde_cache: dict | None = None) -> ExperimentReport:
    fc = cfg.federation
    federation = make_federation(cfg.data.n_clients, cfg.data.samples_per_client,
                                 fc.seed, cfg.data.grid)
    if fc.eval_protocol == "leave_one_out":
        fold_plan: list[int | None] = [c.domain_id for c in federation]
    else:
        fold_plan = [None]

    ledger = CommLedger()
    folds: list[FoldReport] = []
    for fold, held_out in enumerate(fold_plan):
        report, state = run_fold(cfg, federation, fold, held_out, jobs, d_tilde_cache)
        folds.append(report)
        ledger.entries.extend(state.ledger.entries)

    step_counts = {
        "local": sum(r.local_grad_steps for f in folds for r in f.rounds),
        "server_finetune": sum(r.server_grad_steps for f in folds for r in f.rounds),
        "distill": sum(r.distill_grad_steps for f in folds for r in f.rounds),
    }
    return ExperimentReport(
        folds=folds,
        mean_dice=float(np.mean([f.final_lw_dice for f in folds])),
        mean_iou=float(np.mean([f.final_lw_iou for f in folds])),
        mean_fnd_gen_dice=float(np.mean([f.final_fnd_gen_dice for f in folds])),
        total_bytes=ledger.total_bytes(),
        distill_sample_evals=sum(r.distill_sample_evals for f in folds for r in f.rounds),
        step_counts=step_counts,
        ledger=ledger,
    )


# -- closed-form communication accounting ----------------------------------------


def _fold_layout(cfg: ExperimentConfig) -> list[int]:
    """Number of training clients per fold."""
    k = cfg.data.n_clients
    if cfg.federation.eval_protocol == "leave_one_out":
        return [k - 1] * k
    return [k]


def predict_total_bytes(cfg: ExperimentConfig) -> int:
    """Exact ledger total derivable from the config alone."""
    lw_spec, _ = model_specs(cfg)
    lw = lw_spec.stream_bytes()
    bank = mask_bank_bytes(cfg.data.samples_per_client, cfg.data.grid)
    k = cfg.data.n_clients
    total = 0
    for k_train in _fold_layout(cfg):
        total += k * (GENERATOR_RECORD_BYTES + bank)
        total += cfg.federation.n_rounds * k_train * 2 * lw
    return total


def baseline_foundation_bytes(cfg: ExperimentConfig) -> int:
    """Hypothetical cost of shipping the foundation model up+down every round."""
    _, fnd_spec = model_specs(cfg)
    fb = fnd_spec.stream_bytes()
    return sum(cfg.federation.n_rounds * k_train * 2 * fb for k_train in _fold_layout(cfg))


def simulate_ledger(cfg: ExperimentConfig) -> CommLedger:
    """Full ledger produced from the transfer schedule alone (no training)."""
    lw_spec, _ = model_specs(cfg)
    lw = lw_spec.stream_bytes()
    bank = mask_bank_bytes(cfg.data.samples_per_client, cfg.data.grid)
    ledger = CommLedger()
    for fold, k_train in enumerate(_fold_layout(cfg)):
        for _ in range(cfg.data.n_clients):
            ledger.add(fold, 0, CLIENT_TO_SERVER, "generator_params", GENERATOR_RECORD_BYTES)
            ledger.add(fold, 0, CLIENT_TO_SERVER, "mask_bank", bank)
        for r in range(1, cfg.federation.n_rounds + 1):
            for _ in range(k_train):
                ledger.add(fold, r, SERVER_TO_CLIENT, "lightweight_params", lw)
            for _ in range(k_train):
                ledger.add(fold, r, CLIENT_TO_SERVER, "lightweight_params", lw)
    return ledger
