"""Acceptance suite: one test per release criterion.

Each test prints a single ``CRITERION <n> PASS|FAIL`` line so the suite
output doubles as the acceptance report. The multi-seed experiment grids are
shared via session fixtures because they dominate the runtime.
"""

import time

import numpy as np
import pytest

from dsfed.autodiff import Tensor, gradient_check
from dsfed.cli import main as cli_main
from dsfed.config import ExperimentConfig
from dsfed.distill import (SamplePool, ScoredSample, refresh_pool, score_samples,
                           symmetric_kl)
from dsfed.domains import make_federation
from dsfed.federation import (baseline_foundation_bytes, fedavg, predict_total_bytes,
                              run_experiment, simulate_ledger)
from dsfed.generator import build_global_set, fit_generator, frechet_pixel_distance
from dsfed.metrics import dice, iou
from dsfed.models import ModelParams, ModelSpec, init_model, lightweight_spec

N_SEEDS = 5
ACCEPT_ROUNDS = 8

_capsys = None


@pytest.fixture(autouse=True)
def _live_reporting(capsys):
    """Let _report bypass output capture so every criterion line is visible."""
    global _capsys
    _capsys = capsys
    yield
    _capsys = None


def _report(number: int, description: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    line = f"\nCRITERION {number} {status}: {description}{suffix}"
    if _capsys is not None:
        with _capsys.disabled():
            print(line)
    else:
        print(line)
    assert ok, f"criterion {number} failed: {description}{suffix}"


def _accept_config(seed: int, mutual_kd: bool, lg_selection: bool, **over) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.federation.seed = seed
    cfg.federation.n_rounds = ACCEPT_ROUNDS
    cfg.federation.mutual_kd = mutual_kd
    cfg.federation.lg_selection = lg_selection
    for key, value in over.items():
        setattr(cfg.federation, key, value)
    return cfg


@pytest.fixture(scope="session")
def ablation_grid():
    """4 flag cells x N_SEEDS full experiments; also times the grid."""
    cells = {}
    start = time.monotonic()
    for mutual_kd, lg_selection in [(False, False), (True, False), (False, True), (True, True)]:
        runs = [run_experiment(_accept_config(seed, mutual_kd, lg_selection))
                for seed in range(N_SEEDS)]
        cells[(mutual_kd, lg_selection)] = {
            "dice": float(np.mean([r.mean_dice for r in runs])),
            "fnd_gen_dice": float(np.mean([r.mean_fnd_gen_dice for r in runs])),
        }
    elapsed = time.monotonic() - start
    return cells, elapsed


@pytest.fixture(scope="session")
def rate_sweep():
    rates = (0.2, 0.5, 0.8, 1.0)
    out = {}
    for rate in rates:
        runs = [run_experiment(_accept_config(seed, True, True, selection_rate=rate))
                for seed in range(N_SEEDS)]
        out[rate] = {
            "dice": float(np.mean([r.mean_dice for r in runs])),
            "evals": [r.distill_sample_evals for r in runs],
        }
    return out


@pytest.fixture(scope="session")
def lambda_sweep():
    means = {}
    for lam in (0.1, 0.3, 0.5, 0.7, 0.9):
        runs = [run_experiment(_accept_config(seed, True, True, lambda_=lam))
                for seed in range(N_SEEDS)]
        means[lam] = float(np.mean([r.mean_dice for r in runs]))
    return means


def test_criterion_1_gradient_correctness():
    start = time.monotonic()
    worst = 0.0
    for trial in range(25):
        rng = np.random.default_rng(trial)
        width = int(rng.integers(2, 5))
        spec = ModelSpec("lightweight", 16, (width, 1), (3, 3))
        model = init_model(spec, seed=trial)
        images = rng.random((2, 16, 16))
        masks = (rng.random((2, 16, 16)) < 0.4).astype(np.float64)

        def loss_fn(p):
            from dsfed.models import forward_batch, supervised_loss
            return supervised_loss(forward_batch(ModelParams(spec, p), images), masks)

        err = gradient_check(loss_fn, Tensor(model.values.data.copy()), step=1e-5)
        worst = max(worst, err)
    elapsed = time.monotonic() - start
    _report(1, "autodiff matches finite differences on 25 random networks",
            worst < 1e-4 and elapsed < 10.0,
            f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_fedavg_exactness():
    spec = ModelSpec("lightweight", 16, (2, 1), (3, 3))
    dim = spec.param_count()
    worst = 0.0
    perm_exact = True
    for trial in range(100):
        rng = np.random.default_rng(trial)
        k = int(rng.integers(2, 6))
        mats = [rng.normal(size=dim) for _ in range(k)]
        sizes = [int(rng.integers(1, 100)) for _ in range(k)]
        models = [ModelParams(spec, Tensor(m)) for m in mats]
        out = fedavg(models, sizes).values.data
        oracle = np.average(np.stack(mats), axis=0, weights=sizes)
        worst = max(worst, float(np.max(np.abs(out - oracle))))
        perm = rng.permutation(k)
        out_p = fedavg([models[i] for i in perm], [sizes[i] for i in perm]).values.data
        perm_exact = perm_exact and np.array_equal(out, out_p)
    _report(2, "FedAvg matches the weighted-mean oracle and is permutation invariant",
            worst < 1e-12 and perm_exact, f"max abs err {worst:.2e}")


def test_criterion_3_kl_and_score_algebra():
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(50):
        p = rng.uniform(1e-4, 1 - 1e-4, size=(5, 5))
        q = rng.uniform(1e-4, 1 - 1e-4, size=(5, 5))
        v = symmetric_kl(p, q)
        ok &= v >= 0.0 and v == symmetric_kl(q, p)
        ok &= symmetric_kl(p, p) < 1e-12

    fed = make_federation(3, 8, seed=0)
    gens = [fit_generator(c) for c in fed]
    banks = {c.domain_id: c.mask_bank for c in fed}
    d_tilde = build_global_set(gens, banks, 6, seed=0)
    fnd = init_model(ModelSpec("foundation", 32, (8, 8, 1), (3, 3, 3)), seed=0)
    lw = init_model(lightweight_spec(), seed=1)
    s1 = score_samples(d_tilde, fnd, lw, lam=1.0)
    ok &= ([i for i in sorted(range(len(s1)), key=lambda i: -s1[i].score)]
           == sorted(range(len(s1)), key=lambda i: s1[i].l_gt))
    s0 = score_samples(d_tilde, fnd, lw, lam=0.0)
    ok &= ([i for i in sorted(range(len(s0)), key=lambda i: -s0[i].score)]
           == sorted(range(len(s0)), key=lambda i: -s0[i].l_kl))

    # TopK nesting + softmax shift invariance
    scores = score_samples(d_tilde, fnd, lw, lam=0.5)
    prev: set = set()
    for rate in (0.2, 0.5, 0.8, 1.0):
        pool = SamplePool(all_samples=d_tilde, selected=[], selection_rate=rate, mode="topk")
        sel = set(refresh_pool(pool, scores, seed=0).selected)
        ok &= prev <= sel
        prev = sel
    shifted = [ScoredSample(s.sample, s.l_gt, s.l_kl, s.score + 42.0, s.round_scored)
               for s in scores]
    for mode in ("topk", "softmax"):
        pool = SamplePool(all_samples=d_tilde, selected=[], selection_rate=0.5, mode=mode)
        ok &= (refresh_pool(pool, scores, seed=7).selected
               == refresh_pool(pool, shifted, seed=7).selected)
    _report(3, "KL and learnability-score algebra", bool(ok))


def test_criterion_4_metric_algebra():
    rng = np.random.default_rng(0)
    ok = True
    worst = 0.0
    for _ in range(1000):
        shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        a = (rng.random(shape) < rng.uniform(0, 1)).astype(np.float64)
        b = (rng.random(shape) < rng.uniform(0, 1)).astype(np.float64)
        d, j = dice(a, b), iou(a, b)
        ok &= d >= j
        if j > 0:
            worst = max(worst, abs(d - 2 * j / (1 + j)))
        tp = float(np.sum(a * b))
        fp = float(np.sum(a * (1 - b)))
        fn = float(np.sum((1 - a) * b))
        if tp + fp + fn == 0:
            ok &= d == 1.0 and j == 1.0
        else:
            ok &= abs(d - 2 * tp / (2 * tp + fp + fn)) < 1e-12
            ok &= abs(j - tp / (tp + fp + fn)) < 1e-12
    _report(4, "Dice/IoU identities vs pixel-counting oracle on 1000 pairs",
            bool(ok) and worst < 1e-12, f"max identity err {worst:.2e}")


def test_criterion_5_communication_claim():
    start = time.monotonic()
    cfg = ExperimentConfig()  # defaults: 100 rounds, 4 clients, >=10x param ratio
    predicted = predict_total_bytes(cfg)
    simulated = simulate_ledger(cfg).total_bytes()
    ratio = predicted / baseline_foundation_bytes(cfg)
    elapsed = time.monotonic() - start
    _report(5, "communication is <15% of a foundation-transfer baseline, byte-exact",
            predicted == simulated and ratio < 0.15 and elapsed < 1.0,
            f"ratio {ratio:.4f}, {predicted} bytes, {elapsed:.2f}s")


def test_criterion_6_compute_reduction(ablation_grid, rate_sweep):
    _, elapsed = ablation_grid
    evals_half = rate_sweep[0.5]["evals"]
    evals_full = rate_sweep[1.0]["evals"]
    exact_half = all(2 * a == b for a, b in zip(evals_half, evals_full))
    _report(6, "selection rate 0.5 costs exactly half the distillation sample "
               "evaluations; ablation grid within budget",
            exact_half and elapsed < 15 * 60,
            f"evals {sum(evals_half)} vs {sum(evals_full)}, grid {elapsed/60:.1f} min")


def test_criterion_7_ablation_direction(ablation_grid):
    cells, _ = ablation_grid
    full = cells[(True, True)]["dice"]
    base = cells[(False, False)]["dice"]
    v_mutual = cells[(True, False)]["dice"]
    v_select = cells[(False, True)]["dice"]
    ok = full >= v_mutual and full >= v_select and full >= base + 0.01
    _report(7, "full method beats both single-component variants and baseline+0.01",
            ok, f"full {full:.4f}, mutual-only {v_mutual:.4f}, "
                f"select-only {v_select:.4f}, baseline {base:.4f}")


def test_criterion_8_mutual_enhancement(ablation_grid):
    cells, _ = ablation_grid
    lw_with = cells[(True, True)]["dice"]
    lw_without = cells[(False, False)]["dice"]
    fnd_with = cells[(True, True)]["fnd_gen_dice"]
    fnd_without = cells[(False, False)]["fnd_gen_dice"]
    ok = lw_with >= lw_without and fnd_with >= fnd_without
    _report(8, "mutual distillation enhances both model scales (5-seed means)",
            ok, f"lightweight {lw_with:.4f} vs {lw_without:.4f}, "
                f"foundation {fnd_with:.4f} vs {fnd_without:.4f}")


def test_criterion_9_sensitivity(rate_sweep, lambda_sweep):
    ref = rate_sweep[1.0]["dice"]
    rates_ok = all(rate_sweep[r]["dice"] >= ref - 0.01 for r in (0.2, 0.5, 0.8))
    spread = max(lambda_sweep.values()) - min(lambda_sweep.values())
    # the spread bound is a soft criterion: reported, not asserted
    rate_detail = ", ".join(f"rate {r}: {rate_sweep[r]['dice']:.4f}" for r in sorted(rate_sweep))
    spread_line = (f"\nlambda-sweep spread {spread:.4f} "
                   f"({'within' if spread <= 0.05 else 'exceeds'} the 0.05 soft bound); "
                   + ", ".join(f"lambda {k}: {v:.4f}" for k, v in sorted(lambda_sweep.items())))
    if _capsys is not None:
        with _capsys.disabled():
            print(spread_line)
    else:
        print(spread_line)
    _report(9, "selection-rate sensitivity within tolerance; lambda sweep completed",
            rates_ok and len(lambda_sweep) == 5, rate_detail)


def test_criterion_10_generator_fidelity():
    ok = True
    worst_self = 0.0
    for seed in range(N_SEEDS):
        fed = make_federation(4, 12, seed=seed)
        gens = [fit_generator(c) for c in fed]
        banks = {c.domain_id: c.mask_bank for c in fed}
        d_tilde = build_global_set(gens, banks, 12, seed=seed)
        for cid in range(4):
            own_gen = [s.image for s in d_tilde if s.source_client == cid]
            own = frechet_pixel_distance(own_gen, [s.image for s in fed[cid].samples])
            worst_self = max(worst_self, frechet_pixel_distance(own_gen, own_gen))
            for other in range(4):
                if other != cid:
                    ok &= own < frechet_pixel_distance(
                        own_gen, [s.image for s in fed[other].samples])
    _report(10, "generated sets are closest to their own client's real style",
            bool(ok) and worst_self < 1e-9, f"max self-distance {worst_self:.2e}")


def test_criterion_11_determinism(tmp_path):
    fast = ["--set", "data.n_clients=3", "--set", "data.samples_per_client=8",
            "--set", "federation.n_rounds=3", "--set", "federation.local_steps=4",
            "--set", "federation.server_steps=3",
            "--set", "federation.n_generated_per_client=5",
            "--set", "federation.n_holdout_per_client=3"]
    outs = {}
    for name, jobs in (("a", 1), ("b", 1), ("j4", 4)):
        out = tmp_path / name
        assert cli_main(["run", "--out", str(out), "--jobs", str(jobs), *fast]) == 0
        outs[name] = ((out / "report.json").read_bytes(), (out / "ledger.csv").read_bytes())
    ok = outs["a"] == outs["b"] == outs["j4"]
    _report(11, "repeated runs and --jobs 4 vs 1 are byte-identical", ok)
