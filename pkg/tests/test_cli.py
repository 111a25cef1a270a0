import csv
import json

import numpy as np

from dsfed.cli import (LEDGER_COLUMNS, ROUNDS_COLUMNS, SWEEP_COLUMNS, main, read_dtilde,
                       write_dtilde)
from dsfed.generator import GeneratedSample

FAST = [
    "--set", "data.n_clients=3",
    "--set", "data.samples_per_client=8",
    "--set", "federation.n_rounds=2",
    "--set", "federation.local_steps=3",
    "--set", "federation.server_steps=2",
    "--set", "federation.n_generated_per_client=6",
    "--set", "federation.n_holdout_per_client=3",
]


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_run_outputs_and_manifest(tmp_path):
    out = tmp_path / "run1"
    assert main(["run", "--out", str(out), *FAST]) == 0
    for name in ("manifest.json", "report.json", "rounds.csv", "ledger.csv"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["federation"]["n_rounds"] == 2
    assert manifest["seed"] == manifest["config"]["federation"]["seed"]
    assert set(manifest["output_paths"]) == {"manifest.json", "report.json",
                                             "rounds.csv", "ledger.csv"}
    rows = _read_csv(out / "rounds.csv")
    assert rows[0] == ROUNDS_COLUMNS
    assert len(rows) == 1 + 3 * 2  # three folds x two rounds
    ledger = _read_csv(out / "ledger.csv")
    assert ledger[0] == LEDGER_COLUMNS
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["summary"]["mean_dice"] <= 1.0


def test_run_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--out", str(a), *FAST]) == 0
    assert main(["run", "--out", str(b), *FAST]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "ledger.csv").read_bytes() == (b / "ledger.csv").read_bytes()


def test_run_jobs_parallel_equals_serial(tmp_path):
    a, b = tmp_path / "j1", tmp_path / "j4"
    assert main(["run", "--out", str(a), "--jobs", "1", *FAST]) == 0
    assert main(["run", "--out", str(b), "--jobs", "4", *FAST]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "ledger.csv").read_bytes() == (b / "ledger.csv").read_bytes()


def test_config_file_and_set_precedence(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("federation.n_rounds = 5\nfederation.seed = 3\n")
    out = tmp_path / "out"
    code = main(["run", "--config", str(cfg), "--out", str(out),
                 *FAST, "--set", "federation.n_rounds=2"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["federation"]["n_rounds"] == 2  # --set wins
    assert manifest["config"]["federation"]["seed"] == 3


def test_invalid_config_exits_2(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path / "x"),
                 "--set", "federation.lambda=2.0"]) == 2
    assert "federation.lambda" in capsys.readouterr().err


def test_unknown_key_exits_2(tmp_path):
    assert main(["run", "--out", str(tmp_path / "x"), "--set", "nope.nope=1"]) == 2


def test_missing_config_file_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.cfg"),
                 "--out", str(tmp_path / "x")]) == 2


def test_ablate_grid(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--out", str(out), "--seeds", "2", *FAST]) == 0
    rows = _read_csv(out / "ablation.csv")
    assert rows[0][:2] == ["mutual_kd", "lg_selection"]
    assert rows[0][2:4] == ["dice_s0", "dice_s1"]
    cells = [(r[0], r[1]) for r in rows[1:]]
    assert cells == [("0", "0"), ("1", "0"), ("0", "1"), ("1", "1")]
    # baseline cell performs no distillation
    evals = {(r[0], r[1]): int(r[-1]) for r in rows[1:]}
    assert evals[("0", "0")] == 0
    assert evals[("1", "1")] > 0
    # selection scales the gradient-step sample evaluations by exactly
    # selected/total: pool size 3 clients * 6 = 18, default rate 0.8 -> 14
    assert 18 * evals[("0", "1")] == 14 * evals[("1", "0")]


def test_sweep_lambda(tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--param", "lambda", "--values", "0.1,0.9",
                 "--seeds", "2", "--out", str(out), *FAST]) == 0
    rows = _read_csv(out / "sweep.csv")
    assert rows[0] == SWEEP_COLUMNS
    assert len(rows) == 1 + 2 * 2
    assert {r[0] for r in rows[1:]} == {"0.1", "0.9"}


def test_sweep_rejects_bad_values(tmp_path):
    assert main(["sweep", "--param", "lambda", "--values", "0.5,1.5",
                 "--out", str(tmp_path / "x"), *FAST]) == 2
    assert main(["sweep", "--param", "selection_rate", "--values", "0.0",
                 "--out", str(tmp_path / "x"), *FAST]) == 2


def test_dtilde_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    samples = [
        GeneratedSample(image=rng.random((32, 32)),
                        mask=(rng.random((32, 32)) < 0.3).astype(np.float64),
                        source_client=i % 3, index=i)
        for i in range(6)
    ]
    path = str(tmp_path / "dtilde.bin")
    write_dtilde(path, samples, k=3, n_per_client=2, grid=32)
    back = read_dtilde(path)
    assert len(back) == 6
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert a.source_client == b.source_client


GEN_FAST = [a if a != "data.samples_per_client=8" else "data.samples_per_client=10"
            for a in FAST]


def test_gen_data_requires_enough_samples(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"), *FAST]) == 2


def test_gen_data_outputs(tmp_path):
    out = tmp_path / "gd"
    assert main(["gen-data", "--out", str(out), *GEN_FAST]) == 0
    assert (out / "dtilde.bin").exists()
    samples = read_dtilde(str(out / "dtilde.bin"))
    assert len(samples) == 3 * 6
    rows = _read_csv(out / "fidelity.csv")
    assert rows[0] == ["generated_client", "real_client", "frechet_distance"]
    assert len(rows) == 1 + 3 * 3
    # own-style distance beats cross-style distance for every client
    dist = {(r[0], r[1]): float(r[2]) for r in rows[1:]}
    for g in ("0", "1", "2"):
        for r in ("0", "1", "2"):
            if g != r:
                assert dist[(g, g)] < dist[(g, r)]


def test_run_reuses_generated_set(tmp_path):
    gd = tmp_path / "gd"
    assert main(["gen-data", "--out", str(gd), *GEN_FAST]) == 0
    out = tmp_path / "reuse"
    code = main(["run", "--out", str(out), *GEN_FAST,
                 "--set", f"data.dtilde_path={gd / 'dtilde.bin'}"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["summary"]["mean_dice"] <= 1.0
