"""Command-line entry point: dsfed run|ablate|sweep|gen-data.

Emitted files (schema-stable per command):
  run:      manifest.json, report.json, rounds.csv, ledger.csv
  ablate:   manifest.json, ablation.csv
  sweep:    manifest.json, sweep.csv
  gen-data: manifest.json, dtilde.bin, fidelity.csv
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import struct
import sys
import traceback

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config_file, set_dotted, to_dict, validate
from .domains import make_federation
from .federation import run_experiment
from .generator import (GeneratedSample, build_global_set, fit_generator,
                        frechet_pixel_distance, generate)

ROUNDS_COLUMNS = ["fold", "round", "dice", "iou", "bytes_cum", "steps_distill"]
LEDGER_COLUMNS = ["fold", "round", "direction", "payload_kind", "bytes"]
SWEEP_COLUMNS = ["value", "seed", "dice", "iou", "distill_steps"]


def _json_dump(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError([f"config file not found: {args.config}"])
        cfg = parse_config_file(args.config)
    else:
        cfg = ExperimentConfig()
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError([f"--set expects K=V, got {kv!r}"])
        key, _, value = kv.partition("=")
        set_dotted(cfg, key.strip(), value.strip())
    validate(cfg)
    return cfg


def _manifest(cfg: ExperimentConfig, out_dir: str, outputs: list[str]) -> dict:
    return {
        "config": to_dict(cfg),
        "seed": cfg.federation.seed,
        "artifact_version": __version__,
        "output_paths": {name: os.path.join(out_dir, name) for name in outputs},
    }


def _write_rounds_csv(path: str, report) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ROUNDS_COLUMNS)
        for fold_idx, fold in enumerate(report.folds):
            for r in fold.rounds:
                w.writerow([fold_idx, r.round, f"{r.lw_dice:.10f}", f"{r.lw_iou:.10f}",
                            r.cumulative_bytes, r.distill_sample_evals])


def _write_ledger_csv(path: str, ledger) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_COLUMNS)
        for e in ledger.entries:
            w.writerow([e.fold, e.round, e.direction, e.payload_kind, e.n_bytes])


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    cache = None
    if cfg.data.dtilde_path:
        cache = {"train": read_dtilde(cfg.data.dtilde_path), "holdout": None}
    report = run_experiment(cfg, jobs=args.jobs, d_tilde_cache=cache)
    outputs = ["manifest.json", "report.json", "rounds.csv", "ledger.csv"]
    _json_dump(os.path.join(out_dir, "manifest.json"), _manifest(cfg, out_dir, outputs))
    _json_dump(os.path.join(out_dir, "report.json"), report.to_dict())
    _write_rounds_csv(os.path.join(out_dir, "rounds.csv"), report)
    _write_ledger_csv(os.path.join(out_dir, "ledger.csv"), report.ledger)
    print(f"run complete: mean_dice={report.mean_dice:.4f} mean_iou={report.mean_iou:.4f} "
          f"total_bytes={report.total_bytes}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    seeds = [cfg.federation.seed + i for i in range(args.seeds)]
    cells = [(False, False), (True, False), (False, True), (True, True)]
    rows = []
    for mutual_kd, lg_selection in cells:
        dices, ious, evals = [], [], []
        for seed in seeds:
            c = cfg.copy()
            c.federation.mutual_kd = mutual_kd
            c.federation.lg_selection = lg_selection
            c.federation.seed = seed
            report = run_experiment(c, jobs=args.jobs)
            dices.append(report.mean_dice)
            ious.append(report.mean_iou)
            evals.append(report.distill_sample_evals)
        rows.append((mutual_kd, lg_selection, dices, ious, evals))

    path = os.path.join(out_dir, "ablation.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mutual_kd", "lg_selection"]
                   + [f"dice_s{s}" for s in seeds]
                   + ["mean_dice", "mean_iou", "distill_sample_evals"])
        for mutual_kd, lg_selection, dices, ious, evals in rows:
            w.writerow([int(mutual_kd), int(lg_selection)]
                       + [f"{d:.10f}" for d in dices]
                       + [f"{np.mean(dices):.10f}", f"{np.mean(ious):.10f}", sum(evals)])
    _json_dump(os.path.join(out_dir, "manifest.json"),
               _manifest(cfg, out_dir, ["manifest.json", "ablation.csv"]))
    print(f"ablation grid written to {path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if args.param not in ("lambda", "selection_rate"):
        raise ConfigError([f"--param must be lambda or selection_rate, got {args.param!r}"])
    values = [float(v) for v in args.values.split(",")]
    for v in values:
        if args.param == "lambda" and not 0.0 <= v <= 1.0:
            raise ConfigError([f"lambda value {v} outside [0, 1]"])
        if args.param == "selection_rate" and not 0.0 < v <= 1.0:
            raise ConfigError([f"selection_rate value {v} outside (0, 1]"])
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    seeds = [cfg.federation.seed + i for i in range(args.seeds)]
    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for value in values:
            for seed in seeds:
                c = cfg.copy()
                c.federation.seed = seed
                if args.param == "lambda":
                    c.federation.lambda_ = value
                else:
                    c.federation.selection_rate = value
                report = run_experiment(c, jobs=args.jobs)
                w.writerow([value, seed, f"{report.mean_dice:.10f}",
                            f"{report.mean_iou:.10f}", report.distill_sample_evals])
    _json_dump(os.path.join(out_dir, "manifest.json"),
               _manifest(cfg, out_dir, ["manifest.json", "sweep.csv"]))
    print(f"sweep written to {path}")
    return 0


# -- generated-set file format ---------------------------------------------------


def write_dtilde(path: str, samples: list[GeneratedSample], k: int, n_per_client: int, grid: int) -> None:
    """header {u16 K, u32 n_per_client, u16 grid}, then length-prefixed records
    {u16 source_client, packed mask bitmap, image float64 LE}."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<HIH", k, n_per_client, grid))
        for s in samples:
            mask_bits = np.packbits(s.mask.reshape(-1).astype(np.uint8)).tobytes()
            image = np.ascontiguousarray(s.image, dtype="<f8").tobytes()
            record = struct.pack("<H", s.source_client) + mask_bits + image
            fh.write(struct.pack("<I", len(record)))
            fh.write(record)


def read_dtilde(path: str) -> list[GeneratedSample]:
    with open(path, "rb") as fh:
        buf = fh.read()
    k, n_per_client, grid = struct.unpack_from("<HIH", buf, 0)
    off = 8
    mask_len = (grid * grid + 7) // 8
    samples: list[GeneratedSample] = []
    idx = 0
    while off < len(buf):
        (rec_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        rec = buf[off:off + rec_len]
        off += rec_len
        (src,) = struct.unpack_from("<H", rec, 0)
        bits = np.unpackbits(np.frombuffer(rec, dtype=np.uint8, count=mask_len, offset=2))
        mask = bits[: grid * grid].reshape(grid, grid).astype(np.float64)
        image = np.frombuffer(rec, dtype="<f8", offset=2 + mask_len).reshape(grid, grid).astype(np.float64)
        samples.append(GeneratedSample(image=image, mask=mask, source_client=src, index=idx))
        idx += 1
    return samples


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if cfg.data.samples_per_client < 10:
        raise ConfigError(["data.samples_per_client: must be >= 10 for the fidelity "
                           f"report (Fréchet fit), got {cfg.data.samples_per_client}"])
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    fc, grid = cfg.federation, cfg.data.grid
    federation = make_federation(cfg.data.n_clients, cfg.data.samples_per_client, fc.seed, grid)
    generators = [fit_generator(c) for c in federation]
    banks = {c.domain_id: c.mask_bank for c in federation}
    from .seeding import rng_for
    d_tilde = build_global_set(generators, banks, fc.n_generated_per_client,
                               int(rng_for(fc.seed, "gen-train").integers(2**31)))
    bin_path = os.path.join(out_dir, "dtilde.bin")
    write_dtilde(bin_path, d_tilde, cfg.data.n_clients, fc.n_generated_per_client, grid)

    # style-fidelity report: Fréchet distance generated_i vs real_j for all pairs
    n_fid = max(10, fc.n_generated_per_client)
    fid_sets = {}
    for gen, client in zip(generators, federation):
        rng = rng_for(fc.seed, "fidelity", client.domain_id)
        fid_sets[client.domain_id] = [
            generate(gen, client.mask_bank[int(rng.integers(len(client.mask_bank)))],
                     int(rng.integers(2**31))).image
            for _ in range(n_fid)
        ]
    fid_path = os.path.join(out_dir, "fidelity.csv")
    with open(fid_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["generated_client", "real_client", "frechet_distance"])
        for gid, images in fid_sets.items():
            for client in federation:
                real = [s.image for s in client.samples]
                w.writerow([gid, client.domain_id,
                            f"{frechet_pixel_distance(images, real):.10f}"])
    _json_dump(os.path.join(out_dir, "manifest.json"),
               _manifest(cfg, out_dir, ["manifest.json", "dtilde.bin", "fidelity.csv"]))
    print(f"generated {len(d_tilde)} samples -> {bin_path}")
    return 0


# -- argument parsing -------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a nested key-value config file")
    p.add_argument("--set", action="append", metavar="K=V",
                   help="override a config field by dotted key, e.g. federation.lambda=0.7")
    p.add_argument("--out", default=os.environ.get("OUTPUT_DIR", "out"),
                   help="output directory (default: $OUTPUT_DIR or ./out)")
    p.add_argument("--jobs", type=int, default=1,
                   help="internal parallelism cap; output is identical for any value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsfed",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "CSV schemas: rounds.csv %s | ledger.csv %s | sweep.csv %s\n"
            "ablation.csv: mutual_kd, lg_selection, dice_s<seed>..., mean_dice, "
            "mean_iou, distill_sample_evals\n"
            "Exit codes: 0 success, 1 runtime failure, 2 config/validation failure."
            % (ROUNDS_COLUMNS, LEDGER_COLUMNS, SWEEP_COLUMNS)
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment (all folds)")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run the {mutual_kd} x {lg_selection} grid")
    _add_common(p_abl)
    p_abl.add_argument("--seeds", type=int, default=5, help="number of seeds per cell")
    p_abl.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="sweep lambda or selection_rate")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=["lambda", "selection_rate"])
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--seeds", type=int, default=5)
    p_sweep.set_defaults(func=cmd_sweep)

    p_gen = sub.add_parser("gen-data", help="fit generators and materialize the generated set")
    _add_common(p_gen)
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
