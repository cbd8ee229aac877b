"""Experiment driver: generate / train / sweep / analyze / plot.

Exit codes: 0 success; 2 configuration error; 3 data error; 4 training error;
5 analysis/plot error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import data as D
from . import groups as G
from . import harness as H
from . import metrics as X
from . import model as M
from . import plots as P
from .optim import LrSchedule
from .presets import get_preset

EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_ANALYSIS = 2, 3, 4, 5

WORKERS_ENV = "CONTLEGO_WORKERS"

TRAIN_T = 4
TEST_T = 6
DEFAULT_SEEDS = 4
DATA_SEED = 1234


class ConfigError(Exception):
    pass


def _load_config_file(path: str) -> dict:
    if path.endswith(".toml"):
        import tomli
        with open(path, "rb") as f:
            return tomli.load(f)
    if path.endswith(".json"):
        with open(path) as f:
            return json.load(f)
    raise ConfigError(f"config file must be .toml or .json: {path}")


def _experiences(schedule: str, g: G.GroupSpec) -> list[D.ExperienceSpec]:
    if schedule == "flipflop":
        return D.make_flipflop_experiences(g)
    comp = D.make_compositional_experiences(g)
    if schedule == "compositional":
        return comp
    full = D.make_full_experience(comp)
    if schedule == "full":
        return [full]
    if schedule == "incremental":
        return D.make_incremental_experiences(comp, full)
    raise ConfigError(f"unknown schedule {schedule!r}")


def _resolve(args) -> dict:
    """Merge config file < flags into one concrete experiment description."""
    cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    preset = get_preset(getattr(args, "scale", None) or cfg.get("scale", "desk"))

    def pick(flag, key, default):
        v = getattr(args, flag, None) if flag else None
        if v is not None:
            return v
        return cfg.get(key, default)

    family = pick("family", "family", "shared")
    if family not in ("shared", "unshared"):
        raise ConfigError(f"family must be shared|unshared, got {family!r}")
    num_classes = 6
    g = G.build_dihedral(3)
    vocab = D.default_vocab(g)
    # sweep passes comma lists; the base model uses the first value
    layers = int(str(pick("layers", "layers", 6)).split(",")[0])
    heads = int(str(pick("heads", "heads", 1)).split(",")[0])
    hidden = int(pick("hidden", "hidden_dim", 128))
    model_cfg = M.ModelConfig(
        num_layers=layers,
        num_heads=heads,
        hidden_dim=hidden,
        vocab_size=len(vocab.all_tokens()),
        num_classes=num_classes,
        max_positions=D.token_count(TEST_T),
        weight_sharing=(family == "shared"),
        init_std=float(pick(None, "init_std", preset.init_std)),
    )
    schedule = pick("schedule", "schedule", "flipflop")
    exps = _experiences(schedule, g)
    epochs = int(pick(None, "epochs_per_experience", preset.epochs_per_experience))
    total_epochs = epochs * len(exps)
    train_cfg = H.TrainConfig(
        epochs_per_experience=epochs,
        batch_size=int(pick(None, "batch_size", preset.batch_size)),
        schedule=LrSchedule(
            base_lr=float(pick("lr", "base_lr", preset.base_lr)),
            min_lr=float(cfg.get("min_lr", 0.0)),
            t_max=int(cfg.get("t_max", total_epochs)),
            mode=cfg.get("lr_mode", "global"),
        ),
        replay_fraction=float(pick("replay", "replay_fraction", 0.0)),
        eval_subsample=pick(None, "eval_subsample", preset.eval_subsample),
    )
    seeds = pick("seeds", "seeds", None)
    if seeds is None:
        seeds = list(range(DEFAULT_SEEDS))
    elif isinstance(seeds, int):
        seeds = list(range(seeds))
    elif isinstance(seeds, str):
        seeds = [int(s) for s in seeds.split(",")]
    return {
        "group": g,
        "vocab": vocab,
        "experiences": exps,
        "schedule": schedule,
        "family": family,
        "model": model_cfg,
        "train": train_cfg,
        "seeds": seeds,
        "preset": preset,
        "data_seed": int(pick(None, "data_seed", DATA_SEED)),
        "out": getattr(args, "out", None) or cfg.get("out", "runs"),
    }


def _build_datasets(spec: dict):
    """One train (T=4) and one test (T=6) dataset per experience, deterministic."""
    preset = spec["preset"]
    base = spec["data_seed"]
    trains, tests = [], []
    for idx, exp in enumerate(spec["experiences"]):
        trains.append(D.generate_dataset(
            exp, n=preset.train_size, T=TRAIN_T, seed=base + 2 * idx, vocab=spec["vocab"]))
        tests.append(D.generate_dataset(
            exp, n=preset.test_size, T=TEST_T, seed=base + 2 * idx + 1, vocab=spec["vocab"]))
    return trains, tests


def _snapshot(spec: dict) -> dict:
    return {
        "schedule": spec["schedule"],
        "family": spec["family"],
        "model": spec["model"].to_dict(),
        "train": spec["train"].to_dict(),
        "seeds": spec["seeds"],
        "scale": spec["preset"].name,
        "data_seed": spec["data_seed"],
        "experiences": [e.name for e in spec["experiences"]],
    }


# --------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    spec = _resolve(args)
    out = spec["out"]
    os.makedirs(out, exist_ok=True)
    trains, tests = _build_datasets(spec)
    for exp, tr, te in zip(spec["experiences"], trains, tests):
        D.write_dataset(tr, os.path.join(out, f"{exp.name}_train.jsonl"))
        D.write_dataset(te, os.path.join(out, f"{exp.name}_test.jsonl"))
    with open(os.path.join(out, "generate_config.json"), "w") as f:
        json.dump(_snapshot(spec), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {2 * len(trains)} dataset files to {out}")
    return 0


def _run_one_seed(spec: dict, trains, tests, seed: int, run_dir: str, label: str):
    model = M.init_model(spec["model"], np.random.default_rng(seed))
    rec = H.train_sequential(
        model,
        [e.name for e in spec["experiences"]],
        trains, tests, spec["train"], seed=seed,
        checkpoint_dir=os.path.join(run_dir, "checkpoints"),
    )
    H.write_run_record(rec, run_dir)
    row = {"model": label, "seed": seed, "cell": f"{spec['model'].num_layers}x{spec['model'].num_heads}",
           "TA": float("nan"), "GA": float("nan"), "FT": float("nan"), "FT_reached": 0,
           "PM_corrected": float("nan"), "PM_literal": float("nan"), "alpha": 0.9}
    try:
        if rec.num_experiences >= 2:
            row.update(X.compute_cl_metrics(rec).as_row())
        else:
            row.update({"TA": X.task_accuracy(rec), "GA": X.generalization_accuracy(rec)})
    except X.MetricsError as e:
        # runs shorter than the metric windows still produce curves/checkpoints
        print(f"metrics skipped for seed {seed}: {e}", file=sys.stderr)
    return rec, row


def cmd_train(args) -> int:
    spec = _resolve(args)
    out = spec["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "experiment.json"), "w") as f:
        json.dump(_snapshot(spec), f, indent=2, sort_keys=True)
        f.write("\n")
    trains, tests = _build_datasets(spec)
    label = f"{spec['family']}-L{spec['model'].num_layers}H{spec['model'].num_heads}"
    rows = []
    for seed in spec["seeds"]:
        run_dir = os.path.join(out, f"seed{seed}")
        _, row = _run_one_seed(spec, trains, tests, seed, run_dir, label)
        rows.append(row)
        print(f"seed {seed}: TA={row['TA']:.4f} GA={row['GA']:.4f} "
              f"PM={row['PM_corrected']:.4f}")
    X.write_metrics_csv(os.path.join(out, "metrics.csv"), rows)
    return 0


def _cell_digest(spec: dict, L: int, Hh: int, seed: int) -> str:
    blob = json.dumps({
        "L": L, "H": Hh, "seed": seed,
        "family": spec["family"], "train": spec["train"].to_dict(),
        "scale": spec["preset"].name, "schedule": spec["schedule"],
        "data_seed": spec["data_seed"], "hidden": spec["model"].hidden_dim,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _sweep_cell(payload):
    spec, trains, tests, L, Hh, seed, run_dir, label = payload
    cell_model = dataclasses.replace(spec["model"], num_layers=L, num_heads=Hh)
    cell_spec = dict(spec, model=cell_model)
    _, row = _run_one_seed(cell_spec, trains, tests, seed, run_dir, label)
    return row


def cmd_sweep(args) -> int:
    spec = _resolve(args)
    out = spec["out"]
    os.makedirs(out, exist_ok=True)
    layer_list = [int(v) for v in (args.layers or "2,4,6,8,12").split(",")]
    head_list = [int(v) for v in (args.heads or "1,2,4,8,12").split(",")]
    for Hh in head_list:
        if spec["model"].hidden_dim % Hh:
            print(f"error: hidden_dim {spec['model'].hidden_dim} not divisible by heads {Hh}",
                  file=sys.stderr)
            return EXIT_CONFIG
    trains, tests = _build_datasets(spec)
    jobs, rows = [], []
    for L in layer_list:
        for Hh in head_list:
            for seed in spec["seeds"]:
                digest = _cell_digest(spec, L, Hh, seed)
                run_dir = os.path.join(out, f"L{L}H{Hh}_seed{seed}_{digest}")
                done = os.path.join(run_dir, "row.json")
                if os.path.exists(done):
                    with open(done) as f:
                        rows.append(json.load(f))
                    continue
                label = f"{spec['family']}-L{L}H{Hh}"
                jobs.append((spec, trains, tests, L, Hh, seed, run_dir, label))
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    failures = 0
    if workers > 1 and jobs:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {ex.submit(_sweep_cell, j): j for j in jobs}
            for fut in cf.as_completed(futs):
                job = futs[fut]
                try:
                    rows.append(_finish_cell(fut.result(), job[6]))
                except Exception as e:  # record and continue the sweep
                    failures += 1
                    print(f"cell {job[3]}x{job[4]} seed {job[5]} failed: {e}", file=sys.stderr)
    else:
        for job in jobs:
            try:
                rows.append(_finish_cell(_sweep_cell(job), job[6]))
            except Exception as e:
                failures += 1
                print(f"cell {job[3]}x{job[4]} seed {job[5]} failed: {e}", file=sys.stderr)
    rows.sort(key=lambda r: (r["model"], r["cell"], r["seed"]))
    X.write_metrics_csv(os.path.join(out, "sweep_metrics.csv"), rows)
    print(f"sweep: {len(rows)} cells written, {failures} failed")
    return 0 if failures == 0 else EXIT_TRAIN


def _finish_cell(row: dict, run_dir: str) -> dict:
    with open(os.path.join(run_dir, "row.json"), "w") as f:
        json.dump(row, f, sort_keys=True)
        f.write("\n")
    return row


def cmd_analyze(args) -> int:
    spec = _resolve(args)
    out = spec["out"]
    os.makedirs(out, exist_ok=True)
    probe_n = args.probe_size
    # fixed probe set: experience-1 test sequences
    probe = D.generate_dataset(
        spec["experiences"][0], n=probe_n, T=TEST_T,
        seed=spec["data_seed"] + 1, vocab=spec["vocab"])
    tokens, labels, canon = probe.arrays()
    clause_idx = np.stack([np.asarray(ex.clause_index) for ex in probe.examples])

    missing = []
    per_run = {}
    for run_dir in args.runs:
        man_path = os.path.join(run_dir, "manifest.json")
        if not os.path.exists(man_path):
            missing.append(run_dir)
            continue
        with open(man_path) as f:
            entries = json.load(f)
        if not entries:
            missing.append(run_dir)
            continue
        per_run[run_dir] = entries
    if missing or not per_run:
        print(f"analysis error: no checkpoints in {missing or args.runs}", file=sys.stderr)
        return EXIT_ANALYSIS

    rows_cos = []
    for run_dir, entries in sorted(per_run.items()):
        atts = []
        for e in entries:
            model = H.load_checkpoint(e["path"], expected_digest=e["digest"])
            _, att = M.forward(model, tokens, capture_attention=True)
            atts.append((e["experience"], att))
        # attention structure at the final checkpoint
        summary = X.summarize_attention(atts[-1][1], clause_idx, canon)
        tag = os.path.basename(os.path.normpath(run_dir))
        X.write_attention_csv(os.path.join(out, f"attention_{tag}.csv"), summary)
        if len(atts) >= 2:
            cos = X.attention_cosine_similarity(atts[0][1], atts[-1][1])
            for layer, c in enumerate(cos, start=1):
                rows_cos.append({"run": tag, "layer": layer, "cosine": float(c)})
    if rows_cos:
        import csv as _csv
        with open(os.path.join(out, "attention_cosine.csv"), "w", newline="") as f:
            w = _csv.DictWriter(f, fieldnames=["run", "layer", "cosine"])
            w.writeheader()
            w.writerows(rows_cos)
    print(f"analyzed {len(per_run)} runs with a {probe_n}-example probe")
    return 0


def cmd_plot(args) -> int:
    if args.kind == "curves":
        P.plot_accuracy_curves(args.table[0], args.out)
    elif args.kind == "replay":
        series = {}
        for item in args.table:
            if "=" not in item:
                raise P.PlotError(f"replay series must be fraction=path, got {item!r}")
            k, v = item.split("=", 1)
            series[k] = v
        P.plot_replay_series(series, args.out)
    elif args.kind == "heat":
        P.plot_sweep_heat(args.table[0], args.out, metric=args.metric,
                          log10=(args.metric == "FT"))
    elif args.kind == "bars":
        P.plot_metric_bars(args.table[0], args.out)
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="TOML or JSON experiment config")
    p.add_argument("--scale", choices=["paper", "desk"])
    p.add_argument("--family", choices=["shared", "unshared"])
    p.add_argument("--layers")
    p.add_argument("--heads")
    p.add_argument("--hidden", type=int)
    p.add_argument("--replay", type=float)
    p.add_argument("--seeds")
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["flipflop", "compositional", "incremental", "full"])
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="contlego")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, fn in (("generate", cmd_generate), ("train", cmd_train), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("analyze")
    _add_common(p)
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--probe-size", type=int, default=50)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("plot")
    p.add_argument("--kind", choices=["curves", "replay", "heat", "bars"], required=True)
    p.add_argument("--table", nargs="+", required=True)
    p.add_argument("--metric", default="TA")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except D.DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, KeyError, H.ScheduleError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (H.HarnessError,) as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAIN
    except (X.MetricsError, P.PlotError) as e:
        print(f"analysis error: {e}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
