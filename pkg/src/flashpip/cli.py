"""flashpip command line: gen, train, prune, bench, analyze.

Configuration is plain key=value text: every key has a documented default,
a --config file overrides defaults, and trailing key=value arguments
override the file. The effective configuration and artifact version are
echoed into the output directory before any work starts. CSV output uses
comma separation, a header row, dot decimals and LF endings; wall-clock
columns are prefixed wall_ and are the only nondeterministic ones.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchConfig, bench_sweep
from .dataio import (CheckpointError, generate_scene, load_checkpoint,
                     pfm_write, read_manifest, save_checkpoint, write_manifest)
from .model import ModelConfig, RefineModel
from .pip import PruneSchedule, prune_progressive
from .training import evaluate_epe, train_baseline
from . import plots
from .trace import pgm_write, trajectory_report, write_trace_csv


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


DEFAULTS = {
    "gen": {
        "seed": 0,
        "out": "runs/gen",
        "height": 64,
        "width": 96,
        "d_max": 16,
        "n_layers": 3,
        "contrast": 1.0,
        "train_count": 512,
        "heldout_count": 64,
        "dump_pfm": 0,
    },
    "train": {
        "seed": 0,
        "out": "runs/train",
        "data": "runs/gen",
        "iters": 8,
        "steps": 450,
        "lr": 2e-3,
        "batch": 4,
        "gamma": 0.0,            # final-only supervision; >0 weights earlier steps
        "feat_channels": 16,
        "hidden_channels": 32,
        "kernel_size": 3,
        "lookup_radius": 3,
        "init_mode": "softargmax",
        "update_gate_bias": -1.5,
    },
    "prune": {
        "seed": 0,
        "out": "runs/prune",
        "data": "runs/gen",
        "checkpoint": "runs/train/checkpoint.ckpt",
        "iters": 0,              # 0: take the training iteration count from the checkpoint
        "stages": 3,
        "ratio": 2,
        "steps": 400,
        "lr": 1e-3,
        "batch": 4,
        "final_mode": "accumulated",
        "train_head": 0,
        "teacher_forcing": 0,
    },
    "bench": {
        "seed": 0,
        "out": "runs/bench",
        "resolutions": "320x736,640x1472,1280x2944",
        "sparsities": "0.7",
        "iters": "4",
        "hidden_channels": 32,
        "input_channels": 8,
        "levels": 2,
        "feature_scale": 4,
        "threshold": 0.0,
        "checkpoint": "",        # empty: random gate weights
        "execute": 0,
        "check": 0,
    },
    "analyze": {
        "seed": 0,
        "out": "runs/analyze",
        "data": "runs/gen",
        "checkpoint": "runs/train/checkpoint.ckpt",
        "iters": 8,
        "epsilon": 1e-3,
        "samples": 8,
        "dump_pgm": 0,
    },
}


def _cast(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return bool(int(raw))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise CliError("config", f"bad value for {key}: {raw!r} ({e})")


def parse_config(command: str, config_path: str | None, overrides,
                 seed: int | None, out: str | None) -> dict:
    cfg = dict(DEFAULTS[command])
    pairs = []
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliError("missing-input", f"config file not found: {path}")
        for line in path.read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                pairs.append((line, str(path)))
    for ov in overrides:
        pairs.append((ov, "command line"))
    for text, origin in pairs:
        if "=" not in text:
            raise CliError("config", f"expected key=value in {origin}, got {text!r}")
        key, raw = text.split("=", 1)
        key = key.strip()
        if key not in cfg:
            raise CliError("config", f"unknown key {key!r} for {command} "
                                     f"(known: {', '.join(sorted(cfg))})")
        cfg[key] = _cast(key, raw.strip(), cfg[key])
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return cfg


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"artifact_version={__version__}"]
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row.get(col, "")) for col in header) + "\n")


# ---------------------------------------------------------------------------
# dataset plumbing


def _dataset_params(data_dir: Path) -> dict:
    cfg_file = data_dir / "config.txt"
    if not cfg_file.exists():
        raise CliError("missing-input",
                       f"no dataset config at {cfg_file}; run 'flashpip gen' first")
    vals = {}
    for line in cfg_file.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            vals[k] = v
    g = DEFAULTS["gen"]
    return {k: _cast(k, vals[k], g[k]) for k in
            ("height", "width", "d_max", "n_layers", "contrast",
             "train_count", "heldout_count") if k in vals}


def _load_datasets(data_dir: str):
    data_dir = Path(data_dir)
    p = _dataset_params(data_dir)
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise CliError("missing-input", f"manifest not found: {manifest}")
    seeds = read_manifest(manifest)
    want = p["train_count"] + p["heldout_count"]
    if len(seeds) != want:
        raise CliError("data", f"manifest has {len(seeds)} seeds, config says {want}")

    def build(ss):
        return [generate_scene(s, p["height"], p["width"], p["d_max"], p["n_layers"],
                               contrast_scale=p["contrast"]) for s in ss]

    return build(seeds[:p["train_count"]]), build(seeds[p["train_count"]:])


def _load_model(path: str):
    ckpt = Path(path)
    if not ckpt.exists():
        raise CliError("missing-input", f"checkpoint not found: {ckpt}")
    try:
        return load_checkpoint(ckpt)
    except CheckpointError as e:
        raise CliError("data", f"unreadable checkpoint {ckpt}: {e}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: dict, out: Path, log) -> None:
    base = cfg["seed"] * 1_000_000
    count = cfg["train_count"] + cfg["heldout_count"]
    seeds = [base + i for i in range(count)]
    write_manifest(out / "manifest.txt", seeds)
    preview = None
    pfm_dir = out / "pfm"
    if cfg["dump_pfm"]:
        pfm_dir.mkdir(exist_ok=True)
    for i, s in enumerate(seeds):
        if not cfg["dump_pfm"] and i > 0:
            break
        sample = generate_scene(s, cfg["height"], cfg["width"], cfg["d_max"],
                                cfg["n_layers"], contrast_scale=cfg["contrast"])
        if preview is None:
            preview = sample
        if cfg["dump_pfm"]:
            pfm_write(sample.gt_disparity, pfm_dir / f"{i:05d}.pfm")
    plots.save_scene_preview(preview, out / "sample_preview.png")
    log(f"manifest with {count} seeds -> {out / 'manifest.txt'}")


def cmd_train(cfg: dict, out: Path, log) -> None:
    train_set, heldout = _load_datasets(cfg["data"])
    data_p = _dataset_params(Path(cfg["data"]))
    model_cfg = ModelConfig(feat_channels=cfg["feat_channels"],
                            hidden_channels=cfg["hidden_channels"],
                            kernel_size=cfg["kernel_size"],
                            d_max=data_p["d_max"],
                            lookup_radius=cfg["lookup_radius"],
                            init_mode=cfg["init_mode"],
                            update_gate_bias=cfg["update_gate_bias"])
    model = RefineModel(model_cfg, seed=cfg["seed"])
    rows = train_baseline(model, train_set, T=cfg["iters"], steps=cfg["steps"],
                          lr=cfg["lr"], batch_size=cfg["batch"], seed=cfg["seed"],
                          gamma=cfg["gamma"], log=log)
    write_csv(out / "train_loss.csv", ["step", "loss", "lr"], rows)
    plots.save_loss_curve(rows, out / "loss_curve.png")
    epe = evaluate_epe(model, heldout, cfg["iters"])
    save_checkpoint(out / "checkpoint.ckpt", model,
                    {"seed": cfg["seed"], "step": cfg["steps"], "stage": 0,
                     "T": cfg["iters"]})
    write_csv(out / "train_summary.csv", ["T", "steps", "epe_heldout"],
              [{"T": cfg["iters"], "steps": cfg["steps"], "epe_heldout": epe}])
    log(f"held-out EPE at T={cfg['iters']}: {epe:.4f}")


def cmd_prune(cfg: dict, out: Path, log) -> None:
    model, meta = _load_model(cfg["checkpoint"])
    t0 = cfg["iters"] or int(meta.get("T", 0))
    if t0 < 2:
        raise CliError("config", f"baseline iteration count {t0} cannot be pruned")
    train_set, heldout = _load_datasets(cfg["data"])
    try:
        sched = PruneSchedule(t0=t0, ratio=cfg["ratio"], stages=cfg["stages"],
                              steps_per_stage=cfg["steps"], lr=cfg["lr"],
                              batch_size=cfg["batch"], seed=cfg["seed"],
                              final_mode=cfg["final_mode"])
    except ValueError as e:
        raise CliError("config", str(e))
    results = prune_progressive(model, sched, train_set, heldout=heldout,
                                train_head=bool(cfg["train_head"]),
                                teacher_forcing=bool(cfg["teacher_forcing"]), log=log)
    stage_rows = []
    report_panels = {}
    for i, res in enumerate(results, start=1):
        save_checkpoint(out / f"stage{i}.ckpt", res.model,
                        {"seed": cfg["seed"], "step": sched.steps_per_stage,
                         "stage": i, "T": res.iters})
        rows = [{"step": j, "loss_cum": r.loss_cum, "loss_final": r.loss_final,
                 "loss_hid": r.loss_hid, "total": r.total}
                for j, r in enumerate(res.reports)]
        write_csv(out / f"pip_losses_stage{i}.csv",
                  ["step", "loss_cum", "loss_final", "loss_hid", "total"], rows)
        stage_rows.append({"stage": i, "S": res.iters, "epe_pruned": res.epe_heldout,
                           "epe_truncated": res.epe_truncated})
        report_panels[f"stage {i} (S={res.iters})"] = res.reports
    write_csv(out / "summary.csv", ["stage", "S", "epe_pruned", "epe_truncated"],
              stage_rows)
    plots.save_pip_losses(report_panels, out / "pip_losses.png")
    plots.save_epe_stages(stage_rows, out / "epe_stages.png")


def _parse_grid(cfg: dict):
    try:
        resolutions = []
        for token in cfg["resolutions"].split(","):
            h, w = token.lower().split("x")
            resolutions.append((int(h), int(w)))
        sparsities = [float(s) for s in str(cfg["sparsities"]).split(",")]
        iteration_counts = [int(t) for t in str(cfg["iters"]).split(",")]
    except ValueError as e:
        raise CliError("config", f"bad sweep grid: {e}")
    for s in sparsities:
        if not 0.0 <= s < 1.0:
            raise CliError("config", f"sparsity {s} outside [0,1)")
    return resolutions, sparsities, iteration_counts


def cmd_bench(cfg: dict, out: Path, log) -> None:
    resolutions, sparsities, iteration_counts = _parse_grid(cfg)
    bench_cfg = BenchConfig(hidden_channels=cfg["hidden_channels"],
                            input_channels=cfg["input_channels"],
                            levels=cfg["levels"],
                            feature_scale=cfg["feature_scale"],
                            threshold=cfg["threshold"], seed=cfg["seed"])
    params = None
    if cfg["checkpoint"]:
        model, _ = _load_model(cfg["checkpoint"])
        bench_cfg.hidden_channels = model.cfg.hidden_channels
        bench_cfg.input_channels = model.cfg.gru_input_channels
        params = [model.gru] * bench_cfg.levels
    rows = bench_sweep(resolutions, sparsities, iteration_counts, bench_cfg,
                       params=params, execute=bool(cfg["execute"]),
                       check=bool(cfg["check"]), log=log)
    header = ["height", "width", "levels", "sparsity", "T",
              "dense_requests", "sparse_requests",
              "dense_peak_bytes", "sparse_peak_bytes",
              "reduction_req_pct", "reduction_peak_pct", "modeled_speedup",
              "dense_hidden_requests", "sparse_hidden_requests"]
    if cfg["execute"] or cfg["check"]:
        header += ["wall_sparse_s", "wall_dense_s"]
    if cfg["check"]:
        header += ["check_max_diff", "check_frozen_ok"]
    write_csv(out / "bench.csv", header, rows)
    plots.save_bench_reduction(rows, out / "bench_reduction.png")


def cmd_analyze(cfg: dict, out: Path, log) -> None:
    if cfg["iters"] < 2:
        raise CliError("config", f"analyze needs iters >= 2, got {cfg['iters']}")
    model, _ = _load_model(cfg["checkpoint"])
    _, heldout = _load_datasets(cfg["data"])
    samples = heldout[:cfg["samples"]]
    if not samples:
        raise CliError("data", "no held-out samples to analyze")
    agg_rows = []
    all_fracs = []
    all_hits = []
    for i, sample in enumerate(samples):
        rec, _ = model.refine_pair(sample.left, sample.right, cfg["iters"])
        series = trajectory_report(rec, cfg["epsilon"])
        write_trace_csv(out / f"trace_{i:03d}.csv", series)
        all_fracs.append(series.fractions)
        all_hits.append(series.hit_ratios)
        agg_rows.append({"sample": i,
                         "fraction_first": series.fractions[0],
                         "fraction_last": series.fractions[-1],
                         "mean_hit_ratio": float(np.mean(series.hit_ratios))})
        if cfg["dump_pgm"]:
            pgm_dir = out / "flags"
            pgm_dir.mkdir(exist_ok=True)
            for t, flags in enumerate(series.flag_maps, start=1):
                pgm_write(pgm_dir / f"sample{i:03d}_iter{t:02d}.pgm", flags.flags[0, 0])
    mean_frac = np.mean(all_fracs, axis=0)
    mean_hit = np.mean(all_hits, axis=0)
    agg_rows.append({"sample": "mean",
                     "fraction_first": float(mean_frac[0]),
                     "fraction_last": float(mean_frac[-1]),
                     "mean_hit_ratio": float(np.mean(mean_hit))})
    write_csv(out / "aggregate.csv",
              ["sample", "fraction_first", "fraction_last", "mean_hit_ratio"], agg_rows)
    plots.save_trace_series(list(mean_frac), list(mean_hit), out / "update_stats.png")
    log(f"mean updated fraction: t=1 {mean_frac[0]:.4f} -> t={cfg['iters']} "
        f"{mean_frac[-1]:.4f}")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "prune": cmd_prune,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flashpip",
        description="Iteration pruning and sparse fused execution for "
                    "recurrent stereo refinement.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--out", help="output directory override")
        if name == "bench":
            p.add_argument("--check", action="store_true",
                           help="verify every cell against the masked dense oracle")
            p.add_argument("--random", action="store_true",
                           help="use random gate weights (ignore any checkpoint)")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config overrides")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.command, args.config, args.overrides,
                           args.seed, args.out)
        if args.command == "bench":
            if getattr(args, "check", False):
                cfg["check"] = 1
            if getattr(args, "random", False):
                cfg["checkpoint"] = ""
        out = Path(cfg["out"])
        echo_config(cfg, out)
        COMMANDS[args.command](cfg, out, log=lambda msg: print(msg, flush=True))
    except CliError as e:
        print(f"ERROR {e.category}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"ERROR io: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
