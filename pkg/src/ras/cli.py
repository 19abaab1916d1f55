"""Operator entry point: train, sample, compare, analyze, bench.

Configuration comes from defaults, then an optional JSON config file, then
command-line flags (flags win). Every command validates its configuration
before touching the output directory and writes the resolved configuration
next to its artifacts, so any run can be reproduced from its output directory
alone. On failure the last stdout line is a machine-readable JSON error and
the exit status is nonzero (2 for configuration errors, 1 otherwise).

RAS_NUM_THREADS caps kernel threads; nothing else reads the environment.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, imaging, kernels
from .dataset import ShapesDataset
from .errors import ConfigError, RasError
from .model import ModelConfig, init_model
from .sampler import RasConfig, RunTrace, SigmaSchedule, sample_dense, sample_ras
from .training import TrainConfig, moving_average, train


def _resolve(defaults: dict, config_path: str | None, args: argparse.Namespace) -> dict:
    cfg = dict(defaults)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _prepare_out(cfg: dict, out_dir: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return out


def _parse_resets(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise ConfigError(f"bad dense-reset list {text!r}") from e


TRAIN_DEFAULTS = {
    "image_size": 16, "patch": 2, "dim": 64, "layers": 3, "heads": 4, "mlp_ratio": 4,
    "classes": 4, "steps": 3000, "batch": 32, "lr": 1e-3, "warmup": 300,
    "weight_decay": 1e-4, "ema": 0.999, "seed": 0, "data_seed": 0,
    "preview": 0, "progress": 0,
}


def cmd_train(args) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args.config, args)
    mcfg = ModelConfig(image_h=cfg["image_size"], image_w=cfg["image_size"], channels=1,
                       patch_size=cfg["patch"], hidden_dim=cfg["dim"], layers=cfg["layers"],
                       heads=cfg["heads"], mlp_ratio=cfg["mlp_ratio"], num_classes=cfg["classes"])
    tcfg = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch"], lr=cfg["lr"],
                       warmup_steps=cfg["warmup"], weight_decay=cfg["weight_decay"],
                       ema_decay=cfg["ema"], seed=cfg["seed"])
    dataset = ShapesDataset(image_size=cfg["image_size"], seed=cfg["data_seed"],
                            num_classes=cfg["classes"])
    out = _prepare_out(cfg, args.out)

    model = init_model(mcfg, seed=tcfg.seed)
    result = train(model, dataset, tcfg, progress_every=cfg["progress"])

    checkpoint.save(result.model, {"train": tcfg.to_dict(), "final_loss": result.final_loss,
                                   "data_seed": cfg["data_seed"]}, out / "model.rasf")
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(result.losses):
            writer.writerow([i, repr(float(v))])
    meta = {"final_loss": result.final_loss,
            "final_loss_bits": np.float32(result.final_loss).tobytes().hex()}
    if result.losses.size >= 200:
        win = min(500, result.losses.size // 2)
        ma = moving_average(result.losses, win)
        meta["moving_avg_first"] = float(ma[0])
        meta["moving_avg_last"] = float(ma[-1])
    with open(out / "train_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for i in range(cfg["preview"]):
        img, cls = dataset.sample(i)
        gray = imaging.to_uint8(img)
        imaging.write_pgm(out / f"dataset_{i}_class{cls}.pgm", gray)
        imaging.write_png(out / f"dataset_{i}_class{cls}.png", gray, upscale=8)
    print(f"trained {tcfg.steps} steps; final loss {result.final_loss:.6f}; wrote {out / 'model.rasf'}")
    return 0


SAMPLE_DEFAULTS = {
    "steps": 30, "warmup": 4, "resets": "12,20", "ratio": 0.5, "curve": "linear",
    "k": 0.3, "metric": "std", "class_id": 0, "seed": 0, "count": 1,
    "shift": 1.0, "dense": False,
}


def _build_ras_config(cfg: dict) -> RasConfig:
    return RasConfig(total_steps=cfg["steps"], warmup_steps=cfg["warmup"],
                     dense_reset_steps=_parse_resets(cfg["resets"]),
                     average_ratio=cfg["ratio"], ratio_curve=cfg["curve"],
                     starvation_scale=cfg["k"], metric_kind=cfg["metric"],
                     sigma_shift=cfg["shift"])


def cmd_sample(args) -> int:
    cfg = _resolve(SAMPLE_DEFAULTS, args.config, args)
    model, _ = checkpoint.load(args.checkpoint)
    sigma = SigmaSchedule.linear(cfg["steps"], shift=cfg["shift"])
    ras_cfg = None
    if not cfg["dense"]:
        ras_cfg = _build_ras_config(cfg)
        ras_cfg.build_schedule(model.cfg.num_patches)  # validate before any writes
    cfg["checkpoint"] = str(args.checkpoint)
    out = _prepare_out(cfg, args.out)

    for i in range(cfg["count"]):
        seed = cfg["seed"] + i
        class_id = cfg["class_id"] if model.cfg.num_classes else None
        if cfg["dense"]:
            image, trace = sample_dense(model, sigma, seed, class_id)
        else:
            image, trace = sample_ras(model, sigma, ras_cfg, seed, class_id)
        gray = imaging.to_uint8(image)
        imaging.write_pgm(out / f"sample_s{seed}.pgm", gray)
        imaging.write_png(out / f"sample_s{seed}.png", gray, upscale=8)
        trace.save(out / f"trace_s{seed}.jsonl")
    print(f"wrote {cfg['count']} sample(s) to {out}")
    return 0


COMPARE_DEFAULTS = {
    "grid": "30:1.0,30:0.5,15:1.0", "seeds": 8, "ref_steps": 30, "warmup": 4,
    "resets": "12,20", "curve": "linear", "k": 0.3, "metric": "std", "shift": 1.0,
}


def cmd_compare(args) -> int:
    cfg = _resolve(COMPARE_DEFAULTS, args.config, args)
    model, _ = checkpoint.load(args.checkpoint)
    try:
        configs = []
        for part in cfg["grid"].split(","):
            t, r = part.split(":")
            configs.append((int(t), float(r)))
    except ValueError as e:
        raise ConfigError(f"bad grid {cfg['grid']!r}; expected 'T:ratio,...'") from e
    template = RasConfig(warmup_steps=cfg["warmup"], dense_reset_steps=_parse_resets(cfg["resets"]),
                         ratio_curve=cfg["curve"], starvation_scale=cfg["k"],
                         metric_kind=cfg["metric"], sigma_shift=cfg["shift"])
    for total_steps, ratio in configs:
        if ratio < 1.0:
            RasConfig(total_steps=total_steps, warmup_steps=cfg["warmup"],
                      dense_reset_steps=tuple(t for t in template.dense_reset_steps if t < total_steps),
                      average_ratio=ratio, ratio_curve=cfg["curve"], starvation_scale=cfg["k"],
                      metric_kind=cfg["metric"]).build_schedule(model.cfg.num_patches)
    cfg["checkpoint"] = str(args.checkpoint)
    out = _prepare_out(cfg, args.out)

    report = analysis.quality_vs_dense(model, configs, range(cfg["seeds"]),
                                       reference_steps=cfg["ref_steps"], ras_template=template)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        for line in report.header_lines():
            fh.write(line + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(report.rows[0].as_dict()))
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row.as_dict())
    print(f"wrote {out / 'report.csv'}")
    return 0


def cmd_analyze(args) -> int:
    cfg = {"traces": [str(t) for t in args.trace]}
    out = _prepare_out(cfg, args.out)
    summary = {"ndcg_convention": analysis.NDCG_CONVENTION, "traces": []}
    for tpath in args.trace:
        trace = RunTrace.load(tpath)
        name = Path(tpath).stem
        entry = {"trace": str(tpath)}
        counts = analysis.drop_count_map(trace)
        gray = imaging.heatmap_to_uint8(counts, vmax=len(trace.records))
        imaging.write_pgm(out / f"dropmap_{name}.pgm", gray)
        imaging.write_png(out / f"dropmap_{name}.png", gray, upscale=16)
        entry["activation_total"] = int(counts.sum())
        entry["expected_total"] = int(sum(int(np.ceil(r.ratio * trace.num_patches)) for r in trace.records))
        scored = [r for r in trace.records if r.scores is not None]
        if len(scored) >= 2:
            curve = analysis.continuity_curve(trace)
            with open(out / f"ndcg_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                fh.write(f"# {analysis.NDCG_CONVENTION}\n")
                writer = csv.writer(fh)
                writer.writerow(["pair", "ndcg"])
                for i, v in enumerate(curve):
                    writer.writerow([i, repr(float(v))])
            third = max(1, len(curve) // 3)
            entry.update({
                "mean_ndcg": float(curve.mean()),
                "random_baseline": analysis.random_ndcg_baseline(trace.num_patches),
                "first_third_mean": float(curve[:third].mean()),
                "last_third_mean": float(curve[-third:].mean()),
            })
        summary["traces"].append(entry)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"analyzed {len(args.trace)} trace(s) into {out}")
    return 0


BENCH_DEFAULTS = {"rows": 4096, "inner": 1024, "cols": 1024, "repeats": 3}


def _best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    cfg = _resolve(BENCH_DEFAULTS, args.config, args)
    if args.checkpoint:
        cfg["checkpoint"] = str(args.checkpoint)
    out = _prepare_out(cfg, args.out)
    m, k, n = cfg["rows"], cfg["inner"], cfg["cols"]
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(7)))
    a = gen.standard_normal((m, k), dtype=np.float32)
    w = gen.standard_normal((k, n), dtype=np.float32)
    rows = []
    kernels.gemm(a[:64], w)  # jit warmup
    t_dense = _best_of(lambda: kernels.gemm(a, w), cfg["repeats"])
    rows.append({"op": "gemm", "m": m, "k": k, "n": n, "fraction": 1.0,
                 "seconds": t_dense, "gflops": 2 * m * k * n / t_dense / 1e9})
    for frac in (0.5, 0.25):
        sub = int(m * frac)
        idx = np.sort(gen.choice(m, sub, replace=False)).astype(np.int64)
        kernels.gather_gemm(a, idx[:64], w)
        t = _best_of(lambda: kernels.gather_gemm(a, idx, w), cfg["repeats"])
        rows.append({"op": "gather_gemm", "m": m, "k": k, "n": n, "fraction": frac,
                     "seconds": t, "gflops": 2 * sub * k * n / t / 1e9})
        xa = np.ascontiguousarray(a[idx])
        dest = np.zeros((m, n), dtype=np.float32)
        t = _best_of(lambda: kernels.gemm_scatter(xa, w, idx, dest), cfg["repeats"])
        rows.append({"op": "gemm_scatter", "m": m, "k": k, "n": n, "fraction": frac,
                     "seconds": t, "gflops": 2 * sub * k * n / t / 1e9})

    if args.checkpoint:
        model, _ = checkpoint.load(args.checkpoint)
        sigma = SigmaSchedule.linear(30)
        for ratio in (1.0, 0.5, 0.25):
            t0 = time.perf_counter()
            if ratio >= 1.0:
                _, trace = sample_dense(model, sigma, 0, 0 if model.cfg.num_classes else None)
            else:
                rc = RasConfig(average_ratio=ratio)
                _, trace = sample_ras(model, sigma, rc, 0, 0 if model.cfg.num_classes else None)
            wall = time.perf_counter() - t0
            rows.append({"op": f"e2e_30step_ratio{ratio}", "m": model.cfg.num_patches,
                         "k": model.cfg.hidden_dim, "n": 0, "fraction": ratio,
                         "seconds": wall, "gflops": analysis.trace_flops(trace).total / wall / 1e9})

    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"wrote {out / 'bench.csv'}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ras", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy model on procedural shapes")
    _add_common(p)
    for key in ("image_size", "patch", "dim", "layers", "heads", "mlp_ratio", "classes",
                "steps", "batch", "warmup", "seed", "data_seed", "preview", "progress"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--ema", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images with the RAS or dense sampler")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    for key in ("steps", "warmup", "class_id", "seed", "count"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--shift", type=float)
    p.add_argument("--resets")
    p.add_argument("--curve", choices=["linear", "flat"])
    p.add_argument("--metric", choices=["std", "l2norm", "random"])
    p.add_argument("--dense", action="store_const", const=True, default=None,
                   help="use the plain dense sampler")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compare", help="quality/FLOP sweep against the dense reference")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", help="comma list of T:ratio pairs")
    p.add_argument("--seeds", type=int)
    p.add_argument("--ref-steps", dest="ref_steps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--resets")
    p.add_argument("--curve", choices=["linear", "flat"])
    p.add_argument("--k", type=float)
    p.add_argument("--shift", type=float)
    p.add_argument("--metric", choices=["std", "l2norm", "random"])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", help="NDCG continuity and drop-count maps from traces")
    p.add_argument("--trace", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="kernel and end-to-end timings")
    _add_common(p)
    p.add_argument("--checkpoint")
    for key in ("rows", "inner", "cols", "repeats"):
        p.add_argument(f"--{key}", dest=key, type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(json.dumps({"error": {"category": "config", "message": str(e)}}))
        return 2
    except RasError as e:
        print(json.dumps({"error": {"category": type(e).__name__, "message": str(e)}}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
