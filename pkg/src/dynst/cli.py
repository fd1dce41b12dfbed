"""Command-line surface: dataset generation, training, evaluation, speed
benchmarking and mask export."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import mask as mk
from . import models as md
from . import trainer as tr
from .data import (Dataset, SeriesFormatError, gen_diffusion_grid,
                   gen_planted_graph, load_dataset, save_dataset)
from .evaluation import (EquivalenceError, MetricsReport, bench_speed,
                         epsilon_check, load_report, metrics, save_report)
from .morph import IMAGE


class ConfigError(ValueError):
    """Bad key=value config file."""


@dataclass
class RunConfig:
    data: str = ""
    backbone: str = "mlp"
    patch: int = 1
    hidden: tuple = (64, 64)
    mpn_hidden: int = 64
    mpn_layers: int = 3
    target_sparsity: float = 0.3
    prune_frac: float = 0.03
    exchange_frac: float = 0.01
    model_iters: int = 100
    mask_iters: int = 20
    dst_interval: int = 20
    dst_steps: int = 3
    lr_model: float = 1e-2
    lr_mask: float = 1e-2
    scheme: str = "ip"
    seed: int = 0
    loss_scope: str = "active-units"
    finetune_iters: int = 300
    epsilon_rel: float = 0.1
    data_range: float = 0.0  # 0 means: derive from the dataset
    out: str = ""

    def schedule(self) -> tr.Schedule:
        return tr.Schedule(
            target_sparsity=self.target_sparsity, prune_frac=self.prune_frac,
            exchange_frac=self.exchange_frac, model_iters=self.model_iters,
            mask_iters=self.mask_iters, dst_interval=self.dst_interval,
            dst_steps=self.dst_steps, lr_model=self.lr_model,
            lr_mask=self.lr_mask, scheme=self.scheme, seed=self.seed,
            loss_scope=self.loss_scope, finetune_iters=self.finetune_iters,
        )

    def to_text(self) -> str:
        lines = []
        for f in dc_fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"


def parse_config(path) -> dict[str, str]:
    """Flat `key = value` file; `#` starts a comment."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def load_run_config(path) -> RunConfig:
    raw = parse_config(path)
    cfg = RunConfig()
    casts = {f.name: f for f in dc_fields(RunConfig)}
    for key, val in raw.items():
        if key not in casts:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool):
                parsed = val.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                parsed = int(val)
            elif isinstance(current, float):
                parsed = float(val)
            elif isinstance(current, tuple):
                parsed = tuple(int(v) for v in val.split(",") if v)
            else:
                parsed = val
        except ValueError:
            raise ConfigError(f"{path}: key {key!r} has invalid value {val!r}") from None
        setattr(cfg, key, parsed)
    return cfg


def _require_files(pairs) -> None:
    missing = [f"{name}: {path}" for name, path in pairs if not Path(path).exists()]
    if missing:
        raise FileNotFoundError("missing artifacts: " + "; ".join(missing))


def _attach_geometry(mask_obj: mk.SensorMask, prepared: tr.PreparedData) -> mk.SensorMask:
    if mask_obj.unit_count != prepared.unit_count:
        raise ValueError(
            f"mask has {mask_obj.unit_count} units but dataset yields "
            f"{prepared.unit_count} units"
        )
    mask_obj.unit_rows = prepared.unit_rows
    return mask_obj


def _derive_data_range(prepared: tr.PreparedData) -> float:
    lo = float(prepared.test_y.min())
    hi = float(prepared.test_y.max())
    return (hi - lo) or 1.0


def _test_metrics(model, prepared: tr.PreparedData, mask_obj: mk.SensorMask,
                  data_range: float) -> MetricsReport:
    xm = mask_obj.row_scale() * prepared.test_x
    pred = tr.predict(model, xm, prepared.graph, mask_obj)
    return metrics(pred, prepared.test_y, prepared.layout, prepared.target_dims,
                   data_range)


def cmd_gen(args) -> int:
    if args.generator == "diffusion":
        ds = gen_diffusion_grid(args.seed, args.h, args.w, args.t, args.alpha,
                                args.samples, t_in=args.t_in, horizon=args.horizon)
        extra = {"kind": "diffusion", "h": args.h, "w": args.w, "alpha": args.alpha,
                 "gen_seed": args.seed}
    else:
        ds = gen_planted_graph(args.seed, args.n, args.noise, args.t, args.samples,
                               t_in=args.t_in, horizon=args.horizon)
        extra = {"kind": "planted-graph", "n": args.n, "gen_seed": args.seed}
    save_dataset(ds, args.out, split_seed=args.seed, extra=extra)
    print(f"wrote {len(ds.samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scheme is not None:
        cfg.scheme = args.scheme
    if args.out is not None:
        cfg.out = args.out
    if not cfg.out:
        raise ConfigError("no output directory: set out= in the config or pass --out")
    if not cfg.data:
        raise ConfigError("config is missing the data= key")
    _require_files([("dataset", cfg.data)])
    dataset = load_dataset(cfg.data)
    prepared = tr.prepare(dataset, cfg.patch)
    model = tr.build_model(cfg.backbone, prepared, cfg.seed, hidden=cfg.hidden,
                           mpn_hidden=cfg.mpn_hidden, mpn_layers=cfg.mpn_layers)
    schedule = cfg.schedule()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    if args.dense:
        model, mask_obj, trace = tr.train_dense(model, prepared, schedule)
    else:
        model, mask_obj, trace = tr.run(model, prepared, schedule)
    md.save_model(model, out / "checkpoint.ckpt")
    mk.save_mask(mask_obj, out / "mask.txt")
    tr.write_trace(trace, out / "trace.csv")
    data_range = cfg.data_range or _derive_data_range(prepared)
    report = _test_metrics(model, prepared, mask_obj, data_range)
    save_report(report, out / "report.txt")
    final_sparsity = 0.0 if mask_obj.mode == mk.DENSE else mk.sparsity(mask_obj)
    print(f"final sparsity {final_sparsity:.4f}, test mae {report.mae:.6g}")
    return 0


def _print_metrics(report: MetricsReport) -> None:
    rows = [("mae", report.mae), ("mse", report.mse), ("rmse", report.rmse),
            ("psnr", report.psnr)]
    if report.ssim is not None:
        rows.append(("ssim", report.ssim))
    print(f"{'metric':<10}{'value':>14}")
    for name, val in rows:
        print(f"{name:<10}{val:>14.6g}")
    horizon = " ".join(f"{v:.6g}" for v in report.per_horizon)
    print(f"per-horizon mae: {horizon}")


def cmd_eval(args) -> int:
    _require_files([("dataset", args.data), ("checkpoint", args.ckpt),
                    ("mask", args.mask)])
    if args.baseline is not None:
        _require_files([("baseline report", args.baseline)])
    dataset = load_dataset(args.data)
    prepared = tr.prepare(dataset, args.patch)
    model = md.load_model(args.ckpt)
    mask_obj = _attach_geometry(mk.load_mask(args.mask), prepared)
    data_range = args.data_range or _derive_data_range(prepared)
    report = _test_metrics(model, prepared, mask_obj, data_range)
    _print_metrics(report)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        save_report(report, Path(args.out) / "report.txt")
    if args.baseline is not None:
        dense_report = load_report(args.baseline)
        ok, delta = epsilon_check(report, dense_report, args.epsilon)
        verdict = "pass" if ok else "FAIL"
        print(f"epsilon check: {verdict} (relative mae delta {delta:.4%}, "
              f"threshold {args.epsilon:.4%})")
        if not ok:
            return 1
    return 0


def cmd_bench(args) -> int:
    _require_files([("dataset", args.data), ("checkpoint", args.ckpt),
                    ("mask", args.mask)])
    dataset = load_dataset(args.data)
    prepared = tr.prepare(dataset, args.patch)
    model = md.load_model(args.ckpt)
    mask_obj = _attach_geometry(mk.load_mask(args.mask), prepared)
    inputs = mask_obj.row_scale() * prepared.test_x
    report = bench_speed(model, inputs, prepared.graph, mask_obj,
                         repetitions=args.reps)
    print(f"dense   median {report.dense_time * 1e3:9.3f} ms "
          f"(min {report.dense_spread[0] * 1e3:.3f}, max {report.dense_spread[2] * 1e3:.3f})")
    print(f"compact median {report.compact_time * 1e3:9.3f} ms "
          f"(min {report.compact_spread[0] * 1e3:.3f}, max {report.compact_spread[2] * 1e3:.3f})")
    print(f"speedup ratio {report.ratio:.3f} at sparsity {report.mask_sparsity:.3f}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        save_report(report, Path(args.out) / "speed.txt")
    return 0


def cmd_export_mask(args) -> int:
    _require_files([("mask", args.mask)])
    mask_obj = mk.load_mask(args.mask)
    mk.save_mask(mask_obj, args.out)
    s = mk.sparsity(mask_obj) if mask_obj.mode == mk.BINARY else 0.0
    print(f"exported {mask_obj.unit_count} units at sparsity {s:.4f} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynst",
                                     description="dynamic sparse training of sensor masks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("generator", choices=["diffusion", "planted-graph"])
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--h", type=int, default=16)
    p_gen.add_argument("--w", type=int, default=16)
    p_gen.add_argument("--n", type=int, default=64)
    p_gen.add_argument("--noise", type=int, default=16)
    p_gen.add_argument("--t", type=int, default=64, help="frames per trajectory")
    p_gen.add_argument("--alpha", type=float, default=0.2)
    p_gen.add_argument("--samples", type=int, default=500)
    p_gen.add_argument("--t-in", type=int, default=8, dest="t_in")
    p_gen.add_argument("--horizon", type=int, default=8)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="run a training scheme")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--scheme", choices=list(tr.SCHEMES), default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--dense", action="store_true",
                         help="train the dense baseline (no pruning)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint + mask on the test split")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--mask", required=True)
    p_eval.add_argument("--patch", type=int, default=1)
    p_eval.add_argument("--baseline", default=None,
                        help="dense baseline report for the epsilon check")
    p_eval.add_argument("--epsilon", type=float, default=0.1)
    p_eval.add_argument("--data-range", type=float, default=0.0, dest="data_range")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="measure the compacted-inference speedup")
    p_bench.add_argument("--data", required=True)
    p_bench.add_argument("--ckpt", required=True)
    p_bench.add_argument("--mask", required=True)
    p_bench.add_argument("--patch", type=int, default=1)
    p_bench.add_argument("--reps", type=int, default=21)
    p_bench.add_argument("--out", default=None)
    p_bench.set_defaults(func=cmd_bench)

    p_exp = sub.add_parser("export-mask", help="rewrite a mask file in canonical form")
    p_exp.add_argument("--mask", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.set_defaults(func=cmd_export_mask)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EquivalenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, SeriesFormatError, FileNotFoundError, tr.ScheduleError,
            ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
