"""``csd`` command line: train, eval, export, sweep, bench.

Exit codes: 0 success, 1 configuration error, 2 training aborted on a
non-finite loss, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import torch

from csd import __version__
from csd import arch
from csd.config import Config, ConfigError, dump_config, from_dict, parse_config
from csd.data import PairedDataset, data_root, synthetic_dataset
from csd.embedding import EmbeddingLoadError, EmbeddingSpec, build_extractor
from csd.evaluation import DATASET_DIRS, benchmark, emit_report
from csd.losses import NonFiniteLossError
from csd.trainer import fit

log = logging.getLogger("csd")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3
SWEEP_AXES = ("strategy", "k", "width")


def _code_version():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(cfg: Config, out_dir, config_file=None, overrides=None, command="train"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "code_version": _code_version(),
        "seed": cfg.trainer.seed,
        "provenance": {"config_file": str(config_file) if config_file else None,
                       "overrides": list(overrides or [])},
        "config": cfg.to_dict(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    (out_dir / "config.yaml").write_text(dump_config(cfg))
    return path


def build_net(cfg: Config, seed=None):
    a = cfg.arch
    return arch.build_backbone(a.base_width, a.n_blocks, a.scale, a.res_scale,
                               seed=cfg.trainer.seed if seed is None else seed)


def build_embedding(cfg: Config):
    e = cfg.embedding
    spec = None
    if e.layers is not None or e.layer_weights is not None:
        if e.layers is None or e.layer_weights is None:
            raise ConfigError(["embedding.layers and embedding.layer_weights go together"])
        spec = EmbeddingSpec(e.layers, e.layer_weights)
    return build_extractor(e.kind, e.weights, spec, seed=e.seed)


def build_datasets(cfg: Config):
    d, scale = cfg.data, cfg.arch.scale
    if d.synthetic:
        train = synthetic_dataset(d.synthetic, d.synthetic_size, scale, seed=cfg.trainer.seed)
        val = synthetic_dataset(cfg.trainer.val_images, d.synthetic_size, scale,
                                seed=cfg.trainer.seed + 1000, name="synthetic-val")
        return train, val
    root = data_root(d.root)
    if root is None:
        raise FileNotFoundError("no data root: set data.root or CSD_DATA_ROOT")
    train = PairedDataset.from_folder(root, DATASET_DIRS.get(d.train_set, d.train_set), scale,
                                      name=d.train_set)
    val = None
    if d.val_set:
        val = PairedDataset.from_folder(root, DATASET_DIRS.get(d.val_set, d.val_set), scale,
                                        name=d.val_set)
    return train, val


def run_training(cfg: Config, out_dir=None, resume=None, config_file=None, overrides=None):
    out_dir = Path(out_dir or cfg.trainer.out_dir)
    write_manifest(cfg, out_dir, config_file, overrides)
    net = build_net(cfg)
    extractor = build_embedding(cfg)
    train, val = build_datasets(cfg)
    return fit(cfg.train_config(), net, train, extractor, val, out_dir=out_dir, resume=resume)


def export(ckpt, r, out):
    """Write a standalone width-``r`` model extracted from ``ckpt``."""
    if not 0 < r <= 1:
        raise ValueError(f"export width must lie in (0, 1], got {r}")
    net, meta = arch.load_checkpoint(ckpt)
    student = arch.extract_student(net, r)
    extra = dict(meta.get("extra", {}), source=str(ckpt))
    return arch.save_checkpoint(student, out, r_exported=meta.get("r_exported", 1.0) * r, **extra)


def _sweep_value(axis, text):
    if axis == "k":
        return int(text)
    if axis == "width":
        return float(text)
    return str(text)


def sweep(base: Config, axis: str, values, out_dir):
    """Sequential runs varying one axis; a failed run is recorded, not fatal."""
    if axis not in SWEEP_AXES:
        raise ConfigError([f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    key = {"strategy": "trainer.strategy", "k": "data.negatives.k", "width": "trainer.width"}[axis]
    rows = []
    for value in values:
        value = _sweep_value(axis, value)
        run_dir = out_dir / f"{axis}-{value}"
        row = {"axis": axis, "value": value, "status": "ok", "psnr_student": "",
               "psnr_teacher": "", "final_loss": "", "error": ""}
        try:
            cfg = from_dict(base.to_dict(), [f"{key}={value}"])
            res = run_training(cfg, run_dir, overrides=[f"{key}={value}"])
            if res.validations:
                row["psnr_student"] = res.validations[-1]["psnr_student"]
                row["psnr_teacher"] = res.validations[-1]["psnr_teacher"]
            if res.history:
                row["final_loss"] = res.history[-1]["loss_total"]
        except Exception as exc:  # keep sweeping
            log.exception("run %s=%s failed", axis, value)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    with open(out_dir / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["axis", "value"])
        w.writeheader()
        w.writerows(rows)
    return rows


def bench(net, widths, size=64, passes=3, warmup=2):
    """Parameter count and CPU latency of a random ``size x size`` input per width."""
    x = torch.rand(1, 3, size, size)
    rows = []
    net.eval()
    with torch.no_grad():
        for r in widths:
            for _ in range(warmup):
                net(x, r)
            times = []
            for _ in range(passes):
                t0 = time.perf_counter()
                net(x, r)
                times.append(time.perf_counter() - t0)
            times.sort()
            rows.append({"width": r, "params": arch.parameter_count(net, r),
                         "ms": times[len(times) // 2] * 1000.0})
    return rows


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _parser():
    p = argparse.ArgumentParser(prog="csd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None)
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field, e.g. trainer.lr0=2e-4")

    t = sub.add_parser("train", help="train teacher and student jointly")
    common(t)
    t.add_argument("--strategy", default=None,
                   choices=["csd", "csd-a", "csd-b", "jt1", "individual", "gt-pos", "ts-separate"])
    t.add_argument("--resume", type=Path, default=None)
    t.add_argument("--out", type=Path, default=None)

    e = sub.add_parser("eval", help="PSNR/SSIM tables for a checkpoint")
    common(e)
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--width", type=_floats, default=None, help="comma-separated widths")
    e.add_argument("--datasets", default=None, help="comma-separated dataset names")
    e.add_argument("--ensemble", action="store_true")
    e.add_argument("--out", type=Path, default=None)

    x = sub.add_parser("export", help="write a standalone sliced model")
    x.add_argument("--ckpt", type=Path, required=True)
    x.add_argument("--width", type=float, required=True)
    x.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("sweep", help="sequential runs over one axis")
    common(s)
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("bench", help="parameter count and latency per width")
    common(b)
    b.add_argument("--ckpt", type=Path, default=None)
    b.add_argument("--width", type=_floats, default=None)
    b.add_argument("--size", type=int, default=64)
    return p


def _run(args):
    if args.command == "export":
        path = export(args.ckpt, args.width, args.out)
        net, _ = arch.load_checkpoint(path)
        print(f"wrote {path} ({arch.parameter_count(net):,} parameters)")
        return

    overrides = list(args.overrides)
    if args.command == "train" and args.strategy:
        overrides.append(f"trainer.strategy={args.strategy}")
    if args.command == "eval":
        if args.width:
            overrides.append(f"eval.widths={args.width}")
        if args.datasets:
            overrides.append(f"eval.datasets=[{args.datasets}]")
        if args.ensemble:
            overrides.append("eval.ensemble=true")
    cfg = parse_config(args.config, overrides)

    if args.command == "train":
        res = run_training(cfg, args.out, args.resume, args.config, overrides)
        if res.validations:
            v = res.validations[-1]
            print(f"student {v['psnr_student']:.3f} dB, teacher {v['psnr_teacher']:.3f} dB")
    elif args.command == "eval":
        net, _ = arch.load_checkpoint(args.ckpt)
        results = benchmark(net, cfg.eval.datasets, cfg.eval.widths, cfg.eval.ensemble,
                            cfg.eval.passes, cfg.eval.warmup, root=cfg.data.root)
        for r in results:
            print(f"{r.dataset:12s} {r.width:5.3g}x  {r.psnr_db:7.3f} dB  {r.ssim:.4f}  "
                  f"{r.params:>11,d} params  {r.ms_per_image:8.2f} ms")
        if results:
            emit_report(results, args.out or cfg.eval.out_dir)
    elif args.command == "sweep":
        rows = sweep(cfg, args.axis, args.values.split(","), args.out)
        for row in rows:
            print(f"{row['axis']}={row['value']}: {row['status']} {row['psnr_student']}")
    elif args.command == "bench":
        net = arch.load_checkpoint(args.ckpt)[0] if args.ckpt else build_net(cfg)
        for row in bench(net, args.width or cfg.eval.widths, args.size):
            print(f"{row['width']:5.3g}x  {row['params']:>11,d} params  {row['ms']:8.2f} ms")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except (ConfigError, arch.ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, EmbeddingLoadError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
