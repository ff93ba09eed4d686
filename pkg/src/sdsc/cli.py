"""Command-line entry point: ``python -m sdsc <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .compressor import MODES, DivergenceError, Trainer
from .config import ConfigError, RunConfig, build_model, config_from_dict, load_config, load_datasets
from .models import QuantModel
from .preserve import PreservationSet, build_preservation_set

log = logging.getLogger("sdsc")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
HIST_BINS = 101
SWEEP_AXES = {"batch_size": ("compression.batch_size", int),
              "learning_rate": ("compression.learning_rate", float),
              "b0": ("compression.b0", float),
              "n_layers": (None, int)}


# -------------------------------------------------------------------- config


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(mode=getattr(args, "mode", None), seed=args.seed)


def _out_dir(args, default: str = "runs") -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_effective_config(cfg: RunConfig, out: Path) -> None:
    (out / "effective_config.json").write_text(cfg.dumps(), encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_preserve(cfg: RunConfig, out: Path, checkpoint: str | None = None) -> Path:
    """Warm up (or load a warmed-up checkpoint) and write the preservation set."""
    train, test = load_datasets(cfg)
    if checkpoint:
        model = load_checkpoint(checkpoint)
        model.trained = True
    else:
        model = build_model(cfg)
        Trainer(model, train, test, cfg.compression, mode="safe").warm_up()
    p = cfg.preservation
    pset = build_preservation_set(model, train, p.rho, tuple(p.quotas), seed=cfg.seed)
    path = out / "preservation.txt"
    pset.save(path)
    write_effective_config(cfg, out)
    counts = ", ".join(f"{k}={v}" for k, v in pset.counts().items())
    print(f"preservation set: {len(pset)} of {len(train)} samples ({counts}) -> {path}")
    return path


def run_training(cfg: RunConfig, out: Path, quiet: bool = False) -> dict:
    """One run of the configured mode; writes metrics.csv, checkpoint.sdsc and the config echo."""
    train, test = load_datasets(cfg)
    model = build_model(cfg)
    write_effective_config(cfg, out)
    trainer = Trainer(model, train, test, cfg.compression, mode=cfg.mode, csv_path=out / "metrics.csv")
    trainer.warm_up()
    if cfg.mode == "safe":
        p = cfg.preservation
        pset = PreservationSet.load(p.path) if p.path else \
            build_preservation_set(model, train, p.rho, tuple(p.quotas), seed=cfg.seed)
        pset.save(out / "preservation.txt")
        trainer.set_preservation(pset)
    trainer.run()
    save_checkpoint(model, out / "checkpoint.sdsc", seed=cfg.seed, step=trainer.step)
    last = trainer.metrics[-1]
    summary = {"mode": cfg.mode, "seed": cfg.seed, "test_metric": last.test_metric, "q_bits": last.q_bits,
               "model_bytes": last.model_bytes, "quantized_bytes": model.quantized_bytes(),
               "pruned_count": last.pruned_count, "restored_count": last.restored_count}
    if not quiet:
        metric = "test accuracy %" if cfg.task == "vision" else "test loss (nats)"
        print(f"{cfg.mode}: {metric} {last.test_metric:.4f}  Q {last.q_bits:.1f} bits  "
              f"model {last.model_bytes:.1f} B  quantized {summary['quantized_bytes']:.1f} B")
    return summary


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    return run_training(cfg, out)


COMPARE_COLUMNS = ["mode", "test_metric", "model_bytes", "bytes_ratio", "quantized_bytes", "quantized_ratio"]


def compare_rows(summaries: dict[str, dict]) -> list[dict]:
    base = summaries["baseline"]
    rows = []
    for mode in MODES:
        s = summaries[mode]
        rows.append({"mode": mode, "test_metric": s["test_metric"], "model_bytes": s["model_bytes"],
                     "bytes_ratio": s["model_bytes"] / base["model_bytes"],
                     "quantized_bytes": s["quantized_bytes"],
                     "quantized_ratio": s["quantized_bytes"] / base["quantized_bytes"]})
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'mode':<10}{'test':>10}{'bytes':>14}{'ratio':>8}{'q-bytes':>12}{'q-ratio':>9}"]
    for r in rows:
        lines.append(f"{r['mode']:<10}{r['test_metric']:>10.4f}{r['model_bytes']:>14.1f}{r['bytes_ratio']:>8.3f}"
                     f"{r['quantized_bytes']:>12.1f}{r['quantized_ratio']:>9.3f}")
    return "\n".join(lines)


def cmd_compare(cfg: RunConfig, out: Path) -> list[dict]:
    summaries = {}
    for mode in MODES:
        mode_dir = out / mode
        mode_dir.mkdir(parents=True, exist_ok=True)
        summaries[mode] = run_training(cfg.with_overrides(mode=mode), mode_dir, quiet=True)
    rows = compare_rows(summaries)
    _write_rows(out / "compare.csv", COMPARE_COLUMNS, rows)
    print(format_table(rows))
    return rows


def parse_axes(specs: list[str]) -> dict[str, list]:
    axes = {}
    for spec in specs:
        name, sep, values = spec.partition("=")
        if not sep or name not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)} as name=v1,v2; got {spec!r}")
        cast = SWEEP_AXES[name][1]
        try:
            axes[name] = [cast(v) for v in values.split(",") if v]
        except ValueError as exc:
            raise ConfigError(f"bad value on axis {name}: {exc}") from exc
        if not axes[name]:
            raise ConfigError(f"axis {name} has no values")
    return axes


def sweep_cells(cfg: RunConfig, axes: dict[str, list]) -> list[tuple[dict, RunConfig]]:
    names = list(axes)
    cells = []
    for index, values in enumerate(itertools.product(*(axes[n] for n in names))):
        point = dict(zip(names, values))
        d = cfg.to_dict()
        d["seed"] = cfg.seed + index
        for name, value in point.items():
            key = SWEEP_AXES[name][0]
            if name == "n_layers":
                if cfg.task != "vision":
                    d["model"]["n_blocks"] = value
                else:
                    chans = list(d["model"]["channels"])
                    d["model"]["n_conv_layers"] = value
                    d["model"]["channels"] = [chans[min(i, len(chans) - 1)] for i in range(value)]
            else:
                section, leaf = key.split(".")
                d[section][leaf] = value
        cells.append((point, config_from_dict(d)))
    return cells


def _sweep_cell(job) -> dict:
    index, point, cfg_dict, out = job
    cfg = config_from_dict(cfg_dict)
    cell_dir = Path(out) / f"cell{index:03d}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    summary = run_training(cfg, cell_dir, quiet=True)
    return {"cell": index, **point, **summary}


SWEEP_METRICS = ["test_metric", "q_bits", "model_bytes", "quantized_bytes", "pruned_count", "restored_count"]


def cmd_sweep(cfg: RunConfig, axes: dict[str, list], out: Path) -> list[dict]:
    cells = sweep_cells(cfg, axes)
    jobs = [(i, point, c.to_dict(), str(out)) for i, (point, c) in enumerate(cells)]
    workers = max(1, int(os.environ.get("SDSC_THREADS", "1")))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]
    mean = {"cell": "mean", **{a: "" for a in axes}, "mode": cfg.mode, "seed": ""}
    for key in SWEEP_METRICS:
        mean[key] = float(np.mean([r[key] for r in rows]))
    columns = ["cell", *axes, "mode", "seed", *SWEEP_METRICS]
    _write_rows(out / "sweep.csv", columns, rows + [mean])
    print(f"{len(rows)} cells -> {out / 'sweep.csv'}; mean test metric {mean['test_metric']:.4f}")
    return rows + [mean]


def quantized_values(model: QuantModel) -> list[np.ndarray]:
    """Post-quantization values of every quantized tensor, one array per tensor."""
    if model.quantize_enabled:
        return [qp.quantized_array() for qp in model.quant_params]
    return [qp.weights.data.copy() for qp in model.quant_params]


def silverman_bandwidth(values: np.ndarray) -> float:
    n = values.size
    sd = float(values.std(ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


def histogram_table(values: np.ndarray, bins: int = HIST_BINS) -> list[dict]:
    """Symmetric-range histogram with a Gaussian KDE evaluated at bin centers."""
    v = np.asarray(values, dtype=np.float64).ravel()
    reach = float(np.abs(v).max()) if v.size else 0.0
    if reach == 0.0:
        reach = 1.0
    edges = np.linspace(-reach, reach, bins + 1)
    counts, _ = np.histogram(v, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    h = silverman_bandwidth(v)
    if h <= 0:
        # all values identical: the density is a point mass, spread over one bin
        h = edges[1] - edges[0]
    density = np.zeros(bins)
    for start in range(0, v.size, 4096):
        chunk = v[start:start + 4096]
        z = (centers[:, None] - chunk[None, :]) / h
        density += np.exp(-0.5 * z * z).sum(axis=1)
    density /= v.size * h * math.sqrt(2 * math.pi)
    return [{"bin_center": float(c), "count": int(k), "density": float(d)}
            for c, k, d in zip(centers, counts, density)]


def cmd_hist(checkpoint: str, out: Path) -> Path:
    model = load_checkpoint(checkpoint)
    values = np.concatenate([a.ravel() for a in quantized_values(model)])
    rows = histogram_table(values)
    path = out / "histogram.csv"
    _write_rows(path, ["bin_center", "count", "density"], rows)
    print(f"{values.size} weights, {int(np.count_nonzero(values))} nonzero -> {path}")
    return path


def size_report(model: QuantModel) -> list[dict]:
    sm = model.size_model()
    bs = [qp.b.data for qp in model.quant_params]
    z = sm.layer_sizes(bs)
    rows = []
    for qp, zl, entry in zip(model.quant_params, z, model._raw_entries()):
        live = qp.live
        rows.append({"tensor": qp.name, "groups": qp.n_groups, "live": int(live.sum()),
                     "mean_b": float(qp.b.data[live].mean()) if live.any() else 0.0,
                     "z_bits": float(zl),
                     "bytes": float(np.sum(np.ceil(np.maximum(entry.b, 0)) / 8 * entry.elements) + 4 * live.sum())})
    return rows


def cmd_size_report(model: QuantModel) -> None:
    print(f"{'tensor':<16}{'groups':>8}{'live':>6}{'mean b':>9}{'z (bits)':>14}{'bytes':>12}")
    for r in size_report(model):
        print(f"{r['tensor']:<16}{r['groups']:>8}{r['live']:>6}{r['mean_b']:>9.3f}{r['z_bits']:>14.1f}{r['bytes']:>12.1f}")
    print(f"Q = {model.q_value():.1f} bits   model bytes = {model.bytes():.1f}   "
          f"quantized bytes = {model.quantized_bytes():.1f}   parameters = {model.param_count()}")


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out-dir", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sdsc", description="Learned-bit-depth compression with preservation-set checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preserve", parents=[common], help="build and save a preservation set")
    p.add_argument("--checkpoint", help="warmed-up checkpoint to score with (skips warm-up)")
    p = sub.add_parser("train", parents=[common], help="run one mode, write checkpoint and metrics")
    p.add_argument("--mode", choices=MODES)
    sub.add_parser("compare", parents=[common], help="run baseline, unsafe and safe; tabulate")
    p = sub.add_parser("sweep", parents=[common], help="Cartesian sweep over config axes")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help=f"one of {sorted(SWEEP_AXES)}; repeatable")
    p = sub.add_parser("hist", parents=[common], help="histogram of quantized weights")
    p.add_argument("checkpoint")
    p = sub.add_parser("size-report", parents=[common], help="per-tensor size breakdown")
    p.add_argument("checkpoint", nargs="?", help="checkpoint (default: fresh model from --config)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "hist":
            cmd_hist(args.checkpoint, _out_dir(args))
            return EXIT_OK
        if args.command == "size-report":
            model = load_checkpoint(args.checkpoint) if args.checkpoint else build_model(resolve_config(args))
            cmd_size_report(model)
            return EXIT_OK
        cfg = resolve_config(args)
        out = _out_dir(args)
        if args.command == "preserve":
            cmd_preserve(cfg, out, args.checkpoint)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "compare":
            cmd_compare(cfg, out)
        elif args.command == "sweep":
            cmd_sweep(cfg, parse_axes(args.axis), out)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
