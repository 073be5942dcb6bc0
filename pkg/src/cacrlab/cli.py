"""Command-line runner: ``train``, ``eval``, ``check`` and ``sweep``.

Exit codes: 0 success, 2 configuration or I/O problem, 3 integrity failure
(corrupt checkpoint, config hash mismatch), 4 numerical failure (collapse,
non-finite loss, failing invariant group).
"""

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import checks
from . import config as cfgmod
from .encoder import MlpSpec, load_checkpoint, save_checkpoint
from .errors import ChecksumMismatch, CollapseDetected, ConfigError, NonFiniteLoss, ZeroNorm
from .evaluation import export_embeddings, extract_embeddings, knn_probe, linear_probe
from .trainer import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_NUMERICAL = 4

RUN_RECORD = "run_record.csv"
EVENTS = "events.jsonl"
CHECKPOINT = "checkpoint.bin"
RESOLVED_CONFIG = "config.ini"
PROBE = "probe.json"
EMBEDDINGS = "embeddings.csv"
SUMMARY = "summary.csv"


class IntegrityError(Exception):
    """Checkpoint and config disagree."""


# ---------------------------------------------------------------------------
# library-level runners (shared by the subcommands and the sweep)
# ---------------------------------------------------------------------------

def _json_line(fh, payload):
    fh.write(json.dumps(payload, sort_keys=True) + "\n")


def run_train(cfg, out_dir):
    """Train per ``cfg`` into ``out_dir``; returns ``(params, RunRecord)``."""
    os.makedirs(out_dir, exist_ok=True)
    h = cfg.hash
    with open(os.path.join(out_dir, RESOLVED_CONFIG), "w") as fh:
        fh.write(f"# config_hash = {h}\n")
        fh.write(cfg.to_ini())
    dataset = cfgmod.training_dataset(cfg)
    tc = cfgmod.train_config(cfg)
    events_path = os.path.join(out_dir, EVENTS)
    with open(events_path, "w") as log:
        _json_line(log, {"event": "start", "config_hash": h, "n_train_rows": len(dataset),
                         "class_counts": dataset.class_counts.tolist()})

        def on_epoch(row):
            _json_line(log, dict(row, event="epoch", config_hash=h))
            log.flush()

        try:
            params, record = train(dataset, cfgmod.mlp_spec(cfg), tc, cfgmod.augmentation_spec(cfg), on_epoch)
        except (CollapseDetected, NonFiniteLoss, ZeroNorm) as exc:
            _json_line(log, {"event": "error", "config_hash": h, "error": type(exc).__name__,
                             "message": str(exc)})
            raise
        _json_line(log, {"event": "end", "config_hash": h, "epochs": len(record)})
    record.to_csv(os.path.join(out_dir, RUN_RECORD), config_hash=h)
    save_checkpoint(os.path.join(out_dir, CHECKPOINT), params, h)
    return params, record


def run_eval(cfg, checkpoint_path, out_dir):
    """Probe a checkpoint on the config's probe sets; returns the JSON payload written."""
    params, header = load_checkpoint(checkpoint_path)
    if header.get("config_hash") != cfg.hash:
        raise IntegrityError(f"checkpoint {checkpoint_path} was trained with config hash "
                             f"{header.get('config_hash')!r}, config has {cfg.hash!r}")
    if params.spec != cfgmod.mlp_spec(cfg):
        raise IntegrityError("checkpoint encoder does not match the config's encoder section")
    probe_train, probe_test = cfgmod.probe_datasets(cfg)
    Ztr, ytr = extract_embeddings(params, probe_train)
    Zte, yte = extract_embeddings(params, probe_test)
    C = probe_train.n_classes
    lin = linear_probe(Ztr, ytr, Zte, yte, cfgmod.probe_config(cfg), n_classes=C)
    k = cfg["eval"]["knn_k"]
    knn = knn_probe(Ztr, ytr, Zte, yte, k=min(k, len(ytr)), n_classes=C)
    with open(checkpoint_path, "rb") as fh:
        ckpt_digest = hashlib.sha256(fh.read()).hexdigest()
    payload = {
        "config_hash": cfg.hash,
        "checkpoint_sha256": ckpt_digest,
        "top1_accuracy": lin.top1_accuracy,
        "linear": lin.to_dict(),
        "knn": dict(knn.to_dict(), k=k),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, PROBE), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    export_embeddings(Zte, yte, os.path.join(out_dir, EMBEDDINGS))
    return payload


def _sweep_point(job):
    """Train and evaluate one (point, seed); top-level so a process pool can pickle it."""
    cfg, out_dir = job
    _, record = run_train(cfg, out_dir)
    payload = run_eval(cfg, os.path.join(out_dir, CHECKPOINT), out_dir)
    last = record.rows[-1] if record.rows else {}
    return {
        "linear_top1": payload["linear"]["top1_accuracy"],
        "knn_top1": payload["knn"]["top1_accuracy"],
        "final_loss": last.get("loss", float("nan")),
        "final_entropy": last.get("entropy", float("nan")),
        "config_hash": cfg.hash,
    }


def run_sweep(cfg, grid, out_dir, workers=1):
    """One subdirectory per (grid point, seed) plus ``summary.csv``; returns the summary rows."""
    os.makedirs(out_dir, exist_ok=True)
    jobs, meta = [], []
    for p, point in enumerate(grid.points()):
        for seed in grid.seeds:
            overrides = dict(point)
            overrides["experiment.seed"] = seed
            point_cfg = cfg.with_overrides(overrides)
            jobs.append((point_cfg, os.path.join(out_dir, f"point{p:03d}_seed{seed}")))
            meta.append((p, seed, point))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    keys = [k for k, _ in grid.axes]
    rows = []
    for (p, seed, point), res, (_, sub) in zip(meta, results, jobs):
        row = {"point": p, "seed": seed}
        row.update({k: point[k] for k in keys})
        row.update(res)
        row["directory"] = os.path.basename(sub)
        rows.append(row)
    columns = ["point", "seed"] + keys + ["linear_top1", "knn_top1", "final_loss", "final_entropy",
                                          "config_hash", "directory"]
    with open(os.path.join(out_dir, SUMMARY), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return rows


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _workers():
    raw = os.environ.get("CACR_THREADS", "").strip()
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def cmd_train(args):
    cfg = cfgmod.load_config(args.config)
    out = args.out or cfg.output_dir
    _, record = run_train(cfg, out)
    print(f"trained {len(record)} epochs; outputs in {out} (config hash {cfg.hash[:12]})")
    return EXIT_OK


def cmd_eval(args):
    cfg = cfgmod.load_config(args.config)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    payload = run_eval(cfg, args.checkpoint, out)
    print(f"linear top1 {payload['linear']['top1_accuracy']:.4f}, "
          f"knn top1 {payload['knn']['top1_accuracy']:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_check(args):
    results = checks.run_checks(args.group or None)
    failed = [n for n, (ok, _) in results.items() if not ok]
    if failed:
        print(f"{len(failed)} of {len(results)} groups failed: {', '.join(failed)}")
        return EXIT_NUMERICAL
    print(f"all {len(results)} groups passed")
    return EXIT_OK


def cmd_sweep(args):
    cfg = cfgmod.load_config(args.config)
    grid = cfgmod.load_grid(args.grid, base_seed=cfg.seed)
    out = args.out or cfg.output_dir
    workers = args.jobs if args.jobs else _workers()
    rows = run_sweep(cfg, grid, out, workers)
    print(f"{len(rows)} runs; summary in {os.path.join(out, SUMMARY)}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="cacrlab", description="Contrastive attraction/repulsion experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an encoder")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: [experiment] output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="linear and k-NN probes of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the invariant suite")
    c.add_argument("--group", action="append", choices=sorted(checks.GROUPS),
                   help="run only this group (repeatable)")
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("sweep", help="train and evaluate every point of a grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", help="output directory (default: [experiment] output_dir)")
    s.add_argument("--jobs", type=int, default=0, help="worker processes (default: CACR_THREADS or 1)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ChecksumMismatch, IntegrityError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (CollapseDetected, NonFiniteLoss, ZeroNorm) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # data too small for the batch size and similar setup problems
        print(f"invalid setup: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
