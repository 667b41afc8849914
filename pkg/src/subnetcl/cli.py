"""Command-line entry point: ``subnetcl {til,fscil,encode-masks,analyze,report}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.  On
failure a single JSON line ``{"error": ..., "message": ...}`` goes to stderr.
"""
import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .analysis import ABLATION_CATEGORIES, ablate_reused, lipschitz_probe, mask_correlation, matrix_csv
from .codec import capacity, decode_masks, encode_masks, read_bundle, write_bundle
from .config import load_config
from .data import fewshot_sessions, gaussian_dataset, load_csv, load_idx, permuted_tasks, split_tasks, synth_gaussian_tasks
from .errors import ConfigError, SubnetError
from .fscil import run_fscil, session_row
from .masks import REUSE_CATEGORIES, mask_stats
from .report import (
    accuracy_matrix_csv,
    capacity_curve_csv,
    emit_report,
    fscil_metrics_csv,
    load_masks,
    load_store,
    prepare_output,
    save_masks,
    save_soft_mask,
    save_store,
    sessions_csv,
    til_metrics_csv,
    verify_manifest,
    write_manifest,
)
from .til import run_sequence


def _require(data, *keys):
    missing = [k for k in keys if k not in data]
    if missing:
        raise ConfigError(f"[data] is missing {', '.join(missing)}")
    return [data[k] for k in keys]


def _limit(ds, n):
    return ds if not n else ds.subset(np.arange(min(int(n), len(ds))))


def _load_pair(data):
    if "train_images" in data:
        ti, tl, vi, vl = _require(data, "train_images", "train_labels", "test_images", "test_labels")
        n = int(data.get("n_classes", 10))
        train, test = load_idx(ti, tl, n), load_idx(vi, vl, n)
    else:
        tr, te = _require(data, "train_csv", "test_csv")
        train = load_csv(tr)
        test = load_csv(te, n_classes=train.n_classes)
    return _limit(train, data.get("limit_train")), _limit(test, data.get("limit_test"))


def build_tasks(cfg):
    data = cfg.data
    kind = data["kind"]
    if kind == "gaussian":
        n_tasks, classes, dim, sep = _require(data, "n_tasks", "classes", "dim", "separation")
        return synth_gaussian_tasks(n_tasks, classes, dim, sep, cfg.seed, int(data.get("samples_per_class", 100)))
    train, test = _load_pair(data)
    if kind == "pmnist":
        (n_tasks,) = _require(data, "n_tasks")
        return permuted_tasks(train, test, int(n_tasks), cfg.seed)
    (per_task,) = _require(data, "classes_per_task")
    return split_tasks(train, test, int(per_task), cfg.seed if data.get("shuffle_classes") else None)


def build_sessions(cfg):
    data = cfg.data
    if data["kind"] == "gaussian":
        classes, dim, sep = _require(data, "classes", "dim", "separation")
        train, test = gaussian_dataset(classes, dim, sep, cfg.seed, int(data.get("samples_per_class", 100)))
    else:
        train, test = _load_pair(data)
    s = cfg.sessions
    for key in ("base_classes", "ways", "shots"):
        if key not in s:
            raise ConfigError(f"[fscil] is missing {key}")
    return fewshot_sessions(train, test, s["base_classes"], s["ways"], s["shots"], cfg.seed, s.get("sessions"))


def _summary(cfg, extra):
    doc = {"tool": "subnetcl", "version": __version__, "mode": cfg.mode, "seed": cfg.seed, "config": cfg.raw}
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_til(args):
    cfg = load_config(args.config, mode="til", seed=args.seed, capacity=args.capacity, method=args.mode, out=args.out)
    out = prepare_output(cfg.out or "run", args.force)
    stream = build_tasks(cfg)
    start = time.perf_counter()
    result = run_sequence(stream.tasks, cfg.til)
    T = len(stream)
    save_masks(os.path.join(out, "masks"), result.masks)
    write_bundle(os.path.join(out, "bundle.wsnt"), encode_masks(result.masks))
    save_store(os.path.join(out, "store.npz"), result.store)
    metrics = {k: v for k, v in result.metrics.items()}
    summary = _summary(
        cfg,
        {
            "metrics": metrics,
            "capacity": vars(result.capacity),
            "stream": stream.descriptor,
            "timings": {"per_task_seconds": result.timings, "total_seconds": time.perf_counter() - start},
        },
    )
    emit_report(
        {
            "summary.json": summary,
            "accuracy_matrix.csv": accuracy_matrix_csv(result.accuracy, T),
            "metrics.csv": til_metrics_csv(metrics),
            "capacity_curve.csv": capacity_curve_csv(result.capacity_curve),
        },
        out,
    )
    print(f"til: ACC={metrics['ACC']:.4f} BWT={metrics['BWT']:.4f} CAP={metrics['CAP']:.4f} -> {out}")
    return 0


def cmd_fscil(args):
    cfg = load_config(args.config, mode="fscil", seed=args.seed, capacity=args.capacity, out=args.out)
    out = prepare_output(cfg.out or "run", args.force)
    sessions = build_sessions(cfg)
    start = time.perf_counter()
    result = run_fscil(sessions, cfg.fscil)
    row = session_row(result.accuracies, cfg.sessions.get("reference"))
    save_store(os.path.join(out, "store.npz"), result.store)
    save_soft_mask(os.path.join(out, "soft_mask.npz"), result.soft)
    summary = _summary(
        cfg,
        {
            "sessions": row,
            "base_accuracies": result.base_accuracies,
            "novel_accuracies": result.novel_accuracies,
            "base_head_accuracy": result.base_head_accuracy,
            "timings": {"total_seconds": time.perf_counter() - start},
        },
    )
    emit_report(
        {"summary.json": summary, "sessions.csv": sessions_csv(row), "metrics.csv": fscil_metrics_csv(result)},
        out,
    )
    print("fscil: " + " ".join(f"{v:.2f}" for k, v in row.items() if k.startswith("session_")) + f" -> {out}")
    return 0


def cmd_encode(args):
    if not os.path.exists(args.inp):
        raise ConfigError(f"input not found: {args.inp}")
    if args.decode:
        bundle = read_bundle(args.inp)
        shapes = None
        if args.layout:
            with open(args.layout, encoding="utf-8") as fh:
                shapes = [tuple(s) for s in json.load(fh)["shapes"]]
        masks = decode_masks(bundle, shapes)
        save_masks(args.out, masks)
        print(f"decoded {len(masks)} masks -> {args.out}")
        return 0
    masks = load_masks(args.inp)
    bundle = encode_masks(masks)
    size = write_bundle(args.out, bundle)
    report = capacity(masks, bundle)
    print(
        f"encoded {len(masks)} masks: {bundle.payload_bits} payload bits, {size} bytes, "
        f"compression rate {report.compression_rate:.4f} -> {args.out}"
    )
    return 0


def _run_config(run_dir):
    path = os.path.join(run_dir, "summary.json")
    if not os.path.exists(path):
        raise ConfigError(f"run directory has no summary.json: {run_dir}")
    return load_config(path)


def cmd_analyze(args):
    run_dir = args.inp
    cfg = _run_config(run_dir)
    if cfg.mode != "til":
        raise ConfigError("analyze works on til runs")
    masks = load_masks(os.path.join(run_dir, "masks"))
    store = load_store(os.path.join(run_dir, "store.npz"))
    out = prepare_output(args.out or os.path.join(run_dir, "analysis"), args.force)
    stream = build_tasks(cfg)
    T = len(masks)
    corr = mask_correlation(masks)
    reuse_rows = []
    for t in range(1, T + 1):
        r = mask_stats(masks, t)
        reuse_rows.append(",".join([str(t), *(f"{getattr(r, k):.6f}" for k in REUSE_CATEGORIES)]))
    reuse = "task," + ",".join(REUSE_CATEGORIES) + "\n" + "\n".join(reuse_rows) + "\n"
    ablation = ["task," + ",".join(ABLATION_CATEGORIES)]
    for t in range(1, T + 1):
        test = stream[t - 1].test
        accs = [ablate_reused(store, masks, t, c, test.features, test.labels) for c in ABLATION_CATEGORIES]
        ablation.append(",".join([str(t), *(f"{a:.6f}" for a in accs)]))
    test = stream[T - 1].test
    probe = lipschitz_probe(
        store, masks[T - 1], args.scales, args.pairs, cfg.seed, task=T, X=test.features[:256], y=test.labels[:256]
    )
    lines = ["scale,pair,masked_ratio,dense_ratio"]
    lines += [f"{r['scale']:g},{r['pair']},{r['masked_ratio']:.6f},{r['dense_ratio']:.6f}" for r in probe.rows]
    emit_report(
        {
            "correlation.csv": matrix_csv(corr.values),
            "reuse.csv": reuse,
            "ablation.csv": "\n".join(ablation) + "\n",
            "lipschitz.csv": "\n".join(lines) + "\n",
        },
        out,
    )
    print(f"analysis of {T} tasks -> {out}")
    return 0


def cmd_report(args):
    run_dir = args.inp
    cfg = _run_config(run_dir)
    if os.path.exists(os.path.join(run_dir, "manifest.json")):
        bad = verify_manifest(run_dir)
        if bad:
            raise SubnetError(f"files changed since the run: {', '.join(bad)}")
    with open(os.path.join(run_dir, "metrics.csv"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    if cfg.mode == "fscil":
        with open(os.path.join(run_dir, "sessions.csv"), encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    if args.rewrite_manifest:
        write_manifest(run_dir)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="subnetcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("til", cmd_til), ("fscil", cmd_fscil)):
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--force", action="store_true")
        p.add_argument("--capacity", type=float)
        if name == "til":
            p.add_argument("--mode", choices=("wsn", "softnet"))
        p.set_defaults(func=fn, mode=None)

    p = sub.add_parser("encode-masks", help="pack a mask directory into a .wsnt bundle (or --decode)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--decode", action="store_true")
    p.add_argument("--layout", help="layout.json giving layer shapes when decoding")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("analyze", help="mask correlations, reuse, ablations, smoothness probe")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--scales", type=float, nargs="+", default=[1e-3, 1e-2, 1e-1])
    p.add_argument("--pairs", type=int, default=5)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="verify a run directory and print its metrics")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--rewrite-manifest", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "exit": code}) + "\n")
    return code


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    threads = os.environ.get("SUBNETCL_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(int(threads)):
                return args.func(args)
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except (SubnetError, OSError) as exc:
        return _fail(type(exc).__name__, exc, 1)


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
