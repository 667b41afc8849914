"""Run artifacts: atomic file writes, mask/store persistence, reports, manifests."""
import csv
import io
import json
import os
import tempfile
import zlib

import numpy as np

from .errors import ConfigError
from .masks import TaskMask
from .nn import DenseLayer, Head, ScoredParamStore

MANIFEST = "manifest.json"


class OutputExistsError(ConfigError):
    """Output directory already holds a run and ``force`` was not given."""


def write_atomic(path, data):
    """Write bytes or text to ``path`` via a temp file and rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _npz_bytes(**arrays):
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def prepare_output(directory, force=False):
    """Create ``directory``; refuse to reuse a non-empty one unless ``force``."""
    if os.path.isdir(directory) and os.listdir(directory) and not force:
        raise OutputExistsError(f"output directory {directory} is not empty; pass --force to overwrite")
    os.makedirs(directory, exist_ok=True)
    return directory


def save_masks(directory, masks):
    os.makedirs(directory, exist_ok=True)
    for t, mask in enumerate(masks, start=1):
        arrays = {f"layer_{i}": np.asarray(m, dtype=np.uint8) for i, m in enumerate(mask.layers)}
        write_atomic(os.path.join(directory, f"task_{t:03d}.npz"), _npz_bytes(**arrays))
    layout = {
        "num_tasks": len(masks),
        "shapes": [list(s) for s in masks[0].shapes] if masks else [],
        "capacity": masks[0].capacity if masks else None,
    }
    write_atomic(os.path.join(directory, "layout.json"), json.dumps(layout, indent=2, sort_keys=True) + "\n")


def load_layout(directory):
    path = os.path.join(directory, "layout.json")
    if not os.path.exists(path):
        raise ConfigError(f"mask directory {directory} has no layout.json")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_masks(directory):
    layout = load_layout(directory)
    masks = []
    for t in range(1, layout["num_tasks"] + 1):
        path = os.path.join(directory, f"task_{t:03d}.npz")
        if not os.path.exists(path):
            raise ConfigError(f"missing mask file {path}")
        with np.load(path) as npz:
            layers = [npz[f"layer_{i}"].astype(bool) for i in range(len(layout["shapes"]))]
        masks.append(TaskMask(layers, layout["capacity"] if layout["capacity"] is not None else 100.0))
    return masks


def save_store(path, store):
    arrays = {}
    for i, layer in enumerate(store.layers):
        arrays[f"layer{i}_weight"] = layer.weight
        arrays[f"layer{i}_bias"] = layer.bias
        arrays[f"layer{i}_score"] = layer.score
    for task, head in store.heads.items():
        arrays[f"head_{task}_weight"] = head.weight
        arrays[f"head_{task}_bias"] = head.bias
    arrays["meta"] = np.array([len(store.layers), store.rng_seed, store.version], dtype=np.int64)
    write_atomic(path, _npz_bytes(**arrays))


def save_soft_mask(path, soft):
    arrays = {f"values_{i}": v for i, v in enumerate(soft.layers)}
    arrays.update({f"major_{i}": m for i, m in enumerate(soft.major)})
    write_atomic(path, _npz_bytes(**arrays))


def load_store(path):
    with np.load(path) as npz:
        n_layers, seed, version = (int(v) for v in npz["meta"])
        layers = [
            DenseLayer(npz[f"layer{i}_weight"], npz[f"layer{i}_bias"], npz[f"layer{i}_score"]) for i in range(n_layers)
        ]
        heads = {}
        for key in npz.files:
            if key.startswith("head_") and key.endswith("_weight"):
                task = key[len("head_") : -len("_weight")]
                task = int(task) if task.lstrip("-").isdigit() else task
                heads[task] = Head(npz[key], npz[f"head_{task}_bias"])
    return ScoredParamStore(layers, heads, seed, version)


def _csv(rows, header):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def accuracy_matrix_csv(A, T):
    rows = []
    for j in range(1, T + 1):
        rows.append([j, *(_fmt(A.entries.get((j, i))) for i in range(1, T + 1))])
    rows.append(["random", *(_fmt(A.random.get(i)) for i in range(1, T + 1))])
    return _csv(rows, ["after_task", *(f"task_{i}" for i in range(1, T + 1))])


def til_metrics_csv(metrics):
    cols = ["ACC", "CAP", "FWT", "BWT"]
    return _csv([[_fmt(metrics.get(c)) for c in cols]], cols)


def capacity_curve_csv(curve):
    rows = [
        [t, _fmt(1.0 - r.sparsity), _fmt(r.sparsity), _fmt(r.compression_rate), _fmt(r.cap_formula), _fmt(r.cap_measured), r.payload_bits]
        for t, r in enumerate(curve, start=1)
    ]
    header = ["task", "used_fraction", "sparsity", "compression_rate", "cap_formula", "cap_measured", "payload_bits"]
    return _csv(rows, header)


def fscil_metrics_csv(result):
    novel = result.novel_accuracies[-1]
    row = [_fmt(result.accuracies[-1]), _fmt(result.base_accuracies[-1]), _fmt(novel), _fmt(result.base_head_accuracy)]
    return _csv([row], ["ACC", "BASE_ACC", "NOVEL_ACC", "BASE_HEAD_ACC"])


def sessions_csv(row, method="SoftNet"):
    header = ["method", *row]
    values = [method, *("" if v is None else f"{v:.2f}" for v in row.values())]
    return _csv([values], header)


def write_manifest(directory):
    """List every file under ``directory`` with its size and CRC32."""
    entries = []
    for root, _, files in os.walk(directory):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, directory)
            if rel == MANIFEST or name.startswith(".tmp-"):
                continue
            with open(path, "rb") as fh:
                data = fh.read()
            entries.append({"path": rel.replace(os.sep, "/"), "size": len(data), "crc32": f"{zlib.crc32(data):08x}"})
    entries.sort(key=lambda e: e["path"])
    write_atomic(os.path.join(directory, MANIFEST), json.dumps({"files": entries}, indent=2) + "\n")
    return entries


def verify_manifest(directory):
    """Names of files whose size or CRC no longer match the manifest."""
    with open(os.path.join(directory, MANIFEST), encoding="utf-8") as fh:
        entries = json.load(fh)["files"]
    bad = []
    for e in entries:
        path = os.path.join(directory, e["path"])
        if not os.path.exists(path):
            bad.append(e["path"])
            continue
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) != e["size"] or f"{zlib.crc32(data):08x}" != e["crc32"]:
            bad.append(e["path"])
    return bad


def emit_report(outputs, directory):
    """Write every text artifact in ``outputs`` ({relative name: str/bytes}) plus the manifest."""
    for name, data in outputs.items():
        write_atomic(os.path.join(directory, name), data)
    return write_manifest(directory)
