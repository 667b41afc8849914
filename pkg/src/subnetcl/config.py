"""Experiment configuration: flat INI-style files with one level of sections.

Example::

    [experiment]
    mode = til
    seed = 7

    [data]
    kind = gaussian
    n_tasks = 5
    classes = 4
    dim = 16
    separation = 3.0

    [model]
    hidden = 64, 64

    [til]
    capacity = 30
    epochs = 5

A ``summary.json`` written by a previous run can be passed wherever a
config file is expected; its ``config`` block is read instead.
"""
import configparser
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .fscil import FSCILConfig
from .til import TILRunConfig

MODES = ("til", "fscil")
DATA_KINDS = ("gaussian", "pmnist", "idx-split", "csv-split")
_PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels", "train_csv", "test_csv")

_TIL_KEYS = {
    "capacity": float,
    "epochs": int,
    "batch_size": int,
    "optimizer": str,
    "lr": float,
    "mode": str,
    "inference_eps": float,
}
_FSCIL_KEYS = {
    "capacity": float,
    "base_epochs": int,
    "base_lr": float,
    "base_optimizer": str,
    "batch_size": int,
    "inc_epochs": int,
    "inc_lr": float,
    "temperature": float,
}
_SESSION_KEYS = {"base_classes": int, "ways": int, "shots": int, "sessions": int, "reference": float}


@dataclass
class ExperimentConfig:
    mode: str
    seed: int
    data: dict
    hidden: tuple
    til: TILRunConfig = None
    fscil: FSCILConfig = None
    sessions: dict = field(default_factory=dict)
    out: str = None
    source: str = None
    raw: dict = field(default_factory=dict)


def _read_sections(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if "config" not in doc:
            raise ConfigError(f"{path} has no config block")
        return {s: {k: str(v) for k, v in kv.items()} for s, kv in doc["config"].items()}
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def _typed(section, name, spec):
    out = {}
    for key, value in section.items():
        if key not in spec:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        try:
            out[key] = spec[key](value)
        except ValueError:
            raise ConfigError(f"[{name}] {key} = {value!r} is not a valid {spec[key].__name__}") from None
    return out


def _number(value):
    try:
        f = float(value)
    except ValueError:
        return value
    return int(f) if f.is_integer() and "." not in value and "e" not in value.lower() else f


def load_config(path, mode=None, seed=None, capacity=None, method=None, out=None):
    """Read and validate a config; keyword arguments override file values."""
    raw = _read_sections(path)
    exp = raw.setdefault("experiment", {})
    if mode is not None:
        if exp.get("mode", mode) != mode:
            raise ConfigError(f"config is for mode {exp['mode']!r}, not {mode!r}")
        exp["mode"] = mode
    if seed is not None:
        exp["seed"] = str(seed)
    if out is not None:
        exp["out"] = out
    if exp.get("mode") not in MODES:
        raise ConfigError(f"[experiment] mode must be one of {MODES}")
    if "seed" not in exp:
        raise ConfigError("a seed is required ([experiment] seed or --seed)")
    try:
        run_seed = int(exp["seed"])
    except ValueError:
        raise ConfigError(f"seed {exp['seed']!r} is not an integer") from None
    if capacity is not None:
        raw.setdefault(exp["mode"], {})["capacity"] = str(capacity)
    if method is not None:
        if exp["mode"] != "til":
            raise ConfigError("--mode only applies to til runs")
        raw.setdefault("til", {})["mode"] = method

    data = {k: _number(v) for k, v in raw.get("data", {}).items()}
    if data.get("kind") not in DATA_KINDS:
        raise ConfigError(f"[data] kind must be one of {DATA_KINDS}")
    base = os.path.dirname(os.path.abspath(path))
    for key in _PATH_KEYS:
        if key in data:
            p = data[key] if os.path.isabs(str(data[key])) else os.path.join(base, str(data[key]))
            if not os.path.exists(p):
                raise ConfigError(f"[data] {key} path does not exist: {p}")
            data[key] = p
            raw["data"][key] = p
    try:
        hidden = tuple(int(h) for h in raw.get("model", {}).get("hidden", "64,64").split(","))
    except ValueError:
        raise ConfigError("[model] hidden must be a comma-separated list of integers") from None

    cfg = ExperimentConfig(exp["mode"], run_seed, data, hidden, out=exp.get("out"), source=path, raw=raw)
    if cfg.mode == "til":
        cfg.til = TILRunConfig(seed=run_seed, hidden_sizes=hidden, **_typed(raw.get("til", {}), "til", _TIL_KEYS))
    else:
        section = raw.get("fscil", {})
        sess = {k: v for k, v in section.items() if k in _SESSION_KEYS}
        rest = {k: v for k, v in section.items() if k not in _SESSION_KEYS}
        cfg.fscil = FSCILConfig(seed=run_seed, hidden_sizes=hidden, **_typed(rest, "fscil", _FSCIL_KEYS))
        cfg.sessions = _typed(sess, "fscil", _SESSION_KEYS)
    return cfg
