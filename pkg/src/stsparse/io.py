"""File formats: text matrices, flat configs, manifests and result records.

Matrix files start with a ``rows cols`` header followed by one
space-separated row per line. Floats are written with ``repr`` (the
shortest string that round-trips), so save/load is exact.

Config files are flat ``key = value`` lines with ``#`` comments. The eight
model hyperparameters are mandatory; everything else has a default.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .kernels import load_locations
from .model import Hyperparams

VERSION = "0.1.0"

# Table I keys; a config file must set every one of them.
MODEL_KEYS = ("sigma_x2", "sigma2", "eta", "xi", "ell_w", "ell_sigma", "alpha_w", "alpha_sigma")

PROFILES = ("synthetic", "convoy", "eeg")


class FormatError(ValueError):
    """Malformed matrix or config file; the message names the file and line."""


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

def save_matrix(matrix, path) -> None:
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got {m.ndim} dimensions")
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_matrix(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise FormatError(f"{path}: missing header")
    head = lines[0].split()
    try:
        rows, cols = (int(v) for v in head)
    except ValueError:
        raise FormatError(f"{path}:1: header must be 'rows cols', got {lines[0]!r}") from None
    if rows < 0 or cols < 0:
        raise FormatError(f"{path}:1: negative dimensions")
    body = lines[1:]
    if len(body) > rows:
        raise FormatError(f"{path}:{rows + 2}: header declares {rows} rows but more follow")
    if len(body) < rows:
        raise FormatError(f"{path}:{len(body) + 2}: header declares {rows} rows, "
                          f"found {len(body)}")
    out = np.empty((rows, cols))
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != cols:
            raise FormatError(f"{path}:{i + 2}: expected {cols} values, got {len(parts)}")
        try:
            out[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{i + 2}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Hyperparameters plus everything a CLI run needs besides file paths.

    ``mode``, ``data`` and ``output_dir`` are filled in by the CLI.
    """

    hyper: Hyperparams
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    ratios: list[float] = field(
        default_factory=lambda: [round(0.1 + 0.05 * i, 2) for i in range(10)])
    n: int = 100
    t: int = 50
    ratio: float = 0.3
    n_groups: int = 2
    target_sparsity: float = 0.95
    value_variance: float = 1e4
    noise_variance: float = 0.0
    t_init: int = 10
    block: int = 1
    methods: list[str] = field(default_factory=lambda: ["twolevel", "twolevel_online", "admm"])
    admm_rho: float = 1.0
    admm_max_iters: int = 5000
    admm_grid: int = 5
    admm_holdout_seed: int = 1000
    mode: str | None = None
    data: str | None = None
    output_dir: str | None = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _RUN_KEYS}
        d.update(hyper_to_dict(self.hyper))
        return d


_HYPER_PLUMBING = {
    "tol": float, "max_iter": int, "neg_var_value": float, "normalizer_floor": float,
    "max_precision": float, "z_clip": float, "shared_cov": bool, "mu0_scale": float,
    "neg_var_policy": str, "schedule": str, "kernel": str, "distance_scale": float,
    "cross_axis": str,
}
_RUN_KEYS = {
    "seed": int, "seeds": "ints", "ratios": "floats", "n": int, "t": int, "ratio": float,
    "n_groups": int, "target_sparsity": float, "value_variance": float,
    "noise_variance": float, "t_init": int, "block": int, "methods": "strs",
    "admm_rho": float, "admm_max_iters": int, "admm_grid": int, "admm_holdout_seed": int,
}
_METHODS = ("twolevel", "twolevel_online", "admm")


def _convert(kind, raw: str, key: str, where: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "ints":
            return [int(v) for v in raw.replace(",", " ").split()]
        if kind == "floats":
            return [float(v) for v in raw.replace(",", " ").split()]
        if kind == "strs":
            return raw.replace(",", " ").split()
        return kind(raw)
    except ValueError as exc:
        raise FormatError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    locations = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise FormatError(f"{where}: duplicate key {key!r}")
        if key in MODEL_KEYS:
            values[key] = _convert(float, raw, key, where)
        elif key in _HYPER_PLUMBING:
            values[key] = _convert(_HYPER_PLUMBING[key], raw, key, where)
        elif key in _RUN_KEYS:
            values[key] = _convert(_RUN_KEYS[key], raw, key, where)
        elif key == "locations":
            base = Path(source).parent if source != "<config>" else Path(".")
            locations = load_locations(base / raw)
            values[key] = raw
        else:
            raise FormatError(f"{where}: unknown key {key!r}")
    missing = [k for k in MODEL_KEYS if k not in values]
    if missing:
        raise FormatError(f"{source}: missing mandatory key(s): {', '.join(missing)}")

    hkw = {k: values[k] for k in (*MODEL_KEYS, *_HYPER_PLUMBING) if k in values}
    try:
        hyper = Hyperparams(**hkw, locations=locations)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None
    rkw = {k: values[k] for k in _RUN_KEYS if k in values}
    cfg = RunConfig(hyper, **rkw)
    _check_run(cfg, source)
    return cfg


def _check_run(cfg: RunConfig, source: str) -> None:
    bad = [r for r in [*cfg.ratios, cfg.ratio] if not 0 < r <= 1]
    if bad:
        raise FormatError(f"{source}: undersampling ratios must lie in (0, 1], got {bad}")
    unknown = [m for m in cfg.methods if m not in _METHODS]
    if unknown:
        raise FormatError(f"{source}: unknown method(s) {unknown}; choose from {_METHODS}")
    for name in ("n", "t", "t_init", "block", "n_groups", "admm_grid", "admm_max_iters"):
        if getattr(cfg, name) < 1:
            raise FormatError(f"{source}: {name} must be >= 1")
    if not cfg.seeds:
        raise FormatError(f"{source}: seeds must not be empty")


def parse_config(path) -> RunConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def profile_text(name: str) -> str:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {PROFILES}")
    return resources.files("stsparse").joinpath("profiles", f"{name}.cfg").read_text("utf-8")


def load_profile(name: str = "synthetic") -> RunConfig:
    return parse_config_text(profile_text(name), f"<profile {name}>")


def hyper_to_dict(h: Hyperparams) -> dict:
    out = {}
    for f in fields(h):
        if f.name == "locations":
            continue
        out[f.name] = getattr(h, f.name)
    return out


def config_to_text(cfg: RunConfig) -> str:
    """Serialise a config so that :func:`parse_config_text` gives it back."""
    lines = []
    for key, val in cfg.to_dict().items():
        if isinstance(val, list):
            val = " ".join(repr(v) if isinstance(v, float) else str(v) for v in val)
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# manifests and result records
# ---------------------------------------------------------------------------

def write_manifest(directory, command: str, cfg: RunConfig, inputs: dict, outputs: list[str],
                   extra: dict | None = None, name: str = "manifest.json") -> Path:
    """Record what is needed to re-run a command next to its outputs."""
    manifest = {
        "version": VERSION,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "locations": None if cfg.hyper.locations is None else cfg.hyper.locations.tolist(),
        "inputs": inputs,
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    path = Path(directory) / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def config_from_manifest(manifest: dict) -> RunConfig:
    cfg_dict = dict(manifest["config"])
    locations = manifest.get("locations")
    hkw = {k: cfg_dict.pop(k) for k in list(cfg_dict) if k in MODEL_KEYS or k in _HYPER_PLUMBING}
    hyper = Hyperparams(**hkw, locations=None if locations is None else np.asarray(locations))
    rkw = {k: v for k, v in cfg_dict.items() if k in _RUN_KEYS}
    return RunConfig(hyper, **rkw)


@dataclass
class ResultRecord:
    method: str
    ratio: float
    seed: int
    nmse: float
    f_measure: float
    precision: float
    recall: float
    n_true: int
    n_est: int
    n_both: int
    iterations: int
    converged: bool
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def append_records(path, records) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[ResultRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(ResultRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
