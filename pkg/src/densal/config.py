"""Run configuration: one YAML file of documented keys.

Every key has a default and a validity check; ``KEYS`` is the single source
for both and is rendered into the README table by ``describe()``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _frac(x):
    return 0 <= x <= 1


def _frac_open(x):
    return 0 <= x < 1


def _ints_asc(x):
    return isinstance(x, list) and all(isinstance(i, int) and i >= 0 for i in x) and x == sorted(x)


def _widths(x):
    return isinstance(x, list) and len(x) >= 2 and all(isinstance(i, int) and i >= 2 for i in x)


def _odd(x):
    return x >= 1 and x % 2 == 1


# (section, key): (default, check, range text, description)
KEYS = {
    ("paths", "workdir"): ("run", lambda x: isinstance(x, str) and x != "", "path",
                           "root of all artifacts; relative to the config file"),
    ("corpus", "seed"): (0, _nonneg, ">= 0", "corpus generator seed"),
    ("corpus", "n_blocks"): (126, lambda x: x >= 3, ">= 3", "number of labelled synthetic blocks"),
    ("corpus", "block_pixels"): (64, lambda x: x >= 32, ">= 32", "block side in 10 m pixels"),
    ("corpus", "acquisitions"): (2, lambda x: x >= 1, ">= 1", "acquisitions per block (late-fused)"),
    ("corpus", "cloud_fraction"): (0.05, _frac, "[0, 1]", "cloud cover of cloudy acquisitions"),
    ("corpus", "n_train"): (10, lambda x: x >= 1, ">= 1", "base training blocks"),
    ("corpus", "n_val"): (10, lambda x: x >= 1, ">= 1", "validation blocks"),
    ("model", "hidden"): ([32, 32], _widths, ">= 2 layers, widths >= 2", "hidden layer widths; last is the embedding tap"),
    ("model", "context"): (3, _odd, "odd >= 1", "context window side in pixels"),
    ("model", "dropout_rate"): (0.1, _frac_open, "[0, 1)", "dropout after each hidden layer"),
    ("train", "learning_rate"): (3e-3, _pos, "> 0", "Adam step size"),
    ("train", "batch_size"): (16, lambda x: x >= 1, ">= 1", "patches per step"),
    ("train", "epochs"): (30, lambda x: x >= 1, ">= 1", "training epochs"),
    ("train", "seed"): (0, _nonneg, ">= 0", "seed of ensemble member 0"),
    ("train", "patch_size"): (16, lambda x: x >= 1, ">= 1", "training patch side in pixels"),
    ("train", "attention_epochs"): (5, lambda x: x >= 1, ">= 1", "epochs for the location attention"),
    ("encoder", "scales"): (16, lambda x: x >= 2, ">= 2", "number of wavelengths"),
    ("encoder", "lambda_min"): (100.0, _pos, "> 0", "shortest wavelength, meters"),
    ("encoder", "lambda_max"): (1_000_000.0, _pos, "> lambda_min", "longest wavelength, meters"),
    ("acquisition", "region_side"): (32, lambda x: x >= 1, "1..block_pixels", "region side in pixels"),
    ("acquisition", "q"): (100_000, lambda x: x >= 1, ">= 1", "candidate pool size"),
    ("acquisition", "B"): (50, lambda x: x >= 1, "1..q", "annotation budget"),
    ("acquisition", "T"): (5, lambda x: x >= 1, ">= 1", "ensemble members"),
    ("acquisition", "shard_count"): (4, lambda x: x >= 1, ">= 1", "number of shards"),
    ("acquisition", "strip_width_m"): (0.0, _nonneg, ">= 0", "allocate B over x-strips of this width; 0 = one strip"),
    ("acquisition", "selection_seed"): (0, _nonneg, ">= 0", "k-means seed"),
    ("clouds", "train_max"): (0.5, _frac, "[0, 1]", "max cloud probability for training pixels"),
    ("clouds", "infer_max"): (0.1, _frac, "[0, 1]", "max cloud probability for inference/validation"),
    ("bench", "budgets"): ([5, 10, 15], _ints_asc, "ascending ints >= 0", "annotation budgets of the sweep"),
    ("bench", "repetitions"): (5, lambda x: x >= 1, ">= 1", "seeds for naive/manual strategies"),
    ("bench", "eval_members"): (1, lambda x: x >= 1, ">= 1", "models averaged when evaluating a training set"),
}


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    def __getitem__(self, section) -> dict:
        return self.data[section]

    @property
    def workdir(self) -> Path:
        return (self.base_dir / self.data["paths"]["workdir"]).resolve()


def defaults() -> dict:
    out: dict = {}
    for (sec, key), (default, *_rest) in KEYS.items():
        out.setdefault(sec, {})[key] = copy.deepcopy(default)
    return out


def validate(data: dict) -> None:
    for sec, body in data.items():
        if not isinstance(body, dict):
            raise ConfigError(f"section {sec!r} must be a mapping")
        for key in body:
            if (sec, key) not in KEYS:
                raise ConfigError(f"unknown config key {sec}.{key}")
    for (sec, key), (default, check, rng, _) in KEYS.items():
        val = data[sec][key]
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{sec}.{key} must be numeric, got {val!r}")
            if isinstance(default, int) and not isinstance(val, int):
                raise ConfigError(f"{sec}.{key} must be an integer, got {val!r}")
        try:
            ok = check(val)
        except TypeError:
            ok = False
        if not ok:
            raise ConfigError(f"{sec}.{key}={val!r} outside range {rng}")
    enc, acq, cor = data["encoder"], data["acquisition"], data["corpus"]
    if enc["lambda_min"] >= enc["lambda_max"]:
        raise ConfigError("encoder.lambda_min must be < encoder.lambda_max")
    if acq["region_side"] > cor["block_pixels"]:
        raise ConfigError("acquisition.region_side exceeds corpus.block_pixels")
    if data["train"]["patch_size"] > cor["block_pixels"]:
        raise ConfigError("train.patch_size exceeds corpus.block_pixels")
    if acq["B"] > acq["q"]:
        raise ConfigError("acquisition.B exceeds acquisition.q")
    if cor["n_train"] + cor["n_val"] >= cor["n_blocks"]:
        raise ConfigError("corpus.n_train + corpus.n_val leave no unlabelled pool")


def load(path=None, overrides: dict | None = None) -> RunConfig:
    data = defaults()
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for sec, body in user.items():
            if sec not in data:
                raise ConfigError(f"unknown config section {sec!r}")
            if not isinstance(body, dict):
                raise ConfigError(f"section {sec!r} must be a mapping")
            data[sec].update(body)
        base = path.parent
    for (sec, key), val in (overrides or {}).items():
        data[sec][key] = val
    validate(data)
    return RunConfig(data, base)


def describe() -> str:
    """Markdown table of every key, default and range."""
    lines = ["| key | default | range | meaning |", "|---|---|---|---|"]
    for (sec, key), (default, _, rng, desc) in KEYS.items():
        lines.append(f"| `{sec}.{key}` | `{default}` | {rng} | {desc} |")
    return "\n".join(lines)
