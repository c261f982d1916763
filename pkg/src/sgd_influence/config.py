"""Flat ``key = value`` run configuration files."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Callable, Mapping

from .cache import CheckpointPolicy
from .influence import InfluenceMode
from .pipeline import Strategy


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip().strip("[]()")
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _strs(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.strip().strip("[]()").split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _label_column(text: str) -> int | str:
    try:
        return int(text)
    except ValueError:
        return text.strip()


def _mode(text: str) -> InfluenceMode:
    aliases = {"stored_params": "stored", "final_params_only": "final_only"}
    t = text.strip().lower()
    return InfluenceMode(aliases.get(t, t))


KEYS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    # model
    "hidden": (_ints, (32,), "hidden layer widths, comma separated; empty for logistic regression"),
    "activation": (str, "relu", "hidden activation: relu or tanh"),
    # training
    "lr": (float, 0.05, "SGD learning rate"),
    "epochs": (int, 20, "number of epochs"),
    "batch_size": (int, 32, "minibatch size"),
    "seed": (int, 0, "training seed (init and shuffles)"),
    "policy": (lambda s: CheckpointPolicy(s.strip().lower()), CheckpointPolicy.FINAL_ONLY,
               "checkpoint policy: all, last_epoch or final_only"),
    "width": (int, 4, "bytes per stored float: 4 or 8"),
    # influence
    "mode": (_mode, InfluenceMode.FINAL_PARAMS_ONLY, "influence mode: stored or final_only"),
    "window": (str, "last_epoch", "trace window: last_epoch or full"),
    # data files
    "train": (str, None, "training set path (.csv or binary)"),
    "val": (str, None, "validation set path"),
    "test": (str, None, "test set path"),
    "label_column": (_label_column, -1, "CSV label column (index or header name)"),
    "header": (_bool, None, "CSV has a header row (default: sniff)"),
    # generator
    "n_train": (int, 2000, "generated training set size"),
    "n_val": (int, 1000, "generated validation set size"),
    "n_test": (int, 2000, "generated test set size"),
    "classes": (int, 10, "generated class count"),
    "dim": (int, 64, "generated feature dimension"),
    "separation": (float, 5.0, "distance between generated class centers"),
    "noise_rate": (float, 0.1, "fraction of generated training labels flipped"),
    "data_seed": (int, 0, "seed of the generated pool"),
    # cleansing
    "strategy": (lambda s: Strategy(s.strip().lower()), Strategy.INFLUENCE_FINAL_ONLY, "cleansing strategy"),
    "n": (int, 0, "number of instances to remove"),
    "removal_counts": (_ints, None, "removal counts for sweeps (default 0,1,2,5,10,20 percent of N)"),
    "n_seeds": (int, 10, "trials per sweep cell"),
    "strategies": (_strs, tuple(s.value for s in Strategy), "strategies for sweeps"),
    "batch_sizes": (_ints, (32,), "batch sizes for sweeps"),
    "base_seed": (int, 0, "first trial seed"),
    # outputs
    "out": (str, "out", "output directory"),
    "cache": (str, None, "cache file path"),
}

GENERATOR_KEYS = ("n_train", "n_val", "n_test", "classes", "dim", "separation", "noise_rate", "data_seed")


class RunConfig(Mapping):
    """Parsed configuration; ``explicit`` records keys that were set by the user."""

    def __init__(self, values: dict[str, Any], explicit: set[str]):
        self._values = values
        self.explicit = explicit

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __getattr__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key) from None

    def as_text(self) -> dict[str, str]:
        out = {}
        for k, v in self._values.items():
            if hasattr(v, "value"):
                v = v.value
            elif isinstance(v, tuple):
                v = ",".join(str(getattr(t, "value", t)) for t in v)
            out[k] = "" if v is None else str(v)
        return out


def parse_pairs(lines, source: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}; known keys: {', '.join(sorted(KEYS))}")
        raw[key] = value
    return raw


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    raw: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_pairs(path.read_text().splitlines(), str(path)))
    for k, v in (overrides or {}).items():
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}; known keys: {', '.join(sorted(KEYS))}")
        raw[k] = v
    values = {}
    for key, (conv, default, _) in KEYS.items():
        if key in raw:
            try:
                values[key] = conv(raw[key]) if raw[key] != "" or key == "hidden" else default
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {raw[key]!r} ({exc})") from None
        else:
            values[key] = default
    return RunConfig(values, set(raw))


def write_config(path: str | Path, values: Mapping[str, Any]) -> None:
    lines = []
    for k, v in values.items():
        if hasattr(v, "value"):
            v = v.value
        elif isinstance(v, (tuple, list)):
            v = ",".join(str(getattr(t, "value", t)) for t in v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")
