"""Flat ``key = value`` run configuration with per-command key registries.

    # attack.cfg
    variant = advflow
    max_queries = 2000
    epsilon = 0.03137

Every key of a command can also be given on the command line as ``--key-name value``;
command-line values win over the file. Unknown keys are errors.
"""
from __future__ import annotations

import logging
import zlib
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

RNG_LABELS = ("data", "init", "train", "attack", "detect", "eval")


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("true", "yes", "1", "on"):
        return True
    if value in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    return parse


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "ints": _parse_list(int),
    "floats": _parse_list(float),
    "strs": _parse_list(str),
}


@dataclass(frozen=True)
class Key:
    name: str
    kind: str
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    def parse(self, text: str) -> Any:
        try:
            return PARSERS[self.kind](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {self.name}: {exc}") from None


_COMMON = [Key("seed", "int", 0, "global seed; per-concern RNG streams derive from it")]

_FLOW = [
    Key("data", "str", "", "training data tensor file"),
    Key("hidden", "int", 128, "width of the coupling subnetworks"),
    Key("blocks", "int", 4, "coupling blocks of a dense (vector) flow"),
    Key("highres_blocks", "int", 2, "image flow: blocks before the squeeze"),
    Key("lowres_blocks", "int", 2, "image flow: blocks after the squeeze, each with a channel mix"),
    Key("fc_blocks", "int", 2, "image flow: blocks after the multi-scale exit"),
    Key("clamp_alpha", "float", 1.5, "soft-clamp bound on log-scales"),
    Key("exit_fraction", "float", 0.75, "image flow: fraction of features that exit early"),
    Key("final_init_std", "float", 0.0, "std of subnetwork output layers at init (0 = identity flow)"),
    Key("untrained", "bool", False, "write the initialised flow without training"),
    Key("epochs", "int", 350, "training epochs"),
    Key("batch_size", "int", 64, "minibatch size"),
    Key("lr", "float", 1e-4, "initial learning rate"),
    Key("lr_final", "float", 1e-6, "final learning rate of the exponential schedule"),
    Key("weight_decay", "float", 1e-5, "decoupled weight decay"),
    Key("dequant_std", "float", 0.02, "std of the dequantization noise"),
    Key("holdout_fraction", "float", 0.1, "share of the data held out for NLL tracking"),
]

_CLASSIFIER = [
    Key("data", "str", "", "training data tensor file"),
    Key("labels", "str", "", "training labels tensor file"),
    Key("bounds", "floats", (), "data range lo,hi (empty: from dataset.json or image default)"),
    Key("hidden", "ints", (64, 64), "hidden layer widths"),
    Key("epochs", "int", 100, "training epochs"),
    Key("batch_size", "int", 64, "minibatch size"),
    Key("lr", "float", 1e-2, "Adam learning rate"),
    Key("weight_decay", "float", 0.0, "decoupled weight decay"),
    Key("adversarial", "bool", False, "PGD adversarial training"),
    Key("epsilon", "float", 0.1, "adversarial training l-inf radius"),
    Key("pgd_step", "float", 0.025, "PGD step size"),
    Key("pgd_steps", "int", 7, "PGD iterations per minibatch"),
]

_ATTACK = [
    Key("data", "str", "", "inputs tensor file"),
    Key("labels", "str", "", "labels tensor file"),
    Key("classifier", "str", "", "target classifier checkpoint"),
    Key("flow", "str", "", "flow checkpoint (advflow, greedy, highres)"),
    Key("variant", "str", "advflow", "advflow | greedy | highres | nattack | pgd"),
    Key("sigma", "float", 0.1, "search distribution std"),
    Key("lr", "float", 0.02, "NES learning rate"),
    Key("population", "int", 20, "samples per iteration"),
    Key("max_queries", "int", 10000, "search query budget per input"),
    Key("epsilon", "float", 8 / 255, "l-inf radius"),
    Key("check_interval", "int", 200, "search queries between success checks"),
    Key("top_k", "int", 4, "greedy: offsets averaged into the new mean"),
    Key("mu_init_std", "float", 1e-3, "std of the initial search mean"),
    Key("pgd_step", "float", 2 / 255, "pgd reference: step size"),
    Key("pgd_iters", "int", 20, "pgd reference: iterations"),
    Key("start", "int", 0, "first input index"),
    Key("limit", "int", 0, "number of inputs to attack (0 = all)"),
    Key("jobs", "int", 1, "worker threads fanning out over inputs"),
]

_DETECT = [
    Key("data", "str", "", "clean data tensor file the attacks ran on"),
    Key("labels", "str", "", "labels tensor file"),
    Key("fit_data", "str", "", "data for the class Gaussians (empty: use data)"),
    Key("fit_labels", "str", "", "labels for the class Gaussians (empty: use labels)"),
    Key("classifier", "str", "", "classifier checkpoint providing features"),
    Key("flow", "str", "", "flow checkpoint for latent-shift statistics (optional)"),
    Key("attacks", "strs", (), "attack run directories, comma separated"),
    Key("layers", "ints", (-1,), "hidden layers whose Mahalanobis scores feed the detector"),
    Key("ridge", "float", 1e-4, "diagonal regularization of the shared covariance"),
    Key("noise_std", "float", -1.0, "std of noisy positives (negative: epsilon / 2 of each run)"),
    Key("train_fraction", "float", 0.1, "share of rows used to train the detector"),
    Key("bins", "int", 20, "latent-shift histogram bins"),
]

_EVALUATE = [
    Key("attacks", "strs", (), "attack run directories, comma separated"),
    Key("data", "str", "", "clean data tensor file (lemma and covariance checks)"),
    Key("flow", "str", "", "flow checkpoint for the first-order check (optional)"),
    Key("targets", "strs", (), "classifier checkpoints for the transfer matrix"),
    Key("budgets", "ints", (200, 500, 1000, 2000, 5000, 10000), "budgets of the success curve"),
    Key("lemma_scales", "floats", (1e-2, 1e-3, 1e-4), "scales of the first-order check"),
    Key("lemma_points", "int", 3, "inputs used by the first-order check"),
    Key("covariance_top", "int", 16, "highest-variance coordinates used for correlations"),
    Key("covariance_min", "int", 100, "minimum successful perturbations per variant"),
]

_GEN_DATA = [
    Key("kind", "str", "two-moons", "two-moons | blobs | digits8 | digits16"),
    Key("n", "int", 1000, "number of samples"),
    Key("noise", "float", 0.1, "two-moons noise"),
]

COMMAND_KEYS: dict[str, list[Key]] = {
    "gen-data": _GEN_DATA + _COMMON,
    "train-flow": _FLOW + _COMMON,
    "train-classifier": _CLASSIFIER + _COMMON,
    "attack": _ATTACK + _COMMON,
    "detect": _DETECT + _COMMON,
    "evaluate": _EVALUATE + _COMMON,
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        values[key] = value
    return values


class RunConfig(Mapping[str, Any]):
    """Resolved settings of one command."""

    def __init__(self, command: str, values: dict[str, Any]):
        self.command = command
        self._values = values

    @classmethod
    def resolve(cls, command: str, file_values: Mapping[str, str] | None = None,
                overrides: Mapping[str, str] | None = None) -> "RunConfig":
        keys = {k.name: k for k in COMMAND_KEYS[command]}
        merged: dict[str, str] = {}
        for source in (file_values or {}, overrides or {}):
            for name, text in source.items():
                if name not in keys:
                    raise ConfigError(f"unknown key {name!r} for {command}")
                merged[name] = text
        values = {name: key.parse(merged[name]) if name in merged else key.default
                  for name, key in keys.items()}
        return cls(command, values)

    @classmethod
    def from_file(cls, command: str, path: str | Path | None,
                  overrides: Mapping[str, str] | None = None) -> "RunConfig":
        file_values = None
        if path:
            file_values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
        return cls.resolve(command, file_values, overrides)

    @property
    def seed(self) -> int:
        return int(self._values["seed"])

    def rng(self, label: str) -> np.random.Generator:
        return rng_for(self.seed, label)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self._values[k])}\n" for k in sorted(self._values))

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)


def seed_sequence(seed: int, label: str) -> np.random.SeedSequence:
    if label not in RNG_LABELS:
        raise ConfigError(f"unknown RNG stream {label!r}")
    return np.random.SeedSequence([int(seed), zlib.crc32(label.encode("ascii"))])


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one concern; adding a concern never shifts another."""
    return np.random.default_rng(seed_sequence(seed, label))


def derived_seed(seed: int, label: str, index: int = 0) -> int:
    """Integer seed for item ``index`` of a concern, independent of processing order."""
    child = np.random.SeedSequence(seed_sequence(seed, label).entropy,
                                   spawn_key=(int(index),))
    return int(child.generate_state(1, dtype=np.uint32)[0])
