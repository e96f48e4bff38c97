"""Experiment configuration, seed derivation and the shared metrics log."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import tomli

LOSS_KINDS = ("mse", "cosine", "salient")
OPTIMIZER_KINDS = ("sgd", "adam", "adamw")
PROBE_KINDS = ("knn", "linear", "mlp")

_U64 = 1 << 64


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration documents."""


def derive_seed(master_seed: int, label: str) -> int:
    """Derive an unsigned 64-bit seed for one stochastic role.

    A keyed BLAKE2b digest of ``label`` with ``master_seed`` as the key, so the
    result depends only on its arguments and is stable across platforms.
    """
    key = (int(master_seed) % _U64).to_bytes(8, "little")
    digest = hashlib.blake2b(label.encode("utf-8"), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class ProbeConfig:
    knn_k: int = 5
    probe_epochs: int = 20
    probe_lr: float = 0.01
    probe_batch_size: int = 256
    mlp_hidden: int = 512
    fit_subset: Optional[int] = 10000
    # extensions used by the periodic evaluation hook
    test_subset: Optional[int] = None
    hook_probes: tuple = ("linear",)
    hook_peers: Optional[tuple] = None

    def __post_init__(self):
        if self.knn_k < 1:
            raise ConfigError("probe_config.knn_k must be >= 1")
        if self.probe_epochs < 1:
            raise ConfigError("probe_config.probe_epochs must be >= 1")
        if not self.probe_lr > 0:
            raise ConfigError("probe_config.probe_lr must be > 0")
        if self.probe_batch_size < 1:
            raise ConfigError("probe_config.probe_batch_size must be >= 1")
        if self.mlp_hidden < 1:
            raise ConfigError("probe_config.mlp_hidden must be >= 1")
        for name in ("fit_subset", "test_subset"):
            value = getattr(self, name)
            if value == 0:  # 0 in a document means "no cap"
                object.__setattr__(self, name, None)
            elif value is not None and value < 1:
                raise ConfigError(f"probe_config.{name} must be >= 0")
        object.__setattr__(self, "hook_probes", tuple(self.hook_probes))
        for kind in self.hook_probes:
            if kind not in PROBE_KINDS:
                raise ConfigError(f"probe_config.hook_probes: unknown probe kind {kind!r}")
        if self.hook_peers is not None:
            object.__setattr__(self, "hook_peers", tuple(int(p) for p in self.hook_peers))


@dataclass(frozen=True)
class ExperimentConfig:
    """Full declarative description of one training/evaluation run."""

    dataset_dir: str
    num_peers: int = 16
    num_teachers: int = 1
    loss_kind: str = "salient"
    optimizer_kind: str = "adam"
    learning_rate: float = 1e-8
    batch_size: int = 512
    epochs: int = 10
    arch_id: str = "simple_cnn"
    master_seed: int = 0
    eval_every_batches: int = 0
    probe_config: ProbeConfig = field(default_factory=ProbeConfig)
    output_dir: str = "runs/default"
    train_subset_size: Optional[int] = None

    def __post_init__(self):
        if self.num_peers < 2:
            raise ConfigError("num_peers must be >= 2")
        if self.num_teachers < 1:
            raise ConfigError("num_teachers must be >= 1")
        if self.num_teachers + 1 > self.num_peers:
            raise ConfigError(
                f"num_teachers + 1 <= num_peers violated "
                f"({self.num_teachers} + 1 > {self.num_peers})"
            )
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.optimizer_kind not in OPTIMIZER_KINDS:
            raise ConfigError(
                f"optimizer_kind must be one of {OPTIMIZER_KINDS}, got {self.optimizer_kind!r}"
            )
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.eval_every_batches < 0:
            raise ConfigError("eval_every_batches must be >= 0")
        if self.train_subset_size is not None and self.train_subset_size < 1:
            raise ConfigError("train_subset_size must be >= 1")
        if not -(1 << 63) <= self.master_seed < _U64:
            raise ConfigError("master_seed must fit in 64 bits")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_TOP_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_PROBE_FIELDS = {f.name: f for f in dataclasses.fields(ProbeConfig)}

_INT_FIELDS = {
    "num_peers", "num_teachers", "batch_size", "epochs", "master_seed",
    "eval_every_batches", "train_subset_size",
    "knn_k", "probe_epochs", "probe_batch_size", "mlp_hidden", "fit_subset", "test_subset",
}
_FLOAT_FIELDS = {"learning_rate", "probe_lr"}
_STR_FIELDS = {"loss_kind", "optimizer_kind", "arch_id", "dataset_dir", "output_dir"}
_LIST_FIELDS = {"hook_probes", "hook_peers"}


def _coerce(name: str, value: Any) -> Any:
    if name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if name in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if name in _STR_FIELDS:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    if name in _LIST_FIELDS:
        if isinstance(value, (str, int)):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"unknown key {name!r}")


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validate a parsed document and build the config, filling defaults."""
    top, probe = {}, {}
    for key, value in doc.items():
        if key == "probe_config":
            if not isinstance(value, dict):
                raise ConfigError("probe_config must be a table")
            for pkey, pvalue in value.items():
                if pkey not in _PROBE_FIELDS:
                    raise ConfigError(f"unknown key 'probe_config.{pkey}'")
                probe[pkey] = _coerce(pkey, pvalue)
        elif key in _TOP_FIELDS:
            top[key] = _coerce(key, value)
        else:
            raise ConfigError(f"unknown key {key!r}")
    if "dataset_dir" not in top:
        raise ConfigError("missing required key 'dataset_dir'")
    try:
        return ExperimentConfig(probe_config=ProbeConfig(**probe), **top)
    except TypeError as exc:  # pragma: no cover - guarded by the key checks above
        raise ConfigError(str(exc)) from exc


def parse_document(text: str) -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        # message carries "(at line L, column C)"
        raise ConfigError(f"parse error: {exc}") from exc


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted!r}: {part!r} is not a table")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """Parse a ``key=value`` flag; the value uses TOML syntax, bare words are strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def load_config(text: str, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Parse a TOML configuration document; ``overrides`` win over file values."""
    doc = parse_document(text)
    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(doc, key, value)
    return config_from_dict(doc)


def load_config_file(path: Union[str, Path], overrides: Iterable[str] = ()) -> ExperimentConfig:
    return load_config(Path(path).read_text(encoding="utf-8"), overrides)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False).replace("\x7f", "\\u007f")
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize to the same TOML dialect :func:`load_config` reads."""
    lines = []
    for name in _TOP_FIELDS:
        if name == "probe_config":
            continue
        value = getattr(cfg, name)
        if value is not None:
            lines.append(f"{name} = {_toml_value(value)}")
    lines.append("")
    lines.append("[probe_config]")
    for name in _PROBE_FIELDS:
        value = getattr(cfg.probe_config, name)
        if value is None and name == "fit_subset":
            value = 0
        if value is not None:
            lines.append(f"{name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


class MetricsLog:
    """Append-only record of ``(global_step, peer_id, metric_name, value)`` rows.

    ``peer_id`` is an integer or the string ``"ensemble"``.
    """

    header = ("step", "peer_id", "metric", "value")

    def __init__(self):
        self._rows: list[tuple] = []

    @property
    def rows(self) -> tuple:
        return tuple(self._rows)

    def __len__(self):
        return len(self._rows)

    def append(self, global_step: int, peer_id, metric_name: str, value: float) -> None:
        if self._rows and global_step < self._rows[-1][0]:
            raise ValueError(
                f"global_step must be non-decreasing ({global_step} < {self._rows[-1][0]})"
            )
        self._rows.append((int(global_step), peer_id, str(metric_name), float(value)))

    def select(self, metric_name: str) -> list[tuple]:
        return [row for row in self._rows if row[2] == metric_name]

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header)
            for step, peer, metric, value in self._rows:
                writer.writerow((step, peer, metric, repr(value)))

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                peer = row["peer_id"]
                log.append(int(row["step"]), peer if peer == "ensemble" else int(peer),
                           row["metric"], float(row["value"]))
        return log
