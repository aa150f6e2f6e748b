"""Experiment configuration loaded from JSON.

Example::

    {
      "seed": 7,
      "output_dir": "runs/exp1",
      "model": {"in_channels": 1, "depth": 3, "base_channels": 16},
      "federation": {"rounds": 30, "local_epochs": 1, "batch_size": 4, "lr": 0.0002},
      "nodes": [
        {"name": "ct", "dataset_dir": "data/ct/train", "test_dir": "data/ct/test"},
        {"name": "pet", "dataset_dir": "data/pet/train", "test_dir": "data/pet/test"}
      ],
      "transport": {"mode": "inproc"},
      "eval": {"task": "localization", "threshold": 0.5}
    }

Relative paths are resolved against the directory holding the config file.
Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .federation import FedConfig
from .metrics import TASKS
from .unet import UNetConfig

_TOP = {"model", "federation", "nodes", "transport", "eval", "output_dir", "seed"}
_FED = {"rounds", "local_epochs", "batch_size", "lr", "weighting", "timeout_s", "retries",
        "eval_each_round"}
_NODE = {"name", "dataset_dir", "test_dir", "seed"}
_TRANSPORT = {"mode", "host", "port"}
_EVAL = {"task", "threshold"}


@dataclass
class NodeConfig:
    name: str
    dataset_dir: Path
    test_dir: Path | None = None
    seed: int | None = None


@dataclass
class ExperimentConfig:
    model: UNetConfig
    federation: FedConfig
    nodes: list
    output_dir: Path
    seed: int = 0
    transport_mode: str = "inproc"
    host: str = "127.0.0.1"
    port: int = 5050
    task: str = "segmentation"
    threshold: float = 0.5
    source: Path | None = field(default=None, repr=False)

    def node(self, name):
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i, n
        raise ConfigError(f"no node named {name!r}; configured: {[n.name for n in self.nodes]}")

    def check_paths(self):
        for n in self.nodes:
            for p in (n.dataset_dir, n.test_dir):
                if p is not None and not p.is_dir():
                    raise ConfigError(f"node {n.name!r}: dataset directory {p} does not exist")


def _section(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")
    return d


def _u64(v, where):
    if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < 2 ** 64:
        raise ConfigError(f"{where} must be a 64-bit unsigned integer, got {v!r}")
    return v


def parse_config(doc: dict, base_dir=Path(".")) -> ExperimentConfig:
    base_dir = Path(base_dir)
    _section(doc, _TOP, "config")
    for key in ("model", "nodes", "output_dir"):
        if key not in doc:
            raise ConfigError(f"config is missing {key!r}")
    seed = _u64(doc.get("seed", 0), "seed")
    try:
        model = UNetConfig(**_section(doc["model"], {"in_channels", "depth", "base_channels",
                                                     "kernel_size"}, "model"))
    except TypeError as e:
        raise ConfigError(f"model: {e}") from e
    nodes_doc = doc["nodes"]
    if not isinstance(nodes_doc, list) or not nodes_doc:
        raise ConfigError("nodes must be a non-empty list")
    nodes = []
    for i, nd in enumerate(nodes_doc):
        _section(nd, _NODE, f"nodes[{i}]")
        if "name" not in nd or "dataset_dir" not in nd:
            raise ConfigError(f"nodes[{i}] needs 'name' and 'dataset_dir'")
        test = nd.get("test_dir")
        nodes.append(NodeConfig(
            str(nd["name"]), base_dir / nd["dataset_dir"],
            base_dir / test if test is not None else None,
            _u64(nd["seed"], f"nodes[{i}].seed") if "seed" in nd else None))
    if len({n.name for n in nodes}) != len(nodes):
        raise ConfigError("node names must be unique")
    fed_doc = dict(_section(doc.get("federation", {}), _FED, "federation"))
    try:
        federation = FedConfig(nodes=len(nodes), seed=seed, **fed_doc)
    except TypeError as e:
        raise ConfigError(f"federation: {e}") from e
    tr = _section(doc.get("transport", {}), _TRANSPORT, "transport")
    mode = tr.get("mode", "inproc")
    if mode not in ("inproc", "tcp"):
        raise ConfigError(f"transport.mode must be 'inproc' or 'tcp', got {mode!r}")
    port = tr.get("port", 5050)
    if not isinstance(port, int) or not 0 <= port < 65536:
        raise ConfigError(f"transport.port out of range: {port!r}")
    ev = _section(doc.get("eval", {}), _EVAL, "eval")
    task = ev.get("task", "segmentation")
    if task not in TASKS:
        raise ConfigError(f"eval.task must be one of {TASKS}, got {task!r}")
    threshold = ev.get("threshold", 0.5)
    if not isinstance(threshold, (int, float)) or not 0 < threshold < 1:
        raise ConfigError(f"eval.threshold must be in (0, 1), got {threshold!r}")
    return ExperimentConfig(model, federation, nodes, base_dir / doc["output_dir"], seed, mode,
                            str(tr.get("host", "127.0.0.1")), port, task, float(threshold))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    cfg = parse_config(doc, path.parent)
    cfg.source = path
    return cfg
