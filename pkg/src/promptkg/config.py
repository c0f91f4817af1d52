"""Flat ``key=value`` run configuration.

One setting per line; ``#`` starts a comment; blank lines are ignored.
Unknown keys are rejected.  Every key below has a default, so an empty
file plus ``data_dir`` is a complete config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .graph import COMPOSITIONS, SUPPORTED_K
from .predictors import SCORERS, AblationMode


@dataclass(frozen=True)
class RunConfig:
    # data
    data_dir: str = ""
    output_dir: str = "runs/default"
    max_tokens: int = 72
    # encoder
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    prompt_len: int = 10
    proj_hidden: int = 64
    prefix_positions: bool = False
    pretrain_steps: int = 200
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 16
    encoder_checkpoint: str = ""
    # graph learner
    components: int = 2
    dim: int = 32
    graph_layers: int = 1
    composition: str = "multiply"
    # predictors
    scorer: str = "conve"
    gamma: float = 9.0
    conve_rows: int = 4
    conve_kernels: int = 8
    conve_kernel_size: int = 3
    mi_weight: float = 0.1
    label_smoothing: float = 0.1
    mode: str = "full"
    # optimisation
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    # evaluation
    buckets: tuple = field(default=(0, 5, 10, 20, 50, 100))
    eval_split: str = "valid"

    def __post_init__(self):
        positive = ("layers", "hidden", "heads", "ffn", "prompt_len", "proj_hidden", "components",
                    "dim", "graph_layers", "batch_size", "max_tokens")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.pretrain_steps < 0:
            raise ConfigError("epochs and pretrain_steps must be non-negative")
        if self.components not in SUPPORTED_K:
            raise ConfigError(f"components must be one of {SUPPORTED_K}")
        if self.composition not in COMPOSITIONS:
            raise ConfigError(f"composition must be one of {COMPOSITIONS}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}")
        try:
            mode = AblationMode(self.mode)
        except ValueError:
            raise ConfigError(f"mode must be one of {[m.value for m in AblationMode]}") from None
        if mode is AblationMode.NO_DISEN and self.components != 1:
            raise ConfigError("no_disen mode requires components=1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if list(self.buckets) != sorted(set(self.buckets)):
            raise ConfigError("bucket boundaries must be strictly increasing")
        if self.eval_split not in ("valid", "test"):
            raise ConfigError("eval_split must be valid or test")

    @property
    def ablation(self) -> AblationMode:
        return AblationMode(self.mode)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["buckets"] = list(self.buckets)
        return d

    def config_hash(self) -> str:
        """Hash over everything that shapes the model or its training."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def check_paths(self) -> None:
        root = Path(self.data_dir)
        for name in ("entities.tsv", "relations.tsv", "train.tsv"):
            if not (root / name).exists():
                raise ConfigError(f"missing dataset file {root / name}")
        if self.encoder_checkpoint and not Path(self.encoder_checkpoint).exists():
            raise ConfigError(f"encoder checkpoint {self.encoder_checkpoint} not found")


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


_TYPES = {"bool": bool, "int": int, "float": float, "str": str, "tuple": tuple}


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    known = {f.name: _TYPES[f.type] for f in fields(RunConfig)}
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"config line {line_no}: unknown key {key!r}")
        values[key] = _coerce(key, raw, known[key])
    for key, raw in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, str(raw), known[key]) if isinstance(raw, str) else raw
    return RunConfig(**values)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(encoding="utf-8"), overrides)
