"""Parameter ownership: each Parameter belongs to exactly one Module."""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError, ConfigError
from .tensor import Parameter


class Module:
    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, data, frozen: bool = False) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name=name, frozen=frozen)
        self._params[name] = p
        return p

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = [(prefix + n, p) for n, p in self._params.items()]
        for cname, child in self._children.items():
            out.extend(child.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(arrays))
            if missing:
                raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in own.items():
            if name not in arrays:
                continue
            value = arrays[name]
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data[...] = value

    def qualify_names(self) -> None:
        """Rename every owned Parameter to its dotted path from this root."""
        seen = set()
        for name, p in self.named_parameters():
            if id(p) in seen:
                raise ConfigError(f"parameter {name!r} is owned by more than one module")
            seen.add(id(p))
            p.name = name
