"""Minimal module container: parameter discovery, modes, state dicts, seeded init."""
from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..autograd import Parameter
from ..stats import NormStats


class Module:
    training: bool = True
    # names of plain ndarray attributes saved alongside parameters
    _buffers: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # ------------------------------------------------------------ traversal
    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Module, Parameter, NormStats)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mname, m in self.named_modules(prefix):
            for name, child in m._children():
                if isinstance(child, Parameter):
                    yield (f"{mname}.{name}" if mname else name), child

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_stats(self) -> Iterator[tuple[str, NormStats]]:
        for mname, m in self.named_modules():
            for name, child in m._children():
                if isinstance(child, NormStats):
                    yield (f"{mname}.{name}" if mname else name), child

    # ------------------------------------------------------------ modes
    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # ------------------------------------------------------------ init
    def reset_parameters(self, rng: np.random.Generator) -> None:
        """Draw this module's own random parameters (not its children's)."""

    def initialize(self, seed: int) -> "Module":
        """Seeded init; each module's draws depend only on (seed, module path)."""
        for name, m in self.named_modules():
            rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
            m.reset_parameters(rng)
        return self

    # ------------------------------------------------------------ state
    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        sd: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            sd[name] = p.data
        for name, st in self.named_stats():
            sd[f"{name}.running_mean"] = st.running_mean
            sd[f"{name}.running_var"] = st.running_var
            sd[f"{name}.initialized"] = np.array([int(st.initialized)], dtype=np.int32)
        for mname, m in self.named_modules():
            for b in m._buffers:
                sd[f"{mname}.{b}" if mname else b] = getattr(m, b)
        return sd

    def load_state_dict(self, sd: dict, strict: bool = True) -> None:
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(sd))
            unexpected = sorted(set(sd) - set(own))
            if missing or unexpected:
                raise KeyError(f"state dict mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        params = dict(self.named_parameters())
        stats = dict(self.named_stats())
        buffers = {(f"{mn}.{b}" if mn else b): (m, b) for mn, m in self.named_modules() for b in m._buffers}
        for key, value in sd.items():
            if key not in own:
                continue
            value = np.asarray(value)
            if value.shape != own[key].shape:
                raise ValueError(f"{key}: shape {value.shape} does not match {own[key].shape}")
            if key in params:
                params[key].data = value.astype(params[key].dtype).copy()
                continue
            if key in buffers:
                m, b = buffers[key]
                setattr(m, b, value.astype(own[key].dtype).copy())
                continue
            sname, field = key.rsplit(".", 1)
            st = stats[sname]
            if field == "initialized":
                st.initialized = bool(value.reshape(-1)[0])
            else:
                getattr(st, field)[...] = value

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))
