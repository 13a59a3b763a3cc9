"""Parameter registry, scoped lookup, and initializers."""
from __future__ import annotations

import math
from typing import Dict, Iterator, Optional

import numpy as np

from .errors import ContractError
from .tensor import Parameter, Tape, Tensor


class ParamStore:
    """Ordered, name-unique collection of :class:`Parameter` objects."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, kind: str = "weight") -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(np.asarray(data, dtype=self.dtype)), kind=kind)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def count(self) -> int:
        """Total number of trainable scalars."""
        return sum(p.size for p in self if p.trainable)

    def scope(self, tape: Optional[Tape] = None, prefix: str = "") -> "Scope":
        return Scope(self, tape, prefix)

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            self._params[name].data = np.array(arr, dtype=self.dtype, copy=True)


class Scope:
    """Prefix-scoped view that binds parameters to a tape on access."""

    def __init__(self, store: ParamStore, tape: Optional[Tape], prefix: str = ""):
        self.store = store
        self.tape = tape
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        p = self.store[self._full(name)]
        return self.tape.watch(p) if self.tape is not None else p.tensor

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self.store

    def sub(self, name) -> "Scope":
        return Scope(self.store, self.tape, self._full(str(name)))


class Init:
    """Writes freshly initialized parameters into a store under a prefix.

    Conv and linear weights are He-normal; biases, relative-bias tables and
    LayerNorm shifts start at zero; LayerNorm scales at one.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, prefix: str = ""):
        self.store = store
        self.rng = rng
        self.prefix = prefix

    def sub(self, name) -> "Init":
        full = f"{self.prefix}.{name}" if self.prefix else str(name)
        return Init(self.store, self.rng, full)

    def _name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def he(self, name: str, shape, fan_in: int) -> Parameter:
        data = self.rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        return self.store.add(self._name(name), data, kind="weight")

    def conv(self, name: str, out_ch: int, in_ch: int, k: int, groups: int = 1,
             bias: bool = True) -> None:
        fan_in = (in_ch // groups) * k * k
        self.he(name, (out_ch, in_ch // groups, k, k), fan_in)
        if bias:
            self.zeros(name + "_b", (out_ch,), kind="bias")

    def linear(self, name: str, out_f: int, in_f: int, bias: bool = True) -> None:
        self.he(name, (out_f, in_f), in_f)
        if bias:
            self.zeros(name + "_b", (out_f,), kind="bias")

    def zeros(self, name: str, shape, kind: str = "bias") -> Parameter:
        return self.store.add(self._name(name), np.zeros(shape), kind=kind)

    def norm(self, name: str, dim: int) -> None:
        self.store.add(self._name(name + "_g"), np.ones(dim), kind="norm")
        self.store.add(self._name(name + "_b"), np.zeros(dim), kind="norm")
