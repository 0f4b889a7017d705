"""Named parameter storage and initialisers."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from inklpose.errors import ConfigError, ShapeError
from inklpose.substrate import functional as F
from inklpose.substrate.tensor import Tensor, default_dtype


class ParamRegistry:
    """Ordered map of dot-separated names to trainable tensors.

    All initial values come from one generator seeded with ``seed``, so the
    same seed and registration order give identical parameters.
    """

    def __init__(self, seed: int = 0, dtype=None):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype or default_dtype())
        self.rng = np.random.default_rng(self.seed)
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    # mapping protocol
    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if not name or any(not part for part in name.split(".")):
            raise ConfigError(f"bad parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name, dtype=self.dtype)
        self._entries[name] = t
        return t

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Entries under ``prefix.`` keyed by the remaining suffix."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._entries.items() if k.startswith(p)}

    def count(self, prefix: str | None = None) -> int:
        if prefix is None:
            return int(sum(t.size for t in self._entries.values()))
        return int(sum(t.size for k, t in self._entries.items() if k == prefix or k.startswith(prefix + ".")))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data) for k, v in self._entries.items())

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._entries) - set(state)
            extra = set(state) - set(self._entries)
            if missing or extra:
                raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for k, arr in state.items():
            if k not in self._entries:
                continue
            t = self._entries[k]
            if tuple(arr.shape) != t.shape:
                raise ConfigError(f"checkpoint shape for {k}: {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)

    def zero_(self, prefix: str) -> None:
        """Set every entry under ``prefix`` to zero (used by ablations/tests)."""
        for k, t in self._entries.items():
            if k == prefix or k.startswith(prefix + "."):
                t.data = np.zeros_like(t.data)

    # -- initialisers --------------------------------------------------------
    def uniform(self, name: str, shape, bound: float) -> Tensor:
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def normal(self, name: str, shape, std: float = 1.0) -> Tensor:
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def constant(self, name: str, shape, value: float) -> Tensor:
        return self.add(name, np.full(shape, value))

    def linear(self, prefix: str, din: int, dout: int, bias: float | None = None) -> None:
        bound = 1.0 / math.sqrt(din)
        self.uniform(f"{prefix}.w", (din, dout), bound)
        if bias is None:
            self.uniform(f"{prefix}.b", (dout,), bound)
        else:
            self.constant(f"{prefix}.b", (dout,), bias)

    def mlp(self, prefix: str, dims: list[int]) -> None:
        for i in range(len(dims) - 1):
            self.linear(f"{prefix}.{i}", dims[i], dims[i + 1])

    def layer_norm(self, prefix: str, d: int) -> None:
        self.constant(f"{prefix}.gamma", (d,), 1.0)
        self.constant(f"{prefix}.beta", (d,), 0.0)

    def attention(self, prefix: str, d: int) -> None:
        for p in ("q", "k", "v", "o"):
            bound = 1.0 / math.sqrt(d)
            self.uniform(f"{prefix}.w{p}", (d, d), bound)
            self.uniform(f"{prefix}.b{p}", (d,), bound)

    def ssm(self, prefix: str, d: int, n: int) -> None:
        self.add(f"{prefix}.A_log", np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1))))
        self.linear(f"{prefix}.dt", d, d, bias=-2.0)
        self.linear(f"{prefix}.B", d, n)
        self.linear(f"{prefix}.C", d, n)
        self.constant(f"{prefix}.D", (d,), 1.0)


# -- functional helpers that consume registry entries ---------------------

def apply_linear(reg: ParamRegistry, prefix: str, x: Tensor) -> Tensor:
    return F.linear(x, reg[f"{prefix}.w"], reg[f"{prefix}.b"])


def apply_mlp(reg: ParamRegistry, prefix: str, x: Tensor, final_act: bool = False) -> Tensor:
    i = 0
    while f"{prefix}.{i}.w" in reg:
        x = apply_linear(reg, f"{prefix}.{i}", x)
        i += 1
        if f"{prefix}.{i}.w" in reg or final_act:
            x = F.gelu(x)
    if i == 0:
        raise ShapeError(f"no MLP registered under {prefix!r}")
    return x


def apply_layer_norm(reg: ParamRegistry, prefix: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    return F.layer_norm(x, reg[f"{prefix}.gamma"], reg[f"{prefix}.beta"], eps)


def attention_params(reg: ParamRegistry, prefix: str) -> dict[str, Tensor]:
    return {k: reg[f"{prefix}.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def ssm_params(reg: ParamRegistry, prefix: str) -> dict[str, Tensor]:
    return {
        "A_log": reg[f"{prefix}.A_log"],
        "w_dt": reg[f"{prefix}.dt.w"], "b_dt": reg[f"{prefix}.dt.b"],
        "w_B": reg[f"{prefix}.B.w"], "b_B": reg[f"{prefix}.B.b"],
        "w_C": reg[f"{prefix}.C.w"], "b_C": reg[f"{prefix}.C.b"],
        "D": reg[f"{prefix}.D"],
    }
