"""Named parameter collections with content fingerprints."""

from __future__ import annotations

import hashlib
from typing import Iterator, Mapping

import numpy as np

from ..exceptions import ContractViolation
from .tensor import Tensor


class ParamSet:
    """Ordered name -> Tensor mapping for one model's trainable parameters.

    The fingerprint hashes names, shapes, and exact little-endian float32
    bytes, so it changes iff any value changes and survives checkpoint
    round-trips bitwise.
    """

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        if params:
            for name, t in params.items():
                self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name: {name}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor, requires_grad=True)
        self._params[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def total_size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=t.requires_grad))
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite values in place; names and shapes must match exactly."""
        if set(arrays) != set(self._params):
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            raise ContractViolation(
                f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})"
            )
        for name, arr in arrays.items():
            t = self._params[name]
            if arr.shape != t.data.shape:
                raise ContractViolation(
                    f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}"
                )
            t.data = np.asarray(arr, dtype=np.float32).copy()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._params):
            t = self._params[name]
            h.update(name.encode())
            h.update(repr(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()
