"""Named parameter storage with deterministic initialization."""
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from gaussfusion.core.errors import ContractError
from gaussfusion.core.tensor import NumericArray, default_dtype, parameter


class ParameterStore:
    """Owns every learnable array of a model, keyed by stable string paths.

    The store also keeps the AdamW moments and step counter, so that a
    checkpoint of the store is enough to resume training.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.params: Dict[str, NumericArray] = {}
        self.moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    # ---------------------------------------------------------------- access
    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __getitem__(self, path: str) -> NumericArray:
        try:
            return self.params[path]
        except KeyError:
            raise ContractError(f"unknown parameter '{path}'") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def paths(self) -> List[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def num_values(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -------------------------------------------------------------- creation
    def add(self, path: str, values: np.ndarray) -> NumericArray:
        if path in self.params:
            raise ContractError(f"duplicate parameter path '{path}'")
        p = parameter(np.asarray(values, dtype=default_dtype()), name=path)
        self.params[path] = p
        return p

    def zeros(self, path: str, shape) -> NumericArray:
        return self.add(path, np.zeros(shape))

    def constant(self, path: str, values) -> NumericArray:
        return self.add(path, np.array(values, dtype=float))

    def normal(self, path: str, shape, std: float) -> NumericArray:
        return self.add(path, self.rng.normal(0.0, std, size=shape))

    def uniform(self, path: str, shape, bound: float) -> NumericArray:
        return self.add(path, self.rng.uniform(-bound, bound, size=shape))

    def linear(self, path: str, fan_in: int, fan_out: int, zero: bool = False,
               bias: Optional[np.ndarray] = None) -> Tuple[NumericArray, NumericArray]:
        """Create ``{path}.w`` (fan_in x fan_out) and ``{path}.b``.

        Weights are uniform in +-1/sqrt(fan_in) unless ``zero`` is set.
        """
        if zero:
            w = self.zeros(f"{path}.w", (fan_in, fan_out))
        else:
            w = self.uniform(f"{path}.w", (fan_in, fan_out), 1.0 / np.sqrt(fan_in))
        b = self.add(f"{path}.b", np.zeros(fan_out) if bias is None else np.asarray(bias, dtype=float))
        return w, b

    def layer_norm(self, path: str, dim: int) -> Tuple[NumericArray, NumericArray]:
        return self.add(f"{path}.gain", np.ones(dim)), self.zeros(f"{path}.bias", dim)

    # ------------------------------------------------------------- gradients
    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        """Current gradients; parameters the loss never reached get zeros."""
        return {path: (np.zeros_like(p.values) if p.grad is None else p.grad)
                for path, p in self.params.items()}

    # --------------------------------------------------------- serialization
    def state(self) -> Dict[str, np.ndarray]:
        arrays = {f"param/{k}": p.values for k, p in self.params.items()}
        for k, (m, v) in self.moments.items():
            arrays[f"adam_m/{k}"] = m
            arrays[f"adam_v/{k}"] = v
        return arrays

    def load_state(self, arrays: Mapping[str, np.ndarray], step: int = 0) -> None:
        """Overwrite parameter values and moments from ``state()`` output."""
        for key, values in arrays.items():
            kind, _, path = key.partition('/')
            if kind == 'param':
                if path not in self.params:
                    raise ContractError(f"checkpoint holds unknown parameter '{path}'")
                if self.params[path].shape != values.shape:
                    raise ContractError(
                        f"parameter '{path}' has shape {self.params[path].shape}, checkpoint has {values.shape}")
                self.params[path].values = np.array(values, dtype=default_dtype())
        for path in self.params:
            if f"adam_m/{path}" in arrays:
                self.moments[path] = (np.array(arrays[f"adam_m/{path}"]), np.array(arrays[f"adam_v/{path}"]))
        self.step = int(step)
