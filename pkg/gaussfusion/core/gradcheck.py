"""Central finite-difference verification of analytic gradients."""
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from gaussfusion.core.errors import ContractError, GradientCheckError
from gaussfusion.core.observability import Observability
from gaussfusion.core.tensor import NumericArray


@dataclass
class GradcheckReport:
    """Per-parameter maximum relative error of one gradient suite."""
    name: str
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> Dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tolerance}

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'passed': self.passed,
            'tolerance': self.tolerance,
            'worst': self.worst,
            'errors': dict(self.errors),
            'checked': dict(self.checked),
        }

    def raise_on_failure(self) -> 'GradcheckReport':
        if not self.passed:
            raise GradientCheckError(f"gradient suite '{self.name}' failed: {self.failures}")
        return self


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck(f: Callable[[], NumericArray], params: Mapping[str, NumericArray], eps: float = 1e-6,
              tolerance: float = 1e-5, max_entries: Optional[int] = None, seed: int = 0,
              floor: float = 1e-4, name: str = 'gradcheck') -> GradcheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    Args:
        f: Zero-argument closure returning a scalar; it must read the current
            values of ``params`` on every call.
        params: Arrays to differentiate with respect to, keyed by name.
        eps: Central-difference step.
        tolerance: Maximum admissible relative error.
        max_entries: If set, at most this many coordinates per array are checked,
            drawn without replacement from a generator seeded with ``seed``.
        seed: Seed for coordinate sampling.
        floor: Lower bound on the relative-error denominator.
        name: Label carried by the report.

    Returns:
        A GradcheckReport with the maximum relative error per parameter.
    """
    for key, p in params.items():
        if not p.requires_grad:
            raise ContractError(f"gradcheck parameter '{key}' does not require grad")
        p.grad = None
    out = f()
    if out.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = {k: (np.zeros_like(p.values) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradcheckReport(name=name, tolerance=tolerance)
    for key, p in params.items():
        p.values = np.ascontiguousarray(p.values)
        flat = p.values.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(entries.size)
        for slot, i in enumerate(entries):
            original = flat[i]
            flat[i] = original + eps
            f_plus = f().item()
            flat[i] = original - eps
            f_minus = f().item()
            flat[i] = original
            numeric[slot] = (f_plus - f_minus) / (2.0 * eps)
        errors = relative_error(analytic[key].reshape(-1)[entries], numeric, floor)
        report.errors[key] = float(errors.max()) if errors.size else 0.0
        report.checked[key] = int(entries.size)

    Observability.log('gradcheck', {'name': name, 'passed': report.passed, 'worst': report.worst})
    return report
