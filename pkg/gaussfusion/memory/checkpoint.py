from typing import Any, Dict, Mapping, Optional

from gaussfusion.core.errors import DatasetError
from gaussfusion.core.observability import Observability
from gaussfusion.core.params import ParameterStore
from gaussfusion.memory.container import read_container, write_container


def save_checkpoint(path: str, store: ParameterStore, extra: Optional[Mapping[str, Any]] = None) -> str:
    """Persist parameters, AdamW moments, seed and step counter."""
    state = store.state()
    first = next(iter(store.params.values()), None)
    meta = {
        'kind': 'checkpoint',
        'seed': store.seed,
        'step': store.step,
        'dtype': str(first.values.dtype) if first is not None else 'float64',
        'parameters': store.paths(),
        'moments': sorted(store.moments),
    }
    meta.update(extra or {})
    write_container(path, state, meta)
    Observability.log('checkpoint_saved', {'path': path, 'step': store.step, 'params': len(store)})
    return path


def load_checkpoint(path: str, store: ParameterStore) -> Dict[str, Any]:
    """Restore ``store`` in place from ``path``; returns the checkpoint metadata."""
    arrays, meta = read_container(path)
    if meta.get('kind') != 'checkpoint':
        raise DatasetError(f"{path}: not a checkpoint container")
    missing = [p for p in store.paths() if f"param/{p}" not in arrays]
    if missing:
        raise DatasetError(f"{path}: checkpoint lacks parameters {missing[:5]}")
    store.load_state(arrays, step=meta.get('step', 0))
    store.seed = int(meta.get('seed', store.seed))
    return meta
