import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedgeo.config import ExperimentConfig
from fedgeo.federation import run_training


@pytest.fixture(scope="session")
def default_task_runs():
    """Memoized full runs of the default synthetic task, shared across the
    acceptance criteria so each expensive training run happens once."""
    cache = {}

    def get(seed: int, **overrides):
        key = (seed, tuple(sorted(overrides.items())))
        if key not in cache:
            cache[key] = run_training(ExperimentConfig(master_seed=seed, **overrides))
        return cache[key]

    return get


def finite_difference_gradients(loss_fn, param_arrays: dict, eps: float = 1e-5) -> dict:
    """Central finite differences of ``loss_fn(dict of numpy arrays)`` per coordinate."""
    grads = {}
    for name, arr in param_arrays.items():
        flat = arr.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            up = dict(param_arrays)
            dn = dict(param_arrays)
            fu = flat.copy()
            fu[i] += eps
            fd = flat.copy()
            fd[i] -= eps
            up[name] = fu.reshape(arr.shape)
            dn[name] = fd.reshape(arr.shape)
            g[i] = (loss_fn(up) - loss_fn(dn)) / (2.0 * eps)
        grads[name] = g.reshape(arr.shape)
    return grads


def gradient_relative_error(analytic: dict, numeric: dict) -> float:
    """Vector-norm relative error over the concatenated gradient coordinates."""
    ga = np.concatenate([analytic[n].reshape(-1) for n in sorted(analytic)])
    gf = np.concatenate([numeric[n].reshape(-1) for n in sorted(numeric)])
    return float(np.linalg.norm(ga - gf) / max(np.linalg.norm(gf), 1e-12))
