"""Within-step resolution of the inter-connected obstacles.

All solvers end a backward step with per-mode continuation values ``C`` of
shape ``(q, ...)`` and must find ``Y_i = max(C_i, max_{j != i}(-l_ij + Y_j))``.
"""

from __future__ import annotations

import numpy as np


def obstacle(values: np.ndarray, costs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best switch value ``max_{j != i}(-l_ij + values_j)`` and its argmax (smallest j on ties).

    ``costs`` is a q x q matrix with ``+inf`` on the diagonal.
    """
    # (i, j, ...) candidates
    cand = values[None, ...] - costs.reshape(costs.shape + (1,) * (values.ndim - 1))
    arg = np.argmax(cand, axis=1)
    best = np.take_along_axis(cand, arg[:, None, ...], axis=1)[:, 0, ...]
    return best, arg


def mode_obstacle(values: np.ndarray, costs: np.ndarray, i: int) -> np.ndarray:
    row = costs[i].reshape((-1,) + (1,) * (values.ndim - 1))
    return np.max(values - row, axis=0)


def resolve_switches(cont: np.ndarray, costs: np.ndarray) -> tuple[np.ndarray, int]:
    """Gauss-Seidel sweeps over modes to the exact fixpoint.

    Returns the coupled values and the number of sweeps performed (including
    the final confirming sweep).  A positive floor on every switching cost
    rules out free cycles, so at most q - 1 sweeps can change anything.
    """
    q = cont.shape[0]
    y = cont.copy()
    for sweep in range(1, q + 2):
        changed = False
        for i in range(q):
            new = np.maximum(cont[i], mode_obstacle(y, costs, i))
            if not np.array_equal(new, y[i]):
                changed = True
                y[i] = new
        if not changed:
            return y, sweep
    raise RuntimeError(f"mode coupling did not stabilize within {q + 1} sweeps; is there a cost-free cycle?")
