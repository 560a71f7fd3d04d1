"""Minimum-cost assignment (Kuhn-Munkres with row/column potentials).

Rectangular inputs are padded with zero-cost dummy rows or columns; rows
matched to a dummy column come back as ``None``.
"""

from __future__ import annotations

import numpy as np


def hungarian(cost) -> list[int | None]:
    """Return ``assignment[row] = column`` minimising the total cost.

    O(n^3) shortest augmenting path formulation on the padded square
    matrix.  Every row is assigned when rows <= columns.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {c.shape}")
    n_rows, n_cols = c.shape
    if n_rows == 0 or n_cols == 0:
        return [None] * n_rows
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    n = max(n_rows, n_cols)
    sq = np.zeros((n, n))
    sq[:n_rows, :n_cols] = c

    # 1-based potentials; index 0 is the virtual root column
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=int)  # match_col[j] = row matched to column j
    way = np.zeros(n + 1, dtype=int)

    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta = np.inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = sq[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        # flip the augmenting path
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1

    assignment: list[int | None] = [None] * n_rows
    for j in range(1, n + 1):
        i = match_col[j]
        if i and i <= n_rows and j <= n_cols:
            assignment[i - 1] = j - 1
    return assignment


def assignment_cost(cost, assignment: list[int | None]) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[i, j] for i, j in enumerate(assignment) if j is not None))
