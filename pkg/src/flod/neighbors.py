"""Mean k-nearest-neighbor distances over 3D points.

Used by overlap pruning: a Gaussian is removed when the mean distance to its
k=3 nearest neighbors falls below half the level's scale floor. The grid
path is exact, not approximate: if fewer than k points lie within the search
ball of radius k*threshold, the mean provably exceeds the threshold, so the
keep/remove decision needs no further distances.
"""

from __future__ import annotations

import math

import numpy as np


def mean_knn_distance_brute(points: np.ndarray, k: int = 3) -> np.ndarray:
    """O(n^2) reference: mean distance to the k nearest neighbors of each point.

    With n - 1 < k neighbors available, uses all n - 1; with n <= 1 returns
    +inf (nothing to compare against).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n <= 1:
        return np.full(n, np.inf)
    k_eff = min(k, n - 1)
    diff = points[:, np.newaxis, :] - points[np.newaxis, :, :]
    d2 = np.sum(diff * diff, axis=2)
    np.fill_diagonal(d2, np.inf)
    part = np.partition(d2, k_eff - 1, axis=1)[:, :k_eff]
    d = np.sort(np.sqrt(part), axis=1)  # ascending, fixed summation order
    return np.sum(d, axis=1) / k_eff


def below_threshold_mask(points: np.ndarray, threshold: float, k: int = 3,
                         cell_size: float | None = None) -> np.ndarray:
    """Boolean mask of points whose mean k-NN distance is below `threshold`.

    Grid-accelerated; decision-equal to the brute-force oracle. cell_size
    defaults to the threshold itself.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n <= 1 or threshold <= 0:
        return np.zeros(n, dtype=bool)
    if n <= k + 1:
        return mean_knn_distance_brute(points, k) < threshold

    cell = cell_size if cell_size is not None else threshold
    search_radius = k * threshold
    reach = int(math.ceil(search_radius / cell))

    cells = np.floor(points / cell).astype(np.int64)
    grid: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, cells)):
        grid.setdefault(key, []).append(i)

    r2_cut = search_radius * search_radius
    mask = np.zeros(n, dtype=bool)
    for i in range(n):
        cx, cy, cz = cells[i]
        cand: list[int] = []
        for ox in range(-reach, reach + 1):
            for oy in range(-reach, reach + 1):
                for oz in range(-reach, reach + 1):
                    bucket = grid.get((cx + ox, cy + oy, cz + oz))
                    if bucket:
                        cand.extend(bucket)
        cand_arr = np.array(cand, dtype=np.int64)
        cand_arr = cand_arr[cand_arr != i]
        if len(cand_arr) == 0:
            continue
        diff = points[cand_arr] - points[i]
        d2 = np.sum(diff * diff, axis=1)
        d2 = d2[d2 <= r2_cut]
        if len(d2) < k:
            # at least one true neighbor lies beyond k*threshold, so the mean
            # over k neighbors exceeds threshold; keep the point
            continue
        d = np.sort(np.sqrt(np.partition(d2, k - 1)[:k]))
        mask[i] = (np.sum(d) / k) < threshold
    return mask
