"""Manhattan distances, raw and scale-free."""
from __future__ import annotations

import numpy as np
import torch


def manhattan(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def l1_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.abs().sum(dim=-1, keepdim=True).clamp_min(1e-12)


def pairwise_manhattan(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``[len(x), len(y)]`` matrix of L1 distances."""
    if x.shape[0] == 0 or y.shape[0] == 0:
        return x.new_zeros((x.shape[0], y.shape[0]))
    return torch.cdist(x, y, p=1)


def normalized_pairwise(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """L1 distance between L1-normalised rows, always in ``[0, 2]``.

    The dangling threshold and the inter-link threshold are absolute numbers,
    so they are applied on this scale-free distance rather than on raw
    embeddings whose magnitude depends on dimension and initialisation.
    """
    return pairwise_manhattan(l1_normalize(x), l1_normalize(y))
