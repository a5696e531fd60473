"""Gumbel-softmax relaxation and two-operation pair sampling."""

from __future__ import annotations

import itertools
import logging
from typing import Sequence

import numpy as np

from . import tensor as T
from .search_space import ArchitectureParams, CellType, EdgeSelection
from .tensor import Tensor

log = logging.getLogger(__name__)

_TINY = np.finfo(np.float64).tiny


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel draws as ``-log(-log(u))``."""
    u = np.clip(rng.random(shape), _TINY, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def relax(alpha: Tensor, eps: np.ndarray | float, tau: float) -> Tensor:
    """softmax((alpha + eps) / tau), differentiable in ``alpha``."""
    alpha = T.as_tensor(alpha)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not np.all(np.isfinite(alpha.data)):
        raise ValueError("non-finite logits")
    return T.softmax((alpha + np.asarray(eps, dtype=float)) * (1.0 / tau))


def all_pairs(n: int) -> list[tuple[int, int]]:
    if n < 2:
        raise ValueError(f"pair sampling needs at least 2 operations, got {n}")
    return list(itertools.combinations(range(n), 2))


def pair_probabilities(zbar: np.ndarray) -> dict[tuple[int, int], float]:
    """q({a, b}) = (z_a + z_b) / (n - 1) for every unordered pair."""
    zbar = np.asarray(zbar, dtype=float)
    n = zbar.shape[0]
    return {(a, b): (zbar[a] + zbar[b]) / (n - 1) for a, b in all_pairs(n)}


def inclusion_marginals(zbar: np.ndarray) -> np.ndarray:
    """Probability that each operation is part of the sampled pair."""
    zbar = np.asarray(zbar, dtype=float)
    n = zbar.shape[0]
    return zbar + (1.0 - zbar) / (n - 1)


def draw_pair_indices(zbar: np.ndarray, rng: np.random.Generator, size: int | None = None):
    """Inverse-CDF draw of pair indices into ``all_pairs(len(zbar))``."""
    pairs = all_pairs(len(zbar))
    q = np.array([(zbar[a] + zbar[b]) for a, b in pairs]) / (len(zbar) - 1)
    cdf = np.cumsum(q)
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(pairs) - 1)


def rescale_pair(zbar: Tensor, pair: tuple[int, int]) -> Tensor:
    """(z_a, z_b) / (z_a + z_b), keeping the graph back to ``alpha``."""
    picked = T.getitem(zbar, (list(pair),))
    return picked / T.tsum(picked)


def sample_pair(alpha: Tensor, tau: float, rng: np.random.Generator,
                catalog: Sequence | None = None) -> EdgeSelection:
    """Draw one edge's two-operation selection.

    Fresh Gumbel noise gives the relaxed weights; a pair is drawn with the
    pair probabilities and its two weights are renormalized to sum to one.
    """
    alpha = T.as_tensor(alpha)
    n = alpha.shape[-1]
    eps = gumbel_noise(rng, (n,))
    zbar = relax(alpha, eps, tau)
    a, b = all_pairs(n)[int(draw_pair_indices(zbar.data, rng))]
    weights = rescale_pair(zbar, (a, b))
    kinds = (a, b) if catalog is None else (catalog[a], catalog[b])
    return EdgeSelection(weights, tuple(kinds))


def sample_architecture(params: ArchitectureParams, tau: float,
                        rng: np.random.Generator) -> dict[CellType, list[EdgeSelection]]:
    """Independent pair sample on every edge of every cell type."""
    out = {}
    for ct in CellType:
        logits = params.logits[ct]
        out[ct] = [sample_pair(logits[e], tau, rng, params.catalog) for e in range(logits.shape[0])]
    return out


def temperature(epoch: int, epochs: int, tau0: float = 1.0, tau_min: float = 0.05) -> float:
    """Exponential schedule reaching ``tau_min`` at the final epoch."""
    if tau0 <= 0 or tau_min <= 0:
        raise ValueError("temperatures must be positive")
    if epochs <= 1:
        return tau0
    rate = (tau_min / tau0) ** (1.0 / (epochs - 1))
    return max(tau_min, tau0 * rate**epoch)


def log_tau(epoch: int, tau: float) -> str:
    line = f"epoch {epoch} tau {tau:.6g}"
    log.info(line)
    return line
