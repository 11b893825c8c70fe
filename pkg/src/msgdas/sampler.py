"""Gumbel top-K sampling of mutually exclusive one-hot selections.

One Gumbel vector is drawn per edge and shared by the K sequential draws.
Each draw takes a softmax over the still-feasible entries of
``r = (alpha + g) / tau``, emits the one-hot argmax, and removes that entry by
adding ``log(1 - onehot)`` (i.e. ``-inf``) to ``r``.  This is sampling without
replacement with Plackett-Luce probabilities.

All functions accept a single edge (``[|O|]``) or a stack of edges
(``[..., |O|]``); rows are sampled independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, ContractError, ExhaustedSamplerError
from .tensorcore import DTensor

GUMBEL_EPS = 1e-20


@dataclass
class GumbelState:
    r: DTensor
    feasible: np.ndarray
    draws_taken: int = 0


@dataclass
class DrawResult:
    soft: DTensor
    hard: np.ndarray
    index: np.ndarray


def gumbel_noise(shape, rng: np.random.Generator, eps: float = GUMBEL_EPS) -> np.ndarray:
    # 1 - eps rounds to 1.0 for tiny eps, so cap at the largest double below one
    u = np.clip(rng.random(shape), eps, min(1.0 - eps, np.nextafter(1.0, 0.0)))
    return -np.log(-np.log(u))


def init_state(alpha, tau: float, noise: np.ndarray) -> GumbelState:
    """Build ``r = (alpha + g) / tau``; differentiable in ``alpha`` if it is a DTensor."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    alpha = tc.as_tensor(alpha)
    r = tc.mul(tc.add(alpha, np.asarray(noise, dtype=alpha.dtype)), 1.0 / tau)
    return GumbelState(r=r, feasible=np.isfinite(r.data), draws_taken=0)


def soft_select(state: GumbelState) -> DrawResult:
    if not state.feasible.any(axis=-1).all():
        raise ExhaustedSamplerError("no feasible entry left to select")
    soft = tc.softmax(state.r, axis=-1)
    index = np.argmax(state.r.data, axis=-1)
    n = state.r.shape[-1]
    hard = np.eye(n, dtype=state.r.dtype)[index]
    return DrawResult(soft=soft, hard=hard, index=index)


def mask_update(state: GumbelState, hard: np.ndarray) -> GumbelState:
    hard = np.asarray(hard)
    if hard.shape != state.r.shape or not np.all(hard.sum(axis=-1) == 1):
        raise ContractError("mask_update needs a one-hot selection per row")
    if np.any(hard.astype(bool) & ~state.feasible):
        raise ContractError("mask_update selected an entry that is no longer feasible")
    with np.errstate(divide="ignore"):
        penalty = np.log(1.0 - hard).astype(state.r.dtype)
    r = tc.add(state.r, penalty)
    return GumbelState(r=r, feasible=state.feasible & (hard == 0), draws_taken=state.draws_taken + 1)


def sample_topk(alpha, k: int, tau: float, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None, replacement: bool = False) -> list[DrawResult]:
    """Draw ``k`` distinct selections per row of ``alpha``.

    ``noise`` overrides the Gumbel draw.  ``replacement=True`` redraws noise
    for every k without masking; it exists only as a baseline for tests.
    """
    n = np.shape(alpha.data if isinstance(alpha, DTensor) else alpha)[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"K must lie in [1, {n}], got {k}")
    shape = np.shape(alpha.data if isinstance(alpha, DTensor) else alpha)
    if noise is None:
        if rng is None:
            raise ConfigurationError("sample_topk needs either rng or noise")
        noise = gumbel_noise(shape, rng)
    if replacement:
        draws = [soft_select(init_state(alpha, tau, noise))]
        for _ in range(k - 1):
            draws.append(soft_select(init_state(alpha, tau, gumbel_noise(shape, rng))))
        return draws
    state = init_state(alpha, tau, noise)
    draws = []
    for i in range(k):
        d = soft_select(state)
        draws.append(d)
        if i + 1 < k:
            state = mask_update(state, d.hard)
    return draws


def ste_coefficient(d: DrawResult) -> DTensor:
    """Forward value ``d.hard``; backward uses the Jacobian of ``d.soft``."""
    return tc.straight_through(d.hard, d.soft)


def plackett_luce_pair_probs(alpha: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Closed-form P(first=i, second=j) for sequential softmax without replacement."""
    w = np.exp(np.asarray(alpha, dtype=np.float64) / tau)
    n = w.size
    probs = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                probs[i, j] = w[i] / w.sum() * w[j] / (w.sum() - w[i])
    return probs
