"""DropBlock on skip-connect outputs and super-net soft-label guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, InputError
from .tensorcore import DTensor

DEFAULT_MILESTONES = ((0.0, 0.0), (1.0 / 3.0, 0.1), (2.0 / 3.0, 0.2))
DISTILL_EPS = 1e-12


@dataclass
class DropBlockConfig:
    block_size: int = 3
    milestones: tuple[tuple[float, float], ...] = DEFAULT_MILESTONES
    # "block" (DropBlock) or "element" (plain dropout, ablation only)
    mode: str = "block"

    def __post_init__(self):
        self.milestones = tuple((float(f), float(p)) for f, p in self.milestones)
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigurationError(f"block_size must be a positive odd integer, got {self.block_size}")
        if self.mode not in ("block", "element"):
            raise ConfigurationError(f"unknown drop mode {self.mode!r}")
        fracs = [f for f, _ in self.milestones]
        if not self.milestones or self.milestones[0] != (0.0, 0.0):
            raise ConfigurationError("first milestone must be (0.0, 0.0)")
        if any(b <= a for a, b in zip(fracs, fracs[1:])) or fracs[-1] > 1.0:
            raise ConfigurationError("milestone fractions must be strictly increasing within [0, 1]")
        if any(not 0.0 <= p < 1.0 for _, p in self.milestones):
            raise ConfigurationError("drop probabilities must lie in [0, 1)")


@dataclass
class DistillConfig:
    lambda_final: float = 0.01

    def __post_init__(self):
        if self.lambda_final < 0:
            raise ConfigurationError("lambda_final must be non-negative")


@dataclass
class DropState:
    """What a forward pass needs to drop skip-connect outputs."""
    drop_prob: float
    rng: np.random.Generator
    block_size: int = 3
    mode: str = "block"

    def mask(self, shape) -> np.ndarray:
        if self.mode == "element":
            m = elementwise_mask(shape, self.drop_prob, self.rng)
        else:
            bs = min(self.block_size, shape[2], shape[3])
            if bs % 2 == 0:
                bs -= 1
            m = dropblock_mask(shape, bs, self.drop_prob, self.rng)
        return m


def seed_rate(h: int, w: int, block_size: int, drop_prob: float) -> float:
    return drop_prob * h * w / (block_size ** 2 * (h - block_size + 1) * (w - block_size + 1))


def dropblock_mask(shape, block_size: int, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Binary keep-mask with ``block_size``-square holes, no survivor rescaling."""
    n, c, h, w = shape
    if block_size > min(h, w):
        raise ConfigurationError(f"block_size {block_size} exceeds spatial extent {(h, w)}")
    if not 0.0 <= drop_prob < 1.0:
        raise ConfigurationError(f"drop_prob must lie in [0, 1), got {drop_prob}")
    dtype = tc.default_dtype()
    if drop_prob == 0.0:
        return np.ones(shape, dtype=dtype)
    gamma = seed_rate(h, w, block_size, drop_prob)
    seeds = rng.random((n, c, h - block_size + 1, w - block_size + 1)) < gamma
    dropped = np.zeros(shape, dtype=bool)
    for dy in range(block_size):
        for dx in range(block_size):
            dropped[:, :, dy:dy + h - block_size + 1, dx:dx + w - block_size + 1] |= seeds
    return (~dropped).astype(dtype)


def elementwise_mask(shape, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= drop_prob < 1.0:
        raise ConfigurationError(f"drop_prob must lie in [0, 1), got {drop_prob}")
    return (rng.random(shape) >= drop_prob).astype(tc.default_dtype())


def identity_drop_forward(x: DTensor, select_coeff: DTensor, mask: np.ndarray) -> DTensor:
    """``select_coeff * (x * mask)``: the skip-connect output with a dropped-out gradient path."""
    return tc.mul(select_coeff, tc.mul(x, np.asarray(mask, dtype=x.dtype)))


def drop_schedule(progress: float, cfg: DropBlockConfig) -> float:
    value = 0.0
    for frac, prob in cfg.milestones:
        if frac <= progress:
            value = prob
    return value


def lambda_schedule(progress: float, cfg: DistillConfig) -> float:
    return progress * cfg.lambda_final


def _check_rows(p: np.ndarray, what: str) -> None:
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-5, rtol=0):
        raise InputError(f"{what} rows must sum to 1 (±1e-5)")


def distill_loss(p_super, p_sub: DTensor, lam: float) -> DTensor:
    """``lam * mean_n[-sum_c p_super * log(p_sub + eps)]``.

    ``p_super`` is treated as a constant; gradients reach only ``p_sub``.
    """
    target = np.asarray(p_super.data if isinstance(p_super, DTensor) else p_super, dtype=p_sub.dtype)
    _check_rows(target, "p_super")
    _check_rows(p_sub.data, "p_sub")
    logq = tc.log(tc.add(p_sub, DISTILL_EPS))
    ce = tc.mul(tc.sum_(tc.mul(logq, target)), -1.0 / p_sub.shape[0])
    return tc.mul(ce, float(lam))


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(p + DISTILL_EPS)).sum(axis=-1)
