"""Disturbance-action controllers and projection onto the parameter set.

The admissible set is the product of spectral-norm balls
``{M : ||M^(i)|| <= D}``; projection clips each block's singular values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .errors import ContractError

# relative slack so that a freshly clipped block (norm D up to rounding) counts as feasible
FEAS_RTOL = 1e-10


@dataclass(frozen=True)
class AdacParams:
    """Blocks ``M^(1..L)`` (each ``m x q``) with per-block norm bound ``D``."""

    blocks: tuple
    D: float = 1.0

    def __post_init__(self):
        blocks = tuple(np.array(np.atleast_2d(b), dtype=float) for b in self.blocks)
        if not blocks:
            raise ContractError("AdacParams needs at least one block")
        shape = blocks[0].shape
        if any(b.shape != shape for b in blocks):
            raise ContractError("all blocks must share one shape")
        if self.D <= 0:
            raise ContractError("D must be positive")
        for b in blocks:
            b.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def zeros(cls, L: int, m: int, q: int, D: float = 1.0) -> "AdacParams":
        return cls(tuple(np.zeros((m, q)) for _ in range(L)), D)

    @classmethod
    def from_vector(cls, theta, L, m, q, D=1.0) -> "AdacParams":
        theta = np.asarray(theta, dtype=float).reshape(L, m, q)
        return cls(tuple(theta), D)

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def m(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def q(self) -> int:
        return self.blocks[0].shape[1]

    def as_vector(self) -> np.ndarray:
        """Row-major stack of all blocks, block ``i`` first."""
        return np.concatenate([b.reshape(-1) for b in self.blocks])

    def block_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(b, 2) for b in self.blocks])

    def is_feasible(self) -> bool:
        return bool(np.all(self.block_norms() <= self.D * (1 + FEAS_RTOL)))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, b in enumerate(self.blocks, start=1):
            np.savetxt(d / f"M_{i}.csv", b, delimiter=",", fmt="%.17g")
        (d / "meta.json").write_text(json.dumps({"L": self.L, "m": self.m, "q": self.q, "D": self.D}))

    @classmethod
    def load(cls, directory) -> "AdacParams":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        blocks = [np.loadtxt(d / f"M_{i}.csv", delimiter=",", ndmin=2).reshape(meta["m"], meta["q"])
                  for i in range(1, meta["L"] + 1)]
        return cls(tuple(blocks), meta["D"])


def default_memory(T: int, n: int) -> int:
    """``max(ceil(ln T), 2n)``."""
    return max(math.ceil(math.log(T)), 2 * n)


def adac_control(M: AdacParams, hist) -> np.ndarray:
    """``u = sum_i M^(i) w_{t-i}`` from an :class:`~adaclab.behavior.AccHistory`."""
    if len(hist) < M.L:
        raise ContractError("history shorter than the controller memory")
    u = np.zeros(M.m)
    for i, Mi in enumerate(M.blocks, start=1):
        u += Mi @ hist.lag(i)
    return u


def dac_control(K, M: AdacParams, x, w_hist: List) -> np.ndarray:
    """Model-aware baseline ``K x + sum_i M^(i) w_{t-i}``.

    ``w_hist[-1]`` is ``w_{t-1}``; missing history counts as zero.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    u = K @ np.asarray(x, dtype=float).reshape(-1)
    for i, Mi in enumerate(M.blocks, start=1):
        if i <= len(w_hist):
            u = u + Mi @ np.asarray(w_hist[-i], dtype=float)
    return u


def _clip_block(B: np.ndarray, D: float) -> np.ndarray:
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    if s.size == 0 or s[0] <= D * (1 + FEAS_RTOL):
        return B
    return (U * np.minimum(s, D)) @ Vt


def project_M(M: AdacParams) -> AdacParams:
    """Euclidean projection onto the product of spectral balls of radius ``D``.

    Feasible blocks come back untouched (same values, bit for bit).
    """
    return AdacParams(tuple(_clip_block(b, M.D) for b in M.blocks), M.D)


def project_blocks(blocks: np.ndarray, D: float) -> np.ndarray:
    """Vectorised :func:`project_M` on an ``(L, m, q)`` array."""
    U, s, Vt = np.linalg.svd(blocks, full_matrices=False)
    over = s[:, 0] > D * (1 + FEAS_RTOL)
    if not np.any(over):
        return blocks
    out = blocks.copy()
    out[over] = np.einsum("lij,lj,ljk->lik", U[over], np.minimum(s[over], D), Vt[over])
    return out
