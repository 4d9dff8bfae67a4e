"""Hankel (behavioral) representation of an LTI system.

A clean trajectory ``(u^d, s^d)`` of length ``N`` gives the block-Hankel
pair ``H_L(u^d)``, ``H_L(s^d)``.  Every length-``L`` noise-free trajectory
is a combination of its columns, which is all that is needed to

* recover the accumulated disturbance from measured data (:func:`acc_noise`),
* roll a counterfactual controller forward (:func:`pi_traj`), and
* read off an equivalent ``L``-step recursion (:func:`extract_lstep`).

The signal ``s`` is either the state (``q = n``) or the output (``q = p``);
nothing here depends on which.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, SingularRepresentationError

RANK_TOL = 1e-8
PINV_CUTOFF = 1e-10


def _as_sequence(seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ContractError(f"expected a sequence of vectors, got shape {arr.shape}")
    return arr


def build_hankel(seq, L: int) -> np.ndarray:
    """Block-Hankel matrix of depth ``L``; column ``j`` stacks ``seq[j..j+L-1]``.

    Examples:
        >>> build_hankel([1, 2, 3, 4], 2)
        array([[1., 2., 3.],
               [2., 3., 4.]])
    """
    X = _as_sequence(seq)
    length, d = X.shape
    if L < 1:
        raise ContractError("L must be at least 1")
    if L > length:
        raise ContractError(f"window L={L} exceeds sequence length {length}")
    cols = length - L + 1
    # windows[j] is the (L, d) slab starting at j; flatten each into a column
    windows = np.lib.stride_tricks.sliding_window_view(X, (L, d))[:, 0]
    return windows.reshape(cols, L * d).T.copy()


def _rank_ok(s: np.ndarray, rows: int) -> bool:
    if s.size < rows or s[0] == 0.0:
        return False
    return s[rows - 1] > RANK_TOL * s[0]


def persistently_exciting(u_seq, order: int) -> bool:
    """True iff the depth-``order`` Hankel matrix of ``u_seq`` has full row rank."""
    if order < 1:
        raise ContractError("order must be at least 1")
    U = _as_sequence(u_seq)
    if U.shape[0] < order:
        return False
    Hu = build_hankel(U, order)
    if Hu.shape[1] < Hu.shape[0]:
        return False
    s = np.linalg.svd(Hu, compute_uv=False)
    return _rank_ok(s, Hu.shape[0])


def _pinv_full_row_rank(Hux: np.ndarray) -> np.ndarray:
    rows = Hux.shape[0]
    if Hux.shape[1] < rows:
        raise SingularRepresentationError(
            f"stacked Hankel matrix is {Hux.shape[0]}x{Hux.shape[1]}: too few columns for full row rank")
    Uo, s, Vt = np.linalg.svd(Hux, full_matrices=False)
    if not _rank_ok(s, rows):
        raise SingularRepresentationError(
            f"stacked Hankel matrix is rank deficient (sigma_min/sigma_max = {s[-1] / max(s[0], 1e-300):.3g}); "
            "re-sample the probe input")
    keep = s > PINV_CUTOFF * s[0]
    return (Vt[keep].T / s[keep]) @ Uo[:, keep].T


def least_norm_solve(Hux, rhs) -> np.ndarray:
    """Minimum-norm ``alpha`` with ``Hux @ alpha = rhs`` (``Hux`` full row rank).

    Computed through an SVD rather than ``Hux' (Hux Hux')^{-1}`` so that ill
    conditioned probes do not square the condition number.
    """
    Hux = np.atleast_2d(np.asarray(Hux, dtype=float))
    rhs = np.asarray(rhs, dtype=float).reshape(-1)
    if rhs.shape[0] != Hux.shape[0]:
        raise ContractError(f"rhs has length {rhs.shape[0]}, expected {Hux.shape[0]}")
    return _pinv_full_row_rank(Hux) @ rhs


@dataclass(frozen=True)
class HankelPair:
    """Input/signal Hankel matrices from one (possibly estimated) clean trajectory."""

    Hu: np.ndarray
    Hs: np.ndarray
    L: int
    m: int
    q: int

    def __post_init__(self):
        Hu = np.asarray(self.Hu, dtype=float)
        Hs = np.asarray(self.Hs, dtype=float)
        if Hu.shape[0] != self.m * self.L or Hs.shape[0] != self.q * self.L:
            raise ContractError("Hankel row counts do not match (m, q, L)")
        if Hu.shape[1] != Hs.shape[1]:
            raise ContractError("Hankel matrices must have the same number of columns")
        if self.L < 2:
            raise ContractError("the Hankel representation needs L >= 2")
        Hux = np.vstack([Hu, Hs[: self.q]])
        pinv = _pinv_full_row_rank(Hux)
        prop = Hs[(self.L - 1) * self.q:] @ pinv
        for name, val in (("Hu", Hu), ("Hs", Hs), ("Hux", Hux), ("pinv", pinv), ("propagator", prop)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_sequences(cls, u_seq, s_seq, L: int) -> "HankelPair":
        U = _as_sequence(u_seq)
        S = _as_sequence(s_seq)
        if U.shape[0] != S.shape[0]:
            raise ContractError("input and signal sequences must have equal length")
        return cls(build_hankel(U, L), build_hankel(S, L), L, U.shape[1], S.shape[1])

    @property
    def N(self) -> int:
        return self.Hu.shape[1] + self.L - 1

    @property
    def signal_dim(self) -> int:
        return self.q

    def last_signal_row(self) -> np.ndarray:
        return self.Hs[(self.L - 1) * self.q:]

    def solve(self, rhs) -> np.ndarray:
        """Minimum-norm alpha for the stacked system (cached pseudo-inverse)."""
        return self.pinv @ np.asarray(rhs, dtype=float).reshape(-1)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "Hu.csv", self.Hu, delimiter=",", fmt="%.17g")
        np.savetxt(d / "Hs.csv", self.Hs, delimiter=",", fmt="%.17g")
        meta = {"L": self.L, "N": self.N, "m": self.m, "q": self.q}
        (d / "meta.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "HankelPair":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        cols = meta["N"] - meta["L"] + 1
        Hu = np.loadtxt(d / "Hu.csv", delimiter=",", ndmin=2).reshape(meta["m"] * meta["L"], cols)
        Hs = np.loadtxt(d / "Hs.csv", delimiter=",", ndmin=2).reshape(meta["q"] * meta["L"], cols)
        return cls(Hu, Hs, meta["L"], meta["m"], meta["q"])


@dataclass(frozen=True)
class LStepModel:
    """``s_{t+1} = H2 s_{t-L+2} + H1 [u_{t-L+2}; ...; u_t] + v_t``.

    ``H0`` multiplies the padded ``u_{t+1}`` slot and vanishes for exact
    clean data.
    """

    H1: np.ndarray
    H0: np.ndarray
    H2: np.ndarray

    @property
    def L(self) -> int:
        return self.H1.shape[1] // self.H0.shape[1] + 1


def extract_lstep(H: HankelPair) -> LStepModel:
    P = H.propagator
    m, L = H.m, H.L
    return LStepModel(P[:, : m * (L - 1)].copy(), P[:, m * (L - 1): m * L].copy(), P[:, m * L:].copy())


def lstep_step(model: LStepModel, x_old, u_window, v) -> np.ndarray:
    q = model.H2.shape[0]
    x_old = np.asarray(x_old, dtype=float).reshape(-1)
    u = np.asarray(u_window, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    if x_old.shape[0] != q or v.shape[0] != q or u.shape[0] != model.H1.shape[1]:
        raise ContractError("dimension mismatch in lstep_step")
    return model.H2 @ x_old + model.H1 @ u + v


def _stacked_rhs(H: HankelPair, u_window, s_old, w_prev) -> np.ndarray:
    u = np.asarray(u_window, dtype=float).reshape(-1)
    if u.shape[0] != H.m * (H.L - 1):
        raise ContractError(f"input window has {u.shape[0]} entries, expected {H.m * (H.L - 1)}")
    s_old = np.asarray(s_old, dtype=float).reshape(-1)
    w_prev = np.asarray(w_prev, dtype=float).reshape(-1)
    # the u_{t+1} slot is padded with zero; it cannot influence s_{t+1}
    return np.concatenate([u, np.zeros(H.m), s_old - w_prev])


def acc_noise(u_window, s_old, s_new, w_prev, H: HankelPair) -> np.ndarray:
    """Reconstruct the accumulated disturbance at time ``t``.

    Args:
        u_window: inputs ``u_{t-L+2} .. u_t`` (``L-1`` of them).
        s_old: measured signal ``s_{t-L+2}``.
        s_new: measured signal ``s_{t+1}``.
        w_prev: previously reconstructed accumulated disturbance at ``t-L+1``.
        H: the Hankel pair.

    The clean part of the window is matched by a minimum-norm combination of
    Hankel columns; whatever the clean part cannot explain in ``s_{t+1}`` is
    the accumulated disturbance.
    """
    alpha = H.solve(_stacked_rhs(H, u_window, s_old, w_prev))
    return np.asarray(s_new, dtype=float).reshape(-1) - H.last_signal_row() @ alpha


def _blocks(M):
    blocks = getattr(M, "blocks", M)
    return [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]


def counterfactual_inputs(w_hist, M, t: int, window=None) -> np.ndarray:
    """Inputs ``u~_0..u~_t`` of the fixed controller ``M`` against ``w_hist``."""
    blocks = _blocks(M)
    W = _as_sequence(w_hist) if len(w_hist) else np.zeros((0, blocks[0].shape[1]))
    m = blocks[0].shape[0]
    U = np.zeros((t + 1, m))
    lo = 0 if window is None else max(0, t - window)
    for tau in range(t + 1):
        for i, Mi in enumerate(blocks, start=1):
            k = tau - i
            if lo <= k < W.shape[0]:
                U[tau] += Mi @ W[k]
    return U


def pi_traj(w_hist, M, H: HankelPair, t: int, window=None) -> np.ndarray:
    """Signal at time ``t`` of the fixed controller ``M`` replayed on ``w_hist``.

    Rolls forward one Hankel solve per step from zero initial conditions,
    treating ``w_hist[k]`` as the accumulated disturbance at ``k``.  With
    ``window`` set, disturbances older than ``t - window`` are dropped.
    """
    if t < 0:
        raise ContractError("t must be nonnegative")
    q, L = H.q, H.L
    W = _as_sequence(w_hist) if len(w_hist) else np.zeros((0, q))
    if t > 0 and W.shape[0] < t:
        raise ContractError(f"need {t} reconstructed disturbances, got {W.shape[0]}")
    if t == 0:
        return np.zeros(q)
    lo = 0 if window is None else max(0, t - window)
    Wp = np.zeros((t, q))
    Wp[lo:t] = W[lo:t]
    U = counterfactual_inputs(Wp, M, t)
    m = U.shape[1]
    if m != H.m:
        raise ContractError("controller input dimension does not match the Hankel pair")

    def w_at(k):
        return Wp[k] if k >= 0 else np.zeros(q)

    def u_at(k):
        return U[k] if k >= 0 else np.zeros(m)

    X = np.zeros((t + 1, q))

    def x_at(k):
        return X[k] if k >= 0 else np.zeros(q)

    last = H.last_signal_row()
    for tau in range(t):
        u_win = np.concatenate([u_at(k) for k in range(tau - L + 2, tau + 1)]) if L > 1 else np.zeros(0)
        rhs = _stacked_rhs(H, u_win, x_at(tau - L + 2), w_at(tau - L + 1))
        X[tau + 1] = last @ H.solve(rhs) + w_at(tau)
    return X[t]


class AccHistory:
    """The last ``L`` reconstructed accumulated disturbances (zeros before time 0)."""

    def __init__(self, L: int, q: int):
        if L < 1:
            raise ContractError("L must be at least 1")
        self.L = L
        self.q = q
        self.t = 0  # index of the next disturbance to be pushed
        self._buf = deque([np.zeros(q) for _ in range(L)], maxlen=L)

    def push(self, w) -> None:
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.shape[0] != self.q:
            raise ContractError("disturbance dimension mismatch")
        self._buf.append(w.copy())
        self.t += 1

    def lag(self, i: int) -> np.ndarray:
        """Disturbance at ``t - i`` (``1 <= i <= L``), where ``t`` is the next index."""
        if not 1 <= i <= self.L:
            raise ContractError(f"lag {i} outside 1..{self.L}")
        return self._buf[self.L - i]

    def __len__(self) -> int:
        return len(self._buf)
