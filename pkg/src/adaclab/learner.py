"""Online gradient descent over controller parameters.

The counterfactual signal produced by :func:`adaclab.behavior.pi_traj` is
affine in the controller blocks, so the surrogate loss

    f_t(M) = c_t(u_t(M), s~_t(M))

has an exact gradient obtained by the chain rule through that affine map.
:class:`SensitivityTracker` maintains the map incrementally: the rollout is
the ``L``-step recursion of the Hankel pair driven by basis inputs, so each
new step costs ``O(L)`` small matrix products instead of a full replay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .behavior import HankelPair, extract_lstep
from .controller import AdacParams, project_M
from .errors import ContractError


def step_size(L: int, D: float, G: float, T: int) -> float:
    """``2 L D / (G sqrt(T))``."""
    return 2.0 * L * D / (G * math.sqrt(T))


@dataclass
class SensitivityMap:
    """``u_t(M) = u_jac @ theta`` and ``s~_t(M) = x_offset + x_jac @ theta``.

    ``theta`` is :meth:`AdacParams.as_vector` of the controller.
    """

    x_offset: np.ndarray
    x_jac: np.ndarray
    u_jac: np.ndarray
    L: int
    m: int
    q: int

    def evaluate(self, M):
        theta = M.as_vector() if isinstance(M, AdacParams) else np.asarray(M, dtype=float).reshape(-1)
        return self.u_jac @ theta, self.x_offset + self.x_jac @ theta


def _basis_input(w: np.ndarray, m: int) -> np.ndarray:
    # column a*q + b is the input e_a * w[b]
    return np.kron(np.eye(m), w[None, :])


class SensitivityTracker:
    """Incremental affine map from controller blocks to the counterfactual signal.

    Push the reconstructed accumulated disturbances in order with
    :meth:`push`; :meth:`map` returns the map for any step ``t`` whose
    disturbances ``0..t-1`` have been pushed.
    """

    def __init__(self, H: HankelPair, memory: int, capacity: int = 1024):
        self.H = H
        self.model = extract_lstep(H)
        self.memory = memory
        self.m, self.q, self.Lh = H.m, H.q, H.L
        self.d = self.m * self.q
        self._pad = max(self.Lh, memory) + 1
        self._w = []
        self._U = np.zeros((capacity + self._pad, self.m, self.d))
        self._Z = np.zeros((capacity + self._pad, self.q, self.d))
        self._z_done = 0  # Z_s computed for s < _z_done (s = 0 is always zero)

    def _grow(self, need):
        cap = self._U.shape[0]
        if need + self._pad < cap:
            return
        new = max(2 * cap, need + self._pad + 1)
        for name in ("_U", "_Z"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:])
            arr[: old.shape[0]] = old
            setattr(self, name, arr)

    def push(self, w) -> None:
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.shape[0] != self.q:
            raise ContractError("disturbance dimension mismatch")
        k = len(self._w)
        self._w.append(w)
        # w_k enters the basis input at time k+1
        self._grow(k + 2)
        self._U[k + 1 + self._pad] = _basis_input(w, self.m)

    def _fill_z(self, upto):
        Lh, pad = self.Lh, self.pad
        H1, H2 = self.model.H1, self.model.H2
        for s in range(max(self._z_done, 1), upto + 1):
            u_stack = self._U[s - Lh + 1 + pad: s + pad].reshape(-1, self.d)
            self._Z[s + pad] = H1 @ u_stack + H2 @ self._Z[s - Lh + 1 + pad]
        self._z_done = max(self._z_done, upto + 1)

    @property
    def pad(self):
        return self._pad

    def map(self, t: int) -> SensitivityMap:
        if t < 0:
            raise ContractError("t must be nonnegative")
        if len(self._w) < t:
            raise ContractError(f"map for step {t} needs {t} pushed disturbances, have {len(self._w)}")
        self._grow(t + 1)
        self._fill_z(t)
        pad, L = self._pad, self.memory
        x_jac = np.concatenate([self._Z[t - i + 1 + pad] for i in range(1, L + 1)], axis=1)
        u_jac = np.concatenate([self._U[t - i + 1 + pad] for i in range(1, L + 1)], axis=1)
        x_off = self._w[t - 1].copy() if t >= 1 else np.zeros(self.q)
        return SensitivityMap(x_off, x_jac, u_jac, L, self.m, self.q)


def build_sensitivity(w_hist, H: HankelPair, t: int, window=None, memory=None) -> SensitivityMap:
    """Affine map of ``(u_t, s~_t)`` in the controller blocks, built from scratch.

    ``memory`` is the number of controller blocks (defaults to the Hankel
    depth).  With ``window`` set, disturbances older than ``t - window`` are
    treated as zero, matching :func:`adaclab.behavior.pi_traj`.
    """
    memory = H.L if memory is None else memory
    W = np.asarray(w_hist, dtype=float).reshape(-1, H.q)
    if W.shape[0] < t:
        raise ContractError(f"need {t} reconstructed disturbances, got {W.shape[0]}")
    lo = 0 if window is None else max(0, t - window)
    tracker = SensitivityTracker(H, memory, capacity=t + 2)
    for k in range(t):
        tracker.push(W[k] if k >= lo else np.zeros(H.q))
    return tracker.map(t)


def grad_f(M: AdacParams, S: SensitivityMap, cost, t: int) -> np.ndarray:
    """Exact gradient of ``c_t(u_t(M), s~_t(M))``, shaped ``(L, m, q)``.

    Both cost arguments depend on ``M``; the input term is not frozen.
    """
    u, s = S.evaluate(M)
    gu, gx = cost.grad(t, u, s)
    g = S.u_jac.T @ gu + S.x_jac.T @ gx
    return g.reshape(M.L, M.m, M.q)


def ogd_step(M: AdacParams, grad, lam: float) -> AdacParams:
    grad = np.asarray(grad, dtype=float).reshape(M.L, M.m, M.q)
    if not np.any(grad):
        return M
    stepped = AdacParams(tuple(b - lam * g for b, g in zip(M.blocks, grad)), M.D)
    return project_M(stepped)
