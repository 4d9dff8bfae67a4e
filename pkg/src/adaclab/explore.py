"""Exploration stage: random +-1 rollouts and an estimated clean trajectory.

Stacking ``I0`` independent length-``N`` rollouts from rest gives
``X = Phi U + W`` with ``Phi`` the block Toeplitz impulse-response map.
Because the +-1 inputs are zero-mean and independent of the disturbances,
``X U' / I0`` estimates ``Phi``; applying it to a fresh probe ``u^d``
yields an approximately clean signal trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .behavior import persistently_exciting
from .errors import ConfigError, ContractError, PersistencyError
from .lti import LtiSystem, toeplitz_impulse

PROBE_RETRIES = 10


@dataclass
class RolloutBatch:
    """Columns are rollouts: ``X`` is ``(qN, I0)``, ``U`` is ``(mN, I0)``.

    ``S0`` holds the signal observed right after each reset (zero for the
    state, ``e`` for noisy outputs); it is only used for cost accounting.
    """

    X: np.ndarray
    U: np.ndarray
    I0: int
    N: int
    S0: np.ndarray = None

    @property
    def m(self) -> int:
        return self.U.shape[0] // self.N

    @property
    def q(self) -> int:
        return self.X.shape[0] // self.N

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "X.csv", self.X, delimiter=",", fmt="%.17g")
        np.savetxt(d / "U.csv", self.U, delimiter=",", fmt="%.17g")
        (d / "meta.json").write_text(json.dumps({"I0": self.I0, "N": self.N, "m": self.m, "q": self.q}))

    @classmethod
    def load(cls, directory) -> "RolloutBatch":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        X = np.loadtxt(d / "X.csv", delimiter=",", ndmin=2).reshape(meta["q"] * meta["N"], meta["I0"])
        U = np.loadtxt(d / "U.csv", delimiter=",", ndmin=2).reshape(meta["m"] * meta["N"], meta["I0"])
        return cls(X, U, meta["I0"], meta["N"])


@dataclass(frozen=True)
class ProbeInput:
    """``N`` inputs, each of norm ``1/sqrt(N)``, so the whole sequence has unit norm."""

    u: np.ndarray
    seed: int = 0

    @property
    def N(self) -> int:
        return self.u.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        return self.u.reshape(-1)


def collect_rollouts(env, I0: int, N: int, rng) -> RolloutBatch:
    """Run ``I0`` rollouts of ``N`` i.i.d. +-1 inputs, resetting before each."""
    if I0 < 1 or N < 1:
        raise ContractError("I0 and N must be positive")
    rng = np.random.default_rng(rng)
    m, q = env.m, env.signal_dim
    X = np.empty((q * N, I0))
    U = np.empty((m * N, I0))
    S0 = np.empty((q, I0))
    for k in range(I0):
        try:
            S0[:, k] = env.reset()
        except Exception as exc:  # noqa: BLE001 - any refusal is a setup problem
            raise ConfigError(f"environment refused reset: {exc}") from exc
        u = rng.choice([-1.0, 1.0], size=(N, m))
        for t in range(N):
            X[t * q:(t + 1) * q, k] = env.step(u[t])
        U[:, k] = u.reshape(-1)
    return RolloutBatch(X, U, I0, N, S0)


def toeplitz_phi(sys: LtiSystem, N: int, output: bool = False) -> np.ndarray:
    """Ground-truth ``Phi`` (blocks ``A^i B``, or ``C A^i B`` with ``output``)."""
    return toeplitz_impulse(sys, N, output=output)


def estimate_phi(batch: RolloutBatch) -> np.ndarray:
    if batch.I0 < 1:
        raise ContractError("need at least one rollout")
    return batch.X @ batch.U.T / batch.I0


def sample_probe(N: int, m: int, rng) -> ProbeInput:
    rng = np.random.default_rng(rng)
    g = rng.standard_normal((N, m))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return ProbeInput(g / np.sqrt(N))


def draw_persistent_probe(N: int, m: int, order: int, rng, retries: int = PROBE_RETRIES) -> ProbeInput:
    """Sample probes until one is persistently exciting of ``order``."""
    rng = np.random.default_rng(rng)
    for _ in range(retries):
        probe = sample_probe(N, m, rng)
        if persistently_exciting(probe.u, order):
            return probe
    raise PersistencyError(f"no persistently exciting probe of order {order} with N={N} after {retries} draws")


def synthesize_clean(batch: RolloutBatch, probe: ProbeInput) -> np.ndarray:
    """Estimated clean signals ``s^_1..s^_N`` (shape ``(N, q)``) for the probe."""
    if probe.N != batch.N or probe.u.shape[1] != batch.m:
        raise ContractError("probe does not match the rollout length / input dimension")
    return (estimate_phi(batch) @ probe.stacked).reshape(batch.N, batch.q)


def clean_sequences(probe: ProbeInput, s_hat: np.ndarray):
    """Align a synthesized trajectory for Hankel construction.

    ``s_hat[k]`` estimates the signal at ``k+1``; the Hankel data pairs
    ``u_k`` with ``s_k`` and starts from rest, so the aligned signal is
    ``(0, s^_1, ..., s^_{N-1})``.
    """
    s = np.vstack([np.zeros((1, s_hat.shape[1])), s_hat[:-1]])
    return probe.u, s
