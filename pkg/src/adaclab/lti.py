"""Ground-truth linear systems, disturbance and cost generators, and oracles.

Everything in this module knows the true ``(A, B, C)``.  The learner only
ever sees a :class:`LinearEnvironment` through ``reset``/``step``; the
model-aware helpers (:func:`accumulated_disturbance_oracle` and friends) are
for tests and regret evaluation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, StabilityError

DISTURBANCE_KINDS = ("zero", "constant", "sinusoid", "uniform_random", "sign_flip_adversary")
COST_KINDS = ("quadratic_tracking", "timevarying_linear_quadratic")


def _as_matrix(a, name):
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def _as_vector(v, dim, name):
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape[0] != dim:
        raise ContractError(f"{name} has length {arr.shape[0]}, expected {dim}")
    return arr


def spectral_norm(M) -> float:
    M = np.atleast_2d(M)
    if M.size == 0:
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False)[0])


def default_k_check(n: int) -> int:
    return max(50, 4 * n)


def certify_stability(A, K_check: Optional[int] = None) -> float:
    """Empirical (1, rho) stability certificate.

    Returns ``max_k ||A^k||^(1/k)`` over ``k = 1..K_check`` (operator
    norms).  Raises :class:`StabilityError` naming the first ``k`` at which
    ``||A^k|| >= 1``; the certificate is strict, so a nilpotent matrix with
    ``||A|| = 1`` is rejected at ``k = 1``.
    """
    if isinstance(A, LtiSystem):
        A = A.A
    A = _as_matrix(A, "A")
    n = A.shape[0]
    if A.shape != (n, n):
        raise ContractError(f"A must be square, got {A.shape}")
    if K_check is None:
        K_check = default_k_check(n)
    if K_check < n:
        raise ContractError(f"K_check={K_check} must be at least n={n}")
    rho_hat = 0.0
    P = np.eye(n)
    for k in range(1, K_check + 1):
        P = P @ A
        norm = spectral_norm(P)
        if norm >= 1.0:
            raise StabilityError(
                f"||A^{k}|| = {norm:.6g} >= 1: not (1, rho)-stable (violated at k={k})",
                k=k,
                norm=norm,
            )
        rho_hat = max(rho_hat, norm ** (1.0 / k))
    return rho_hat


def controllability_matrix(A, B) -> np.ndarray:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


@dataclass(frozen=True)
class LtiSystem:
    """``x_{t+1} = A x_t + B u_t + w_t``, ``y_t = C x_t + e_t``.

    ``rho`` is the certified decay rate; if omitted it is computed by
    :func:`certify_stability`.  Construction fails for unstable or
    uncontrollable pairs.
    """

    A: np.ndarray
    B: np.ndarray
    C: Optional[np.ndarray] = None
    rho: Optional[float] = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ContractError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(n, -1)
        B = _as_matrix(B, "B")
        if B.shape[0] != n:
            raise ContractError(f"B has {B.shape[0]} rows, expected {n}")
        C = np.eye(n) if self.C is None else _as_matrix(self.C, "C")
        if C.shape[1] != n:
            raise ContractError(f"C has {C.shape[1]} columns, expected {n}")
        if np.linalg.matrix_rank(controllability_matrix(A, B)) < n:
            raise ContractError("(A, B) is not controllable")
        rho_hat = certify_stability(A)
        rho = rho_hat if self.rho is None else float(self.rho)
        if not 0.0 <= rho < 1.0:
            raise StabilityError(f"rho must lie in [0, 1), got {rho}")
        if rho_hat > rho + 1e-12:
            raise StabilityError(f"certified rate {rho_hat:.6g} exceeds declared rho={rho}")
        for name, val in (("A", A), ("B", B), ("C", C)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "rho", rho)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def with_output(self, C) -> "LtiSystem":
        return LtiSystem(self.A, self.B, C, self.rho)


def random_stable_system(n, m, rng, rho=0.8, p=None, output="identity") -> LtiSystem:
    """Draw a controllable system whose ``A`` has operator norm ``rho``.

    ``output`` selects ``C``: ``"identity"`` or ``"random"`` (a well
    conditioned square matrix different from the identity, ``p = n``).
    """
    rng = np.random.default_rng(rng)
    for _ in range(100):
        A = rng.standard_normal((n, n))
        A *= rho / spectral_norm(A)
        B = rng.standard_normal((n, m))
        B /= spectral_norm(B)
        if np.linalg.svd(controllability_matrix(A, B), compute_uv=False)[-1] < 1e-3:
            continue
        if output == "identity":
            C = None
        elif output == "random":
            p = n if p is None else p
            if p != n:
                raise ContractError("random output maps must be square (p = n)")
            Qm, _ = np.linalg.qr(rng.standard_normal((n, n)))
            C = Qm @ np.diag(rng.uniform(0.7, 1.3, n))
        else:
            raise ContractError(f"unknown output kind {output!r}")
        return LtiSystem(A, B, C, rho=max(rho, certify_stability(A)))
    raise RuntimeError("could not draw a controllable system")


def step(sys: LtiSystem, x, u, w) -> np.ndarray:
    x = _as_vector(x, sys.n, "x")
    u = _as_vector(u, sys.m, "u")
    w = _as_vector(w, sys.n, "w")
    return sys.A @ x + sys.B @ u + w


@dataclass(frozen=True)
class DisturbanceGen:
    """Bounded disturbance source, ``||w_t|| <= epsilon`` for every kind.

    Samples are a pure function of ``(seed, t)`` (and of the current state
    for the sign-flip adversary), so replaying a run reproduces them.
    """

    kind: str = "zero"
    epsilon: float = 0.0
    seed: int = 0
    dim: int = 1

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ContractError(f"unknown disturbance kind {self.kind!r}")
        if self.epsilon < 0:
            raise ContractError("epsilon must be nonnegative")
        rng = np.random.default_rng([self.seed, 7])
        direction = rng.standard_normal(self.dim)
        direction /= np.linalg.norm(direction)
        object.__setattr__(self, "_direction", direction)
        object.__setattr__(self, "_freq", rng.uniform(0.05, 0.5, self.dim))
        object.__setattr__(self, "_phase", rng.uniform(0.0, 2 * np.pi, self.dim))

    def sample(self, t: int, x=None) -> np.ndarray:
        eps, d = self.epsilon, self.dim
        if self.kind == "zero" or eps == 0.0:
            return np.zeros(d)
        if self.kind == "constant":
            return eps * self._direction
        if self.kind == "sinusoid":
            return eps / math.sqrt(d) * np.sin(self._freq * t + self._phase)
        if self.kind == "uniform_random":
            rng = np.random.default_rng([self.seed, t])
            v = rng.standard_normal(d)
            r = rng.uniform() ** (1.0 / d)
            return eps * r * v / np.linalg.norm(v)
        # sign_flip_adversary: push against the current state direction
        x = np.zeros(d) if x is None else np.asarray(x, dtype=float)
        return -eps / math.sqrt(d) * np.where(x >= 0, 1.0, -1.0)

    def sequence(self, T: int) -> np.ndarray:
        if self.kind == "sign_flip_adversary":
            raise ContractError("the sign-flip adversary depends on the state; use simulate()")
        return np.array([self.sample(t) for t in range(T)]).reshape(T, self.dim)


class CostOracle:
    """Per-step convex costs ``c_t(u, s) = k_t [(s-a_t)'Q_t(s-a_t) + (u-b_t)'R_t(u-b_t)]``.

    The scale ``k_t`` is clipped at construction so that the gradient norm
    stays below ``G`` on the box ``|s_i| <= box_x``, ``|u_i| <= box_u``.

    ``quadratic_tracking`` uses fixed ``Q``, ``R`` with a target trajectory
    ``a_t`` (``b_t = 0``); ``timevarying_linear_quadratic`` redraws diagonal
    weights and both offsets every step.
    """

    def __init__(self, kind, Q, R, a, b, G, box_x, box_u):
        if kind not in COST_KINDS:
            raise ContractError(f"unknown cost kind {kind!r}")
        if G <= 0:
            raise ContractError("G must be positive")
        self.kind = kind
        self.G = float(G)
        self.box_x = float(box_x)
        self.box_u = float(box_u)
        Q = np.asarray(Q, dtype=float)
        R = np.asarray(R, dtype=float)
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        T, q = self.a.shape
        m = self.b.shape[1]
        if Q.ndim == 2:
            Q = np.broadcast_to(Q, (T, q, q))
        if R.ndim == 2:
            R = np.broadcast_to(R, (T, m, m))
        bound = self._gradient_bound(Q, R)
        scale = np.minimum(1.0, self.G / np.maximum(bound, 1e-300))
        self.Q = np.ascontiguousarray(Q * scale[:, None, None])
        self.R = np.ascontiguousarray(R * scale[:, None, None])
        self.T, self.q, self.m = T, q, m

    def _gradient_bound(self, Q, R):
        q, m = Q.shape[1], R.shape[1]
        qn = np.linalg.norm(Q, ord=2, axis=(1, 2))
        rn = np.linalg.norm(R, ord=2, axis=(1, 2))
        gx = 2 * qn * (math.sqrt(q) * self.box_x + np.linalg.norm(self.a, axis=1))
        gu = 2 * rn * (math.sqrt(m) * self.box_u + np.linalg.norm(self.b, axis=1))
        return np.sqrt(gx**2 + gu**2)

    @classmethod
    def quadratic_tracking(cls, q, m, T, G=1.0, box_x=1.0, box_u=1.0, target_amp=0.0,
                           q_weight=1.0, r_weight=0.1, seed=0):
        rng = np.random.default_rng([seed, 11])
        t = np.arange(T)[:, None]
        freq = rng.uniform(0.01, 0.1, q)
        phase = rng.uniform(0, 2 * np.pi, q)
        a = target_amp * np.sin(freq * t + phase)
        return cls("quadratic_tracking", q_weight * np.eye(q), r_weight * np.eye(m),
                   a, np.zeros((T, m)), G, box_x, box_u)

    @classmethod
    def timevarying_linear_quadratic(cls, q, m, T, G=1.0, box_x=1.0, box_u=1.0,
                                     offset_amp=0.5, seed=0):
        rng = np.random.default_rng([seed, 13])
        Qd = rng.uniform(0.5, 1.5, (T, q))
        Rd = rng.uniform(0.05, 0.2, (T, m))
        Q = np.einsum("ti,ij->tij", Qd, np.eye(q))
        R = np.einsum("ti,ij->tij", Rd, np.eye(m))
        a = rng.uniform(-offset_amp, offset_amp, (T, q))
        b = rng.uniform(-offset_amp, offset_amp, (T, m)) * 0.1
        return cls("timevarying_linear_quadratic", Q, R, a, b, G, box_x, box_u)

    @classmethod
    def from_config(cls, spec: dict, q, m, T, seed=0):
        spec = dict(spec)
        kind = spec.pop("kind", "quadratic_tracking")
        if kind == "quadratic_tracking":
            return cls.quadratic_tracking(q, m, T, seed=seed, **spec)
        if kind == "timevarying_linear_quadratic":
            return cls.timevarying_linear_quadratic(q, m, T, seed=seed, **spec)
        raise ContractError(f"unknown cost kind {kind!r}")

    def value(self, t, u, s) -> float:
        dx = np.asarray(s, dtype=float) - self.a[t]
        du = np.asarray(u, dtype=float) - self.b[t]
        return float(dx @ self.Q[t] @ dx + du @ self.R[t] @ du)

    def grad(self, t, u, s):
        """Return ``(d c_t / d u, d c_t / d s)``."""
        dx = np.asarray(s, dtype=float) - self.a[t]
        du = np.asarray(u, dtype=float) - self.b[t]
        return 2 * self.R[t] @ du, 2 * self.Q[t] @ dx

    def values(self, U, S, t0=0) -> np.ndarray:
        """Vectorised costs for steps ``t0 .. t0+len(U)-1``."""
        sl = slice(t0, t0 + len(U))
        dx = S - self.a[sl]
        du = U - self.b[sl]
        return (np.einsum("ti,tij,tj->t", dx, self.Q[sl], dx)
                + np.einsum("ti,tij,tj->t", du, self.R[sl], du))

    def grads(self, U, S, t0=0):
        sl = slice(t0, t0 + len(U))
        gu = 2 * np.einsum("tij,tj->ti", self.R[sl], U - self.b[sl])
        gx = 2 * np.einsum("tij,tj->ti", self.Q[sl], S - self.a[sl])
        return gu, gx


@dataclass
class Trajectory:
    """Rows ``t = 0..T``; ``inputs``/``disturbances`` have ``T`` rows."""

    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    outputs: np.ndarray
    noise: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.inputs.shape[0]

    def replay_error(self, sys: LtiSystem) -> float:
        pred = self.states[:-1] @ sys.A.T + self.inputs @ sys.B.T + self.disturbances
        if self.length == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.states[1:] - pred, axis=1)))

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self)


def trajectory_header(n, m, p):
    return (["t"] + [f"x_{i+1}" for i in range(n)] + [f"u_{i+1}" for i in range(m)]
            + [f"w_{i+1}" for i in range(n)] + [f"y_{i+1}" for i in range(p)])


def write_trajectory_csv(path, traj: Trajectory) -> None:
    T = traj.length
    n, m, p = traj.states.shape[1], traj.inputs.shape[1], traj.outputs.shape[1]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trajectory_header(n, m, p))
        for t in range(T + 1):
            u = traj.inputs[t] if t < T else [""] * m
            w = traj.disturbances[t] if t < T else [""] * n
            writer.writerow([t, *map(repr_float, traj.states[t]), *map(repr_float, u),
                             *map(repr_float, w), *map(repr_float, traj.outputs[t])])


def repr_float(v):
    return v if v == "" else repr(float(v))


def simulate(sys: LtiSystem, u_seq, dist: Optional[DisturbanceGen] = None, x0=None, T=None,
             noise: Optional[DisturbanceGen] = None) -> Trajectory:
    """Roll the system forward ``T`` steps under the input sequence ``u_seq``.

    ``dist`` defaults to zero disturbance; ``noise`` (dimension ``p``) adds
    measurement noise to the outputs.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    if T is None:
        T = u_seq.shape[0]
    if T < 1:
        raise ContractError("T must be at least 1")
    u_seq = u_seq.reshape(-1, sys.m) if u_seq.size else np.zeros((0, sys.m))
    if u_seq.shape[0] < T:
        raise ContractError(f"u_seq has {u_seq.shape[0]} rows, need {T}")
    if dist is not None and dist.dim != sys.n:
        raise ContractError("disturbance dimension does not match n")
    if noise is not None and noise.dim != sys.p:
        raise ContractError("measurement noise dimension does not match p")
    x = np.zeros(sys.n) if x0 is None else _as_vector(x0, sys.n, "x0")
    X = np.empty((T + 1, sys.n))
    W = np.empty((T, sys.n))
    X[0] = x
    for t in range(T):
        w = np.zeros(sys.n) if dist is None else dist.sample(t, X[t])
        W[t] = w
        X[t + 1] = sys.A @ X[t] + sys.B @ u_seq[t] + w
    E = None
    Y = X @ sys.C.T
    if noise is not None:
        E = np.array([noise.sample(t) for t in range(T + 1)]).reshape(T + 1, sys.p)
        Y = Y + E
    return Trajectory(X, u_seq[:T].copy(), W, Y, E)


def accumulated_disturbance_oracle(sys: LtiSystem, w_seq, t: int) -> np.ndarray:
    """Direct sum ``sum_{i=0}^{t} A^i w_{t-i}``."""
    w_seq = np.asarray(w_seq, dtype=float).reshape(-1, sys.n)
    if not 0 <= t < w_seq.shape[0]:
        raise ContractError(f"t={t} outside the recorded sequence")
    acc = np.zeros(sys.n)
    P = np.eye(sys.n)
    for i in range(t + 1):
        acc += P @ w_seq[t - i]
        P = P @ sys.A
    return acc


def accumulated_disturbances(sys: LtiSystem, w_seq) -> np.ndarray:
    """All accumulated disturbances at once via ``acc_t = A acc_{t-1} + w_t``."""
    w_seq = np.asarray(w_seq, dtype=float).reshape(-1, sys.n)
    out = np.empty_like(w_seq)
    acc = np.zeros(sys.n)
    for t, w in enumerate(w_seq):
        acc = sys.A @ acc + w
        out[t] = acc
    return out


def observed_disturbances(sys: LtiSystem, w_seq, e_seq=None) -> np.ndarray:
    """Observed accumulated disturbance ``e_{t+1} + C acc_t`` for ``t = 0..len(w)-1``.

    This is the quantity the output-feedback reconstruction recovers: it
    satisfies ``y_{t+1} = (clean output at t+1) + obs_t``.
    """
    acc = accumulated_disturbances(sys, w_seq)
    out = acc @ sys.C.T
    if e_seq is not None:
        e_seq = np.asarray(e_seq, dtype=float).reshape(-1, sys.p)
        out = out + e_seq[1:acc.shape[0] + 1]
    return out


def toeplitz_impulse(sys: LtiSystem, N: int, output=False) -> np.ndarray:
    """Block lower-triangular Toeplitz map from ``u_0..u_{N-1}`` to ``s_1..s_N``."""
    C = sys.C if output else np.eye(sys.n)
    q, m = C.shape[0], sys.m
    markov = []
    P = sys.B
    for _ in range(N):
        markov.append(C @ P)
        P = sys.A @ P
    Phi = np.zeros((q * N, m * N))
    for i in range(N):
        for j in range(i + 1):
            Phi[i * q:(i + 1) * q, j * m:(j + 1) * m] = markov[i - j]
    return Phi


@dataclass
class EnvLog:
    """Ground-truth record of every environment query (oracle side only)."""

    inputs: list = field(default_factory=list)
    disturbances: list = field(default_factory=list)
    states: list = field(default_factory=list)
    noise: dict = field(default_factory=dict)
    resets: list = field(default_factory=list)


class LinearEnvironment:
    """Learner-facing wrapper exposing only ``reset()`` and ``step(u)``.

    Disturbances are indexed by a global clock that keeps running across
    resets, so one run of ``T`` queries consumes ``w_0..w_{T-1}``.  In
    output mode the returned signal is ``y = C x + e`` with ``e`` indexed by
    the same clock.
    """

    def __init__(self, system: LtiSystem, dist: Optional[DisturbanceGen] = None,
                 noise: Optional[DisturbanceGen] = None, output: bool = False):
        self._sys = system
        self._dist = dist if dist is not None else DisturbanceGen("zero", 0.0, 0, system.n)
        if self._dist.dim != system.n:
            raise ContractError("disturbance dimension does not match n")
        if noise is not None and noise.dim != system.p:
            raise ContractError("measurement noise dimension does not match p")
        self._noise = noise
        self._output = output
        self.m = system.m
        self.signal_dim = system.p if output else system.n
        self.clock = 0
        self._x = None
        self._log = EnvLog()

    def _observe(self):
        if not self._output:
            return self._x.copy()
        y = self._sys.C @ self._x
        if self._noise is not None:
            e = self._noise.sample(self.clock)
            self._log.noise[self.clock] = e
            y = y + e
        return y

    def reset(self):
        self._x = np.zeros(self._sys.n)
        self._log.resets.append(self.clock)
        return self._observe()

    def step(self, u):
        if self._x is None:
            raise ContractError("call reset() before step()")
        u = _as_vector(u, self._sys.m, "u")
        w = self._dist.sample(self.clock, self._x)
        self._log.inputs.append(u)
        self._log.disturbances.append(w)
        self._log.states.append(self._x)
        self._x = self._sys.A @ self._x + self._sys.B @ u + w
        self.clock += 1
        return self._observe()

    # -- oracle side -----------------------------------------------------
    @property
    def system(self) -> LtiSystem:
        return self._sys

    def oracle_log(self) -> EnvLog:
        return self._log

    def disturbance_record(self) -> np.ndarray:
        return np.array(self._log.disturbances).reshape(-1, self._sys.n)

    def noise_record(self, length: int) -> np.ndarray:
        """Measurement noise for clock slots ``0..length-1`` (zeros if none)."""
        p = self._sys.p
        out = np.zeros((length, p))
        if self._noise is not None:
            for t in range(length):
                out[t] = self._log.noise.get(t, self._noise.sample(t))
        return out
