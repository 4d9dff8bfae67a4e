"""End-to-end runs and regret evaluation.

Three learners share one commitment loop:

* :func:`run_clean` is given a noise-free trajectory and goes straight to
  the adaptive loop;
* :func:`run_etc` first explores with +-1 rollouts, synthesizes an
  estimated clean trajectory, then commits;
* :func:`run_output_etc` is the same with the measured output as signal.

The learner only touches the environment through ``reset``/``step``.  The
comparator and regret functions below are oracle-side: they read the
environment's ground-truth log.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .behavior import AccHistory, HankelPair, acc_noise, persistently_exciting
from .controller import AdacParams, adac_control, project_blocks
from .errors import (AdaclabError, ConfigError, DivergenceError, PersistencyError,
                     SingularRepresentationError)
from .explore import (PROBE_RETRIES, clean_sequences, collect_rollouts, draw_persistent_probe,
                      synthesize_clean)
from .learner import SensitivityTracker, grad_f, ogd_step, step_size
from .lti import (LtiSystem, accumulated_disturbances, observed_disturbances, simulate)

TRACE_COLUMNS_FIXED = ["t", "stage"]

# signals beyond this norm mean the closed loop has blown up
DIVERGENCE_LIMIT = 1e12


def exploration_target(T: int) -> int:
    """``ceil(T^(2/3))``, exact for perfect cubes."""
    r = round(T ** (1.0 / 3.0))
    for c in (r - 1, r, r + 1):
        if c >= 0 and c ** 3 == T:
            return c * c
    return math.ceil(T ** (2.0 / 3.0))


def default_rollout_length(L: int, m: int, n: int) -> int:
    """Smallest ``N`` with ``N >= (m+n+1)L`` that also admits a probe of order ``L+2n``."""
    return max((m + n + 1) * L, (m + 1) * (L + 2 * n) - 1)


def default_rollouts(T: int, N: int) -> int:
    return max(1, math.ceil(exploration_target(T) / N))


@dataclass
class EtcConfig:
    """Knobs of the explore-then-commit learner (``None`` means default)."""

    n: int
    L: Optional[int] = None
    N: Optional[int] = None
    I0: Optional[int] = None
    D: float = 1.0
    G: float = 1.0
    seed: int = 0
    count_stage1_cost: bool = True

    def resolve(self, T: int, m: int) -> "EtcConfig":
        from .controller import default_memory

        L = default_memory(T, self.n) if self.L is None else self.L
        N = default_rollout_length(L, m, self.n) if self.N is None else self.N
        I0 = default_rollouts(T, N) if self.I0 is None else self.I0
        return EtcConfig(self.n, L, N, I0, self.D, self.G, self.seed, self.count_stage1_cost)


@dataclass
class RunTrace:
    """Per-step record of one run.

    ``signal[t]`` is the signal the cost saw at global step ``t``;
    ``w_hat`` and ``m_norm`` are NaN during exploration.
    """

    t: np.ndarray
    stage: np.ndarray
    signal: np.ndarray
    u: np.ndarray
    w_hat: np.ndarray
    cost: np.ndarray
    m_norm: np.ndarray
    T_s: int
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    M_final: Optional[AdacParams] = None
    hankel: Optional[HankelPair] = None
    learner_signal: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.t.shape[0]

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stage2(self):
        return self.stage == 2

    def header(self):
        q, m = self.signal.shape[1], self.u.shape[1]
        return (TRACE_COLUMNS_FIXED + [f"s_{i+1}" for i in range(q)] + [f"u_{i+1}" for i in range(m)]
                + [f"what_{i+1}" for i in range(q)] + ["cost", "m_norm"])

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for k in range(self.T):
                writer.writerow([int(self.t[k]), int(self.stage[k]),
                                 *map(repr, self.signal[k].tolist()), *map(repr, self.u[k].tolist()),
                                 *map(repr, self.w_hat[k].tolist()), repr(float(self.cost[k])),
                                 repr(float(self.m_norm[k]))])

    def summary(self) -> dict:
        return {
            "T": self.T,
            "T_s": self.T_s,
            "learner_cost": float(self.cost.sum()),
            "stage1_cost": float(self.cost[self.stage == 1].sum()),
            "stage2_cost": float(self.cost[self.stage == 2].sum()),
            "seeds": self.seeds,
            "config_hash": self.config_hash,
        }


class _TraceBuilder:
    def __init__(self, T, q, m):
        self.signal = np.zeros((T, q))
        self.u = np.zeros((T, m))
        self.w_hat = np.full((T, q), np.nan)
        self.cost = np.zeros(T)
        self.m_norm = np.full(T, np.nan)
        self.stage = np.zeros(T, dtype=int)

    def finish(self, T_s, **kw) -> RunTrace:
        T = self.cost.shape[0]
        return RunTrace(np.arange(T), self.stage, self.signal, self.u, self.w_hat, self.cost,
                        self.m_norm, T_s, **kw)


def _check_bounded(u, M: AdacParams, hist: AccHistory):
    bound = M.L * M.D * max(np.linalg.norm(hist.lag(i)) for i in range(1, M.L + 1))
    if np.linalg.norm(u) > bound * (1 + 1e-9) + 1e-12:
        raise AdaclabError(f"controller output {np.linalg.norm(u):.6g} exceeds L*D*max|w| = {bound:.6g}")


def _commit(env, H: HankelPair, cost, t_start: int, steps: int, L: int, D: float, lam: float,
            tb: _TraceBuilder, learner_signal: np.ndarray, M0: Optional[AdacParams] = None,
            learn: bool = True):
    """Adaptive disturbance-action loop on a Hankel representation.

    Local time ``t`` runs from 0; the cost index is ``t_start + t``.  The
    signal history before (and at) time 0 is taken as zero: the loop starts
    from rest.
    """
    q, m = H.q, H.m
    hist = AccHistory(max(L, H.L), q)
    tracker = SensitivityTracker(H, L, capacity=steps + 2)
    M = AdacParams.zeros(L, m, q, D) if M0 is None else M0
    S = np.zeros((steps + 1, q))  # learner's signal history, S[0] = 0
    U = np.zeros((steps, m))
    obs = env.reset()
    Lh = H.L
    for t in range(steps):
        g = t_start + t
        u = adac_control(M, hist)
        _check_bounded(u, M, hist)
        tb.stage[g] = 2
        tb.signal[g] = obs
        tb.u[g] = u
        tb.cost[g] = cost.value(g, u, obs)
        tb.m_norm[g] = float(np.max(M.block_norms()))
        obs = env.step(u)
        if not np.all(np.isfinite(obs)) or np.linalg.norm(obs) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"closed loop diverged at step {g}: |signal| = {np.linalg.norm(obs):.3g}")
        U[t] = u
        S[t + 1] = obs
        lo = t - Lh + 2
        win = np.zeros((Lh - 1, m))
        for j, k in enumerate(range(lo, t + 1)):
            if k >= 0:
                win[j] = U[k]
        s_old = S[lo] if lo >= 0 else np.zeros(q)
        w = acc_noise(win, s_old, obs, hist.lag(Lh - 1), H)
        hist.push(w)
        tb.w_hat[g] = w
        if not learn:
            continue
        tracker.push(w)
        Smap = tracker.map(t)
        M = ogd_step(M, grad_f(M, Smap, cost, g), lam)
        if not M.is_feasible():
            raise AdaclabError("OGD iterate left the admissible set")
    learner_signal[:] = S[:steps]
    return M


def run_clean(env, clean, cost, T: int, L: int, D: float = 1.0, G: float = 1.0, seed: int = 0) -> RunTrace:
    """Adaptive control with a known noise-free trajectory ``clean = (u^d, s^d)``."""
    u_d, s_d = clean
    H = HankelPair.from_sequences(u_d, s_d, L)
    tb = _TraceBuilder(T, H.q, H.m)
    lam = step_size(L, D, G, T)
    ls = np.zeros((T, H.q))
    M = _commit(env, H, cost, 0, T, L, D, lam, tb, ls)
    config = {"mode": "clean", "T": T, "L": L, "D": D, "G": G, "N": H.N}
    return tb.finish(0, seeds={"seed": seed}, config=config, M_final=M, hankel=H, learner_signal=ls)


def run_fixed(env, H: HankelPair, cost, T: int, M: AdacParams) -> RunTrace:
    """Play a fixed controller on disturbances reconstructed through ``H`` (no learning)."""
    tb = _TraceBuilder(T, H.q, H.m)
    ls = np.zeros((T, H.q))
    _commit(env, H, cost, 0, T, M.L, M.D, 0.0, tb, ls, M0=M, learn=False)
    config = {"mode": "fixed", "T": T, "L": M.L, "D": M.D, "N": H.N}
    return tb.finish(0, config=config, M_final=M, hankel=H, learner_signal=ls)


def _estimate_hankel(batch, cfg: EtcConfig, m: int, rng):
    order = cfg.L + 2 * cfg.n
    last = None
    for _ in range(PROBE_RETRIES):
        probe = draw_persistent_probe(cfg.N, m, order, rng)
        u_d, s_d = clean_sequences(probe, synthesize_clean(batch, probe))
        try:
            return probe, HankelPair.from_sequences(u_d, s_d, cfg.L)
        except SingularRepresentationError as exc:
            last = exc
    raise SingularRepresentationError(f"estimated Hankel pair stayed singular: {last}")


def run_etc(env, cost, T: int, config: EtcConfig) -> RunTrace:
    """Explore-then-commit on the state signal."""
    return _run_etc(env, cost, T, config, mode="etc")


def run_output_etc(env, cost, T: int, config: EtcConfig) -> RunTrace:
    """Explore-then-commit on measured outputs; same control flow as :func:`run_etc`."""
    return _run_etc(env, cost, T, config, mode="output")


def _run_etc(env, cost, T, config: EtcConfig, mode):
    m, q = env.m, env.signal_dim
    cfg = config.resolve(T, m)
    T_s = cfg.N * cfg.I0
    if T_s >= T:
        raise ConfigError(f"exploration budget N*I0 = {T_s} leaves no commitment steps (T={T})")
    ss = np.random.SeedSequence(cfg.seed)
    rollout_rng, probe_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    batch = collect_rollouts(env, cfg.I0, cfg.N, rollout_rng)

    tb = _TraceBuilder(T, q, m)
    for k in range(cfg.I0):
        U = batch.U[:, k].reshape(cfg.N, m)
        X = batch.X[:, k].reshape(cfg.N, q)
        for t in range(cfg.N):
            g = k * cfg.N + t
            s = batch.S0[:, k] if t == 0 else X[t - 1]
            tb.stage[g] = 1
            tb.signal[g] = s
            tb.u[g] = U[t]
            if cfg.count_stage1_cost:
                tb.cost[g] = cost.value(g, U[t], s)

    _, H = _estimate_hankel(batch, cfg, m, probe_rng)
    lam = step_size(cfg.L, cfg.D, cfg.G, T)
    ls = np.zeros((T - T_s, q))
    M = _commit(env, H, cost, T_s, T - T_s, cfg.L, cfg.D, lam, tb, ls)
    conf = {"mode": mode, "T": T, "L": cfg.L, "N": cfg.N, "I0": cfg.I0, "D": cfg.D, "G": cfg.G,
            "n": cfg.n, "count_stage1_cost": cfg.count_stage1_cost}
    return tb.finish(T_s, seeds={"seed": cfg.seed}, config=conf, M_final=M, hankel=H,
                     learner_signal=ls)


def make_clean_trajectory(sys: LtiSystem, L: int, N: int, rng, output: bool = False):
    """Oracle helper: a persistently exciting noise-free trajectory ``(u^d, s^d)``."""
    rng = np.random.default_rng(rng)
    for _ in range(PROBE_RETRIES):
        u_d = rng.standard_normal((N, sys.m))
        if not persistently_exciting(u_d, L + 2 * sys.n):
            continue
        tr = simulate(sys, u_d, None, None, N)
        s_d = tr.outputs[:N] if output else tr.states[:N]
        try:
            HankelPair.from_sequences(u_d, s_d, L)
        except SingularRepresentationError:
            continue
        return u_d, s_d
    raise PersistencyError("could not draw a usable clean trajectory")


# -- oracle side: comparator and regret ---------------------------------------

def signal_disturbances(sys: LtiSystem, w_record, e_record=None, output=False) -> np.ndarray:
    """The disturbance the controller class acts on, for ``t = 0..T-1``."""
    if output:
        return observed_disturbances(sys, w_record, e_record)
    return accumulated_disturbances(sys, w_record)


def _signal_offsets(sys, w_record, e_record, output):
    """``s_t(M) = offset_t + (clean response)``; offset is ``C acc_{t-1} + e_t``."""
    T = len(w_record)
    acc = accumulated_disturbances(sys, w_record)
    prev = np.vstack([np.zeros((1, sys.n)), acc[:-1]]) if T else np.zeros((0, sys.n))
    if not output:
        return prev
    off = prev @ sys.C.T
    if e_record is not None:
        off = off + np.asarray(e_record, dtype=float).reshape(-1, sys.p)[:T]
    return off


def _features(sys, d, L, output):
    """Jacobians of ``u_t`` and of the clean part of ``s_t`` w.r.t. the stacked blocks."""
    T, q = d.shape
    m = sys.m
    dim = L * m * q
    Uj = np.zeros((T, m, dim))
    for i in range(1, L + 1):
        for a in range(m):
            col = (i - 1) * m * q + a * q
            Uj[i:, a, col:col + q] = d[: T - i]
    Xc = np.zeros((T, sys.n, dim))
    for t in range(T - 1):
        Xc[t + 1] = sys.A @ Xc[t] + sys.B @ Uj[t]
    Sj = np.einsum("pn,tnd->tpd", sys.C, Xc) if output else Xc
    return Uj, Sj


@dataclass
class ComparatorResult:
    M: AdacParams
    J: float
    converged: bool
    iterations: int


def comparator_oracle(sys: LtiSystem, w_record, cost, L: int, D: float, output: bool = False,
                      e_record=None, tol: float = 1e-8, max_iter: int = 10_000) -> ComparatorResult:
    """Best fixed controller in hindsight, by projected gradient descent on ``J(M)``.

    ``J`` sums ``c_t(u_t(M), s_t(M))`` over the recorded horizon with the
    system started at rest and driven by the recorded disturbances.  The
    iteration stops when the projected-gradient norm drops below ``tol``.
    """
    w_record = np.asarray(w_record, dtype=float).reshape(-1, sys.n)
    T = w_record.shape[0]
    d = signal_disturbances(sys, w_record, e_record, output)
    q = d.shape[1]
    off = _signal_offsets(sys, w_record, e_record, output)
    Uj, Sj = _features(sys, d, L, output)
    dim = L * sys.m * q

    def J(theta):
        U = Uj @ theta
        S = off + Sj @ theta
        return float(cost.values(U, S).sum())

    def grad(theta):
        U = Uj @ theta
        S = off + Sj @ theta
        gu, gx = cost.grads(U, S)
        return np.einsum("tmd,tm->d", Uj, gu) + np.einsum("tqd,tq->d", Sj, gx)

    def proj(theta):
        return project_blocks(theta.reshape(L, sys.m, q), D).reshape(-1)

    # gradients of a quadratic objective are affine: read off Hessian and offset
    b = grad(np.zeros(dim))
    P = np.column_stack([grad(e) - b for e in np.eye(dim)])
    P = 0.5 * (P + P.T)

    def qgrad(theta):
        return P @ theta + b

    if not np.any(b):
        # the origin is a stationary point of a convex objective; ties resolve to zero
        return ComparatorResult(AdacParams.zeros(L, sys.m, q, D), J(np.zeros(dim)), True, 0)
    lip = float(np.linalg.eigvalsh(P)[-1])
    eta = 1.0 / lip if lip > 0 else 1.0
    start = np.linalg.lstsq(P, -b, rcond=None)[0]
    theta = proj(start)
    if np.allclose(theta, start, rtol=0, atol=0) and np.linalg.norm(qgrad(theta)) <= tol:
        return ComparatorResult(AdacParams.from_vector(theta, L, sys.m, q, D), J(theta), True, 0)
    y, tk = theta.copy(), 1.0
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        nxt = proj(y - eta * qgrad(y))
        tk1 = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        y = nxt + ((tk - 1) / tk1) * (nxt - theta)
        # restart momentum when the objective would increase
        if (nxt - theta) @ qgrad(nxt) > 0:
            y, tk1 = nxt.copy(), 1.0
        theta, tk = nxt, tk1
        pg = np.linalg.norm(theta - proj(theta - eta * qgrad(theta))) / eta
        if pg <= tol:
            converged = True
            break
    return ComparatorResult(AdacParams.from_vector(theta, L, sys.m, q, D), J(theta), converged, it)


def counterfactual_cost(sys: LtiSystem, M: AdacParams, w_record, cost, output=False, e_record=None):
    """Direct re-simulation of the fixed controller ``M`` from rest.

    Returns the per-step costs; independent of the feature construction
    used by :func:`comparator_oracle`.
    """
    w_record = np.asarray(w_record, dtype=float).reshape(-1, sys.n)
    T = w_record.shape[0]
    d = signal_disturbances(sys, w_record, e_record, output)
    e = np.zeros((T + 1, sys.p)) if e_record is None else np.asarray(e_record, dtype=float).reshape(-1, sys.p)
    x = np.zeros(sys.n)
    costs = np.empty(T)
    for t in range(T):
        u = np.zeros(sys.m)
        for i, Mi in enumerate(M.blocks, start=1):
            if t - i >= 0:
                u += Mi @ d[t - i]
        s = sys.C @ x + e[t] if output else x
        costs[t] = cost.value(t, u, s)
        x = sys.A @ x + sys.B @ u + w_record[t]
    return costs


@dataclass
class RegretReport:
    learner_cost: float
    comparator_cost: float
    regret: float
    comparator_converged: bool = True
    T: Optional[np.ndarray] = None
    per_T_regret: Optional[np.ndarray] = None
    exponent: Optional[float] = None

    def as_dict(self) -> dict:
        out = {"learner_cost": self.learner_cost, "comparator_cost": self.comparator_cost,
               "regret": self.regret, "comparator_converged": self.comparator_converged}
        if self.exponent is not None:
            out["exponent"] = self.exponent
        return out


def regret(trace: RunTrace, comparator: ComparatorResult, sys: LtiSystem, w_record, cost,
           output=False, e_record=None) -> RegretReport:
    """Learner cost minus the comparator's cost on the same disturbance record."""
    w_record = np.asarray(w_record, dtype=float).reshape(-1, sys.n)
    if w_record.shape[0] != trace.T:
        raise ValueError(f"disturbance record has {w_record.shape[0]} steps, trace has {trace.T}")
    J = float(counterfactual_cost(sys, comparator.M, w_record, cost, output, e_record).sum())
    learner = float(trace.cost.sum())
    return RegretReport(learner, J, learner - J, comparator.converged)


def evaluate(trace: RunTrace, env, cost, L: int, D: float, output=False) -> RegretReport:
    """Comparator plus regret, reading ground truth from the environment log."""
    sys = env.system
    w = env.disturbance_record()
    e = env.noise_record(trace.T + 1) if output else None
    comp = comparator_oracle(sys, w, cost, L, D, output=output, e_record=e)
    return regret(trace, comp, sys, w, cost, output=output, e_record=e)


@dataclass
class SlopeFit:
    exponent: float
    intercept: float
    clamped: bool

    def __float__(self):
        return self.exponent


def slope_fit(T_values, regret_values, floor: float = 1e-9) -> SlopeFit:
    """Least-squares slope of ``log regret`` against ``log T``.

    Regrets below ``floor`` are clamped for the log transform and the fit
    is flagged as ``clamped``.
    """
    T_values = np.asarray(T_values, dtype=float)
    r = np.asarray(regret_values, dtype=float)
    if T_values.shape != r.shape or T_values.size < 4:
        raise ValueError("slope_fit needs at least 4 (T, regret) pairs")
    clamped = bool(np.any(r < floor))
    slope, intercept = np.polyfit(np.log(T_values), np.log(np.maximum(r, floor)), 1)
    return SlopeFit(float(slope), float(intercept), clamped)
