"""Fast self-check suite behind ``adaclab verify``.

Each check returns ``(passed, detail)``.  The suite covers reconstruction
exactness, the L-step model, counterfactual fidelity, gradients, projection,
OGD feasibility, the rollout identity, stage isolation and determinism, plus
one fault-injection check that must detect a corrupted Hankel matrix.
"""

from __future__ import annotations

import time
from typing import Callable, List, Tuple

import numpy as np

from .behavior import HankelPair, extract_lstep, lstep_step, pi_traj
from .controller import AdacParams, project_M
from .explore import collect_rollouts, toeplitz_phi
from .learner import build_sensitivity, grad_f, ogd_step
from .lti import (CostOracle, DisturbanceGen, LinearEnvironment, accumulated_disturbances,
                  random_stable_system, simulate)
from .pipeline import EtcConfig, make_clean_trajectory, run_clean, run_etc, run_fixed

TOL = 1e-8


def _setup(seed, n=2, m=1, rho=0.7, T=200, eps=0.5, output=False):
    rng = np.random.default_rng(seed)
    sys = random_stable_system(n, m, rng, rho=rho, output="random" if output else "identity")
    L = max(2 * n, 4)
    N = (m + 1) * (L + 2 * n) + 10
    clean = make_clean_trajectory(sys, L, N, rng, output=output)
    dist = DisturbanceGen("sinusoid", eps, seed, n)
    cost = CostOracle.quadratic_tracking(n, m, T, box_x=5.0, seed=seed)
    return sys, L, clean, dist, cost


def reconstruction_error(H: HankelPair, sys, dist, cost, T, L) -> float:
    """Worst reconstruction error while a fixed nonzero controller is played.

    With zero inputs the clean part of the signal vanishes and any ``H``
    reconstructs exactly, so the probe controller must excite the system.
    """
    rng = np.random.default_rng(5)
    M = project_M(AdacParams(tuple(rng.standard_normal((L, sys.m, sys.n))), 0.5))
    env = LinearEnvironment(sys, dist)
    tr = run_fixed(env, H, cost, T, M)
    acc = accumulated_disturbances(sys, env.disturbance_record())
    return float(np.abs(tr.w_hat - acc).max())


def check_exactness() -> Tuple[bool, str]:
    worst = 0.0
    for seed in range(5):
        sys, L, clean, dist, cost = _setup(seed)
        env = LinearEnvironment(sys, dist)
        tr = run_clean(env, clean, cost, 200, L)
        acc = accumulated_disturbances(sys, env.disturbance_record())
        worst = max(worst, float(np.abs(tr.w_hat - acc).max()))
    return worst <= TOL, f"max |w_hat - w| = {worst:.2e}"


def check_fault_injection() -> Tuple[bool, str]:
    sys, L, (u_d, s_d), dist, cost = _setup(11)
    H = HankelPair.from_sequences(u_d, s_d, L)
    Hs = H.Hs.copy()
    Hs[:, 3] += 0.5  # corrupt one column of the signal Hankel matrix
    bad = HankelPair(H.Hu, Hs, L, H.m, H.q)
    good = reconstruction_error(H, sys, dist, cost, 200, L)
    err = reconstruction_error(bad, sys, dist, cost, 200, L)
    return good <= TOL < err, f"clean error {good:.2e}, corrupted error {err:.2e}"


def check_lstep() -> Tuple[bool, str]:
    worst = 0.0
    for seed in range(10):
        sys, L, (u_d, s_d), _, _ = _setup(seed)
        md = extract_lstep(HankelPair.from_sequences(u_d, s_d, L))
        H1 = np.hstack([np.linalg.matrix_power(sys.A, L - 2 - k) @ sys.B for k in range(L - 1)])
        worst = max(worst, np.linalg.norm(md.H2 - np.linalg.matrix_power(sys.A, L - 1), 2),
                    np.linalg.norm(md.H1 - H1, 2), np.linalg.norm(md.H0, 2))
        rng = np.random.default_rng(seed + 100)
        u = rng.standard_normal((3 * L, sys.m))
        x = simulate(sys, u, None, None, 3 * L).states
        for t in range(L - 1, 3 * L - 1):
            pred = lstep_step(md, x[t - L + 2], u[t - L + 2:t + 1].reshape(-1), np.zeros(sys.n))
            worst = max(worst, np.linalg.norm(pred - x[t + 1]))
    return worst <= TOL, f"max L-step error {worst:.2e}"


def check_counterfactual() -> Tuple[bool, str]:
    sys, L, (u_d, s_d), dist, cost = _setup(3)
    H = HankelPair.from_sequences(u_d, s_d, L)
    rng = np.random.default_rng(3)
    M = project_M(AdacParams(tuple(rng.standard_normal((L, sys.m, sys.n))), 0.5))
    env = LinearEnvironment(sys, dist)
    T = 80
    tr = run_fixed(env, H, cost, T, M)
    worst = 0.0
    for t in range(0, T, 7):
        worst = max(worst, np.linalg.norm(pi_traj(tr.w_hat, M, H, t) - tr.signal[t]))
    return worst <= TOL, f"max |pi_traj - x| = {worst:.2e}"


def check_gradient() -> Tuple[bool, str]:
    worst = 0.0
    for seed in range(10):
        sys, L, (u_d, s_d), _, cost = _setup(seed)
        H = HankelPair.from_sequences(u_d, s_d, L)
        rng = np.random.default_rng(seed)
        w = rng.uniform(-0.5, 0.5, (30, sys.n))
        t = 25
        S = build_sensitivity(w, H, t)
        M = AdacParams(tuple(0.3 * rng.standard_normal((L, sys.m, sys.n))), 1.0)
        g = grad_f(M, S, cost, t).reshape(-1)
        theta = M.as_vector()
        fd = np.empty_like(theta)
        h = 1e-6
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = h
            up = cost.value(t, *S.evaluate(theta + e))
            dn = cost.value(t, *S.evaluate(theta - e))
            fd[k] = (up - dn) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    return worst <= 1e-5, f"max relative gradient error {worst:.2e}"


def check_projection() -> Tuple[bool, str]:
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(50):
        D = rng.uniform(0.1, 2.0)
        A = AdacParams(tuple(rng.standard_normal((3, 2, 2)) * 2), D)
        B = AdacParams(tuple(rng.standard_normal((3, 2, 2)) * 2), D)
        pA, pB = project_M(A), project_M(B)
        ok &= pA.is_feasible()
        ok &= np.array_equal(project_M(pA).as_vector(), pA.as_vector())
        ok &= np.linalg.norm(pA.as_vector() - pB.as_vector()) <= np.linalg.norm(A.as_vector() - B.as_vector()) + 1e-12
    return bool(ok), "idempotent, feasible and non-expansive on 50 draws"


def check_ogd_feasibility() -> Tuple[bool, str]:
    rng = np.random.default_rng(1)
    M = AdacParams.zeros(4, 2, 3, 0.7)
    for _ in range(200):
        M = ogd_step(M, rng.standard_normal((4, 2, 3)) * 5, 0.3)
        if not M.is_feasible():
            return False, "iterate left the admissible set"
    return True, "200 steps stayed feasible"


def check_rollout_identity() -> Tuple[bool, str]:
    rng = np.random.default_rng(2)
    sys = random_stable_system(2, 1, rng, rho=0.7)
    env = LinearEnvironment(sys)
    batch = collect_rollouts(env, 16, 8, rng)
    err = float(np.abs(batch.X - toeplitz_phi(sys, 8) @ batch.U).max())
    return err <= 1e-9, f"max |X - Phi U| = {err:.2e}"


class PoisonedEnvironment(LinearEnvironment):
    """An environment whose ground-truth accessors abort the run."""

    @property
    def system(self):
        raise AssertionError("learner read the true system")

    def oracle_log(self):
        raise AssertionError("learner read the oracle log")

    def disturbance_record(self):
        raise AssertionError("learner read the true disturbances")


def _etc_fixture(seed=0, T=600, poisoned=False):
    rng = np.random.default_rng(seed)
    sys = random_stable_system(1, 1, rng, rho=0.5)
    cls = PoisonedEnvironment if poisoned else LinearEnvironment
    env = cls(sys, DisturbanceGen("sinusoid", 0.1, seed, 1))
    cost = CostOracle.quadratic_tracking(1, 1, T, box_x=5.0, seed=seed)
    return env, cost, EtcConfig(n=1, seed=seed, D=0.1)


def check_stage_isolation() -> Tuple[bool, str]:
    env, cost, cfg = _etc_fixture(poisoned=True)
    try:
        run_etc(env, cost, 600, cfg)
    except AssertionError as exc:
        return False, str(exc)
    return True, "explore-then-commit ran against a poisoned oracle"


def check_determinism() -> Tuple[bool, str]:
    a = run_etc(*_etc_fixture()[:2], 600, _etc_fixture()[2])
    b = run_etc(*_etc_fixture()[:2], 600, _etc_fixture()[2])
    same = all(np.array_equal(getattr(a, f), getattr(b, f), equal_nan=True)
               for f in ("signal", "u", "w_hat", "cost", "m_norm"))
    return same, "two identical runs are bit-identical" if same else "runs differ"


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("exactness", check_exactness),
    ("fault_injection", check_fault_injection),
    ("lstep", check_lstep),
    ("counterfactual", check_counterfactual),
    ("gradient", check_gradient),
    ("projection", check_projection),
    ("ogd_feasibility", check_ogd_feasibility),
    ("rollout_identity", check_rollout_identity),
    ("stage_isolation", check_stage_isolation),
    ("determinism", check_determinism),
]


def run_all(printer=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        ok &= passed
        printer(f"{'PASS' if passed else 'FAIL'}  {name:<18} {time.perf_counter() - t0:6.2f}s  {detail}")
    return bool(ok)
