"""JSON experiment configs: parsing, validation and environment assembly.

A config looks like::

    {
      "mode": "etc",
      "T": 1024,
      "seeds": [0, 1, 2],
      "system": {"n": 2, "m": 1, "rho": 0.7, "seed": 0},
      "disturbance": {"kind": "sinusoid", "epsilon": 0.5},
      "noise": {"kind": "uniform_random", "epsilon": 0.25},
      "cost": {"kind": "quadratic_tracking"},
      "L": null, "N": null, "I0": null, "D": 1.0, "G": 1.0
    }

``system`` may instead give explicit ``A``, ``B`` (and ``C``) matrices.  A
random system is redrawn per run seed unless ``system.seed`` pins it.
``noise`` is only used in ``output`` mode.  Missing keys take the defaults
of :data:`DEFAULTS`.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .controller import default_memory
from .errors import ConfigError, ContractError, StabilityError
from .lti import (COST_KINDS, DISTURBANCE_KINDS, CostOracle, DisturbanceGen, LinearEnvironment,
                  LtiSystem, certify_stability, controllability_matrix, random_stable_system)
from .pipeline import default_rollout_length, default_rollouts, exploration_target

MODES = ("clean", "etc", "output")

DEFAULTS = {
    "mode": "clean",
    "T": 1024,
    "seeds": [0],
    "system": {"n": 2, "m": 1, "rho": 0.7},
    "disturbance": {"kind": "sinusoid", "epsilon": 0.5},
    "noise": {"kind": "zero", "epsilon": 0.0},
    "cost": {"kind": "quadratic_tracking"},
    "L": None,
    "N": None,
    "I0": None,
    "D": 1.0,
    "G": 1.0,
    "count_stage1_cost": True,
    "out": None,
}


@dataclass
class ExperimentConfig:
    mode: str
    T: int
    seeds: list
    system: dict
    disturbance: dict
    noise: dict
    cost: dict
    L: Optional[int] = None
    N: Optional[int] = None
    I0: Optional[int] = None
    D: float = 1.0
    G: float = 1.0
    count_stage1_cost: bool = True
    out: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        merged = copy.deepcopy(DEFAULTS)
        extra = {}
        for k, v in raw.items():
            if k in merged:
                merged[k] = v
            else:
                extra[k] = v
        try:
            cfg = cls(**merged, extra=extra)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg.validate_shape()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in DEFAULTS}
        d.update(self.extra)
        return d

    # -- validation -------------------------------------------------------
    def validate_shape(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.T, int) or self.T < 2:
            raise ConfigError(f"T must be an integer >= 2, got {self.T!r}")
        if not isinstance(self.seeds, list) or not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of integers")
        if self.disturbance.get("kind", "zero") not in DISTURBANCE_KINDS:
            raise ConfigError(f"unknown disturbance kind {self.disturbance.get('kind')!r}")
        if self.noise.get("kind", "zero") not in DISTURBANCE_KINDS:
            raise ConfigError(f"unknown noise kind {self.noise.get('kind')!r}")
        if self.cost.get("kind", "quadratic_tracking") not in COST_KINDS:
            raise ConfigError(f"unknown cost kind {self.cost.get('kind')!r}")
        for name in ("L", "N", "I0"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{name} must be a positive integer or null")

    def build_system(self, seed: Optional[int] = None) -> LtiSystem:
        spec = self.system
        try:
            if "A" in spec:
                A = np.asarray(spec["A"], dtype=float)
                B = np.asarray(spec["B"], dtype=float)
                A2 = np.atleast_2d(A)
                try:
                    certify_stability(A2)
                except StabilityError as exc:
                    raise ConfigError(f"assumption 1 (stable A) violated: {exc}", assumption=1) from exc
                Bm = B.reshape(A2.shape[0], -1)
                if np.linalg.matrix_rank(controllability_matrix(A2, Bm)) < A2.shape[0]:
                    raise ConfigError("(A, B) is not controllable", assumption="controllability")
                return LtiSystem(A2, Bm, spec.get("C"), spec.get("rho"))
            rho = float(spec.get("rho", 0.7))
            if not 0 <= rho < 1:
                raise ConfigError(f"assumption 1 (stable A) violated: rho={rho} not in [0, 1)", assumption=1)
            output = "random" if self.mode == "output" and spec.get("output", "random") == "random" else "identity"
            s = spec.get("seed", seed if seed is not None else 0)
            return random_stable_system(int(spec.get("n", 2)), int(spec.get("m", 1)), s, rho=rho, output=output)
        except ContractError as exc:
            raise ConfigError(f"invalid system: {exc}") from exc
        except StabilityError as exc:
            raise ConfigError(f"assumption 1 (stable A) violated: {exc}", assumption=1) from exc

    def resolved(self, sys: LtiSystem, T: Optional[int] = None) -> dict:
        """Validate the schedule against the system; return resolved ``L, N, I0``."""
        n, m = sys.n, sys.m
        T = self.T if T is None else T
        eps = float(self.disturbance.get("epsilon", 0.0))
        if not math.isfinite(eps) or eps < 0:
            raise ConfigError(f"assumption 2 (bounded disturbance) violated: epsilon={eps}", assumption=2)
        if self.G <= 0 or not math.isfinite(self.G):
            raise ConfigError(f"assumption 3 (gradient bound G > 0) violated: G={self.G}", assumption=3)
        if self.D <= 0 or not math.isfinite(self.D):
            raise ConfigError(f"assumption 4 (norm bound D > 0) violated: D={self.D}", assumption=4)
        L = default_memory(T, n) if self.L is None else self.L
        if L < 2 * n:
            raise ConfigError(f"assumption 5 violated: memory L={L} must satisfy L >= 2n = {2 * n}",
                              assumption=5)
        N = default_rollout_length(L, m, n) if self.N is None else self.N
        if self.mode == "output" and sys.p != n:
            raise ConfigError("output mode needs a square, invertible C (p = n)")
        I0 = None
        if self.mode in ("etc", "output"):
            budget = T ** (2.0 / 3.0)
            if N < (m + n + 1) * L or N >= budget:
                raise ConfigError(
                    f"assumption 6 violated: need (m+n+1)L = {(m + n + 1) * L} <= N = {N} < T^(2/3) = {budget:.4g}",
                    assumption=6)
            I0 = default_rollouts(T, N) if self.I0 is None else self.I0
            if N * I0 >= T:
                raise ConfigError(f"exploration budget N*I0 = {N * I0} leaves no commitment steps (T={T})")
        return {"L": L, "N": N, "I0": I0, "T_s_target": exploration_target(T)}

    def build_environment(self, sys: LtiSystem, seed: int) -> LinearEnvironment:
        d = self.disturbance
        dist = DisturbanceGen(d.get("kind", "zero"), float(d.get("epsilon", 0.0)), seed, sys.n)
        if self.mode != "output":
            return LinearEnvironment(sys, dist)
        e = self.noise
        noise = DisturbanceGen(e.get("kind", "zero"), float(e.get("epsilon", 0.0)), seed + 1_000_003, sys.p)
        return LinearEnvironment(sys, dist, noise=noise, output=True)

    def build_cost(self, sys: LtiSystem, T: int, seed: int) -> CostOracle:
        spec = dict(self.cost)
        q = sys.p if self.mode == "output" else sys.n
        eps = float(self.disturbance.get("epsilon", 0.0))
        spec.setdefault("G", self.G)
        spec.setdefault("box_u", 1.0)
        # a box large enough to contain every trajectory the controller class can produce
        spec.setdefault("box_x", (np.linalg.norm(sys.B, 2) * self.D * math.sqrt(sys.m) + eps + 1e-12)
                        / (1 - sys.rho))
        try:
            return CostOracle.from_config(spec, q, sys.m, T, seed=seed)
        except (ContractError, TypeError) as exc:
            raise ConfigError(f"invalid cost spec: {exc}") from exc
