import numpy as np
import pytest

from adaclab.behavior import HankelPair
from adaclab.lti import CostOracle, DisturbanceGen, LtiSystem, random_stable_system
from adaclab.pipeline import make_clean_trajectory


def scalar_system(a=0.5, b=1.0):
    return LtiSystem(np.array([[a]]), np.array([[b]]))


def clean_pair(sys, L, rng, output=False, extra=10):
    """A clean Hankel pair with comfortable persistency margin."""
    N = (sys.m + 1) * (L + 2 * sys.n) + extra
    u_d, s_d = make_clean_trajectory(sys, L, N, rng, output=output)
    return HankelPair.from_sequences(u_d, s_d, L)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sys2():
    return random_stable_system(2, 1, 0, rho=0.7)


@pytest.fixture
def cost_factory():
    def make(q, m, T, seed=0, **kw):
        kw.setdefault("box_x", 5.0)
        return CostOracle.quadratic_tracking(q, m, T, seed=seed, **kw)
    return make


@pytest.fixture
def sine():
    def make(dim, eps=0.5, seed=0):
        return DisturbanceGen("sinusoid", eps, seed, dim)
    return make
