import numpy as np
import pytest

from adaclab.behavior import persistently_exciting
from adaclab.errors import ConfigError, ContractError, PersistencyError
from adaclab.explore import (RolloutBatch, clean_sequences, collect_rollouts, draw_persistent_probe,
                             estimate_phi, sample_probe, synthesize_clean, toeplitz_phi)
from adaclab.lti import (DisturbanceGen, LinearEnvironment, accumulated_disturbances,
                         random_stable_system, simulate)

from conftest import scalar_system


class CountingEnv(LinearEnvironment):
    def __init__(self, *a, **k):
        super().__init__(*a, **k)
        self.steps = 0

    def step(self, u):
        self.steps += 1
        return super().step(u)


def test_single_step_rollout_gives_B():
    sys = scalar_system(0.5, 3.0)
    rng = np.random.default_rng(0)
    while True:  # find a seed whose first draw is +1
        batch = collect_rollouts(LinearEnvironment(sys), 1, 1, rng)
        if batch.U[0, 0] == 1.0:
            break
    assert batch.X[0, 0] == 3.0


def test_rollouts_noise_free_identity(rng):
    sys = random_stable_system(2, 2, rng, rho=0.8)
    env = CountingEnv(sys)
    batch = collect_rollouts(env, 7, 6, rng)
    np.testing.assert_allclose(batch.X, toeplitz_phi(sys, 6) @ batch.U, atol=1e-9)
    assert env.steps == 42


def test_rollout_identity_with_disturbances(rng):
    sys = random_stable_system(2, 1, rng, rho=0.8)
    dist = DisturbanceGen("uniform_random", 0.5, 1, 2)
    env = LinearEnvironment(sys, dist)
    batch = collect_rollouts(env, 5, 4, rng)
    W = np.empty_like(batch.X)
    w = env.disturbance_record()
    for k in range(5):
        # each rollout starts from rest, so its accumulated sum restarts too
        W[:, k] = accumulated_disturbances(sys, w[k * 4:(k + 1) * 4]).reshape(-1)
    np.testing.assert_allclose(batch.X - toeplitz_phi(sys, 4) @ batch.U, W, atol=1e-9)


def test_rollout_inputs_are_balanced_signs(rng):
    batch = collect_rollouts(LinearEnvironment(random_stable_system(2, 2, rng)), 50, 10, rng)
    assert set(np.unique(batch.U)) == {-1.0, 1.0}
    assert abs(batch.U.mean()) <= 4 / np.sqrt(50 * 10 * 2)


def test_reset_refusal_is_config_error(rng):
    class Broken(LinearEnvironment):
        def reset(self):
            raise RuntimeError("no reset")

    with pytest.raises(ConfigError):
        collect_rollouts(Broken(scalar_system()), 2, 2, rng)


def test_rollout_batch_roundtrip(tmp_path, rng):
    batch = collect_rollouts(LinearEnvironment(random_stable_system(2, 1, rng)), 3, 4, rng)
    batch.save(tmp_path)
    back = RolloutBatch.load(tmp_path)
    np.testing.assert_array_equal(back.X, batch.X)
    np.testing.assert_array_equal(back.U, batch.U)
    assert (back.I0, back.N) == (3, 4)


def test_phi_single_block():
    sys = random_stable_system(2, 1, 0)
    np.testing.assert_array_equal(toeplitz_phi(sys, 1), sys.B)


def test_phi_scalar_two_steps():
    np.testing.assert_allclose(toeplitz_phi(scalar_system(), 2), [[1, 0], [0.5, 1]])


def test_phi_matches_simulation(rng):
    sys = random_stable_system(3, 2, rng, output="random")
    u = rng.standard_normal((7, 2))
    tr = simulate(sys, u)
    np.testing.assert_allclose(toeplitz_phi(sys, 7) @ u.reshape(-1), tr.states[1:].reshape(-1), atol=1e-10)
    np.testing.assert_allclose(toeplitz_phi(sys, 7, output=True) @ u.reshape(-1), tr.outputs[1:].reshape(-1),
                               atol=1e-10)


def test_estimate_single_step_exact(rng):
    sys = random_stable_system(2, 1, rng)
    batch = collect_rollouts(LinearEnvironment(sys), 9, 1, rng)
    np.testing.assert_allclose(estimate_phi(batch), sys.B, atol=1e-14)


def test_estimate_converges(rng):
    sys = random_stable_system(2, 1, rng, rho=0.7)
    Phi = toeplitz_phi(sys, 8)
    batch = collect_rollouts(LinearEnvironment(sys), 4096, 8, rng)
    assert np.linalg.norm(estimate_phi(batch) - Phi, 2) <= 0.1 * np.linalg.norm(Phi, 2)


def test_estimate_error_halves_when_I0_quadruples():
    sys = random_stable_system(2, 1, 0, rho=0.7)
    Phi = toeplitz_phi(sys, 8)
    ratios = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        e = [np.linalg.norm(estimate_phi(collect_rollouts(LinearEnvironment(sys), I0, 8, rng)) - Phi, 2)
             for I0 in (256, 1024)]
        ratios.append(e[1] / e[0])
    assert 0.5 * 0.65 <= np.median(ratios) <= 0.5 * 1.35


def test_probe_norms(rng):
    p = sample_probe(25, 3, rng)
    np.testing.assert_allclose(np.linalg.norm(p.u, axis=1), 1 / 5, atol=1e-14)
    assert np.linalg.norm(p.stacked) == pytest.approx(1.0, abs=1e-12)


def test_persistent_probe(rng):
    p = draw_persistent_probe(30, 1, 8, rng)
    assert persistently_exciting(p.u, 8)


def test_persistent_probe_gives_up():
    with pytest.raises(PersistencyError):
        draw_persistent_probe(5, 1, 8, 0)


def test_synthesize_noise_free_single_step(rng):
    sys = random_stable_system(2, 2, rng)
    batch = collect_rollouts(LinearEnvironment(sys), 4, 1, rng)
    probe = sample_probe(1, 2, rng)
    # with N = 1 the estimate is exact only when U U' = I0 I, which needs m = 1
    sys1 = random_stable_system(2, 1, rng)
    b1 = collect_rollouts(LinearEnvironment(sys1), 4, 1, rng)
    p1 = sample_probe(1, 1, rng)
    np.testing.assert_allclose(synthesize_clean(b1, p1)[0], sys1.B @ p1.u[0], atol=1e-14)
    assert synthesize_clean(batch, probe).shape == (1, 2)


def test_synthesize_error_bounded_by_phi_error(rng):
    sys = random_stable_system(2, 1, rng)
    batch = collect_rollouts(LinearEnvironment(sys, DisturbanceGen("sinusoid", 0.3, 0, 2)), 20, 10, rng)
    probe = sample_probe(10, 1, rng)
    err = np.linalg.norm(synthesize_clean(batch, probe).reshape(-1) - toeplitz_phi(sys, 10) @ probe.stacked)
    assert err <= np.linalg.norm(estimate_phi(batch) - toeplitz_phi(sys, 10), 2) + 1e-12


def test_synthesize_shape_mismatch(rng):
    batch = collect_rollouts(LinearEnvironment(scalar_system()), 2, 3, rng)
    with pytest.raises(ContractError):
        synthesize_clean(batch, sample_probe(4, 1, rng))


def test_clean_sequence_alignment():
    probe = sample_probe(4, 1, 0)
    s_hat = np.arange(8.0).reshape(4, 2) + 1
    u, s = clean_sequences(probe, s_hat)
    assert u is probe.u
    np.testing.assert_array_equal(s, [[0, 0], [1, 2], [3, 4], [5, 6]])
