"""Local update rules: perturbations, per-step arithmetic, reductions."""

import numpy as np
import pytest

from fnsm import (
    BroadcastState,
    ClientState,
    DivergenceError,
    LocalRule,
    Quadratic,
    SoftmaxLinear,
    local_round,
    nsam_perturbation,
    rng_for,
    sam_perturbation,
    synth_gaussian_mixture,
)


def broadcast(theta, momentum=None, last_delta=None, lr=0.1, steps=1, round_index=0):
    theta = np.asarray(theta, dtype=float)
    z = np.zeros_like(theta)
    return BroadcastState(
        theta=theta,
        momentum=z if momentum is None else np.asarray(momentum, dtype=float),
        last_delta=z if last_delta is None else np.asarray(last_delta, dtype=float),
        lr=lr,
        local_steps=steps,
        round_index=round_index,
    )


def quad_client(A, c, cid=0):
    return ClientState(client_id=cid, model=Quadratic(np.asarray(A, float), np.asarray(c, float)))


def data_client(seed=0, cid=0, batch_size=8, n=40):
    ds = synth_gaussian_mixture(3, 4, n, 0.8, seed=seed)
    model = SoftmaxLinear(3, 4)
    return ClientState(
        client_id=cid, model=model, features=ds.features, labels=ds.labels,
        seed=seed, batch_size=batch_size,
    )


class TestPerturbations:
    def test_sam_three_four_five(self):
        assert np.allclose(sam_perturbation(np.array([3.0, 4.0]), 0.1), [0.06, 0.08], atol=1e-15)

    def test_sam_zero_gradient_fallback(self):
        assert np.array_equal(sam_perturbation(np.zeros(2), 0.1), np.zeros(2))

    def test_sam_axis_vector(self):
        assert np.allclose(sam_perturbation(np.array([1.0, 0.0]), 0.05), [0.05, 0.0], atol=1e-15)

    def test_nsam_negated_unit(self):
        assert np.allclose(nsam_perturbation(np.array([0.0, -2.0]), 0.1), [0.0, 0.1], atol=1e-15)

    def test_nsam_cold_start(self):
        assert np.array_equal(nsam_perturbation(np.zeros(3), 0.4), np.zeros(3))

    def test_nsam_three_four_five_negated(self):
        assert np.allclose(nsam_perturbation(np.array([3.0, 4.0]), 1.0), [-0.6, -0.8], atol=1e-15)

    def test_negative_rho_rejected(self):
        with pytest.raises(ValueError):
            sam_perturbation(np.ones(2), -0.1)
        with pytest.raises(ValueError):
            nsam_perturbation(np.ones(2), -0.1)


class TestRuleValidation:
    def test_bad_rho_and_momentum(self):
        with pytest.raises(ValueError):
            LocalRule.sam(-1.0)
        with pytest.raises(ValueError):
            LocalRule.nsam(0.1, 1.0)
        with pytest.raises(ValueError):
            LocalRule("newton")


class TestSgdStep:
    def test_single_step_displacement(self):
        client = quad_client(np.eye(2), [1.0, -2.0])
        theta0 = np.array([0.5, 0.5])
        res = local_round(LocalRule.sgd(), broadcast(theta0, lr=0.1), client)
        expect = -0.1 * (theta0 - np.array([1.0, -2.0]))
        assert np.allclose(res.delta, expect, atol=1e-15)

    def test_bookkeeping_exact(self):
        client = data_client(seed=3)
        bs = broadcast(np.zeros(client.model.dim), lr=0.05, steps=7)
        res = local_round(LocalRule.sgd(), bs, client)
        assert np.array_equal(res.delta + bs.theta, res.final_theta)
        assert res.steps_taken == 7

    def test_descent_on_quadratic(self):
        # lr below 1/lambda_max strictly decreases the full objective
        A = np.diag([2.0, 0.5])
        client = quad_client(A, [0.0, 0.0])
        theta0 = np.array([1.0, 1.0])
        res = local_round(LocalRule.sgd(), broadcast(theta0, lr=0.4, steps=3), client)
        assert client.model.loss(res.final_theta) < client.model.loss(theta0)


class TestReductions:
    def test_sam_zero_radius_equals_sgd(self):
        client_a, client_b = data_client(seed=5), data_client(seed=5)
        bs = broadcast(np.zeros(client_a.model.dim), lr=0.1, steps=10)
        a = local_round(LocalRule.sgd(), bs, client_a)
        b = local_round(LocalRule.sam(0.0), bs, client_b)
        assert np.array_equal(a.final_theta, b.final_theta)

    def test_nsam_all_zero_equals_sgd(self):
        client_a, client_b = data_client(seed=6), data_client(seed=6)
        bs = broadcast(np.zeros(client_a.model.dim), lr=0.1, steps=10)
        a = local_round(LocalRule.sgd(), bs, client_a)
        b = local_round(LocalRule.nsam(0.0, 0.0, extrapolate=True), bs, client_b)
        assert np.array_equal(a.final_theta, b.final_theta)


class TestSamStep:
    def test_one_dimensional_closed_form(self):
        # F = theta^2/2, theta0 = 1, lr = 0.1, rho = 0.1:
        # probe = 1.1, so theta1 = 1 - 0.1 * 1.1 = 0.89
        client = quad_client(np.eye(1), [0.0])
        res = local_round(LocalRule.sam(0.1), broadcast(np.array([1.0]), lr=0.1), client)
        assert res.final_theta[0] == pytest.approx(0.89, abs=1e-15)


class TestNsamStep:
    def test_probe_constant_within_round(self):
        # hand-rolled loop with the round's fixed probe offset
        A = np.diag([1.5, 0.5])
        c = np.array([0.3, -0.7])
        m = np.array([0.2, -0.1])
        lam, rho, lr = 0.85, 0.1, 0.2
        client = quad_client(A, c)
        bs = broadcast(np.array([1.0, 1.0]), momentum=m, lr=lr, steps=4)
        res = local_round(LocalRule.nsam(rho, lam, extrapolate=True), bs, client)

        offset = lam * m + rho * (-m) / np.linalg.norm(m)
        theta = bs.theta.copy()
        for _ in range(4):
            theta = theta - lr * (A @ (theta + offset - c))
        assert np.allclose(res.final_theta, theta, atol=1e-15)

    def test_no_extrapolation_drops_lookahead(self):
        m = np.array([0.2, -0.1])
        client = quad_client(np.eye(2), [0.0, 0.0])
        bs = broadcast(np.array([1.0, 1.0]), momentum=m, lr=0.1, steps=2)
        res = local_round(LocalRule.nsam(0.1, 0.85, extrapolate=False), bs, client)

        offset = 0.1 * (-m) / np.linalg.norm(m)
        theta = bs.theta.copy()
        for _ in range(2):
            theta = theta - 0.1 * (theta + offset)
        assert np.allclose(res.final_theta, theta, atol=1e-15)


class TestMoSamStep:
    def test_blends_pseudo_gradient(self):
        A, c = np.eye(2), np.array([0.0, 0.0])
        last_delta = np.array([-0.4, 0.2])
        lam, rho, lr, K = 0.85, 0.1, 0.1, 3
        client = quad_client(A, c)
        bs = broadcast(np.array([1.0, 0.5]), last_delta=last_delta, lr=lr, steps=K)
        res = local_round(LocalRule.mosam(rho, lam), bs, client)

        ghat = -last_delta / (lr * K)
        theta = bs.theta.copy()
        for _ in range(K):
            g = A @ (theta - c)
            d = rho * g / np.linalg.norm(g)
            theta = theta - lr * (lam * (A @ (theta + d - c)) + (1 - lam) * ghat)
        assert np.allclose(res.final_theta, theta, atol=1e-15)


class TestLesamStep:
    def test_first_participation_has_zero_perturbation(self):
        client_a, client_b = data_client(seed=7), data_client(seed=7)
        bs = broadcast(np.zeros(client_a.model.dim), lr=0.1, steps=5)
        a = local_round(LocalRule.sgd(), bs, client_a)
        b = local_round(LocalRule.lesam(0.1), bs, client_b)
        assert np.array_equal(a.final_theta, b.final_theta)
        assert np.array_equal(client_b.old_global, bs.theta)

    def test_perturbs_along_global_drift(self):
        A, c = np.diag([1.0, 2.0]), np.array([0.5, -0.5])
        client = quad_client(A, c)
        client.old_global = np.array([1.0, 1.0])
        theta0 = np.array([0.2, 0.6])
        bs = broadcast(theta0, lr=0.1, steps=2)
        res = local_round(LocalRule.lesam(0.3), bs, client)

        drift = np.array([1.0, 1.0]) - theta0
        d = 0.3 * drift / np.linalg.norm(drift)
        theta = theta0.copy()
        for _ in range(2):
            theta = theta - 0.1 * (A @ (theta + d - c))
        assert np.allclose(res.final_theta, theta, atol=1e-15)
        assert np.array_equal(client.old_global, theta0)

    def test_metric_only_run_keeps_memory(self):
        client = data_client(seed=8)
        client.old_global = np.full(client.model.dim, 0.25)
        bs = broadcast(np.zeros(client.model.dim), lr=0.1, steps=2)
        local_round(LocalRule.lesam(0.1), bs, client, update_client_state=False)
        assert np.array_equal(client.old_global, np.full(client.model.dim, 0.25))


class TestEdges:
    def test_empty_shard_returns_skip(self):
        model = SoftmaxLinear(3, 4)
        client = ClientState(
            client_id=0, model=model,
            features=np.empty((0, 4)), labels=np.empty(0, dtype=int),
        )
        assert local_round(LocalRule.sgd(), broadcast(np.zeros(model.dim)), client) is None

    def test_divergence_carries_context(self):
        client = quad_client(np.diag([4.0]), [0.0], cid=3)
        bs = broadcast(np.array([1.0]), lr=200.0, steps=500, round_index=9)
        with pytest.raises(DivergenceError) as err:
            local_round(LocalRule.sgd(), bs, client)
        assert err.value.round_index == 9
        assert err.value.client_id == 3
        assert err.value.step > 0

    def test_batches_cover_shard_without_replacement(self):
        client = data_client(seed=9, batch_size=16, n=40)
        stream = client.batches(round_index=0)
        seen = []
        for _ in range(3):  # one epoch: 16 + 16 + 8
            X, _ = next(stream)
            seen.append(X)
        sizes = [len(x) for x in seen]
        assert sizes == [16, 16, 8]
        stacked = np.vstack(seen)
        full = np.unique(client.features, axis=0)
        assert np.array_equal(np.unique(stacked, axis=0), full)

    def test_batch_stream_keyed_by_round(self):
        client = data_client(seed=10)
        a = next(client.batches(round_index=0))[0]
        b = next(client.batches(round_index=0))[0]
        c = next(client.batches(round_index=1))[0]
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
