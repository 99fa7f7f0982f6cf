import warnings

import numpy as np
import pytest

from dflearn import coverage as cov
from dflearn import models as md
from dflearn import qp, training
from dflearn.domains import DatasetInstance, gen_budget_allocation, matching_to_qp


def separable_budget_fixture(rng, instances=8, channels=6, customers=8):
    """Features equal noisy targets, so picking good channels is learnable."""
    out = []
    for _ in range(instances):
        theta = (rng.random((channels, customers)) < 0.3) * rng.uniform(
            0.0, 0.2, (channels, customers)
        )
        feats = theta + 0.01 * rng.normal(size=theta.shape)
        out.append(DatasetInstance("budget", feats, theta, 3))
    return out


class TestFullPipelineGradient:
    def test_qp_pipeline_matches_fd(self):
        # fixed weights put two coordinates strictly inside the box so the
        # layer has a nonzero Jacobian
        y = np.array([[1.0, 0.5]])
        W = np.array([[0.4, -0.3, 0.1], [0.4, 0.2, 0.4]])
        model = md.Mlp([W.copy()], [np.zeros(3)], output="identity")
        theta_true = np.array([0.8, 0.3, -0.5])

        def qp_of(theta):
            G = np.vstack([np.eye(3), -np.eye(3)])
            h = np.concatenate([np.ones(3), np.zeros(3)])
            return qp.QpProblem(theta, np.zeros((0, 3)), [], G, h, 0.5)

        def pipeline(params):
            m2 = md.Mlp([params[0]], [params[1]], output="identity")
            th, _ = md.mlp_forward(m2, y)
            return theta_true @ qp.solve_qp(qp_of(th.ravel())).x

        th, cache = md.mlp_forward(model, y)
        sol = qp.solve_qp(qp_of(th.ravel()))
        d_theta = qp.backward_qp(qp_of(th.ravel()), sol, theta_true)
        dWs, dbs = md.mlp_backward(model, cache, d_theta[None, :])
        grads = [a for pair in zip(dWs, dbs) for a in pair]
        params = md.model_params(model)
        h = 1e-5
        checked = 0
        for pi, p in enumerate(params):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                up = [q.copy() for q in params]
                up[pi][idx] += h
                dn = [q.copy() for q in params]
                dn[pi][idx] -= h
                fd = (pipeline(up) - pipeline(dn)) / (2 * h)
                assert abs(fd - grads[pi][idx]) <= max(1e-2 * abs(fd), 1e-5)
                checked += 1
        assert checked == 6 + 3

    def test_submod_pipeline_matches_fd(self):
        # the converged ascent sits on an integral vertex whose exact
        # sensitivity is zero; both sides must agree it vanishes
        y = np.array([[0.8, -0.3]])
        rng = np.random.default_rng(11)
        model = md.Mlp(
            [rng.normal(0, 0.8, size=(2, 6))], [rng.normal(0, 0.3, size=6)],
            output="sigmoid",
        )
        theta_true = np.array([[0.9, 0.1], [0.2, 0.8], [0.4, 0.4]])
        w_items = np.array([1.0, 0.7])

        def pipeline(params):
            m2 = md.Mlp([params[0]], [params[1]], output="sigmoid")
            th, _ = md.mlp_forward(m2, y)
            inst = cov.CoverageInstance(th.reshape(3, 2), w_items, 1)
            pt = cov.sga_maximize(inst, steps=4000, step_size=0.05, rng=3)
            return cov.extension_value(pt.x, cov.CoverageInstance(theta_true, w_items, 1))

        th, cache = md.mlp_forward(model, y)
        inst_hat = cov.CoverageInstance(th.reshape(3, 2), w_items, 1)
        pt = cov.sga_maximize(inst_hat, steps=4000, rng=3)
        g_hat = cov.extension_grad_x(pt.x, inst_hat)
        duals = cov.recover_duals(pt.x, g_hat, 1)
        upstream = cov.extension_grad_x(pt.x, cov.CoverageInstance(theta_true, w_items, 1))
        d_theta = cov.backward_submod(inst_hat, pt.x, duals, upstream)
        dWs, dbs = md.mlp_backward(model, cache, d_theta.reshape(1, 6))
        grads = [a for pair in zip(dWs, dbs) for a in pair]
        params = md.model_params(model)
        h = 1e-5
        for pi, p in enumerate(params):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                up = [q.copy() for q in params]
                up[pi][idx] += h
                dn = [q.copy() for q in params]
                dn[pi][idx] -= h
                fd = (pipeline(up) - pipeline(dn)) / (2 * h)
                assert abs(fd - grads[pi][idx]) <= max(1e-2 * abs(fd), 1e-4)

    def test_matching_gradient_is_ascent_direction(self):
        rng = np.random.default_rng(3)
        from dflearn.domains import gen_bipartite_matching, matching_targets

        (inst,) = gen_bipartite_matching(0, 5)
        theta_hat = rng.uniform(0.2, 0.8, size=(25, 1))
        g = training.decision_grad_theta("matching", inst, theta_hat, 5, gamma=0.5)
        tt = matching_targets(inst).ravel()

        def value(th):
            sol = qp.solve_qp(matching_to_qp(th.reshape(5, 5), 0.5))
            return float(tt @ sol.x)

        base = value(theta_hat)
        step = 1e-3 * g / max(np.abs(g).max(), 1e-12)
        assert value(np.clip(theta_hat + step, 1e-6, 1 - 1e-6)) >= base


class TestTrainModel:
    def test_bit_reproducible(self):
        rng = np.random.default_rng(0)
        data = separable_budget_fixture(rng)
        m1, _ = training.train_model("budget", data, "two_stage", k=3, epochs=3, seed=9)
        m2, _ = training.train_model("budget", data, "two_stage", k=3, epochs=3, seed=9)
        for a, b in zip(md.model_params(m1), md.model_params(m2)):
            assert np.array_equal(a, b)
        d1, _ = training.train_model("budget", data, "decision", k=3, epochs=3, seed=9)
        d2, _ = training.train_model("budget", data, "decision", k=3, epochs=3, seed=9)
        for a, b in zip(md.model_params(d1), md.model_params(d2)):
            assert np.array_equal(a, b)

    def test_decision_training_improves_quality(self):
        rng = np.random.default_rng(1)
        data = separable_budget_fixture(rng, instances=10)
        base, _ = training.train_model("budget", data, "decision", k=3, epochs=1,
                                       seed=5, val_fraction=0.0)
        trained, _ = training.train_model("budget", data, "decision", k=3, epochs=50,
                                          seed=5, val_fraction=0.0)
        q0 = training.evaluate_model("budget", base, data, 3)["quality"]
        q1 = training.evaluate_model("budget", trained, data, 3)["quality"]
        assert q1 > q0

    def test_two_stage_training_reduces_loss(self):
        rng = np.random.default_rng(2)
        data = separable_budget_fixture(rng, instances=10)
        base, _ = training.train_model("budget", data, "two_stage", k=3, epochs=1,
                                       seed=5, val_fraction=0.0)
        trained, _ = training.train_model("budget", data, "two_stage", k=3, epochs=60,
                                          seed=5, val_fraction=0.0)
        m0 = training.evaluate_model("budget", base, data, 3)["mse"]
        m1 = training.evaluate_model("budget", trained, data, 3)["mse"]
        assert m1 < m0

    def test_unknown_method(self):
        rng = np.random.default_rng(3)
        data = separable_budget_fixture(rng, instances=2)
        with pytest.raises(ValueError):
            training.train_model("budget", data, "three_stage", k=3)


class TestEvaluation:
    def test_evaluate_reports_domain_metrics(self):
        data = gen_budget_allocation(0, 8, 10, density=0.3, instances=4)
        model, _ = training.train_model("budget", data, "two_stage", k=3, epochs=2, seed=0)
        ev = training.evaluate_model("budget", model, data, 3)
        assert ev["mse"] is not None
        assert ev["ce"] is None and ev["auc"] is None
        assert ev["quality"] >= 0.0

    def test_random_decisions_feasible(self):
        rng = np.random.default_rng(4)
        data = gen_budget_allocation(1, 8, 10, density=0.3, instances=2)
        for inst in data:
            S = training.random_decision("budget", inst, 3, rng)
            assert len(S) == 3
        from dflearn.domains import gen_bipartite_matching

        (minst,) = gen_bipartite_matching(0, 4)
        x = training.random_decision("matching", minst, 4, rng)
        assert np.all(x.sum(axis=0) == 1) and np.all(x.sum(axis=1) == 1)

    def test_decide_matches_layer_oracles(self):
        data = gen_budget_allocation(2, 6, 8, density=0.4, instances=1)
        theta_hat = data[0].targets  # perfect predictions
        S = training.decide("budget", theta_hat, 3)
        ci = cov.CoverageInstance(theta_hat, np.ones(8), 3)
        assert S == cov.greedy_select(ci, 3)
