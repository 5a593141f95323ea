"""Tests for the message-passing estimator and its scalar tracker."""

import numpy as np
import pytest

from quadnet import gamp, matdenoise, model
from quadnet.matdenoise import DenoiseSpec
from quadnet.state_evolution import ProblemParams, solve_qhat


@pytest.fixture(scope="module")
def tracked_run():
    """One d=200 noiseless run, 10 iterations, with its scalar prediction."""
    params = ProblemParams(alpha=0.3, kappa=0.5)
    trace = gamp.state_evolution_iterate(params, max_iter=12)
    predicted = [params.kappa * (params.q0 - q) for q, _ in trace[:10]]
    inst = model.generate(d=200, kappa=0.5, alpha=0.3, delta=0.0, seed=11)
    dataset = model.reduce(inst)
    opts = gamp.GampOptions(max_iter=10, tol=0.0, seed=11, s_star=inst.S_star)
    S_hat, state = gamp.run(dataset, params, opts)
    return params, predicted, S_hat, state


class TestStateEvolutionIterate:
    def test_fixed_point_matches_solver(self):
        params = ProblemParams(alpha=0.2, kappa=0.5)
        fp = solve_qhat(params, with_free_entropy=False)
        trace = gamp.state_evolution_iterate(params)
        assert trace[-1][0] == pytest.approx(fp.q, abs=1e-5)

    def test_first_step_matches_direct_denoiser_call(self):
        params = ProblemParams(alpha=0.3, kappa=0.5, delta=0.1)
        q_hat_1 = 4.0 * params.alpha / (params.tilde_delta + 2.0 * (params.q0 - params.q_min))
        spec = DenoiseSpec.create(params.prior, 1.0 / q_hat_1)
        q_1 = params.q0 - matdenoise.mmse(spec)
        trace = gamp.state_evolution_iterate(params, max_iter=1)
        assert trace[0][1] == pytest.approx(q_hat_1, rel=1e-12)
        assert trace[0][0] == pytest.approx(q_1, rel=1e-10)

    def test_supercritical_noiseless_reaches_exact_recovery(self):
        params = ProblemParams(alpha=0.45, kappa=0.5)
        trace = gamp.state_evolution_iterate(params)
        assert trace[-1][0] == pytest.approx(params.q0, abs=1e-9)

    @pytest.mark.parametrize(
        "alpha,delta", [(0.2, 0.0), (0.3, 0.0625), (0.1, 0.25)]
    )
    def test_both_init_ends_reach_same_fixed_point(self, alpha, delta):
        params = ProblemParams(alpha=alpha, kappa=0.5, delta=delta)
        low = gamp.state_evolution_iterate(params)[-1][0]
        high = gamp.state_evolution_iterate(params, q_init=params.q0 - 1e-3)[-1][0]
        assert low == pytest.approx(high, abs=1e-8)

    def test_overlap_monotone_from_below(self):
        params = ProblemParams(alpha=0.25, kappa=0.5)
        qs = [q for q, _ in gamp.state_evolution_iterate(params)]
        assert all(b >= a - 1e-12 for a, b in zip(qs, qs[1:]))
        assert params.q_min <= qs[0] <= qs[-1] <= params.q0

    def test_q_init_out_of_range_rejected(self):
        params = ProblemParams(alpha=0.2, kappa=0.5)
        with pytest.raises(ValueError):
            gamp.state_evolution_iterate(params, q_init=params.q0 + 0.5)


class TestRunBasics:
    def test_state_fields_and_trace_lengths(self, tracked_run):
        _, _, S_hat, state = tracked_run
        assert state.iter == 10
        assert len(state.mse_trace) == 10
        assert len(state.a_trace) == len(state.v_trace) == len(state.c_trace) == 10
        assert S_hat.shape == state.S_hat.shape == state.R.shape
        assert state.omega.shape == (model.generate(d=200, kappa=0.5, alpha=0.3, seed=11).n,)

    def test_positivity_invariants(self, tracked_run):
        params, _, _, state = tracked_run
        assert all(a > 0 for a in state.a_trace)
        assert all(v > 0 for v in state.v_trace)
        assert all(0 < c <= 2.0 * params.q0 for c in state.c_trace)

    def test_estimate_symmetric(self, tracked_run):
        _, _, S_hat, state = tracked_run
        for mat in (S_hat, state.S_hat, state.R):
            assert np.max(np.abs(mat - mat.T)) < 1e-12

    def test_same_seed_bit_identical(self):
        params = ProblemParams(alpha=0.3, kappa=0.5)
        inst = model.generate(d=80, kappa=0.5, alpha=0.3, delta=0.0, seed=5)
        dataset = model.reduce(inst)
        opts = gamp.GampOptions(max_iter=4, tol=0.0, seed=5, s_star=inst.S_star)
        S1, st1 = gamp.run(dataset, params, opts)
        S2, st2 = gamp.run(dataset, params, opts)
        assert np.array_equal(S1, S2)
        assert st1.mse_trace == st2.mse_trace

    def test_returns_best_iterate(self, tracked_run):
        params, _, S_hat, state = tracked_run
        inst = model.generate(d=200, kappa=0.5, alpha=0.3, delta=0.0, seed=11)
        best = min(state.mse_trace)
        assert model.matrix_mse(S_hat, inst.S_star, params.kappa) == pytest.approx(best)

    def test_option_validation(self):
        with pytest.raises(ValueError):
            gamp.GampOptions(damping=0.7)
        with pytest.raises(ValueError):
            gamp.GampOptions(init="spectral")
        with pytest.raises(ValueError):
            gamp.GampOptions(max_iter=0)

    def test_sample_init_runs_to_same_fixed_point(self):
        params = ProblemParams(alpha=0.3, kappa=0.5)
        inst = model.generate(d=150, kappa=0.5, alpha=0.3, delta=0.0, seed=21)
        dataset = model.reduce(inst)
        best = {}
        for init in ("mean", "sample"):
            opts = gamp.GampOptions(max_iter=30, seed=21, init=init, s_star=inst.S_star)
            _, state = gamp.run(dataset, params, opts)
            best[init] = min(state.mse_trace)
        # sample init starts with the variance of an independent draw
        assert best["sample"] == pytest.approx(best["mean"], abs=0.03)

    def test_no_data_regime_stays_at_prior_mean(self):
        # a single observation carries no usable signal; the estimate must
        # remain at the prior mean instead of amplifying channel noise
        d = 80
        params = ProblemParams(alpha=1.0 / d**2, kappa=0.5)
        inst = model.generate(d=d, kappa=0.5, alpha=1.0 / d**2, delta=0.0, seed=2)
        dataset = model.reduce(inst)
        assert dataset.n == 1
        opts = gamp.GampOptions(max_iter=8, seed=2, s_star=inst.S_star)
        S_hat, state = gamp.run(dataset, params, opts)
        assert state.converged
        assert state.mse_trace[-1] == pytest.approx(1.0, abs=0.2)
        np.testing.assert_allclose(S_hat, params.prior.mean * np.eye(d), atol=1e-12)

    def test_divergence_guard_raises(self, monkeypatch):
        # tighten the guard so a plateaued trace trips it deterministically
        monkeypatch.setattr(gamp, "DIVERGENCE_FACTOR", 0.5)
        monkeypatch.setattr(gamp, "DIVERGENCE_PATIENCE", 2)
        params = ProblemParams(alpha=0.15, kappa=0.5)
        inst = model.generate(d=60, kappa=0.5, alpha=0.15, delta=0.0, seed=9)
        dataset = model.reduce(inst)
        opts = gamp.GampOptions(max_iter=10, seed=9, s_star=inst.S_star)
        with pytest.raises(gamp.Diverged):
            gamp.run(dataset, params, opts)


class TestRunAgainstScalarTracker:
    def test_per_iteration_tracking_d200(self, tracked_run):
        # first ten iterations track kappa (Q0 - q^t) within 0.05
        _, predicted, _, state = tracked_run
        devs = [abs(m - p) for m, p in zip(state.mse_trace, predicted)]
        assert max(devs) < 0.05

    def test_omitting_memory_term_breaks_tracking(self):
        params = ProblemParams(alpha=0.3, kappa=0.5)
        trace = gamp.state_evolution_iterate(params, max_iter=12)
        predicted = [params.kappa * (params.q0 - q) for q, _ in trace[:10]]
        worst = {False: [], True: []}
        for seed in (3, 4):
            inst = model.generate(d=200, kappa=0.5, alpha=0.3, delta=0.0, seed=seed)
            dataset = model.reduce(inst)
            for omit in (False, True):
                opts = gamp.GampOptions(
                    max_iter=10, tol=0.0, seed=seed, s_star=inst.S_star,
                    omit_onsager=omit,
                )
                try:
                    _, state = gamp.run(dataset, params, opts)
                    dev = max(
                        abs(m - p) for m, p in zip(state.mse_trace, predicted)
                    )
                except gamp.Diverged:
                    dev = np.inf
                worst[omit].append(dev)
        assert min(worst[True]) >= 3.0 * max(worst[False])


class TestSupercritical:
    def test_noiseless_recovery_above_threshold_d200(self):
        # alpha = 0.45 > alpha_PR = 0.375: exact recovery regime
        params = ProblemParams(alpha=0.45, kappa=0.5)
        inst = model.generate(d=200, kappa=0.5, alpha=0.45, delta=0.0, seed=7)
        dataset = model.reduce(inst)
        opts = gamp.GampOptions(max_iter=120, seed=7, s_star=inst.S_star)
        S_hat, state = gamp.run(dataset, params, opts)
        final = model.matrix_mse(S_hat, inst.S_star, params.kappa)
        assert final < 1e-2
