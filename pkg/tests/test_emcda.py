import itertools

import numpy as np
import pytest

from oracles import conditional_enum, poisson_binomial_enum, posterior_marginals
from topoinfer.causality import MetricConfig
from topoinfer.cda import cda_decisions
from topoinfer.core import (Adjacency, CostGuardError, InvalidConfigError, InvalidInputError,
                            LatentSample, ModelParams, ObservationSet, forward_observe)
from topoinfer.emcda import (EmConfig, EmState, InconsistentObservationError, draw_sample_arrays,
                             draw_samples, es_score, es_search, gibbs_conditional, m_step,
                             poisson_binomial_pmf, poisson_binomial_table, reconstruct_sequences,
                             run_em_cda, run_em_es, update_rates)
from topoinfer.sim import SimConfig, gen_model_faithful


def params_for(n, links, rate=0.5, loss=0.5, delay=1):
    adj = Adjacency.from_links(n, links)
    return ModelParams(adj, np.full((n, n), loss), np.full((n, n), rate),
                       np.full((n, n), delay, dtype=int))


def obs_of(data, acks):
    return ObservationSet(np.asarray(data), np.asarray(acks))


class TestPoissonBinomial:
    def test_examples(self):
        assert poisson_binomial_pmf(1, [0.5, 0.5]) == pytest.approx(0.5, abs=1e-15)
        assert [poisson_binomial_pmf(y, [0.1, 0.2]) for y in range(3)] == pytest.approx(
            [0.72, 0.26, 0.02], abs=1e-15)
        assert poisson_binomial_pmf(0, []) == 1.0
        assert poisson_binomial_pmf(1, []) == 0.0
        assert poisson_binomial_pmf(3, [0.5, 0.5]) == 0.0
        assert poisson_binomial_pmf(-1, [0.5]) == 0.0

    def test_matches_enumeration_on_grid(self):
        grid = np.linspace(0.0, 1.0, 11)
        rng = np.random.default_rng(0)
        worst = 0.0
        for size in range(0, 13):
            for _ in range(4):
                probs = list(rng.choice(grid, size))
                table = poisson_binomial_table(probs)
                for y in range(size + 2):
                    ref = poisson_binomial_enum(y, probs)
                    worst = max(worst, abs(poisson_binomial_pmf(y, probs) - ref))
                    if y <= size:
                        worst = max(worst, abs(table[y] - ref))
        assert worst <= 1e-12

    def test_rejects_bad_probability(self):
        with pytest.raises(InvalidInputError):
            poisson_binomial_pmf(0, [1.2])
        with pytest.raises(InvalidInputError):
            poisson_binomial_pmf(0, [float("nan")])


class TestGibbsConditional:
    def test_no_data_means_no_transmission(self):
        obs = obs_of([[0, 0, 0], [0, 0, 0]], [[0, 0, 0], [0, 0, 0]])
        p = gibbs_conditional(0, 1, 1, obs, params_for(2, [(0, 1)]))
        assert p.tolist() == [1.0, 0.0, 0.0]

    def test_ack_seen_means_delivered(self):
        obs = obs_of([[1, 0, 0], [0, 0, 0]], [[0, 0, 0], [0, 1, 0]])
        p = gibbs_conditional(0, 1, 0, obs, params_for(2, [(0, 1)]))
        assert p.tolist() == [0.0, 1.0, 0.0]

    def test_no_ack_means_lost(self):
        obs = obs_of([[1, 0, 0], [0, 0, 0]], [[0, 0, 0], [0, 0, 0]])
        p = gibbs_conditional(0, 1, 0, obs, params_for(2, [(0, 1)]))
        assert p.tolist() == [0.0, 0.0, 1.0]

    def test_window_edge_uses_prior_for_loss(self):
        obs = obs_of([[0, 0, 1], [0, 0, 0]], [[0, 0, 0], [0, 0, 0]])
        p = gibbs_conditional(0, 1, 2, obs, params_for(2, [(0, 1)], loss=0.3))
        assert p == pytest.approx([0.0, 0.7, 0.3], abs=1e-15)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(30):
            n, K = 4, 8
            A = (rng.random((n, n)) < 0.6).astype(int)
            np.fill_diagonal(A, 0)
            links = list(zip(*np.nonzero(A)))
            if not links:
                continue
            rate, loss = rng.uniform(0.05, 0.95, (n, n)), rng.uniform(0.05, 0.95, (n, n))
            delay = rng.integers(1, 3, (n, n))
            data = rng.integers(0, 3, (n, K))
            acks = rng.integers(0, 3, (n, K))
            params = ModelParams(Adjacency(A), loss, rate, delay)
            obs = obs_of(data, acks)
            for i, j in links:
                for k in range(K):
                    try:
                        ref = conditional_enum(i, j, k, data, acks, A, rate, loss, delay)
                    except ZeroDivisionError:
                        with pytest.raises(InconsistentObservationError):
                            gibbs_conditional(i, j, k, obs, params)
                        continue
                    got = gibbs_conditional(i, j, k, obs, params)
                    worst = max(worst, float(np.max(np.abs(got - ref))))
        assert worst <= 1e-12

    def test_inconsistent_site(self):
        obs = obs_of([[2, 0], [0, 0]], [[0, 0], [0, 0]])
        params = params_for(2, [(0, 1)])
        with pytest.raises(InconsistentObservationError):
            gibbs_conditional(0, 1, 0, obs, params)
        p = gibbs_conditional(0, 1, 0, obs, params, on_inconsistent="uniform")
        assert p == pytest.approx([1 / 3] * 3)

    def test_inactive_link_rejected(self):
        obs = obs_of([[0, 0], [0, 0]], [[0, 0], [0, 0]])
        with pytest.raises(InvalidInputError):
            gibbs_conditional(1, 0, 0, obs, params_for(2, [(0, 1)]))


class TestDrawSamples:
    @pytest.mark.parametrize("sampler", ["site", "block"])
    @pytest.mark.parametrize("rate, pattern", [(1.0, [1, 1, 1, 1, 1, 1]),
                                               (0.7, [1, 0, 1, 1, 0, 1])])
    def test_degenerate_posterior(self, sampler, rate, pattern):
        d = np.array(pattern, dtype=bool)
        params = params_for(2, [(0, 1)], rate=rate, loss=0.0)
        latent = np.zeros((2, 2, 6), bool)
        latent[0, 1] = d
        obs = forward_observe(LatentSample(latent, np.zeros_like(latent)), params)
        cfg = EmConfig(n_samples=5, sampler=sampler)
        for s in draw_samples(obs, params, cfg):
            assert s.d[0, 1].tolist() == obs.data[0].astype(bool).tolist()
            assert not s.e.any()

    @pytest.mark.parametrize("sampler", ["site", "block"])
    def test_chain_marginals_match_enumeration(self, sampler):
        # N=2, K=3, both directions active; exact posterior by enumeration.
        data = np.array([[1, 1, 1], [1, 0, 1]])
        acks = np.array([[0, 1, 0], [0, 0, 1]])
        links = [(0, 1), (1, 0)]
        rate = np.array([[0, 0.4], [0.6, 0]])
        loss = np.array([[0, 0.3], [0.5, 0]])
        delay = np.ones((2, 2), dtype=int)
        exact = posterior_marginals(data, acks, links, rate, loss, delay)
        params = ModelParams(Adjacency.from_links(2, links), loss, rate, delay)
        cfg = EmConfig(n_samples=2000, sampler=sampler, rng_seed=3)
        D, E = draw_sample_arrays(obs_of(data, acks), params, cfg, np.random.default_rng(3))
        tv = 0.0
        for i, j in links:
            state = D[:, i, j].astype(int) + E[:, i, j]
            emp = np.stack([(state == s).mean(axis=0) for s in range(3)], axis=1)
            tv = max(tv, float(0.5 * np.abs(emp - exact[(i, j)]).sum(axis=1).max()))
        assert tv <= 0.02

    def test_support_and_order_invariants(self):
        obs, truth, _ = gen_model_faithful(SimConfig(n_slots=300, seed=2))
        params = truth.replace(loss=np.full((4, 4), 0.2))
        for sampler in ("site", "block"):
            D, E = draw_sample_arrays(obs, params, EmConfig(n_samples=4, sampler=sampler),
                                      np.random.default_rng(0))
            off = ~truth.adjacency.matrix.astype(bool)
            assert not D[:, off].any() and not E[:, off].any()
            assert not (E & ~D).any()

    def test_block_reproduces_data(self):
        obs, truth, _ = gen_model_faithful(SimConfig(n_slots=300, seed=2))
        D, _ = draw_sample_arrays(obs, truth, EmConfig(n_samples=3), np.random.default_rng(0))
        assert (D.sum(axis=2) == obs.data[None]).all()

    def test_seed_reproducible(self):
        obs, truth, _ = gen_model_faithful(SimConfig(n_slots=200, seed=1))
        cfg = EmConfig(n_samples=3, rng_seed=9)
        a, b = draw_samples(obs, truth, cfg), draw_samples(obs, truth, cfg)
        assert all(x == y for x, y in zip(a, b))


class TestReconstruct:
    def test_zero_errors_keep_acks(self):
        obs, truth, latent = gen_model_faithful(SimConfig(n_slots=100, seed=0))
        sample = LatentSample(latent.d, np.zeros_like(latent.e))
        _, acks = reconstruct_sequences(sample, obs, truth)
        assert (acks == obs.acks).all()

    def test_imputed_ack_lands_tau_later(self):
        K = 10
        d = np.zeros((2, 2, K), bool)
        e = np.zeros((2, 2, K), bool)
        d[0, 1, 4] = e[0, 1, 4] = True
        params = params_for(2, [(0, 1)], delay=2)
        obs = obs_of(np.zeros((2, K), int), np.zeros((2, K), int))
        _, acks = reconstruct_sequences(LatentSample(d, e), obs, params)
        assert acks[1, 6] == obs.acks[1, 6] + 1 and acks.sum() == 1

    def test_true_errors_restore_lossless_acks(self):
        obs, truth, latent = gen_model_faithful(SimConfig(n_slots=500, loss_star=0.4, seed=4))
        data, acks = reconstruct_sequences(latent, obs, truth)
        lossless = forward_observe(LatentSample(latent.d, np.zeros_like(latent.e)), truth)
        assert (acks == lossless.acks).all() and (data == obs.data).all()


class TestMStep:
    def test_rate_and_loss_examples(self):
        D = np.zeros((1, 2, 2, 10), bool)
        D[0, 0, 1] = [1, 0, 1, 0, 0, 0, 0, 0, 1, 0]
        E = np.zeros_like(D)
        mask = np.zeros((2, 2), bool)
        mask[0, 1] = True
        R, _ = update_rates(np.zeros((2, 2)), np.zeros((2, 2)), D, E, mask, 1.0)
        assert R[0, 1] == pytest.approx(0.3)
        D[0, 0, 1] = [1] * 8 + [0, 0]
        E[0, 0, 1, :2] = True
        _, L = update_rates(np.zeros((2, 2)), np.zeros((2, 2)), D, E, mask, 1.0)
        assert L[0, 1] == pytest.approx(0.25)

    def test_learning_rate_mixes_and_masks(self):
        D = np.ones((2, 2, 2, 4), bool)
        E = np.zeros_like(D)
        mask = np.array([[False, True], [False, False]])
        R, L = update_rates(np.full((2, 2), 0.2), np.full((2, 2), 0.6), D, E, mask, 0.25)
        assert R[0, 1] == pytest.approx(0.75 * 0.2 + 0.25) and L[0, 1] == pytest.approx(0.45)
        assert R[1, 0] == 0.2 and L[1, 0] == 0.6

    def test_loss_kept_without_transmissions(self):
        D = np.zeros((1, 2, 2, 5), bool)
        mask = np.ones((2, 2), bool)
        _, L = update_rates(np.zeros((2, 2)), np.full((2, 2), 0.4), D, D, mask, 1.0)
        assert (L == 0.4).all()

    def test_shrinkage_towards_pooled_loss(self):
        D = np.zeros((1, 2, 2, 10), bool)
        D[0, 0, 1, :4] = True
        E = np.zeros_like(D)
        E[0, 0, 1, :4] = True
        mask = np.ones((2, 2), bool)
        _, L = update_rates(np.zeros((2, 2)), np.zeros((2, 2)), D, E, mask, 1.0,
                            prior_weight=4.0, pooled_loss=0.1)
        assert L[0, 1] == pytest.approx((4 + 4 * 0.1) / 8)

    def test_schedule(self):
        cfg = EmConfig()
        assert [cfg.gamma(n) for n in (1, 5, 6, 7, 10)] == [1, 1, 1, 0.5, 0.2]
        assert EmConfig(learning_rate=0.3).gamma(12) == 0.3

    def test_majority_tie_counts_as_link(self):
        # Two samples: one carries the coupling, the other sends nothing.
        rng = np.random.default_rng(0)
        K = 2000
        x = rng.random(K) < 0.5
        acks = np.zeros((2, K), int)
        acks[1, 1:] = x[:-1]
        obs = obs_of(np.stack([x.astype(int), np.zeros(K, int)]), acks)
        params = params_for(2, [(0, 1)], loss=0.0)
        D = np.zeros((2, 2, 2, K), bool)
        D[0, 0, 1] = x
        E = np.zeros_like(D)
        cfg = EmConfig(metric=MetricConfig(kind="te"))
        new = m_step((D, E), obs, EmState(params, 0), cfg, np.random.default_rng(1))
        assert new.adjacency.matrix[0, 1] == 1 and new.adjacency.matrix[1, 0] == 0
        cfg3 = EmConfig(metric=MetricConfig(kind="te"))
        D3 = np.concatenate([D, D[1:]])
        new3 = m_step((D3, np.zeros_like(D3)), obs, EmState(params, 0), cfg3,
                      np.random.default_rng(1))
        assert new3.adjacency.matrix[0, 1] == 0

    def test_rates_frozen_off_common_support(self):
        obs, truth, latent = gen_model_faithful(SimConfig(n_slots=2000, seed=3))
        n = 4
        start = ModelParams(Adjacency.full(n), np.full((n, n), 0.5), np.full((n, n), 0.5),
                            truth.delay, 3)
        D, E = draw_sample_arrays(obs, start, EmConfig(n_samples=4), np.random.default_rng(0))
        new = m_step((D, E), obs, EmState(start, 0), EmConfig(n_samples=4),
                     np.random.default_rng(0))
        dropped = ~new.adjacency.matrix.astype(bool)
        assert (new.rate[dropped] == 0.5).all() and (new.loss[dropped] == 0.5).all()
        kept = new.adjacency.matrix.astype(bool)
        assert not np.allclose(new.rate[kept], 0.5)

    def test_lossless_first_iteration_matches_cda(self):
        # Without losses nothing is imputed, so one sample tested with the
        # same permutation stream reproduces the plain CDA decisions.
        obs, truth, _ = gen_model_faithful(SimConfig(n_slots=5000, loss_star=0.0, seed=5))
        n = 4
        metric = MetricConfig(kind="te", permutations=20)
        cfg = EmConfig(n_samples=1, metric=metric, permutations=20)
        start = ModelParams(Adjacency.full(n), np.zeros((n, n)), np.full((n, n), 0.1),
                            truth.delay, 3)
        D, E = draw_sample_arrays(obs, start, cfg, np.random.default_rng(0))
        assert not E.any()
        est_data, est_acks = reconstruct_sequences(LatentSample(D[0], E[0]), obs, start)
        assert (est_data == obs.data).all() and (est_acks == obs.acks).all()
        new = m_step((D, E), obs, EmState(start, 0), cfg, np.random.default_rng(7))
        A, _, _ = cda_decisions(obs, metric, np.random.default_rng(7))
        assert (new.adjacency.matrix == A).all()


class TestDrivers:
    def test_em_cda_deterministic(self):
        obs, truth, _ = gen_model_faithful(SimConfig(n_slots=1500, seed=6))
        cfg = EmConfig(n_samples=4, max_iterations=3, metric=MetricConfig(kind="te"), rng_seed=2)
        a, ha = run_em_cda(obs, cfg, truth.adjacency)
        b, hb = run_em_cda(obs, cfg, truth.adjacency)
        assert a == b and [r.adjacency for r in ha] == [r.adjacency for r in hb]
        assert all(r.p_d is not None for r in ha)
        assert np.all(np.isfinite([r.mean_rate for r in ha]))

    def test_em_cda_single_node(self):
        obs = obs_of([[1, 0, 1, 1]], [[0, 0, 0, 0]])
        adj, hist = run_em_cda(obs, EmConfig())
        assert adj.n_links() == 0 and hist == []

    def test_em_es_cost_guard(self):
        obs = obs_of(np.zeros((6, 50), int), np.zeros((6, 50), int))
        with pytest.raises(CostGuardError):
            run_em_es(obs, EmConfig())

    def test_em_es_two_nodes_single_link(self):
        obs, truth, _ = gen_model_faithful(SimConfig(n_nodes=2, active_links=((0, 1),),
                                                     loss_star=0.0, n_slots=500, seed=0))
        adj, _ = run_em_es(obs, EmConfig(n_samples=5, max_iterations=3))
        assert adj == truth.adjacency

    def test_es_tables_match_direct_scoring(self):
        obs, truth, latent = gen_model_faithful(SimConfig(n_nodes=3, n_slots=60, loss_star=0.2,
                                                          seed=1))
        full = truth.replace(adjacency=Adjacency.full(3))
        D, E = draw_sample_arrays(obs, full, EmConfig(n_samples=3, sampler="site"),
                                  np.random.default_rng(0))
        A, T, _, _, score = es_search(obs, D, E, tau_max=2)
        assert es_score(obs, D, E, Adjacency(A), T) == pytest.approx(score, abs=1e-6)
        pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
        best = -np.inf
        for bits in itertools.product((0, 1), repeat=6):
            adj = Adjacency.from_links(3, [p for p, b in zip(pairs, bits) if b])
            for taus in itertools.product((1, 2), repeat=adj.n_links()):
                delay = np.ones((3, 3), int)
                for (i, j), t in zip(adj.links(), taus):
                    delay[i, j] = t
                best = max(best, es_score(obs, D, E, adj, delay))
        assert score == pytest.approx(best, abs=1e-6)

    def test_truth_scores_at_least_any_candidate(self):
        obs, truth, latent = gen_model_faithful(SimConfig(n_nodes=3, n_slots=80, seed=2))
        D, E = latent.d[None], latent.e[None]
        top = es_score(obs, D, E, truth.adjacency, truth.delay)
        _, _, _, _, best = es_search(obs, D, E, tau_max=3)
        assert top == pytest.approx(best, abs=1e-9)
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = (rng.random((3, 3)) < 0.5).astype(int)
            np.fill_diagonal(m, 0)
            assert es_score(obs, D, E, Adjacency(m), rng.integers(1, 4, (3, 3))) <= top + 1e-9


class TestConfig:
    def test_invalid(self):
        with pytest.raises(InvalidConfigError):
            EmConfig(n_samples=0)
        with pytest.raises(InvalidConfigError):
            EmConfig(learning_rate="fast")
        with pytest.raises(InvalidConfigError):
            EmConfig(learning_rate=2.0)
        with pytest.raises(InvalidConfigError):
            EmConfig(sampler="gibbs")
