"""Filter-step tests on a scalar linear-Gaussian toy model.

The toy makes every association constant available in closed form: the
landmark is observed directly (h(s, x) = x), the birth region is a huge
interval so the importance-sampled birth mass reduces to P_D * mu / |region|
exactly, and the vehicle transition is the identity so particles can be
frozen.
"""

import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from rfsslam import assoc, filters
from rfsslam.filters import (
    FilterParams,
    MarginalSlamState,
    Particle,
    ParticleSlamState,
    initial_particles,
    mpmb_step,
    pmb_step,
    pmbm_step,
    prune_pmb,
    prune_pmbm,
    resample,
    update_step_outputs,
)
from rfsslam.rfs import (
    BernoulliComponent,
    GaussianDensity,
    GlobalHypothesis,
    PMBDensity,
    PMBMDensity,
    PPPComponent,
    PPPIntensity,
    UniformBox,
)

HALF_WIDTH = 1.0e6


class ToyModel:
    """Scalar world: state and landmark both live on the line."""

    state_dim = 1
    z_dim = 1
    types = ("PT",)
    ppp_types = ("PT",)

    class detection:
        p_detect = 0.9

    def __init__(self, r_meas=0.04, q=0.0, clutter_level=0.0, p_detect=0.9):
        self._R = np.array([[r_meas]])
        self.process_cov = np.array([[q]])
        self._clutter_level = clutter_level
        type(self).detection.p_detect = p_detect
        self.gate_threshold = 1e12

    def transition(self, s):
        return np.asarray(s, dtype=float)

    def h(self, S, X, m):
        return np.atleast_2d(np.asarray(X, dtype=float))

    def measurement_cov(self, m):
        return self._R

    def wrap_state(self, d):
        return d

    def wrap_meas(self, d):
        return d

    def birth_points(self, S, Z, m):
        b, c = np.atleast_2d(Z).shape[0], np.atleast_2d(S).shape[0]
        pts = np.broadcast_to(
            np.atleast_2d(Z)[:, None, :1], (b, c, 1)
        ).copy()
        return pts, np.ones((b, c), dtype=bool)

    def detectability(self, s, x, m):
        return self.detection.p_detect

    def clutter_log_intensity(self, z):
        if self._clutter_level <= 0.0:
            return -np.inf
        return math.log(self._clutter_level)


def toy_ppp(weight=2.0):
    box = UniformBox(np.array([-HALF_WIDTH]), np.array([HALF_WIDTH]))
    return PPPIntensity((PPPComponent("PT", weight, box),))


def toy_bernoulli(r, mean, var):
    return BernoulliComponent(
        r, {"PT": (1.0, GaussianDensity(np.array([mean]), np.array([[var]])))}
    )


def toy_params(**kw):
    defaults = dict(
        update_noise_scale=1.0,
        birth_samples=50,
        prune_existence=0.0,
        prune_hypothesis_weight=0.0,
        protected_landmarks=0,
        validate=True,
    )
    defaults.update(kw)
    return FilterParams(**defaults)


def expected_constants(model, ppp_weight, r, x_mean, x_var, z):
    """Closed-form association constants for the single-landmark toy."""
    p_d = model.detection.p_detect
    r_meas = model.measurement_cov("PT")[0, 0]
    nu_detect = r * p_d * norm.pdf(z, loc=x_mean, scale=math.sqrt(x_var + r_meas))
    nu_missed = 1.0 - r * p_d
    nu_new = p_d * ppp_weight / (2.0 * HALF_WIDTH)
    return nu_missed, nu_detect, nu_new


class TestWeightMultiplierOracle:
    """The particle-weight multiplier equals the explicit two-term sum."""

    def setup_toy(self):
        model = ToyModel()
        params = toy_params()
        prior = toy_bernoulli(0.6, 0.0, 1.0)
        pm = PMBMDensity(toy_ppp(), [[prior]], [GlobalHypothesis((0,), 0.0)])
        return model, params, pm

    def test_two_term_sum(self):
        model, params, pm = self.setup_toy()
        z = np.array([0.4])
        vehicle = GaussianDensity(np.zeros(1), np.zeros((1, 1)))
        new_map, log_chi = filters._pmbm_map_update(
            pm, vehicle, [z], model, params, np.random.default_rng(0)
        )
        nu_missed, nu_detect, nu_new = expected_constants(
            model, 2.0, 0.6, 0.0, 1.0, 0.4
        )
        brute = nu_detect + nu_missed * nu_new
        assert math.exp(log_chi) == pytest.approx(brute, abs=1e-9)

    def test_posterior_hypothesis_weights_match_enumeration(self):
        model, params, pm = self.setup_toy()
        z = np.array([0.4])
        vehicle = GaussianDensity(np.zeros(1), np.zeros((1, 1)))
        new_map, _ = filters._pmbm_map_update(
            pm, vehicle, [z], model, params, np.random.default_rng(0)
        )
        nu_missed, nu_detect, nu_new = expected_constants(
            model, 2.0, 0.6, 0.0, 1.0, 0.4
        )
        brute = nu_detect + nu_missed * nu_new
        weights = sorted(h.weight for h in new_map.hypotheses)
        expected = sorted([nu_detect / brute, nu_missed * nu_new / brute])
        np.testing.assert_allclose(weights, expected, atol=1e-9)

    def test_pmbm_step_relative_weights(self):
        model = ToyModel()
        params = toy_params()
        z = np.array([0.4])
        chis = []
        for mean in (0.0, 1.5):
            prior = toy_bernoulli(0.6, mean, 1.0)
            pm = PMBMDensity(toy_ppp(), [[prior]], [GlobalHypothesis((0,), 0.0)])
            nu_missed, nu_detect, nu_new = expected_constants(
                model, 2.0, 0.6, mean, 1.0, 0.4
            )
            chis.append(nu_detect + nu_missed * nu_new)
        particles = [
            Particle(
                np.zeros(1),
                math.log(0.5),
                PMBMDensity(
                    toy_ppp(),
                    [[toy_bernoulli(0.6, mean, 1.0)]],
                    [GlobalHypothesis((0,), 0.0)],
                ),
                np.random.default_rng(i),
            )
            for i, mean in enumerate((0.0, 1.5))
        ]
        state = ParticleSlamState(particles, np.random.default_rng(99))
        out = pmbm_step(state, [z], model, params)
        w = np.exp(out.normalized_log_weights())
        expected = np.array(chis) / sum(chis)
        np.testing.assert_allclose(w, expected, atol=1e-9)

    def test_pure_misdetection_update(self):
        model, params, pm = self.setup_toy()
        vehicle = GaussianDensity(np.zeros(1), np.zeros((1, 1)))
        new_map, log_chi = filters._pmbm_map_update(
            pm, vehicle, [], model, params, np.random.default_rng(0)
        )
        assert math.exp(log_chi) == pytest.approx(1.0 - 0.6 * 0.9, abs=1e-12)
        assert new_map.num_landmarks == 1
        assert len(new_map.hypotheses) == 1


class TestPmbPmbmAgreement:
    def test_bethe_equals_exact_mass_on_tree(self):
        model = ToyModel()
        params = toy_params()
        prior = toy_bernoulli(0.6, 0.0, 1.0)
        vehicle = GaussianDensity(np.zeros(1), np.zeros((1, 1)))
        z = np.array([0.4])
        outputs = update_step_outputs(
            [prior], toy_ppp(), vehicle, [z], model, params, np.random.default_rng(0)
        )
        problem = assoc.build_problem(outputs)
        beliefs = assoc.lbp_marginals(problem, 200, 1e-14)
        pmb_mass = math.exp(-assoc.bethe_free_energy(problem, beliefs))

        pm = PMBMDensity(toy_ppp(), [[prior]], [GlobalHypothesis((0,), 0.0)])
        _, log_chi = filters._pmbm_map_update(
            pm, vehicle, [z], model, params, np.random.default_rng(0)
        )
        assert pmb_mass == pytest.approx(math.exp(log_chi), abs=1e-9)

    def test_tombp_existence_matches_pmbm_marginal(self):
        model = ToyModel()
        params = toy_params()
        prior = toy_bernoulli(0.6, 0.0, 1.0)
        vehicle = GaussianDensity(np.zeros(1), np.zeros((1, 1)))
        z = np.array([0.4])
        outputs = update_step_outputs(
            [prior], toy_ppp(), vehicle, [z], model, params, np.random.default_rng(0)
        )
        problem = assoc.build_problem(outputs)
        beliefs = assoc.lbp_marginals(problem, 300, 1e-15)
        reduced = assoc.tombp_reduce(outputs, beliefs)

        pm = PMBMDensity(toy_ppp(), [[prior]], [GlobalHypothesis((0,), 0.0)])
        new_map, _ = filters._pmbm_map_update(
            pm, vehicle, [z], model, params, np.random.default_rng(0)
        )
        # marginal existence of landmark 0 over the global hypotheses
        marginal = sum(
            h.weight * new_map.bernoullis[0][h.assignments[0]].existence
            for h in new_map.hypotheses
        )
        assert reduced[0].existence == pytest.approx(marginal, abs=1e-9)

    def test_pmb_map_size_before_pruning(self):
        model = ToyModel(clutter_level=1e-4)
        params = toy_params()
        prior = [toy_bernoulli(0.6, 0.0, 1.0), toy_bernoulli(0.5, 5.0, 1.0)]
        pmap = PMBDensity(toy_ppp(), prior)
        particles = [Particle(np.zeros(1), 0.0, pmap, np.random.default_rng(0))]
        state = ParticleSlamState(particles, np.random.default_rng(1))
        out = pmb_step(state, [np.array([0.2]), np.array([4.8])], model, params)
        assert out.particles[0].map.num_landmarks == 4  # I + J, nothing pruned


class TestResample:
    def make_state(self, log_weights):
        particles = [
            Particle(np.array([float(i)]), lw, None, np.random.default_rng(i))
            for i, lw in enumerate(log_weights)
        ]
        return ParticleSlamState(particles, np.random.default_rng(7))

    def test_uniform_weights_skip_resampling(self):
        state = self.make_state([math.log(0.25)] * 4)
        assert resample(state) is state

    def test_degenerate_weight_copies_winner(self):
        state = self.make_state([math.log(1 - 3e-12)] + [math.log(1e-12)] * 3)
        out = resample(state)
        states = {float(p.state[0]) for p in out.particles}
        assert states == {0.0}
        assert all(p.log_weight == pytest.approx(math.log(0.25)) for p in out.particles)

    def test_resampled_mean_matches_weighted_mean(self):
        rng = np.random.default_rng(3)
        raw = rng.uniform(0.05, 1.0, 8)
        logw = np.log(raw / raw.sum())
        weighted_mean = float(np.exp(logw) @ np.arange(8))
        draws = []
        for trial in range(1000):
            state = self.make_state(list(logw))
            state.resample_rng = np.random.default_rng(trial)
            out = resample(state, ess_fraction=1.1)  # force the draw
            draws.append(np.mean([p.state[0] for p in out.particles]))
        se = np.std(draws) / math.sqrt(len(draws))
        assert abs(np.mean(draws) - weighted_mean) < 3.5 * se + 1e-9


class TestMpmbStep:
    def test_empty_measurements_keep_predicted_vehicle(self):
        model = ToyModel(q=0.01)
        params = toy_params()
        state = MarginalSlamState(
            GaussianDensity(np.array([1.0]), np.array([[0.5]])),
            PMBDensity(toy_ppp(), [toy_bernoulli(0.6, 0.0, 1.0)]),
        )
        out = mpmb_step(state, [], model, params, np.random.default_rng(0))
        np.testing.assert_allclose(out.vehicle.mean, [1.0], atol=1e-12)
        np.testing.assert_allclose(out.vehicle.covariance, [[0.51]], atol=1e-12)
        assert out.map.num_landmarks == 1

    def test_confident_landmark_reduces_vehicle_error(self):
        # The landmark is observed through the vehicle state: h = x - s.
        class RelativeToy(ToyModel):
            def h(self, S, X, m):
                S = np.atleast_2d(np.asarray(S, dtype=float))
                X = np.atleast_2d(np.asarray(X, dtype=float))
                if S.shape[0] == 1 and X.shape[0] > 1:
                    S = np.broadcast_to(S, (X.shape[0], 1))
                if X.shape[0] == 1 and S.shape[0] > 1:
                    X = np.broadcast_to(X, (S.shape[0], 1))
                return X - S

            def birth_points(self, S, Z, m):
                S2 = np.atleast_2d(S)
                Z2 = np.atleast_2d(Z)
                pts = Z2[:, None, :1] + S2[None, :, :1]
                return pts, np.ones((Z2.shape[0], S2.shape[0]), dtype=bool)

        model = RelativeToy(r_meas=0.0001, q=0.0)
        params = toy_params(existence_threshold=0.4, dither_factor=1.0)
        true_vehicle = 0.8
        landmark = 5.0
        state = MarginalSlamState(
            GaussianDensity(np.array([0.0]), np.array([[1.0]])),
            PMBDensity(toy_ppp(0.01), [toy_bernoulli(1.0, landmark, 1e-6)]),
        )
        z = np.array([landmark - true_vehicle])
        out = mpmb_step(state, [z], model, params, np.random.default_rng(0))
        prior_error = abs(0.0 - true_vehicle)
        post_error = abs(out.vehicle.mean[0] - true_vehicle)
        assert post_error < prior_error
        assert out.vehicle.covariance[0, 0] < 1.0


class TestPruning:
    def test_low_existence_bernoulli_removed(self):
        params = FilterParams(prune_existence=1e-5, protected_landmarks=0)
        pm = PMBDensity(toy_ppp(), [toy_bernoulli(1e-6, 0.0, 1.0)])
        assert prune_pmb(pm, params).num_landmarks == 0

    def test_protected_landmark_survives(self):
        params = FilterParams(prune_existence=1e-5, protected_landmarks=1)
        pm = PMBDensity(toy_ppp(), [toy_bernoulli(0.0, 0.0, 1.0)])
        assert prune_pmb(pm, params).num_landmarks == 1

    def test_hypothesis_pruning_keeps_relative_weights(self):
        params = FilterParams(prune_hypothesis_weight=1e-4, protected_landmarks=0)
        bern = toy_bernoulli(0.5, 0.0, 1.0)
        hyps = [
            GlobalHypothesis((0,), math.log(0.7)),
            GlobalHypothesis((1,), math.log(0.3 - 1e-5)),
            GlobalHypothesis((2,), math.log(1e-5)),
        ]
        pm = PMBMDensity(toy_ppp(), [[bern, bern, bern]], hyps)
        out = prune_pmbm(pm, params)
        assert len(out.hypotheses) == 2
        ratio = out.hypotheses[0].weight / out.hypotheses[1].weight
        assert ratio == pytest.approx(0.7 / (0.3 - 1e-5), rel=1e-12)

    def test_kept_hypothesis_weight_example(self):
        params = FilterParams(prune_hypothesis_weight=1e-4, protected_landmarks=0)
        bern = toy_bernoulli(0.5, 0.0, 1.0)
        hyps = [
            GlobalHypothesis((0,), math.log(1.0 - 1e-3)),
            GlobalHypothesis((1,), math.log(1e-3)),
        ]
        pm = PMBMDensity(toy_ppp(), [[bern, bern]], hyps)
        out = prune_pmbm(pm, params)
        assert len(out.hypotheses) == 2  # 1e-3 > 1e-4 threshold: kept

    def test_hypothesis_cap(self):
        params = FilterParams(
            prune_hypothesis_weight=0.0, max_hypotheses=3, protected_landmarks=0
        )
        bern = toy_bernoulli(0.5, 0.0, 1.0)
        hyps = [GlobalHypothesis((i,), math.log(0.1 * (i + 1))) for i in range(5)]
        pm = PMBMDensity(toy_ppp(), [[bern] * 5], hyps)
        out = prune_pmbm(pm, params)
        assert len(out.hypotheses) == 3
        total = sum(h.weight for h in out.hypotheses)
        assert total == pytest.approx(1.0, abs=1e-12)


class TestParticleHelpers:
    def test_initial_particles_deterministic(self):
        prior = GaussianDensity(np.zeros(1), np.eye(1))
        pmap = PMBDensity(toy_ppp(), [])
        a = initial_particles(5, prior, pmap, seed=42)
        b = initial_particles(5, prior, pmap, seed=42)
        for pa, pb in zip(a.particles, b.particles):
            np.testing.assert_allclose(pa.state, pb.state, atol=0)

    def test_vehicle_estimate_weighted_mean(self):
        particles = [
            Particle(np.array([0.0] * 7), math.log(0.25), None, np.random.default_rng(0)),
            Particle(np.array([4.0] * 7), math.log(0.75), None, np.random.default_rng(1)),
        ]
        state = ParticleSlamState(particles, np.random.default_rng(2))
        est = state.vehicle_estimate()
        assert est[0] == pytest.approx(3.0)
