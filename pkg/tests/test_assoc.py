"""Association tests against an exhaustive-enumeration oracle."""

import itertools
import math

import numpy as np
import pytest

from rfsslam.assoc import (
    AssociationProblem,
    Beliefs,
    BirthHypothesis,
    DetectHypothesis,
    MissHypothesis,
    StepOutputs,
    bethe_free_energy,
    build_problem,
    lbp_marginals,
    murty_kbest,
    tombp_reduce,
)
from rfsslam.rfs import BernoulliComponent, GaussianDensity


# --- independent oracle -----------------------------------------------------


def all_assignments(I, J):
    """Every joint assignment: per-landmark indices, distinct when nonzero."""
    out = []

    def rec(i, used, acc):
        if i == I:
            out.append(tuple(acc))
            return
        for a in range(J + 1):
            if a != 0 and a in used:
                continue
            rec(i + 1, used | {a} if a else used, acc + [a])

    rec(0, frozenset(), [])
    return out


def enumerate_oracle(problem):
    """All feasible hypotheses with exact log weights, deterministically
    ordered by descending weight then lexicographic assignment."""
    hyps = []
    for a in all_assignments(problem.num_landmarks, problem.num_measurements):
        lw = problem.log_weight_of(a)
        if np.isfinite(lw):
            hyps.append((lw, a))
    hyps.sort(key=lambda t: (-t[0], t[1]))
    return hyps


def exact_marginals(problem):
    hyps = enumerate_oracle(problem)
    I, J = problem.num_landmarks, problem.num_measurements
    weights = np.exp([lw for lw, _ in hyps])
    Z = weights.sum()
    bel_c = np.zeros((I, J + 1))
    bel_d = np.zeros((J, I + 1))
    for w, (lw, a) in zip(weights, hyps):
        for i, ai in enumerate(a):
            bel_c[i, ai] += w
        assigned = set(a) - {0}
        for j in range(1, J + 1):
            if j not in assigned:
                bel_d[j - 1, 0] += w
            else:
                bel_d[j - 1, a.index(j) + 1] += w
    return bel_c / Z, bel_d / Z, Z


def random_problem(rng, I, J, lo=-2.0, hi=2.0):
    return AssociationProblem(
        rng.uniform(lo, hi, I), rng.uniform(lo, hi, (I, J)), rng.uniform(lo, hi, J)
    )


def tracking_problem(rng, I, J):
    """Random tables shaped like gated tracking problems: each landmark has
    at most one dominant pairing over an unlikely background, which is the
    regime where loopy BP is known to be accurate."""
    log_detect = rng.uniform(-6.0, -2.0, (I, J))
    perm = rng.permutation(J)
    for i in range(min(I, J)):
        if rng.random() < 0.8:
            log_detect[i, perm[i]] = rng.uniform(1.0, 3.0)
    log_missed = np.full(I, math.log(0.3))
    log_new = rng.uniform(-2.0, 0.0, J)
    return AssociationProblem(log_missed, log_detect, log_new)


def point_bernoulli(r, mean=0.0, var=1.0, m="VA"):
    g = GaussianDensity(np.array([mean]), np.array([[var]]))
    return BernoulliComponent(r, {m: (1.0, g)})


# --- murty ------------------------------------------------------------------


class TestMurtyKBest:
    def test_single_pair_ordering(self):
        problem = AssociationProblem(
            np.array([math.log(0.3)]),
            np.array([[math.log(2.0)]]),
            np.array([math.log(1.5)]),
        )
        hyps = murty_kbest(problem, 10)
        # assign: 2.0 vs miss+new: 0.45
        assert [h.assignments for h in hyps] == [(1,), (0,)]
        assert hyps[0].log_weight == pytest.approx(math.log(2.0), abs=1e-12)
        assert hyps[1].log_weight == pytest.approx(math.log(0.45), abs=1e-12)

    def test_dominant_diagonal(self):
        problem = AssociationProblem(
            np.zeros(2),
            np.log(np.array([[10.0, 1.0], [1.0, 10.0]])),
            np.zeros(2),
        )
        best = murty_kbest(problem, 1)[0]
        assert best.assignments == (1, 2)

    def test_k_larger_than_feasible_returns_all(self):
        rng = np.random.default_rng(0)
        problem = random_problem(rng, 2, 2)
        hyps = murty_kbest(problem, 1000)
        assert len(hyps) == 7  # brute-force count for I = J = 2

    def test_matches_enumeration_on_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            I = int(rng.integers(0, 4))
            J = int(rng.integers(0, 4))
            problem = random_problem(rng, I, J)
            oracle = enumerate_oracle(problem)
            hyps = murty_kbest(problem, len(oracle) + 5)
            assert len(hyps) == len(oracle)
            for h, (lw, a) in zip(hyps, oracle):
                assert h.assignments == a
                assert h.log_weight == pytest.approx(lw, abs=1e-12)

    def test_truncated_prefix_matches_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            problem = random_problem(rng, 3, 3)
            oracle = enumerate_oracle(problem)
            for k in (1, 2, 5):
                hyps = murty_kbest(problem, k)
                for h, (lw, a) in zip(hyps, oracle[:k]):
                    assert h.assignments == a
                    assert h.log_weight == pytest.approx(lw, abs=1e-12)

    def test_tie_break_is_lexicographic(self):
        problem = AssociationProblem(
            np.zeros(2), np.zeros((2, 2)), np.full(2, -math.log(2.0))
        )
        hyps = murty_kbest(problem, 100)
        oracle = enumerate_oracle(problem)
        assert [h.assignments for h in hyps] == [a for _, a in oracle]

    def test_no_measurements(self):
        problem = AssociationProblem(np.log([0.4, 0.6]), np.zeros((2, 0)), np.zeros(0))
        hyps = murty_kbest(problem, 3)
        assert len(hyps) == 1
        assert hyps[0].assignments == (0, 0)
        assert hyps[0].log_weight == pytest.approx(math.log(0.24), abs=1e-12)


# --- loopy belief propagation -------------------------------------------------


class TestLbpMarginals:
    def test_exact_on_single_pair(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            problem = random_problem(rng, 1, 1)
            beliefs = lbp_marginals(problem, max_iterations=100, tol=1e-13)
            bel_c, bel_d, _ = exact_marginals(problem)
            np.testing.assert_allclose(beliefs.bel_c, bel_c, atol=1e-9)
            np.testing.assert_allclose(beliefs.bel_d, bel_d, atol=1e-9)

    @pytest.mark.parametrize("I,J", [(1, 3), (3, 1), (1, 1)])
    def test_exact_on_trees(self, I, J):
        rng = np.random.default_rng(2)
        for _ in range(20):
            problem = random_problem(rng, I, J)
            beliefs = lbp_marginals(problem, max_iterations=200, tol=1e-14)
            bel_c, bel_d, _ = exact_marginals(problem)
            np.testing.assert_allclose(beliefs.bel_c, bel_c, atol=1e-9)
            np.testing.assert_allclose(beliefs.bel_d, bel_d, atol=1e-9)

    def test_symmetric_weights_give_uniform_belief(self):
        problem = AssociationProblem(np.zeros(1), np.zeros((1, 1)), np.zeros(1))
        beliefs = lbp_marginals(problem)
        np.testing.assert_allclose(beliefs.bel_c[0], [0.5, 0.5], atol=1e-9)

    def test_loopy_total_variation_small(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(60):
            I, J = int(rng.integers(2, 4)), int(rng.integers(2, 4))
            problem = tracking_problem(rng, I, J)
            beliefs = lbp_marginals(problem, max_iterations=200, tol=1e-12)
            bel_c, bel_d, _ = exact_marginals(problem)
            tv_c = 0.5 * np.abs(beliefs.bel_c - bel_c).sum(axis=1).max()
            tv_d = 0.5 * np.abs(beliefs.bel_d - bel_d).sum(axis=1).max()
            worst = max(worst, tv_c, tv_d)
        assert worst <= 0.05

    def test_non_convergence_flag(self):
        problem = random_problem(np.random.default_rng(4), 3, 3)
        beliefs = lbp_marginals(problem, max_iterations=2, tol=0.0)
        assert not beliefs.converged
        np.testing.assert_allclose(beliefs.bel_c.sum(axis=1), 1.0, atol=1e-12)

    def test_empty_cases(self):
        beliefs = lbp_marginals(AssociationProblem(np.zeros(0), np.zeros((0, 2)), np.zeros(2)))
        np.testing.assert_allclose(beliefs.bel_d, [[1.0], [1.0]])
        beliefs = lbp_marginals(AssociationProblem(np.zeros(2), np.zeros((2, 0)), np.zeros(0)))
        np.testing.assert_allclose(beliefs.bel_c, [[1.0], [1.0]])


# --- Bethe free energy ---------------------------------------------------------


class TestBetheFreeEnergy:
    def test_exact_on_trees(self):
        rng = np.random.default_rng(5)
        for I, J in [(1, 1), (1, 3), (3, 1)]:
            for _ in range(15):
                problem = random_problem(rng, I, J)
                beliefs = lbp_marginals(problem, max_iterations=300, tol=1e-15)
                _, _, Z = exact_marginals(problem)
                assert math.exp(-bethe_free_energy(problem, beliefs)) == pytest.approx(
                    Z, rel=1e-9
                )

    def test_degenerate_beliefs_closed_form(self):
        problem = AssociationProblem(
            np.log([0.2, 0.5]), np.log([[3.0, 0.1], [0.2, 4.0]]), np.log([1.0, 2.0])
        )
        bel_c = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        bel_d = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        beliefs = Beliefs(bel_c, bel_d, True, 1)
        # product of the selected unary weights
        expected = 3.0 * 4.0
        assert math.exp(-bethe_free_energy(problem, beliefs)) == pytest.approx(
            expected, rel=1e-9
        )

    def test_loopy_within_ten_percent(self):
        rng = np.random.default_rng(6)
        for _ in range(60):
            I = int(rng.integers(2, 4))
            J = int(rng.integers(2, 4))
            problem = tracking_problem(rng, I, J)
            beliefs = lbp_marginals(problem, max_iterations=300, tol=1e-14)
            _, _, Z = exact_marginals(problem)
            estimate = math.exp(-bethe_free_energy(problem, beliefs))
            assert abs(estimate - Z) / Z <= 0.10


# --- track-oriented reduction ---------------------------------------------------


def make_outputs(miss_nu, miss_b, det_nu, det_b, birth_nu, birth_b):
    return StepOutputs(
        [MissHypothesis(math.log(nu), b) for nu, b in zip(miss_nu, miss_b)],
        [
            [
                DetectHypothesis(math.log(nu) if nu > 0 else -np.inf, b)
                for nu, b in zip(row_nu, row_b)
            ]
            for row_nu, row_b in zip(det_nu, det_b)
        ],
        [BirthHypothesis(math.log(nu), b) for nu, b in zip(birth_nu, birth_b)],
    )


class TestTombpReduce:
    def test_sure_miss_keeps_miss_component(self):
        miss = point_bernoulli(0.37, mean=2.0, var=0.5)
        det = point_bernoulli(1.0, mean=9.0, var=0.1)
        outputs = make_outputs([0.5], [miss], [[0.4]], [[det]], [1.0], [point_bernoulli(0.8)])
        beliefs = Beliefs(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), True, 1)
        reduced = tombp_reduce(outputs, beliefs)
        assert reduced[0].existence == pytest.approx(0.37, abs=1e-12)
        np.testing.assert_allclose(reduced[0].density("VA").mean, [2.0], atol=1e-12)
        np.testing.assert_allclose(reduced[0].density("VA").covariance, [[0.5]], atol=1e-12)

    def test_existence_mixing(self):
        miss = point_bernoulli(0.4)
        det = point_bernoulli(1.0)
        outputs = make_outputs([0.5], [miss], [[0.4]], [[det]], [1.0], [point_bernoulli(0.8)])
        beliefs = Beliefs(np.array([[0.5, 0.5]]), np.array([[0.2, 0.8]]), True, 1)
        reduced = tombp_reduce(outputs, beliefs)
        assert reduced[0].existence == pytest.approx(0.7, abs=1e-12)

    def test_fully_explained_measurement_kills_birth(self):
        outputs = make_outputs(
            [0.5], [point_bernoulli(0.4)], [[0.4]], [[point_bernoulli(1.0)]],
            [1.0], [point_bernoulli(0.8)],
        )
        beliefs = Beliefs(np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]), True, 1)
        reduced = tombp_reduce(outputs, beliefs)
        assert reduced[1].existence == 0.0

    def test_output_count_is_landmarks_plus_measurements(self):
        outputs = make_outputs(
            [0.5, 0.6],
            [point_bernoulli(0.4), point_bernoulli(0.5)],
            [[0.4, 0.2], [0.1, 0.3]],
            [[point_bernoulli(1.0)] * 2] * 2,
            [1.0, 2.0],
            [point_bernoulli(0.8), point_bernoulli(0.9)],
        )
        problem = build_problem(outputs)
        beliefs = lbp_marginals(problem)
        reduced = tombp_reduce(outputs, beliefs)
        assert len(reduced) == 4
        assert all(0.0 <= b.existence <= 1.0 for b in reduced)


class TestBuildProblem:
    def test_no_landmarks(self):
        outputs = make_outputs([], [], [], [], [2.0], [point_bernoulli(0.5)])
        problem = build_problem(outputs)
        assert problem.num_landmarks == 0
        np.testing.assert_allclose(problem.log_nu_new, [math.log(2.0)])

    def test_product_reproduces_joint_weight(self):
        rng = np.random.default_rng(8)
        problem = random_problem(rng, 3, 2)
        for a in all_assignments(3, 2):
            direct = 0.0
            used = set()
            for i, ai in enumerate(a):
                direct += (
                    problem.log_nu_missed[i]
                    if ai == 0
                    else problem.log_nu_detect[i, ai - 1]
                )
                if ai:
                    used.add(ai)
            for j in range(1, 3):
                if j not in used:
                    direct += problem.log_nu_new[j - 1]
            assert problem.log_weight_of(a) == pytest.approx(direct, abs=1e-12)

    def test_rejects_unexplainable_measurement(self):
        from rfsslam.rfs import ConfigurationError

        outputs = StepOutputs(
            [MissHypothesis(0.0, point_bernoulli(0.5))],
            [[DetectHypothesis(-np.inf, None)]],
            [BirthHypothesis(-np.inf, point_bernoulli(0.0, m="VA"))],
        )
        with pytest.raises(ConfigurationError):
            build_problem(outputs)
