"""Data association over one update step.

The association state couples two integer variable families: c[i] in
{0..J} assigns landmark i a measurement (0 = missed detection) and d[j]
in {0..I} assigns measurement j a landmark (0 = newly detected landmark or
clutter).  Their joint pmf factorizes into per-landmark and per-measurement
weights tied together by hard consistency factors, and everything the
filters need reduces to three log-weight tables:

    nu_missed[i]     weight of landmark i going undetected,
    nu_detect[i][j]  weight of landmark i producing measurement j,
    nu_new[j]        weight of measurement j being a birth or clutter.

This module enumerates the highest-weight joint assignments exactly
(Murty's ranked-assignment scheme), approximates the marginals with loopy
belief propagation, scores a belief set with the Bethe free energy (whose
exponentiated negative estimates the association normalization constant),
and collapses the resulting hypothesis mixture to one Bernoulli per
landmark (track-oriented reduction).
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .rfs import (
    BernoulliComponent,
    ConfigurationError,
    GlobalHypothesis,
    moment_match_bernoulli,
)

_FORBIDDEN = 1e15


# ---------------------------------------------------------------------------
# update-step outputs feeding the association problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MissHypothesis:
    log_nu: float
    bernoulli: BernoulliComponent


@dataclass(frozen=True)
class DetectHypothesis:
    log_nu: float
    bernoulli: BernoulliComponent | None  # None when gated out


@dataclass(frozen=True)
class BirthHypothesis:
    log_nu: float  # birth mass plus clutter intensity
    bernoulli: BernoulliComponent


@dataclass(frozen=True)
class StepOutputs:
    """Per-landmark miss/detect hypotheses and per-measurement births."""

    misses: list[MissHypothesis]
    detects: list[list[DetectHypothesis]]  # [landmark][measurement]
    births: list[BirthHypothesis]

    @property
    def num_landmarks(self) -> int:
        return len(self.misses)

    @property
    def num_measurements(self) -> int:
        return len(self.births)


@dataclass(frozen=True)
class AssociationProblem:
    log_nu_missed: np.ndarray  # (I,)
    log_nu_detect: np.ndarray  # (I, J)
    log_nu_new: np.ndarray  # (J,)

    def __post_init__(self):
        lm = np.asarray(self.log_nu_missed, dtype=float).reshape(-1)
        ln = np.asarray(self.log_nu_new, dtype=float).reshape(-1)
        ld = np.asarray(self.log_nu_detect, dtype=float).reshape(lm.size, ln.size)
        object.__setattr__(self, "log_nu_missed", lm)
        object.__setattr__(self, "log_nu_detect", ld)
        object.__setattr__(self, "log_nu_new", ln)

    @property
    def num_landmarks(self) -> int:
        return self.log_nu_missed.size

    @property
    def num_measurements(self) -> int:
        return self.log_nu_new.size

    def log_weight_of(self, assignment: tuple[int, ...]) -> float:
        """Unnormalized log weight of one joint assignment vector."""
        total = 0.0
        used = set()
        for i, a in enumerate(assignment):
            if a == 0:
                total += self.log_nu_missed[i]
            else:
                if a in used:
                    return -np.inf
                used.add(a)
                total += self.log_nu_detect[i, a - 1]
        for j in range(1, self.num_measurements + 1):
            if j not in used:
                total += self.log_nu_new[j - 1]
        return float(total)


def build_problem(outputs: StepOutputs) -> AssociationProblem:
    I, J = outputs.num_landmarks, outputs.num_measurements
    log_missed = np.array([m.log_nu for m in outputs.misses], dtype=float)
    log_detect = np.full((I, J), -np.inf)
    for i, row in enumerate(outputs.detects):
        for j, det in enumerate(row):
            log_detect[i, j] = det.log_nu
    log_new = np.array([b.log_nu for b in outputs.births], dtype=float)

    if np.any(np.isnan(log_missed)) or np.any(np.isnan(log_detect)) or np.any(np.isnan(log_new)):
        raise ConfigurationError("association weight is NaN")
    if np.any(~np.isfinite(log_missed)):
        raise ConfigurationError("missed-detection weight must be positive")
    for j in range(J):
        if not np.isfinite(log_new[j]) and not np.any(np.isfinite(log_detect[:, j])):
            raise ConfigurationError(f"measurement {j} has no feasible explanation")
    return AssociationProblem(log_missed, log_detect, log_new)


# ---------------------------------------------------------------------------
# Murty ranked assignments
# ---------------------------------------------------------------------------


def _assignment_cost_matrix(problem: AssociationProblem) -> np.ndarray:
    """(I+J) x J cost matrix: landmark rows hold detect/miss log ratios and
    each measurement gets one birth-or-clutter dummy row.  Unassigned
    landmark rows implicitly take their missed-detection weight, which is
    factored out as a constant baseline."""
    I, J = problem.num_landmarks, problem.num_measurements
    cost = np.full((I + J, J), _FORBIDDEN)
    ratios = -(problem.log_nu_detect - problem.log_nu_missed[:, None])
    cost[:I, :] = np.where(np.isfinite(ratios), ratios, _FORBIDDEN)
    for j in range(J):
        if np.isfinite(problem.log_nu_new[j]):
            cost[I + j, j] = -problem.log_nu_new[j]
    return cost


def _solve_restricted(cost, forced, forbidden):
    """Optimal assignment given forced pairs and forbidden pairs.

    Returns (total cost, column -> row mapping) or None when infeasible.
    """
    n_rows, n_cols = cost.shape
    forced_rows = {r for r, _ in forced}
    forced_cols = {c for _, c in forced}
    free_rows = [r for r in range(n_rows) if r not in forced_rows]
    free_cols = [c for c in range(n_cols) if c not in forced_cols]
    total = sum(cost[r, c] for r, c in forced)
    if any(cost[r, c] >= _FORBIDDEN for r, c in forced):
        return None
    mapping = {c: r for r, c in forced}
    if free_cols:
        sub = cost[np.ix_(free_rows, free_cols)].copy()
        for r, c in forbidden:
            if r in forced_rows or c in forced_cols:
                continue
            sub[free_rows.index(r), free_cols.index(c)] = _FORBIDDEN
        row_ind, col_ind = linear_sum_assignment(sub)
        for ri, ci in zip(row_ind, col_ind):
            if sub[ri, ci] >= _FORBIDDEN:
                return None
            mapping[free_cols[ci]] = free_rows[ri]
            total += sub[ri, ci]
    return total, mapping


def _to_track_assignment(mapping: dict[int, int], I: int, J: int) -> tuple[int, ...]:
    track = [0] * I
    for col, row in mapping.items():
        if row < I:
            track[row] = col + 1
    return tuple(track)


def murty_kbest(problem: AssociationProblem, k: int) -> list[GlobalHypothesis]:
    """The k highest-weight joint assignments, exactly and in order.

    Ties are broken towards the lexicographically smallest per-landmark
    assignment vector.  Fewer than k feasible assignments returns them all.
    """
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    I, J = problem.num_landmarks, problem.num_measurements
    if J == 0:
        logw = float(problem.log_nu_missed.sum()) if I else 0.0
        return [GlobalHypothesis((0,) * I, logw)]

    cost = _assignment_cost_matrix(problem)
    counter = itertools.count()
    heap = []

    def push(forced, forbidden):
        solved = _solve_restricted(cost, forced, forbidden)
        if solved is None:
            return
        total, mapping = solved
        track = _to_track_assignment(mapping, I, J)
        heapq.heappush(
            heap, (total, track, next(counter), forced, forbidden, mapping)
        )

    push([], [])
    results: list[tuple[float, tuple[int, ...]]] = []
    kth_cost = math.inf
    while heap:
        if len(results) >= k and heap[0][0] > kth_cost + 1e-9:
            break
        total, track, _, forced, forbidden, mapping = heapq.heappop(heap)
        results.append((total, track))
        if len(results) == k:
            kth_cost = total
        # Partition: pin a growing prefix of the free pairs, forbid the next.
        free_pairs = [
            (row, col) for col, row in sorted(mapping.items()) if (row, col) not in forced
        ]
        pinned = list(forced)
        for row, col in free_pairs:
            push(list(pinned), list(forbidden) + [(row, col)])
            pinned.append((row, col))

    hypotheses = [
        GlobalHypothesis(track, problem.log_weight_of(track)) for _, track in results
    ]
    hypotheses.sort(key=lambda h: (-h.log_weight, h.assignments))
    return hypotheses[:k]


# ---------------------------------------------------------------------------
# loopy belief propagation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Beliefs:
    """Marginal association beliefs.

    ``bel_c[i]`` is the pmf of landmark i over {miss, z_1..z_J};
    ``bel_d[j]`` is the pmf of measurement j over {new, landmark_1..I}.
    """

    bel_c: np.ndarray  # (I, J + 1)
    bel_d: np.ndarray  # (J, I + 1)
    converged: bool
    iterations: int


def lbp_marginals(
    problem: AssociationProblem,
    max_iterations: int = 100,
    tol: float = 1e-6,
    damping: float = 0.5,
) -> Beliefs:
    """Iterate the two-family ratio messages until they stop moving.

    Exact on tree-structured problems (a single landmark or a single
    measurement); a close approximation on loopy ones.  Non-convergence
    within the sweep budget returns the current beliefs flagged, never an
    error.
    """
    if max_iterations < 1:
        raise ConfigurationError("max_iterations must be >= 1")
    I, J = problem.num_landmarks, problem.num_measurements
    if I == 0 or J == 0:
        return Beliefs(
            np.hstack([np.ones((I, 1)), np.zeros((I, J))]),
            np.hstack([np.ones((J, 1)), np.zeros((J, I))]),
            True,
            0,
        )

    # Per-landmark rescaling keeps the tables in a friendly range without
    # touching the beliefs.
    scale = np.maximum(
        problem.log_nu_missed, problem.log_nu_detect.max(axis=1, initial=-np.inf)
    )
    w_miss = np.exp(problem.log_nu_missed - scale)
    w_det = np.exp(problem.log_nu_detect - scale[:, None])
    w_new = np.exp(problem.log_nu_new)

    mu = np.ones((I, J))
    nu = np.zeros((I, J))
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        mu_old = mu
        prod = w_det * mu
        denom_c = w_miss[:, None] + prod.sum(axis=1, keepdims=True) - prod
        with np.errstate(divide="ignore", invalid="ignore"):
            nu = np.where(denom_c > 0.0, w_det / denom_c, 0.0)
        denom_d = w_new[None, :] + nu.sum(axis=0, keepdims=True) - nu
        with np.errstate(divide="ignore", invalid="ignore"):
            mu_new = np.where(denom_d > 0.0, 1.0 / denom_d, 0.0)
        mu = damping * mu_old + (1.0 - damping) * mu_new
        if np.max(np.abs(mu - mu_old)) < tol:
            converged = True
            break

    weighted = w_det * mu
    norm_c = w_miss + weighted.sum(axis=1)
    bel_c = np.hstack([w_miss[:, None], weighted]) / norm_c[:, None]
    norm_d = w_new + nu.sum(axis=0)
    bel_d = np.hstack([w_new[:, None], nu.T]) / norm_d[:, None]
    return Beliefs(bel_c, bel_d, converged, iterations)


# ---------------------------------------------------------------------------
# Bethe free energy
# ---------------------------------------------------------------------------


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    mask = p > 0.0
    out[mask] = p[mask] * np.log(p[mask])
    return out


def bethe_free_energy(problem: AssociationProblem, beliefs: Beliefs) -> float:
    """Bethe free energy F of the beliefs; exp(-F) estimates the
    association normalization constant (exactly on trees).

    The consistency factors are hard constraints, so each pairwise belief
    is determined by the two singleton beliefs: mass q on the paired event
    and an outer product on the jointly-unpaired block.  Its entropy then
    has the closed form used below; the average energy collects the
    landmark weights plus the birth weights (the unit per-measurement
    weights contribute nothing).
    """
    I, J = problem.num_landmarks, problem.num_measurements
    bel_c, bel_d = beliefs.bel_c, beliefs.bel_d

    energy = 0.0
    for i in range(I):
        table = np.concatenate([[problem.log_nu_missed[i]], problem.log_nu_detect[i]])
        mask = bel_c[i] > 0.0
        energy -= float(bel_c[i][mask] @ table[mask])
    for j in range(J):
        if bel_d[j, 0] > 0.0:
            energy -= float(bel_d[j, 0] * problem.log_nu_new[j])

    xlx_c = _xlogx(bel_c)  # (I, J+1)
    xlx_d = _xlogx(bel_d)  # (J, I+1)
    h_single_c = -xlx_c.sum(axis=1)
    h_single_d = -xlx_d.sum(axis=1)

    pair_entropy = 0.0
    for i in range(I):
        for j in range(J):
            q = bel_c[i, j + 1]
            s_i = xlx_c[i].sum() - xlx_c[i, j + 1]
            s_j = xlx_d[j].sum() - xlx_d[j, i + 1]
            term = -_xlogx(np.array([q]))[0] - s_i - s_j
            if 1.0 - q > 0.0:
                term += (1.0 - q) * math.log(1.0 - q)
            pair_entropy += term

    entropy = pair_entropy - (J - 1) * h_single_c.sum() - (I - 1) * h_single_d.sum()
    return float(energy - entropy)


# ---------------------------------------------------------------------------
# track-oriented reduction to one Bernoulli per landmark
# ---------------------------------------------------------------------------


def tombp_reduce(outputs: StepOutputs, beliefs: Beliefs) -> list[BernoulliComponent]:
    """Collapse the hypothesis mixture to a multi-Bernoulli.

    Each previously known landmark mixes its miss and detection posteriors
    under its marginal association beliefs (moment-matched per type); each
    measurement spawns one new landmark whose existence is scaled by the
    belief that the measurement was not claimed by an existing landmark.
    Returns I + J Bernoullis; zero-existence entries are left for pruning.
    """
    I, J = outputs.num_landmarks, outputs.num_measurements
    reduced: list[BernoulliComponent] = []
    for i in range(I):
        mixture = []
        if beliefs.bel_c[i, 0] > 0.0:
            mixture.append((beliefs.bel_c[i, 0], outputs.misses[i].bernoulli))
        for j in range(J):
            p = beliefs.bel_c[i, j + 1]
            if p <= 0.0:
                continue
            det = outputs.detects[i][j]
            if det.bernoulli is None:
                raise ConfigurationError(
                    f"belief mass {p} on a gated-out pair ({i}, {j})"
                )
            mixture.append((p, det.bernoulli))
        total = sum(p for p, _ in mixture)
        mixture = [(p / total, b) for p, b in mixture]
        reduced.append(moment_match_bernoulli(mixture))

    for j in range(J):
        birth = outputs.births[j].bernoulli
        existence = float(beliefs.bel_d[j, 0] * birth.existence)
        reduced.append(
            BernoulliComponent(existence, birth.per_type, birth.log_hypothesis_weight)
        )
    return reduced
