"""The three SLAM filters.

All of them share one map-update engine built from four steps applied to
the prior map given the (predicted) vehicle density and the measurement
set:

  step i    undetected landmarks stay undetected: the Poisson intensity is
            thinned by a survival factor (by default 1, treating the
            detection probability of never-seen landmarks as negligible);
  step ii   each measurement spawns a candidate new landmark whose weight
            combines the importance-sampled birth mass per type with the
            clutter intensity;
  step iii  each known landmark gets a missed-detection hypothesis;
  step iv   each (landmark, measurement) pair inside the ellipsoidal gate
            gets a detection hypothesis with existence one.

The filters differ in what they do with those hypotheses:

  * ``pmbm_step`` keeps a hypothesis forest per particle and extends every
    parent global hypothesis with its ranked best children; the particle
    weight picks up the total unnormalized hypothesis mass.
  * ``pmb_step`` runs loopy BP on the association graph, collapses the
    mixture track-wise to one Bernoulli per landmark, and weights the
    particle by exp(-Bethe free energy), the BP estimate of the same mass.
  * ``mpmb_step`` carries no particles at all: one Gaussian vehicle
    density is predicted and updated by a joint cubature Kalman step
    against the hard most-likely association, and the map update runs the
    same four steps with the vehicle marginalized through joint Gaussians.

Measurement models are duck-typed; see ``MmwaveModel`` for the attribute
contract (``transition``, ``h``, ``birth_points``, wrap helpers, detection
and clutter parameters).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import assoc
from .assoc import (
    AssociationProblem,
    Beliefs,
    BirthHypothesis,
    DetectHypothesis,
    MissHypothesis,
    StepOutputs,
)
from .ckf import birth_density, ckf_predict, cubature_points, dither, joint_ckf_update
from .rfs import (
    BernoulliComponent,
    ConfigurationError,
    GaussianDensity,
    GlobalHypothesis,
    PMBDensity,
    PMBMDensity,
    PPPIntensity,
    psd_sqrt,
)


@dataclass(frozen=True)
class FilterParams:
    """Tuning shared by the filters; defaults follow the reference setup."""

    birth_samples: int = 100  # importance samples per birth proposal
    update_noise_scale: float = 4.0  # measurement-noise inflation, steps ii/iv
    vehicle_update_noise_scale: float = 1.0  # noise scale in the vehicle update
    max_hypotheses: int = 200  # global-hypothesis cap
    lbp_max_iterations: int = 100
    lbp_tol: float = 1e-6
    lbp_damping: float = 0.5
    prune_existence: float = 1e-5
    prune_hypothesis_weight: float = 1e-4
    existence_threshold: float = 0.4  # selection gate for the vehicle update
    dither_factor: float = 1.5
    ess_fraction: float = 0.5  # resample when ESS < fraction * N
    step_i_survival: float = 1.0  # PPP thinning factor (1 - p_D for step i)
    protected_landmarks: int = 1  # leading Bernoullis exempt from pruning
    validate: bool = False  # run invariant checks inside every step


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------


@dataclass
class Particle:
    state: np.ndarray  # current vehicle state sample
    log_weight: float
    map: PMBDensity | PMBMDensity
    rng: np.random.Generator


@dataclass
class ParticleSlamState:
    particles: list[Particle]
    resample_rng: np.random.Generator
    steps: int = 0

    def normalized_log_weights(self) -> np.ndarray:
        logw = np.array([p.log_weight for p in self.particles])
        return logw - logsumexp(logw)

    def effective_sample_size(self) -> float:
        w = np.exp(self.normalized_log_weights())
        return float(1.0 / np.sum(w * w))

    def vehicle_estimate(self) -> np.ndarray:
        """Weighted mean state; the heading is averaged on the circle."""
        w = np.exp(self.normalized_log_weights())
        states = np.array([p.state for p in self.particles])
        mean = w @ states
        from .geometry import HEADING_INDEX

        mean[HEADING_INDEX] = math.atan2(
            float(w @ np.sin(states[:, HEADING_INDEX])),
            float(w @ np.cos(states[:, HEADING_INDEX])),
        )
        return mean

    def best_particle(self) -> Particle:
        return max(self.particles, key=lambda p: p.log_weight)


@dataclass
class MarginalSlamState:
    vehicle: GaussianDensity
    map: PMBDensity
    steps: int = 0


def initial_map(model, undetected: PPPIntensity, bs_cov_scale: float = 1.0) -> PMBDensity:
    """Map prior: the BS is a certain landmark at its surveyed position."""
    bs_gauss = GaussianDensity(model.bs_position, bs_cov_scale * np.eye(3))
    per_type = {m: (0.0, None) for m in model.types}
    per_type["BS"] = (1.0, bs_gauss)
    return PMBDensity(undetected, [BernoulliComponent(1.0, per_type)])


def initial_particles(
    n: int,
    prior: GaussianDensity,
    map_prior: PMBDensity,
    seed,
    mixture: bool = False,
) -> ParticleSlamState:
    """Draw particles from the vehicle prior, each with its own RNG stream
    and a copy-by-reference of the immutable map prior."""
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(n + 1)
    resample_rng = np.random.default_rng(children[0])
    root = psd_sqrt(prior.covariance)
    particles = []
    for i in range(n):
        rng = np.random.default_rng(children[i + 1])
        state = prior.mean + root @ rng.standard_normal(prior.dim)
        map_kind = (
            map_prior
            if not mixture
            else PMBMDensity(
                map_prior.undetected,
                [[b] for b in map_prior.bernoullis],
                [GlobalHypothesis((0,) * len(map_prior.bernoullis), 0.0)],
            )
        )
        particles.append(Particle(state, -math.log(n), map_kind, rng))
    return ParticleSlamState(particles, resample_rng)


def initial_marginal(prior: GaussianDensity, map_prior: PMBDensity) -> MarginalSlamState:
    return MarginalSlamState(prior, map_prior)


# ---------------------------------------------------------------------------
# shared four-step map update
# ---------------------------------------------------------------------------


def _batched_meas_stats(z_pts: np.ndarray, weights: np.ndarray, wrap):
    """Weighted measurement moments over the middle axis of (B, n, dz)."""
    ref = z_pts[:, :1, :]
    rel = wrap(z_pts - ref)
    mean = wrap(ref[:, 0, :] + np.einsum("n,bnd->bd", weights, rel))
    dev = wrap(z_pts - mean[:, None, :])
    cov = np.einsum("n,bnd,bne->bde", weights, dev, dev)
    return mean, cov


def _birth_hypothesis(
    undetected: PPPIntensity,
    vehicle: GaussianDensity,
    z: np.ndarray,
    model,
    params: FilterParams,
    rng: np.random.Generator,
) -> BirthHypothesis:
    """Step ii: candidate new landmark (or clutter) for one measurement."""
    s_cp = cubature_points(vehicle)
    log_masses: dict[str, float] = {}
    per_type: dict[str, tuple[float, GaussianDensity | None]] = {
        m: (0.0, None) for m in model.types
    }
    densities: dict[str, GaussianDensity] = {}
    for m in model.ppp_types:
        for comp in undetected.of_type(m):
            if comp.weight <= 0.0:
                continue
            R_u = params.update_noise_scale * model.measurement_cov(m)
            proposal = birth_density(
                z,
                R_u,
                vehicle,
                lambda S, Z, m=m: model.birth_points(S, Z, m),
                comp.density,
                params.birth_samples,
                rng,
            )
            if not proposal.ok:
                continue
            p_d = model.detectability(vehicle.mean, proposal.density.mean, m)
            if p_d <= 0.0:
                continue
            # Expected likelihood of z for a landmark drawn from the uniform
            # intensity, marginalized over the vehicle: for every sample,
            # push the vehicle cubature points through h and moment-match.
            B = proposal.samples.shape[0]
            n_cp = s_cp.points.shape[0]
            S_rep = np.repeat(s_cp.points[None, :, :], B, axis=0).reshape(-1, vehicle.dim)
            X_rep = np.repeat(proposal.samples, n_cp, axis=0)
            z_pts = model.h(S_rep, X_rep, m).reshape(B, n_cp, model.z_dim)
            z_mean, z_cov = _batched_meas_stats(z_pts, s_cp.weights, model.wrap_meas)
            chol = np.linalg.cholesky(z_cov + R_u)
            innov = model.wrap_meas(z - z_mean)
            white = np.linalg.solve(chol, innov[:, :, None])[:, :, 0]
            maha = np.sum(white * white, axis=1)
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
            loglik = -0.5 * (maha + logdet + model.z_dim * math.log(2.0 * math.pi))
            # Unbiased importance estimate: mean of exp(raw ratio) * likelihood.
            log_mass = (
                math.log(p_d)
                + math.log(comp.weight)
                + float(logsumexp(proposal.log_weights_raw + loglik))
                - math.log(B)
            )
            if m in log_masses:
                log_masses[m] = float(np.logaddexp(log_masses[m], log_mass))
            else:
                log_masses[m] = log_mass
            densities[m] = proposal.density

    log_clutter = model.clutter_log_intensity(z)
    log_nu = float(logsumexp(list(log_masses.values()) + [log_clutter]))
    if not np.isfinite(log_nu):
        zero = BernoulliComponent(0.0, per_type, -np.inf)
        return BirthHypothesis(-np.inf, zero)
    log_birth_total = (
        float(logsumexp(list(log_masses.values()))) if log_masses else -np.inf
    )
    existence = math.exp(log_birth_total - log_nu) if np.isfinite(log_birth_total) else 0.0
    if existence > 0.0:
        for m, lw in log_masses.items():
            per_type[m] = (math.exp(lw - log_birth_total), densities[m])
    return BirthHypothesis(log_nu, BernoulliComponent(existence, per_type, log_nu))


def _miss_hypothesis(
    bern: BernoulliComponent, vehicle_mean: np.ndarray, model, params: FilterParams
) -> MissHypothesis:
    """Step iii: missed-detection update of one known landmark."""
    survive = {}
    for m, (w, dens) in bern.per_type.items():
        if w <= 0.0 or dens is None:
            continue
        p_d = model.detectability(vehicle_mean, dens.mean, m)
        survive[m] = (1.0 - p_d) * w
    mass = sum(survive.values())
    nu = 1.0 - bern.existence + bern.existence * mass
    log_nu = math.log(nu) if nu > 0.0 else -np.inf
    if mass > 0.0 and nu > 0.0:
        new_r = bern.existence * mass / nu
        per_type = {
            m: ((survive.get(m, 0.0) / mass), d if survive.get(m, 0.0) > 0.0 else None)
            for m, (w, d) in bern.per_type.items()
        }
    else:
        new_r = 0.0
        per_type = {m: (0.0, None) for m in bern.per_type}
    return MissHypothesis(
        log_nu, BernoulliComponent(new_r, per_type, bern.log_hypothesis_weight + log_nu)
    )


@dataclass
class _DetectPrep:
    """Per (landmark, type) cubature statistics reused by every measurement."""

    landmark_type: str
    log_prior_weight: float
    z_pred: np.ndarray
    chol: np.ndarray  # innovation covariance factor
    gain: np.ndarray  # joint-state Kalman gain
    prior_mean: np.ndarray
    post_cov_landmark: np.ndarray  # landmark block of the joint posterior cov
    landmark_slice: slice


def _prepare_detection(
    bern: BernoulliComponent, vehicle: GaussianDensity, model, params: FilterParams
) -> list[_DetectPrep]:
    """Joint (vehicle, landmark) measurement statistics per active type.

    A zero vehicle covariance (conditioning on a particle) reduces the
    joint construction to a landmark-only update automatically: the vehicle
    block contributes nothing to the innovation covariance or gain.
    """
    preps = []
    vehicle_known = np.abs(vehicle.covariance).max() == 0.0
    for m, (w, dens) in bern.per_type.items():
        if w <= 0.0 or dens is None:
            continue
        R_u = params.update_noise_scale * model.measurement_cov(m)
        if vehicle_known:
            prior = dens
            cs = cubature_points(prior)
            z_pts = model.h(
                np.broadcast_to(vehicle.mean, (cs.points.shape[0], vehicle.dim)),
                cs.points,
                m,
            )
            lm_slice = slice(0, dens.dim)
        else:
            joint_mean = np.concatenate([vehicle.mean, dens.mean])
            joint_cov = np.zeros((vehicle.dim + dens.dim, vehicle.dim + dens.dim))
            joint_cov[: vehicle.dim, : vehicle.dim] = vehicle.covariance
            joint_cov[vehicle.dim :, vehicle.dim :] = dens.covariance
            prior = GaussianDensity(joint_mean, joint_cov)
            cs = cubature_points(prior)
            z_pts = model.h(cs.points[:, : vehicle.dim], cs.points[:, vehicle.dim :], m)
            lm_slice = slice(vehicle.dim, vehicle.dim + dens.dim)
        z_mean, z_cov = _batched_meas_stats(
            z_pts[None, :, :], cs.weights, model.wrap_meas
        )
        z_pred, S = z_mean[0], z_cov[0] + R_u
        dev_x = cs.points - prior.mean
        if not vehicle_known:
            dev_x = np.column_stack(
                [model.wrap_state(dev_x[:, : vehicle.dim]), dev_x[:, vehicle.dim :]]
            )
        dev_z = model.wrap_meas(z_pts - z_pred)
        cross = (dev_x * cs.weights[:, None]).T @ dev_z
        chol = np.linalg.cholesky(0.5 * (S + S.T))
        gain = np.linalg.solve(chol.T, np.linalg.solve(chol, cross.T)).T
        post_cov = prior.covariance - gain @ S @ gain.T
        post_cov = 0.5 * (post_cov + post_cov.T)
        preps.append(
            _DetectPrep(
                m,
                math.log(w),
                z_pred,
                chol,
                gain,
                prior.mean,
                post_cov[lm_slice, lm_slice],
                lm_slice,
            )
        )
    return preps


def _detect_hypothesis(
    bern: BernoulliComponent,
    preps: list[_DetectPrep],
    z: np.ndarray,
    model,
    params: FilterParams,
    p_detect: float,
) -> DetectHypothesis:
    """Step iv: detection update of one known landmark by one measurement."""
    if bern.existence <= 0.0 or not preps:
        return DetectHypothesis(-np.inf, None)
    logs = []
    posts = []
    for prep in preps:
        innov = model.wrap_meas(z - prep.z_pred)
        white = np.linalg.solve(prep.chol, innov)
        maha = float(white @ white)
        if maha >= model.gate_threshold:
            continue
        logdet = 2.0 * float(np.sum(np.log(np.diag(prep.chol))))
        loglik = -0.5 * (maha + logdet + z.size * math.log(2.0 * math.pi))
        post_mean = (prep.prior_mean + prep.gain @ innov)[prep.landmark_slice]
        posts.append(
            (prep.landmark_type, GaussianDensity(post_mean, prep.post_cov_landmark))
        )
        logs.append(prep.log_prior_weight + math.log(p_detect) + loglik)
    if not logs:
        return DetectHypothesis(-np.inf, None)
    log_sum = float(logsumexp(logs))
    log_nu = math.log(bern.existence) + log_sum
    per_type = {m: (0.0, None) for m in bern.per_type}
    for lw, (m, dens) in zip(logs, posts):
        per_type[m] = (math.exp(lw - log_sum), dens)
    return DetectHypothesis(
        log_nu,
        BernoulliComponent(1.0, per_type, bern.log_hypothesis_weight + log_nu),
    )


def update_step_outputs(
    bernoullis: list[BernoulliComponent],
    undetected: PPPIntensity,
    vehicle: GaussianDensity,
    Z: list[np.ndarray],
    model,
    params: FilterParams,
    rng: np.random.Generator,
) -> StepOutputs:
    """Run steps ii-iv for a flat list of prior Bernoulli components."""
    births = [_birth_hypothesis(undetected, vehicle, z, model, params, rng) for z in Z]
    misses = [_miss_hypothesis(b, vehicle.mean, model, params) for b in bernoullis]
    detects = []
    p_detect = model.detection.p_detect
    for b in bernoullis:
        preps = _prepare_detection(b, vehicle, model, params)
        detects.append(
            [_detect_hypothesis(b, preps, z, model, params, p_detect) for z in Z]
        )
    return StepOutputs(misses, detects, births)


# ---------------------------------------------------------------------------
# pruning, merging, resampling
# ---------------------------------------------------------------------------


def prune_pmb(density: PMBDensity, params: FilterParams) -> PMBDensity:
    kept = [
        b
        for i, b in enumerate(density.bernoullis)
        if i < params.protected_landmarks or b.existence >= params.prune_existence
    ]
    return PMBDensity(density.undetected, kept)


def prune_pmbm(density: PMBMDensity, params: FilterParams) -> PMBMDensity:
    """Drop light hypotheses, cap their number, drop orphaned local
    hypotheses, and drop landmarks that every kept hypothesis considers
    nonexistent."""
    hyps = [h for h in density.hypotheses if h.weight >= params.prune_hypothesis_weight]
    if not hyps:
        hyps = [max(density.hypotheses, key=lambda h: h.log_weight)]
    hyps = sorted(hyps, key=lambda h: -h.log_weight)[: params.max_hypotheses]
    log_total = logsumexp([h.log_weight for h in hyps])
    hyps = [GlobalHypothesis(h.assignments, h.log_weight - log_total) for h in hyps]

    # orphaned local hypotheses
    used = [sorted({h.assignments[i] for h in hyps}) for i in range(density.num_landmarks)]
    remap = [{old: new for new, old in enumerate(u)} for u in used]
    bernoullis = [
        [density.bernoullis[i][old] for old in u] for i, u in enumerate(used)
    ]
    hyps = [
        GlobalHypothesis(
            tuple(remap[i][a] for i, a in enumerate(h.assignments)), h.log_weight
        )
        for h in hyps
    ]

    # landmarks nobody believes in
    keep_track = [
        i < params.protected_landmarks
        or max(b.existence for b in track) >= params.prune_existence
        for i, track in enumerate(bernoullis)
    ]
    bernoullis = [t for t, k in zip(bernoullis, keep_track) if k]
    hyps = [
        GlobalHypothesis(
            tuple(a for a, k in zip(h.assignments, keep_track) if k), h.log_weight
        )
        for h in hyps
    ]
    return PMBMDensity(density.undetected, bernoullis, hyps)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


def resample(state: ParticleSlamState, ess_fraction: float = 0.5) -> ParticleSlamState:
    """Systematic resampling, triggered only on low effective sample size.

    Copies of a particle get fresh independent RNG streams so runs stay
    deterministic under any particle scheduling.
    """
    n = len(state.particles)
    if state.effective_sample_size() >= ess_fraction * n:
        return state
    weights = np.exp(state.normalized_log_weights())
    indices = systematic_resample(weights, state.resample_rng)
    streams = state.resample_rng.spawn(n)
    particles = [
        Particle(state.particles[idx].state.copy(), -math.log(n), state.particles[idx].map, stream)
        for idx, stream in zip(indices, streams)
    ]
    return ParticleSlamState(particles, state.resample_rng, state.steps)


# ---------------------------------------------------------------------------
# invariant checks (enabled via FilterParams.validate)
# ---------------------------------------------------------------------------


def _check_covariances(bernoullis) -> None:
    for b in bernoullis:
        if not (0.0 <= b.existence <= 1.0):
            raise ConfigurationError(f"existence {b.existence} outside [0, 1]")
        for w, d in b.per_type.values():
            if d is None:
                continue
            eig = np.linalg.eigvalsh(d.covariance)
            if eig.min() < -1e-9 * max(np.trace(d.covariance), 1e-300):
                raise ConfigurationError("covariance lost positive semidefiniteness")


def _check_step(outputs: StepOutputs, prior_count: int) -> None:
    produced = outputs.num_landmarks + outputs.num_measurements
    if outputs.num_landmarks != prior_count:
        raise ConfigurationError("per-landmark hypothesis count mismatch")
    bernoullis = [m.bernoulli for m in outputs.misses]
    bernoullis += [b.bernoulli for b in outputs.births]
    bernoullis += [
        d.bernoulli for row in outputs.detects for d in row if d.bernoulli is not None
    ]
    _check_covariances(bernoullis)
    del produced  # count bound asserted by callers on the reduced map


# ---------------------------------------------------------------------------
# PMB filter (particles + BP + track-oriented reduction)
# ---------------------------------------------------------------------------


def _sample_transition(particle: Particle, model) -> np.ndarray:
    noise = psd_sqrt(model.process_cov) @ particle.rng.standard_normal(model.state_dim)
    return model.wrap_state(model.transition(particle.state) + noise)


def pmb_step(
    state: ParticleSlamState, Z: list[np.ndarray], model, params: FilterParams
) -> ParticleSlamState:
    """One predict-update cycle of the particle PMB filter."""
    Z = [np.asarray(z, dtype=float) for z in Z]
    new_particles = []
    for particle in state.particles:
        s = _sample_transition(particle, model)
        vehicle = GaussianDensity(s, np.zeros((model.state_dim, model.state_dim)))
        pm: PMBDensity = particle.map
        outputs = update_step_outputs(
            pm.bernoullis, pm.undetected, vehicle, Z, model, params, particle.rng
        )
        problem = assoc.build_problem(outputs)
        beliefs = assoc.lbp_marginals(
            problem, params.lbp_max_iterations, params.lbp_tol, params.lbp_damping
        )
        free_energy = assoc.bethe_free_energy(problem, beliefs)
        bernoullis = assoc.tombp_reduce(outputs, beliefs)
        if params.validate:
            _check_step(outputs, len(pm.bernoullis))
            if len(bernoullis) != len(pm.bernoullis) + len(Z):
                raise ConfigurationError("reduced map has wrong landmark count")
            _check_covariances(bernoullis)
        new_map = prune_pmb(
            PMBDensity(pm.undetected.thinned(params.step_i_survival), bernoullis), params
        )
        new_particles.append(
            Particle(s, particle.log_weight - free_energy, new_map, particle.rng)
        )
    out = ParticleSlamState(new_particles, state.resample_rng, state.steps + 1)
    _renormalize(out)
    return resample(out, params.ess_fraction)


def _renormalize(state: ParticleSlamState) -> None:
    logw = state.normalized_log_weights()
    for p, lw in zip(state.particles, logw):
        p.log_weight = float(lw)


# ---------------------------------------------------------------------------
# PMBM filter (particles + ranked global hypotheses)
# ---------------------------------------------------------------------------


def pmbm_step(
    state: ParticleSlamState, Z: list[np.ndarray], model, params: FilterParams
) -> ParticleSlamState:
    """One predict-update cycle of the particle PMBM filter."""
    Z = [np.asarray(z, dtype=float) for z in Z]
    new_particles = []
    for particle in state.particles:
        s = _sample_transition(particle, model)
        vehicle = GaussianDensity(s, np.zeros((model.state_dim, model.state_dim)))
        pm: PMBMDensity = particle.map
        new_map, log_chi = _pmbm_map_update(pm, vehicle, Z, model, params, particle.rng)
        new_particles.append(
            Particle(s, particle.log_weight + log_chi, new_map, particle.rng)
        )
    out = ParticleSlamState(new_particles, state.resample_rng, state.steps + 1)
    _renormalize(out)
    return resample(out, params.ess_fraction)


def _pmbm_map_update(
    pm: PMBMDensity,
    vehicle: GaussianDensity,
    Z: list[np.ndarray],
    model,
    params: FilterParams,
    rng: np.random.Generator,
) -> tuple[PMBMDensity, float]:
    I, J = pm.num_landmarks, len(Z)

    # Update every local hypothesis of every landmark once (flattened).
    flat: list[BernoulliComponent] = []
    index: list[list[int]] = []
    for track in pm.bernoullis:
        index.append([len(flat) + k for k in range(len(track))])
        flat.extend(track)
    outputs = update_step_outputs(
        flat, pm.undetected, vehicle, Z, model, params, rng
    )
    if params.validate:
        _check_step(outputs, len(flat))

    # Extend each parent global hypothesis with its ranked best children.
    children: list[tuple[float, tuple[int, ...], GlobalHypothesis]] = []
    for parent in pm.hypotheses:
        rows = [index[i][parent.assignments[i]] for i in range(I)]
        problem = AssociationProblem(
            np.array([outputs.misses[r].log_nu for r in rows]),
            np.array([[outputs.detects[r][j].log_nu for j in range(J)] for r in rows]),
            np.array([b.log_nu for b in outputs.births]),
        )
        k = max(1, math.ceil(params.max_hypotheses * parent.weight))
        for child in assoc.murty_kbest(problem, k):
            children.append(
                (parent.log_weight + child.log_weight, tuple(rows), child)
            )

    log_chi = float(logsumexp([c[0] for c in children]))

    # Materialize the new hypothesis forest: local hypotheses are keyed by
    # (parent local hypothesis, measurement) for old landmarks and by
    # existence for the new ones.
    track_keys: list[dict[tuple[int, int], int]] = [dict() for _ in range(I + J)]
    tracks: list[list[BernoulliComponent]] = [[] for _ in range(I + J)]
    hypotheses = []
    for log_w, rows, child in children:
        assignment = []
        for i in range(I):
            key = (rows[i], child.assignments[i])
            if key not in track_keys[i]:
                track_keys[i][key] = len(tracks[i])
                if child.assignments[i] == 0:
                    tracks[i].append(outputs.misses[rows[i]].bernoulli)
                else:
                    tracks[i].append(
                        outputs.detects[rows[i]][child.assignments[i] - 1].bernoulli
                    )
            assignment.append(track_keys[i][key])
        born = set(range(1, J + 1)) - set(a for a in child.assignments if a)
        for j in range(1, J + 1):
            key = (0, 1 if j in born else 0)
            if key not in track_keys[I + j - 1]:
                track_keys[I + j - 1][key] = len(tracks[I + j - 1])
                if j in born:
                    tracks[I + j - 1].append(outputs.births[j - 1].bernoulli)
                else:
                    tracks[I + j - 1].append(
                        BernoulliComponent(
                            0.0, {m: (0.0, None) for m in model.types}, 0.0
                        )
                    )
            assignment.append(track_keys[I + j - 1][key])
        hypotheses.append(GlobalHypothesis(tuple(assignment), log_w - log_chi))

    new_map = PMBMDensity(
        pm.undetected.thinned(params.step_i_survival), tracks, hypotheses
    )
    if params.validate:
        if new_map.num_landmarks != I + J:
            raise ConfigurationError("hypothesis forest has wrong landmark count")
        new_map.validate()
    return prune_pmbm(new_map, params), log_chi


# ---------------------------------------------------------------------------
# marginalized PMB filter (no particles)
# ---------------------------------------------------------------------------


def _hard_association(
    prior: PMBDensity, beliefs: Beliefs, params: FilterParams
) -> list[tuple[int, int, str]]:
    """Most-likely association for the vehicle update.

    Landmarks qualify when their strongest existence-weighted type belief
    clears the threshold; each takes its belief-argmax measurement (ties to
    the lowest index), and conflicts resolve greedily by belief."""
    candidates = []
    for i, bern in enumerate(prior.bernoullis):
        weights = {m: bern.existence * w for m, (w, _) in bern.per_type.items()}
        m_star = max(weights, key=lambda m: (weights[m], -list(weights).index(m)))
        if weights[m_star] <= params.existence_threshold:
            continue
        j_star = int(np.argmax(beliefs.bel_c[i]))
        if j_star == 0:
            continue
        candidates.append((float(beliefs.bel_c[i, j_star]), i, j_star, m_star))
    candidates.sort(key=lambda t: (-t[0], t[1]))
    taken: set[int] = set()
    chosen = []
    for _, i, j, m in candidates:
        if j in taken:
            continue
        taken.add(j)
        chosen.append((i, j, m))
    return chosen


def mpmb_step(
    state: MarginalSlamState, Z: list[np.ndarray], model, params: FilterParams,
    rng: np.random.Generator,
) -> MarginalSlamState:
    """One predict-update cycle of the marginalized (particle-free) filter."""
    Z = [np.asarray(z, dtype=float) for z in Z]
    predicted = ckf_predict(
        state.vehicle, model.transition, model.process_cov, model.wrap_state
    )
    pm = state.map
    outputs = update_step_outputs(
        pm.bernoullis, pm.undetected, predicted, Z, model, params, rng
    )
    problem = assoc.build_problem(outputs)
    beliefs = assoc.lbp_marginals(
        problem, params.lbp_max_iterations, params.lbp_tol, params.lbp_damping
    )
    bernoullis = assoc.tombp_reduce(outputs, beliefs)
    if params.validate:
        _check_step(outputs, len(pm.bernoullis))
        if len(bernoullis) != len(pm.bernoullis) + len(Z):
            raise ConfigurationError("reduced map has wrong landmark count")
        _check_covariances(bernoullis)

    # Vehicle update against the hard most-likely association of the
    # confidently existing landmarks.  Dithering counters the covariance
    # shrinkage of the nonlinear update, so it only applies when an update
    # actually ran; with nothing selected the posterior is the prediction.
    chosen = _hard_association(pm, beliefs, params)
    if chosen:
        landmarks, measurements, covs, h_fns = [], [], [], []
        for i, j, m in chosen:
            landmarks.append(pm.bernoullis[i].density(m))
            measurements.append(Z[j - 1])
            covs.append(params.vehicle_update_noise_scale * model.measurement_cov(m))
            h_fns.append(lambda S, X, m=m: model.h(S, X, m))
        vehicle = joint_ckf_update(
            predicted, landmarks, measurements, covs, h_fns,
            model.wrap_state, model.wrap_meas,
        )
        vehicle = dither(vehicle, params.dither_factor)
    else:
        vehicle = predicted

    new_map = prune_pmb(
        PMBDensity(pm.undetected.thinned(params.step_i_survival), bernoullis), params
    )
    return MarginalSlamState(vehicle, new_map, state.steps + 1)
