"""Cubature Kalman machinery.

Third-degree spherical-radial cubature: a d-dimensional Gaussian is
represented by 2d equally weighted points at mean +/- sqrt(d) times the
Cholesky columns.  Nonlinear prediction and update propagate the points and
moment-match the result.  Optional wrap callbacks make the moment
computations safe for angular components (they wrap deviations before
averaging, so means never smear across the +/-pi cut).

Also hosts the importance-sampled birth proposal used by the marginalized
filter (a Gaussian fitted to birth points evaluated on the cross product of
vehicle and measurement cubature points) and covariance dithering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .rfs import ConfigurationError, GaussianDensity, UniformBox, psd_sqrt


@dataclass(frozen=True)
class CubatureSet:
    """2d cubature points with uniform weights 1/(2d)."""

    points: np.ndarray  # (2d, d)
    weights: np.ndarray  # (2d,)


def cubature_points(g: GaussianDensity) -> CubatureSet:
    d = g.dim
    root = psd_sqrt(g.covariance)
    spread = math.sqrt(d) * root.T  # rows are sqrt(d) * Cholesky columns
    pts = np.vstack([g.mean + spread, g.mean - spread])
    return CubatureSet(pts, np.full(2 * d, 1.0 / (2 * d)))


def _moments(pts: np.ndarray, weights: np.ndarray, wrap=None):
    """Weighted mean and scatter; deviations are wrapped when asked."""
    if wrap is None:
        mean = weights @ pts
        dev = pts - mean
    else:
        ref = pts[0]
        rel = wrap(pts - ref)
        mean = wrap(ref + weights @ rel)
        dev = wrap(pts - mean)
    cov = (dev * weights[:, None]).T @ dev
    return mean, cov, dev


@dataclass(frozen=True)
class CkfUpdateResult:
    posterior: GaussianDensity
    predicted: GaussianDensity  # measurement mean and innovation covariance
    log_likelihood: float
    mahalanobis: float  # squared gating distance of the measurement

    @property
    def likelihood(self) -> float:
        return math.exp(self.log_likelihood)


def ckf_predict(prior: GaussianDensity, transition, Q: np.ndarray, wrap=None) -> GaussianDensity:
    """Propagate through a (vectorized) transition and add process noise."""
    cs = cubature_points(prior)
    propagated = np.atleast_2d(transition(cs.points))
    mean, cov, _ = _moments(propagated, cs.weights, wrap)
    return GaussianDensity(mean, cov + np.asarray(Q, dtype=float))


def _ckf_core(prior, h, z, R, wrap_state, wrap_meas):
    cs = cubature_points(prior)
    z_pts = np.atleast_2d(h(cs.points))
    z_mean, s_cov, z_dev = _moments(z_pts, cs.weights, wrap_meas)
    s_cov = s_cov + np.asarray(R, dtype=float)
    if wrap_state is None:
        x_dev = cs.points - prior.mean
    else:
        x_dev = wrap_state(cs.points - prior.mean)
    cross = (x_dev * cs.weights[:, None]).T @ z_dev

    chol = np.linalg.cholesky(0.5 * (s_cov + s_cov.T))
    innovation = z - z_mean if wrap_meas is None else wrap_meas(z - z_mean)
    white = np.linalg.solve(chol, innovation)
    maha = float(white @ white)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    log_lik = -0.5 * (maha + logdet + z.size * math.log(2.0 * math.pi))

    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, cross.T)).T
    post_mean = prior.mean + gain @ innovation
    if wrap_state is not None:
        post_mean = wrap_state(post_mean)
    post_cov = prior.covariance - gain @ s_cov @ gain.T
    return CkfUpdateResult(
        GaussianDensity(post_mean, 0.5 * (post_cov + post_cov.T)),
        GaussianDensity(z_mean, s_cov),
        log_lik,
        maha,
    )


def ckf_update(
    prior: GaussianDensity,
    h,
    z: np.ndarray,
    R: np.ndarray,
    wrap_state=None,
    wrap_meas=None,
) -> CkfUpdateResult:
    """Cubature measurement update against a single measurement vector."""
    z = np.asarray(z, dtype=float)
    try:
        return _ckf_core(prior, h, z, R, wrap_state, wrap_meas)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("singular innovation covariance") from exc


def joint_ckf_update(
    vehicle: GaussianDensity,
    landmarks: list[GaussianDensity],
    measurements: list[np.ndarray],
    covariances: list[np.ndarray],
    h_pair_fns: list,
    wrap_state=None,
    wrap_meas_single=None,
) -> GaussianDensity:
    """Update the vehicle jointly with selected landmarks.

    The vehicle and the landmark states are stacked with a block-diagonal
    prior covariance (prior independence), one cubature update runs against
    the stacked measurement vector, and the vehicle marginal is returned.
    ``h_pair_fns[i]`` maps (vehicle rows, landmark-i rows) to measurement
    rows.  An empty selection returns the prior unchanged.
    """
    if not landmarks:
        return vehicle
    dims = [vehicle.dim] + [lm.dim for lm in landmarks]
    offsets = np.concatenate([[0], np.cumsum(dims)])
    joint_mean = np.concatenate([vehicle.mean] + [lm.mean for lm in landmarks])
    joint_cov = np.zeros((offsets[-1], offsets[-1]))
    joint_cov[: vehicle.dim, : vehicle.dim] = vehicle.covariance
    for i, lm in enumerate(landmarks):
        a, b = offsets[i + 1], offsets[i + 2]
        joint_cov[a:b, a:b] = lm.covariance

    z_dims = [np.asarray(z).size for z in measurements]
    z_stack = np.concatenate([np.asarray(z, dtype=float) for z in measurements])
    R_stack = np.zeros((z_stack.size, z_stack.size))
    pos = 0
    for R, dz in zip(covariances, z_dims):
        R_stack[pos : pos + dz, pos : pos + dz] = R
        pos += dz

    def h_joint(pts):
        s_block = pts[:, : vehicle.dim]
        cols = []
        for i, fn in enumerate(h_pair_fns):
            a, b = offsets[i + 1], offsets[i + 2]
            cols.append(np.atleast_2d(fn(s_block, pts[:, a:b])))
        return np.hstack(cols)

    def wrap_joint_state(delta):
        if wrap_state is None:
            return delta
        out = np.array(delta, dtype=float, copy=True)
        out[..., : vehicle.dim] = wrap_state(out[..., : vehicle.dim])
        return out

    def wrap_joint_meas(delta):
        if wrap_meas_single is None:
            return delta
        out = np.array(delta, dtype=float, copy=True)
        pos = 0
        for dz in z_dims:
            out[..., pos : pos + dz] = wrap_meas_single(out[..., pos : pos + dz])
            pos += dz
        return out

    joint_prior = GaussianDensity(joint_mean, joint_cov)
    result = ckf_update(
        joint_prior, h_joint, z_stack, R_stack, wrap_joint_state, wrap_joint_meas
    )
    post = result.posterior
    return GaussianDensity(
        post.mean[: vehicle.dim], post.covariance[: vehicle.dim, : vehicle.dim]
    )


@dataclass(frozen=True)
class BirthProposal:
    """Importance-sampled birth density for one measurement and type.

    ``density`` is the Gaussian proposal fitted to the birth points;
    ``samples`` with the raw ratios ``log_weights_raw`` (uniform birth
    density over proposal density, per sample) implement the uniform-prior
    correction: averaging exp(raw) * g over the samples estimates the
    integral of the uniform density times g without normalization bias.
    ``log_weights`` carries the normalized weights.  ``ok`` is False when
    every sample fell outside the birth region (stillborn component) or no
    valid birth geometry existed.
    """

    density: GaussianDensity | None
    samples: np.ndarray
    log_weights: np.ndarray
    log_weights_raw: np.ndarray
    ok: bool


def birth_density(
    z: np.ndarray,
    R: np.ndarray,
    vehicle: GaussianDensity,
    birth_points_fn,
    region: UniformBox,
    count: int,
    rng: np.random.Generator,
) -> BirthProposal:
    """Build the birth proposal for one measurement.

    Birth points are evaluated on the cross product of vehicle cubature
    points and measurement cubature points; their per-vehicle-point means
    and scatters are pooled into a single Gaussian proposal, from which
    ``count`` samples are drawn and reweighted towards the uniform birth
    density over ``region``.
    """
    if count < 1:
        raise ConfigurationError("birth sample count must be >= 1")
    z = np.asarray(z, dtype=float)
    s_pts = cubature_points(vehicle).points  # (2ds, ds)
    z_pts = cubature_points(GaussianDensity(z, R)).points  # (2dz, dz)
    pts, valid = birth_points_fn(s_pts, z_pts)  # (b, c, dx), (b, c)
    usable_cols = valid.any(axis=0)
    if not usable_cols.any():
        empty = np.zeros((0, pts.shape[-1]))
        return BirthProposal(None, empty, np.zeros(0), np.zeros(0), False)

    col_means = []
    col_covs = []
    for c in np.flatnonzero(usable_cols):
        rows = pts[valid[:, c], c, :]
        mu = rows.mean(axis=0)
        dev = rows - mu
        col_means.append(mu)
        col_covs.append(dev.T @ dev / rows.shape[0])
    col_means = np.asarray(col_means)
    mean = col_means.mean(axis=0)
    spread = col_means - mean
    cov = np.mean(
        [P + np.outer(d, d) for P, d in zip(col_covs, spread)], axis=0
    )
    proposal = GaussianDensity(mean, cov)

    root = psd_sqrt(proposal.covariance)
    samples = proposal.mean + rng.standard_normal((count, proposal.dim)) @ root.T
    degenerate = np.abs(proposal.covariance).max() < 1e-300 or not np.isfinite(
        np.linalg.slogdet(proposal.covariance + 0.0)[1]
    )
    if not degenerate:
        try:
            log_q = proposal.log_pdf(samples)
        except np.linalg.LinAlgError:
            degenerate = True
    if degenerate:
        # Delta-like proposal: it cannot support an importance estimate of
        # the uniform integral (raw ratios vanish), but the surviving
        # samples still share one normalized weight.
        inside = region.contains(samples)
        if not np.any(inside):
            return BirthProposal(
                proposal, samples, np.full(count, -np.inf), np.full(count, -np.inf), False
            )
        norm = np.where(inside, -math.log(float(inside.sum())), -np.inf)
        return BirthProposal(proposal, samples, norm, np.full(count, -np.inf), True)
    raw = region.log_pdf(samples) - log_q
    total = logsumexp(raw)
    if not np.isfinite(total):
        return BirthProposal(proposal, samples, np.full(count, -np.inf), raw, False)
    return BirthProposal(proposal, samples, raw - total, raw, True)


def dither(posterior: GaussianDensity, factor: float) -> GaussianDensity:
    """Inflate a covariance to counter overconfident nonlinear updates."""
    if factor < 1.0:
        raise ConfigurationError("dithering factor must be >= 1")
    return GaussianDensity(posterior.mean, factor * posterior.covariance)
