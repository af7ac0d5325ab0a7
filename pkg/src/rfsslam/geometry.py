"""Vehicle dynamics and mmWave multipath geometry.

The sensing vehicle carries a 7-dimensional state (3-D position, heading,
translation speed, turn rate, clock bias in meters).  Landmarks are the
base station (BS), virtual anchors (VA, mirror images of the BS across
reflecting surfaces) and scattering points (SP).  Each propagation path
yields a 5-dimensional measurement [TOA, DOA azimuth, DOA elevation,
DOD azimuth, DOD elevation]; TOA is expressed in meters (delay times the
speed of light) so the clock bias adds to it directly and no speed-of-light
factors appear inside the filters.

Conventions fixed here (the measurement and birth equations are mutually
inverse under them, which the round-trip tests enforce):
  * azimuth/elevation of a direction d are atan2(dy, dx) and
    atan2(dz, hypot(dx, dy));
  * DOA is measured in the vehicle frame, i.e. the global azimuth minus
    the heading; elevation is unaffected by heading (planar rotation);
  * DOD is measured in the global (BS) frame; for a VA path it points from
    the BS towards the incidence point on the reflecting surface.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .rfs import ConfigurationError, GaussianDensity, UniformBox

BS, VA, SP = "BS", "VA", "SP"
LANDMARK_TYPES = (BS, VA, SP)

STATE_DIM = 7
MEAS_DIM = 5
HEADING_INDEX = 3

# angle components of the state / measurement vectors
STATE_ANGLE_MASK = np.zeros(STATE_DIM, dtype=bool)
STATE_ANGLE_MASK[HEADING_INDEX] = True
MEAS_ANGLE_MASK = np.array([False, True, True, True, True])

_EPS_DENOM = 1e-9


class UndefinedAngleError(ValueError):
    """Direction angles requested between coincident points."""


class DegenerateGeometryError(ValueError):
    """A birth-point construction hit a near-singular configuration."""


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    wrapped = -((-a + math.pi) % (2.0 * math.pi) - math.pi)
    return float(wrapped) if wrapped.ndim == 0 else wrapped


@dataclass(frozen=True)
class VehicleState:
    """Kinematic state of the sensing vehicle."""

    position: np.ndarray  # meters, 3-D
    heading: float  # radians, wrapped to (-pi, pi]
    speed: float  # m/s
    turn_rate: float  # rad/s
    clock_bias: float  # meters

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise ConfigurationError("non-finite vehicle position")
        for name in ("heading", "speed", "turn_rate", "clock_bias"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"non-finite vehicle {name}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.position, [self.heading, self.speed, self.turn_rate, self.clock_bias]]
        )

    @staticmethod
    def from_vector(v: np.ndarray) -> "VehicleState":
        v = np.asarray(v, dtype=float).reshape(STATE_DIM)
        return VehicleState(v[:3], v[3], v[4], v[5], v[6])


@dataclass(frozen=True)
class Landmark:
    position: np.ndarray  # meters, 3-D
    landmark_type: str

    def __post_init__(self):
        if self.landmark_type not in LANDMARK_TYPES:
            raise ConfigurationError(f"unknown landmark type {self.landmark_type!r}")
        object.__setattr__(
            self, "position", np.asarray(self.position, dtype=float).reshape(3)
        )


@dataclass(frozen=True)
class Measurement:
    """One multipath detection: TOA (meters) and four angles (radians)."""

    toa: float
    doa_az: float
    doa_el: float
    dod_az: float
    dod_el: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.toa, self.doa_az, self.doa_el, self.dod_az, self.dod_el])

    @staticmethod
    def from_vector(z: np.ndarray) -> "Measurement":
        z = np.asarray(z, dtype=float).reshape(MEAS_DIM)
        return Measurement(z[0], z[1], z[2], z[3], z[4])


@dataclass(frozen=True)
class Wall:
    """Reflecting plane {x : normal . x = offset} with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm < _EPS_DENOM:
            raise ConfigurationError("wall normal must be nonzero")
        if abs(norm - 1.0) > 1e-9:
            raise ConfigurationError("wall normal must be unit length")
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class NoiseModel:
    """Measurement covariance per landmark type plus process covariance."""

    measurement_cov: dict[str, np.ndarray]  # 5x5 SPD per type
    process_cov: np.ndarray  # 7x7 PSD

    def __post_init__(self):
        covs = {}
        for m, R in self.measurement_cov.items():
            R = np.asarray(R, dtype=float).reshape(MEAS_DIM, MEAS_DIM)
            try:
                np.linalg.cholesky(R)
            except np.linalg.LinAlgError as exc:
                raise ConfigurationError(f"measurement covariance for {m} not SPD") from exc
            covs[m] = R
        Q = np.asarray(self.process_cov, dtype=float).reshape(STATE_DIM, STATE_DIM)
        if np.linalg.eigvalsh(Q).min() < -1e-12 * max(np.trace(Q), 1.0):
            raise ConfigurationError("process covariance not PSD")
        object.__setattr__(self, "measurement_cov", covs)
        object.__setattr__(self, "process_cov", Q)

    def R(self, landmark_type: str) -> np.ndarray:
        return self.measurement_cov[landmark_type]


# ---------------------------------------------------------------------------
# vehicle dynamics
# ---------------------------------------------------------------------------


def transition_vector(s: np.ndarray, dt: float) -> np.ndarray:
    """Coordinated-turn state transition on raw state vectors.

    Position advances along a circular arc of radius speed/turn_rate; the
    straight-line limit is used when the turn rate is numerically zero.
    Speed, turn rate and clock bias are constant (process noise is the
    caller's business).
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    S = np.atleast_2d(s).copy()
    heading = S[:, 3]
    speed = S[:, 4]
    rate = S[:, 5]
    turning = np.abs(rate) > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        radius = np.where(turning, speed / np.where(turning, rate, 1.0), 0.0)
    new_heading = heading + rate * dt
    dx = np.where(
        turning,
        radius * (np.sin(new_heading) - np.sin(heading)),
        speed * dt * np.cos(heading),
    )
    dy = np.where(
        turning,
        -radius * (np.cos(new_heading) - np.cos(heading)),
        speed * dt * np.sin(heading),
    )
    S[:, 0] += dx
    S[:, 1] += dy
    S[:, 3] = wrap_angle(new_heading)
    return S[0] if single else S


def vehicle_transition(s: VehicleState, dt: float) -> VehicleState:
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    return VehicleState.from_vector(transition_vector(s.as_vector(), dt))


def mirror_bs(bs_position: np.ndarray, wall: Wall) -> np.ndarray:
    """Reflect the BS across a wall plane to obtain the virtual anchor."""
    bs = np.asarray(bs_position, dtype=float).reshape(3)
    return bs - 2.0 * (bs @ wall.normal - wall.offset) * wall.normal


# ---------------------------------------------------------------------------
# measurement functions
# ---------------------------------------------------------------------------


def _azimuth_elevation(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Angles of direction rows; raises if a direction vanishes."""
    d = np.atleast_2d(d)
    horiz = np.hypot(d[:, 0], d[:, 1])
    if np.any((horiz < 1e-12) & (np.abs(d[:, 2]) < 1e-12)):
        raise UndefinedAngleError("direction between coincident points")
    return np.arctan2(d[:, 1], d[:, 0]), np.arctan2(d[:, 2], horiz)


def _incidence_points(
    anchor: np.ndarray, mirrored: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Intersections of the lines mirrored->target with the bisector planes
    of (anchor, mirrored).  Returns (points, valid mask)."""
    u = anchor - mirrored
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    valid = norms[..., 0] > _EPS_DENOM
    u = u / np.where(norms > _EPS_DENOM, norms, 1.0)
    f = 0.5 * (anchor + mirrored)
    ray = target - mirrored
    denom = np.sum(ray * u, axis=-1)
    valid &= np.abs(denom) > _EPS_DENOM
    t = np.sum((f - mirrored) * u, axis=-1) / np.where(valid, denom, 1.0)
    return mirrored + t[..., None] * ray, valid


def h_pairs(S: np.ndarray, X: np.ndarray, landmark_type: str, bs: np.ndarray) -> np.ndarray:
    """Measurement function on paired rows of vehicle states and positions.

    ``S`` is (n, 7), ``X`` is (n, 3); returns (n, 5).  Broadcasting a single
    vehicle state against many landmark positions (or vice versa) is the
    caller's job via np.broadcast_to.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if S.shape[0] == 1 and X.shape[0] > 1:
        S = np.broadcast_to(S, (X.shape[0], STATE_DIM))
    if X.shape[0] == 1 and S.shape[0] > 1:
        X = np.broadcast_to(X, (S.shape[0], 3))
    v = S[:, :3]
    heading = S[:, 3]
    bias = S[:, 6]
    bs = np.asarray(bs, dtype=float).reshape(3)

    to_landmark = X - v
    range_vl = np.linalg.norm(to_landmark, axis=1)
    doa_az_g, doa_el = _azimuth_elevation(to_landmark)

    if landmark_type == BS:
        toa = range_vl + bias
        dod_az, dod_el = _azimuth_elevation(v - X)
    elif landmark_type == VA:
        toa = range_vl + bias
        incidence, valid = _incidence_points(np.broadcast_to(bs, X.shape), X, v)
        if not np.all(valid):
            raise DegenerateGeometryError("reflection geometry degenerate")
        dod_az, dod_el = _azimuth_elevation(incidence - bs)
    elif landmark_type == SP:
        toa = np.linalg.norm(X - bs, axis=1) + range_vl + bias
        dod_az, dod_el = _azimuth_elevation(X - bs)
    else:
        raise ConfigurationError(f"unknown landmark type {landmark_type!r}")

    out = np.column_stack(
        [toa, wrap_angle(doa_az_g - heading), doa_el, dod_az, dod_el]
    )
    return out


def measurement_fn(s: VehicleState, landmark: Landmark, bs_position: np.ndarray) -> Measurement:
    """Noiseless measurement of one landmark from one vehicle state."""
    z = h_pairs(
        s.as_vector()[None, :],
        landmark.position[None, :],
        landmark.landmark_type,
        bs_position,
    )
    return Measurement.from_vector(z[0])


# ---------------------------------------------------------------------------
# birth points: invert a measurement into a landmark position hypothesis
# ---------------------------------------------------------------------------


def birth_points_va(S: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """VA positions implied by measurement rows ``Z`` (b, 5) under vehicle
    state rows ``S`` (c, 7); returns (b, c, 3).

    The bias-corrected TOA is the vehicle-to-anchor distance; its planar
    part extends along the global DOA azimuth and its vertical part along
    the DOA elevation.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    toa = Z[:, 0][:, None]
    az = Z[:, 1][:, None]
    el = Z[:, 2][:, None]
    xv, yv, zv = S[:, 0][None, :], S[:, 1][None, :], S[:, 2][None, :]
    heading = S[:, 3][None, :]
    bias = S[:, 6][None, :]
    slant = toa - bias
    planar = slant * np.cos(el)
    return np.stack(
        [
            xv + planar * np.cos(az + heading),
            yv + planar * np.sin(az + heading),
            zv + slant * np.sin(el),
        ],
        axis=-1,
    )


def birth_points_sp(
    S: np.ndarray, Z: np.ndarray, bs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """SP positions implied by measurements: the intermediate VA point is
    projected back onto the scatterer along the line towards the vehicle.

    Returns (points (b, c, 3), valid mask (b, c)); invalid entries had a
    near-singular projection denominator and must be discarded.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    xva = birth_points_va(S, Z)  # (b, c, 3)
    v = np.broadcast_to(S[None, :, :3], xva.shape)
    anchor = np.broadcast_to(np.asarray(bs, dtype=float).reshape(3), xva.shape)
    return _incidence_points(anchor, xva, v)


def birth_point_va(s: VehicleState, z: Measurement) -> np.ndarray:
    return birth_points_va(s.as_vector()[None, :], z.as_vector()[None, :])[0, 0]


def birth_point_sp(s: VehicleState, z: Measurement, bs_position: np.ndarray) -> np.ndarray:
    pts, valid = birth_points_sp(
        s.as_vector()[None, :], z.as_vector()[None, :], bs_position
    )
    if not valid[0, 0]:
        raise DegenerateGeometryError("scatterer projection denominator near zero")
    return pts[0, 0]


# ---------------------------------------------------------------------------
# detection model
# ---------------------------------------------------------------------------


class UpdateStep:
    """Tags for the four map-update steps driving the detection model."""

    UNDETECTED_MISS = "undetected-miss"  # step i
    NEW_DETECTION = "new-detection"  # step ii
    MISSED_DETECTION = "missed-detection"  # step iii
    DETECTION = "detection"  # step iv


@dataclass(frozen=True)
class DetectionConfig:
    """Two-level detection probability: P_D inside the field of view (and
    inside the ellipsoidal gate when a gate distance applies), zero outside.
    """

    p_detect: float = 0.95
    gate_probability: float = 0.99
    fov_range_m: dict[str, float] = field(
        default_factory=lambda: {BS: math.inf, VA: math.inf, SP: 50.0}
    )
    gate_df: int = MEAS_DIM

    def __post_init__(self):
        if not (0.0 <= self.p_detect <= 1.0):
            raise ConfigurationError("p_detect outside [0, 1]")
        if not (0.0 < self.gate_probability < 1.0):
            raise ConfigurationError("gate probability outside (0, 1)")

    @property
    def gate_threshold(self) -> float:
        return float(chi2.ppf(self.gate_probability, df=self.gate_df))

    def in_fov(self, vehicle_position: np.ndarray, x: np.ndarray, landmark_type: str) -> bool:
        # FoV is a horizontal max-range disc around the vehicle.
        horizontal = np.linalg.norm(
            np.asarray(x, dtype=float)[:2] - np.asarray(vehicle_position, dtype=float)[:2]
        )
        return bool(horizontal <= self.fov_range_m.get(landmark_type, math.inf))


def detection_probability(
    s: VehicleState | np.ndarray,
    landmark: Landmark,
    step: str,
    cfg: DetectionConfig,
    gate: float | None = None,
) -> float:
    """Adaptive detection probability for one update-step context.

    Step i treats undetected landmarks as invisible.  Step ii applies the
    FoV test at the candidate birth location.  Steps iii/iv use the
    ellipsoidal gate when a gating distance is supplied (strictly below the
    threshold detects) and fall back to the FoV test otherwise.
    """
    vpos = s.position if isinstance(s, VehicleState) else np.asarray(s, dtype=float)[:3]
    if step == UpdateStep.UNDETECTED_MISS:
        return 0.0
    if step == UpdateStep.NEW_DETECTION:
        visible = cfg.in_fov(vpos, landmark.position, landmark.landmark_type)
        return cfg.p_detect if visible else 0.0
    if step in (UpdateStep.MISSED_DETECTION, UpdateStep.DETECTION):
        if gate is not None:
            return cfg.p_detect if gate < cfg.gate_threshold else 0.0
        visible = cfg.in_fov(vpos, landmark.position, landmark.landmark_type)
        return cfg.p_detect if visible else 0.0
    raise ConfigurationError(f"unknown update step {step!r}")


# ---------------------------------------------------------------------------
# bundled measurement model handed to the filters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MmwaveModel:
    """Everything the filters need to know about the sensing setup."""

    bs_position: np.ndarray
    noise: NoiseModel
    detection: DetectionConfig
    landmark_region: UniformBox  # 3-D region carrying the undetected intensity
    measurement_region: UniformBox  # 5-D region carrying the clutter intensity
    clutter_mean: float  # expected clutter detections per step
    dt: float = 1.0

    state_dim: int = STATE_DIM
    z_dim: int = MEAS_DIM
    types: tuple[str, ...] = LANDMARK_TYPES
    ppp_types: tuple[str, ...] = (VA, SP)

    def __post_init__(self):
        object.__setattr__(
            self, "bs_position", np.asarray(self.bs_position, dtype=float).reshape(3)
        )
        if self.clutter_mean < 0:
            raise ConfigurationError("clutter mean must be nonnegative")

    # -- dynamics ----------------------------------------------------------
    def transition(self, s: np.ndarray) -> np.ndarray:
        return transition_vector(s, self.dt)

    @property
    def process_cov(self) -> np.ndarray:
        return self.noise.process_cov

    # -- measurements ------------------------------------------------------
    def h(self, S: np.ndarray, X: np.ndarray, landmark_type: str) -> np.ndarray:
        return h_pairs(S, X, landmark_type, self.bs_position)

    def measurement_cov(self, landmark_type: str) -> np.ndarray:
        return self.noise.R(landmark_type)

    def wrap_state(self, delta: np.ndarray) -> np.ndarray:
        delta = np.array(delta, dtype=float, copy=True)
        delta[..., HEADING_INDEX] = wrap_angle(delta[..., HEADING_INDEX])
        return delta

    def wrap_meas(self, delta: np.ndarray) -> np.ndarray:
        delta = np.array(delta, dtype=float, copy=True)
        delta[..., MEAS_ANGLE_MASK] = wrap_angle(delta[..., MEAS_ANGLE_MASK])
        return delta

    # -- births ------------------------------------------------------------
    def birth_points(
        self, S: np.ndarray, Z: np.ndarray, landmark_type: str
    ) -> tuple[np.ndarray, np.ndarray]:
        if landmark_type == VA:
            pts = birth_points_va(S, Z)
            return pts, np.ones(pts.shape[:2], dtype=bool)
        if landmark_type == SP:
            return birth_points_sp(S, Z, self.bs_position)
        raise ConfigurationError(f"no birth geometry for type {landmark_type!r}")

    # -- detection / clutter -------------------------------------------------
    def detectability(self, s: np.ndarray, x: np.ndarray, landmark_type: str) -> float:
        visible = self.detection.in_fov(np.asarray(s)[:3], x, landmark_type)
        return self.detection.p_detect if visible else 0.0

    @property
    def gate_threshold(self) -> float:
        return self.detection.gate_threshold

    def clutter_log_intensity(self, z: np.ndarray) -> float:
        if self.clutter_mean <= 0.0:
            return -np.inf
        return math.log(self.clutter_mean) + self.measurement_region.log_pdf(z)

    @property
    def clutter_total(self) -> float:
        return self.clutter_mean
