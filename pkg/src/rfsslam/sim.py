"""Ground-truth scenario generation and scenario-bundle files.

The default scenario is a compact vehicular layout: one BS, four walls
whose mirror images of the BS form the VAs, four SPs, and a vehicle
driving one counterclockwise lap on a circular road around the BS.  Every
dimension is configurable; all randomness flows from the scenario seed.

Scenario bundles are JSON-lines text files: one header record with the
full configuration, the landmark list and the true trajectory, then one
record per time step with the measurements (and their ground-truth origin
labels, which exist only for evaluation; the filters never see them).
Field-by-field format documentation lives in the README.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BS,
    SP,
    VA,
    DetectionConfig,
    Landmark,
    Measurement,
    MmwaveModel,
    NoiseModel,
    VehicleState,
    Wall,
    measurement_fn,
    mirror_bs,
    transition_vector,
    wrap_angle,
)
from .rfs import (
    ConfigurationError,
    GaussianDensity,
    PPPComponent,
    PPPIntensity,
    UniformBox,
    psd_sqrt,
)


@dataclass
class ScenarioConfig:
    """Full description of a simulated run; defaults give the desk scenario."""

    # landmark layout
    bs_position_m: tuple = (0.0, 0.0, 10.0)
    wall_offsets_m: tuple = (20.0, -20.0, 20.0, -20.0)  # x+, x-, y+, y-
    sp_positions_m: tuple = (
        (14.0, 14.0, 3.0),
        (-14.0, 14.0, 3.0),
        (-14.0, -14.0, 3.0),
        (14.0, -14.0, 3.0),
    )

    # trajectory (one lap by default: turn_rate * steps * dt = 2 pi)
    road_radius_m: float = 15.0
    initial_heading_rad: float = math.pi / 2.0
    initial_bias_m: float = 2.0
    steps: int = 40
    dt_s: float = 1.0
    truth_process_noise: bool = False

    # noise
    toa_std_m: float = 0.15
    angle_std_rad: float = 0.012
    sp_noise_std_scale: float = 2.0
    process_noise_std: tuple = (0.3, 0.3, 0.02, 0.015, 0.1, 0.002, 0.15)

    # detection / clutter
    p_detect: float = 0.95
    gate_probability: float = 0.99
    fov_range_va_m: float = math.inf
    fov_range_sp_m: float = 50.0
    clutter_mean: float = 1.0
    clutter_toa_max_m: float = 150.0

    # undetected-landmark intensity
    undetected_intensity_per_m3: float = 2.37e-6
    region_xy_halfwidth_m: float = 50.0
    region_z_max_m: float = 20.0

    # filter initialization
    initial_prior_std: tuple = (0.5, 0.5, 0.1, 0.02, 0.2, 0.005, 0.3)

    seed: int = 0

    def initial_state(self) -> VehicleState:
        speed = 2.0 * math.pi * self.road_radius_m / (self.steps * self.dt_s)
        rate = 2.0 * math.pi / (self.steps * self.dt_s)
        return VehicleState(
            np.array([self.road_radius_m, 0.0, 0.0]),
            self.initial_heading_rad,
            speed,
            rate,
            self.initial_bias_m,
        )

    def walls(self) -> list[Wall]:
        xp, xm, yp, ym = self.wall_offsets_m
        return [
            Wall(np.array([1.0, 0.0, 0.0]), xp),
            Wall(np.array([-1.0, 0.0, 0.0]), -xm),
            Wall(np.array([0.0, 1.0, 0.0]), yp),
            Wall(np.array([0.0, -1.0, 0.0]), -ym),
        ]

    def landmark_region(self) -> UniformBox:
        w = self.region_xy_halfwidth_m
        return UniformBox(
            np.array([-w, -w, 0.0]), np.array([w, w, self.region_z_max_m])
        )

    def measurement_region(self) -> UniformBox:
        return UniformBox(
            np.array([0.0, -math.pi, -math.pi / 2.0, -math.pi, -math.pi / 2.0]),
            np.array(
                [
                    self.clutter_toa_max_m,
                    math.pi,
                    math.pi / 2.0,
                    math.pi,
                    math.pi / 2.0,
                ]
            ),
        )

    def measurement_cov(self, landmark_type: str) -> np.ndarray:
        scale = self.sp_noise_std_scale if landmark_type == SP else 1.0
        stds = np.array(
            [self.toa_std_m] + [self.angle_std_rad] * 4
        ) * scale
        return np.diag(stds**2)

    def process_cov(self) -> np.ndarray:
        return np.diag(np.asarray(self.process_noise_std, dtype=float) ** 2)


def build_model(cfg: ScenarioConfig) -> MmwaveModel:
    noise = NoiseModel(
        {m: cfg.measurement_cov(m) for m in (BS, VA, SP)}, cfg.process_cov()
    )
    detection = DetectionConfig(
        p_detect=cfg.p_detect,
        gate_probability=cfg.gate_probability,
        fov_range_m={BS: math.inf, VA: cfg.fov_range_va_m, SP: cfg.fov_range_sp_m},
    )
    return MmwaveModel(
        bs_position=np.asarray(cfg.bs_position_m, dtype=float),
        noise=noise,
        detection=detection,
        landmark_region=cfg.landmark_region(),
        measurement_region=cfg.measurement_region(),
        clutter_mean=cfg.clutter_mean,
        dt=cfg.dt_s,
    )


def build_undetected_intensity(cfg: ScenarioConfig) -> PPPIntensity:
    region = cfg.landmark_region()
    weight = cfg.undetected_intensity_per_m3 * region.volume
    return PPPIntensity(
        (PPPComponent(VA, weight, region), PPPComponent(SP, weight, region))
    )


def true_landmarks(cfg: ScenarioConfig) -> list[Landmark]:
    bs = np.asarray(cfg.bs_position_m, dtype=float)
    landmarks = [Landmark(bs, BS)]
    for wall in cfg.walls():
        landmarks.append(Landmark(mirror_bs(bs, wall), VA))
    for sp in cfg.sp_positions_m:
        landmarks.append(Landmark(np.asarray(sp, dtype=float), SP))
    return landmarks


@dataclass(frozen=True)
class MeasurementFrame:
    """Measurements of one time step.  ``origins`` label each entry with its
    ground-truth source for evaluation only ((type, landmark index) or
    ("clutter", -1)); filters must only consume ``measurements``."""

    k: int
    measurements: tuple[Measurement, ...]
    origins: tuple[tuple[str, int], ...]

    def vectors(self) -> list[np.ndarray]:
        return [m.as_vector() for m in self.measurements]


@dataclass(frozen=True)
class Truth:
    states: tuple[VehicleState, ...]  # index 0 is the initial state
    landmarks: tuple[Landmark, ...]

    def state_matrix(self) -> np.ndarray:
        return np.array([s.as_vector() for s in self.states])


def generate_truth(cfg: ScenarioConfig, rng: np.random.Generator | None = None) -> Truth:
    """Roll the vehicle along the road; process noise only when configured."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state = cfg.initial_state()
    states = [state]
    chol = psd_sqrt(cfg.process_cov())
    for _ in range(cfg.steps):
        vec = transition_vector(state.as_vector(), cfg.dt_s)
        if cfg.truth_process_noise:
            vec = vec + chol @ rng.standard_normal(7)
            vec[3] = wrap_angle(vec[3])
        state = VehicleState.from_vector(vec)
        states.append(state)
    return Truth(tuple(states), tuple(true_landmarks(cfg)))


def generate_measurements(
    truth: Truth, k: int, cfg: ScenarioConfig, rng: np.random.Generator
) -> MeasurementFrame:
    """Detections plus Poisson clutter for step k (1-based)."""
    if not (1 <= k <= len(truth.states) - 1):
        raise ConfigurationError(f"step {k} outside 1..{len(truth.states) - 1}")
    model_detection = DetectionConfig(
        p_detect=cfg.p_detect,
        gate_probability=cfg.gate_probability,
        fov_range_m={BS: math.inf, VA: cfg.fov_range_va_m, SP: cfg.fov_range_sp_m},
    )
    state = truth.states[k]
    bs = np.asarray(cfg.bs_position_m, dtype=float)
    entries = []
    for idx, lm in enumerate(truth.landmarks):
        if not model_detection.in_fov(state.position, lm.position, lm.landmark_type):
            continue
        if rng.random() >= cfg.p_detect:
            continue
        z = measurement_fn(state, lm, bs).as_vector()
        noise = psd_sqrt(cfg.measurement_cov(lm.landmark_type)) @ rng.standard_normal(5)
        z = z + noise
        z[1:] = wrap_angle(z[1:])
        entries.append((Measurement.from_vector(z), (lm.landmark_type, idx)))
    n_clutter = rng.poisson(cfg.clutter_mean)
    region = cfg.measurement_region()
    for z in region.sample(rng, n_clutter):
        entries.append((Measurement.from_vector(z), ("clutter", -1)))
    order = rng.permutation(len(entries))
    return MeasurementFrame(
        k,
        tuple(entries[i][0] for i in order),
        tuple(entries[i][1] for i in order),
    )


def simulate(cfg: ScenarioConfig) -> tuple[Truth, list[MeasurementFrame]]:
    """Truth plus one measurement frame per step, all from the config seed."""
    rng = np.random.default_rng(cfg.seed)
    truth = generate_truth(cfg, rng)
    frames = [generate_measurements(truth, k, cfg, rng) for k in range(1, cfg.steps + 1)]
    return truth, frames


# ---------------------------------------------------------------------------
# bundle files
# ---------------------------------------------------------------------------


def save_bundle(path, cfg: ScenarioConfig, truth: Truth, frames: list[MeasurementFrame]):
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "kind": "scenario",
            "config": dataclasses.asdict(cfg),
            "landmarks": [
                {"type": lm.landmark_type, "position_m": lm.position.tolist()}
                for lm in truth.landmarks
            ],
            "trajectory": truth.state_matrix().tolist(),
        }
        fh.write(json.dumps(header) + "\n")
        for frame in frames:
            fh.write(
                json.dumps(
                    {
                        "kind": "frame",
                        "k": frame.k,
                        "measurements": [m.as_vector().tolist() for m in frame.measurements],
                        "origins": [list(o) for o in frame.origins],
                    }
                )
                + "\n"
            )


def _config_from_dict(raw: dict) -> ScenarioConfig:
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
    cleaned = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        cleaned[key] = value
    return ScenarioConfig(**cleaned)


def load_bundle(path) -> tuple[ScenarioConfig, Truth, list[MeasurementFrame]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "scenario":
            raise ConfigurationError("bundle does not start with a scenario header")
        cfg = _config_from_dict(header["config"])
        landmarks = tuple(
            Landmark(np.array(lm["position_m"]), lm["type"]) for lm in header["landmarks"]
        )
        states = tuple(
            VehicleState.from_vector(np.array(row)) for row in header["trajectory"]
        )
        frames = []
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") != "frame":
                raise ConfigurationError("unexpected record kind in bundle")
            frames.append(
                MeasurementFrame(
                    rec["k"],
                    tuple(Measurement.from_vector(np.array(z)) for z in rec["measurements"]),
                    tuple((o[0], int(o[1])) for o in rec["origins"]),
                )
            )
    return cfg, Truth(states, landmarks), frames


def load_scenario_config(path) -> ScenarioConfig:
    """Read a scenario config from a JSON file (a bare config object)."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return _config_from_dict(raw)
