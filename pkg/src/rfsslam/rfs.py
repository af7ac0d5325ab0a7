"""Random-finite-set density primitives over typed landmarks.

Building blocks for the SLAM filters: Gaussian and uniform-box spatial
densities, Poisson intensities for undetected landmarks, Bernoulli
components for potentially detected landmarks, global association
hypotheses, and the PMBM/PMB map containers.  Weights and density values
are carried in log domain throughout so that products of many small
factors become sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

LOG_ZERO = -np.inf

# Relative tolerance for the symmetry check on covariance matrices.
_SYM_RTOL = 1e-9


class DegeneratePosteriorError(ValueError):
    """All hypothesis weights vanished; the posterior is undefined."""


class ConfigurationError(ValueError):
    """A density or region was constructed with invalid parameters."""


def _as_vector(x) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise ConfigurationError(f"expected a vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class GaussianDensity:
    """Multivariate normal with a symmetrized covariance.

    The constructor rejects matrices that are asymmetric beyond a small
    relative tolerance and then stores the symmetric part, so downstream
    Cholesky factorizations never see accumulated asymmetry.
    """

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError(
                f"covariance shape {cov.shape} does not match mean dim {mean.size}"
            )
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ConfigurationError("non-finite Gaussian parameters")
        scale = max(np.abs(cov).max(), 1.0)
        if np.abs(cov - cov.T).max() > _SYM_RTOL * scale:
            raise ConfigurationError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    def validate(self) -> None:
        """Check positive semi-definiteness up to a tiny negative slack."""
        eigvals = np.linalg.eigvalsh(self.covariance)
        floor = -1e-12 * max(np.trace(self.covariance), 1e-300)
        if eigvals.min() < floor:
            raise ConfigurationError(
                f"covariance has eigenvalue {eigvals.min():.3e} below {floor:.3e}"
            )

    def log_pdf(self, x) -> np.ndarray | float:
        """Log density at ``x`` (a point or an array of row vectors)."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        diff = pts - self.mean
        chol = np.linalg.cholesky(self.covariance)
        sol = np.linalg.solve(chol, diff.T)
        maha = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out = -0.5 * (maha + logdet + self.dim * math.log(2.0 * math.pi))
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        root = psd_sqrt(self.covariance)
        return self.mean + rng.standard_normal((n, self.dim)) @ root.T


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular square root of a PSD matrix.

    Plain Cholesky when possible; an exactly-zero matrix maps to zero.
    A singular but nonzero matrix gets one shot of trace-scaled jitter
    before the failure is raised.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        if np.abs(cov).max() < 1e-300:
            return np.zeros_like(cov)
        jitter = 1e-9 * np.trace(cov)
        if jitter <= 0:
            raise
        return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))


@dataclass(frozen=True)
class UniformBox:
    """Normalized uniform density over an axis-aligned box."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lo)
        hi = _as_vector(self.hi)
        if lo.size != hi.size or np.any(hi <= lo):
            raise ConfigurationError("uniform region must have positive volume")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, x) -> np.ndarray | bool:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        return bool(inside[0]) if np.asarray(x).ndim == 1 else inside

    def log_pdf(self, x) -> np.ndarray | float:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        inside = np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        out = np.where(inside, -math.log(self.volume), LOG_ZERO)
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


@dataclass(frozen=True)
class PPPComponent:
    """One term of a Poisson intensity: expected count times a spatial pdf."""

    landmark_type: str
    weight: float  # expected number of landmarks of this type in the region
    density: UniformBox | GaussianDensity

    def __post_init__(self):
        if not (self.weight >= 0.0):
            raise ConfigurationError("PPP component weight must be nonnegative")


@dataclass(frozen=True)
class PPPIntensity:
    """Poisson intensity over (position, type), sum of weighted components."""

    components: tuple[PPPComponent, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def total_weight(self) -> float:
        return float(sum(c.weight for c in self.components))

    def of_type(self, landmark_type: str) -> tuple[PPPComponent, ...]:
        return tuple(c for c in self.components if c.landmark_type == landmark_type)

    def log_intensity(self, x, landmark_type: str) -> float:
        terms = [
            math.log(c.weight) + c.density.log_pdf(x)
            for c in self.of_type(landmark_type)
            if c.weight > 0.0
        ]
        return float(logsumexp(terms)) if terms else LOG_ZERO

    def thinned(self, survival: float) -> "PPPIntensity":
        """Scale every component weight by a survival probability."""
        return PPPIntensity(
            tuple(
                PPPComponent(c.landmark_type, c.weight * survival, c.density)
                for c in self.components
            )
        )


def ppp_set_log_density(intensity: PPPIntensity, landmarks) -> float:
    """Log density of a Poisson RFS at a finite set of (position, type)."""
    total = -intensity.total_weight
    for x, m in landmarks:
        total += intensity.log_intensity(x, m)
    return total


def ppp_set_density(intensity: PPPIntensity, landmarks) -> float:
    return math.exp(ppp_set_log_density(intensity, landmarks))


@dataclass(frozen=True)
class BernoulliComponent:
    """Potentially detected landmark: existence probability plus, per type,
    a weight and a Gaussian over position.

    ``per_type`` maps a landmark type to ``(weight, density)``; weights sum
    to one over the types and a zero-weight type may carry ``None`` for its
    density.  ``log_hypothesis_weight`` is the (log) weight of the local
    data-association hypothesis this component represents.
    """

    existence: float
    per_type: dict[str, tuple[float, GaussianDensity | None]]
    log_hypothesis_weight: float = 0.0

    def __post_init__(self):
        if not (-1e-9 <= self.existence <= 1.0 + 1e-9):
            raise ConfigurationError(f"existence {self.existence} outside [0, 1]")
        object.__setattr__(self, "existence", float(min(max(self.existence, 0.0), 1.0)))
        total = sum(w for w, _ in self.per_type.values())
        if self.existence > 0.0 and abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"type weights sum to {total}, expected 1")

    @property
    def types(self) -> tuple[str, ...]:
        return tuple(self.per_type)

    def type_weight(self, m: str) -> float:
        return self.per_type.get(m, (0.0, None))[0]

    def density(self, m: str) -> GaussianDensity | None:
        return self.per_type.get(m, (0.0, None))[1]

    def argmax_type(self, order: tuple[str, ...] | None = None) -> str:
        """Most probable type; ties break toward the earlier type in ``order``."""
        keys = order if order is not None else tuple(self.per_type)
        return max(keys, key=lambda m: (self.type_weight(m), -keys.index(m)))

    def log_spatial_density(self, x, m: str) -> float:
        w = self.type_weight(m)
        d = self.density(m)
        if w <= 0.0 or d is None:
            return LOG_ZERO
        return math.log(w) + d.log_pdf(x)

    def validate(self) -> None:
        for w, d in self.per_type.values():
            if w < 0.0:
                raise ConfigurationError("negative type weight")
            if d is not None:
                d.validate()


def bernoulli_set_log_density(b: BernoulliComponent, landmarks) -> float:
    """Log Bernoulli set density: empty set, singleton, or impossible."""
    items = list(landmarks)
    if len(items) == 0:
        return math.log1p(-b.existence) if b.existence < 1.0 else LOG_ZERO
    if len(items) > 1:
        return LOG_ZERO
    if b.existence <= 0.0:
        return LOG_ZERO
    x, m = items[0]
    return math.log(b.existence) + b.log_spatial_density(x, m)


def bernoulli_set_density(b: BernoulliComponent, landmarks) -> float:
    return math.exp(bernoulli_set_log_density(b, landmarks))


@dataclass(frozen=True)
class GlobalHypothesis:
    """Joint association: one entry per landmark, 0 for a missed detection.

    Inside an association step the entries are measurement indices in
    ``1..J``; in a stored PMBM map they index each landmark's list of local
    hypotheses.  The weight is kept in log domain.
    """

    assignments: tuple[int, ...]
    log_weight: float

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(int(a) for a in self.assignments))

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)

    def validate_assignments(self) -> None:
        nonzero = [a for a in self.assignments if a != 0]
        if len(nonzero) != len(set(nonzero)):
            raise ConfigurationError("two landmarks share one measurement")


def normalize_global_hypotheses(
    hypotheses: list[GlobalHypothesis],
) -> tuple[list[GlobalHypothesis], float]:
    """Rescale weights to a pmf; returns the normalization constant too."""
    if not hypotheses:
        raise DegeneratePosteriorError("no hypotheses to normalize")
    log_total = logsumexp([h.log_weight for h in hypotheses])
    if not np.isfinite(log_total):
        raise DegeneratePosteriorError("all hypothesis weights are zero")
    normalized = [
        GlobalHypothesis(h.assignments, h.log_weight - log_total) for h in hypotheses
    ]
    return normalized, float(math.exp(log_total))


def moment_match_bernoulli(
    mixture: list[tuple[float, BernoulliComponent]],
) -> BernoulliComponent:
    """Collapse a probability-weighted Bernoulli mixture to one Bernoulli.

    The merged existence is the mixture mean of the existences, and the
    merged per-type Gaussian matches the first two moments of the
    existence-weighted mixture of that type.  A merged existence of zero
    marks the component as prunable.
    """
    probs = np.array([p for p, _ in mixture], dtype=float)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"mixture probabilities sum to {probs.sum()}")
    existence = float(sum(p * b.existence for p, b in mixture))

    types: list[str] = []
    for _, b in mixture:
        for m in b.per_type:
            if m not in types:
                types.append(m)

    if existence <= 0.0:
        return BernoulliComponent(0.0, {m: (0.0, None) for m in types})

    per_type: dict[str, tuple[float, GaussianDensity | None]] = {}
    for m in types:
        weights = []
        gaussians = []
        for p, b in mixture:
            w = p * b.existence * b.type_weight(m)
            if w > 0.0:
                weights.append(w)
                gaussians.append(b.density(m))
        mass = float(sum(weights))
        if mass <= 0.0:
            per_type[m] = (0.0, None)
            continue
        w = np.array(weights) / mass
        mean = sum(wj * g.mean for wj, g in zip(w, gaussians))
        cov = sum(
            wj * (g.covariance + np.outer(g.mean - mean, g.mean - mean))
            for wj, g in zip(w, gaussians)
        )
        per_type[m] = (mass / existence, GaussianDensity(mean, cov))

    total = sum(w for w, _ in per_type.values())
    per_type = {
        m: (w / total, d) for m, (w, d) in per_type.items()
    }
    return BernoulliComponent(existence, per_type)


@dataclass
class PMBDensity:
    """Poisson multi-Bernoulli map: one local hypothesis per landmark."""

    undetected: PPPIntensity
    bernoullis: list[BernoulliComponent]

    def validate(self) -> None:
        for b in self.bernoullis:
            b.validate()

    @property
    def num_landmarks(self) -> int:
        return len(self.bernoullis)


@dataclass
class PMBMDensity:
    """Poisson multi-Bernoulli mixture map.

    ``bernoullis[i]`` lists the local hypotheses of landmark ``i``; each
    global hypothesis picks one local hypothesis per landmark by index and
    carries a normalized log weight.
    """

    undetected: PPPIntensity
    bernoullis: list[list[BernoulliComponent]]
    hypotheses: list[GlobalHypothesis]

    @property
    def num_landmarks(self) -> int:
        return len(self.bernoullis)

    def map_hypothesis(self) -> GlobalHypothesis:
        return max(self.hypotheses, key=lambda h: h.log_weight)

    def as_pmb_view(self, hypothesis: GlobalHypothesis) -> PMBDensity:
        """The multi-Bernoulli selected by one global hypothesis."""
        return PMBDensity(
            self.undetected,
            [self.bernoullis[i][a] for i, a in enumerate(hypothesis.assignments)],
        )

    def validate(self) -> None:
        weights = np.array([h.weight for h in self.hypotheses])
        if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0.0):
            raise ConfigurationError("hypothesis weights are not a pmf")
        for h in self.hypotheses:
            if len(h.assignments) != self.num_landmarks:
                raise ConfigurationError("hypothesis length mismatch")
            for i, a in enumerate(h.assignments):
                if not (0 <= a < len(self.bernoullis[i])):
                    raise ConfigurationError(
                        f"hypothesis references missing local hypothesis {a} of landmark {i}"
                    )
        for hyps in self.bernoullis:
            for b in hyps:
                b.validate()
