"""Synthetic two-metric environment with hourly seasonality and delayed feedback.

The environment models two per-user metrics over a two-dimensional
configuration box [0, 1]^2.  Each metric's hourly mean is a smooth
configuration effect (a random sum of radial bumps, min-max normalized to
[0, 1]) riding on a random positive daily pattern with period 24:

    mu_k(theta, t) = (1 + 0.1 * delta_k(theta)) * W_k(t)

The two daily patterns are built to trade off against each other (their
correlation over one period is at most -0.5), so raw readings of the two
metrics move in opposition hour by hour while the configuration effect
stays put.  Per-user readings are Gaussian around the hourly mean.  Feedback
for a scheduled round is packaged per candidate and arrives ``fixed_delay``
rounds later plus a random nonnegative integer extra delay, drawn once per
batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .deltastats import GroupReading
from .problem import gain as relative_gain
from .scheduler import InboundBatch, RoundPlan

CONTROL_ID = 0
PERIOD = 24
LIFT_SCALE = 0.1
PATTERN_FLOOR = 0.1
N_BUMPS = 8
N_COUNTER_BUMPS = 4
BUMP_WIDTH_RANGE = (0.12, 0.28)
BUMP_CENTER_RANGE = (-0.15, 1.15)
TRADEOFF_RANGE = (1.5, 2.2)
OWN_AMP_RANGE = (0.3, 0.6)
PEAK_WIDTH_RANGE = (0.05, 0.08)
PEAK_AMP_RANGE = (1.2, 1.8)
PEAK_JITTER = 0.02
W1_AMP_RANGES = ((0.35, 0.5), (0.15, 0.35), (0.0, 0.2))
BASE_TYPICALITY_BAND = 0.01
MAX_LANDSCAPE_TRIES = 64
NORM_GRID_NODES = 201
BOX = ((0.0, 1.0), (0.0, 1.0))
METRICS = ("x1", "x2")

DEFAULT_WEIGHTS = (0.296, 1.165, 0.149, 0.703)
DEFAULT_THRESHOLD = 0.6036
DEFAULT_SIGMA = 0.6
DEFAULT_USERS = 1_000_000
DEFAULT_DRAWS_PER_STEP = 50
DEFAULT_FIXED_DELAY = 3
DEFAULT_XI_MEAN = 0.0
DEFAULT_XI_SD = 1.0
DEFAULT_BASE_THETA = (0.011, 0.985)

ENV_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RadialBumpField:
    """Signed sum of Gaussian bumps, affinely rescaled and clipped into [0, 1].

    Per-bump signed amplitudes let one metric's field subtract another's
    bumps, producing the strong trade-off between the two configuration
    effects; ``amps=None`` means unit weight on every bump.
    """

    centers: tuple[tuple[float, float], ...]
    widths: tuple[float, ...]
    lo: float
    span: float
    amps: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "centers", tuple(tuple(float(x) for x in c) for c in self.centers)
        )
        object.__setattr__(self, "widths", tuple(float(w) for w in self.widths))
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "span", float(self.span))
        amps = self.amps
        if amps is None:
            amps = tuple(1.0 for _ in self.centers)
        object.__setattr__(self, "amps", tuple(float(a) for a in amps))
        if len(self.centers) != len(self.widths):
            raise ValueError("one width per bump center")
        if len(self.amps) != len(self.centers):
            raise ValueError("one amplitude per bump center")
        if any(w <= 0 for w in self.widths):
            raise ValueError("bump widths must be positive")
        if self.span <= 0:
            raise ValueError("normalization span must be positive")

    def raw(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float)
        if not self.centers:
            return np.zeros(thetas.shape[:-1])
        centers = np.asarray(self.centers)                      # (b, 2)
        widths = np.asarray(self.widths)                        # (b,)
        amps = np.asarray(self.amps)                            # (b,)
        diff = thetas[..., None, :] - centers                   # (..., b, 2)
        sq = np.sum(diff * diff, axis=-1)                       # (..., b)
        return np.sum(amps * np.exp(-sq / (2.0 * widths**2)), axis=-1)

    def __call__(self, thetas: np.ndarray) -> np.ndarray:
        return np.clip((self.raw(thetas) - self.lo) / self.span, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "centers": [list(c) for c in self.centers],
            "widths": list(self.widths),
            "amps": list(self.amps),
            "lo": self.lo,
            "span": self.span,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadialBumpField":
        return cls(
            centers=tuple(tuple(c) for c in d["centers"]),
            widths=tuple(d["widths"]),
            lo=d["lo"],
            span=d["span"],
            amps=tuple(d["amps"]) if d.get("amps") is not None else None,
        )


@dataclass(frozen=True)
class PatternCoeffs:
    """Fourier coefficients of the first daily pattern (unit mean term)."""

    amplitudes: tuple[float, ...]
    phases: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"amplitudes": list(self.amplitudes), "phases": list(self.phases)}

    @classmethod
    def from_dict(cls, d: dict) -> "PatternCoeffs":
        return cls(amplitudes=tuple(d["amplitudes"]), phases=tuple(d["phases"]))


@dataclass(frozen=True)
class CounterCoeffs:
    """Perturbation harmonic of the second (mirrored) daily pattern."""

    amplitude: float
    phase: float
    harmonic: int

    def to_dict(self) -> dict:
        return {
            "amplitude": self.amplitude,
            "phase": self.phase,
            "harmonic": self.harmonic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CounterCoeffs":
        return cls(
            amplitude=float(d["amplitude"]),
            phase=float(d["phase"]),
            harmonic=int(d["harmonic"]),
        )


def _realize_w1(coeffs: PatternCoeffs) -> np.ndarray:
    t = np.arange(PERIOD)
    vals = np.ones(PERIOD)
    for j, (a, p) in enumerate(zip(coeffs.amplitudes, coeffs.phases), start=1):
        vals = vals + a * np.cos(2.0 * np.pi * j * t / PERIOD + p)
    return np.maximum(vals, PATTERN_FLOOR)


def _realize_w2(w1_values: np.ndarray, coeffs: CounterCoeffs) -> np.ndarray:
    t = np.arange(PERIOD)
    raw = (
        2.0 * float(np.mean(w1_values))
        - w1_values
        + coeffs.amplitude * np.cos(2.0 * np.pi * coeffs.harmonic * t / PERIOD + coeffs.phase)
    )
    return np.maximum(raw, PATTERN_FLOOR)


@dataclass(frozen=True)
class EnvSpec:
    """Complete generated landscape plus the sampling constants."""

    seed: int
    delta1: RadialBumpField
    delta2: RadialBumpField
    w1_coeffs: PatternCoeffs
    w2_coeffs: CounterCoeffs
    sigma: float = DEFAULT_SIGMA
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS
    threshold: float = DEFAULT_THRESHOLD
    users: int = DEFAULT_USERS
    draws_per_step: int = DEFAULT_DRAWS_PER_STEP
    fixed_delay: int = DEFAULT_FIXED_DELAY
    xi_mean: float = DEFAULT_XI_MEAN
    xi_sd: float = DEFAULT_XI_SD
    base_theta: tuple[float, float] = DEFAULT_BASE_THETA
    metrics: tuple[str, str] = METRICS

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "base_theta", tuple(float(x) for x in self.base_theta))
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if len(self.weights) != 4:
            raise ValueError("four mixing weights are required")
        if self.users < 1:
            raise ValueError("user population must be positive")
        if self.draws_per_step < 2:
            raise ValueError("at least two draws per step are needed for a variance")
        if self.fixed_delay < 0:
            raise ValueError("fixed delay must be nonnegative")
        if self.xi_sd < 0:
            raise ValueError("extra-delay spread must be nonnegative")
        for x, (lo, hi) in zip(self.base_theta, BOX):
            if not lo <= x <= hi:
                raise ValueError("base configuration must lie in the box")

    def to_dict(self) -> dict:
        return {
            "format_version": ENV_FORMAT_VERSION,
            "seed": self.seed,
            "delta1": self.delta1.to_dict(),
            "delta2": self.delta2.to_dict(),
            "w1_coeffs": self.w1_coeffs.to_dict(),
            "w2_coeffs": self.w2_coeffs.to_dict(),
            "sigma": self.sigma,
            "weights": list(self.weights),
            "threshold": self.threshold,
            "users": self.users,
            "draws_per_step": self.draws_per_step,
            "fixed_delay": self.fixed_delay,
            "xi_mean": self.xi_mean,
            "xi_sd": self.xi_sd,
            "base_theta": list(self.base_theta),
            "metrics": list(self.metrics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        if d.get("format_version") != ENV_FORMAT_VERSION:
            raise ValueError(f"unsupported snapshot version {d.get('format_version')!r}")
        return cls(
            seed=int(d["seed"]),
            delta1=RadialBumpField.from_dict(d["delta1"]),
            delta2=RadialBumpField.from_dict(d["delta2"]),
            w1_coeffs=PatternCoeffs.from_dict(d["w1_coeffs"]),
            w2_coeffs=CounterCoeffs.from_dict(d["w2_coeffs"]),
            sigma=float(d["sigma"]),
            weights=tuple(d["weights"]),
            threshold=float(d["threshold"]),
            users=int(d["users"]),
            draws_per_step=int(d["draws_per_step"]),
            fixed_delay=int(d["fixed_delay"]),
            xi_mean=float(d["xi_mean"]),
            xi_sd=float(d["xi_sd"]),
            base_theta=tuple(d["base_theta"]),
            metrics=tuple(d["metrics"]),
        )


def _norm_grid() -> np.ndarray:
    axis = np.linspace(0.0, 1.0, NORM_GRID_NODES)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def _make_field(
    gen: np.random.Generator,
    counter_to: RadialBumpField | None = None,
    counter_weight: float = 0.0,
) -> RadialBumpField:
    # Broad centers may fall slightly outside the box so its corners and
    # edges get the same bump coverage as the interior.  The last bump is
    # a narrow summit planted near the top of the rolling structure: it
    # rewards fine localization beyond merely finding the right region.
    n_own = (N_BUMPS - 1) if counter_to is None else (N_BUMPS - 1 - N_COUNTER_BUMPS)
    centers = [tuple(c) for c in gen.uniform(*BUMP_CENTER_RANGE, size=(n_own, 2))]
    widths = list(gen.uniform(*BUMP_WIDTH_RANGE, size=n_own))
    if counter_to is None:
        amps = [1.0] * n_own
    else:
        # Some of this field's bumps are the other metric's bumps negated
        # (and scaled up), so the two configuration effects trade off
        # against each other over the box.
        amps = list(gen.uniform(*OWN_AMP_RANGE, size=n_own))
        centers += list(counter_to.centers[:N_COUNTER_BUMPS])
        widths += list(counter_to.widths[:N_COUNTER_BUMPS])
        amps += [-counter_weight * a for a in counter_to.amps[:N_COUNTER_BUMPS]]
    grid = _norm_grid()
    rolling = RadialBumpField(
        centers=tuple(centers),
        widths=tuple(widths),
        amps=tuple(amps),
        lo=0.0,
        span=1.0,
    )
    top = grid[int(np.argmax(rolling.raw(grid)))]
    jitter = gen.uniform(-PEAK_JITTER, PEAK_JITTER, size=2)
    centers.append(tuple(np.clip(top + jitter, 0.0, 1.0)))
    widths.append(float(gen.uniform(*PEAK_WIDTH_RANGE)))
    amps.append(float(gen.uniform(*PEAK_AMP_RANGE)))
    probe = RadialBumpField(
        centers=tuple(centers),
        widths=tuple(widths),
        amps=tuple(amps),
        lo=0.0,
        span=1.0,
    )
    raw = probe.raw(grid)
    lo = float(raw.min())
    span = float(raw.max()) - lo
    if span <= 0.0:
        span = 1.0
    return replace(probe, lo=lo, span=span)


def _base_typicality(
    delta1: RadialBumpField, delta2: RadialBumpField
) -> float:
    """Gap between the box-average objective and the base's, as a gain.

    Uses the stock weights and base configuration (landscape generation
    never depends on overrides) and treats the two daily patterns as
    equal-scale, which holds up to the small flooring lift.
    """
    w1, w2 = DEFAULT_WEIGHTS[0], DEFAULT_WEIGHTS[1]
    grid = _norm_grid()
    base = np.asarray(DEFAULT_BASE_THETA)

    def objective(thetas: np.ndarray) -> np.ndarray:
        return w1 * (1.0 + LIFT_SCALE * delta1(thetas)) + w2 * (
            1.0 + LIFT_SCALE * delta2(thetas)
        )

    return float(np.mean(objective(grid)) / objective(base[None, :])[0] - 1.0)


def _draw_landscape(
    gen: np.random.Generator,
) -> tuple[RadialBumpField, RadialBumpField]:
    """Draw the two configuration effects, keeping the base typical.

    The base configuration stands in for a production setting, so it
    should start at an ordinary objective level, neither a hole nor a
    peak of the drawn landscape.  Draws where the box-average objective
    sits more than ``BASE_TYPICALITY_BAND`` (in gain terms) away from the
    base's are redrawn; past ``MAX_LANDSCAPE_TRIES`` the most typical
    draw wins.  The loop consumes generator draws deterministically.
    """
    best: tuple[RadialBumpField, RadialBumpField] | None = None
    best_gap = np.inf
    for _ in range(MAX_LANDSCAPE_TRIES):
        delta1 = _make_field(gen)
        tradeoff = float(gen.uniform(*TRADEOFF_RANGE))
        delta2 = _make_field(gen, counter_to=delta1, counter_weight=tradeoff)
        gap = abs(_base_typicality(delta1, delta2))
        if gap < best_gap:
            best, best_gap = (delta1, delta2), gap
        if gap <= BASE_TYPICALITY_BAND:
            break
    assert best is not None
    return best


class SimEnv:
    """A generated landscape plus the noise stream that samples it."""

    def __init__(self, spec: EnvSpec, rng: np.random.Generator | None = None) -> None:
        self.spec = spec
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
        self._rng = rng
        self._w1 = _realize_w1(spec.w1_coeffs)
        self._w2 = _realize_w2(self._w1, spec.w2_coeffs)

    @classmethod
    def build(cls, seed: int, **overrides) -> "SimEnv":
        """Generate the landscape from ``seed``; overrides never touch generation.

        Overridable fields: sigma, weights, threshold, users, draws_per_step,
        fixed_delay, xi_mean, xi_sd, base_theta.  Two builds with the same
        seed share an identical landscape regardless of overrides, so runs
        with different delays or noise levels stay paired.
        """
        gen = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0,)))
        delta1, delta2 = _draw_landscape(gen)
        w1 = PatternCoeffs(
            amplitudes=tuple(
                float(gen.uniform(lo, hi)) for lo, hi in W1_AMP_RANGES
            ),
            phases=tuple(gen.uniform(0.0, 2.0 * np.pi, size=3)),
        )
        w2 = CounterCoeffs(
            amplitude=float(gen.uniform(0.0, 0.1)),
            phase=float(gen.uniform(0.0, 2.0 * np.pi)),
            harmonic=int(gen.integers(1, 4)),
        )
        allowed = {
            "sigma", "weights", "threshold", "users", "draws_per_step",
            "fixed_delay", "xi_mean", "xi_sd", "base_theta",
        }
        unknown = set(overrides) - allowed
        if unknown:
            raise TypeError(f"unknown environment overrides: {sorted(unknown)}")
        spec = EnvSpec(
            seed=int(seed),
            delta1=delta1,
            delta2=delta2,
            w1_coeffs=w1,
            w2_coeffs=w2,
            **overrides,
        )
        return cls(spec)

    # Landscape views

    @property
    def w1_values(self) -> np.ndarray:
        return self._w1.copy()

    @property
    def w2_values(self) -> np.ndarray:
        return self._w2.copy()

    def delta(self, thetas: np.ndarray) -> np.ndarray:
        """Configuration effects, shape ``(..., 2)`` with values in [0, 1]."""
        thetas = np.asarray(thetas, dtype=float)
        return np.stack(
            [self.spec.delta1(thetas), self.spec.delta2(thetas)], axis=-1
        )

    def hourly_means(self, theta: Sequence[float], t: int) -> np.ndarray:
        """Per-metric means ``(1 + 0.1 delta_k) * W_k(t)`` at hour ``t``."""
        d = self.delta(np.asarray(theta, dtype=float))
        w = np.array([self._w1[t % PERIOD], self._w2[t % PERIOD]])
        return (1.0 + LIFT_SCALE * d) * w

    def period_means(self, thetas: np.ndarray) -> np.ndarray:
        """Per-metric means averaged over one full period, shape ``(..., 2)``."""
        d = self.delta(thetas)
        wbar = np.array([float(np.mean(self._w1)), float(np.mean(self._w2))])
        return (1.0 + LIFT_SCALE * d) * wbar

    def base_means(self) -> np.ndarray:
        return self.period_means(np.asarray(self.spec.base_theta))

    # Ground truth

    def true_f_g(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Objective and guardrail values from exact period-averaged means."""
        e = self.period_means(thetas)
        w1, w2, w3, w4 = self.spec.weights
        f = w1 * e[..., 0] + w2 * e[..., 1]
        g = w3 * e[..., 0] + w4 * e[..., 1]
        return f, g

    def true_gain_violation(self, theta: Sequence[float]) -> tuple[float, float]:
        """Ground-truth relative gain over the base and guardrail shortfall."""
        f, g = self.true_f_g(np.asarray(theta, dtype=float))
        f_base, _ = self.true_f_g(np.asarray(self.spec.base_theta))
        return (
            relative_gain(float(f), float(f_base)),
            max(self.spec.threshold - float(g), 0.0),
        )

    def grid_scan(self, nodes: int = 200) -> tuple[np.ndarray, float, float]:
        """Feasible maximizer of the true objective on an n-by-n grid.

        Returns ``(theta, gain, violation)``.  Falls back to the largest
        guardrail value if no grid point is feasible.
        """
        axis = np.linspace(0.0, 1.0, nodes)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        thetas = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        f, g = self.true_f_g(thetas)
        feasible = g >= self.spec.threshold
        if np.any(feasible):
            idx = int(np.argmax(np.where(feasible, f, -np.inf)))
        else:
            idx = int(np.argmax(g))
        theta = thetas[idx]
        gain_v, viol = self.true_gain_violation(theta)
        return theta, gain_v, viol

    # Sampling

    def _group_reading(
        self, candidate_id: int, metric_index: int, round_no: int,
        mu: float, group_size: int,
    ) -> GroupReading:
        # Draws are mu + sigma*z with standard-normal z, so the sample
        # statistics reduce to affine transforms of z's statistics; the
        # zero-noise limit then returns mu and 0 exactly.  The per-user
        # variance is estimated from the simulated draws, while the mean
        # is drawn at the full group's sampling scale sigma^2/group_size
        # so that reported precisions match how the mean actually moves.
        z = self._rng.standard_normal(self.spec.draws_per_step)
        mean_scale = np.sqrt(self.spec.draws_per_step / group_size)
        return GroupReading(
            candidate_id=candidate_id,
            metric=self.spec.metrics[metric_index],
            round=round_no,
            sample_mean=float(mu + self.spec.sigma * mean_scale * np.mean(z)),
            sample_var=float(self.spec.sigma**2 * np.var(z, ddof=1)),
            group_size=group_size,
        )

    def step(
        self,
        plan: RoundPlan,
        t: int,
        thetas: "dict[int, Sequence[float]]",
    ) -> list[InboundBatch]:
        """Expose the planned groups for hour ``t`` and emit delayed batches.

        ``thetas`` maps every assigned candidate id to its vector (the plan
        itself carries only ids).  One batch is produced per assigned
        candidate; every batch shares the hour's control readings and draws
        its own extra delay.
        """
        t = int(t)
        if not plan.assignments:
            return []
        ctrl_size = max(int(round(plan.control_fraction * self.spec.users)), 1)
        base = np.asarray(self.spec.base_theta)
        base_mu = self.hourly_means(base, t)
        ctrl_readings = [
            self._group_reading(CONTROL_ID, k, t, float(base_mu[k]), ctrl_size)
            for k in range(len(self.spec.metrics))
        ]
        batches = []
        for cid, frac in plan.assignments:
            size = max(int(round(frac * self.spec.users)), 1)
            mu = self.hourly_means(np.asarray(thetas[cid], dtype=float), t)
            readings = tuple(
                (
                    self._group_reading(cid, k, t, float(mu[k]), size),
                    ctrl_readings[k],
                )
                for k in range(len(self.spec.metrics))
            )
            xi = int(round(abs(self._rng.normal(self.spec.xi_mean, self.spec.xi_sd))))
            batches.append(
                InboundBatch(
                    origin_round=t,
                    arrival_round=t + self.spec.fixed_delay + xi,
                    readings=readings,
                )
            )
        return batches

    # Persistence

    @property
    def rng_state(self) -> dict:
        return self._rng.bit_generator.state

    @rng_state.setter
    def rng_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state

    def save(self, path: str) -> None:
        data = self.spec.to_dict()
        data["rng_state"] = self.rng_state
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "SimEnv":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        env = cls(EnvSpec.from_dict(data))
        if "rng_state" in data:
            env.rng_state = data["rng_state"]
        return env
