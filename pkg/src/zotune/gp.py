"""Gaussian beliefs over candidates and GP interpolation between them.

Two layers share one vocabulary.  A ``CandidateBelief`` is the per-metric
Gaussian summary of a measured candidate, built directly from aggregated
lift statistics.  A ``GpSurrogate`` is a set of independent per-metric
Gaussian-process regressors fitted through those beliefs, used to predict a
belief at configurations that have never been measured.

Each metric's regressor uses a squared-exponential kernel on inputs
normalized to the unit box, a zero prior mean, per-dimension length scales
from the median pairwise-distance heuristic, signal variance from the
second moment of the targets about the (zero) prior mean, and per-point
observation noise equal to each belief's aggregated variance.  A small
diagonal jitter keeps the Cholesky factorization well posed; it escalates
by factors of ten on failure up to a hard cap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .problem import HyperParam

BASE_JITTER = 1e-8
MAX_JITTER = 1e-4
SIGNAL_VAR_FLOOR = 1e-8


class FitFailureError(RuntimeError):
    """Kernel factorization failed even at the maximum jitter."""


class RejectedInputError(ValueError):
    """A prediction was requested outside the fitted bounds box."""


@dataclass(frozen=True)
class CandidateBelief:
    """Independent per-metric Gaussian summary of one candidate's lifts."""

    candidate_id: int | None
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self) -> None:
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)
        if mu.shape != sigma2.shape or mu.ndim != 1:
            raise ValueError("mu and sigma2 must be 1-d arrays of equal length")
        if np.any(sigma2 < 0):
            raise ValueError("belief variances must be nonnegative")


def sample_delta(belief: CandidateBelief, rng: np.random.Generator) -> np.ndarray:
    """One joint draw of the lift vector; metrics are independent."""
    return belief.mu + np.sqrt(belief.sigma2) * rng.standard_normal(belief.mu.shape)


def _normalize(thetas: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
    return (thetas - lo) / span


def _median_lengthscales(x: np.ndarray) -> np.ndarray:
    """Per-dimension median pairwise distance, with positive fallbacks."""
    n, d = x.shape
    scales = np.ones(d)
    if n < 2:
        return scales
    iu = np.triu_indices(n, k=1)
    for k in range(d):
        dists = np.abs(x[:, k][:, None] - x[:, k][None, :])[iu]
        m = float(np.median(dists))
        if m <= 0.0:
            m = float(np.mean(dists))
        if m <= 0.0:
            m = 1.0
        scales[k] = m
    return scales


@dataclass(frozen=True)
class _MetricGp:
    """Fitted state of one metric's regressor (immutable after fit)."""

    signal_var: float
    lengthscales: np.ndarray
    x: np.ndarray          # normalized training inputs, (n, d)
    chol: np.ndarray       # lower Cholesky factor of K + diag(noise)
    alpha: np.ndarray      # (K + diag(noise))^-1 y
    jitter: float


def _kernel(x1: np.ndarray, x2: np.ndarray, s2: float, ls: np.ndarray) -> np.ndarray:
    sq = ((x1[:, None, :] - x2[None, :, :]) / ls) ** 2
    return s2 * np.exp(-0.5 * sq.sum(axis=-1))


class GpSurrogate:
    """Independent per-metric GP regressors over a shared input box.

    Build one with :meth:`fit`; instances are immutable and prediction is a
    pure function of the fitted state, so repeated calls are bitwise
    reproducible.
    """

    def __init__(
        self,
        bounds: tuple[tuple[float, float], ...],
        metrics_gps: tuple[_MetricGp, ...],
    ) -> None:
        self._bounds = bounds
        self._gps = metrics_gps
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        span = hi - lo
        span[span == 0.0] = 1.0  # constant dims normalize to 0
        self._lo = lo
        self._hi = hi
        self._span = span

    @property
    def n_metrics(self) -> int:
        return len(self._gps)

    @property
    def bounds(self) -> tuple[tuple[float, float], ...]:
        return self._bounds

    def signal_var(self, metric_index: int) -> float:
        return self._gps[metric_index].signal_var

    def lengthscales(self, metric_index: int) -> np.ndarray:
        return self._gps[metric_index].lengthscales.copy()

    @classmethod
    def fit(
        cls,
        bucket: Sequence[HyperParam],
        beliefs: Sequence[CandidateBelief],
        *,
        lengthscales: np.ndarray | None = None,
        signal_var: float | Sequence[float] | None = None,
        jitter: float = BASE_JITTER,
    ) -> "GpSurrogate":
        """Fit per-metric regressors through the beliefs of measured candidates.

        ``bucket`` and ``beliefs`` must align one-to-one.  ``lengthscales``
        and ``signal_var`` override the data-driven heuristics when given
        (length scales apply in normalized coordinates).
        """
        if len(bucket) == 0:
            raise ValueError("cannot fit on an empty bucket")
        if len(bucket) != len(beliefs):
            raise ValueError("bucket and beliefs must align one-to-one")
        bounds = bucket[0].bounds
        for hp in bucket:
            if hp.bounds != bounds:
                raise ValueError("all candidates must share one bounds box")
        n_metrics = beliefs[0].mu.shape[0]
        for b in beliefs:
            if b.mu.shape[0] != n_metrics:
                raise ValueError("all beliefs must cover the same metrics")

        thetas = np.array([hp.theta for hp in bucket], dtype=float)
        lo = np.array([b[0] for b in bounds])
        span = np.array([b[1] - b[0] for b in bounds])
        span[span == 0.0] = 1.0
        x = _normalize(thetas, lo, span)

        if lengthscales is None:
            ls = _median_lengthscales(x)
        else:
            ls = np.asarray(lengthscales, dtype=float)
            if ls.shape != (x.shape[1],) or np.any(ls <= 0):
                raise ValueError("lengthscales must be positive, one per dimension")

        mus = np.array([b.mu for b in beliefs], dtype=float)        # (n, M)
        noises = np.array([b.sigma2 for b in beliefs], dtype=float)  # (n, M)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mus)) and np.all(np.isfinite(noises))):
            raise FitFailureError("training inputs, targets, and noise must be finite")

        if signal_var is None:
            s2_all = np.maximum(np.mean(mus**2, axis=0), SIGNAL_VAR_FLOOR)
        else:
            s2_arr = np.atleast_1d(np.asarray(signal_var, dtype=float))
            if s2_arr.shape == (1,):
                s2_arr = np.repeat(s2_arr, n_metrics)
            if s2_arr.shape != (n_metrics,) or np.any(s2_arr <= 0):
                raise ValueError("signal_var must be positive, one per metric")
            s2_all = s2_arr

        gps = []
        for k in range(n_metrics):
            s2 = float(s2_all[k])
            kmat = _kernel(x, x, s2, ls)
            jit = float(jitter)
            while True:
                try:
                    chol, _ = cho_factor(
                        kmat + np.diag(noises[:, k] + jit), lower=True
                    )
                    break
                except np.linalg.LinAlgError:
                    jit *= 10.0
                    if jit > MAX_JITTER * (1 + 1e-12):
                        raise FitFailureError(
                            f"kernel factorization failed for metric {k} "
                            f"even at jitter {MAX_JITTER}"
                        ) from None
            alpha = cho_solve((chol, True), mus[:, k])
            gps.append(
                _MetricGp(
                    signal_var=s2,
                    lengthscales=ls.copy(),
                    x=x,
                    chol=np.tril(chol),
                    alpha=alpha,
                    jitter=jit,
                )
            )
        return cls(bounds=bounds, metrics_gps=tuple(gps))

    def _check_inside(self, thetas: np.ndarray) -> None:
        if np.any(thetas < self._lo) or np.any(thetas > self._hi):
            raise RejectedInputError("query outside the fitted bounds box")

    def predict_batch(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at query points.

        Returns ``(mu, var)`` of shape ``(q, M)``.  Variances are the latent
        posterior variances, clamped at zero, and never exceed the signal
        variance plus jitter.
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != self._lo.shape[0]:
            raise RejectedInputError(
                f"query dimension {thetas.shape[1]} does not match the box"
            )
        self._check_inside(thetas)
        xq = _normalize(thetas, self._lo, self._span)
        q = xq.shape[0]
        mu = np.empty((q, self.n_metrics))
        var = np.empty((q, self.n_metrics))
        for k, gk in enumerate(self._gps):
            kq = _kernel(xq, gk.x, gk.signal_var, gk.lengthscales)  # (q, n)
            mu[:, k] = kq @ gk.alpha
            w = solve_triangular(gk.chol, kq.T, lower=True)          # (n, q)
            var[:, k] = np.maximum(gk.signal_var - np.sum(w * w, axis=0), 0.0)
        return mu, var

    def predict(self, theta: Sequence[float]) -> CandidateBelief:
        """Posterior belief at one configuration inside the bounds box."""
        mu, var = self.predict_batch(np.asarray(theta, dtype=float)[None, :])
        return CandidateBelief(candidate_id=None, mu=mu[0], sigma2=var[0])
