"""Spectra of products of square Gaussian matrices.

The limiting distribution of the squared singular values of a product of M
independent N x N matrices with i.i.d. N(0, 1/N) entries has density

    rho_M(x) = sin(phi) * sin((M+1) phi) / (pi * x * sin(M phi))

parametrized by phi in (0, pi/(M+1)) through

    x(phi) = sin((M+1) phi)^(M+1) / (sin(phi) * sin(M phi)^M),

supported on (0, (M+1)^(M+1) / M^M). M = 1 recovers the quarter-circle
law for squared singular values: rho_1(x) = sqrt(4 - x) / (2 pi sqrt(x))
on (0, 4). x(phi) decreases from the upper edge to 0 as phi sweeps the
interval, so phi is recovered from x by bracketed root finding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad
from scipy.optimize import brentq

from .errors import DomainError, SizeError
from .tensor import Array, SeededRng, gram_eigenvalues

SATURATION_FLOOR = 1e-300


def support_upper(m: int) -> float:
    """Upper edge of the squared-singular-value support: (M+1)^(M+1) / M^M."""
    _check_m(m)
    return float((m + 1) ** (m + 1) / m**m)


def _check_m(m: int) -> None:
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise DomainError(f"matrix count M must be an integer >= 1, got {m!r}")


def _phi_limit(m: int) -> float:
    return np.pi / (m + 1)


def x_of_phi(m: int, phi: float) -> float:
    """The squared-singular-value coordinate at parameter phi."""
    _check_m(m)
    phi = float(phi)
    if not 0.0 < phi < _phi_limit(m):
        raise DomainError(f"phi must lie in (0, pi/{m + 1}), got {phi}")
    u = np.sin((m + 1) * phi)
    v = np.sin(m * phi)
    return float(u ** (m + 1) / (np.sin(phi) * v**m))


def phi_of_x(m: int, x: float, tol: float = 1e-12) -> float:
    """Invert x_of_phi on the open support by bracketed root finding."""
    _check_m(m)
    x = float(x)
    upper = support_upper(m)
    if not 0.0 < x < upper:
        raise DomainError(f"x must lie in (0, {upper}), got {x}")
    hi = _phi_limit(m)
    lo_eps = hi * 1e-12
    hi_eps = hi * (1.0 - 1e-14)
    # x_of_phi decreases in phi; handle queries outside the bracketable range
    if x >= x_of_phi(m, lo_eps):
        return lo_eps
    if x <= x_of_phi(m, hi_eps):
        return hi_eps
    return float(
        brentq(
            lambda p: x_of_phi(m, p) - x,
            lo_eps,
            hi_eps,
            xtol=tol * hi,
            rtol=4 * np.finfo(float).eps,
        )
    )


def density(m: int, x) -> np.ndarray | float:
    """Limiting density of squared singular values at x (scalar or array)."""
    _check_m(m)
    xs = np.asarray(x, dtype=np.float64)
    out = np.empty_like(xs, dtype=np.float64)
    for idx, xv in np.ndenumerate(xs):
        phi = phi_of_x(m, float(xv))
        u = np.sin((m + 1) * phi)
        v = np.sin(m * phi)
        out[idx] = np.sin(phi) * u / (np.pi * xv * v)
    if np.isscalar(x) or xs.ndim == 0:
        return float(out.reshape(-1)[0])
    return out


def _mass_integrand(m: int, phi: float) -> float:
    """rho(x(phi)) * |dx/dphi|: the density's mass element in phi."""
    u = np.sin((m + 1) * phi)
    v = np.sin(m * phi)
    s = np.sin(phi)
    term1 = (m + 1) ** 2 * s * np.cos((m + 1) * phi) / v
    term2 = -np.cos(phi) * u / v
    term3 = -(m**2) * s * u * np.cos(m * phi) / v**2
    return -(term1 + term2 + term3) / np.pi


def total_mass(m: int) -> float:
    """Integral of the density over its support (should be 1)."""
    _check_m(m)
    val, _ = quad(lambda p: _mass_integrand(m, p), 0.0, _phi_limit(m), limit=200)
    return float(val)


@dataclass
class FussCatalanDensity:
    """The density for M matrices, with a tabulated CDF for distribution tests."""

    m: int
    grid_points: int = 4001
    _cdf_table: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        _check_m(self.m)
        if self.grid_points < 16:
            raise SizeError("grid_points must be >= 16")

    @property
    def support(self) -> tuple[float, float]:
        return (0.0, support_upper(self.m))

    def density(self, x):
        return density(self.m, x)

    def _table(self):
        if self._cdf_table is None:
            hi = _phi_limit(self.m)
            phis = np.linspace(hi * 1e-9, hi * (1 - 1e-9), self.grid_points)
            g = np.array([_mass_integrand(self.m, p) for p in phis])
            # mass above each phi equals mass below the corresponding x
            below = cumulative_trapezoid(g[::-1], phis[::-1], initial=0.0)
            xs = np.array([x_of_phi(self.m, p) for p in phis])[::-1]
            cdf = -below  # phis reversed descend, so the integral accumulates negatively
            cdf = np.clip(cdf, 0.0, 1.0)  # quadrature error can overshoot by ~1e-7
            xs = np.maximum.accumulate(xs)
            self._cdf_table = (xs, cdf)
        return self._cdf_table

    def cdf(self, x):
        """P(X <= x), tabulated by trapezoidal integration in phi."""
        xs, cdf = self._table()
        return np.interp(x, xs, cdf, left=0.0, right=float(cdf[-1]))


def ks_distance(values: Array, cdf) -> float:
    """Kolmogorov-Smirnov distance between a sample and a CDF callable."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise SizeError("empty sample")
    f = np.asarray(cdf(v), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(np.max(np.maximum(np.abs(f - i / n), np.abs(f - (i - 1) / n))))


@dataclass(frozen=True)
class SpectrumSample:
    """Squared singular values of sampled matrix products.

    per_trial[t] holds trial t's Gram eigenvalues in ascending order;
    eigenvalues pools all trials, sorted. Entries of factor i are drawn
    N(0, sigmas[i]^2 / N) and the product is rescaled by 1 / prod(sigmas),
    so the spectrum is invariant to the sigmas.
    """

    m: int
    n: int
    sigmas: tuple[float, ...]
    trials: int
    seed: int
    eigenvalues: Array
    per_trial: Array


def sample_product_spectrum(
    m: int, n: int, trials: int, seed: int, sigmas=None
) -> SpectrumSample:
    """Sample Gram spectra of products of M Gaussian matrices.

    Trial t draws from SeededRng(seed, stream=t), so individual trials are
    reproducible in isolation and the result does not depend on evaluation
    order.
    """
    _check_m(m)
    if n < 2:
        raise SizeError(f"matrix size must be >= 2, got {n}")
    if trials < 1:
        raise SizeError(f"trials must be >= 1, got {trials}")
    if sigmas is None:
        sigmas = (1.0,) * m
    sigmas = tuple(float(s) for s in sigmas)
    if len(sigmas) != m:
        raise SizeError(f"need {m} sigmas, got {len(sigmas)}")
    if any(s <= 0 for s in sigmas):
        raise DomainError("sigmas must be positive")
    scale = float(np.prod(sigmas))
    rows = np.empty((trials, n))
    for t in range(trials):
        gen = SeededRng(seed, stream=t).generator()
        x = gen.normal(0.0, sigmas[0] / np.sqrt(n), size=(n, n))
        for i in range(1, m):
            x = x @ gen.normal(0.0, sigmas[i] / np.sqrt(n), size=(n, n))
        rows[t] = gram_eigenvalues(x / scale)
    return SpectrumSample(
        m=m,
        n=n,
        sigmas=sigmas,
        trials=trials,
        seed=seed,
        eigenvalues=np.sort(rows.ravel()),
        per_trial=rows,
    )


@dataclass(frozen=True)
class ConditionEntry:
    m: int
    trial: int
    kappa: float  # sqrt(lambda_max / lambda_min)
    sigma_max: float  # sqrt(lambda_max)
    saturated: bool  # lambda_min below the representable floor


@dataclass(frozen=True)
class ConditionSummary:
    m: int
    median_kappa: float
    mean_kappa: float
    median_sigma_max: float
    mean_sigma_max: float
    saturated_trials: int


@dataclass(frozen=True)
class ConditionReport:
    entries: tuple[ConditionEntry, ...]
    summaries: tuple[ConditionSummary, ...]


def condition_report(samples: list[SpectrumSample]) -> ConditionReport:
    """Condition numbers and largest singular values, per trial and summarized.

    Trials whose smallest eigenvalue falls below 1e-300 cannot yield a
    meaningful condition number in float64; they are flagged saturated and
    excluded from the per-M aggregates.
    """
    entries = []
    summaries = []
    for s in samples:
        kappas, smaxes_ok, smaxes_all = [], [], []
        sat = 0
        for t in range(s.trials):
            lam = s.per_trial[t]
            lam_min, lam_max = float(lam[0]), float(lam[-1])
            smax = float(np.sqrt(lam_max))
            smaxes_all.append(smax)
            if lam_min < SATURATION_FLOOR:
                entries.append(ConditionEntry(s.m, t, float("inf"), smax, True))
                sat += 1
                continue
            kappa = float(np.sqrt(lam_max / lam_min))
            entries.append(ConditionEntry(s.m, t, kappa, smax, False))
            kappas.append(kappa)
            smaxes_ok.append(smax)
        smaxes = smaxes_ok if smaxes_ok else smaxes_all
        summaries.append(
            ConditionSummary(
                m=s.m,
                median_kappa=float(np.median(kappas)) if kappas else float("inf"),
                mean_kappa=float(np.mean(kappas)) if kappas else float("inf"),
                median_sigma_max=float(np.median(smaxes)),
                mean_sigma_max=float(np.mean(smaxes)),
                saturated_trials=sat,
            )
        )
    return ConditionReport(entries=tuple(entries), summaries=tuple(summaries))
