"""Randomization distributions for the perturbed program.

Coordinates are i.i.d. from a symmetric univariate law (Gaussian or
Laplace).  Truncated draws use inverse-CDF sampling evaluated on whichever
tail keeps the arithmetic well conditioned, so intervals far out in the
tails are sampled exactly rather than by rejection.

Infinite truncation bounds are passed as ``np.inf`` / ``-np.inf``; the
CDF and survival function map them to exact 0/1 so no arithmetic is done
on the infinities themselves.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

from .exceptions import ArgumentError, InfeasibleTruncationError

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
_LOG2 = np.log(2.0)


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"


@dataclass(frozen=True)
class RandomizationDist:
    """Product law of ``dim`` i.i.d. symmetric coordinates.

    Parameters
    ----------
    family : Family or str
        ``"gaussian"`` (``scale`` is the standard deviation) or
        ``"laplace"`` (``scale`` is the ``b`` parameter, variance ``2 b**2``).
    scale : float
        Positive per-coordinate scale.
    dim : int
        Number of coordinates.
    """

    family: Family
    scale: float
    dim: int

    def __post_init__(self):
        try:
            object.__setattr__(self, "family", Family(self.family))
        except ValueError:
            raise ArgumentError(f"unknown randomization family {self.family!r}") from None
        if not self.scale > 0:
            raise ArgumentError(f"scale must be positive, got {self.scale}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ArgumentError(f"dim must be a positive integer, got {self.dim}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "dim", int(self.dim))

    def with_dim(self, dim: int) -> "RandomizationDist":
        return RandomizationDist(self.family, self.scale, dim)

    # -- marginal quantities (elementwise) --------------------------------

    def marginal_logpdf(self, w):
        w = np.asarray(w, dtype=float)
        s = self.scale
        if self.family is Family.GAUSSIAN:
            return -0.5 * (w / s) ** 2 - _LOG_SQRT_2PI - np.log(s)
        return -np.abs(w) / s - _LOG2 - np.log(s)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.family is Family.GAUSSIAN:
            out = ndtr(x / self.scale)
        else:
            e = 0.5 * np.exp(-np.abs(x) / self.scale)
            out = np.where(x < 0, e, 1.0 - e)
        return out[()] if out.ndim == 0 else out

    def sf(self, x):
        return self.cdf(-np.asarray(x, dtype=float))

    def log_sf(self, x):
        """log P(W > x), accurate deep in the upper tail."""
        x = np.asarray(x, dtype=float)
        if self.family is Family.GAUSSIAN:
            return log_ndtr(-x / self.scale)
        with np.errstate(divide="ignore"):
            return np.where(
                x >= 0,
                -x / self.scale - _LOG2,
                np.log1p(-0.5 * np.exp(np.minimum(x, 0) / self.scale)),
            )

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0) | (u >= 1)) or np.any(np.isnan(u)):
            raise ArgumentError("quantile requires 0 < u < 1")
        if self.family is Family.GAUSSIAN:
            out = self.scale * ndtri(u)
        else:
            out = np.where(
                u < 0.5,
                self.scale * np.log(2 * u),
                -self.scale * np.log(2 * (1 - u)),
            )
        return out[()] if out.ndim == 0 else out

    def _quantile_from_log_sf(self, log_s):
        # inverse of log_sf restricted to the upper half (log_s <= log 1/2)
        if self.family is Family.GAUSSIAN:
            return -self.scale * ndtri_exp(log_s)
        return -self.scale * (log_s + _LOG2)

    # -- joint quantities --------------------------------------------------

    def log_density(self, w) -> float:
        """Sum of marginal log densities over the ``dim`` coordinates."""
        w = np.asarray(w, dtype=float)
        if w.shape[-1:] != (self.dim,):
            raise ArgumentError(f"expected length {self.dim}, got shape {w.shape}")
        return self.marginal_logpdf(w).sum(axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.family is Family.GAUSSIAN:
            return rng.normal(scale=self.scale, size=(n, self.dim))
        return rng.laplace(scale=self.scale, size=(n, self.dim))

    def sample_truncated(self, lower, upper, rng: np.random.Generator) -> np.ndarray:
        """One draw per coordinate from the marginal restricted to ``(lower, upper)``.

        Every returned coordinate lies strictly inside its interval.
        """
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        lower, upper = np.broadcast_arrays(lower, upper)
        if np.any(~(lower < upper)):
            bad = np.flatnonzero(~(lower < upper))
            raise InfeasibleTruncationError(
                f"empty truncation interval at coordinates {bad.tolist()}"
            )
        v = 1.0 - rng.random(lower.shape)  # in (0, 1]
        out = np.empty(lower.shape)

        # intervals entirely in the upper tail: invert the survival function
        # in log space; intervals in the lower tail are mirrored onto it
        upper_tail = lower >= 0
        lower_tail = upper <= 0
        middle = ~(upper_tail | lower_tail)

        for mask, lo, hi, sign in (
            (upper_tail, lower, upper, 1.0),
            (lower_tail, -upper, -lower, -1.0),
        ):
            if not mask.any():
                continue
            a, b, vv = lo[mask], hi[mask], v[mask]
            if self.family is Family.LAPLACE:
                # truncated exponential on (a, b), exact
                width = b - a
                x = a - self.scale * np.log1p(vv * np.expm1(-width / self.scale))
            else:
                la, lb = self.log_sf(a), self.log_sf(b)
                ratio = np.exp(lb - la)
                x = self._quantile_from_log_sf(la + np.log(ratio + vv * (1 - ratio)))
            out[mask] = sign * x

        if middle.any():
            fl, fu = self.cdf(lower[middle]), self.cdf(upper[middle])
            u = fl + v[middle] * (fu - fl)
            u = np.clip(u, np.nextafter(0, 1), np.nextafter(1, 0))
            out[middle] = self.quantile(u)

        # float rounding can land on (or past) an endpoint
        out = np.where(out <= lower, np.nextafter(lower, upper), out)
        out = np.where(out >= upper, np.nextafter(upper, lower), out)
        return out


def gaussian(scale: float, dim: int) -> RandomizationDist:
    return RandomizationDist(Family.GAUSSIAN, scale, dim)


def laplace(scale: float, dim: int) -> RandomizationDist:
    return RandomizationDist(Family.LAPLACE, scale, dim)
