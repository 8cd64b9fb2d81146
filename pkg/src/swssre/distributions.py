"""Student t distribution functions and counter-addressed random streams.

The t CDF is evaluated through the regularized incomplete beta function;
all functions accept numpy arrays and broadcast.
"""

from __future__ import annotations

import numpy as np
from scipy import special

GENERATOR_ID = "philox4x64-10/inverse-cdf"

_TWO_POW_53 = float(2**53)
_MASK64 = (1 << 64) - 1


def _check_nu(nu) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    if np.any(~(nu > 0)):
        raise ValueError("degrees of freedom must be positive")
    return nu


def t_cdf(x, nu):
    """P(T <= x) for a central t with ``nu`` degrees of freedom."""
    x = np.asarray(x, dtype=float)
    nu = _check_nu(nu)
    if np.any(~np.isfinite(x)):
        raise ValueError("x must be finite")
    x2 = x * x
    # Near the centre I_{x^2/(nu+x^2)}(1/2, nu/2) keeps full precision;
    # in the tails switch to the complementary argument.
    centre = x2 < nu
    with np.errstate(invalid="ignore", divide="ignore"):
        inner = special.betainc(0.5, 0.5 * nu, x2 / (nu + x2))
        tail = 0.5 * special.betainc(0.5 * nu, 0.5, nu / (nu + x2))
    below = np.where(centre, 0.5 - 0.5 * inner, tail)  # P(T <= -|x|)
    out = np.where(x > 0, 1.0 - below, below)
    return out[()] if out.ndim == 0 else out


def t_pdf(x, nu):
    x = np.asarray(x, dtype=float)
    nu = _check_nu(nu)
    logc = special.gammaln(0.5 * (nu + 1)) - special.gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi)
    return np.exp(logc - 0.5 * (nu + 1) * np.log1p(x * x / nu))


def t_quantile(p, nu):
    """Inverse of :func:`t_cdf` in ``p``."""
    p = np.asarray(p, dtype=float)
    nu = _check_nu(nu)
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("p must lie strictly between 0 and 1")
    q = np.minimum(p, 1.0 - p)  # lower-tail probability, <= 1/2
    # P(|T| > x) = 2q = I_{nu/(nu+x^2)}(nu/2, 1/2)
    z = special.betaincinv(0.5 * nu, 0.5, 2.0 * q)
    with np.errstate(divide="ignore"):
        x = np.sqrt(nu * (1.0 - z) / z)
    # two Newton steps polish the inversion
    for _ in range(2):
        target = np.where(p > 0.5, 1.0 - p, p)
        step = (t_cdf(-x, nu) - target) / t_pdf(x, nu)
        x = x + np.where(np.isfinite(step), step, 0.0)
    x = np.where(p == 0.5, 0.0, x)
    out = np.where(p > 0.5, x, -x)
    return out[()] if out.ndim == 0 else out


def shifted_t_tail(e, shift, nu):
    """P(X > e) where X - shift follows a central t with ``nu`` dof."""
    e = np.asarray(e, dtype=float)
    shift = np.asarray(shift, dtype=float)
    return t_cdf(shift - e, nu)


def _uniforms_from_raw(raw: np.ndarray) -> np.ndarray:
    # 53 random bits, offset by half a step: strictly inside (0, 1)
    return ((raw >> np.uint64(11)).astype(float) + 0.5) / _TWO_POW_53


class RngStream:
    """Counter-addressed uniform stream keyed by (seed, stream_id).

    The k-th uniform of stream ``(seed, s)`` depends only on ``(seed, s, k)``;
    ``counter`` is the index of the next draw.
    """

    def __init__(self, seed: int, stream_id: int, counter: int = 0) -> None:
        if counter < 0:
            raise ValueError("counter must be non-negative")
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        self._bitgen.advance(counter // 4)
        if counter % 4:
            self._bitgen.random_raw(counter % 4)
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def uniforms(self, size: int) -> np.ndarray:
        raw = self._bitgen.random_raw(int(size))
        self.counter += int(size)
        return _uniforms_from_raw(np.atleast_1d(raw))

    def normals(self, size: int) -> np.ndarray:
        return special.ndtri(self.uniforms(size))

    def skip(self, size: int) -> None:
        """Advance the counter without using the draws."""
        if size:
            self.uniforms(size)


def sample_normal(stream: RngStream, mean: float, variance: float) -> float:
    """One N(mean, variance) draw by inversion."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    z = float(special.ndtri(stream.uniforms(1)[0]))
    if variance == 0:
        return float(mean)
    return float(mean + np.sqrt(variance) * z)


def chi2_from_uniform(u, df):
    """Chi-square quantile at ``u``; zero degrees of freedom give exactly 0."""
    u = np.asarray(u, dtype=float)
    df = np.asarray(df, dtype=float)
    safe = np.where(df > 0, df, 1.0)
    return np.where(df > 0, 2.0 * special.gammaincinv(0.5 * safe, u), 0.0)
