"""Exponential-family global distributions with inversion sampling.

Two families are provided, :class:`Gamma` and :class:`Dirichlet`.  Beta
distributions are handled as two-dimensional Dirichlets.  Both families
accept batched natural parameters: the trailing axis holds the natural
parameter coordinates of one distribution and every leading axis is a batch
of independent distributions.

Draws are produced deterministically from uniforms (sampling by inversion),
and the :class:`GlobalDraw` that comes back keeps the uniforms and the
pre-normalisation gamma variates around so that derivatives of the sampler
with respect to the natural parameters can be evaluated afterwards.

Everything is computed in log space where it matters.  Gamma variates with
very small shape routinely underflow (``u ** (1 / shape)`` with shape 0.01),
so the log of each variate is the primary quantity and the variate itself
is only its (possibly zero) exponential.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammainc, gammaincc, gammaln, logsumexp, ndtri, polygamma

__all__ = [
    "DomainError",
    "SingularityError",
    "ConditioningError",
    "GlobalDraw",
    "Gamma",
    "Dirichlet",
    "gamma_quantile",
    "log_gamma_quantile",
    "log_gammainc",
    "log_gammaincc",
    "gamma_cdf_shape_derivative",
    "log_gamma_shape_derivative",
    "UNIFORM_CLAMP",
    "PDF_FLOOR",
]

UNIFORM_CLAMP = 1e-12
PDF_FLOOR = 1e-300
_LOG_PDF_FLOOR = np.log(PDF_FLOOR)
_FD_REL_STEP = 1e-5
_QUANTILE_TOL = 1e-10
_QUANTILE_MAX_ITER = 100


class DomainError(ValueError):
    """Argument outside the domain of a distribution or its natural parameters."""


class SingularityError(ArithmeticError):
    """A density fell below the underflow guard inside a Jacobian division."""


class ConditioningError(ArithmeticError):
    """The Fisher information is numerically singular."""


@dataclass(frozen=True)
class GlobalDraw:
    """One draw from ``q(beta)`` together with what produced it.

    Attributes
    ----------
    beta : ndarray
        The draw.
    log_beta : ndarray
        ``log(beta)``, finite even where ``beta`` underflows.
    uniforms : ndarray
        The (clamped) uniforms the draw was generated from.
    auxiliaries : ndarray
        Unit-rate gamma variates before any transform (``beta'``).
    log_auxiliaries : ndarray
        ``log(beta')``.
    """

    beta: np.ndarray
    log_beta: np.ndarray
    uniforms: np.ndarray
    auxiliaries: np.ndarray
    log_auxiliaries: np.ndarray


# ---------------------------------------------------------------------------
# Regularised incomplete gamma in log space
# ---------------------------------------------------------------------------

def _log_lower_series(a, log_x):
    # log P(a, x) = a log x - x - lgamma(a + 1) + log sum_n x^n / prod_{i<=n}(a + i)
    x = np.exp(log_x)
    total = np.ones_like(x)
    term = np.ones_like(x)
    for n in range(1, 2000):
        term = term * x / (a + n)
        total = total + term
        if np.all(term <= 1e-17 * total):
            break
    return a * log_x - x - gammaln(a + 1.0) + np.log(total)


def log_gammainc(a, log_x):
    """Log of the regularised lower incomplete gamma ``P(a, exp(log_x))``.

    Accurate where ``P`` itself underflows, which happens for small shapes.
    """
    a, log_x = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(log_x, dtype=float))
    with np.errstate(divide="ignore", over="ignore"):
        p = gammainc(a, np.exp(log_x))
        out = np.log(p)
    tiny = ~(p > 1e-250) | (log_x < -30.0)
    if np.any(tiny):
        out = np.array(out, copy=True)
        out[tiny] = _log_lower_series(a[tiny], log_x[tiny])
    return out


def log_gammaincc(a, log_x):
    """Log of the regularised upper incomplete gamma ``Q(a, exp(log_x))``."""
    a, log_x = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(log_x, dtype=float))
    with np.errstate(divide="ignore", over="ignore"):
        q = gammaincc(a, np.exp(log_x))
        out = np.log(q)
    big = q > 0.9
    if np.any(big):
        out = np.array(out, copy=True)
        out[big] = np.log1p(-np.exp(log_gammainc(a[big], log_x[big])))
    return out


def _check_shape(shape):
    shape = np.asarray(shape, dtype=float)
    if not np.all(np.isfinite(shape)) or np.any(shape <= 0):
        raise DomainError("gamma shape must be positive and finite")
    return shape


def log_gamma_quantile(u, shape):
    """Log of the unit-rate gamma quantile function.

    Newton iteration on ``y = log x`` against the log CDF (lower tail for
    ``u <= 1/2``, upper tail otherwise), safeguarded by a bracket that falls
    back to bisection whenever a Newton step leaves it.  Iterates until the
    CDF matches ``u`` to 1e-10 or 100 iterations have run.

    Raises
    ------
    DomainError
        If ``u`` is outside ``(0, 1)`` or ``shape <= 0``.
    """
    u = np.asarray(u, dtype=float)
    shape = _check_shape(shape)
    if np.any(~(u > 0.0) | ~(u < 1.0)):
        raise DomainError("uniforms must lie strictly inside (0, 1)")
    u, a = np.broadcast_arrays(u, shape)
    out_shape = u.shape
    u = u.ravel().copy()
    a = a.ravel().copy()

    upper = u > 0.5
    log_target = np.where(upper, np.log1p(-u), np.log(u))
    lga = gammaln(a)

    # P(a, x) <= x^a / Gamma(a + 1), so the lower-tail root is at least this.
    lo = (np.log(u) + gammaln(a + 1.0)) / a
    hi = np.log(a + 12.0 * np.sqrt(a) + 60.0)

    def residual(y, idx):
        # increasing in y on both branches
        aa, up, tgt = a[idx], upper[idx], log_target[idx]
        res = np.empty_like(y)
        if np.any(~up):
            res[~up] = log_gammainc(aa[~up], y[~up]) - tgt[~up]
        if np.any(up):
            res[up] = tgt[up] - log_gammaincc(aa[up], y[up])
        return res

    idx_all = np.arange(u.size)
    for _ in range(60):
        r_hi = residual(hi, idx_all)
        bad = ~(r_hi > 0)
        if not np.any(bad):
            break
        hi = np.where(bad, hi + np.log(2.0), hi)

    # Wilson-Hilferty start where it is usable, the lower bound otherwise.
    z = ndtri(u)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = 1.0 / (9.0 * a)
        wh = a * (1.0 - c + z * np.sqrt(c)) ** 3
        y = np.where((wh > 0) & (a >= 1.0), np.log(wh), lo + 0.5 * np.minimum(hi - lo, 1.0))
    y = np.clip(y, lo, hi)

    active = np.ones(u.size, dtype=bool)
    for _ in range(_QUANTILE_MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        yi = y[idx]
        res = residual(yi, idx)
        converged = np.abs(res) < 0.1 * _QUANTILE_TOL
        pos = res > 0
        hi[idx] = np.where(pos, yi, hi[idx])
        lo[idx] = np.where(pos, lo[idx], yi)
        aa = a[idx]
        x = np.exp(yi)
        log_qx = aa * yi - x - lga[idx]
        up = upper[idx]
        log_tail = np.where(up, log_target[idx] - res, log_target[idx] + res)
        with np.errstate(over="ignore", invalid="ignore"):
            slope = np.exp(log_qx - log_tail)
            step = res / slope
            y_new = yi - step
        outside = ~np.isfinite(y_new) | (y_new <= lo[idx]) | (y_new >= hi[idx])
        y_new = np.where(outside, 0.5 * (lo[idx] + hi[idx]), y_new)
        narrow = (hi[idx] - lo[idx]) <= 4e-16 * np.maximum(1.0, np.abs(yi))
        y[idx] = np.where(converged, yi, y_new)
        active[idx] = ~(converged | narrow)
    return y.reshape(out_shape)


def gamma_quantile(u, shape):
    """Unit-rate gamma quantile: ``x`` with ``P(shape, x) = u``.

    >>> float(gamma_quantile(0.5, 1.0))  # doctest: +ELLIPSIS
    0.69314718...
    """
    return np.exp(log_gamma_quantile(u, shape))


def _fd_step(lam):
    # capped at 1% of lam so the lower point stays inside the domain
    lam = np.abs(lam)
    return np.minimum(_FD_REL_STEP * np.maximum(1.0, lam), 0.01 * lam)


def gamma_cdf_shape_derivative(x, shape):
    """Central-difference derivative of ``P(shape, x)`` with respect to shape."""
    x = np.asarray(x, dtype=float)
    shape = _check_shape(shape)
    h = _fd_step(shape)
    return (gammainc(shape + h, x) - gammainc(shape - h, x)) / (2.0 * h)


def log_gamma_shape_derivative(log_x, shape):
    """Derivative of ``log x`` with respect to shape along the quantile map.

    For ``x = R(u; shape)`` at fixed ``u`` this is
    ``-(dP/dshape) / (pdf(x) * x)``, with the CDF derivative taken by central
    differences in whichever tail is smaller, so it stays accurate when ``x``
    underflows or sits far in the right tail.

    Raises
    ------
    SingularityError
        If the density at ``x`` is below the underflow guard.
    """
    log_x = np.asarray(log_x, dtype=float)
    shape = _check_shape(shape)
    log_x, shape = np.broadcast_arrays(log_x, shape)
    log_pdf = (shape - 1.0) * log_x - np.exp(log_x) - gammaln(shape)
    if np.any(log_pdf < _LOG_PDF_FLOOR):
        raise SingularityError("gamma density below underflow guard in quantile Jacobian")
    log_qx = log_pdf + log_x
    h = _fd_step(shape)
    log_p = log_gammainc(shape, log_x)
    lower = log_p < np.log(0.5)
    out = np.empty_like(log_x)
    if np.any(lower):
        s, lx, hh = shape[lower], log_x[lower], h[lower]
        dlogp = (log_gammainc(s + hh, lx) - log_gammainc(s - hh, lx)) / (2.0 * hh)
        out[lower] = -np.exp(log_p[lower] - log_qx[lower]) * dlogp
    if np.any(~lower):
        s, lx, hh = shape[~lower], log_x[~lower], h[~lower]
        log_q = log_gammaincc(s, lx)
        dlogq = (log_gammaincc(s + hh, lx) - log_gammaincc(s - hh, lx)) / (2.0 * hh)
        out[~lower] = np.exp(log_q - log_qx[~lower]) * dlogq
    return out


def _clamp(u):
    u = np.asarray(u, dtype=float)
    if np.any(~(u >= 0.0) | ~(u <= 1.0)):
        raise DomainError("uniforms must lie in [0, 1]")
    return np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------

class Dirichlet:
    """Dirichlet distribution over the trailing axis.

    The natural parameters are the concentrations ``lam`` (the ``-1`` offset
    is absorbed into the base measure ``h(beta) = 1 / prod(beta)``), the
    sufficient statistic is ``log(beta)`` and
    ``A(lam) = sum(lgamma(lam)) - lgamma(sum(lam))``.
    """

    name = "dirichlet"

    def validate(self, lam):
        lam = np.asarray(lam, dtype=float)
        if lam.ndim < 1 or lam.shape[-1] < 2:
            raise DomainError("Dirichlet natural parameters need a trailing axis of length >= 2")
        if not np.all(np.isfinite(lam)):
            raise DomainError("natural parameters must be finite")
        if np.any(lam <= 0):
            raise DomainError("Dirichlet natural parameters must be positive")
        return lam

    def beta_shape(self, lam_shape):
        return tuple(lam_shape)

    def log_normalizer(self, lam):
        lam = self.validate(lam)
        return gammaln(lam).sum(-1) - gammaln(lam.sum(-1))

    def grad_log_normalizer(self, lam):
        """``E[log beta]``."""
        lam = self.validate(lam)
        return digamma(lam) - digamma(lam.sum(-1, keepdims=True))

    def mean(self, lam):
        lam = self.validate(lam)
        return lam / lam.sum(-1, keepdims=True)

    def sufficient_stats(self, beta):
        return np.log(beta)

    def draw_stats(self, draw):
        """``t(beta)`` from a draw, finite even where ``beta`` underflowed."""
        return draw.log_beta

    def log_base_measure(self, beta):
        return -np.log(beta).sum(-1)

    def log_density(self, beta, lam):
        lam = self.validate(lam)
        t = self.sufficient_stats(beta)
        return self.log_base_measure(beta) + (lam * t).sum(-1) - self.log_normalizer(lam)

    def fisher(self, lam):
        """Dense Fisher information ``diag(trigamma(lam)) - trigamma(sum) 11^T``."""
        lam = self.validate(lam)
        k = lam.shape[-1]
        d = polygamma(1, lam)
        c = polygamma(1, lam.sum(-1))
        return d[..., :, None] * np.eye(k) - c[..., None, None] * np.ones((k, k))

    def fisher_inverse_apply(self, lam, v):
        """Solve ``F x = v`` in linear time with the Sherman-Morrison formula.

        Raises
        ------
        ConditioningError
            If the rank-one correction makes ``F`` numerically singular.
        """
        lam = self.validate(lam)
        v = np.asarray(v, dtype=float)
        d = polygamma(1, lam)
        c = polygamma(1, lam.sum(-1, keepdims=True))
        inv_d = 1.0 / d
        denom = 1.0 - c * inv_d.sum(-1, keepdims=True)
        if np.any(denom <= 1e-14):
            raise ConditioningError("Dirichlet Fisher information is numerically singular")
        w = v * inv_d
        return w + inv_d * (c * w.sum(-1, keepdims=True) / denom)

    def sample_by_inversion(self, lam, u):
        """Map uniforms to a Dirichlet draw through normalised gamma quantiles."""
        lam = self.validate(lam)
        u = _clamp(u)
        if u.shape != lam.shape:
            raise DomainError(f"uniforms shape {u.shape} does not match parameters {lam.shape}")
        log_aux = log_gamma_quantile(u, lam)
        log_beta = log_aux - logsumexp(log_aux, axis=-1, keepdims=True)
        return GlobalDraw(
            beta=np.exp(log_beta),
            log_beta=log_beta,
            uniforms=u,
            auxiliaries=np.exp(log_aux),
            log_auxiliaries=log_aux,
        )

    def sample(self, lam, rng):
        lam = self.validate(lam)
        return self.sample_by_inversion(lam, rng.random(lam.shape))

    def cdf(self, aux, lam):
        """CDF of each unit-rate gamma auxiliary at its own shape."""
        return gammainc(self.validate(lam), aux)

    def cdf_param_derivative(self, aux, lam):
        """``dQ_k/dlam`` for every auxiliary coordinate.

        Each auxiliary depends on its own concentration only, so the full
        derivative is diagonal; the diagonal is returned.
        """
        return gamma_cdf_shape_derivative(aux, self.validate(lam))

    def _log_aux_derivative(self, draw, lam):
        return log_gamma_shape_derivative(draw.log_auxiliaries, lam)

    def quantile_jacobian(self, draw, lam):
        """Derivative of the sampler with respect to the natural parameters.

        Returned in ``(..., n_params, n_coords)`` layout: entry ``[j, v]`` is
        ``d beta_v / d lam_j`` at fixed uniforms.  Summing a row over the
        simplex coordinates gives zero.
        """
        lam = self.validate(lam)
        dlog_aux = self._log_aux_derivative(draw, lam)
        beta = draw.beta
        # d beta_v / d lam_j = beta_v * dlog_aux_j * (delta_vj - beta_j)
        k = lam.shape[-1]
        inner = np.eye(k) - beta[..., :, None]
        return (dlog_aux[..., :, None] * inner) * beta[..., None, :]

    def stats_jacobian_product(self, draw, lam):
        """``d t(beta) / d lam`` along the sampler, in ``(..., n_params, n_stats)`` layout.

        Equal to ``quantile_jacobian @ diag(1 / beta)`` but formed without
        dividing by possibly-underflowed coordinates.
        """
        lam = self.validate(lam)
        dlog_aux = self._log_aux_derivative(draw, lam)
        k = lam.shape[-1]
        return dlog_aux[..., :, None] * (np.eye(k) - draw.beta[..., :, None])

    def apply_V(self, draw, lam, stats):
        """``F^{-1} (dR/dlam) (dt/dbeta)^T stats`` in ``O(K)`` per distribution."""
        lam = self.validate(lam)
        stats = np.asarray(stats, dtype=float)
        dlog_aux = self._log_aux_derivative(draw, lam)
        projected = dlog_aux * (stats - draw.beta * stats.sum(-1, keepdims=True))
        return self.fisher_inverse_apply(lam, projected)


class Gamma:
    """Gamma distribution with natural parameters ``(shape, rate)``.

    Sufficient statistic ``t(beta) = (log beta, -beta)``, base measure
    ``1 / beta`` and ``A = lgamma(shape) - shape * log(rate)``.
    """

    name = "gamma"

    def validate(self, lam):
        lam = np.asarray(lam, dtype=float)
        if lam.ndim < 1 or lam.shape[-1] != 2:
            raise DomainError("Gamma natural parameters need a trailing (shape, rate) axis")
        if not np.all(np.isfinite(lam)):
            raise DomainError("natural parameters must be finite")
        if np.any(lam <= 0):
            raise DomainError("Gamma shape and rate must be positive")
        return lam

    def beta_shape(self, lam_shape):
        return tuple(lam_shape[:-1])

    def log_normalizer(self, lam):
        lam = self.validate(lam)
        a, b = lam[..., 0], lam[..., 1]
        return gammaln(a) - a * np.log(b)

    def grad_log_normalizer(self, lam):
        """``(E[log beta], -E[beta])``."""
        lam = self.validate(lam)
        a, b = lam[..., 0], lam[..., 1]
        return np.stack([digamma(a) - np.log(b), -a / b], axis=-1)

    def mean(self, lam):
        lam = self.validate(lam)
        return lam[..., 0] / lam[..., 1]

    def sufficient_stats(self, beta):
        beta = np.asarray(beta, dtype=float)
        return np.stack([np.log(beta), -beta], axis=-1)

    def draw_stats(self, draw):
        return np.stack([draw.log_beta, -draw.beta], axis=-1)

    def log_base_measure(self, beta):
        return -np.log(beta)

    def log_density(self, beta, lam):
        lam = self.validate(lam)
        t = self.sufficient_stats(beta)
        return self.log_base_measure(beta) + (lam * t).sum(-1) - self.log_normalizer(lam)

    def fisher(self, lam):
        lam = self.validate(lam)
        a, b = lam[..., 0], lam[..., 1]
        out = np.empty(lam.shape + (2,))
        out[..., 0, 0] = polygamma(1, a)
        out[..., 0, 1] = out[..., 1, 0] = -1.0 / b
        out[..., 1, 1] = a / b**2
        return out

    def fisher_inverse_apply(self, lam, v):
        lam = self.validate(lam)
        f = self.fisher(lam)
        det = f[..., 0, 0] * f[..., 1, 1] - f[..., 0, 1] ** 2
        scale = np.abs(f[..., 0, 0] * f[..., 1, 1])
        if np.any(det <= 1e-14 * scale):
            raise ConditioningError("Gamma Fisher information is numerically singular")
        v = np.asarray(v, dtype=float)
        x0 = (f[..., 1, 1] * v[..., 0] - f[..., 0, 1] * v[..., 1]) / det
        x1 = (f[..., 0, 0] * v[..., 1] - f[..., 1, 0] * v[..., 0]) / det
        return np.stack([x0, x1], axis=-1)

    def sample_by_inversion(self, lam, u):
        lam = self.validate(lam)
        u = _clamp(u)
        if u.shape != lam.shape[:-1]:
            raise DomainError(f"uniforms shape {u.shape} does not match parameters {lam.shape}")
        log_aux = log_gamma_quantile(u, lam[..., 0])
        log_beta = log_aux - np.log(lam[..., 1])
        return GlobalDraw(
            beta=np.exp(log_beta),
            log_beta=log_beta,
            uniforms=u,
            auxiliaries=np.exp(log_aux),
            log_auxiliaries=log_aux,
        )

    def sample(self, lam, rng):
        lam = self.validate(lam)
        return self.sample_by_inversion(lam, rng.random(lam.shape[:-1]))

    def cdf(self, beta, lam):
        lam = self.validate(lam)
        return gammainc(lam[..., 0], lam[..., 1] * beta)

    def cdf_param_derivative(self, beta, lam):
        """Central differences of the CDF in shape and rate."""
        lam = self.validate(lam)
        beta = np.asarray(beta, dtype=float)
        h = _fd_step(lam)
        a, b = lam[..., 0], lam[..., 1]
        ha, hb = h[..., 0], h[..., 1]
        d_a = (gammainc(a + ha, b * beta) - gammainc(a - ha, b * beta)) / (2.0 * ha)
        d_b = (gammainc(a, (b + hb) * beta) - gammainc(a, (b - hb) * beta)) / (2.0 * hb)
        return np.stack([d_a, d_b], axis=-1)

    def _dlog_beta(self, draw, lam):
        # d log beta / d(shape, rate) at fixed u
        d_shape = log_gamma_shape_derivative(draw.log_auxiliaries, lam[..., 0])
        d_rate = -1.0 / lam[..., 1]
        return np.stack([d_shape, np.broadcast_to(d_rate, d_shape.shape)], axis=-1)

    def quantile_jacobian(self, draw, lam):
        """``d beta / d(shape, rate)`` in ``(..., 2, 1)`` layout."""
        lam = self.validate(lam)
        return (self._dlog_beta(draw, lam) * draw.beta[..., None])[..., None]

    def stats_jacobian_product(self, draw, lam):
        lam = self.validate(lam)
        dlog = self._dlog_beta(draw, lam)
        # t = (log beta, -beta)
        return np.stack([dlog, -dlog * draw.beta[..., None]], axis=-1)

    def apply_V(self, draw, lam, stats):
        lam = self.validate(lam)
        stats = np.asarray(stats, dtype=float)
        dlog = self._dlog_beta(draw, lam)
        projected = dlog * (stats[..., 0] - draw.beta * stats[..., 1])[..., None]
        return self.fisher_inverse_apply(lam, projected)


FAMILIES = {"dirichlet": Dirichlet(), "gamma": Gamma()}
