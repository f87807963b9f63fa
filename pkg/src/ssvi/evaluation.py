"""Metrics and numerical oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import betaln, logsumexp

from .engine import ConjugateModel, EStepKind
from .expfam import Dirichlet

__all__ = [
    "KLEstimate",
    "mc_kl_dpmb",
    "mixture_log_likelihood",
    "count_active_components",
    "heldout_predictive_lda",
    "BetaBernoulliModel",
    "elbo_oracle_beta_bernoulli",
    "QuadratureError",
]


@dataclass(frozen=True)
class KLEstimate:
    value: float
    std_error: float
    num_samples: int

    def __str__(self):
        return f"{self.value:.4f} +/- {self.std_error:.4f} nats (n={self.num_samples})"


def mixture_log_likelihood(y, pi, phi):
    """``log p(y | pi, phi)`` for each row of a binary matrix."""
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
    ll = y @ np.log(phi).T + (1.0 - y) @ np.log1p(-phi).T + log_pi
    return logsumexp(ll, axis=1)


def mc_kl_dpmb(true_params, est_params, num_samples=100_000, rng=None, chunk=10_000):
    """Monte-Carlo ``KL(p(y | true) || p(y | estimate))`` for Bernoulli mixtures.

    ``true_params`` and ``est_params`` are ``(pi, phi)`` pairs or objects
    with ``pi`` and ``phi`` attributes.
    """
    rng = np.random.default_rng(rng)
    pi, phi = _unpack(true_params)
    pi_hat, phi_hat = _unpack(est_params)
    phi_hat = np.clip(phi_hat, 1e-12, 1 - 1e-12)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < num_samples:
        m = min(chunk, num_samples - done)
        z = rng.choice(pi.shape[0], size=m, p=pi)
        y = rng.random((m, phi.shape[1])) < phi[z]
        diff = mixture_log_likelihood(y, pi, phi) - mixture_log_likelihood(y, pi_hat, phi_hat)
        total += diff.sum()
        total_sq += (diff**2).sum()
        done += m
    mean = total / num_samples
    var = max(total_sq / num_samples - mean**2, 0.0)
    return KLEstimate(float(mean), float(math.sqrt(var / num_samples)), int(num_samples))


def _unpack(params):
    if hasattr(params, "pi"):
        return np.asarray(params.pi, dtype=float), np.asarray(params.phi, dtype=float)
    pi, phi = params
    return np.asarray(pi, dtype=float), np.asarray(phi, dtype=float)


def count_active_components(mass, threshold=1.0):
    """Number of components whose expected assignment mass exceeds ``threshold``."""
    return int(np.sum(np.asarray(mass) > threshold))


def heldout_predictive_lda(docs, topics, alpha, max_iters=100, tol=1e-6):
    """Document-completion log likelihood per held-out word.

    The first ``ceil(len / 2)`` words of each document estimate its topic
    proportions with the mean-field local step; the remaining words are
    scored under ``sum_k theta_k topics[k, w]``.  Documents with fewer than
    two words are skipped.
    """
    from .models.lda import lda_meanfield_estep

    topics = np.asarray(topics, dtype=float)
    log_topics = np.log(np.maximum(topics, 1e-300))
    total = 0.0
    count = 0
    for doc in docs:
        doc = np.asarray(doc, dtype=np.int64)
        if doc.size < 2:
            continue
        half = (doc.size + 1) // 2
        observed, held = doc[:half], doc[half:]
        res = lda_meanfield_estep(observed, log_topics, alpha, max_iters=max_iters, tol=tol)
        theta = res.gamma / res.gamma.sum()
        total += float(np.log(theta @ topics[:, held]).sum())
        count += held.size
    if count == 0:
        raise ValueError("no document has a held-out half")
    return total / count


class BetaBernoulliModel(ConjugateModel):
    """``beta ~ Beta(prior)``, ``y_i ~ Bernoulli(beta)``.

    With ``emission`` set to a ``(2, M)`` table the observations become
    ``z_i ~ Bernoulli(beta)``, ``y_i | z_i ~ Categorical(emission[1 - z_i])``
    instead, so the exact conditional of ``z_i`` depends on ``beta``.
    """

    families = {"beta": Dirichlet()}
    supported_esteps = (EStepKind.EXACT,)

    def __init__(self, y, prior=(1.0, 1.0), emission=None):
        self.y = np.asarray(y, dtype=np.int64)
        self._prior = np.asarray(prior, dtype=float)
        self.emission = None if emission is None else np.asarray(emission, dtype=float)

    @property
    def n_groups(self):
        return self.y.shape[0]

    def prior(self):
        return {"beta": self._prior.copy()}

    def local_stats(self, batch, t_beta, estep, rng):
        y = self.y[batch]
        if self.emission is None:
            ones = float(y.sum())
            return {"beta": np.array([ones, y.size - ones])}
        # log p(z = 1, y) and log p(z = 0, y) up to the shared g_n term
        a = t_beta["beta"][0] + np.log(self.emission[0, y])
        b = t_beta["beta"][1] + np.log(self.emission[1, y])
        r = np.exp(a - np.logaddexp(a, b))
        return {"beta": np.array([r.sum(), (1.0 - r).sum()])}

    def log_marginal(self, beta):
        """``sum_i log p(y_i | beta)``."""
        if self.emission is None:
            ones = self.y.sum()
            return ones * np.log(beta) + (self.y.size - ones) * np.log1p(-beta)
        p = beta * self.emission[0, self.y] + (1.0 - beta) * self.emission[1, self.y]
        return np.log(p).sum()


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach its tolerance."""


def _beta_elbo(lam, eta, log_lik):
    a, b = lam
    log_norm_q = betaln(a, b)
    log_norm_p = betaln(*eta)

    def integrand(x, part):
        if x <= 0.0 or x >= 1.0:
            return 0.0
        lx, l1x = math.log(x), math.log1p(-x)
        log_q = (a - 1) * lx + (b - 1) * l1x - log_norm_q
        q = math.exp(log_q)
        if part == "prior":
            return q * ((eta[0] - 1) * lx + (eta[1] - 1) * l1x - log_norm_p - log_q)
        return q * log_lik(x)

    total = 0.0
    for part in ("prior", "lik"):
        for lo, hi in ((0.0, 0.5), (0.5, 1.0)):
            val, err = integrate.quad(integrand, lo, hi, args=(part,), epsabs=1e-12, epsrel=1e-12, limit=500)
            if not err < 1e-10:
                raise QuadratureError(f"quadrature error estimate {err:.2e} exceeds 1e-10")
            total += val
    return total


def elbo_oracle_beta_bernoulli(lam, eta, data, emission=None, step=1e-6):
    """ELBO of a Beta ``q`` on the Beta-Bernoulli model by adaptive quadrature.

    The local bound is tight (exact conditional), so the ELBO is
    ``E_q[log p(beta) - log q(beta) + sum_i log p(y_i | beta)]``.  Returns
    ``(elbo, grad)`` with the gradient by central differences.
    """
    lam = np.asarray(lam, dtype=float)
    eta = np.asarray(eta, dtype=float)
    model = BetaBernoulliModel(data, prior=eta, emission=emission)
    log_lik = lambda x: float(model.log_marginal(x))  # noqa: E731
    value = _beta_elbo(lam, eta, log_lik)
    grad = np.empty(2)
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        grad[j] = (_beta_elbo(lam + e, eta, log_lik) - _beta_elbo(lam - e, eta, log_lik)) / (2 * step)
    return value, grad
