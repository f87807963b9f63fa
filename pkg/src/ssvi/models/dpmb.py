"""Finite Dirichlet-process mixture of Bernoullis.

Generative process::

    pi ~ Dirichlet(alpha / K, ..., alpha / K)
    phi[k, d] ~ Beta(1, 1)
    z[n] ~ Categorical(pi)
    y[n, d] ~ Bernoulli(phi[z[n], d])

Global variables are ``pi`` (a K-Dirichlet) and ``phi`` (K x D Betas stored
as two-dimensional Dirichlets over ``(phi, 1 - phi)``).  Local variables are
the single categorical assignment per observation, so the mean-field and the
exact-conditional local E-steps coincide.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.special import logsumexp

from ..engine import ConjugateModel, EStepKind
from ..expfam import Dirichlet

__all__ = [
    "DPMBParams",
    "Dataset",
    "DPMBModel",
    "CGSResult",
    "generate",
    "exact_conditional_estep",
    "eta_hat_from_responsibilities",
    "gibbs_estep",
    "collapsed_gibbs",
    "collapsed_gibbs_transition",
    "collapsed_conditional",
    "save_dataset",
    "load_dataset",
    "export_csv",
    "DATASET_VERSION",
]

DATASET_VERSION = 1
ACTIVE_THRESHOLD = 1.0


@dataclass
class DPMBParams:
    pi: np.ndarray
    phi: np.ndarray
    alpha: float = 20.0

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.pi.ndim != 1 or self.phi.ndim != 2 or self.phi.shape[0] != self.pi.shape[0]:
            raise ValueError("pi must be (K,) and phi (K, D)")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-8:
            raise ValueError("pi must lie on the simplex")
        if np.any(self.phi <= 0) or np.any(self.phi >= 1):
            raise ValueError("phi entries must lie in (0, 1)")

    @property
    def n_components(self):
        return self.pi.shape[0]


@dataclass
class Dataset:
    y: np.ndarray
    true_z: Optional[np.ndarray] = None
    true_params: Optional[DPMBParams] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int8)
        if self.y.ndim != 2:
            raise ValueError("y must be an (N, D) matrix")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("y must be binary")

    @property
    def n_used(self):
        return 0 if self.true_z is None else int(np.unique(self.true_z).size)


def generate(n_components=100, n_features=100, n_samples=1000, alpha=20.0, seed=0):
    """Forward-sample a dataset and keep the generating parameters."""
    rng = np.random.default_rng(seed)
    # gamma draws in log space: alpha / K can be small enough for plain
    # gamma variates to underflow to an all-zero vector
    log_g = np.log(rng.random(n_components)) / (alpha / n_components) + np.log(
        rng.gamma(alpha / n_components + 1.0, size=n_components)
    )
    pi = np.exp(log_g - logsumexp(log_g))
    pi = pi / pi.sum()
    phi = rng.beta(1.0, 1.0, size=(n_components, n_features))
    phi = np.clip(phi, 1e-12, 1 - 1e-12)
    z = rng.choice(n_components, size=n_samples, p=pi)
    y = (rng.random((n_samples, n_features)) < phi[z]).astype(np.int8)
    return Dataset(y=y, true_z=z, true_params=DPMBParams(pi=pi, phi=phi, alpha=alpha))


def _log_likelihoods(y, log_pi, log_phi):
    y = np.asarray(y, dtype=float)
    return log_pi + y @ log_phi[:, :, 0].T + (1.0 - y) @ log_phi[:, :, 1].T


def exact_conditional_estep(y, log_pi, log_phi):
    """Posterior over the assignment given the global variables.

    Parameters
    ----------
    y : array of shape (D,) or (B, D)
    log_pi : array of shape (K,)
    log_phi : array of shape (K, D, 2)
        ``log(phi)`` and ``log(1 - phi)`` in the last axis.  Passing
        expected logs under ``q`` gives the classic mean-field update.

    Returns
    -------
    r : array of shape (K,) or (B, K)
    """
    y = np.asarray(y)
    single = y.ndim == 1
    ll = _log_likelihoods(np.atleast_2d(y), log_pi, log_phi)
    norm = logsumexp(ll, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("every component has zero likelihood")
    r = np.exp(ll - norm)
    return r[0] if single else r


def eta_hat_from_responsibilities(y, r):
    """Expected conjugate statistics ``{'pi': sum r, 'phi': (r^T y, r^T (1 - y))}``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    r = np.atleast_2d(r)
    return {
        "pi": r.sum(0),
        "phi": np.stack([r.T @ y, r.T @ (1.0 - y)], axis=-1),
    }


def gibbs_estep(y, log_pi, log_phi, num_samples, burn_in, rng):
    """Monte-Carlo average of one-hot assignment statistics.

    Assignments are drawn directly from the exact conditional, so
    ``burn_in`` has nothing to discard; it is accepted for a uniform E-step
    interface.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    r = np.atleast_2d(exact_conditional_estep(y, log_pi, log_phi))
    cdf = np.cumsum(r, axis=1)
    cdf[:, -1] = 1.0
    counts = np.zeros_like(r)
    rows = np.arange(r.shape[0])
    for _ in range(num_samples):
        u = rng.random(r.shape[0])[:, None]
        k = np.minimum((cdf < u).sum(1), r.shape[1] - 1)
        counts[rows, k] += 1.0
    return eta_hat_from_responsibilities(y, counts / num_samples)


class DPMBModel(ConjugateModel):
    """The mixture as a conjugate model for :func:`ssvi.engine.run`."""

    families = {"pi": Dirichlet(), "phi": Dirichlet()}
    supported_esteps = (EStepKind.EXACT, EStepKind.MEANFIELD, EStepKind.GIBBS)

    def __init__(self, y, n_components=100, alpha=20.0):
        self.y = np.asarray(y, dtype=float)
        self.n_components = int(n_components)
        self.alpha = float(alpha)

    @property
    def n_groups(self):
        return self.y.shape[0]

    def prior(self):
        k, d = self.n_components, self.y.shape[1]
        return {"pi": np.full(k, self.alpha / k), "phi": np.ones((k, d, 2))}

    def local_stats(self, batch, t_beta, estep, rng):
        y = self.y[batch]
        if estep.kind is EStepKind.GIBBS:
            return gibbs_estep(y, t_beta["pi"], t_beta["phi"], estep.num_samples, estep.burn_in, rng)
        return eta_hat_from_responsibilities(y, exact_conditional_estep(y, t_beta["pi"], t_beta["phi"]))

    def expected_counts(self, lam):
        return lam["pi"] - self.alpha / self.n_components

    def diagnostics(self, lam):
        return {"active_components": int(np.sum(self.expected_counts(lam) > ACTIVE_THRESHOLD))}

    @staticmethod
    def point_estimate(lam):
        """Posterior means ``(pi_hat, phi_hat)`` under ``q``."""
        pi = lam["pi"] / lam["pi"].sum()
        phi = lam["phi"][..., 0] / lam["phi"].sum(-1)
        return pi, phi


# ---------------------------------------------------------------------------
# Collapsed Gibbs sampler
# ---------------------------------------------------------------------------

@njit(cache=True)
def _collapsed_log_weights(y_n, nk, sk, prior_k, log_int, out):
    K, D = sk.shape
    for k in range(K):
        n = nk[k]
        s = np.log(n + prior_k) - D * log_int[n + 2]
        for d in range(D):
            if y_n[d]:
                s += log_int[sk[k, d] + 1]
            else:
                s += log_int[n - sk[k, d] + 1]
        out[k] = s


@njit(cache=True)
def _cgs_sweep(y, z, nk, sk, prior_k, log_int, order, uniforms):
    K, D = sk.shape
    logw = np.empty(K)
    for i in range(order.shape[0]):
        n = order[i]
        old = z[n]
        nk[old] -= 1
        for d in range(D):
            sk[old, d] -= y[n, d]
        _collapsed_log_weights(y[n], nk, sk, prior_k, log_int, logw)
        m = logw.max()
        total = 0.0
        for k in range(K):
            logw[k] = np.exp(logw[k] - m)
            total += logw[k]
        target = uniforms[i] * total
        acc = 0.0
        new = K - 1
        for k in range(K):
            acc += logw[k]
            if acc > target:
                new = k
                break
        z[n] = new
        nk[new] += 1
        for d in range(D):
            sk[new, d] += y[n, d]


def _counts(y, z, n_components):
    nk = np.bincount(z, minlength=n_components).astype(np.int64)
    sk = np.zeros((n_components, y.shape[1]), dtype=np.int64)
    np.add.at(sk, z, y)
    return nk, sk


def collapsed_conditional(y, z, index, n_components, alpha):
    """``p(z[index] = k | z[-index], y)`` with ``pi`` and ``phi`` integrated out."""
    y = np.asarray(y, dtype=np.int64)
    z = np.asarray(z, dtype=np.int64).copy()
    nk, sk = _counts(y, z, n_components)
    nk[z[index]] -= 1
    sk[z[index]] -= y[index]
    log_int = np.log(np.maximum(np.arange(y.shape[0] + 3), 1e-300))
    out = np.empty(n_components)
    _collapsed_log_weights(y[index], nk, sk, alpha / n_components, log_int, out)
    return np.exp(out - logsumexp(out))


def collapsed_gibbs_transition(y, z, index, n_components, alpha, n_draws, rng):
    """Draw ``z[index]`` from the sampler's kernel ``n_draws`` times, from the same state."""
    y = np.asarray(y, dtype=np.int64)
    z0 = np.asarray(z, dtype=np.int64)
    log_int = np.log(np.maximum(np.arange(y.shape[0] + 3), 1e-300))
    order = np.array([index], dtype=np.int64)
    out = np.empty(n_draws, dtype=np.int64)
    uniforms = rng.random(n_draws)
    for i in range(n_draws):
        zz = z0.copy()
        nk, sk = _counts(y, zz, n_components)
        _cgs_sweep(y, zz, nk, sk, alpha / n_components, log_int, order, uniforms[i : i + 1])
        out[i] = zz[index]
    return out


@dataclass
class CGSResult:
    pi_hat: np.ndarray
    phi_hat: np.ndarray
    mean_counts: np.ndarray
    mean_ones: np.ndarray
    assignments: np.ndarray
    active_trace: np.ndarray
    alpha: float

    @property
    def n_active(self):
        return int(np.sum(self.mean_counts > ACTIVE_THRESHOLD))

    def as_lambda(self):
        """Natural parameters whose posterior means equal the estimates."""
        k = self.mean_counts.shape[0]
        return {
            "pi": self.alpha / k + self.mean_counts,
            "phi": np.stack([1.0 + self.mean_ones, 1.0 + self.mean_counts[:, None] - self.mean_ones], axis=-1),
        }


def collapsed_gibbs(y, n_components=100, alpha=20.0, n_sweeps=500, burn_in=250, rng=None, init_z=None):
    """Collapsed Gibbs sampling for the finite mixture.

    Returns posterior-mean estimates from averaged counts over the sweeps
    after ``burn_in``: ``pi_hat ~ n_k + alpha / K`` and
    ``phi_hat = (s_kd + 1) / (n_k + 2)``.
    """
    if n_sweeps < 1:
        raise ValueError("n_sweeps must be >= 1")
    burn_in = min(burn_in, n_sweeps - 1)
    rng = np.random.default_rng(rng)
    y = np.ascontiguousarray(np.asarray(y, dtype=np.int64))
    n, d = y.shape
    z = rng.integers(n_components, size=n) if init_z is None else np.array(init_z, dtype=np.int64)
    nk, sk = _counts(y, z, n_components)
    log_int = np.log(np.maximum(np.arange(n + 3), 1e-300))
    prior_k = alpha / n_components
    sum_n = np.zeros(n_components)
    sum_s = np.zeros((n_components, d))
    kept = []
    active = np.empty(n_sweeps, dtype=np.int64)
    for sweep in range(n_sweeps):
        order = rng.permutation(n)
        _cgs_sweep(y, z, nk, sk, prior_k, log_int, order, rng.random(n))
        active[sweep] = int(np.sum(nk > 0))
        if sweep >= burn_in:
            sum_n += nk
            sum_s += sk
            kept.append(z.copy())
    m = len(kept)
    mean_n, mean_s = sum_n / m, sum_s / m
    pi_hat = (mean_n + prior_k) / (mean_n + prior_k).sum()
    phi_hat = (mean_s + 1.0) / (mean_n[:, None] + 2.0)
    return CGSResult(pi_hat, phi_hat, mean_n, mean_s, np.array(kept), active, float(alpha))


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def save_dataset(path, dataset):
    meta = {"version": DATASET_VERSION, "kind": "dpmb", "n_used": dataset.n_used}
    arrays = {"y": dataset.y}
    if dataset.true_z is not None:
        arrays["true_z"] = dataset.true_z
    if dataset.true_params is not None:
        arrays["true_pi"] = dataset.true_params.pi
        arrays["true_phi"] = dataset.true_params.phi
        meta["alpha"] = dataset.true_params.alpha
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_dataset(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != DATASET_VERSION or meta.get("kind") != "dpmb":
            raise ValueError(f"{path} is not a version-{DATASET_VERSION} dpmb dataset")
        params = None
        if "true_pi" in data:
            params = DPMBParams(pi=data["true_pi"], phi=data["true_phi"], alpha=meta["alpha"])
        true_z = data["true_z"] if "true_z" in data else None
        return Dataset(y=data["y"], true_z=true_z, true_params=params)


def export_csv(path, dataset):
    """One row per observation: the assignment (if known) then the binary vector."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        d = dataset.y.shape[1]
        writer.writerow(["true_z"] + [f"y{j}" for j in range(d)])
        for i, row in enumerate(dataset.y):
            z = "" if dataset.true_z is None else int(dataset.true_z[i])
            writer.writerow([z] + row.tolist())
