"""Latent Dirichlet allocation with Dirichlet topic distributions as globals.

Topics ``beta[k]`` are the global variables, one ``Dirichlet(lambda[k])``
per topic under ``q``.  The local variables of a document are its topic
proportions and per-token assignments; the conjugate statistic of a
document is its topic-by-word count matrix.

Two local E-steps are provided:

* Gibbs: collapsed over the topic proportions, sweeping
  ``p(z_m = k) ~ (alpha + c_k^{-m}) beta[k, w_m]`` and averaging the count
  matrix over retained sweeps.  Assignments persist per document between
  visits.
* Mean-field: coordinate ascent on ``phi[m, k] ~ beta[k, w_m] exp(psi(gamma_k))``,
  ``gamma = alpha + sum_m phi[m]``.

Both take log topic values, so passing ``E_q[log beta]`` instead of the log
of a draw gives classic SVI.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numba import njit
from scipy.special import digamma, gammaln

from ..engine import ConjugateModel, EStepKind
from ..expfam import Dirichlet

__all__ = [
    "Corpus",
    "LDAModel",
    "GibbsResult",
    "MeanFieldResult",
    "synth_corpus",
    "lda_gibbs_estep",
    "lda_meanfield_estep",
    "lda_local_elbo",
    "lda_apply_V",
    "read_corpus",
    "write_corpus",
    "export_topics_csv",
]


@dataclass
class Corpus:
    docs: List[np.ndarray]
    n_words: int
    topics: Optional[np.ndarray] = None

    def __post_init__(self):
        self.docs = [np.asarray(d, dtype=np.int64).ravel() for d in self.docs]
        for d in self.docs:
            if d.size and (d.min() < 0 or d.max() >= self.n_words):
                raise ValueError(f"word index outside [0, {self.n_words})")

    def __len__(self):
        return len(self.docs)

    @property
    def n_tokens(self):
        return int(sum(d.size for d in self.docs))

    def subset(self, index):
        return Corpus([self.docs[i] for i in index], self.n_words, self.topics)

    def count_matrix(self, index=None):
        index = range(len(self.docs)) if index is None else index
        out = np.zeros((len(index), self.n_words))
        for row, i in enumerate(index):
            np.add.at(out[row], self.docs[i], 1.0)
        return out


def synth_corpus(n_topics=10, n_words=200, n_docs=2000, doc_len=50, alpha=0.1, eta=0.1, seed=0):
    """Forward-sample LDA; the true topics ride along on the corpus."""
    rng = np.random.default_rng(seed)
    topics = rng.dirichlet(np.full(n_words, eta), size=n_topics)
    topics = np.maximum(topics, 1e-300)
    topics /= topics.sum(1, keepdims=True)
    docs = []
    for _ in range(n_docs):
        theta = rng.dirichlet(np.full(n_topics, alpha)) if n_topics > 1 else np.ones(1)
        if not np.all(np.isfinite(theta)) or theta.sum() <= 0:
            theta = np.eye(n_topics)[rng.integers(n_topics)]
        z = rng.choice(n_topics, size=doc_len, p=theta / theta.sum())
        u = rng.random(doc_len)
        cdf = np.cumsum(topics[z], axis=1)
        words = np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(1), n_words - 1)
        docs.append(words)
    return Corpus(docs, n_words, topics)


def _column_scaled(log_beta):
    # beta[k, w] / max_k beta[k, w]; the per-word scale cancels in every
    # local update and keeps underflowed draws usable
    return np.exp(log_beta - log_beta.max(0, keepdims=True))


@njit(cache=True)
def _gibbs_docs(tokens, offsets, z, bcol, alpha, n_burn, n_keep, uniforms, stats):
    K = bcol.shape[0]
    counts = np.zeros(K)
    p = np.empty(K)
    for d in range(offsets.shape[0] - 1):
        lo, hi = offsets[d], offsets[d + 1]
        counts[:] = 0.0
        for m in range(lo, hi):
            counts[z[m]] += 1.0
        for sweep in range(n_burn + n_keep):
            for m in range(lo, hi):
                w = tokens[m]
                counts[z[m]] -= 1.0
                total = 0.0
                for k in range(K):
                    total += (alpha + counts[k]) * bcol[k, w]
                    p[k] = total
                target = uniforms[sweep, m] * total
                new = K - 1
                for k in range(K):
                    if p[k] > target:
                        new = k
                        break
                z[m] = new
                counts[new] += 1.0
            if sweep >= n_burn:
                for m in range(lo, hi):
                    stats[z[m], tokens[m]] += 1.0


def _initial_assignments(tokens, bcol, rng):
    p = bcol[:, tokens]
    cdf = np.cumsum(p, axis=0)
    u = rng.random(tokens.size) * cdf[-1]
    return np.minimum((cdf < u).sum(0), bcol.shape[0] - 1).astype(np.int64)


@dataclass
class GibbsResult:
    stats: np.ndarray
    z: np.ndarray


def lda_gibbs_estep(doc, log_beta, alpha, num_samples, burn_in, rng, z=None):
    """Gibbs local step for one document.

    Parameters
    ----------
    doc : array of int
    log_beta : array of shape (K, V)
    alpha : float
    num_samples, burn_in : int
        Retained and discarded sweeps.
    rng : numpy Generator
    z : array of int, optional
        Starting assignments; drawn from the word's topic weights otherwise.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    doc = np.asarray(doc, dtype=np.int64)
    log_beta = np.asarray(log_beta, dtype=float)
    stats = np.zeros(log_beta.shape)
    if doc.size == 0:
        return GibbsResult(stats, np.empty(0, dtype=np.int64))
    bcol = _column_scaled(log_beta)
    z = _initial_assignments(doc, bcol, rng) if z is None else np.array(z, dtype=np.int64)
    uniforms = rng.random((burn_in + num_samples, doc.size))
    offsets = np.array([0, doc.size], dtype=np.int64)
    _gibbs_docs(doc, offsets, z, bcol, float(alpha), burn_in, num_samples, uniforms, stats)
    return GibbsResult(stats / num_samples, z)


@dataclass
class MeanFieldResult:
    stats: np.ndarray
    gamma: np.ndarray
    converged: bool
    n_iter: int
    elbo_trace: list = field(default_factory=list)


def _meanfield_batch(counts, bcol, alpha, max_iters, tol, gamma=None):
    n_docs, k = counts.shape[0], bcol.shape[0]
    if gamma is None:
        gamma = np.full((n_docs, k), alpha) + counts.sum(1, keepdims=True) / k
    gamma = np.array(gamma, dtype=float)
    active = np.ones(n_docs, dtype=bool)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        idx = np.flatnonzero(active)
        g = gamma[idx]
        exp_theta = np.exp(digamma(g) - digamma(g.sum(1, keepdims=True)))
        ratio = counts[idx] / (exp_theta @ bcol + 1e-300)
        new = alpha + exp_theta * (ratio @ bcol.T)
        change = np.abs(new - g).mean(1)
        gamma[idx] = new
        active[idx] = change >= tol
        if not active.any():
            break
    exp_theta = np.exp(digamma(gamma) - digamma(gamma.sum(1, keepdims=True)))
    ratio = counts / (exp_theta @ bcol + 1e-300)
    stats = (exp_theta.T @ ratio) * bcol
    return stats, gamma, not active.any(), n_iter


def lda_meanfield_estep(doc, log_beta, alpha, max_iters=100, tol=1e-3, gamma=None, track_elbo=False):
    """Mean-field local step for one document.

    Returns a :class:`MeanFieldResult`; ``converged`` is False when the mean
    absolute change of ``gamma`` was still above ``tol`` after ``max_iters``.
    """
    doc = np.asarray(doc, dtype=np.int64)
    log_beta = np.asarray(log_beta, dtype=float)
    k, v = log_beta.shape
    if doc.size == 0:
        return MeanFieldResult(np.zeros((k, v)), np.full(k, float(alpha)), True, 0)
    counts = np.bincount(doc, minlength=v)[None, :].astype(float)
    bcol = _column_scaled(log_beta)
    g0 = None if gamma is None else np.asarray(gamma, dtype=float)[None, :]
    if not track_elbo:
        stats, g, ok, n = _meanfield_batch(counts, bcol, alpha, max_iters, tol, g0)
        return MeanFieldResult(stats, g[0], ok, n)
    elbos = []
    g = g0
    ok = False
    n = 0
    for n in range(1, max_iters + 1):
        prev = None if g is None else g.copy()
        stats, g, _, _ = _meanfield_batch(counts, bcol, alpha, 1, 0.0, g)
        elbos.append(lda_local_elbo(doc, log_beta, alpha, g[0]))
        if prev is not None and np.abs(g - prev).mean() < tol:
            ok = True
            break
    return MeanFieldResult(stats, g[0], ok, n, elbos)


def lda_local_elbo(doc, log_beta, alpha, gamma):
    """Local bound ``E[log p(theta, z, w | beta)] - E[log q(theta, z)]``.

    ``phi`` is set to its optimum given ``gamma``.
    """
    doc = np.asarray(doc, dtype=np.int64)
    gamma = np.asarray(gamma, dtype=float)
    k = gamma.size
    elog_theta = digamma(gamma) - digamma(gamma.sum())
    lw = log_beta[:, doc] + elog_theta[:, None]
    m = lw.max(0)
    log_norm = m + np.log(np.exp(lw - m).sum(0))
    # sum_m sum_k phi (E log theta + log beta - log phi) = sum_m log_norm
    words = log_norm.sum()
    prior = gammaln(k * alpha) - k * gammaln(alpha) + (alpha - 1) * elog_theta.sum()
    entropy_theta = -(gammaln(gamma.sum()) - gammaln(gamma).sum() + ((gamma - 1) * elog_theta).sum())
    return float(words + prior + entropy_theta)


def lda_apply_V(draw, lam, stats):
    """Per-topic ``V`` product; ``lam`` and ``stats`` may carry a leading topic axis."""
    return Dirichlet().apply_V(draw, lam, stats)


class LDAModel(ConjugateModel):
    """LDA over a :class:`Corpus` for :func:`ssvi.engine.run`.

    The exact conditional over a document's assignments is intractable, so
    the exact E-step falls back to Gibbs sampling.
    """

    families = {"topics": Dirichlet()}
    supported_esteps = (EStepKind.EXACT, EStepKind.MEANFIELD, EStepKind.GIBBS)

    def __init__(self, corpus, n_topics=10, alpha=0.1, eta=0.1, heldout=None):
        self.corpus = corpus
        self.n_topics = int(n_topics)
        self.alpha = float(alpha)
        self.eta = float(eta)
        self.heldout = heldout
        self._z = {}

    @property
    def n_groups(self):
        return len(self.corpus)

    def prior(self):
        return {"topics": np.full((self.n_topics, self.corpus.n_words), self.eta)}

    def begin_run(self):
        self._z = {}

    def local_stats(self, batch, t_beta, estep, rng):
        log_beta = t_beta["topics"]
        bcol = _column_scaled(log_beta)
        if estep.kind is EStepKind.MEANFIELD:
            counts = self.corpus.count_matrix(batch)
            stats, _, _, _ = _meanfield_batch(counts, bcol, self.alpha, estep.max_iters, estep.tol)
            return {"topics": stats}
        docs = [self.corpus.docs[i] for i in batch]
        keep = [j for j, d in enumerate(docs) if d.size]
        stats = np.zeros(log_beta.shape)
        if not keep:
            return {"topics": stats}
        tokens = np.concatenate([docs[j] for j in keep])
        offsets = np.concatenate([[0], np.cumsum([docs[j].size for j in keep])]).astype(np.int64)
        z_parts = []
        for j in keep:
            i = int(batch[j])
            if i not in self._z:
                self._z[i] = _initial_assignments(docs[j], bcol, rng)
            z_parts.append(self._z[i])
        z = np.concatenate(z_parts)
        uniforms = rng.random((estep.burn_in + estep.num_samples, tokens.size))
        _gibbs_docs(tokens, offsets, z, bcol, self.alpha, estep.burn_in, estep.num_samples, uniforms, stats)
        stats /= estep.num_samples
        for n, j in enumerate(keep):
            self._z[int(batch[j])] = z[offsets[n] : offsets[n + 1]].copy()
        return {"topics": stats}

    def diagnostics(self, lam):
        if self.heldout is None:
            return {}
        from ..evaluation import heldout_predictive_lda

        topics = lam["topics"] / lam["topics"].sum(1, keepdims=True)
        return {"heldout_loglik": heldout_predictive_lda(self.heldout.docs, topics, self.alpha)}


def write_corpus(path, corpus):
    """Header ``V=<vocabulary size>`` then one document per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"V={corpus.n_words}\n")
        for doc in corpus.docs:
            fh.write(" ".join(str(int(w)) for w in doc) + "\n")


def read_corpus(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("V="):
            raise ValueError(f"{path}: expected a 'V=<size>' header line")
        n_words = int(header[2:])
        docs = [np.array(line.split(), dtype=np.int64) for line in fh.read().splitlines()]
    return Corpus(docs, n_words)


def export_topics_csv(path, topics):
    np.savetxt(path, np.asarray(topics), delimiter=",", fmt="%.10g",
               header=",".join(f"w{v}" for v in range(np.shape(topics)[1])), comments="")
