"""scikit-learn style front ends for the mixture and topic models."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .engine import EStep, RunConfig, Schedule, run
from .evaluation import heldout_predictive_lda, mixture_log_likelihood
from .expfam import Dirichlet
from .models.dpmb import ACTIVE_THRESHOLD, DPMBModel, collapsed_gibbs, exact_conditional_estep
from .models.lda import Corpus, LDAModel, lda_meanfield_estep

__all__ = ["DPMBMixture", "CollapsedGibbsDPMB", "StructuredLDA"]


def _binary_matrix(X):
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d binary matrix, got shape {X.shape}")
    if not np.isin(X, (0, 1)).all():
        raise ValueError("entries must be 0 or 1")
    return X.astype(float)


class _MixturePredictMixin(ClusterMixin):
    """Prediction from ``weights_`` and ``bernoulli_means_``."""

    def predict_proba(self, X):
        """Posterior assignment probabilities under the point estimate."""
        check_is_fitted(self, "weights_")
        X = _binary_matrix(X)
        phi = np.clip(self.bernoulli_means_, 1e-12, 1 - 1e-12)
        with np.errstate(divide="ignore"):
            log_pi = np.log(self.weights_)
        log_phi = np.stack([np.log(phi), np.log1p(-phi)], axis=-1)
        return np.atleast_2d(exact_conditional_estep(X, log_pi, log_phi))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score_samples(self, X):
        check_is_fitted(self, "weights_")
        phi = np.clip(self.bernoulli_means_, 1e-12, 1 - 1e-12)
        return mixture_log_likelihood(_binary_matrix(X), self.weights_, phi)

    def score(self, X, y=None):
        """Average log likelihood per observation."""
        return float(self.score_samples(X).mean())


class DPMBMixture(_MixturePredictMixin, BaseEstimator):
    """Truncated Dirichlet-process mixture of Bernoullis fit by stochastic VI.

    Parameters
    ----------
    n_components : int
        Truncation level ``K``.
    alpha : float
        Concentration; the weights prior is ``Dirichlet(alpha / K)``.
    method : {"ssvi-a", "ssvi", "mf"}
        Global update: structured with or without the ``V`` correction, or
        classic mean-field SVI.
    estep : {"exact", "meanfield", "gibbs"}
        Local step.  For this model exact and mean-field coincide.
    n_iter : int
        Number of global updates.
    batch_size : int or None
        Observations per update; ``None`` uses the full data set.
    step_scale, kappa : float
        Step size ``step_scale * t ** -kappa``.
    init_scale : float or None
        Scale of the exponential noise added to the prior at initialisation.
    warm_start : bool
        Continue from ``lambda_`` of a previous fit.
    random_state : int

    Attributes
    ----------
    lambda_ : dict of ndarray
        Variational natural parameters, ``"pi"`` of shape ``(K,)`` and
        ``"phi"`` of shape ``(K, D, 2)``.
    weights_, bernoulli_means_ : ndarray
        Posterior means of the mixture weights and per-component Bernoulli
        parameters.
    expected_counts_ : ndarray
        Expected number of observations per component.
    n_active_ : int
        Components with more than one expected observation.
    trace_ : RunTrace
    """

    def __init__(self, n_components=100, alpha=20.0, method="ssvi-a", estep="exact", n_iter=500,
                 batch_size=None, step_scale=1.0, kappa=0.75, init_scale=None, warm_start=False,
                 random_state=0):
        self.n_components = n_components
        self.alpha = alpha
        self.method = method
        self.estep = estep
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.step_scale = step_scale
        self.kappa = kappa
        self.init_scale = init_scale
        self.warm_start = warm_start
        self.random_state = random_state

    def _config(self):
        return RunConfig(
            mstep=self.method,
            estep=EStep(self.estep),
            schedule=Schedule(self.step_scale, self.kappa),
            batch_size=self.batch_size,
            max_iterations=self.n_iter,
            seed=self.random_state,
            init_scale=self.init_scale,
            diagnostics_every=0,
        )

    def fit(self, X, y=None, init_lambda=None):
        X = _binary_matrix(X)
        model = DPMBModel(X, self.n_components, self.alpha)
        if init_lambda is None and self.warm_start and hasattr(self, "lambda_"):
            init_lambda = self.lambda_
        self.config_ = self._config()
        lam, self.trace_ = run(model, self.config_, init_lambda=init_lambda)
        self.lambda_ = lam
        self.weights_, self.bernoulli_means_ = DPMBModel.point_estimate(lam)
        self.expected_counts_ = model.expected_counts(lam)
        self.n_active_ = int(np.sum(self.expected_counts_ > ACTIVE_THRESHOLD))
        self.n_features_in_ = X.shape[1]
        return self


class CollapsedGibbsDPMB(_MixturePredictMixin, BaseEstimator):
    """Collapsed Gibbs baseline for the same finite mixture.

    Estimates average the count statistics over post burn-in sweeps.
    """

    def __init__(self, n_components=100, alpha=20.0, n_sweeps=500, burn_in=250, random_state=0):
        self.n_components = n_components
        self.alpha = alpha
        self.n_sweeps = n_sweeps
        self.burn_in = burn_in
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _binary_matrix(X)
        res = collapsed_gibbs(X, self.n_components, self.alpha, self.n_sweeps, self.burn_in,
                              rng=self.random_state)
        self.result_ = res
        self.weights_, self.bernoulli_means_ = res.pi_hat, res.phi_hat
        self.expected_counts_ = res.mean_counts
        self.n_active_ = res.n_active
        self.labels_ = res.assignments[-1]
        self.lambda_ = res.as_lambda()
        self.n_features_in_ = X.shape[1]
        return self


def _as_corpus(X, n_words=None):
    if isinstance(X, Corpus):
        return X
    docs = [np.asarray(d, dtype=np.int64) for d in X]
    if n_words is None:
        n_words = 1 + max((int(d.max()) for d in docs if d.size), default=0)
    return Corpus(docs, n_words)


class StructuredLDA(TransformerMixin, BaseEstimator):
    """Latent Dirichlet allocation fit by structured or mean-field SVI.

    ``X`` is a :class:`~ssvi.models.lda.Corpus` or a list of word-index
    arrays.

    Attributes
    ----------
    components_ : ndarray of shape (n_topics, n_words)
        Variational Dirichlet parameters of the topics.
    topics_ : ndarray of shape (n_topics, n_words)
        Posterior-mean topics.
    """

    def __init__(self, n_topics=10, alpha=0.1, eta=0.1, method="ssvi-a", estep="gibbs", n_iter=200,
                 batch_size=100, step_scale=1.0, kappa=0.75, num_samples=5, burn_in=5,
                 init_scale=None, n_words=None, random_state=0):
        self.n_topics = n_topics
        self.alpha = alpha
        self.eta = eta
        self.method = method
        self.estep = estep
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.step_scale = step_scale
        self.kappa = kappa
        self.num_samples = num_samples
        self.burn_in = burn_in
        self.init_scale = init_scale
        self.n_words = n_words
        self.random_state = random_state

    def fit(self, X, y=None):
        corpus = _as_corpus(X, self.n_words)
        model = LDAModel(corpus, self.n_topics, self.alpha, self.eta)
        self.config_ = RunConfig(
            mstep=self.method,
            estep=EStep(self.estep, num_samples=self.num_samples, burn_in=self.burn_in),
            schedule=Schedule(self.step_scale, self.kappa),
            batch_size=self.batch_size,
            max_iterations=self.n_iter,
            seed=self.random_state,
            init_scale=self.init_scale,
            diagnostics_every=0,
        )
        lam, self.trace_ = run(model, self.config_)
        self.components_ = lam["topics"]
        self.topics_ = lam["topics"] / lam["topics"].sum(1, keepdims=True)
        self.n_words_ = corpus.n_words
        return self

    def transform(self, X):
        """Normalised mean-field topic proportions per document."""
        check_is_fitted(self, "components_")
        corpus = _as_corpus(X, self.n_words_)
        elog = Dirichlet().grad_log_normalizer(self.components_)
        out = np.empty((len(corpus), self.n_topics))
        for i, doc in enumerate(corpus.docs):
            gamma = lda_meanfield_estep(doc, elog, self.alpha).gamma
            out[i] = gamma / gamma.sum()
        return out

    def score(self, X, y=None):
        """Document-completion log likelihood per held-out word."""
        check_is_fitted(self, "components_")
        return heldout_predictive_lda(_as_corpus(X, self.n_words_).docs, self.topics_, self.alpha)
