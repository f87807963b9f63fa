"""Acceptance suite: one test per criterion, each reporting PASS or FAIL.

The DPMB reproduction runs are shared by criteria 1, 2 and 8 and take a
few minutes per seed; they carry the ``slow`` marker.
"""

import math
import time

import numpy as np
import pytest

from ssvi.engine import EStep, RunConfig, mstep_ssvi_a, natural_gradient, run
from ssvi.evaluation import BetaBernoulliModel, elbo_oracle_beta_bernoulli, heldout_predictive_lda, mc_kl_dpmb
from ssvi.expfam import Dirichlet, Gamma, GlobalDraw
from ssvi.models.dpmb import (
    DPMBModel,
    collapsed_conditional,
    collapsed_gibbs,
    collapsed_gibbs_transition,
    eta_hat_from_responsibilities,
    generate,
)
from ssvi.models.lda import LDAModel, lda_apply_V, lda_gibbs_estep, synth_corpus
from oracles import dense_V, dpmb_pair_joint, fd_hessian, lda_two_word_joint, sampler_fd, total_variation

DIR, GAM = Dirichlet(), Gamma()
SEEDS = range(5)

# DPMB reproduction setup
DATASET_SEED = 28  # true usage 57 components, 52 of them with two or more points
K, ALPHA = 100, 20.0
SSVI_A_ITERS, MF_ITERS = 2000, 500
CGS_SWEEPS, CGS_BURN_IN = 1000, 500
KL_SAMPLES = 100_000


def _kl(ds, pi, phi):
    return mc_kl_dpmb(ds.true_params, (pi, phi), KL_SAMPLES, rng=1)


def _summarise(model, lam, ds, seconds):
    pi, phi = DPMBModel.point_estimate(lam)
    counts = model.expected_counts(lam)
    return {"active": int(np.sum(counts > 1.0)), "kl": _kl(ds, pi, phi).value, "seconds": seconds}


@pytest.fixture(scope="module")
def dpmb_runs():
    ds = generate(n_components=K, alpha=ALPHA, seed=DATASET_SEED)
    assert 50 <= ds.n_used <= 60
    model = DPMBModel(ds.y, K, ALPHA)
    runs = []
    for seed in SEEDS:
        row = {}
        for mstep, iters in (("ssvi-a", SSVI_A_ITERS), ("mf", MF_ITERS)):
            t0 = time.perf_counter()
            lam, _ = run(model, RunConfig(mstep=mstep, estep=EStep("exact"), max_iterations=iters, seed=seed,
                                          diagnostics_every=0))
            row[mstep] = _summarise(model, lam, ds, time.perf_counter() - t0)
            row[mstep + "_lambda"] = lam
        t0 = time.perf_counter()
        lam, _ = run(model, RunConfig(mstep="mf", max_iterations=MF_ITERS, seed=seed, diagnostics_every=0),
                     init_lambda=row["ssvi-a_lambda"])
        row["warm"] = _summarise(model, lam, ds, time.perf_counter() - t0)
        t0 = time.perf_counter()
        res = collapsed_gibbs(ds.y, K, ALPHA, n_sweeps=CGS_SWEEPS, burn_in=CGS_BURN_IN, rng=seed)
        row["cgs"] = {"active": res.n_active, "kl": _kl(ds, res.pi_hat, res.phi_hat).value,
                      "seconds": time.perf_counter() - t0}
        runs.append(row)
        print(f"seed {seed}: " + "  ".join(f"{m} {row[m]['active']}/{row[m]['kl']:.3f}/{row[m]['seconds']:.0f}s"
                                         for m in ("ssvi-a", "mf", "warm", "cgs")))
    return runs


@pytest.mark.slow
def test_criterion_1_active_components(dpmb_runs, verdict):
    counts = {m: [r[m]["active"] for r in dpmb_runs] for m in ("ssvi-a", "mf", "cgs")}
    slowest = max(r[m]["seconds"] for r in dpmb_runs for m in ("ssvi-a", "mf", "cgs"))
    ok = (min(counts["ssvi-a"]) >= 45 and max(counts["mf"]) <= 35 and min(counts["cgs"]) >= 48
          and slowest < 600)
    verdict(1, ok, f"ssvi-a {counts['ssvi-a']} mf {counts['mf']} cgs {counts['cgs']} slowest run {slowest:.0f}s")


@pytest.mark.slow
def test_criterion_2_kl_ordering(dpmb_runs, verdict):
    good = 0
    for r in dpmb_runs:
        s, m, c = r["ssvi-a"]["kl"], r["mf"]["kl"], r["cgs"]["kl"]
        good += s <= 3.0 and c <= 3.0 and m >= 4.0 and s <= 0.6 * m
    kls = {m: [round(r[m]["kl"], 3) for r in dpmb_runs] for m in ("ssvi-a", "mf", "cgs")}
    verdict(2, good >= 4, f"{good}/5 seeds in band; ssvi-a {kls['ssvi-a']} mf {kls['mf']} cgs {kls['cgs']}")


def _gradient_check(y, emission, rng, n=10_000):
    model = BetaBernoulliModel(y, prior=(1.0, 1.0), emission=emission)
    lam, eta = np.array([3.0, 2.0]), np.array([1.0, 1.0])
    draws = DIR.sample(np.tile(lam, (n, 1)), rng)
    grads = np.empty((n, 2))
    for i in range(n):
        d = GlobalDraw(*(f[i] for f in (draws.beta, draws.log_beta, draws.uniforms, draws.auxiliaries,
                                         draws.log_auxiliaries)))
        stats = model.local_stats(np.arange(y.size), {"beta": d.log_beta}, EStep(), None)["beta"]
        grads[i] = natural_gradient(DIR, d, lam, eta, stats)
    _, grad = elbo_oracle_beta_bernoulli(lam, eta, y, emission=emission)
    target = DIR.fisher_inverse_apply(lam, grad)
    z = (grads.mean(0) - target) / (grads.std(0, ddof=1) / math.sqrt(n))
    return z


def test_criterion_3_gradient_unbiasedness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    z_plain = _gradient_check(np.array([1, 0, 1, 1, 0, 1, 1, 1, 0, 1]), None, rng)
    # latent-label variant: the local E-step is non-trivial
    emission = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]])
    z_mix = _gradient_check(rng.integers(3, size=20), emission, rng)
    secs = time.perf_counter() - t0
    ok = np.all(np.abs(z_plain) < 4) and np.all(np.abs(z_mix) < 4) and secs < 60
    verdict(3, ok, f"z plain {np.round(z_plain, 2)} z mixture {np.round(z_mix, 2)} in {secs:.0f}s")


def test_criterion_4_expected_V_identity(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    n, worst = 10_000, 0.0
    for k in (3, 5):
        lam = rng.uniform(0.3, 6.0, size=k)
        lam_n = np.tile(lam, (n, 1))
        d = DIR.sample(lam_n, rng)
        V = np.stack([DIR.apply_V(d, lam_n, np.tile(e, (n, 1))) for e in np.eye(k)], axis=-1)
        z = (V.mean(0) - np.eye(k)) / (V.std(0, ddof=1) / math.sqrt(n))
        worst = max(worst, float(np.abs(z).max()))
    secs = time.perf_counter() - t0
    verdict(4, worst < 4 and secs < 60, f"max |z| {worst:.2f} over K=3,5 in {secs:.1f}s")


def test_criterion_5_derivative_identities(verdict):
    rng = np.random.default_rng(5)
    fisher_err = jac_err = v_err = 0.0
    for _ in range(5):
        lam = rng.uniform(0.2, 10.0, size=5)
        f = DIR.fisher(lam)
        fisher_err = max(fisher_err, float(np.max(np.abs(f - fd_hessian(DIR, lam)) / np.abs(f))))
        g = rng.uniform([0.5, 0.2], [20.0, 5.0])
        fg = GAM.fisher(g)
        fisher_err = max(fisher_err, float(np.max(np.abs(fg - fd_hessian(GAM, g)) / np.abs(fg))))

        u = rng.uniform(0.05, 0.95, size=5)
        lam3 = rng.uniform(0.3, 8.0, size=5)
        jac = DIR.quantile_jacobian(DIR.sample_by_inversion(lam3, u), lam3)
        fd = sampler_fd(DIR, lam3, u)
        jac_err = max(jac_err, float(np.max(np.abs(jac - fd) / (np.abs(fd) + 1e-12))))
        gj = GAM.quantile_jacobian(GAM.sample_by_inversion(g, np.array(u[0])), g)
        gfd = sampler_fd(GAM, g, np.array(u[0]))
        jac_err = max(jac_err, float(np.max(np.abs(gj - gfd) / (np.abs(gfd) + 1e-12))))

        topics = rng.uniform(0.1, 4.0, size=(4, 7))
        d = DIR.sample(topics, rng)
        s = rng.uniform(0, 10, size=(4, 7))
        out = lda_apply_V(d, topics, s)
        jk = DIR.quantile_jacobian(d, topics)
        for k in range(4):
            dense = dense_V(topics[k], d.beta[k], jk[k]) @ s[k]
            v_err = max(v_err, float(np.max(np.abs(out[k] - dense) / np.abs(dense))))
    ok = fisher_err <= 1e-5 and jac_err <= 1e-3 and v_err <= 1e-8
    verdict(5, ok, f"fisher rel {fisher_err:.1e} jacobian rel {jac_err:.1e} lda V rel {v_err:.1e}")


class _ObservedAssignments(DPMBModel):
    """DPMB whose local step returns the counts implied by known labels."""

    def __init__(self, y, z, k, alpha):
        super().__init__(y, k, alpha)
        self.z = z

    def local_stats(self, batch, t_beta, estep, rng):
        return eta_hat_from_responsibilities(self.y[batch], np.eye(self.n_components)[self.z[batch]])


def test_criterion_6_conjugate_exactness(verdict):
    k, alpha = 4, 2.0
    ds = generate(n_components=k, n_features=6, n_samples=10, alpha=alpha, seed=6)
    y, z = ds.y, ds.true_z
    # posterior by integer counting
    ones = np.zeros((k, y.shape[1]), dtype=np.int64)
    np.add.at(ones, z, y)
    n_k = np.bincount(z, minlength=k)
    post_pi = alpha / k + n_k
    post_phi = np.stack([1.0 + ones, 1.0 + (n_k[:, None] - ones)], axis=-1)

    model = _ObservedAssignments(y, z, k, alpha)
    eta, stats = model.prior(), model.local_stats(np.arange(10), None, EStep(), None)
    rng = np.random.default_rng(0)
    direct = {f: mstep_ssvi_a(rng.uniform(0.5, 9.0, size=eta[f].shape), eta[f], stats[f], 1.0) for f in eta}
    lam, _ = run(model, RunConfig(mstep="ssvi-a", max_iterations=1, seed=3))
    exact = all(np.array_equal(x["pi"], post_pi) and np.array_equal(x["phi"], post_phi) for x in (direct, lam))
    verdict(6, exact, "bit-identical to counted posterior" if exact else "posterior differs")


LDA_ETAS = (0.01, 0.1, 1.0)


@pytest.mark.slow
def test_criterion_7_lda_directional(verdict):
    t0 = time.perf_counter()
    corpus = synth_corpus(seed=0)
    train, test = corpus.subset(np.arange(1800)), corpus.subset(np.arange(1800, 2000))
    good, lines = 0, []
    for seed in SEEDS:
        score = {}
        for eta in LDA_ETAS:
            for mstep, estep in (("ssvi-a", "gibbs"), ("mf", "meanfield")):
                cfg = RunConfig(mstep=mstep, estep=EStep(estep), batch_size=100, max_iterations=200, seed=seed,
                                diagnostics_every=0)
                lam, _ = run(LDAModel(train, 10, 0.1, eta), cfg)
                topics = lam["topics"] / lam["topics"].sum(1, keepdims=True)
                score[mstep, eta] = heldout_predictive_lda(test.docs, topics, 0.1)
        ssvi = np.array([score["ssvi-a", e] for e in LDA_ETAS])
        mf = np.array([score["mf", e] for e in LDA_ETAS])
        ok = bool(np.all(ssvi >= mf) and np.ptp(ssvi) <= np.ptp(mf))
        good += ok
        lines.append(f"seed {seed}: ssvi-a {np.round(ssvi, 3)} mf {np.round(mf, 3)}")
    secs = time.perf_counter() - t0
    print("\n".join(lines))
    verdict(7, good >= 4 and secs < 1800, f"{good}/5 seeds; {secs:.0f}s")


@pytest.mark.slow
def test_criterion_8_warm_start(dpmb_runs, verdict):
    warm = [round(r["warm"]["kl"], 3) for r in dpmb_runs]
    cold = [round(r["mf"]["kl"], 3) for r in dpmb_runs]
    good = sum(r["warm"]["kl"] <= r["mf"]["kl"] for r in dpmb_runs)
    verdict(8, good >= 4, f"{good}/5 seeds; warm {warm} random init {cold}")


def test_criterion_9_gibbs_kernels(verdict):
    n = 100_000
    rng = np.random.default_rng(9)
    beta = rng.dirichlet(np.ones(3), size=2)
    lda_tv = []
    for words in ((0, 1), (2, 2)):
        doc = np.array(words)
        counts = np.zeros((2, 2))
        z = None
        for _ in range(n):
            z = lda_gibbs_estep(doc, np.log(beta), 0.2, 1, 0, rng, z=z).z
            counts[z[0], z[1]] += 1
        lda_tv.append(total_variation(counts / n, lda_two_word_joint(doc, beta, 0.2)))

    y = np.array([[1, 0, 1], [1, 1, 1]])
    joint = dpmb_pair_joint(y, 3, 1.5)
    exact = joint[1] / joint[1].sum()  # z_2 | z_1 = second component
    assert np.allclose(collapsed_conditional(y, np.array([1, 0]), 1, 3, 1.5), exact, rtol=1e-12)
    draws = collapsed_gibbs_transition(y, np.array([1, 0]), 1, 3, 1.5, n, rng)
    dpmb_tv = total_variation(np.bincount(draws, minlength=3) / n, exact)
    ok = max(lda_tv) < 0.01 and dpmb_tv < 0.01
    verdict(9, ok, f"lda TV {np.round(lda_tv, 4)} dpmb TV {dpmb_tv:.4f}")
