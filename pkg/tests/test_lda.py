import math

import numpy as np
import pytest

from ssvi.engine import EStep, RunConfig, run
from ssvi.expfam import Dirichlet
from ssvi.models.lda import (
    Corpus,
    LDAModel,
    export_topics_csv,
    lda_apply_V,
    lda_gibbs_estep,
    lda_local_elbo,
    lda_meanfield_estep,
    read_corpus,
    synth_corpus,
    write_corpus,
)
from oracles import dense_V, lda_two_word_joint, total_variation

DIR = Dirichlet()


def _log_topics(rng, k, v, conc=1.0):
    return np.log(rng.dirichlet(np.full(v, conc), size=k))


class TestGibbs:
    def test_single_word_marginal(self):
        rng = np.random.default_rng(0)
        lb = _log_topics(rng, 3, 4)
        res = lda_gibbs_estep(np.array([2]), lb, 0.3, 50_000, 0, rng)
        expect = np.exp(lb[:, 2]) / np.exp(lb[:, 2]).sum()
        se = np.sqrt(expect * (1 - expect) / 50_000)
        assert np.all(np.abs(res.stats[:, 2] - expect) < 4 * se + 1e-12)
        assert res.stats[:, [0, 1, 3]].sum() == 0

    def test_single_topic(self):
        doc = np.array([0, 3, 3, 1])
        res = lda_gibbs_estep(doc, np.log(np.full((1, 5), 0.2)), 0.1, 3, 2, np.random.default_rng(1))
        np.testing.assert_array_equal(res.stats[0], np.bincount(doc, minlength=5))

    @pytest.mark.parametrize("words", [(0, 1), (2, 2)])
    def test_two_word_joint_matches_enumeration(self, words):
        rng = np.random.default_rng(5)
        beta = rng.dirichlet(np.ones(3), size=2)
        lb, alpha, doc = np.log(beta), 0.2, np.array(words)
        exact = lda_two_word_joint(doc, beta, alpha)
        n = 100_000
        counts = np.zeros((2, 2))
        z = None
        for _ in range(n):
            res = lda_gibbs_estep(doc, lb, alpha, 1, 0, rng, z=z)
            z = res.z
            counts[z[0], z[1]] += 1
        assert total_variation(counts / n, exact) < 0.01

    def test_mass_conservation(self):
        c = synth_corpus(n_docs=20, seed=2)
        lb = _log_topics(np.random.default_rng(0), 10, 200)
        for d in c.docs[:5]:
            res = lda_gibbs_estep(d, lb, 0.1, 5, 5, np.random.default_rng(1))
            assert res.stats.sum() == pytest.approx(d.size, abs=1e-10)

    def test_underflowed_draw_is_usable(self):
        lb = np.array([[-800.0, -0.1], [-900.0, -3.0]])
        res = lda_gibbs_estep(np.array([0, 0, 1]), lb, 0.1, 2, 0, np.random.default_rng(0))
        assert np.isfinite(res.stats).all() and res.stats.sum() == pytest.approx(3)


class TestMeanField:
    def test_single_topic(self):
        doc = np.array([0, 3, 3, 1])
        res = lda_meanfield_estep(doc, np.log(np.full((1, 5), 0.2)), 0.1)
        np.testing.assert_allclose(res.stats[0], np.bincount(doc, minlength=5), rtol=1e-12)

    def test_symmetric_topics_uniform(self):
        row = np.log([0.1, 0.6, 0.3])
        res = lda_meanfield_estep(np.array([0, 1, 1, 2]), np.tile(row, (4, 1)), 0.5)
        np.testing.assert_allclose(res.stats, np.tile(np.bincount([0, 1, 1, 2], minlength=3) / 4, (4, 1)), rtol=1e-10)

    def test_fixed_point_from_random_starts(self):
        rng = np.random.default_rng(3)
        lb = _log_topics(rng, 2, 3)
        doc = np.array([0, 2, 2])
        outs = [
            lda_meanfield_estep(doc, lb, 0.5, max_iters=5000, tol=1e-14, gamma=rng.uniform(0.5, 4, 2)).stats
            for _ in range(5)
        ]
        for o in outs[1:]:
            np.testing.assert_allclose(o, outs[0], atol=1e-8)

    def test_elbo_monotone(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            lb = _log_topics(rng, 4, 12, 0.3)
            doc = rng.integers(12, size=25)
            res = lda_meanfield_estep(doc, lb, 0.1, max_iters=200, tol=1e-9, track_elbo=True)
            assert np.all(np.diff(res.elbo_trace) >= -1e-9)

    def test_mass_conservation(self):
        rng = np.random.default_rng(0)
        lb = _log_topics(rng, 5, 30)
        doc = rng.integers(30, size=40)
        assert lda_meanfield_estep(doc, lb, 0.1).stats.sum() == pytest.approx(40, abs=1e-10)

    def test_nonconvergence_flag(self):
        rng = np.random.default_rng(1)
        res = lda_meanfield_estep(rng.integers(30, size=40), _log_topics(rng, 5, 30), 0.1, max_iters=1, tol=1e-12)
        assert not res.converged and res.n_iter == 1

    def test_local_elbo_is_a_bound(self):
        # the bound never exceeds log p(w | beta), computed here by enumeration
        rng = np.random.default_rng(6)
        beta = rng.dirichlet(np.ones(4), size=2)
        doc, alpha = np.array([1, 3]), 0.4
        res = lda_meanfield_estep(doc, np.log(beta), alpha, tol=1e-12)
        k = 2
        log_p = 0.0
        total = 0.0
        for z1 in range(k):
            for z2 in range(k):
                prior = (alpha / (k * alpha)) * ((alpha + (z1 == z2)) / (k * alpha + 1))
                total += prior * beta[z1, 1] * beta[z2, 3]
        log_p = math.log(total)
        assert lda_local_elbo(doc, np.log(beta), alpha, res.gamma) <= log_p + 1e-12


class TestApplyV:
    def test_zero_and_linearity(self):
        rng = np.random.default_rng(0)
        lam = rng.uniform(0.1, 5, size=(3, 6))
        d = DIR.sample(lam, rng)
        np.testing.assert_array_equal(lda_apply_V(d, lam, np.zeros((3, 6))), 0.0)
        a, b = rng.random((3, 6)), rng.random((3, 6))
        np.testing.assert_allclose(
            lda_apply_V(d, lam, 2 * a - 3 * b), 2 * lda_apply_V(d, lam, a) - 3 * lda_apply_V(d, lam, b), rtol=1e-9
        )

    def test_dense_assembly_v3(self):
        rng = np.random.default_rng(1)
        lam = rng.uniform(0.2, 3, size=(4, 3))
        d = DIR.sample(lam, rng)
        s = rng.uniform(0, 10, size=(4, 3))
        out = lda_apply_V(d, lam, s)
        jac = DIR.quantile_jacobian(d, lam)
        for k in range(4):
            np.testing.assert_allclose(out[k], dense_V(lam[k], d.beta[k], jac[k]) @ s[k], rtol=1e-8)

    def test_expected_V_identity_v5(self):
        rng = np.random.default_rng(2)
        lam = np.array([0.5, 1.0, 2.0, 4.0, 0.8])
        n = 10_000
        lam_n = np.tile(lam, (n, 1))
        d = DIR.sample(lam_n, rng)
        V = np.stack([lda_apply_V(d, lam_n, np.tile(e, (n, 1))) for e in np.eye(5)], axis=-1)
        mean, se = V.mean(0), V.std(0) / math.sqrt(n)
        assert np.all(np.abs(mean - np.eye(5)) < 4 * se)


class TestCorpus:
    def test_empty_documents(self):
        c = synth_corpus(doc_len=0, n_docs=5, seed=0)
        assert len(c) == 5 and c.n_tokens == 0

    def test_single_topic_frequencies(self):
        c = synth_corpus(n_topics=1, n_words=20, n_docs=400, doc_len=50, seed=1)
        freq = np.bincount(np.concatenate(c.docs), minlength=20) / c.n_tokens
        np.testing.assert_allclose(freq, c.topics[0], atol=0.01)

    def test_defaults(self):
        c = synth_corpus(seed=3)
        assert len(c) == 2000 and c.n_words == 200 and c.topics.shape == (10, 200)
        assert all(d.size == 50 for d in c.docs)

    def test_index_validation(self):
        with pytest.raises(ValueError):
            Corpus([np.array([0, 5])], 5)

    def test_io_roundtrip(self, tmp_path):
        c = synth_corpus(n_docs=30, seed=4)
        write_corpus(tmp_path / "c.txt", c)
        lines = (tmp_path / "c.txt").read_text().splitlines()
        assert lines[0] == "V=200" and len(lines) == 31
        back = read_corpus(tmp_path / "c.txt")
        assert back.n_words == 200 and all(np.array_equal(a, b) for a, b in zip(back.docs, c.docs))
        export_topics_csv(tmp_path / "t.csv", c.topics)
        t = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
        np.testing.assert_allclose(t, c.topics, rtol=1e-9)

    def test_count_matrix(self):
        c = Corpus([np.array([0, 0, 2]), np.array([], dtype=int)], 3)
        np.testing.assert_array_equal(c.count_matrix(), [[2, 0, 1], [0, 0, 0]])


class TestModel:
    @pytest.mark.parametrize("mstep", ["mf", "ssvi", "ssvi-a"])
    @pytest.mark.parametrize("estep", ["exact", "meanfield", "gibbs"])
    def test_every_cell_runs(self, mstep, estep):
        c = synth_corpus(n_topics=3, n_words=15, n_docs=40, doc_len=12, seed=0)
        model = LDAModel(c.subset(range(30)), 3, 0.1, 0.1, heldout=c.subset(range(30, 40)))
        lam, trace = run(model, RunConfig(mstep=mstep, estep=EStep(estep), batch_size=10, max_iterations=8,
                                          diagnostics_every=4))
        assert np.all(np.isfinite(lam["topics"])) and np.all(lam["topics"] > 0)
        assert trace.rows[-1]["heldout_loglik"] < 0

    def test_gibbs_state_persists_and_resets(self):
        c = synth_corpus(n_topics=3, n_words=15, n_docs=12, doc_len=6, seed=1)
        model = LDAModel(c, 3)
        run(model, RunConfig(estep=EStep("gibbs"), batch_size=4, max_iterations=3))
        assert set(model._z) == set(range(12))
        model.begin_run()
        assert model._z == {}

    def test_gibbs_replay_determinism(self):
        c = synth_corpus(n_topics=3, n_words=15, n_docs=20, doc_len=6, seed=2)
        cfg = RunConfig(estep=EStep("gibbs"), batch_size=5, max_iterations=6, seed=4)
        assert run(LDAModel(c, 3), cfg)[1].digest() == run(LDAModel(c, 3), cfg)[1].digest()

    def test_empty_documents_skipped(self):
        c = Corpus([np.array([], dtype=int), np.array([1, 2])], 4)
        lam, _ = run(LDAModel(c, 2), RunConfig(estep=EStep("gibbs"), max_iterations=2))
        assert np.all(lam["topics"] > 0)
