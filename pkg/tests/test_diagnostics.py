import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blanketmh import diagnostics as D
from blanketmh import models
from blanketmh.graph import addr


def ar1(rng, rho, chains, n):
    out = np.empty((chains, n))
    for c in range(chains):
        x = rng.standard_normal() / math.sqrt(1 - rho**2)
        for t in range(n):
            x = rho * x + rng.standard_normal()
            out[c, t] = x
    return out


class TestEss:
    def test_iid_relative_ess_near_one(self):
        m = np.random.default_rng(0).standard_normal((4, 1000))
        assert 0.8 <= D.ess(m) / 4000 <= 1.2

    def test_ar1_matches_closed_form(self):
        rho = 0.9
        m = ar1(np.random.default_rng(1), rho, 4, 2000)
        expected = m.size * (1 - rho) / (1 + rho)
        assert abs(D.ess(m) - expected) <= 0.3 * expected

    def test_alternating_chain_is_super_efficient(self):
        m = np.tile([1.0, -1.0], 50)[None, :] + np.random.default_rng(2).normal(0, 0.01, (1, 100))
        e = D.ess(m)
        assert math.isfinite(e) and e > 100

    def test_constant_input_flagged(self):
        e, flagged = D.ess_flagged(np.ones((3, 10)))
        assert flagged and e == 30

    @pytest.mark.parametrize("bad", [np.ones((2, 3)), np.ones((2, 2, 2)), np.array([[1.0, np.nan, 2.0, 3.0]])])
    def test_rejects_malformed(self, bad):
        with pytest.raises(ValueError):
            D.ess(bad)


class TestRhat:
    def test_iid_chains_below_threshold(self):
        m = np.random.default_rng(3).standard_normal((4, 1000))
        assert D.r_hat(m) < 1.01

    def test_separated_chains_exceed_two(self):
        rng = np.random.default_rng(4)
        m = np.vstack([rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)])
        assert D.r_hat(m) > 2

    def test_separated_chains_flag_nonconvergence(self):
        rng = np.random.default_rng(4)
        m = np.vstack([rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)])
        assert D.r_hat(m) > 1.5

    def test_constant_is_one_and_flagged(self):
        assert D.r_hat_flagged(np.full((3, 8), 2.0)) == (1.0, True)

    def test_stuck_chain_is_infinite(self):
        rng = np.random.default_rng(5)
        m = np.vstack([rng.normal(size=20), np.full(20, 0.3)])
        r, flagged = D.r_hat_flagged(m)
        assert flagged and r == math.inf

    def test_needs_two_chains(self):
        with pytest.raises(ValueError):
            D.r_hat(np.ones((1, 10)))

    def test_null_rejection_rate(self):
        rng = np.random.default_rng(6)
        below = sum(D.r_hat(rng.standard_normal((4, 200))) < 1.05 for _ in range(100))
        assert below >= 99

    def test_rank_normalize_ties_share_a_score(self):
        z = D.rank_normalize(np.array([[1.0, 1.0, 2.0, 3.0]]))
        assert z[0, 0] == z[0, 1]


class TestAffineInvariance:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-50, 50))
    def test_ess_and_rhat(self, seed, scale, shift):
        m = ar1(np.random.default_rng(seed), 0.5, 3, 40)
        t = scale * m + shift
        assert D.ess(t) == pytest.approx(D.ess(m), rel=1e-9, abs=1e-9)
        assert D.r_hat(t) == pytest.approx(D.r_hat(m), rel=1e-9, abs=1e-9)


class TestPll:
    def test_single_sample_is_its_log_likelihood(self):
        ll = np.array([[-0.5, -1.2, -0.1]])
        assert D.pll(ll) == pytest.approx(-1.8, abs=1e-12)

    def test_duplicated_samples_unchanged(self):
        ll = np.random.default_rng(7).normal(-1, 0.3, (5, 4))
        assert D.pll(np.vstack([ll, ll])) == pytest.approx(D.pll(ll), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        ll = rng.normal(-2, 1, (6, 3))
        assert D.pll(ll[rng.permutation(6)]) == pytest.approx(D.pll(ll), abs=1e-12)

    def test_stable_for_very_negative_values(self):
        assert D.pll(np.array([[-1000.0], [-1000.0]])) == pytest.approx(-1000.0)

    def test_empty_heldout_rejected(self):
        with pytest.raises(ValueError):
            D.pll(np.zeros((3, 0)))
        with pytest.raises(ValueError):
            D.heldout_log_liks(models.conj_normal().model, [{}], {})

    def test_blr_truth_beats_zero(self):
        z = models.blr(n_rows=400, n_features=3, seed=11)
        beta = z.manifest["true_beta"]
        truth = {addr(f"beta_{k}"): b for k, b in enumerate(beta)}
        zero = {a: 0.0 for a in truth}
        assert D.model_pll(z.model, [truth], z.heldout) > D.model_pll(z.model, [zero], z.heldout)


class TestSummarize:
    def test_layout_and_aggregates(self):
        rng = np.random.default_rng(8)
        mats = {addr("a"): rng.standard_normal((4, 50)), addr("b"): rng.standard_normal((4, 50))}
        s = D.summarize(mats, pll_value=-3.0)
        assert set(s["ess"]) == {"a", "b"}
        assert s["min_ess"] == min(s["ess"].values())
        assert s["max_rhat"] == max(s["rhat"].values())
        assert s["pll"] == -3.0

    def test_partially_instantiated_address_skipped(self):
        m = np.random.default_rng(9).standard_normal((2, 10))
        m[0, 3] = np.nan
        s = D.summarize({addr("mu", 1): m})
        assert "mu(1)" not in s["ess"]
        assert any("partially" in f for f in s["flags"])
