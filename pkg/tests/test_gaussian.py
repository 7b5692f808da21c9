import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from conceptbench.models.gaussian import (
    GaussianPosterior,
    SharedSet,
    adaptive_average,
    kl_gaussian,
    select_shared_set,
    shared_mask_terms,
    shared_set_from_divergence,
)

finite = st.floats(-3, 3, allow_nan=False)
posteriors = st.integers(1, 6).flatmap(lambda d: st.tuples(
    st.lists(finite, min_size=d, max_size=d), st.lists(finite, min_size=d, max_size=d),
    st.lists(finite, min_size=d, max_size=d), st.lists(finite, min_size=d, max_size=d)))


def _mc_kl(q, p, n, seed=0):
    z = q.sample(np.random.default_rng(seed), n)
    lq = stats.norm.logpdf(z, q.mean, np.exp(0.5 * q.log_variance)).sum(-1)
    lp = stats.norm.logpdf(z, p.mean, np.exp(0.5 * p.log_variance)).sum(-1)
    return float(np.mean(lq - lp))


class TestKL:
    def test_identity_and_closed_form(self):
        std = GaussianPosterior.standard(1)
        assert kl_gaussian(std)[1] == 0.0
        assert np.isclose(kl_gaussian(GaussianPosterior([1.0], [0.0]))[1], 0.5)

    @pytest.mark.parametrize("q, p", [
        (([0.5, -1.0, 2.0], [0.3, -0.7, 0.1]), None),
        (([0.2, 1.5], [0.4, -1.0]), ([-0.3, 0.5], [-0.2, 0.6])),
    ])
    def test_monte_carlo_oracle(self, q, p):
        q = GaussianPosterior(*q)
        p = GaussianPosterior.standard(q.dim) if p is None else GaussianPosterior(*p)
        closed = kl_gaussian(q, p)[1]
        assert abs(_mc_kl(q, p, 100_000) - closed) / closed < 0.01

    def test_per_dimension_sums_to_total(self):
        q = GaussianPosterior([0.1, 0.2, -0.4], [0.0, 1.0, -1.0])
        per, total = kl_gaussian(q)
        assert per.shape == (3,) and np.isclose(per.sum(), total)

    def test_invalid(self):
        with pytest.raises(ValueError):
            GaussianPosterior([np.nan], [0.0])
        with pytest.raises(ValueError):
            kl_gaussian(GaussianPosterior([0.0], [0.0]), GaussianPosterior.standard(2))

    @settings(max_examples=100, deadline=None)
    @given(posteriors)
    def test_non_negative_and_zero_iff_equal(self, args):
        m1, l1, m2, l2 = args
        q, p = GaussianPosterior(m1, l1), GaussianPosterior(m2, l2)
        per, _ = kl_gaussian(q, p)
        assert np.all(per >= -1e-12)
        assert np.allclose(kl_gaussian(q, q)[0], 0.0, atol=1e-9)
        differ = ~np.isclose(q.mean, p.mean, atol=1e-3) | ~np.isclose(q.log_variance, p.log_variance, atol=1e-3)
        assert np.all(per[differ] > 1e-9)


class TestSharedSet:
    def test_hand_case_from_divergence(self):
        s = shared_set_from_divergence([0.0, 2.0])
        assert s.dims == frozenset({0}) and s.threshold == 1.0

    def test_identical_posteriors_share_everything(self):
        q = GaussianPosterior([0.3, -1.0, 2.0], [0.1, 0.2, -0.5])
        assert select_shared_set(q, q).dims == frozenset({0, 1, 2})

    def test_one_changed_dimension(self):
        q1 = GaussianPosterior([0.0, 0.0, 0.0, 0.0], [-2.0] * 4)
        q2 = GaussianPosterior([0.0, 3.0, 0.05, 0.0], [-2.0] * 4)
        assert select_shared_set(q1, q2).dims == frozenset({0, 2, 3})

    def test_symmetrised_divergence_is_symmetric(self):
        q1 = GaussianPosterior([0.0, 1.0, 0.2], [0.0, -1.0, 1.5])
        q2 = GaussianPosterior([0.5, 0.0, 0.2], [1.0, 0.0, -1.5])
        assert select_shared_set(q1, q2) == select_shared_set(q2, q1)

    def test_directional_option(self):
        # variances differ so that KL(q1||q2) and KL(q2||q1) rank dimensions differently
        q1 = GaussianPosterior([0.0, 0.0], [0.0, 2.0])
        q2 = GaussianPosterior([0.0, 6.6], [3.0, 2.0])
        d12 = kl_gaussian(q1, q2)[0]
        d21 = kl_gaussian(q2, q1)[0]
        assert (d12[0] < d12[1]) != (d21[0] < d21[1])
        assert select_shared_set(q1, q2, symmetric=False).dims == frozenset({int(np.argmin(d12))})

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            select_shared_set(GaussianPosterior.standard(2), GaussianPosterior.standard(3))

    @settings(max_examples=100, deadline=None)
    @given(posteriors)
    def test_nonempty_and_in_range(self, args):
        m1, l1, m2, l2 = args
        s = select_shared_set(GaussianPosterior(m1, l1), GaussianPosterior(m2, l2))
        assert 1 <= len(s.dims) <= len(m1) and all(0 <= i < len(m1) for i in s.dims)

    def test_batched_mask_matches_array_api(self):
        rng = np.random.default_rng(0)
        m1, l1, m2, l2 = (rng.normal(size=(16, 5)) for _ in range(4))
        mask = shared_mask_terms(*(torch.as_tensor(a) for a in (m1, l1, m2, l2))).numpy()
        for i in range(16):
            s = select_shared_set(GaussianPosterior(m1[i], l1[i]), GaussianPosterior(m2[i], l2[i]))
            assert np.array_equal(mask[i], s.mask(5))


class TestAverage:
    def test_product_of_experts_hand_case(self):
        q1 = GaussianPosterior([0.0], [0.0])
        q2 = GaussianPosterior([2.0], [0.0])
        a, b = adaptive_average(q1, q2, SharedSet(frozenset({0}), 0.0))
        assert a.mean[0] == 1.0 and np.isclose(a.variance[0], 0.5, rtol=0, atol=1e-15)
        assert a == b

    def test_product_oracle(self):
        # product of normal densities, renormalised numerically on a grid
        q1, q2 = GaussianPosterior([0.4], [np.log(0.3)]), GaussianPosterior([-1.0], [np.log(2.0)])
        z = np.linspace(-8, 8, 200_001)
        dens = stats.norm.pdf(z, 0.4, np.sqrt(0.3)) * stats.norm.pdf(z, -1.0, np.sqrt(2.0))
        dens /= integrate.trapezoid(dens, z)
        mean = (z * dens).sum() * (z[1] - z[0])
        var = ((z - mean) ** 2 * dens).sum() * (z[1] - z[0])
        a, _ = adaptive_average(q1, q2, SharedSet(frozenset({0}), 0.0))
        assert np.isclose(a.mean[0], mean, atol=1e-6) and np.isclose(a.variance[0], var, atol=1e-6)

    def test_arithmetic(self):
        q1 = GaussianPosterior([0.0, 5.0], [0.0, 0.0])
        q2 = GaussianPosterior([2.0, 1.0], [np.log(3.0), 0.0])
        a, b = adaptive_average(q1, q2, SharedSet(frozenset({0}), 0.0), averaging="arithmetic")
        assert a.mean[0] == b.mean[0] == 1.0 and np.isclose(a.variance[0], 2.0)
        assert a.mean[1] == 5.0 and b.mean[1] == 1.0

    def test_empty_set_is_identity(self):
        q1 = GaussianPosterior([0.1, 0.2], [0.3, 0.4])
        q2 = GaussianPosterior([1.1, 1.2], [1.3, 1.4])
        a, b = adaptive_average(q1, q2, SharedSet(frozenset(), 0.0))
        assert np.allclose(a.mean, q1.mean) and np.allclose(b.log_variance, q2.log_variance)

    def test_invalid(self):
        q = GaussianPosterior.standard(2)
        with pytest.raises(ValueError):
            adaptive_average(q, q, SharedSet(frozenset({2}), 0.0))
        with pytest.raises(ValueError):
            adaptive_average(q, q, SharedSet(frozenset({0}), 0.0), averaging="median")

    @settings(max_examples=100, deadline=None)
    @given(posteriors, st.sampled_from(["product_of_experts", "arithmetic"]))
    def test_averaged_dims_agree_and_poe_shrinks(self, args, averaging):
        m1, l1, m2, l2 = args
        q1, q2 = GaussianPosterior(m1, l1), GaussianPosterior(m2, l2)
        s = select_shared_set(q1, q2)
        a, b = adaptive_average(q1, q2, s, averaging)
        idx = sorted(s.dims)
        assert np.allclose(kl_gaussian(GaussianPosterior(a.mean[idx], a.log_variance[idx]),
                                       GaussianPosterior(b.mean[idx], b.log_variance[idx]))[0], 0.0)
        rest = [i for i in range(len(m1)) if i not in s.dims]
        assert np.array_equal(a.mean[rest], q1.mean[rest]) and np.array_equal(b.mean[rest], q2.mean[rest])
        if averaging == "product_of_experts":
            assert np.all(a.variance[idx] <= np.minimum(q1.variance, q2.variance)[idx] * (1 + 1e-12))
