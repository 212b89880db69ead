import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2, chisquare

from momo import tensor as T
from momo.masking import (JointMaskPlan, MaskPlan, gather_masked, gather_visible, joint_plan, masked_count,
                          restore_full, sample_mask)


@pytest.fixture(autouse=True)
def _f64():
    # exact-value checks run in double precision
    with T.precision("f64"):
        yield


def test_masked_counts():
    rng = np.random.default_rng(0)
    p = sample_mask(196, 0.75, rng)
    assert (p.n_masked, p.n_visible) == (147, 49)
    assert sample_mask(12, 0.15, rng).n_masked == 2
    assert sample_mask(2, 0.01, rng).n_masked == 1
    assert masked_count(2, 0.99) == 1


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 300), st.floats(0.001, 0.999), st.integers(0, 2**32 - 1))
def test_plan_invariants(L, r, seed):
    p = sample_mask(L, r, np.random.default_rng(seed))
    assert p.n_masked == min(max(int(np.floor(L * r + 0.5)), 1), L - 1)
    assert np.array_equal(np.sort(np.concatenate([p.masked_idx, p.visible_idx])), np.arange(L))
    assert np.all(np.diff(p.masked_idx) > 0) and np.all(np.diff(p.visible_idx) > 0)
    assert np.array_equal(np.sort(p.restore_perm), np.arange(L))


def test_sample_mask_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_mask(1, 0.5, rng)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            sample_mask(8, bad, rng)


def _brute_force_restore(x, visible, mask_vec):
    # position map built independently of restore_perm
    L = x.shape[0]
    out = np.empty_like(x)
    vis = iter(x[visible])
    for pos in range(L):
        out[pos] = next(vis) if pos in set(visible.tolist()) else mask_vec
    return out


@pytest.mark.parametrize("L", range(2, 9))
def test_gather_restore_round_trip_exhaustive(L):
    rng = np.random.default_rng(L)
    x = rng.standard_normal((L, 3))
    mask_vec = rng.standard_normal(3)
    for k in range(1, L):
        for masked in itertools.combinations(range(L), k):
            plan = MaskPlan.from_masked(L, masked)
            vis = gather_visible(T.Tensor(x), plan)
            assert np.array_equal(vis.data, x[plan.visible_idx])
            full = restore_full(vis, plan, T.Tensor(mask_vec)).data
            assert np.array_equal(full, _brute_force_restore(x, plan.visible_idx, mask_vec))
            # restore_perm undoes the (visible ++ masked) ordering
            order = np.concatenate([plan.visible_idx, plan.masked_idx])
            assert np.array_equal(order[plan.restore_perm], np.arange(L))


def test_gather_examples():
    x = T.Tensor(np.arange(8.0).reshape(4, 2))
    plan = MaskPlan.from_masked(4, [3])
    assert np.array_equal(gather_visible(x, plan).data, x.data[:3])
    two = MaskPlan.from_masked(2, [0])
    assert np.array_equal(gather_visible(T.Tensor(np.eye(2)), two).data, [[0.0, 1.0]])
    all_but_one = MaskPlan.from_masked(4, [0, 1, 3])
    out = restore_full(gather_visible(x, all_but_one), all_but_one, T.Tensor(np.array([-1.0, -1.0]))).data
    assert np.array_equal(out[2], x.data[2]) and np.all(out[[0, 1, 3]] == -1.0)


def test_length_mismatch_errors():
    plan = MaskPlan.from_masked(4, [1])
    with pytest.raises(ValueError):
        gather_visible(T.Tensor(np.zeros((5, 2))), plan)
    with pytest.raises(ValueError):
        restore_full(T.Tensor(np.zeros((2, 2))), plan, T.Tensor(np.zeros(2)))


def test_batched_gather_restore_and_gradient():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.standard_normal((3, 6, 2)), requires_grad=True)
    m = T.Tensor(rng.standard_normal(2), requires_grad=True)
    plans = [sample_mask(6, 0.5, rng) for _ in range(3)]
    out = restore_full(gather_visible(x, plans), plans, m)
    for b, p in enumerate(plans):
        assert np.array_equal(out.data[b, p.visible_idx], x.data[b, p.visible_idx])
        assert np.all(out.data[b, p.masked_idx] == m.data)
    T.tsum(out).backward()
    expect = np.zeros((3, 6, 2))
    for b, p in enumerate(plans):
        expect[b, p.visible_idx] = 1.0
    assert np.array_equal(x.grad, expect)
    assert np.array_equal(m.grad, np.full(2, 9.0))
    assert np.array_equal(gather_masked(x, plans).data[0], x.data[0, plans[0].masked_idx])


def test_joint_plan_counts():
    rng = np.random.default_rng(0)
    jp = joint_plan(64, 12, rng)
    assert (jp.image_plan.n_masked, jp.text_plan.n_masked) == (48, 9)
    jp = joint_plan(64, 12, rng, r_img=0.75, r_txt=0.15)
    assert (jp.image_plan.n_masked, jp.text_plan.n_masked) == (48, 2)
    assert jp.visible_len == 16 + 10 + 1
    with pytest.raises(ValueError):
        joint_plan(64, 1, rng)


def test_mask_sampling_is_uniform_chi_square():
    rng = np.random.default_rng(11)
    L, r, n = 10, 0.3, 10_000
    counts = np.zeros(L)
    for _ in range(n):
        counts[sample_mask(L, r, rng).masked_idx] += 1
    # each index is masked with probability 3/10
    assert np.all(np.abs(counts / n - r) <= 3 * np.sqrt(r * (1 - r) / n))
    # inclusion counts are binomial, so Pearson's Poisson variance would be too lenient
    stat = np.sum((counts - n * r) ** 2 / (n * r * (1 - r)))
    assert chi2.sf(stat, df=L - 1) > 1e-3


def test_joint_sampling_is_product_of_marginals():
    rng = np.random.default_rng(12)
    n = 10_000
    cells = np.zeros((3, 3))
    for _ in range(n):
        jp = joint_plan(3, 3, rng, 0.3, 0.3)  # one masked index per modality
        cells[jp.image_plan.masked_idx[0], jp.text_plan.masked_idx[0]] += 1
    assert chisquare(cells.ravel()).pvalue > 1e-3
