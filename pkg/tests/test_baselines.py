import numpy as np
import pytest

from crossfuse.baselines import fuse_addition, fuse_concat, init_projections
from crossfuse.block import CrossFusionConfig, FeatureHierarchy
from crossfuse.tensor import ContractViolation, Tensor

from oracles import bilinear_loop, conv1x1_loop, max_pool_loop


def hierarchy(rng, chans, sizes, target):
    return FeatureHierarchy([Tensor(rng.normal(size=(c, s, s)), dtype=np.float64) for c, s in zip(chans, sizes)],
                            target)


def loop_refs(h, cfg):
    hp, wp = h.target.dims[-2:]
    return [max_pool_loop(bilinear_loop(m.data, hp, wp), cfg.pool_kernel, cfg.pool_dilation)[0] for m in h.maps]


def test_zero_projections_are_identity():
    rng = np.random.default_rng(0)
    h = hierarchy(rng, [3, 4, 5], [8, 4, 4], 2)
    cfg = CrossFusionConfig()
    for strategy, fn in (("addition", fuse_addition), ("concat", lambda h, w, c: fuse_concat(h, w[0], c))):
        w = init_projections([3, 4, 5], 2, strategy, dtype=np.float64)
        assert np.array_equal(fn(h, w, cfg).data, h.target.data)


def test_addition_and_concat_match_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = int(rng.integers(1, 4))
        chans = [int(c) for c in rng.integers(1, 5, n)]
        sizes = [int(s) for s in rng.integers(2, 8, n)]
        t = int(rng.integers(0, n))
        h = hierarchy(rng, chans, sizes, t)
        cfg = CrossFusionConfig(pool_kernel=3, pool_dilation=int(rng.integers(1, 3)))
        refs = loop_refs(h, cfg)
        cp = chans[t]

        ws = [rng.normal(size=(cp, c)) for c in chans]
        want = h.target.data + sum(conv1x1_loop(r, w) for r, w in zip(refs, ws))
        got = fuse_addition(h, [Tensor(w, dtype=np.float64) for w in ws], cfg).data
        np.testing.assert_allclose(got, want, atol=1e-6)

        wc = rng.normal(size=(cp, sum(chans)))
        want = h.target.data + conv1x1_loop(np.concatenate(refs), wc)
        got = fuse_concat(h, Tensor(wc, dtype=np.float64), cfg).data
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_concat_of_identical_refs_with_averaging_equals_single_ref():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6, 6))
    cfg = CrossFusionConfig(pool_kernel=1, pool_dilation=1)
    w1 = rng.normal(size=(4, 4))
    n = 3
    many = FeatureHierarchy([Tensor(x, dtype=np.float64) for _ in range(n)], 0)
    one = FeatureHierarchy([Tensor(x, dtype=np.float64)], 0)
    avg = Tensor(np.concatenate([w1 / n] * n, axis=1), dtype=np.float64)
    np.testing.assert_allclose(fuse_concat(many, avg, cfg).data,
                               fuse_concat(one, Tensor(w1, dtype=np.float64), cfg).data, atol=1e-12)


def test_projection_shape_errors():
    rng = np.random.default_rng(3)
    h = hierarchy(rng, [3, 4], [4, 4], 1)
    cfg = CrossFusionConfig()
    with pytest.raises(ContractViolation, match="level 0"):
        fuse_addition(h, [Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 4)))], cfg)
    with pytest.raises(ContractViolation):
        fuse_addition(h, [Tensor(np.zeros((4, 3)))], cfg)
    with pytest.raises(ContractViolation):
        fuse_concat(h, Tensor(np.zeros((4, 6))), cfg)
    with pytest.raises(ContractViolation):
        init_projections([3, 4], 1, "cross")
