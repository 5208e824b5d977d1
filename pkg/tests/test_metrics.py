import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cnolab.adapters import attach_lora, attach_nlt, merged_model
from cnolab.cno import CnoConfig, Model, cno_init
from cnolab.metrics import DegenerateBandwidthError, MmdConfig, dataset_mmd, embed_fields, median_bandwidth, mmd, test_error
from cnolab.solvers import Dataset

from oracles import mmd_double_sum


class Lookup:
    """Returns stored predictions regardless of input."""

    dtype = torch.float64

    def __init__(self, outputs):
        self.outputs = torch.as_tensor(outputs)
        self.i = 0

    def forward(self, batch):
        out = self.outputs[self.i : self.i + len(batch)]
        self.i += len(batch)
        return out


class TestTestError:
    def test_copy_is_zero(self):
        y = np.random.default_rng(0).standard_normal((4, 8, 8))
        assert test_error(Lookup(y), y, y) == 0.0

    def test_zero_model_is_hundred(self):
        y = np.random.default_rng(1).standard_normal((3, 8, 8)) + 0.1
        assert test_error(Lookup(np.zeros_like(y)), y, y) == pytest.approx(100.0, abs=1e-12)

    def test_three_samples_by_hand(self):
        t = np.stack([np.ones((2, 2)), 2 * np.ones((2, 2)), -4 * np.ones((2, 2))])
        p = np.stack([1.5 * np.ones((2, 2)), 1 * np.ones((2, 2)), -3 * np.ones((2, 2))])
        # 50%, 50%, 25%
        assert test_error(Lookup(p), t, t) == pytest.approx(125.0 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            test_error(Lookup(np.zeros((0, 2, 2))), np.zeros((0, 2, 2)), np.zeros((0, 2, 2)))

    @pytest.mark.parametrize("attach", [attach_nlt, lambda m: attach_lora(m, 2)])
    def test_merged_equals_adapted(self, attach):
        cfg = CnoConfig(levels=1, lifting_channels=4, res_blocks_per_level=1, bottleneck_res_blocks=1)
        adapted = attach(Model(cfg, cno_init(cfg, 0)))
        gen = torch.Generator().manual_seed(1)
        adapted.assign({k: v + 0.05 * torch.randn(v.shape, generator=gen) for k, v in adapted.adapters.items()})
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((2, 6, 8, 8)).astype(np.float32)
        y += 3
        assert test_error(merged_model(adapted), x, y) == pytest.approx(test_error(adapted, x, y), rel=1e-6)


class TestMmd:
    def test_double_sum_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((8, 3))
        b = rng.standard_normal((8, 3)) + 0.4
        got = mmd(a, b, MmdConfig(sigma=1.3))
        assert got == pytest.approx(mmd_double_sum(a, b, 1.3), abs=1e-12)

    def test_double_sum_oracle_median(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((6, 4)), rng.standard_normal((9, 4)) * 2
        sigma = median_bandwidth(a, b)
        pooled = np.concatenate([a, b])
        dists = [np.linalg.norm(pooled[i] - pooled[j]) for i in range(15) for j in range(i + 1, 15)]
        assert sigma == pytest.approx(np.median(dists), rel=1e-14)
        assert mmd(a, b) == pytest.approx(mmd_double_sum(a, b, sigma), abs=1e-12)

    def test_identical_sets_zero(self):
        a = np.random.default_rng(1).standard_normal((10, 5))
        assert mmd(a, a) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 9), st.integers(2, 9))
    def test_symmetric_exactly(self, seed, n, m):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((n, 3)), rng.standard_normal((m, 3)) + 0.5
        assert mmd(a, b) == mmd(b, a)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((7, 3)), rng.standard_normal((6, 3))
        assert mmd(a, b) == pytest.approx(mmd(a[::-1], b[rng.permutation(6)]), abs=1e-15)

    def test_cluster_limit(self):
        rng = np.random.default_rng(3)
        n, m = 6, 10
        a = rng.standard_normal((n, 2)) * 10
        b = rng.standard_normal((m, 2)) * 10 + 1000
        got = mmd(a, b, MmdConfig(sigma=1e-3)) ** 2
        assert got == pytest.approx(1 / n + 1 / m, rel=1e-12)

    def test_monotone_separation(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((20, 3))
        base = rng.standard_normal((20, 3))
        values = [mmd(a, base + shift, MmdConfig(sigma=1.0)) for shift in np.linspace(0, 6, 13)]
        assert all(x <= y for x, y in zip(values, values[1:]))

    def test_degenerate_bandwidth(self):
        a = np.zeros((4, 3))
        with pytest.raises(DegenerateBandwidthError, match="fixed sigma"):
            mmd(a, a)
        assert mmd(a, a, MmdConfig(sigma=1.0)) == 0.0

    @pytest.mark.parametrize("a,b", [((1, 3), (4, 3)), ((4, 3), (4, 2))])
    def test_bad_shapes(self, a, b):
        with pytest.raises(ValueError):
            mmd(np.ones(a), np.ones(b))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            MmdConfig(sigma=0.0)
        with pytest.raises(ValueError):
            MmdConfig(representation="both")


class TestDatasetMmd:
    def test_embedding_resolution(self):
        fields = np.random.default_rng(0).standard_normal((3, 64, 64))
        assert embed_fields(fields).shape == (3, 32 * 32)

    def test_representation_switch(self):
        rng = np.random.default_rng(1)
        src = Dataset(rng.standard_normal((5, 32, 32)), rng.standard_normal((5, 32, 32)), "train")
        tgt = Dataset(src.inputs.copy(), rng.standard_normal((5, 32, 32)) + 3, "train")
        assert dataset_mmd(src, tgt, MmdConfig(representation="inputs")) == 0.0
        assert dataset_mmd(src, tgt) > 0.0
