import numpy as np
import pytest
import torch

from cnolab.adapters import (
    AdaptedModel,
    FinetuneSpec,
    adapter_param_count,
    apply_finetune_mask,
    attach_lora,
    attach_nlt,
    finetune_layers,
    finetune_model,
    load_adapter,
    merge_adapter,
    merged_model,
    save_adapter,
    select_layers,
)
from cnolab.cno import CnoConfig, Model, cno_init, conv, conv_layout, count_params, loss_and_gradients
from cnolab.training import TrainConfig, train

from oracles import circular_conv2d

SMALL = CnoConfig(levels=2, lifting_channels=4, res_blocks_per_level=1, bottleneck_res_blocks=1)


def source_model(config=SMALL, seed=0, dtype=torch.float64):
    return Model(config, cno_init(config, seed, dtype))


def perturb(adapted, seed=0, scale=0.1):
    gen = torch.Generator().manual_seed(seed)
    adapted.assign({k: v + scale * torch.randn(v.shape, generator=gen, dtype=v.dtype) for k, v in adapted.adapters.items()})
    return adapted


class TestFinetune:
    def test_zero_blocks_trains_nothing(self):
        store = apply_finetune_mask(cno_init(SMALL, 0), FinetuneSpec(0), SMALL)
        assert count_params(store, trainable_only=True) == 0

    def test_two_blocks_hand_count(self):
        # decoder block 0 (fuse 8+4 -> 4 plus one res block), block 1 (fuse 16+8 -> 8 plus one res block), proj
        k2 = 9
        dec0 = (4 * 12 * k2 + 4) + 2 * (4 * 4 * k2 + 4)
        dec1 = (8 * 24 * k2 + 8) + 2 * (8 * 8 * k2 + 8)
        proj = 4 * k2 + 1
        store = apply_finetune_mask(cno_init(SMALL, 0), FinetuneSpec(2), SMALL)
        assert count_params(store, trainable_only=True) == dec0 + dec1 + proj

    def test_default_config_two_tail_blocks(self):
        cfg = CnoConfig()
        layout = conv_layout(cfg)
        expected = sum(co * ci * 9 + co for name, (co, ci, _) in layout.items() if name.startswith(("dec0.", "dec1.", "proj")))
        store = apply_finetune_mask(cno_init(cfg, 0), FinetuneSpec(2), cfg)
        assert count_params(store, trainable_only=True) == expected

    def test_one_block_includes_projection(self):
        layers = finetune_layers(SMALL, FinetuneSpec(1))
        assert "proj" in layers
        assert all(name == "proj" or name.startswith("dec0.") for name in layers)

    @pytest.mark.parametrize("n", [-1, 3])
    def test_out_of_range(self, n):
        with pytest.raises(ValueError):
            finetune_layers(SMALL, FinetuneSpec(n))

    def test_predictions_untouched(self):
        src = source_model()
        x = torch.randn(4, 16, 16, dtype=torch.float64)
        assert torch.equal(src.forward(x), finetune_model(src, FinetuneSpec(2)).forward(x))


class TestIdentityAtInit:
    @pytest.mark.parametrize("attach", [lambda s: attach_lora(s, 4), attach_nlt])
    def test_bitwise_equal_predictions(self, attach):
        src = source_model(dtype=torch.float32)
        adapted = attach(src)
        x = torch.randn(32, 16, 16)
        assert torch.equal(adapted.forward(x), src.forward(x))

    def test_lora_b_zero(self):
        adapted = attach_lora(source_model(), 3)
        for k, v in adapted.adapters.items():
            if k.endswith("lora_B"):
                assert torch.count_nonzero(v) == 0
            else:
                assert v.shape == (3, 1)


class TestCounts:
    def test_lora_single_layer_c64(self):
        cfg = CnoConfig(levels=1, lifting_channels=8, res_blocks_per_level=1, bottleneck_res_blocks=1)
        adapted = attach_lora(source_model(cfg), rank=4, roles=["encoder"])
        per_layer = {name.rsplit(".", 1)[0]: 0 for name in adapted.adapters}
        for name, t in adapted.adapters.items():
            per_layer[name.rsplit(".", 1)[0]] += t.numel()
        assert per_layer["enc0.res0.conv1"] == 260

    def test_nlt_single_layer_c64(self):
        cfg = CnoConfig(levels=1, lifting_channels=8, res_blocks_per_level=1, bottleneck_res_blocks=1)
        adapted = attach_nlt(source_model(cfg), roles=["encoder"])
        assert adapted.adapters["enc0.res0.conv1.nlt_f"].numel() + adapted.adapters["enc0.res0.conv1.nlt_b"].numel() == 128

    @pytest.mark.parametrize("rank", [1, 4])
    def test_formulas_small(self, rank):
        src = source_model()
        layout = conv_layout(SMALL)
        lora = attach_lora(src, rank)
        nlt = attach_nlt(src)
        assert adapter_param_count(lora) == sum(rank * (co * ci + 1) for co, ci, _ in layout.values())
        assert adapter_param_count(nlt) == sum(2 * co * ci for co, ci, _ in layout.values())

    def test_fewer_than_full_finetuning(self):
        src = source_model(CnoConfig())
        full = count_params(src.store)
        assert adapter_param_count(attach_lora(src, 4)) < full
        assert adapter_param_count(attach_nlt(src)) < full

    def test_role_filter(self):
        adapted = attach_nlt(source_model(), roles=["decoder", "projection"])
        assert set(adapted.layers) == {n for n, (_, _, r) in conv_layout(SMALL).items() if r in ("decoder", "projection")}

    def test_empty_filter(self):
        with pytest.raises(ValueError):
            select_layers(SMALL, [])
        with pytest.raises(ValueError):
            attach_lora(source_model(), roles=[])

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            attach_lora(source_model(), rank=0)


class TestKernelSemantics:
    def test_lora_box_sum_against_brute_force(self):
        cfg = CnoConfig(levels=1, lifting_channels=2, in_channels=1)
        src = source_model(cfg, seed=3)
        adapted = attach_lora(src, rank=1, roles=["encoder"])
        layer = "enc0.res0.conv1"  # 2 -> 2 channels, C = 4
        delta, c = 0.37, 2  # slice c = c_out * C_in + c_in = (1, 0)
        b = torch.zeros(4, 1, dtype=torch.float64)
        b[c, 0] = delta
        adapted.assign({f"{layer}.lora_A": torch.ones(1, 1, dtype=torch.float64), f"{layer}.lora_B": b})

        x = np.random.default_rng(0).standard_normal((2, 5, 5))
        w_src = src.store[f"{layer}.weight"].numpy()
        w_eff = adapted.effective_kernel(layer).numpy()
        base = circular_conv2d(x, w_src)
        moved = circular_conv2d(x, w_eff)
        box = np.array([[sum(x[0, (i + a) % 5, (j + bb) % 5] for a in (-1, 0, 1) for bb in (-1, 0, 1)) for j in range(5)] for i in range(5)])
        np.testing.assert_allclose(moved[1] - base[1], delta * box, atol=1e-12)
        np.testing.assert_allclose(moved[0], base[0], atol=0)

        params = adapted.effective_params()
        got = conv(torch.from_numpy(x)[None], params, layer)[0].numpy()
        np.testing.assert_allclose(got, moved + params[f"{layer}.bias"].numpy()[:, None, None], atol=1e-12)

    def test_nlt_doubling(self):
        cfg = CnoConfig(levels=1, lifting_channels=2)
        src = source_model(cfg)
        adapted = attach_nlt(src, roles=["encoder"])
        layer = "enc0.res0.conv1"
        adapted.assign({f"{layer}.nlt_f": torch.full((4,), 2.0, dtype=torch.float64)})
        x = torch.randn(1, 2, 6, 6, dtype=torch.float64)
        bias_free = {f"{layer}.weight": adapted.effective_kernel(layer), f"{layer}.bias": torch.zeros(2, dtype=torch.float64)}
        plain = {f"{layer}.weight": src.store[f"{layer}.weight"], f"{layer}.bias": torch.zeros(2, dtype=torch.float64)}
        assert torch.equal(conv(x, bias_free, layer), 2.0 * conv(x, plain, layer))

    @pytest.mark.parametrize("which", ["lora_B", "nlt_f", "nlt_b"])
    def test_broadcast_single_slice(self, which):
        src = source_model()
        layer = "enc1.down"  # 16 <- 8 channels, C = 128
        adapted = attach_lora(src, 1) if which == "lora_B" else attach_nlt(src)
        if which == "lora_B":
            adapted.assign({f"{layer}.lora_A": torch.ones(1, 1, dtype=torch.float64)})
        before = adapted.effective_kernel(layer).clone()
        name, c = f"{layer}.{which}", 37
        bumped = adapted.adapters[name].clone()
        bumped.view(-1)[c] += 0.5
        adapted.assign({name: bumped})
        diff = (adapted.effective_kernel(layer) - before).reshape(-1, 9)
        assert torch.nonzero(diff.abs().sum(1)).flatten().tolist() == [c]
        if which == "nlt_f":
            # the factor scales the slice: the change is proportional to the source taps
            expected = 0.5 * adapted.source[f"{layer}.weight"].reshape(-1, 9)[c]
        else:
            expected = diff[c, 0].expand(9)
        assert torch.allclose(diff[c], expected, atol=1e-15)


class TestMerge:
    def test_merge_at_init_equals_source(self):
        src = source_model()
        for adapted in (attach_lora(src, 2), attach_nlt(src)):
            merged = merge_adapter(adapted)
            for k in src.store:
                torch.testing.assert_close(merged[k], src.store[k], atol=1e-12, rtol=0)

    @pytest.mark.parametrize("strategy", ["lora", "nlt"])
    def test_merge_after_perturbation(self, strategy):
        src = source_model(dtype=torch.float32)
        adapted = perturb(attach_lora(src, 2) if strategy == "lora" else attach_nlt(src), scale=0.05)
        x = torch.randn(16, 16, 16)
        a = adapted.forward(x)
        m = merged_model(adapted).forward(x)
        assert float((a - m).abs().max() / a.abs().max()) <= 1e-6

    def test_merge_idempotent(self):
        adapted = perturb(attach_nlt(source_model()))
        once = merged_model(adapted)
        twice = merge_adapter(attach_nlt(once))
        for k in once.store:
            assert torch.equal(once.store[k], twice[k])

    def test_merged_store_fully_trainable(self):
        merged = merge_adapter(attach_lora(source_model()))
        assert merged.trainable_names() == list(merged)


class TestTrainingAdapters:
    def test_frozen_base_bitwise_unchanged(self):
        src = source_model(dtype=torch.float32)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((8, 16, 16)).astype(np.float32)
        y = (x**2 + 1).astype(np.float32)
        before = {k: src.store[k].clone() for k in src.store}
        for adapted in (attach_lora(src, 2), attach_nlt(src)):
            trained, _ = train(adapted, (x, y), (x[:2], y[:2]), TrainConfig(epochs=3, batch_size=4))
            for k in before:
                assert torch.equal(trained.source[k], before[k])
                assert torch.equal(src.store[k], before[k])

    def test_gradients_only_for_adapters(self):
        adapted = attach_nlt(source_model())
        _, grads = loss_and_gradients(adapted, torch.randn(2, 16, 16, dtype=torch.float64), torch.ones(2, 16, 16, dtype=torch.float64))
        assert list(grads) == list(adapted.adapters)

    def test_decay_flags(self):
        src = source_model()
        assert all(attach_lora(src).decay_flags().values())
        assert not any(attach_nlt(src).decay_flags().values())


class TestAdapterCheckpoint:
    def test_round_trip(self, tmp_path):
        src = source_model(dtype=torch.float32)
        adapted = perturb(attach_lora(src, 2, roles=["decoder"]))
        save_adapter(adapted, tmp_path / "ad")
        back = load_adapter(tmp_path / "ad", src)
        assert isinstance(back, AdaptedModel)
        assert back.strategy == "lora" and back.rank == 2 and back.layers == adapted.layers
        for k in adapted.adapters:
            assert torch.equal(back.adapters[k], adapted.adapters[k])
        files = sorted(p.name for p in (tmp_path / "ad").iterdir() if p.suffix == ".cnot")
        assert len(files) == len(adapted.adapters)

    def test_wrong_source_rejected(self, tmp_path):
        save_adapter(attach_nlt(source_model(dtype=torch.float32)), tmp_path / "ad")
        with pytest.raises(ValueError, match="different source"):
            load_adapter(tmp_path / "ad", source_model(seed=1, dtype=torch.float32))
