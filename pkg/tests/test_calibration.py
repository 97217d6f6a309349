import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shrink import tokenizer
from shrink.calibration import (
    ActivationStats,
    CalibrationSet,
    StatsAccumulator,
    build_calibration_set,
    collect_activation_stats,
    collect_layer_inputs,
    export_stats,
    load_stats,
)
from shrink.errors import CalibrationError
from shrink.model import forward
from shrink.numeric import rms_norm
from shrink.quantize import QuantConfig, quantize_model


class TestBuild:
    def test_single_line(self):
        cal = build_calibration_set(["hello"], n=1)
        assert cal.samples == (tuple(tokenizer.encode("hello")),)

    def test_deterministic(self):
        lines = [f"line {i}" for i in range(50)]
        assert build_calibration_set(lines, 8, seed=4) == build_calibration_set(lines, 8, seed=4)

    def test_seed_changes_selection(self):
        lines = [f"line {i}" for i in range(1000)]
        assert build_calibration_set(lines, 16, seed=0).samples != build_calibration_set(lines, 16, seed=1).samples

    def test_truncation(self):
        cal = build_calibration_set(["x" * 500], 1, max_len=10)
        assert len(cal.samples[0]) == 10

    def test_errors(self):
        with pytest.raises(CalibrationError):
            build_calibration_set([], 1)
        with pytest.raises(CalibrationError):
            build_calibration_set(["a", "b"], 3)
        assert len(build_calibration_set(["a", "b"], 3, replace=True)) == 3
        with pytest.raises(CalibrationError):
            CalibrationSet((), 0)
        with pytest.raises(CalibrationError):
            CalibrationSet(((),), 0)


class TestAccumulator:
    def test_constant_ones(self):
        acc = StatsAccumulator()
        acc.add("l", torch.ones(7, 5))
        assert torch.equal(acc.finalize().channel_means["l"], torch.ones(5))

    def test_mean_absolute(self):
        a = StatsAccumulator(samples=1)
        a.add("l", torch.tensor([[2.5, 1.0]]))
        b = StatsAccumulator(samples=1)
        b.add("l", torch.tensor([[-2.5, 3.0]]))
        stats = a.merge(b).finalize()
        assert stats.channel_means["l"].tolist() == [2.5, 2.0]
        assert stats.sample_count == 2

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float32, (3, 4, 6), elements=st.floats(-50, 50, width=32)))
    def test_merge_order_sign_and_scaling(self, x):
        parts = []
        for chunk in x:
            p = StatsAccumulator(samples=1)
            p.add("l", torch.from_numpy(chunk))
            parts.append(p)
        fwd = parts[0].merge(parts[1]).merge(parts[2]).finalize().channel_means["l"]
        rev = parts[2].merge(parts[1].merge(parts[0])).finalize().channel_means["l"]
        assert torch.allclose(fwd, rev, rtol=1e-6, atol=1e-6)
        neg = StatsAccumulator()
        neg.add("l", -torch.from_numpy(x))
        assert torch.allclose(neg.finalize().channel_means["l"], fwd, rtol=1e-6, atol=1e-6)
        dbl = StatsAccumulator()
        dbl.add("l", 2 * torch.from_numpy(x))
        assert torch.equal(dbl.finalize().channel_means["l"], 2 * fwd)


class TestCollect:
    def test_matches_recomputation(self, tiny_model, tiny_cal):
        stats = collect_activation_stats(tiny_model, tiny_cal)
        assert stats.sample_count == len(tiny_cal)
        rows: dict[str, list] = {}
        for sample in tiny_cal.samples:
            _, hidden = forward(tiny_model, list(sample), capture=True)
            for i, blk in enumerate(tiny_model.blocks):
                rows.setdefault(f"blocks.{i}.q", []).append(rms_norm(hidden[i], blk.attn_norm).double().numpy())
            rows.setdefault("lm_head", []).append(hidden[-1].double().numpy())
        for name, chunks in rows.items():
            oracle = np.abs(np.concatenate(chunks)).mean(axis=0)
            assert np.allclose(stats.channel_means[name].numpy(), oracle, rtol=1e-6, atol=1e-7), name
        assert torch.equal(stats.channel_means["blocks.0.q"], stats.channel_means["blocks.0.k"])
        assert stats.channel_means["blocks.0.down"].numel() == tiny_model.config.d_ff

    def test_rejects_quantized_model(self, tiny_model, tiny_cal):
        q, _ = quantize_model(tiny_model, QuantConfig(method="rtn"))
        with pytest.raises(CalibrationError):
            collect_activation_stats(q, tiny_cal)

    def test_layer_inputs_cap(self, tiny_model, tiny_cal):
        total = sum(len(s) for s in tiny_cal.samples)
        full = collect_layer_inputs(tiny_model, tiny_cal, max_tokens=10_000)
        assert full["lm_head"].shape[0] == total
        capped = collect_layer_inputs(tiny_model, tiny_cal, max_tokens=10, seed=3)
        assert capped["lm_head"].shape[0] == 10
        assert torch.equal(capped["blocks.1.q"], capped["blocks.1.v"])
        again = collect_layer_inputs(tiny_model, tiny_cal, max_tokens=10, seed=3)
        assert torch.equal(capped["blocks.2.up"], again["blocks.2.up"])


def test_floor_dead_channels():
    stats = ActivationStats({"a": torch.tensor([0.0, 2.0, 0.5]), "b": torch.zeros(2)}, 1).floored()
    assert stats.channel_means["a"].tolist() == pytest.approx([0.5e-4, 2.0, 0.5])
    assert stats.channel_means["b"].tolist() == [1.0, 1.0]


def test_export_roundtrip(tiny_model, tiny_cal, tmp_path):
    stats = collect_activation_stats(tiny_model, tiny_cal)
    export_stats(stats, tmp_path / "s.json")
    back = load_stats(tmp_path / "s.json")
    assert back.sample_count == stats.sample_count
    for name, v in stats.channel_means.items():
        assert torch.equal(back.channel_means[name], v)
