from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import diagsink.train as train_mod
from diagsink.attention import Regularizer
from diagsink.data import SyntheticConfig, gen_synthetic
from diagsink.model import ModelConfig
from diagsink.train import (
    AdamState,
    TrainConfig,
    adamw_step,
    lr_schedule,
    metrics,
    run_experiment,
    variant_setup,
)


def naive_metrics(pred, target, mask):
    S, N, H = pred.shape
    out = {"MAE": [], "RMSE": [], "MAPE": []}
    for h in range(H):
        ae = se = pe = 0.0
        n = npct = 0
        for s in range(S):
            for k in range(N):
                if mask[s, k, h] == 0:
                    continue
                e = pred[s, k, h] - target[s, k, h]
                ae += abs(e)
                se += e * e
                n += 1
                if abs(target[s, k, h]) >= 1e-8:
                    pe += abs(e) / abs(target[s, k, h])
                    npct += 1
        out["MAE"].append(ae / n if n else math.nan)
        out["RMSE"].append(math.sqrt(se / n) if n else math.nan)
        out["MAPE"].append(100 * pe / npct if npct else math.nan)
    return out


class TestSchedule:
    def test_endpoints(self):
        assert lr_schedule(0, 100, 10, 1e-3) == 0.0
        assert lr_schedule(10, 100, 10, 1e-3) == 1e-3
        assert abs(lr_schedule(100, 100, 10, 1e-3)) <= 1e-15

    @given(st.integers(1, 500), st.integers(0, 100), st.floats(1e-5, 1.0))
    def test_shape(self, total, warm, lr0):
        warm = min(warm, total)
        lrs = [lr_schedule(s, total, warm, lr0) for s in range(total + 1)]
        assert all(b >= a for a, b in zip(lrs[: warm + 1], lrs[1 : warm + 1]))
        assert all(b <= a + 1e-18 for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
        assert max(lrs) <= lr0 * (1 + 1e-15)


class TestAdamW:
    def test_zero_gradients_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_hand_computed(self):
        p = {"w": np.array([0.5])}
        lr = 1e-3
        adamw_step(p, {"w": np.array([1.0])}, AdamState.zeros_like(p), lr)
        # m_hat = 1, v_hat = 1 after bias correction
        assert p["w"][0] == pytest.approx(0.5 - lr / (1.0 + 1e-8), rel=0, abs=1e-16)

    def test_decoupled_decay(self):
        p = {"w": np.array([2.0, -4.0])}
        adamw_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), 0.1, weight_decay=0.5)
        np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * 0.95, rtol=1e-15)

    def test_constant_gradient_strictly_decreases(self):
        p = {"w": np.array([1.0])}
        st_ = AdamState.zeros_like(p)
        seen = [1.0]
        for _ in range(20):
            adamw_step(p, {"w": np.array([0.3])}, st_, 1e-2)
            seen.append(float(p["w"][0]))
        assert all(b < a for a, b in zip(seen, seen[1:]))

    def test_shape_mismatch(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(ValueError):
            adamw_step(p, {"w": np.zeros(3)}, AdamState.zeros_like(p), 0.1)


class TestMetrics:
    def test_examples(self):
        t = np.full((2, 3, 4), 2.0)
        m = metrics(t, t)
        assert all((m[k] == 0).all() for k in m)
        m = metrics(t + 1, t)
        np.testing.assert_allclose(m["MAE"], 1.0)
        np.testing.assert_allclose(m["RMSE"], 1.0)
        np.testing.assert_allclose(m["MAPE"], 50.0)

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1))
    def test_naive_oracle_and_jensen(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
        pred, target = rng.normal(size=shape), rng.normal(size=shape)
        target[rng.uniform(size=shape) < 0.1] = 0.0
        mask = (rng.uniform(size=shape) < 0.8).astype(float)
        mask[..., 0] = 1.0
        got, ref = metrics(pred, target, mask), naive_metrics(pred, target, mask)
        for k in got:
            np.testing.assert_allclose(got[k], ref[k], rtol=1e-12, atol=1e-12, equal_nan=True)
        ok = np.isfinite(got["MAE"])
        assert ok[0] and (got["RMSE"][ok] >= got["MAE"][ok] - 1e-15).all()

    def test_empty_mask_reports_nan(self, caplog):
        t = np.ones((2, 2, 2))
        mask = np.ones_like(t)
        mask[..., 1] = 0
        with caplog.at_level(logging.WARNING):
            m = metrics(t, t, mask)
        assert math.isnan(m["MAE"][1]) and m["MAE"][0] == 0.0
        assert "empty mask" in caplog.text

    def test_mape_skips_zero_targets(self):
        m = metrics(np.array([[[1.0, 3.0]]]).transpose(0, 2, 1), np.array([[[0.0, 2.0]]]).transpose(0, 2, 1))
        assert m["MAPE"][0] == pytest.approx(50.0)


class TestConfig:
    def test_variants(self):
        cfg = TrainConfig()
        assert variant_setup("no_residual", cfg) == (False, Regularizer())
        assert variant_setup("penalty", cfg)[1] == Regularizer.penalty(-0.1)
        assert variant_setup("dropout", cfg)[1] == Regularizer.dropout(0.2)
        assert variant_setup("mask", cfg) == (True, Regularizer.mask())
        with pytest.raises(ValueError):
            variant_setup("causal", cfg)

    @pytest.mark.parametrize("kw", [{"lr0": 0.0}, {"seeds": []}, {"batch_size": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


@pytest.fixture(scope="module")
def tiny():
    ds = gen_synthetic(SyntheticConfig(n_nodes=4, length=260, seed=1))
    mc = ModelConfig(n_nodes=4, window=6, horizon=3)
    return ds, mc


class TestExperiment:
    def test_zero_epochs_and_identical_seeds(self, tiny):
        ds, mc = tiny
        res = run_experiment("no_reg", TrainConfig(epochs=0, seeds=[3, 3], horizons_report=[1, 3]), ds, mc)
        assert all(np.isfinite(res.mean[k]).all() for k in res.mean)
        assert all((res.std[k] == 0).all() for k in res.std)
        assert res.seeds[0].history == []

    def test_rerun_is_identical(self, tiny):
        ds, mc = tiny
        cfg = TrainConfig(epochs=2, seeds=[0, 1], horizons_report=[1, 3], batch_size=8)
        a = run_experiment("dropout", cfg, ds, mc)
        b = run_experiment("dropout", cfg, ds, mc)
        for sa, sb in zip(a.seeds, b.seeds):
            assert sa.history == sb.history
            assert all(np.array_equal(sa.test[k], sb.test[k]) for k in sa.test)
            assert np.array_equal(sa.attention, sb.attention)
        assert len(a.seeds[0].history) == 2
        assert set(a.seeds[0].history[0]) == {"epoch", "train_loss", "val_mae", "mean_diag", "mean_offdiag", "diag_ratio"}
        assert (a.std["MAE"] >= 0).all()

    def test_training_reduces_loss(self, tiny):
        ds, mc = tiny
        res = run_experiment("no_reg", TrainConfig(epochs=4, seeds=[0], lr0=3e-3, warmup_epochs=1, batch_size=8, horizons_report=[3]), ds, mc)
        h = res.seeds[0].history
        assert h[-1]["train_loss"] < h[0]["train_loss"]

    def test_mask_variant_diagonal(self, tiny):
        ds, mc = tiny
        res = run_experiment("mask", TrainConfig(epochs=1, seeds=[0], horizons_report=[1]), ds, mc)
        assert np.diagonal(res.seeds[0].attention, axis1=-2, axis2=-1).max() == 0.0
        assert res.seeds[0].history[0]["mean_diag"] == 0.0

    def test_diverged_seed_is_excluded(self, tiny, monkeypatch):
        ds, mc = tiny
        real = train_mod.masked_mae

        def poisoned(pred, target, mask=None):
            loss, d = real(pred, target, mask)
            return (math.nan, d) if poisoned.bad else (loss, d)

        poisoned.bad = False
        orig_train_seed = train_mod.train_seed

        def train_seed(variant, cfg, model_cfg, splits, seed, scale, shift):
            poisoned.bad = seed == 1
            return orig_train_seed(variant, cfg, model_cfg, splits, seed, scale, shift)

        monkeypatch.setattr(train_mod, "masked_mae", poisoned)
        monkeypatch.setattr(train_mod, "train_seed", train_seed)
        res = run_experiment("no_reg", TrainConfig(epochs=1, seeds=[0, 1], horizons_report=[1]), ds, mc)
        assert [s.failed for s in res.seeds] == [False, True]
        assert len(res.ok) == 1
        np.testing.assert_array_equal(res.std["MAE"], 0.0)

    def test_bad_reported_horizon(self, tiny):
        ds, mc = tiny
        with pytest.raises(ValueError):
            run_experiment("no_reg", TrainConfig(epochs=0, seeds=[0], horizons_report=[12]), ds, mc)
