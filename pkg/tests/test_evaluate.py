"""Metrics, historical-average baseline, reports, and experiment tables."""

import math

import numpy as np
import pytest

from conftest import path_graph
from stunet.data import (
    Normalizer,
    TimeSeriesDataset,
    WindowConfig,
    knn_grid_graph,
    make_windows,
    synth_diffusion,
)
from stunet.errors import DimensionError, MetricError, UsageError
from stunet.evaluate import (
    ha_baseline,
    horizon_report,
    mae,
    mape,
    model_predictions,
    mse,
    rmse,
    run_ablation,
    run_upsampling_comparison,
    write_report_files,
)
from stunet.model import STUNetConfig
from stunet.training import RunConfig, train_model


def test_metric_hand_values():
    assert mae([1.0, 2.0], [2.0, 4.0]) == 1.5
    assert abs(rmse([1.0, 2.0], [2.0, 4.0]) - math.sqrt(2.5)) < 1e-15
    assert mse([1.0, 2.0], [2.0, 4.0]) == 2.5
    assert mae([3.0], [3.0]) == 0.0 and rmse([3.0], [3.0]) == 0.0
    with pytest.raises(DimensionError):
        mae([1.0], [1.0, 2.0])


def test_mape_masks_small_targets():
    # the zero target is excluded; only |1-2|/2 = 50% remains
    assert abs(mape([1.0, 9.0], [2.0, 0.0]) - 50.0) < 1e-12
    assert abs(mape([1.0, 9.0], [2.0, 1e-4]) - 50.0) < 1e-12
    with pytest.raises(MetricError):
        mape([1.0], [1e-9])


def test_rmse_never_below_mae():
    rng = np.random.default_rng(0)
    for _ in range(50):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        pred = rng.normal(size=shape) * rng.uniform(0.1, 10)
        target = rng.normal(size=shape)
        assert rmse(pred, target) >= mae(pred, target)


def test_horizon_report_structure_and_minutes():
    rng = np.random.default_rng(1)
    target = rng.normal(size=(10, 12, 3, 1)) + 4.0
    pred = target + 0.1
    rep = horizon_report(pred, target, steps=(3, 6, 12), interval_minutes=5.0)
    assert [r.step for r in rep.rows] == [3, 6, 12]
    assert [r.minutes for r in rep.rows] == [15.0, 30.0, 60.0]
    assert rep.overall.step == 0
    assert rep.overall.n_samples == 3 * 10 * 3
    assert rep.rmse_dominates()
    with pytest.raises(UsageError):
        horizon_report(pred, target, steps=(13,))
    with pytest.raises(DimensionError):
        horizon_report(pred[0], target[0])


def test_perfect_predictions_report_zero():
    rng = np.random.default_rng(2)
    target = rng.normal(size=(6, 3, 4, 1)) + 5.0
    rep = horizon_report(target.copy(), target)
    for row in rep.all_rows():
        assert row.mae == 0.0 and row.rmse == 0.0 and row.mape == 0.0


def test_report_rendering_includes_provenance():
    rng = np.random.default_rng(3)
    target = rng.normal(size=(4, 2, 3, 1)) + 3.0
    rep = horizon_report(target + 0.2, target)
    prov = ["# config_hash: abc", "# seeds: 0"]
    text = rep.render_text(prov)
    csv = rep.render_csv(prov)
    assert text.startswith("# config_hash: abc\n# seeds: 0\n")
    assert "mape%" in text
    header = [l for l in csv.splitlines() if not l.startswith("#")][0]
    assert header == "step,minutes,mae,mape_percent,mse,rmse,n_samples,n_masked"
    # one line per step plus the aggregate
    rows = [l for l in csv.splitlines() if not l.startswith("#")][1:]
    assert len(rows) == 3 and rows[-1].startswith("all,")


def test_metrics_invariant_under_normalization_roundtrip():
    rng = np.random.default_rng(4)
    target = rng.normal(loc=5.0, size=(40, 3, 2))
    pred = target + rng.normal(size=target.shape)
    norm = Normalizer().fit(target)
    back_p = norm.invert(norm.apply(pred))
    back_t = norm.invert(norm.apply(target))
    assert abs(mae(back_p, back_t) - mae(pred, target)) < 1e-10
    assert abs(rmse(back_p, back_t) - rmse(pred, target)) < 1e-10


def test_ha_period_mode_exact_on_periodic_series():
    g = path_graph(2)
    series = np.array(
        [[1.0, 1.0] if t % 2 == 0 else [3.0, 3.0] for t in range(40)]
    )[:, :, None]
    ds = TimeSeriesDataset(series=series, graph=g)
    wc = WindowConfig(3, 2)
    pred = ha_baseline(ds, wc, period=2)
    _, targets = make_windows(ds, wc, "test")
    assert np.array_equal(pred, targets)
    assert mae(pred, targets) == 0.0


def test_ha_fallback_predicts_window_mean():
    g = path_graph(2)
    series = np.arange(1.0, 31.0)[:, None, None] * np.ones((1, 2, 1))
    ds = TimeSeriesDataset(series=series, graph=g)
    wc = WindowConfig(3, 2)
    pred = ha_baseline(ds, wc)
    inputs, _ = make_windows(ds, wc, "test")
    assert np.allclose(pred[:, 0], inputs.mean(axis=1), atol=1e-12)
    assert np.array_equal(pred[:, 0], pred[:, 1])  # same guess at every step


def test_ha_constant_series_is_exact():
    g = path_graph(3)
    series = np.full((30, 3, 1), 7.5)
    ds = TimeSeriesDataset(series=series, graph=g)
    wc = WindowConfig(4, 2)
    for period in (None, 3, 5):
        pred = ha_baseline(ds, wc, period=period)
        _, targets = make_windows(ds, wc, "test")
        assert mae(pred, targets) == 0.0
    with pytest.raises(UsageError):
        ha_baseline(ds, wc, period=0)


def micro_setup(epochs=1):
    ds = synth_diffusion(
        knn_grid_graph(2, 4), t=220, alpha=0.6, noise_sigma=0.05, seed=3
    )
    cfg = STUNetConfig(k=2, p=1, s=2, hidden_sizes=(6, 6), j=6, h=2, seed=0)
    rc = RunConfig(model=cfg, epochs=epochs, batch_size=32, seed=0)
    return ds, rc


def test_model_predictions_are_denormalized():
    ds, rc = micro_setup()
    model, _ = train_model(rc, ds)
    pred, target = model_predictions(model, ds)
    _, raw_targets = make_windows(ds, WindowConfig(6, 2), "test")
    assert np.array_equal(target, raw_targets)  # original scale
    # predictions live on the target scale, not the z-scored one
    assert abs(pred.mean() - target.mean()) < 5 * ds.series.std()


def test_run_ablation_table_structure():
    ds, rc = micro_setup()
    table = run_ablation(rc, ds, seeds=(0,))
    assert table.labels == ("GCGRU", "T-UNet", "S-UNet", "ST-UNet")
    assert len(table.cells) == 4
    assert all(c.ok() for c in table.cells)
    for label in table.labels:
        s = table.summary(label)
        assert set(s) == {"mae", "mape", "rmse"}
        assert s["mae"][1] == 0.0  # single seed: zero spread
    text = table.render_text()
    assert "# variant GCGRU: p=0 s=1" in text
    assert "±" in text
    csv = table.render_csv()
    assert "variant,seed,status,mae,mape_percent,rmse" in csv
    with pytest.raises(UsageError):
        run_ablation(rc, ds, seeds=())


def test_run_upsampling_comparison_structure():
    ds, rc = micro_setup()
    table = run_upsampling_comparison(rc, ds, seeds=(0,))
    labels = [c.label for c in table.cells]
    assert labels == ["direct_copy", "ordered_deconv", "weighted_deconv"]
    assert all(c.converged for c in table.cells)
    text = table.render_text()
    assert "mse@1" in text and "mse@2" in text
    csv = table.render_csv()
    assert "strategy,seed,converged,mse_step1,mse_step2,mae,rmse" in csv

    flat = RunConfig(model=STUNetConfig(k=2, p=0, s=1, hidden_sizes=(6,), j=6, h=2))
    with pytest.raises(UsageError):
        run_upsampling_comparison(flat, ds, seeds=(0,))


def test_write_report_files(tmp_path):
    text_path, csv_path = write_report_files(
        str(tmp_path / "reports"), "metrics", "hello\n", "a,b\n"
    )
    assert open(text_path).read() == "hello\n"
    assert open(csv_path).read() == "a,b\n"
