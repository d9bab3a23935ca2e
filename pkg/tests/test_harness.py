"""Unit tests for the training/evaluation driver."""

import dataclasses

import numpy as np
import pytest

import ensers.datagen as dg
import ensers.decoder as dec
import ensers.harness as hz
import ensers.inner as inn


def tiny_snapshots(L=9, M=2, nx=6, ny=6, seed=0):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((L, M, nx * ny))
    return dg.SnapshotSet(
        Z=Z, system="burgers2d", nx=nx, ny=ny, dx=1.0 / nx, dy=1.0 / ny,
        dt_output=0.01, periodic=True, meta={"nu": 0.05})


def tiny_config(**kw):
    base = dict(
        gamma=4, stride=1, n_sensors=6, n_labels=8, hidden=(8,),
        latent_width=3, outer_iters=3, outer_lr=1e-4, batch=2,
        inner_steps=2, inner_lr0=0.1, inner_lr_ramp=0.0,
        physics_weight0=1e-4, physics_ramp=0.0, seed=0)
    base.update(kw)
    return hz.TrainConfig(**base)


# ---------------------------------------------------------------------------
# configuration


def test_window_too_short_rejected():
    with pytest.raises(hz.TrainingError):
        hz.TrainConfig(gamma=2)


def test_unknown_optimizer_rejected():
    with pytest.raises(hz.TrainingError):
        hz.TrainConfig(optimizer="rmsprop")


def test_unknown_mode_rejected():
    with pytest.raises(hz.TrainingError):
        hz.TrainConfig(mode="hybrid")


def test_schedules_are_affine_in_iteration():
    cfg = tiny_config(inner_lr0=0.1, inner_lr_ramp=0.006,
                      physics_weight0=0.005, physics_ramp=1e-4)
    for it in (0, 1, 500):
        assert cfg.inner_lr0 + it * cfg.inner_lr_ramp == pytest.approx(0.1 + 0.006 * it)
        assert cfg.physics_weight0 + it * cfg.physics_ramp == pytest.approx(0.005 + 1e-4 * it)


# ---------------------------------------------------------------------------
# training mechanics


def test_train_returns_history_of_requested_length():
    snaps = tiny_snapshots()
    net, hist = hz.train(snaps, tiny_config(outer_iters=4))
    assert len(hist["loss"]) == 4
    assert len(hist["label_loss"]) == 4
    assert len(hist["physics_loss"]) == 4
    assert all(np.isfinite(hist["loss"]))


def test_train_deterministic():
    snaps = tiny_snapshots()
    net1, h1 = hz.train(snaps, tiny_config())
    net2, h2 = hz.train(snaps, tiny_config())
    assert np.array_equal(net1.flat_parameters(), net2.flat_parameters())
    assert h1["loss"] == h2["loss"]


def test_train_loss_decreases_with_full_labels():
    # smooth low-rank data, every grid point labeled, physics off: plain
    # supervised regression, so a short run must reduce the objective
    x = np.linspace(0, 2 * np.pi, 36, endpoint=False)
    Z = np.stack([np.stack([np.sin(x + 0.3 * l), np.cos(x - 0.2 * l)])
                  for l in range(8)])
    snaps = dg.SnapshotSet(Z=Z, system="burgers2d", nx=6, ny=6,
                           dx=1 / 6, dy=1 / 6, dt_output=0.01,
                           periodic=True, meta={"nu": 0.05})
    cfg = tiny_config(
        n_sensors=36, n_labels=36, outer_iters=60, outer_lr=1e-2,
        optimizer="adam", physics_weight0=0.0, batch=4)
    net, hist = hz.train(snaps, cfg)
    assert hist["loss"][-1] < 0.2 * hist["loss"][0]


def test_train_record_too_short_rejected():
    snaps = tiny_snapshots(L=3)
    with pytest.raises((hz.TrainingError, Exception)):
        hz.train(snaps, tiny_config(gamma=4))


def test_resume_continues_training():
    snaps = tiny_snapshots()
    net_half, _ = hz.train(snaps, tiny_config(outer_iters=3))
    frozen = net_half.flat_parameters().copy()
    net_res, h_res = hz.train(snaps, tiny_config(outer_iters=6),
                              net=net_half, start_iter=3)
    # only the remaining iterations run, and they move the parameters
    assert len(h_res["loss"]) == 3
    assert net_res is net_half
    assert not np.array_equal(net_res.flat_parameters(), frozen)


def test_resume_rejects_mismatched_net():
    snaps = tiny_snapshots()
    net, _ = hz.train(snaps, tiny_config(gamma=4, outer_iters=1))
    with pytest.raises(hz.TrainingError):
        hz.train(snaps, tiny_config(gamma=5, outer_iters=2), net=net, start_iter=1)


def test_callback_fires_on_schedule():
    snaps = tiny_snapshots()
    seen = []
    hz.train(snaps, tiny_config(outer_iters=5, log_every=2),
             callback=lambda it, loss: seen.append(it))
    assert seen == [0, 2, 4]


def test_label_project_matches_direct_indexing():
    import ensers.autodiff as ad
    rng = np.random.default_rng(0)
    D = rng.standard_normal((4, 2, 9))
    idx = rng.integers(0, 9, size=(4, 2, 5))
    out = hz.label_project(ad.constant(D), idx).value
    assert np.array_equal(out, np.take_along_axis(D, idx, axis=2))


def test_window_dt_spans_the_whole_window():
    snaps = tiny_snapshots()
    # gamma states cover gamma-1 output intervals of stride steps each
    assert hz._window_dt(snaps, 5, 2) == pytest.approx(4 * 2 * 0.01)


# ---------------------------------------------------------------------------
# evaluation


def trained_tiny_net(snaps):
    return hz.train(snaps, tiny_config(outer_iters=2))[0]


def test_test_report_row_count():
    snaps = tiny_snapshots()
    net = trained_tiny_net(snaps)
    cfg = hz.TestConfig(sensor_counts=(2, 4), snr_db=(None, 10.0),
                        n_chunks=3, inner_steps=5, inner_lr=0.5)
    report = hz.test(snaps, net, cfg)
    # 2 sensor counts x 2 noise levels x 3 chunks x 2 variables
    assert len(report.rows) == 24
    assert all(np.isfinite(r["error"]) for r in report.rows)


def test_test_does_not_mutate_net():
    snaps = tiny_snapshots()
    net = trained_tiny_net(snaps)
    before = net.flat_parameters()
    hz.test(snaps, net, hz.TestConfig(sensor_counts=(3,), n_chunks=2,
                                      inner_steps=5, inner_lr=0.5))
    assert np.array_equal(net.flat_parameters(), before)


def test_test_eval_index_validated():
    snaps = tiny_snapshots()
    net = trained_tiny_net(snaps)
    with pytest.raises(hz.TrainingError):
        hz.test(snaps, net, hz.TestConfig(sensor_counts=(3,), eval_index=4,
                                          inner_steps=1, inner_lr=0.5))


def test_error_metric_trivial_cases():
    # a report built by hand: exact reconstruction gives 0, the zero
    # predictor gives exactly 1
    snaps = tiny_snapshots(L=5)
    truth = snaps.Z[2, 0]
    exact = np.linalg.norm(truth - truth) / np.linalg.norm(truth)
    zero = np.linalg.norm(0.0 - truth) / np.linalg.norm(truth)
    assert exact == 0.0
    assert zero == pytest.approx(1.0)


def test_reconstruct_window_shapes():
    snaps = tiny_snapshots()
    net = trained_tiny_net(snaps)
    import ensers.sensing as sn
    lay = sn.sample_layout(snaps.L, snaps.n_vars, 4, snaps.omega, seed=0)
    chi = sn.measure(snaps.Z, lay)[:4]
    D, trace = hz.reconstruct_window(
        snaps, net, chi, lay.idx[:4], inn.InnerConfig(steps=3, lr=0.5))
    assert D.shape == (4, snaps.n_vars, snaps.omega)
    assert len(trace.losses) == 3


# ---------------------------------------------------------------------------
# reports


def make_report():
    report = hz.ErrorReport()
    report.add(0, 0, 4, None, 0.5)
    report.add(0, 1, 4, None, 0.7)
    report.add(1, 0, 16, 10.0, 0.2)
    return report


def test_report_mean_and_filters():
    report = make_report()
    assert report.mean_error() == pytest.approx((0.5 + 0.7 + 0.2) / 3)
    assert report.mean_error(n_sensors=4) == pytest.approx(0.6)
    assert report.mean_error(snr_db=10.0) == pytest.approx(0.2)
    with pytest.raises(hz.TrainingError):
        report.mean_error(n_sensors=99)


def test_report_summary_cells():
    cells = make_report().summary()
    assert len(cells) == 2
    by_key = {(c["n_sensors"], c["snr_db"]): c for c in cells}
    assert by_key[(4, None)]["mean_error"] == pytest.approx(0.6)
    assert by_key[(4, None)]["max_error"] == pytest.approx(0.7)
    assert by_key[(4, None)]["count"] == 2
    assert by_key[(16, 10.0)]["count"] == 1


def test_report_csv_roundtrip(tmp_path):
    report = make_report()
    path = tmp_path / "report.csv"
    hz.write_report_csv(report, path)
    back = hz.read_report_csv(path)
    assert back.rows == report.rows


def test_report_summary_json(tmp_path):
    import json
    path = tmp_path / "summary.json"
    hz.write_report_summary(make_report(), path)
    doc = json.loads(path.read_text())
    assert len(doc["cells"]) == 2
