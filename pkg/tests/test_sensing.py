"""Unit tests for sensor placement, measurement and chunking."""

import numpy as np
import pytest

import ensers.datagen as dg
import ensers.sensing as sn


# ---------------------------------------------------------------------------
# layout sampling


def test_layout_shape_and_range():
    lay = sn.sample_layout(L=6, M=2, count=5, omega=30, seed=0)
    assert lay.idx.shape == (6, 2, 5)
    assert lay.idx.min() >= 0 and lay.idx.max() < 30
    assert lay.count == 5


def test_layout_distinct_without_replacement():
    lay = sn.sample_layout(L=4, M=3, count=8, omega=10, seed=1)
    for l in range(4):
        for m in range(3):
            assert len(set(lay.idx[l, m])) == 8


def test_layout_full_count_is_permutation():
    lay = sn.sample_layout(L=3, M=1, count=12, omega=12, seed=2)
    for l in range(3):
        assert sorted(lay.idx[l, 0]) == list(range(12))


def test_layout_overdraw_rejected():
    with pytest.raises(sn.SensingError):
        sn.sample_layout(L=2, M=1, count=11, omega=10, seed=0)
    lay = sn.sample_layout(L=2, M=1, count=11, omega=10, seed=0, with_replacement=True)
    assert lay.idx.shape == (2, 1, 11)


def test_layout_seed_determinism():
    a = sn.sample_layout(L=3, M=2, count=4, omega=20, seed=9)
    b = sn.sample_layout(L=3, M=2, count=4, omega=20, seed=9)
    c = sn.sample_layout(L=3, M=2, count=4, omega=20, seed=10)
    assert np.array_equal(a.idx, b.idx)
    assert not np.array_equal(a.idx, c.idx)


def test_layout_rows_differ_across_time_and_variable():
    lay = sn.sample_layout(L=5, M=2, count=10, omega=500, seed=0)
    rows = lay.idx.reshape(-1, 10)
    assert len({tuple(r) for r in rows}) == rows.shape[0]


def test_static_layout_repeats_one_row():
    lay = sn.sample_layout(L=7, M=2, count=6, omega=40, seed=3, static=True)
    for l in range(1, 7):
        assert np.array_equal(lay.idx[l], lay.idx[0])
    assert lay.static


def test_layout_out_of_range_rejected():
    with pytest.raises(sn.SensingError):
        sn.Layout(idx=np.full((2, 1, 3), 9), omega=9, seed=0)


def test_layout_window():
    lay = sn.sample_layout(L=9, M=1, count=2, omega=10, seed=0)
    win = lay.window(k=2, z=2, gamma=5)
    assert np.array_equal(win, lay.idx[4:9])


# ---------------------------------------------------------------------------
# measurement


def test_measure_equals_onehot_matrix_product():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((4, 2, 9))
    lay = sn.sample_layout(L=4, M=2, count=3, omega=9, seed=1)
    vals = sn.measure(Z, lay)
    for l in range(4):
        for m in range(2):
            C = np.zeros((3, 9))
            C[np.arange(3), lay.idx[l, m]] = 1.0
            assert np.array_equal(vals[l, m], C @ Z[l, m])


def test_measure_noise_applied_to_gathered_values():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((3, 1, 20))
    lay = sn.sample_layout(L=3, M=1, count=5, omega=20, seed=2)
    clean = sn.measure(Z, lay)
    spec = dg.NoiseSpec(snr_db=20.0, seed=4)
    noisy = sn.measure(Z, lay, spec)
    assert np.array_equal(noisy, dg.add_noise(clean, spec))


def test_measure_shape_mismatch_rejected():
    lay = sn.sample_layout(L=3, M=1, count=2, omega=8, seed=0)
    with pytest.raises(sn.SensingError):
        sn.measure(np.zeros((4, 1, 8)), lay)
    with pytest.raises(sn.SensingError):
        sn.measure(np.zeros((3, 1, 4)), lay)


# ---------------------------------------------------------------------------
# chunking


def test_chunk_count_formula():
    # floor((L - gamma) / z) + 1
    assert sn.n_chunks(L=50, gamma=5, z=2) == 23
    assert sn.n_chunks(L=5, gamma=5, z=2) == 1
    assert sn.n_chunks(L=40, gamma=5, z=1) == 36


def test_chunk_gamma_exceeding_length_rejected():
    with pytest.raises(sn.SensingError):
        sn.n_chunks(L=4, gamma=5, z=1)


def test_chunks_tile_the_record():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((11, 2, 16))
    slay = sn.sample_layout(L=11, M=2, count=4, omega=16, seed=0)
    dlay = sn.sample_layout(L=11, M=2, count=6, omega=16, seed=1)
    chunks = sn.build_chunks(Z, slay, dlay, gamma=5, z=3)
    assert len(chunks) == 3
    for c in chunks:
        lo = c.k * 3
        assert c.chi.shape == (5, 2, 4)
        assert c.phi.shape == (5, 2, 6)
        assert np.array_equal(c.sensor_idx, slay.idx[lo : lo + 5])
        assert np.array_equal(
            c.chi, np.take_along_axis(Z[lo : lo + 5], c.sensor_idx, axis=2))
        assert np.array_equal(
            c.phi, np.take_along_axis(Z[lo : lo + 5], c.label_idx, axis=2))


def test_chunk_labels_stay_noise_free():
    rng = np.random.default_rng(2)
    Z = rng.standard_normal((6, 1, 12))
    slay = sn.sample_layout(L=6, M=1, count=3, omega=12, seed=0)
    dlay = sn.sample_layout(L=6, M=1, count=3, omega=12, seed=1)
    chunks = sn.build_chunks(Z, slay, dlay, gamma=3, z=1,
                             sensor_noise=dg.NoiseSpec(snr_db=5.0, seed=7))
    clean = sn.build_chunks(Z, slay, dlay, gamma=3, z=1)
    for noisy_c, clean_c in zip(chunks, clean):
        assert np.array_equal(noisy_c.phi, clean_c.phi)
        assert not np.array_equal(noisy_c.chi, clean_c.chi)


def test_chunks_are_copies():
    Z = np.zeros((5, 1, 8))
    slay = sn.sample_layout(L=5, M=1, count=2, omega=8, seed=0)
    chunks = sn.build_chunks(Z, slay, slay, gamma=3, z=1)
    chunks[0].chi[:] = 99.0
    assert np.all(chunks[1].chi == 0.0)


# ---------------------------------------------------------------------------
# layout file round-trip


def test_layout_save_load_roundtrip(tmp_path):
    lay = sn.sample_layout(L=4, M=2, count=3, omega=25, seed=5, static=True)
    path = tmp_path / "layout.json"
    sn.save_layout(lay, path)
    back = sn.load_layout(path)
    assert np.array_equal(back.idx, lay.idx)
    assert back.omega == lay.omega
    assert back.seed == lay.seed
    assert back.static == lay.static


def test_layout_load_wrong_format(tmp_path):
    path = tmp_path / "layout.json"
    path.write_text('{"format": "nope"}')
    with pytest.raises(sn.SensingError):
        sn.load_layout(path)
