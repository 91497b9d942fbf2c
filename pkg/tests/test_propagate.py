import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propnet.data import CropRecord, MaskVolume, PhantomConfig, VolumeScan, crop_around, synth_volume
from propnet.model import PropNet
from propnet.propagate import (ModelPredictor, PropagationConfig, assemble_full, compute_interval, compute_tau,
                               mcc_filter, propagate, segment_volume)

from oracles import mcc_oracle


def copy_stub(support_image, support_mask, query_images):
    return np.repeat(support_mask[None].astype(np.float32), len(query_images), axis=0)


def halving_stub(support_image, support_mask, query_images):
    flat = support_mask.ravel().copy()
    on = np.flatnonzero(flat)
    flat[on[len(on) // 2:]] = 0
    half = flat.reshape(support_mask.shape).astype(np.float32)
    return np.repeat(half[None], len(query_images), axis=0)


def _vol(Z=32, H=16, spacing=(5.0, 1.0, 1.0)):
    img = np.random.default_rng(0).random((Z, H, H)).astype(np.float32)
    return VolumeScan(img, spacing, "v")


def _seed(H=16, area=64):
    m = np.zeros((H, H), np.uint8)
    m.ravel()[:area] = 1
    return m


# -- schedule helpers --------------------------------------------------------

@pytest.mark.parametrize("sz, want", [(5, 4), (0.625, 32), (25, 1), (20, 1), (3, 6)])
def test_compute_interval(sz, want):
    assert compute_interval(sz) == want


def test_compute_interval_custom_and_errors():
    assert compute_interval(5, 10) == 2
    with pytest.raises(ValueError):
        compute_interval(0)


@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_compute_interval_monotone(a, b):
    lo, hi = sorted((a, b))
    assert compute_interval(hi) <= compute_interval(lo)


def test_compute_tau():
    assert compute_tau(_seed(area=200, H=20)) == 10
    assert compute_tau(_seed(area=19)) == pytest.approx(0.95)
    with pytest.raises(ValueError):
        compute_tau(np.zeros((4, 4)))


# -- propagation -------------------------------------------------------------

def test_copy_stub_reaches_both_edges():
    vol, seed = _vol(), _seed()
    res = propagate(copy_stub, vol, 10, seed)
    assert res.interval == 4
    assert all(np.array_equal(res.mask3d.voxels[z], seed) for z in range(32))
    assert res.front_trace["up"][-1].terminated == "edge"
    assert res.front_trace["down"][-1].terminated == "edge"
    assert res.per_slice_area == [64] * 32


def test_halving_stub_terminates_after_five_halvings():
    seed = _seed(area=320, H=20)
    vol = VolumeScan(np.zeros((64, 20, 20), np.float32), (5.0, 1.0, 1.0))
    res = propagate(halving_stub, vol, 32, seed)
    assert res.tau == 16
    for name in ("up", "down"):
        trace = res.front_trace[name]
        assert len(trace) == 5
        assert [s.support_area for s in trace] == [320, 160, 80, 40, 20]
        assert trace[-1].terminated == "area"
    # 5 jumps of 4 slices each side; the last jump's slices are kept
    covered = np.flatnonzero(res.mask3d.voxels.reshape(64, -1).any(1))
    assert covered.min() == 32 - 20 and covered.max() == 32 + 20
    assert res.per_slice_area[32 + 20] == 10 < res.tau


def test_iteration_structure_and_source_trace():
    vol, seed = _vol(Z=20), _seed()
    res = propagate(copy_stub, vol, 9, seed)
    down = res.front_trace["down"]
    assert down[0].support == 9 and down[0].queries == [10, 11, 12, 13]
    assert down[1].support == 13 and down[1].queries == [14, 15, 16, 17]
    up = res.front_trace["up"]
    assert up[0].queries == [8, 7, 6, 5] and up[1].support == 5
    for name, trace in res.front_trace.items():
        for step in trace:
            for q in step.queries:
                assert res.source[q] == step.support
    assert 9 not in res.source


def test_seed_slice_kept_verbatim():
    def empty(si, sm, q):
        return np.zeros((len(q),) + sm.shape, np.float32)

    vol, seed = _vol(), _seed()
    res = propagate(empty, vol, 5, seed)
    assert np.array_equal(res.mask3d.voxels[5], seed)
    assert res.mask3d.voxels.sum() == seed.sum()
    assert all(t[-1].terminated == "area" for t in res.front_trace.values())


def test_max_iterations_guard():
    vol, seed = _vol(Z=64), _seed()
    res = propagate(copy_stub, vol, 0, seed, PropagationConfig(max_iterations=2))
    assert res.front_trace["down"][-1].terminated == "max_iterations"
    assert res.front_trace["up"][-1].terminated == "edge"


def test_binarization_threshold():
    def half(si, sm, q):
        return np.full((len(q),) + sm.shape, 0.5, np.float32)

    def below(si, sm, q):
        return np.full((len(q),) + sm.shape, np.nextafter(np.float32(0.5), np.float32(0)), np.float32)

    vol, seed = _vol(Z=6), _seed()
    assert propagate(half, vol, 2, seed).mask3d.voxels[3].all()
    assert not propagate(below, vol, 2, seed).mask3d.voxels[3].any()


def test_propagate_input_errors():
    vol = _vol()
    with pytest.raises(ValueError):
        propagate(copy_stub, vol, 3, np.zeros((16, 16)))
    with pytest.raises(ValueError):
        propagate(copy_stub, vol, 40, _seed())
    with pytest.raises(ValueError):
        propagate(copy_stub, vol, 3, np.ones((8, 8)))


def test_fronts_run_concurrently():
    barrier = threading.Barrier(2, timeout=5)

    def meeting_stub(si, sm, q):
        barrier.wait()  # only returns if both fronts are in flight together
        return copy_stub(si, sm, q)

    vol, seed = _vol(Z=9), _seed()
    res = propagate(meeting_stub, vol, 4, seed, PropagationConfig(parallel=True))
    assert res.mask3d.voxels.sum() == 9 * seed.sum()


def _noisy_stub(si, sm, q):
    # data-dependent but deterministic; sleeps to interleave the fronts
    time.sleep(0.001)
    rng = np.random.default_rng(int(si.sum() * 1e3) % 2**32)
    keep = rng.random(sm.shape) < 0.9
    return np.repeat((sm * keep).astype(np.float32)[None], len(q), axis=0)


@given(st.integers(0, 24), st.integers(1, 6), st.integers(5, 120))
@settings(max_examples=25, deadline=None)
def test_parallel_equals_sequential_and_halts(seed_index, interval, area):
    vol, seed = _vol(Z=25), _seed(area=area)
    kw = dict(interval_mm=5.0 * interval)
    a = propagate(_noisy_stub, vol, seed_index, seed, PropagationConfig(parallel=True, **kw))
    b = propagate(_noisy_stub, vol, seed_index, seed, PropagationConfig(parallel=False, **kw))
    assert np.array_equal(a.mask3d.voxels, b.mask3d.voxels)
    assert all(t[-1].terminated in ("area", "edge") for t in a.front_trace.values())
    # predicted slices form one contiguous run containing the seed
    visited = sorted(set(a.source) | {seed_index})
    assert visited == list(range(visited[0], visited[-1] + 1))
    nz = np.flatnonzero(a.mask3d.voxels.reshape(25, -1).any(1))
    assert set(nz) <= set(visited)


def test_model_predictor_parallel_equals_sequential(tiny_net):
    vol, mask = synth_volume(PhantomConfig(seed=1))
    pred = ModelPredictor(PropNet(tiny_net))
    s = int(np.argmax(mask.voxels.reshape(32, -1).sum(1)))
    runs = [segment_volume(pred, vol, s, mask.voxels[s], PropagationConfig(parallel=p)) for p in (True, False)]
    assert np.array_equal(runs[0].mask.voxels, runs[1].mask.voxels)
    assert runs[0].mask.shape == vol.shape


# -- MCC ---------------------------------------------------------------------

def test_mcc_examples():
    m = np.zeros((10, 10, 10), np.uint8)
    m[0:5, 0:5, 0:4] = 1  # 100 voxels
    m[8:9, 8:9, 5:10] = 1  # 5 voxels
    out = mcc_filter(m)
    assert out.sum() == 100 and out[8, 8, 5] == 0
    single = (m.copy() * 0)
    single[2:4, 2:4, 2:4] = 1
    assert np.array_equal(mcc_filter(single), single)
    assert mcc_filter(np.zeros((3, 3, 3))).sum() == 0


def test_mcc_connectivity_modes():
    m = np.zeros((3, 3, 3), np.uint8)
    m[0, 0, 0] = m[1, 1, 1] = m[2, 2, 2] = 1  # diagonal chain
    assert mcc_filter(m, 26).sum() == 3
    assert mcc_filter(m, 6).sum() == 1
    assert mcc_filter(m, 6)[0, 0, 0] == 1  # tie goes to the first voxel in raster order
    with pytest.raises(ValueError):
        mcc_filter(m, 18)


def test_mcc_preserves_type():
    mv = MaskVolume(np.ones((2, 2, 2), np.uint8), (1.0, 2.0, 3.0), "x")
    out = mcc_filter(mv)
    assert isinstance(out, MaskVolume) and out.spacing == mv.spacing and out.id == "x"


@pytest.mark.parametrize("conn", [6, 26])
def test_mcc_matches_flood_fill(conn, rng):
    for _ in range(20):
        shape = tuple(int(v) for v in rng.integers(3, 10, size=3))
        m = (rng.random(shape) < rng.uniform(0.05, 0.35)).astype(np.uint8)
        out = mcc_filter(m, conn)
        assert np.array_equal(out, mcc_oracle(m, conn))
        assert out.sum() <= m.sum()


# -- assembly ----------------------------------------------------------------

def test_assemble_identity_and_empty():
    m = (np.random.default_rng(0).random((3, 8, 8)) < 0.5).astype(np.uint8)
    rec = CropRecord(0, 0, 8, (8, 8))
    assert np.array_equal(assemble_full(m, rec), m)
    assert assemble_full(np.zeros((3, 4, 4)), CropRecord(2, 1, 4, (8, 8))).sum() == 0
    with pytest.raises(ValueError):
        assemble_full(m, CropRecord(0, 0, 4, (8, 8)))


def test_assemble_round_trip_with_crop_around():
    vol, mask = synth_volume(PhantomConfig(seed=3))
    _, cm, rec = crop_around(vol, mask, int(np.argmax(mask.voxels.reshape(32, -1).sum(1))), 40)
    back = assemble_full(cm, rec)
    win = np.zeros(mask.shape[1:], bool)
    win[max(rec.y0, 0):rec.y0 + rec.size, max(rec.x0, 0):rec.x0 + rec.size] = True
    assert np.array_equal(back[:, win], mask.voxels[:, win])
    assert back[:, ~win].sum() == 0


def test_segment_volume_with_copy_stub_recovers_seed_region():
    vol, mask = synth_volume(PhantomConfig(seed=2))
    s = int(np.argmax(mask.voxels.reshape(32, -1).sum(1)))
    seg = segment_volume(copy_stub, vol, s, mask.voxels[s], PropagationConfig(mcc=False))
    assert seg.mask.shape == vol.shape
    # nearest-neighbour resampling there and back keeps the seed slice
    assert np.array_equal(seg.mask.voxels[s], mask.voxels[s])
