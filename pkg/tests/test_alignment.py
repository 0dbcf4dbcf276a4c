import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from candid.alignment import (
    FLO_MAGIC,
    align_stream,
    burst_flows,
    estimate_flow,
    load_flow_dir,
    read_flo,
    save_flow_dir,
    warp,
    write_flo,
)
from candid.imaging import shift_image
from candid.noise import NoiseParams, synthesize_burst
from candid.scenes import dead_leaves
from candid.tensor import Tensor, default_dtype

from oracles import cosine_texture, numeric_grad, rel_error, warp_loops

M = 8


def _epe(flow, dx, dy):
    return np.hypot(flow[..., 0] - dx, flow[..., 1] - dy)[M:-M, M:-M]


def test_zero_motion():
    img = cosine_texture(0, 64)
    assert np.median(_epe(estimate_flow(img, img), 0, 0)) < 0.05


def test_global_shift_two_pixels():
    ref = cosine_texture(1, 64)
    sec = cosine_texture(1, 64, dx=2.0)
    assert _epe(estimate_flow(ref, sec), 2.0, 0.0).mean() < 0.5


def test_subpixel_shift():
    ref = cosine_texture(2, 64)
    sec = cosine_texture(2, 64, dx=-1.3, dy=0.7)
    assert _epe(estimate_flow(ref, sec), -1.3, 0.7).mean() < 0.2


def test_flat_pair_gives_zero_flow():
    img = np.full((1, 32, 32), 0.4, np.float32)
    assert not estimate_flow(img, img).any()


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((1, 8, 8)), np.zeros((1, 8, 9)))
    with pytest.raises(ValueError):
        warp(np.zeros((1, 8, 8)), np.zeros((8, 9, 2)))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_self_flow_is_small(seed):
    img = np.random.default_rng(seed).uniform(size=(1, 24, 24)).astype(np.float32)
    assert np.abs(estimate_flow(img, img)).max() < 0.1


def test_color_input_uses_luminance():
    ref = np.repeat(cosine_texture(3, 48), 3, axis=0)
    sec = np.repeat(cosine_texture(3, 48, dx=1.0), 3, axis=0)
    assert _epe(estimate_flow(ref, sec), 1.0, 0.0).mean() < 0.3


def test_flow_deterministic():
    ref = cosine_texture(4, 40)
    sec = cosine_texture(4, 40, dx=0.5, dy=-1.0)
    assert estimate_flow(ref, sec).tobytes() == estimate_flow(ref, sec).tobytes()


def test_warp_zero_flow_exact():
    data = np.random.default_rng(5).uniform(size=(4, 9, 10)).astype(np.float32)
    assert warp(data, np.zeros((9, 10, 2), np.float32)).tobytes() == data.tobytes()


def test_warp_integer_flow():
    data = np.random.default_rng(6).uniform(size=(2, 7, 9)).astype(np.float32)
    flow = np.zeros((7, 9, 2), np.float32)
    flow[..., 0] = 1
    np.testing.assert_array_equal(warp(data, flow)[:, :, :-1], data[:, :, 1:])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.integers(2, 7), st.integers(2, 7))
def test_warp_matches_loop_oracle(seed, c, h, w):
    rng = np.random.default_rng(seed)
    data = rng.uniform(size=(c, h, w)).astype(np.float32)
    flow = rng.uniform(-3, 3, size=(h, w, 2)).astype(np.float32)
    np.testing.assert_allclose(warp(data, flow), warp_loops(data, flow), atol=1e-5)


def test_warp_is_linear():
    rng = np.random.default_rng(7)
    x, y = rng.uniform(size=(2, 3, 12, 12)).astype(np.float32)
    flow = rng.uniform(-2, 2, size=(12, 12, 2)).astype(np.float32)
    np.testing.assert_allclose(warp(0.3 * x - 1.7 * y, flow), 0.3 * warp(x, flow) - 1.7 * warp(y, flow), atol=1e-5)


def test_warp_gradient():
    rng = np.random.default_rng(8)
    with default_dtype(np.float64):
        x = rng.uniform(size=(2, 2, 5, 6))
        flow = rng.uniform(-2, 2, size=(2, 5, 6, 2))
        probe = rng.standard_normal(x.shape)
        t = Tensor(x, requires_grad=True)
        (warp(t, flow) * Tensor(probe)).sum().backward()
        num = numeric_grad(lambda: float((warp(x, flow) * probe).sum()), x)
    assert rel_error(t.grad, num) < 1e-6


def test_alignment_reduces_residual():
    gt = cosine_texture(9, 64)
    shifted = shift_image(gt, 2, 1)
    flow = estimate_flow(gt, shifted)
    aligned = warp(shifted, flow)
    before = np.abs(shifted - gt)[:, M:-M, M:-M].mean()
    after = np.abs(aligned - gt)[:, M:-M, M:-M].mean()
    assert before / after >= 5


def test_align_stream_identical_frames():
    frame = cosine_texture(10, 32)
    frames = np.stack([frame] * 3)
    feats = np.random.default_rng(10).uniform(size=(3, 4, 32, 32)).astype(np.float32)
    feats[:] = feats[0]
    aligned, afeats, _ = align_stream(frames, feats)
    np.testing.assert_allclose(aligned, frames, atol=1e-3)
    np.testing.assert_allclose(afeats, feats, atol=1e-2)


def test_align_stream_reference_untouched_and_count_check():
    rng = np.random.default_rng(11)
    burst = synthesize_burst(dead_leaves(rng, 48), 3, 2.0, NoiseParams(0.005, 0.005), rng)
    feats = rng.uniform(size=(3, 2, 48, 48)).astype(np.float32)
    aligned, afeats, flows = align_stream(burst.frames, list(feats))
    assert aligned[0].tobytes() == burst.frames[0].tobytes()
    assert afeats[0].tobytes() == feats[0].tobytes()
    assert not flows[0].any()
    with pytest.raises(ValueError):
        align_stream(burst.frames, feats[:2])


def test_alignment_lowers_cross_frame_variance():
    frames = np.stack([cosine_texture(12, 64, dx, dy) for dx, dy in [(0, 0), (1.5, -1), (-2, 0.5), (0.7, 2.2)]])
    aligned, _, _ = align_stream(frames, np.zeros((4, 1, 64, 64), np.float32))
    var_before = frames.var(axis=0)[:, M:-M, M:-M].mean()
    var_after = aligned.var(axis=0)[:, M:-M, M:-M].mean()
    assert var_after <= var_before


def test_burst_flows_shape():
    frames = np.stack([cosine_texture(13, 32, dx, 0) for dx in (0, 1, -1)])
    flows = burst_flows(np.stack([frames, frames]))
    assert flows.shape == (2, 3, 32, 32, 2)
    assert not flows[:, 0].any()


def test_flo_round_trip(tmp_path):
    flow = np.random.default_rng(14).normal(size=(5, 7, 2)).astype(np.float32)
    write_flo(tmp_path / "f.flo", flow)
    raw = (tmp_path / "f.flo").read_bytes()
    assert np.frombuffer(raw[:4], "<f4")[0] == FLO_MAGIC
    assert np.frombuffer(raw[4:12], "<i4").tolist() == [7, 5]
    assert len(raw) == 12 + 5 * 7 * 8
    np.testing.assert_array_equal(read_flo(tmp_path / "f.flo"), flow)


def test_flo_rejects_bad_files(tmp_path):
    (tmp_path / "bad.flo").write_bytes(b"\x00" * 12)
    with pytest.raises(OSError):
        read_flo(tmp_path / "bad.flo")
    flow = np.zeros((4, 4, 2), np.float32)
    write_flo(tmp_path / "t.flo", flow)
    (tmp_path / "t.flo").write_bytes((tmp_path / "t.flo").read_bytes()[:-4])
    with pytest.raises(OSError):
        read_flo(tmp_path / "t.flo")


def test_flow_dir(tmp_path):
    flows = np.random.default_rng(15).normal(size=(3, 4, 5, 2)).astype(np.float32)
    flows[0] = 0
    save_flow_dir(tmp_path, flows)
    np.testing.assert_array_equal(load_flow_dir(tmp_path, 3, 4, 5), flows)
    with pytest.raises(ValueError):
        load_flow_dir(tmp_path, 3, 4, 6)
