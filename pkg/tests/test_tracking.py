import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import bilinear_oracle
from megaflow.config import ModelConfig
from megaflow.core import FlowField
from megaflow.model import MegaFlow
from megaflow.tracking import (
    TrackSet,
    evaluate_tracks,
    flows_to_tracks,
    plan_windows,
    read_tracks,
    track_video,
    track_window,
)


def test_zero_flows_constant_tracks():
    q = torch.tensor([[1.0, 2.0], [3.5, 0.25]])
    tr = flows_to_tracks(torch.zeros(3, 2, 6, 6), q)
    assert tr.positions.shape == (2, 4, 2)
    for t in range(4):
        assert torch.equal(tr.positions[:, t], q)


def test_constant_flow_tracks():
    q = torch.tensor([[1.0, 1.0], [2.25, 3.75]])
    flows = torch.stack([torch.tensor([float(t), 0.0]).view(2, 1, 1).expand(2, 8, 12) for t in (1, 2, 3)])
    tr = flows_to_tracks(flows, q)
    for t in (1, 2, 3):
        assert torch.equal(tr.positions[:, t], q + torch.tensor([float(t), 0.0]))


def test_tracks_match_sampling_oracle():
    gen = torch.Generator().manual_seed(0)
    base = torch.randn(2, 2, 3, 3, generator=gen, dtype=torch.float64)
    flows = torch.nn.functional.interpolate(base, size=(9, 9), mode="bilinear", align_corners=True)
    q = torch.rand(25, 2, generator=gen, dtype=torch.float64) * 8
    tr = flows_to_tracks([FlowField(f, 1) for f in flows], q)
    for t in range(2):
        for p in range(25):
            x, y = q[p].tolist()
            dx, dy = bilinear_oracle(flows[t], x, y)
            assert abs(tr.positions[p, t + 1, 0].item() - (x + dx)) < 1e-6
            assert abs(tr.positions[p, t + 1, 1].item() - (y + dy)) < 1e-6


def test_out_of_frame_flagged_not_dropped():
    q = torch.tensor([[1.0, 1.0], [6.0, 1.0], [-2.0, 1.0]])
    flows = torch.zeros(1, 2, 4, 8)
    flows[:, 0] = 3.0
    tr = flows_to_tracks(flows, q)
    assert tr.num_points == 3
    assert tr.valid[:, 1].tolist() == [True, False, False]
    assert tr.valid[:, 0].all()


def test_stride_checked():
    with pytest.raises(ValueError):
        flows_to_tracks([FlowField(torch.zeros(2, 4, 4), 4)], torch.zeros(1, 2))


def test_trackset_anchor_invariant():
    q = torch.zeros(2, 2)
    with pytest.raises(ValueError):
        TrackSet(q, torch.ones(2, 3, 2), torch.ones(2, 3, dtype=torch.bool))
    with pytest.raises(ValueError):
        TrackSet(q, torch.zeros(2, 3, 2), torch.ones(2, 2, dtype=torch.bool))


def test_window_plan_twenty_frames():
    plan = plan_windows(20, 8)
    assert len(plan.windows) == 3
    for _, idx in plan.windows:
        assert idx[0] == 0 and len(idx) <= 8
    assert [len(idx) for _, idx in plan.windows] == [8, 8, 6]
    assert plan.targets() == list(range(1, 20))
    with pytest.raises(ValueError):
        plan_windows(20, 1)
    with pytest.raises(ValueError):
        plan_windows(1, 8)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 60), size=st.integers(2, 12))
def test_window_plan_partitions_targets(n, size):
    plan = plan_windows(n, size)
    assert sorted(plan.targets()) == list(range(1, n))
    assert len(plan.targets()) == n - 1
    assert len(plan.windows) == math.ceil((n - 1) / (size - 1))
    assert all(idx[0] == 0 and len(idx) <= size for _, idx in plan.windows)


def _tracks(errors):
    """One point per error, two frames; frame 1 displaced by ``(e, 0)``."""
    n = len(errors)
    q = torch.zeros(n, 2)
    pos = torch.zeros(n, 2, 2)
    pos[:, 1, 0] = torch.tensor(errors, dtype=torch.float32)
    return TrackSet(q, pos, torch.ones(n, 2, dtype=torch.bool))


def test_delta_hand_cases():
    gt = _tracks([0.0])
    assert evaluate_tracks(gt, gt)["delta_avg"] == 100.0
    res = evaluate_tracks(_tracks([3.0]), gt)
    assert [res["delta"][k] for k in (1, 2, 4, 8, 16)] == [0.0, 0.0, 100.0, 100.0, 100.0]
    assert res["delta_avg"] == 60.0
    assert evaluate_tracks(_tracks([20.0]), gt)["delta_avg"] == 0.0


def test_delta_no_valid_points_is_undefined():
    gt = _tracks([0.0])
    gt = TrackSet(gt.queries, gt.positions, torch.tensor([[True, False]]))
    res = evaluate_tracks(gt, gt)
    assert res["count"] == 0 and math.isnan(res["delta_avg"])
    with pytest.raises(ValueError):
        evaluate_tracks(_tracks([1.0, 2.0]), gt)


@settings(max_examples=50, deadline=None)
@given(errs=st.lists(st.floats(0, 30), min_size=1, max_size=10), scale=st.floats(1, 4))
def test_delta_monotone_under_inflation(errs, scale):
    gt = _tracks([0.0] * len(errs))
    a = evaluate_tracks(_tracks(errs), gt)["delta_avg"]
    b = evaluate_tracks(_tracks([e * scale for e in errs]), gt)["delta_avg"]
    assert b <= a


def test_tracks_text_round_trip(tmp_path):
    from megaflow.tracking import write_tracks

    tr = flows_to_tracks(torch.randn(2, 2, 5, 5), torch.rand(4, 2) * 4)
    write_tracks(tmp_path / "t.txt", tr)
    back = read_tracks(tmp_path / "t.txt")
    assert torch.equal(back.positions, tr.positions) and torch.equal(back.valid, tr.valid)


def _model():
    torch.manual_seed(0)
    return MegaFlow(ModelConfig.toy()).eval()


def test_single_window_equals_direct_inference():
    model = _model()
    frames = torch.rand(5, 3, 32, 32)
    q = torch.tensor([[4.0, 4.0], [20.5, 11.0]])
    tr = track_video(model, frames, q, window_size=8, iters=2)
    with torch.no_grad():
        direct = model(frames[None], iters=2, pairing="anchored").flows[0]
    ref = flows_to_tracks(direct, q)
    assert torch.equal(tr.positions, ref.positions)


def test_chained_window_uses_previous_flow():
    model = _model()
    frames = torch.rand(4, 3, 32, 32)
    prev = torch.full((2, 32, 32), 4.0)
    a = track_window(model, frames, None, iters=2)
    b = track_window(model, frames, prev, iters=2)
    assert a.shape == b.shape == (1, 3, 2, 32, 32)
    assert not torch.equal(a, b)
    with pytest.raises(ValueError):
        track_window(model, frames[:1])
