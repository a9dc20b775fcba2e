import math

import numpy as np
import pytest

from flodcast.data import ClampCounter, InputWindow, NormalizationParams, build_window, stack_frame, synth_scene
from flodcast.errors import InvalidArgumentError, UnsupportedConfigurationError
from flodcast.evaluation import evaluate_forecaster
from flodcast.model import FlodCast, ModelConfig
from flodcast.rollout import CopyLast, autoregress, predict_at, rollout_normalized

NORM = NormalizationParams(-3.0, 3.0)


class OracleStub:
    """Answers every window with the true next K frames of one known sequence."""

    def __init__(self, frames, T=3, K=3):
        self.frames, self.T, self.K = frames, T, K
        self.calls = 0

    def _locate(self, window):
        for t in range(self.T - 1, len(self.frames)):
            if np.array_equal(self.frames[t - self.T + 1:t + 1], window):
                return t
        raise AssertionError("window not found in the sequence")

    def predict(self, frames):
        self.calls += 1
        frames = np.asarray(frames)
        single = frames.ndim == 4
        batch = frames[None] if single else frames
        out = np.stack([self.frames[self._locate(w) + 1:self._locate(w) + 1 + self.K] for w in batch])
        f, d = out[..., :2], out[..., 2:]
        return (f[0], d[0]) if single else (f, d)


@pytest.fixture(scope="module")
def scene():
    seq = synth_scene(11, length=20)
    frames = np.stack([stack_frame(f, d, NORM) for f, d in seq.pairs()])
    return seq, frames


@pytest.fixture(scope="module")
def model():
    return FlodCast(ModelConfig.tiny(), seed=0)


@pytest.mark.parametrize("horizon,rounds", [(1, 1), (3, 1), (4, 2), (5, 2), (9, 3), (10, 4)])
def test_round_count(model, scene, horizon, rounds):
    res = autoregress(model, InputWindow(scene[1][:3], t=2), horizon, NORM)
    assert res.rounds == rounds == math.ceil(horizon / 3)
    assert len(res.flows) == len(res.depths) == horizon


def test_oracle_stub_rollout_reproduces_ground_truth(scene):
    seq, frames = scene
    stub = OracleStub(frames)
    t = 4
    res = autoregress(stub, build_window(seq.pairs(), t, 3, NORM), 10, NORM)
    assert stub.calls == 4
    for k in range(10):
        assert np.array_equal(res.normalized_flows[k], frames[t + 1 + k, ..., :2])
        gt_flow = seq.pairs()[t + 1 + k][0]
        np.testing.assert_allclose(res.flows[k].as_array(), gt_flow.as_array(), atol=1e-5)
    flow10, _ = predict_at(stub, build_window(seq.pairs(), t, 3, NORM), 10, NORM)
    assert np.array_equal(flow10.as_array(), res.flows[9].as_array())


def test_perfect_stub_scores_zero(scene):
    seq, frames = scene
    stub = OracleStub(frames)
    ev = evaluate_forecaster(stub, [seq.pairs()], NORM, 5, windows_per_sequence=2)
    for s in ev.steps:
        assert s.flow.epe < 1e-5
        assert s.depth.abs_rel < 1e-6


def test_prefix_consistency_and_determinism(model, scene):
    w = InputWindow(scene[1][2:5], t=4)
    long = autoregress(model, w, 10, NORM)
    for h in (1, 3, 5, 7):
        short = autoregress(model, w, h, NORM)
        assert np.array_equal(short.normalized_flows, long.normalized_flows[:h])
        assert np.array_equal(short.normalized_depths, long.normalized_depths[:h])
    again = autoregress(model, w, 10, NORM)
    assert np.array_equal(again.normalized_depths, long.normalized_depths)


def test_feedback_never_clamps(model, scene):
    counter = ClampCounter()
    rollout_normalized(model, scene[1][:3], 10, counter=counter)
    assert counter.count == 0


def test_batched_rollout_matches_single(model, scene):
    frames = scene[1]
    batch = np.stack([frames[0:3], frames[5:8]])
    f, d, rounds = rollout_normalized(model, batch, 5)
    f1, d1, _ = rollout_normalized(model, frames[5:8], 5)
    assert rounds == 2
    np.testing.assert_allclose(f[1], f1, atol=1e-6)
    np.testing.assert_allclose(d[1], d1, atol=1e-6)


def test_copy_last_repeats_last_frame(scene):
    frames = scene[1]
    f, d, _ = rollout_normalized(CopyLast(), frames[:3], 7)
    assert np.array_equal(f, np.repeat(frames[2:3, ..., :2], 7, axis=0))
    assert np.array_equal(d, np.repeat(frames[2:3, ..., 2:], 7, axis=0))


def test_errors(model, scene):
    frames = scene[1]
    with pytest.raises(InvalidArgumentError):
        rollout_normalized(model, frames[:3], 0)
    with pytest.raises(InvalidArgumentError):
        rollout_normalized(model, frames[:2], 3)
    k1 = FlodCast(ModelConfig.tiny(K=1), seed=0)
    with pytest.raises(UnsupportedConfigurationError):
        rollout_normalized(k1, frames[:3], 2)
    # one step needs no feedback, so it is always allowed
    assert rollout_normalized(k1, frames[:3], 1)[2] == 1
    f, _, rounds = rollout_normalized(k1, frames[:3], 4, allow_mixed_window=True)
    assert rounds == 4 and f.shape[0] == 4
