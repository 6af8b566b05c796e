import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtscene.scheduler import (SchedulerConfig, SchedulerState, StreamSpec, relative_losses, simulate_scheduler,
                               step, update_history, update_weights, weighted_total)
from mtscene.tensor import Tensor

losses5 = st.lists(st.floats(1e-3, 1e3), min_size=5, max_size=5)


def state(**kw):
    return SchedulerState.create(SchedulerConfig(**kw))


def test_relative_loss_examples():
    np.testing.assert_allclose(relative_losses([2, 3, 5, 0, 0]), [0.2, 0.3, 0.5, 0, 0])
    np.testing.assert_allclose(relative_losses([4] * 5), [0.2] * 5)
    with pytest.raises(ValueError):
        relative_losses([0] * 5)
    with pytest.raises(ValueError):
        relative_losses([1, -1, 1, 1, 1])


def test_history_examples():
    s = state()
    update_history(s, [0.2] * 5)
    np.testing.assert_allclose(s.avg_relative_losses(), 0.2)
    update_history(s, [0.4] * 5)
    np.testing.assert_allclose(s.avg_relative_losses(), 0.3)


def test_history_window_evicts_oldest():
    s = state(window=3)
    for v in (0.9, 0.1, 0.2, 0.3):
        update_history(s, [v] * 5)
    np.testing.assert_allclose(s.avg_relative_losses(), 0.2)
    assert s.snapshot()["counts"] == [3] * 5


def test_weight_examples():
    s = state()
    update_history(s, [1.0] * 5)
    np.testing.assert_array_equal(update_weights(s).weights, 1.0)
    s = state()
    update_history(s, [0.2] * 5)
    np.testing.assert_allclose(update_weights(s).weights, 0.98404, rtol=0, atol=1e-5)
    s = state(base_weights=(0.05,) * 5)
    update_history(s, [0.2] * 5)
    np.testing.assert_array_equal(update_weights(s).weights, 0.1)


def test_weights_need_positive_history():
    s = state()
    update_history(s, [0.5, 0.5, 0, 0, 0])
    with pytest.raises(ValueError):
        update_weights(s)


def test_weighted_total_examples():
    assert weighted_total([1, 2, 3, 4, 5], [1] * 5) == 15
    assert weighted_total([0] * 5, [0.1] * 5) == 0
    assert weighted_total([1, 2, 3, 4, 5], [0.5] * 5) == 7.5
    with pytest.raises(ValueError):
        weighted_total([1, 2], [1])


def test_weights_are_constants_in_the_graph():
    x = Tensor(np.array([2.0]), requires_grad=True)
    total = weighted_total([x * x, x * 3.0], [0.5, 2.0])
    total.backward()
    assert x.grad.tolist() == [0.5 * 4 + 2 * 3]


@settings(max_examples=80, deadline=None)
@given(st.lists(losses5, min_size=1, max_size=6), st.floats(1e-3, 2.0),
       st.lists(st.floats(0.0, 3.0), min_size=5, max_size=5))
def test_floor_always_holds(stream, alpha, base):
    s = state(alpha=alpha, base_weights=tuple(base))
    for ls in stream:
        step(s, ls)
        assert (s.weights >= 0.1).all()


@settings(max_examples=50, deadline=None)
@given(st.lists(losses5, min_size=1, max_size=5))
def test_small_alpha_recovers_base_weights(stream):
    base = (1.0, 0.5, 2.0, 0.3, 1.2)
    s = state(alpha=1e-9, base_weights=base)
    for ls in stream:
        step(s, ls)
    np.testing.assert_allclose(s.weights, base, rtol=0, atol=1e-6)


@settings(max_examples=80, deadline=None)
@given(losses5)
def test_relative_losses_sum_to_one(ls):
    assert abs(relative_losses(ls).sum() - 1.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(losses5, min_size=1, max_size=5), st.integers(-20, 20))
def test_common_scale_invariance_is_exact(stream, k):
    c = 2.0 ** k
    a, b = state(), state()
    for ls in stream:
        assert np.array_equal(relative_losses(ls), relative_losses([v * c for v in ls]))
        step(a, ls)
        step(b, [v * c for v in ls])
    assert np.array_equal(a.avg_relative_losses(), b.avg_relative_losses())
    assert np.array_equal(a.weights, b.weights)


@settings(max_examples=50, deadline=None)
@given(st.lists(losses5, min_size=1, max_size=5))
def test_heaviest_task_gets_largest_weight(stream):
    s = state()
    for ls in stream:
        step(s, ls)
    avg = s.avg_relative_losses()
    assert s.weights[np.argmax(avg)] == s.weights.max()


def test_constant_streams_have_zero_variance():
    stream = StreamSpec(epochs=6, batches_per_epoch=4, lr=0.0, noise=(0,) * 5, init_spread=0.0)
    rep = simulate_scheduler(stream, range(3))
    # identical runs; only the rounding of the cross-seed mean remains
    assert rep.fixed_var.max() < 1e-20 and rep.adaptive_var.max() < 1e-20
    # after the first batch the adaptive weights are constant: a fixed rescaling of each task
    ratio = rep.adaptive_trace[1:] / rep.fixed_trace[1:]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)


def test_benchmark_shape_contract():
    rep = simulate_scheduler(StreamSpec(epochs=7, batches_per_epoch=3), range(5))
    for series in (rep.fixed_trace, rep.adaptive_trace, rep.fixed_var, rep.adaptive_var):
        assert series.shape == (7,)
    assert rep.min_adaptive_weight >= 0.1
    with pytest.raises(ValueError):
        simulate_scheduler(StreamSpec(), [])


def test_config_validation():
    for bad in ({"mode": "greedy"}, {"alpha": 0}, {"window": 0}, {"base_weights": (1, 1)}):
        with pytest.raises(ValueError):
            SchedulerConfig(**bad)
