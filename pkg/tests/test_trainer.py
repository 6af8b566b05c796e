import math

import numpy as np
import pytest

from mtscene.config import Config
from mtscene.data import DataConfig, generate_scene
from mtscene.trainer import (LOG_COLUMNS, CheckpointMismatch, TrainingError, batch_schedule, evaluate, format_log,
                             params_from_arrays, params_to_arrays, train)
from mtscene.model import init_model

CFG = Config().replace(**{"train.batch_size": 4, "train.iterations": 3})
SAMPLES = [generate_scene(s, CFG.data()) for s in range(8)]


def test_batch_schedule_covers_each_epoch():
    sched = batch_schedule(8, 3, 6, seed=0, shuffle=True)
    assert [len(b) for b in sched] == [3, 3, 2, 3, 3, 2]
    assert sorted(np.concatenate(sched[:3]).tolist()) == list(range(8))
    assert all(np.array_equal(a, b) for a, b in zip(sched, batch_schedule(8, 3, 6, seed=0, shuffle=True)))
    assert [b.tolist() for b in batch_schedule(4, 2, 2, 0, shuffle=False)] == [[0, 1], [2, 3]]


def test_one_epoch_logs_one_row_per_batch():
    res = train(CFG.replace(**{"train.epochs": 1}), SAMPLES)
    assert [r[0] for r in res.log] == [1, 2]
    text = res.log_text().splitlines()
    assert text[0].split("\t") == list(LOG_COLUMNS) and len(text) == 3
    assert all(math.isfinite(v) for r in res.log for v in r[1:])


def test_fixed_mode_keeps_base_weights():
    base = (1.0, 0.5, 2.0, 0.3, 1.2)
    res = train(CFG.replace(**{"scheduler.mode": "fixed", "scheduler.base_weights": base}), SAMPLES)
    for row in res.log:
        assert row[6:11] == base


def test_adaptive_weights_respect_the_floor():
    res = train(CFG.replace(**{"scheduler.base_weights": (0.05,) * 5}), SAMPLES)
    assert all(w >= 0.1 for row in res.log for w in row[6:11])
    assert res.log[0][6:11] == (0.1,) * 5


def test_total_is_the_weighted_sum_of_logged_losses():
    for row in train(CFG, SAMPLES).log:
        assert row[11] == pytest.approx(sum(l * w for l, w in zip(row[1:6], row[6:11])), rel=1e-5)


def test_training_is_deterministic():
    a, b = train(CFG, SAMPLES), train(CFG, SAMPLES)
    assert format_log(a.log) == format_log(b.log)
    pa, pb = params_to_arrays(a.params), params_to_arrays(b.params)
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)


def test_divergence_aborts_with_the_batch():
    with pytest.raises(TrainingError, match=r"batch \d+"):
        train(CFG.replace(**{"train.lr": 1e8, "train.iterations": 20}), SAMPLES)


def test_untrained_evaluation_is_finite_and_deterministic():
    params = init_model(CFG.model(), 0)
    a = evaluate(CFG, params, SAMPLES[:4])
    assert a == evaluate(CFG, params, SAMPLES[:4])
    assert 0 <= a.semantic_miou <= 1 and 0 <= a.pq <= 1 and 0 <= a.scene_bacc <= 1


def test_checkpoint_arrays_round_trip_and_mismatch():
    params = init_model(CFG.model(), 3)
    arrays = params_to_arrays(params)
    back = params_to_arrays(params_from_arrays(CFG, arrays))
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)
    with pytest.raises(CheckpointMismatch):
        params_from_arrays(CFG.replace(**{"instance.blocks_per_layer": 2}), arrays)
    arrays[next(iter(arrays))] = np.zeros((1, 1), np.float32)
    with pytest.raises(CheckpointMismatch, match="shape"):
        params_from_arrays(CFG, arrays)


def test_mismatched_samples_rejected():
    wider = generate_scene(0, DataConfig(num_stuff=3))
    wider.semantic[0, 0] = 6
    with pytest.raises(ValueError, match="semantic id"):
        train(CFG, [wider])


def test_non_finite_loss_names_the_batch_and_loss():
    broken = [generate_scene(s, CFG.data()) for s in range(8)]
    first = next(iter(broken[5].orientations))
    broken[5].orientations[first] = float("nan")
    # sample 5 lands in the second batch of the unshuffled schedule
    with pytest.raises(TrainingError, match=r"batch 2: loss L_or is not finite"):
        train(CFG.replace(**{"train.shuffle": False}), broken)
