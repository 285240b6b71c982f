import numpy as np
import pytest

from hrnet_engine.training import (SGD, Adam, DivergenceError, SyntheticKeypoints, evaluate_oks, toy_config,
                                   train_toy)
from hrnet_engine.tensor import Tensor

SMALL = dict(n_train=4, steps=6)


def test_zero_learning_rate_gives_constant_trace():
    r = train_toy(lr=0.0, **SMALL)
    assert len(r.losses) == 7
    assert len(set(r.losses)) == 1


def test_same_seed_is_bit_identical():
    a, b = train_toy(seed=3, **SMALL), train_toy(seed=3, **SMALL)
    assert a.losses == b.losses
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert train_toy(seed=4, **SMALL).losses != a.losses


def test_zero_steps_returns_initial_loss_only():
    r = train_toy(n_train=4, steps=0)
    assert len(r.losses) == 1 and r.reduction == 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    with pytest.raises(DivergenceError) as info:
        train_toy(n_train=4, steps=30, lr=1e300, optimizer="sgd")
    assert info.value.step > 0


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        train_toy(n_train=2, steps=1, optimizer="rmsprop")


def test_schedule_changes_learning_rate():
    r = train_toy(schedule={2: 0.0}, **SMALL)
    assert len(set(r.losses[2:])) == 1 and r.losses[1] != r.losses[0]


def test_short_run_reduces_loss():
    r = train_toy(n_train=8, steps=25, seed=0)
    assert r.losses[-1] < 0.5 * r.losses[0]


def test_trace_format(tmp_path):
    r = train_toy(n_train=2, steps=2)
    path = tmp_path / "trace.txt"
    r.write_trace(path)
    rows = [line.split(",") for line in path.read_text().splitlines()]
    assert [int(s) for s, _ in rows] == [0, 1, 2]
    assert [float(v) for _, v in rows] == r.losses


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    Adam(p, lr=0.1).step({"w": np.array([5.0, -0.01])})
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-6)


def test_sgd_momentum():
    p = {"w": Tensor(np.array([0.0]))}
    opt = SGD(p, lr=1.0, momentum=0.5)
    opt.step({"w": np.array([1.0])})
    opt.step({"w": np.array([1.0])})
    assert p["w"].data[0] == -1.0 - 1.5


def test_synthetic_samples_in_bounds_and_seeded():
    d = SyntheticKeypoints()
    a, ka = d.sample(8, np.random.default_rng(0))
    b, kb = d.sample(8, np.random.default_rng(0))
    assert np.array_equal(a, b) and a.shape == (8, 3, 32, 32)
    for k in ka:
        k.check_bounds(32, 32)
        assert d.margin <= k.points.min() and k.points.max() <= 31 - d.margin


def test_evaluate_oks_in_unit_interval():
    r = train_toy(n_train=2, steps=1)
    assert 0.0 <= evaluate_oks(r, n=4) <= 1.0


def test_toy_config_shape():
    cfg = toy_config()
    assert cfg.width_c == 4 and cfg.stage_blocks == (1, 1, 1, 1) and cfg.num_outputs == 1
