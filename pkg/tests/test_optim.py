import numpy as np
import pytest

from lpt.autodiff import ParamVector
from lpt.errors import NonFiniteLoss
from lpt.optim import SGD, Adam, OptimizerSettings, cosine_lr


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
    assert cosine_lr(0.1, 10, 10, min_lr=0.01) == pytest.approx(0.01)
    assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)


def test_sgd_momentum_and_decay_match_hand_rollout():
    opt = SGD(lr=0.1, momentum=0.9, weight_decay=0.01)
    w = ParamVector([1.0])
    w1 = opt.step(w, ParamVector([0.5]))
    d1 = 0.5 + 0.01 * 1.0
    assert w1.values[0] == pytest.approx(1.0 - 0.1 * d1)
    w2 = opt.step(w1, ParamVector([0.5]))
    d2 = 0.5 + 0.01 * w1.values[0]
    assert w2.values[0] == pytest.approx(w1.values[0] - 0.1 * (0.9 * d1 + d2))


def test_adam_first_step_moves_by_lr():
    opt = Adam(lr=0.01)
    w = opt.step(ParamVector([1.0, -1.0]), ParamVector([3.0, -0.2]))
    assert np.allclose(w.values, [0.99, -0.99], atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_update_fails_fast():
    big = ParamVector([1e308])
    with pytest.raises(NonFiniteLoss):
        SGD(lr=1.0, momentum=0.0, weight_decay=10.0).step(big, big)


def test_settings_build():
    assert isinstance(OptimizerSettings("adam").build(), Adam)
    assert OptimizerSettings("sgd", lr=0.2, cosine=False).lr_at(3, 10) == 0.2
    with pytest.raises(ValueError):
        OptimizerSettings("rmsprop").build()
