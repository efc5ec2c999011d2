""" Adam with decoupled weight decay and the step learning rate schedule. """

import dataclasses
import logging

import numpy as np

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


class MissingGradError(LookupError):
    pass


@dataclasses.dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)


def scheduled_lr(base_lr, step, steps_per_epoch, decay_epoch=20, factor=0.1):
    """ base_lr until decay_epoch epochs have completed, then base_lr * factor """
    epoch = step // max(1, steps_per_epoch)
    return base_lr * factor if epoch >= decay_epoch else base_lr


def adam_step(params, state, lr=None):
    """ One Adam update of every parameter in params; zeroes the grads afterwards. """
    lr = state.lr if lr is None else lr
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in params:
        g = p.grad
        m = state.m.setdefault(p.name, np.zeros_like(p.values))
        v = state.v.setdefault(p.name, np.zeros_like(p.values))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        if state.weight_decay:
            p.values -= lr * state.weight_decay * p.values
        p.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.zero_grad()
    logger.debug("adam step %d lr %g over %d parameters", t, lr, len(params))


@test
def zero_grad_without_decay_leaves_parameter():
    from .params import ParamStore
    s = ParamStore()
    w = s.add('w', [1.5, -2.0])
    adam_step(s, AdamState(weight_decay=0.0))
    test.eq([1.5, -2.0], list(w.values))


@test
def first_step_moves_by_lr():
    from .params import ParamStore
    s = ParamStore()
    w = s.add('w', [0.0])
    w.grad[...] = 1.0
    state = AdamState(lr=0.1, weight_decay=0.0)
    adam_step(s, state)
    test.lt(abs(w.values[0] - (-0.1 / (1 + 1e-8))), 1e-15)
    test.eq([0.0], list(w.grad))
    test.eq(1, state.step)
    test.eq((1,), state.m['w'].shape)


@test
def weight_decay_is_decoupled():
    from .params import ParamStore
    s = ParamStore()
    w = s.add('w', [2.0])
    adam_step(s, AdamState(lr=0.5, weight_decay=0.1))
    test.eq([1.9], list(w.values))


@test
def missing_grad_names_parameter():
    from .tensor import Tensor
    t = Tensor([1.0])
    t.name = 'frozen.bias'
    with test.raises(MissingGradError, "parameter frozen.bias has no gradient"):
        adam_step([t], AdamState())


@test
def lr_decays_after_epoch_twenty():
    test.eq(2e-4, scheduled_lr(2e-4, 20 * 100 - 1, 100))
    test.lt(abs(scheduled_lr(2e-4, 20 * 100, 100) - 2e-5), 1e-20)
    test.eq(2e-4, scheduled_lr(2e-4, 0, 100))
