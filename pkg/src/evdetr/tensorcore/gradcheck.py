""" Finite-difference audit of analytic gradients. """

import dataclasses
import logging

import numpy as np

from .tensor import no_grad

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


class NonFiniteError(ArithmeticError):
    pass


@dataclasses.dataclass
class GradFailure:
    name: str
    index: tuple
    analytic: float
    numeric: float
    error: float

    def __str__(self):
        return (f"{self.name}{list(self.index)}: analytic {self.analytic:.8g}"
                f" numeric {self.numeric:.8g} error {self.error:.3g}")


@dataclasses.dataclass
class GradReport:
    checked: int = 0
    max_error: float = 0.0
    failures: list = dataclasses.field(default_factory=list)

    @property
    def ok(self):
        return not self.failures

    def __str__(self):
        head = f"{self.checked} elements, max error {self.max_error:.3g}, {len(self.failures)} failures"
        return '\n'.join([head, *map(str, self.failures[:20])])


def _evaluate(f):
    loss = f()
    value = float(loss.values)
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is not finite: {value}")
    return loss, value


def grad_check(f, params, h=1e-5, tol=1e-4):
    """ Compares backward() of the scalar f() with central differences for
        every element of every parameter. f takes no arguments and reads the
        parameters itself; it must be deterministic.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss, _ = _evaluate(f)
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}
    report = GradReport()
    with no_grad():
        for p in params:
            for index in np.ndindex(p.shape):
                orig = p.values[index]
                p.values[index] = orig + h
                _, fp = _evaluate(f)
                p.values[index] = orig - h
                _, fm = _evaluate(f)
                p.values[index] = orig
                numeric = (fp - fm) / (2 * h)
                a = analytic[p.name][index]
                error = abs(a - numeric) / max(1.0, abs(numeric))
                report.checked += 1
                report.max_error = max(report.max_error, error)
                if error > tol:
                    report.failures.append(GradFailure(p.name, index, a, numeric, error))
    for p in params:
        p.zero_grad()
    logger.debug("grad_check: %s", report)
    return report


@test
def sum_of_squares_passes_tight():
    from .params import ParamStore
    s = ParamStore()
    w = s.add('w', [1.0, 2.0])
    report = grad_check(lambda: (w * w).sum(), s, tol=1e-8)
    test.truth(report.ok)
    test.eq(2, report.checked)


@test
def analytic_gradient_visible_before_check():
    from .params import ParamStore
    s = ParamStore()
    w = s.add('w', [1.0, 2.0])
    (w * w).sum().backward()
    test.eq([2.0, 4.0], list(w.grad))


@test
def corrupted_backward_is_reported():
    from unittest import mock
    from .params import ParamStore
    from .tensor import Tanh
    s = ParamStore()
    w = s.add('w', [0.3, -0.7, 1.1])
    original = Tanh.backward
    def corrupted(self, g):
        return tuple(x * 1.01 for x in original(self, g))
    with mock.patch.object(Tanh, 'backward', corrupted):
        report = grad_check(lambda: (w.tanh() * 10).sum(), s)
    test.eq(3, len(report.failures))
    test.eq('w', report.failures[0].name)
    test.startswith(str(report), "3 elements, max error ")


@test
def non_finite_loss_aborts():
    from .params import ParamStore
    s = ParamStore()
    w = s.add('w', [0.0])
    with test.raises(NonFiniteError, "loss is not finite: -inf"):
        grad_check(lambda: w.log().sum(), s)


@test
def composite_ops_pass_on_random_instances():
    from .params import ParamStore
    from .rng import RngStream
    from .ops import linear, softmax, layer_norm
    for seed in range(10):
        rng = RngStream(seed)
        s = ParamStore()
        x = s.add('x', rng.normal((3, 4)))
        w = s.add('w', rng.normal((4, 4)))
        g = s.add('g', rng.normal(4))
        b = s.add('b', rng.normal(4))
        target = rng.normal((3, 4))
        f = lambda: (softmax(layer_norm(linear(x, w), g, b).gelu(), axis=0) * target).sum()
        test.truth(grad_check(f, s).ok)
