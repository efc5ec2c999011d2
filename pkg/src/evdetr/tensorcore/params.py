""" Named parameters and the store that owns them.

    A model is a ParamStore plus plain functions that read parameters by
    dotted name. The name of a parameter is its checkpoint identity.
"""

import contextlib

import numpy as np

from .tensor import Tensor, DimensionError
from .ops import linear

import selftest
test = selftest.get_tester(__name__)


class Parameter(Tensor):

    def __init__(self, name, values):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"<Parameter {self.name} shape={self.shape}>"


class ParamStore:
    """ Ordered mapping from unique dotted names to Parameters. """

    def __init__(self):
        self._params = {}
        self._touched = None

    def add(self, name, values):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = self._params[name] = Parameter(name, values)
        return p

    def __getitem__(self, name):
        if self._touched is not None:
            self._touched.add(name)
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def with_prefix(self, prefix):
        return [p for p in self if p.name.startswith(prefix)]

    def zero_grad(self):
        for p in self:
            p.zero_grad()

    def size(self):
        return sum(p.values.size for p in self)

    @contextlib.contextmanager
    def tracking(self):
        """ Collects the names read within the block. """
        touched = self._touched = set()
        try:
            yield touched
        finally:
            self._touched = None

    def values(self):
        return {p.name: p.values.copy() for p in self}

    def load_values(self, arrays):
        for name, values in arrays.items():
            p = self._params[name]
            if p.shape != values.shape:
                raise DimensionError(f"{name}: stored shape {values.shape} differs from {p.shape}")
            p.values[...] = values


def init_linear(store, name, d_in, d_out, rng, bias=True):
    bound = 1.0 / np.sqrt(d_in)
    store.add(f"{name}.weight", rng.uniform(-bound, bound, (d_in, d_out)))
    if bias:
        store.add(f"{name}.bias", rng.uniform(-bound, bound, d_out))


def init_layer_norm(store, name, d):
    store.add(f"{name}.gamma", np.ones(d))
    store.add(f"{name}.beta", np.zeros(d))


def dense(store, name, x):
    bias = f"{name}.bias"
    return linear(x, store[f"{name}.weight"], store[bias] if bias in store else None)


def perturb(store, rng, scale=0.5, prefix=""):
    """ Normal draws for every parameter under prefix. """
    for p in store.with_prefix(prefix):
        p.values[...] = rng.normal(p.shape, scale=scale)


@test
def parameters_are_named_and_unique():
    s = ParamStore()
    p = s.add('a.weight', np.zeros((2, 3)))
    test.eq('a.weight', p.name)
    test.truth(p.requires_grad)
    test.eq((2, 3), p.grad.shape)
    with test.raises(ValueError, "duplicate parameter name: a.weight"):
        s.add('a.weight', np.zeros(1))


@test
def init_linear_uniform_bound():
    from .rng import RngStream
    s = ParamStore()
    init_linear(s, 'proj', 16, 4, RngStream(3))
    test.eq(['proj.weight', 'proj.bias'], s.names())
    test.le(np.abs(s['proj.weight'].values).max(), 0.25)
    test.eq(68, s.size())
    y = dense(s, 'proj', Tensor(np.zeros(16)))
    test.eq(list(s['proj.bias'].values), list(y.values))


@test
def tracking_collects_reads():
    s = ParamStore()
    s.add('x', [1.0])
    s.add('y', [2.0])
    with s.tracking() as touched:
        s['y']
    test.eq({'y'}, touched)
    s['x']
    test.eq({'y'}, touched)


@test
def load_values_checks_shape():
    s = ParamStore()
    s.add('w', np.zeros(3))
    s.load_values({'w': np.arange(3.0)})
    test.eq([0.0, 1.0, 2.0], list(s['w'].values))
    with test.raises(DimensionError, "w: stored shape (2,) differs from (3,)"):
        s.load_values({'w': np.zeros(2)})
