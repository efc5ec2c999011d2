""" Dense float64 tensors with a recording tape for reverse differentiation.

    Every operation is a Function with a hand-written backward. Applying a
    Function to tensors of which at least one requires a gradient records the
    Function on the result; Tensor.backward() walks the recorded graph in
    reverse topological order.
"""

import contextlib

import numpy as np

import selftest
test = selftest.get_tester(__name__)


class DimensionError(ValueError):
    pass


_recording = [True]


@contextlib.contextmanager
def no_grad():
    """ Evaluate without recording; results never require gradients. """
    previous = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = previous


def is_recording():
    return _recording[0]


class Tensor:

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.node = None

    def __repr__(self):
        return f"<Tensor shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __len__(self):
        return len(self.values)

    def item(self):
        return float(self.values)

    def numpy(self):
        return self.values

    def detach(self):
        return Tensor(self.values)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __add__(self, other):       return Add.apply(self, other)
    def __radd__(self, other):      return Add.apply(other, self)
    def __sub__(self, other):       return Sub.apply(self, other)
    def __rsub__(self, other):      return Sub.apply(other, self)
    def __mul__(self, other):       return Mul.apply(self, other)
    def __rmul__(self, other):      return Mul.apply(other, self)
    def __truediv__(self, other):   return Div.apply(self, other)
    def __rtruediv__(self, other):  return Div.apply(other, self)
    def __neg__(self):              return Neg.apply(self)
    def __pow__(self, exponent):    return Pow.apply(self, exponent=exponent)
    def __matmul__(self, other):    return MatMul.apply(self, other)
    def __getitem__(self, index):   return GetItem.apply(self, index=index)

    def exp(self):                  return Exp.apply(self)
    def log(self):                  return Log.apply(self)
    def abs(self):                  return Abs.apply(self)
    def sigmoid(self):              return Sigmoid.apply(self)
    def tanh(self):                 return Tanh.apply(self)
    def gelu(self):                 return Gelu.apply(self)
    def softplus(self):             return Softplus.apply(self)
    def sqrt(self):                 return Pow.apply(self, exponent=0.5)
    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims=False):
        n = self.values.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)
    def reshape(self, *shape):
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        return Reshape.apply(self, shape=tuple(shape))
    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        return Transpose.apply(self, axes=tuple(axes) if axes else None)
    @property
    def T(self):
        return self.transpose()

    def backward(self, seed=None):
        """ Accumulates d(self)/d(leaf) into the grad of every leaf that requires it. """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.values.size != 1:
                raise DimensionError(f"backward() without seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.values)
        order = _topological(self)
        for t in order:
            if t.node is not None:
                t.grad[...] = 0.0
        self.grad += seed
        for t in reversed(order):
            node = t.node
            if node is None:
                continue
            for parent, g in zip(node.parents, node.backward(t.grad)):
                if g is not None and parent.requires_grad:
                    parent.grad += g


def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            stack.extend((p, False) for p in t.node.parents if p.requires_grad and id(p) not in seen)
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(grad, shape):
    """ Sum grad down to shape, undoing numpy broadcasting. """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """ One recorded operation. Subclasses implement forward() on arrays and
        backward() returning one gradient (or None) per tensor input. """

    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **attributes):
        tensors = [as_tensor(x) for x in inputs]
        fn = cls(*tensors)
        values = fn.forward(*(t.values for t in tensors), **attributes)
        needs_grad = is_recording() and any(t.requires_grad for t in tensors)
        result = Tensor(values, requires_grad=needs_grad)
        if needs_grad:
            result.node = fn
        return result

    def forward(self, *values, **attributes):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b
    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b
    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b
    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b
    def backward(self, g):
        return (unbroadcast(g / self.b, self.a.shape),
                unbroadcast(-g * self.a / (self.b * self.b), self.b.shape))


class Neg(Function):
    def forward(self, a):
        return -a
    def backward(self, g):
        return -g,


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent
    def backward(self, g):
        return g * self.exponent * self.a ** (self.exponent - 1),


class Exp(Function):
    def forward(self, a):
        self.y = np.exp(a)
        return self.y
    def backward(self, g):
        return g * self.y,


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)
    def backward(self, g):
        return g / self.a,


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)
    def backward(self, g):
        return g * self.sign,


class Maximum(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        self.left = a >= b
        return np.maximum(a, b)
    def backward(self, g):
        return (unbroadcast(np.where(self.left, g, 0.0), self.shapes[0]),
                unbroadcast(np.where(self.left, 0.0, g), self.shapes[1]))


class Minimum(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        self.left = a <= b
        return np.minimum(a, b)
    def backward(self, g):
        return (unbroadcast(np.where(self.left, g, 0.0), self.shapes[0]),
                unbroadcast(np.where(self.left, 0.0, g), self.shapes[1]))


def logistic(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class Sigmoid(Function):
    def forward(self, a):
        self.y = logistic(a)
        return self.y
    def backward(self, g):
        return g * self.y * (1.0 - self.y),


class Tanh(Function):
    def forward(self, a):
        self.y = np.tanh(a)
        return self.y
    def backward(self, g):
        return g * (1.0 - self.y * self.y),


class Softplus(Function):
    """ log(1 + exp(a)), stable for large |a| """
    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)
    def backward(self, g):
        return g * logistic(self.a),


GELU_C = np.sqrt(2.0 / np.pi)


class Gelu(Function):
    """ tanh approximation """
    def forward(self, a):
        self.a = a
        self.t = np.tanh(GELU_C * (a + 0.044715 * a ** 3))
        return 0.5 * a * (1.0 + self.t)
    def backward(self, g):
        a, t = self.a, self.t
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return g * (0.5 * (1.0 + t) + 0.5 * a * dt),


class MatMul(Function):
    """ Batched matrix product of operands with at least two dimensions. """
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)
    def backward(self, g):
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), g)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)
    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return np.broadcast_to(g, self.shape).copy(),


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)
    def backward(self, g):
        return g.reshape(self.shape),


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)
    def backward(self, g):
        return np.transpose(g, np.argsort(self.axes)),


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return a[index]
    def backward(self, g):
        out = np.zeros(self.shape)
        np.add.at(out, self.index, g)
        return out,


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)
    def backward(self, g):
        return tuple(np.take(g, np.arange(lo, hi), axis=self.axis)
                     for lo, hi in zip(self.bounds[:-1], self.bounds[1:]))


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def stack(tensors, axis=0):
    expanded = [as_tensor(t) for t in tensors]
    shape = expanded[0].shape
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    newshape = shape[:axis] + (1,) + shape[axis:]
    return concat([t.reshape(newshape) for t in expanded], axis=axis)


def maximum(a, b):
    return Maximum.apply(a, b)


def minimum(a, b):
    return Minimum.apply(a, b)


@test
def arithmetic_records_and_backpropagates():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([2.0, 4.0], requires_grad=True)
    y = ((a * b) + a / b - b ** 2).sum()
    y.backward()
    test.eq([2.5, 4.25], list(a.grad))
    test.eq([-3.25, -6.125], list(b.grad))


@test
def broadcasting_gradients_sum_back():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor([1.0, 2.0], requires_grad=True)
    (x * b).sum().backward()
    test.eq([3.0, 3.0], list(b.grad))
    test.eq([[1.0, 2.0]] * 3, x.grad.tolist())


@test
def shared_subexpression_accumulates():
    x = Tensor(3.0, requires_grad=True)
    y = x * x
    z = y + y
    z.backward()
    test.eq(12.0, float(x.grad))


@test
def second_backward_does_not_double_intermediates():
    x = Tensor(2.0, requires_grad=True)
    y = (x * x) * 3.0
    y.backward()
    y.backward()
    test.eq(24.0, float(x.grad))


@test
def no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    test.eq(False, y.requires_grad)
    test.eq(None, y.node)
    test.eq(None, y.grad)


@test
def grad_present_iff_requires_grad():
    test.eq(None, Tensor([1.0]).grad)
    test.eq((2, 2), Tensor(np.ones((2, 2)), requires_grad=True).grad.shape)


@test
def matmul_shapes_checked():
    with test.raises(DimensionError, "cannot multiply shapes (2, 3) and (2, 3)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@test
def getitem_scatters_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 3])].sum().backward()
    test.eq([2.0, 0.0, 0.0, 1.0], list(x.grad))


@test
def concat_and_stack_split_gradients():
    a = Tensor(np.ones((2, 1)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    (concat([a, b], axis=1) * Tensor([[1.0, 2.0, 3.0]])).sum().backward()
    test.eq([[1.0], [1.0]], a.grad.tolist())
    test.eq([[2.0, 3.0], [2.0, 3.0]], b.grad.tolist())
    s = stack([Tensor([1.0, 2.0]), Tensor([3.0, 4.0])], axis=-1)
    test.eq([[1.0, 3.0], [2.0, 4.0]], s.values.tolist())


@test
def maximum_routes_gradient_to_winner():
    a = Tensor([1.0, 5.0], requires_grad=True)
    b = Tensor([2.0, 3.0], requires_grad=True)
    maximum(a, b).sum().backward()
    test.eq([0.0, 1.0], list(a.grad))
    test.eq([1.0, 0.0], list(b.grad))


@test
def backward_needs_scalar_or_seed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with test.raises(DimensionError, "backward() without seed needs a scalar, got shape (2,)"):
        (x * 2.0).backward()
