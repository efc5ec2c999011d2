""" Composite and fused operations on Tensors: the learnable building blocks. """

import numpy as np

from .tensor import Tensor, Function, DimensionError, as_tensor, no_grad

import selftest
test = selftest.get_tester(__name__)


class ParameterError(ValueError):
    pass


def linear(x, weight, bias=None):
    """ y = x @ weight + bias over the trailing dimension of x """
    x = as_tensor(x)
    d_in = weight.shape[0]
    if x.shape[-1:] != (d_in,):
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {weight.shape}")
    if x.ndim == 1:
        y = (x.reshape(1, d_in) @ weight).reshape(weight.shape[1])
    elif x.ndim == 2:
        y = x @ weight
    else:
        lead = x.shape[:-1]
        y = (x.reshape(-1, d_in) @ weight).reshape(*lead, weight.shape[1])
    return y if bias is None else y + bias


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y
    def backward(self, g):
        y = self.y
        return y * (g - (g * y).sum(axis=self.axis, keepdims=True)),


def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta
    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        gx_hat = g * self.gamma
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


def layer_norm(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise ParameterError(f"layer_norm: eps must be positive, got {eps}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def dropout(x, p, rng, training):
    """ Zeroes elements with probability p and rescales survivors by 1/(1-p) when training. """
    if not 0 <= p < 1:
        raise ParameterError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    return x * Tensor(keep / (1.0 - p))


class GridSample(Function):
    """ Bilinear sampling of G feature maps [G, C, H, W] at G point sets [G, N, 2].

        Points are (u, v) in [0, 1]^2 and map to pixel coordinates
        (u * (W - 1), v * (H - 1)). Cells outside the map read as zero.
        Output is [G, N, C].
    """

    def forward(self, maps, points):
        G, C, H, W = maps.shape
        self.mapsT = np.ascontiguousarray(maps.transpose(0, 2, 3, 1))   # G, H, W, C
        self.size = H, W
        x = points[..., 0] * (W - 1)
        y = points[..., 1] * (H - 1)
        x0, y0 = np.floor(x), np.floor(y)
        self.fx, self.fy = (x - x0)[..., None], (y - y0)[..., None]
        x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
        self.g = np.broadcast_to(np.arange(G)[:, None], x0.shape)
        self.corners = []
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi = x0 + dx, y0 + dy
                valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
                xi, yi = np.clip(xi, 0, W - 1), np.clip(yi, 0, H - 1)
                value = self.mapsT[self.g, yi, xi] * valid[..., None]
                self.corners.append((yi, xi, valid, value))
        (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = self.corners
        fx, fy = self.fx, self.fy
        return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
              + v10 * (1 - fx) * fy + v11 * fx * fy)

    def backward(self, grad):
        H, W = self.size
        fx, fy = self.fx, self.fy
        weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
        gmapsT = np.zeros_like(self.mapsT)
        for (yi, xi, valid, _), w in zip(self.corners, weights):
            np.add.at(gmapsT, (self.g, yi, xi), grad * w * valid[..., None])
        (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = self.corners
        dx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * grad
        dy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * grad
        gpoints = np.stack([dx.sum(-1) * (W - 1), dy.sum(-1) * (H - 1)], axis=-1)
        return gmapsT.transpose(0, 3, 1, 2), gpoints


def grid_sample(maps, points):
    maps, points = as_tensor(maps), as_tensor(points)
    if maps.ndim != 4 or points.ndim != 3 or points.shape[0] != maps.shape[0] or points.shape[2] != 2:
        raise DimensionError(f"grid_sample: maps {maps.shape} and points {points.shape} do not pair up")
    return GridSample.apply(maps, points)


def bilinear_sample(fmap, point):
    """ Samples a [d, H, W] map at normalized point(s) [..., 2] giving [..., d]. """
    fmap, point = as_tensor(fmap), as_tensor(point)
    if fmap.ndim != 3 or fmap.values.size == 0:
        raise DimensionError(f"bilinear_sample: map must be a non-empty [d, H, W], got {fmap.shape}")
    lead = point.shape[:-1]
    points = point.reshape(1, -1, 2)
    out = grid_sample(fmap.reshape(1, *fmap.shape), points)
    return out.reshape(*lead, fmap.shape[0])


class Conv2d(Function):
    """ Single-image 2D convolution: x [C_in, H, W], weight [C_out, C_in, k, k] """

    def forward(self, x, weight, bias, stride=1, padding=0):
        k = weight.shape[-1]
        self.xshape, self.stride, self.padding, self.weight = x.shape, stride, padding, weight
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        self.windows = windows[:, ::stride, ::stride]
        self.padded_shape = xp.shape
        return np.einsum('chwij,ocij->ohw', self.windows, weight, optimize=True) + bias[:, None, None]

    def backward(self, g):
        s, p = self.stride, self.padding
        k = self.weight.shape[-1]
        gw = np.einsum('ohw,chwij->ocij', g, self.windows, optimize=True)
        gb = g.sum(axis=(1, 2))
        gwin = np.einsum('ohw,ocij->chwij', g, self.weight, optimize=True)
        Ho, Wo = g.shape[1:]
        gxp = np.zeros(self.padded_shape)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += gwin[:, :, :, i, j]
        H, W = self.xshape[1:]
        return gxp[:, p:p + H, p:p + W], gw, gb


def conv2d(x, weight, bias, stride=1, padding=0):
    x = as_tensor(x)
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def finite_difference(f, x, h=1e-5):
    """ Central differences of scalar f at array x, for tests in this package. """
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        orig = x[index]
        x[index] = orig + h
        fp = f(x)
        x[index] = orig - h
        fm = f(x)
        x[index] = orig
        grad[index] = (fp - fm) / (2 * h)
    return grad


def assert_gradient(test, build, *arrays, tol=1e-6):
    """ Compares backward() of build(*tensors) with central differences on every input. """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    for t in tensors:
        def f(values, t=t):
            with no_grad():
                saved = t.values
                t.values = values
                try:
                    return build(*tensors).item()
                finally:
                    t.values = saved
        numeric = finite_difference(f, t.values.copy())
        err = np.abs(t.grad - numeric) / np.maximum(1.0, np.abs(numeric))
        test.lt(err.max(), tol)


@test
def linear_identity_and_zero_weight():
    test.eq([1.0, 2.0], list(linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0])).values))
    test.eq([3.0, 4.0], list(linear(Tensor([1.0, 2.0]), Tensor(np.zeros((2, 2))), Tensor([3.0, 4.0])).values))


@test
def linear_shape_mismatch_names_both():
    with test.raises(DimensionError, "linear: input shape (3,) does not match weight shape (2, 2)"):
        linear(Tensor([1.0, 2.0, 3.0]), Tensor(np.eye(2)))


@test
def linear_gradients_match_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d_in, d_out = rng.integers(1, 5, 2)
        assert_gradient(test, lambda x, w, b: (linear(x, w, b) ** 2).sum(),
                        rng.normal(size=(4, d_in)), rng.normal(size=(d_in, d_out)), rng.normal(size=d_out))
        assert_gradient(test, lambda x, w, b: (linear(x, w, b) ** 2).sum(),
                        rng.normal(size=(2, 2, d_in)), rng.normal(size=(d_in, d_out)), rng.normal(size=d_out))


@test
def softmax_closed_forms():
    test.eq([1/3, 1/3, 1/3], list(softmax(Tensor([0.0, 0.0, 0.0])).values))
    y = softmax(Tensor([5.0, 5.0 + np.log(2.0)])).values
    test.lt(abs(y[0] - 1/3), 1e-15)
    test.lt(abs(y[1] - 2/3), 1e-15)


@test
def softmax_shift_invariant_and_normalized():
    x = np.random.default_rng(2).normal(size=(5, 7)) * 30
    a = softmax(Tensor(x), axis=1).values
    b = softmax(Tensor(x + 123.0), axis=1).values
    test.lt(np.abs(a - b).max(), 1e-12)
    test.lt(np.abs(a.sum(axis=1) - 1).max(), 1e-12)
    test.truth((a > 0).all())


@test
def softmax_gradients_match_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        weights = Tensor(rng.normal(size=(5, 7)))
        for axis in (0, 1):
            assert_gradient(test, lambda t: (softmax(t, axis=axis) * weights).sum(), rng.normal(size=(5, 7)))


@test
def softmax_axis_checked():
    with test.raises(DimensionError, "softmax: axis 2 invalid for shape (3,)"):
        softmax(Tensor([1.0, 2.0, 3.0]), axis=2)


@test
def layer_norm_standardizes():
    x = np.array([-1.0, 1.0])
    y = layer_norm(Tensor(x), Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).values
    test.lt(np.abs(y - x).max(), 1e-5)
    y = layer_norm(Tensor([3.0, 3.0, 3.0]), Tensor(np.ones(3)), Tensor([5.0, 5.0, 5.0])).values
    test.eq([5.0, 5.0, 5.0], list(y))


@test
def layer_norm_gradients_match_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        weights = Tensor(rng.normal(size=(3, 4)))
        assert_gradient(test, lambda x, g, b: (layer_norm(x, g, b) * weights).sum(),
                        rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4), tol=1e-5)


@test
def dropout_contract():
    from .rng import RngStream
    x = Tensor(np.ones(100_000))
    test.truth(dropout(x, 0.0, RngStream(1), training=True) is x)
    test.truth(dropout(x, 0.7, RngStream(1), training=False) is x)
    mean = dropout(x, 0.5, RngStream(1), training=True).values.mean()
    test.truth(0.98 <= mean <= 1.02)
    with test.raises(ParameterError, "dropout: p must be in [0, 1), got 1.0"):
        dropout(x, 1.0, RngStream(1), training=True)


@test
def bilinear_sample_hand_values():
    m = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    test.eq([1.5], list(bilinear_sample(m, Tensor([0.5, 0.5])).values))
    test.eq([2.0], list(bilinear_sample(m, Tensor([0.0, 1.0])).values))
    test.eq([3.0], list(bilinear_sample(m, Tensor([1.0, 1.0])).values))
    equal = Tensor(np.full((2, 3, 3), 7.0))
    test.eq([7.0, 7.0], list(bilinear_sample(equal, Tensor([0.25, 0.75])).values))


@test
def bilinear_sample_exact_on_grid_and_linear_between():
    m = np.random.default_rng(4).normal(size=(3, 4, 5))
    for r in range(4):
        for c in range(5):
            v = bilinear_sample(Tensor(m), Tensor([c / 4, r / 3])).values
            test.lt(np.abs(m[:, r, c] - v).max(), 1e-12)
    a = bilinear_sample(Tensor(m), Tensor([0.25, 0.0])).values
    b = bilinear_sample(Tensor(m), Tensor([0.375, 0.0])).values
    test.lt(np.abs(b - (m[:, 0, 1] + m[:, 0, 2]) / 2).max(), 1e-12)
    test.lt(np.abs(a - m[:, 0, 1]).max(), 1e-12)


@test
def bilinear_sample_zero_border():
    m = Tensor(np.ones((1, 2, 2)))
    test.eq([0.0], list(bilinear_sample(m, Tensor([3.0, 0.5])).values))
    test.eq([0.5], list(bilinear_sample(m, Tensor([1.5, 0.0])).values))


@test
def grid_sample_gradients_match_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        maps = rng.normal(size=(2, 3, 4, 5))
        points = rng.uniform(-0.2, 1.2, size=(2, 6, 2))
        weights = Tensor(rng.normal(size=(2, 6, 3)))
        assert_gradient(test, lambda m, p: (grid_sample(m, p) * weights).sum(), maps, points)


@test
def conv2d_matches_direct_sum_and_gradients():
    rng = np.random.default_rng(6)
    x, w, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).values
    test.eq((3, 3, 3), y.shape)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    expect = b[1] + (xp[:, 2:5, 4:7] * w[1]).sum()
    test.lt(abs(y[1, 1, 2] - expect), 1e-12)


@test
def conv2d_gradients_match_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, w, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        weights = Tensor(rng.normal(size=conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).shape))
        assert_gradient(test, lambda x, w, b: (conv2d(x, w, b, stride, padding) * weights).sum(), x, w, b)


@test
def conv2d_channel_mismatch():
    with test.raises(DimensionError, "conv2d: input (1, 4, 4) does not match kernel (2, 3, 3, 3)"):
        conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((2, 3, 3, 3))), Tensor(np.ones(2)))
