"""Feed-forward network with hand-written backpropagation and SGD.

Activations flow as ``(batch, features)`` matrices except between a
Conv2D layer and the Flatten that must follow it, where they are
``(batch, channels, height, width)``.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, StaleCache, TruncatedFile
from .rng import Rng


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    tag = 0
    params = ()

    def output_shape(self, in_shape):
        return in_shape

    def parameters(self):
        return [getattr(self, name) for name in self.params]

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        """Return (grad wrt input, list of grads aligned with `params`)."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Linear(Layer):
    tag = 1
    params = ("weight", "bias")

    def __init__(self, in_dim, out_dim, rng=None):
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        rng = rng if rng is not None else Rng(0)
        self.weight = glorot_uniform(rng, (self.in_dim, self.out_dim), self.in_dim, self.out_dim)
        self.bias = np.zeros(self.out_dim)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"Linear({self.in_dim}, {self.out_dim}) cannot take input of shape {in_shape}")
        return (self.out_dim,)

    def forward(self, x):
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, g):
        x = self._x
        return g @ self.weight.T, [x.T @ g, g.sum(axis=0)]

    def __repr__(self):
        return f"Linear({self.in_dim}, {self.out_dim})"


class Conv2D(Layer):
    """Valid-padding square-kernel convolution over ``in_hw`` sized inputs."""

    tag = 2
    params = ("weight", "bias")

    def __init__(self, in_ch, out_ch, kernel, stride=1, in_hw=(28, 28), rng=None):
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride = int(kernel), int(stride)
        self.in_hw = (int(in_hw[0]), int(in_hw[1]))
        if self.stride < 1 or self.kernel < 1:
            raise ShapeError("kernel and stride must be >= 1")
        h, w = self.in_hw
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"kernel {self.kernel} larger than input {self.in_hw}")
        self.out_hw = ((h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)
        rng = rng if rng is not None else Rng(0)
        k2 = self.kernel * self.kernel
        self.weight = glorot_uniform(rng, (self.out_ch, self.in_ch, self.kernel, self.kernel),
                                     self.in_ch * k2, self.out_ch * k2)
        self.bias = np.zeros(self.out_ch)

    @property
    def in_shape(self):
        return (self.in_ch,) + self.in_hw

    def output_shape(self, in_shape):
        in_shape = tuple(in_shape)
        flat = (self.in_ch * self.in_hw[0] * self.in_hw[1],)
        if in_shape not in (self.in_shape, flat):
            raise ShapeError(f"Conv2D expects input {self.in_shape}, got {in_shape}")
        return (self.out_ch,) + self.out_hw

    def _windows(self, x):
        k, s = self.kernel, self.stride
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        return win[:, :, ::s, ::s]  # (b, c, oh, ow, k, k)

    def forward(self, x):
        x = x.reshape((x.shape[0],) + self.in_shape)
        self._x_shape = x.shape
        win = self._windows(x)
        b = x.shape[0]
        oh, ow = self.out_hw
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, -1)
        self._cols = cols
        out = cols @ self.weight.reshape(self.out_ch, -1).T + self.bias
        return out.reshape(b, oh, ow, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, g):
        b = g.shape[0]
        oh, ow = self.out_hw
        k, s = self.kernel, self.stride
        gm = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, self.out_ch)
        wmat = self.weight.reshape(self.out_ch, -1)
        dw = (gm.T @ self._cols).reshape(self.weight.shape)
        db = gm.sum(axis=0)
        dcols = (gm @ wmat).reshape(b, oh, ow, self.in_ch, k, k)
        dx = np.zeros(self._x_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, [dw, db]

    def __repr__(self):
        return f"Conv2D({self.in_ch}, {self.out_ch}, kernel={self.kernel}, stride={self.stride}, in_hw={self.in_hw})"


class Flatten(Layer):
    tag = 6

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape), []


class ReLU(Layer):
    tag = 3

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return np.where(self._mask, g, 0.0), []


class Tanh(Layer):
    tag = 4

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, g):
        return g * (1.0 - self._y ** 2), []


class L2NormalizeRows(Layer):
    tag = 5

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError("L2NormalizeRows needs flat (batch, features) input")
        return in_shape

    def forward(self, x):
        self._norm = np.linalg.norm(x, axis=1, keepdims=True)
        self._y = x / self._norm
        return self._y

    def backward(self, g):
        y = self._y
        # Jacobian of x/|x| is (I - y y^T)/|x|
        return (g - y * np.sum(y * g, axis=1, keepdims=True)) / self._norm, []


LAYER_TAGS = {cls.tag: cls for cls in (Linear, Conv2D, ReLU, Tanh, L2NormalizeRows, Flatten)}


class Network:
    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        first = self.layers[0]
        if isinstance(first, Linear):
            self.input_shape = (first.in_dim,)
        elif isinstance(first, Conv2D):
            self.input_shape = first.in_shape
        else:
            raise ShapeError("the first layer must be Linear or Conv2D")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ShapeError("the network must end in flat features (add Flatten after Conv2D)")
        self.output_dim = shape[0]
        self._fresh = False

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))

    @property
    def param_count(self):
        return int(sum(p.size for p in self.parameters()))

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, batch):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected (batch, {self.input_dim}) input, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        self._fresh = True
        return x

    __call__ = forward

    def backward(self, grad_out):
        """Backpropagate `grad_out` (d loss / d output); returns parameter grads."""
        if not self._fresh:
            raise StaleCache("backward() needs a forward() since the last parameter update")
        g = np.asarray(grad_out, dtype=np.float64)
        grads = []
        for layer in reversed(self.layers):
            g, layer_grads = layer.backward(g)
            grads.append(layer_grads)
        self.input_grad = g
        return [gp for layer_grads in reversed(grads) for gp in layer_grads]

    def invalidate(self):
        self._fresh = False

    def __repr__(self):
        return "Network([" + ", ".join(map(repr, self.layers)) + "])"


def mlp(widths, activation="relu", normalize=False, rng=None):
    """Linear layers of the given widths with activations between them."""
    rng = rng if rng is not None else Rng(0)
    act = {"relu": ReLU, "tanh": Tanh}[activation]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if k:
            layers.append(act())
        layers.append(Linear(fan_in, fan_out, rng=rng))
    if normalize:
        layers.append(L2NormalizeRows())
    return Network(layers)


@dataclass
class SgdState:
    """SGD with momentum; lr fixed for the first half, then polynomial decay to end_lr."""

    base_lr: float = 0.01
    total_iters: int = 1000
    momentum: float = 0.9
    end_lr: float = 1e-7
    power: float = 1.0
    decay: bool = True
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.decay and not self.base_lr > self.end_lr > 0:
            raise ValueError("need base_lr > end_lr > 0")
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")

    def learning_rate(self, it):
        if not self.decay:
            return self.base_lr
        half = self.total_iters / 2.0
        if it <= half:
            return self.base_lr
        frac = min(1.0, (it - half) / half)
        return self.end_lr + (self.base_lr - self.end_lr) * (1.0 - frac) ** self.power


def sgd_step(state, net, grads, it):
    """Apply one momentum update in place: ``v = mu*v - lr*g; theta += v``."""
    if it >= state.total_iters:
        raise ValueError(f"iteration {it} is past total_iters={state.total_iters}")
    params = net.parameters()
    if len(grads) != len(params):
        raise ShapeError("gradient list does not match the network parameters")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    lr = state.learning_rate(it)
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v -= lr * g
        p += v
    net.invalidate()
    return net


MAGIC = b"SVMX"
VERSION = 1


def save_checkpoint(net, path):
    """Write `net` as little-endian binary: magic, u32 version, u32 layer count, layers."""
    out = [MAGIC, struct.pack("<II", VERSION, len(net.layers))]
    for layer in net.layers:
        out.append(struct.pack("<I", layer.tag))
        if isinstance(layer, Linear):
            out.append(struct.pack("<II", layer.in_dim, layer.out_dim))
        elif isinstance(layer, Conv2D):
            out.append(struct.pack("<6I", layer.in_ch, layer.out_ch, layer.kernel, layer.stride, *layer.in_hw))
        for p in layer.parameters():
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile(f"checkpoint ends at byte {len(buf)}, needed {pos + n}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("not an SVMX checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(count):
        (tag,) = struct.unpack("<I", take(4))
        if tag not in LAYER_TAGS:
            raise FormatError(f"unknown layer tag {tag}")
        cls = LAYER_TAGS[tag]
        if cls is Linear:
            layer = Linear(*struct.unpack("<II", take(8)))
        elif cls is Conv2D:
            in_ch, out_ch, k, s, h, w = struct.unpack("<6I", take(24))
            layer = Conv2D(in_ch, out_ch, k, s, (h, w))
        else:
            layer = cls()
        for name in layer.params:
            p = getattr(layer, name)
            p[...] = np.frombuffer(take(p.size * 8), dtype="<f8").reshape(p.shape)
        layers.append(layer)
    if pos != len(buf):
        raise FormatError("trailing bytes after the last layer")
    return Network(layers)
