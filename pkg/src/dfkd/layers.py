"""Layer kernels for the feed-forward engine.

All arrays are float64. A layer owns parameter and gradient arrays of
identical shapes; ``backward`` accumulates into the gradient slots and the
caller zeroes them (``SgdOptimizer.step`` does). Convolution runs as an
explicit patch gather (im2col) followed by one matrix multiply; the patch
scatter on the way back uses a precomputed index map and ``np.bincount`` so
the accumulation order is fixed and results are run-to-run deterministic.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Input incompatible with a layer's configuration; message names the layer."""


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer: named, with parameter/gradient slots of matching shapes."""

    kind = "base"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def initialize(self, rng: np.random.Generator) -> None:
        """Draw fresh parameters. Layers without parameters ignore the rng."""

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, need_input_grad: bool = True):
        raise NotImplementedError

    def kink_signature(self):
        """Routing state of any non-smooth op from the last forward, else None.

        Used by the gradient checker to detect finite-difference probes that
        step across a kink (a ReLU sign change or a max-pool argmax change).
        """
        return None

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def _fail(self, msg: str):
        raise ShapeError(f"{self.name}: {msg}")


class Conv2d(Layer):
    """2-D convolution (cross-correlation), NCHW, square kernel, zero padding."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, name: str = "conv"):
        super().__init__(name)
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ValueError(f"{name}: bad conv geometry k={kernel_size} s={stride} p={padding}")
        if in_channels < 1 or out_channels < 1:
            raise ValueError(f"{name}: channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        k = kernel_size
        self.params = {
            "w": np.zeros((out_channels, in_channels, k, k)),
            "b": np.zeros(out_channels),
        }
        self.grads = {n: np.zeros_like(p) for n, p in self.params.items()}
        self._cache = None
        self._scatter_idx = None  # (batch, flat index map) for the backward scatter

    def initialize(self, rng):
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        fan_out = self.out_channels * k * k
        self.params["w"][...] = glorot_uniform(rng, self.params["w"].shape, fan_in, fan_out)
        self.params["b"][...] = 0.0

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            self._fail(f"expected {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            self._fail(f"kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        return (self.out_channels, oh, ow)

    def _im2col(self, xp, oh, ow):
        # (B, C, Hp, Wp) -> (B*OH*OW, C*k*k); the copy keeps rows contiguous for the GEMM
        b = xp.shape[0]
        k, s = self.kernel_size, self.stride
        sb, sc, sh, sw = xp.strides
        win = as_strided(xp, (b, xp.shape[1], oh, ow, k, k), (sb, sc, s * sh, s * sw, sh, sw))
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, -1)

    def forward(self, x):
        if x.ndim != 4:
            self._fail(f"expected 4-d input, got shape {x.shape}")
        _, oh, ow = self.out_shape(x.shape[1:])
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = self._im2col(xp, oh, ow)
        b = x.shape[0]
        wmat = self.params["w"].reshape(self.out_channels, -1)
        y = cols @ wmat.T + self.params["b"]
        self._cache = (cols, x.shape, xp.shape, oh, ow)
        return np.ascontiguousarray(y.reshape(b, oh, ow, self.out_channels).transpose(0, 3, 1, 2))

    def _scatter_indices(self, b, xp_shape, oh, ow):
        # flat padded-input index for every im2col column element, batch offsets applied
        cached = self._scatter_idx
        if cached is not None and cached[0] == (b,) + xp_shape:
            return cached[1]
        _, c, hp, wp = xp_shape
        k, s = self.kernel_size, self.stride
        ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
        patch = (ci * hp * wp + ki * wp + kj).reshape(-1)  # (C*k*k,)
        ohh, oww = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        origin = ((ohh * s) * wp + (oww * s)).reshape(-1)  # (OH*OW,)
        per_image = origin[:, None] + patch[None, :]
        idx = (np.arange(b)[:, None, None] * (c * hp * wp) + per_image[None]).reshape(-1)
        self._scatter_idx = ((b,) + xp_shape, idx)
        return idx

    def backward(self, dy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        cols, x_shape, xp_shape, oh, ow = self._cache
        b = x_shape[0]
        if dy.shape != (b, self.out_channels, oh, ow):
            self._fail(f"upstream grad shape {dy.shape}, expected {(b, self.out_channels, oh, ow)}")
        dz = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(b * oh * ow, self.out_channels)
        self.grads["w"] += (dz.T @ cols).reshape(self.params["w"].shape)
        self.grads["b"] += dz.sum(axis=0)
        if not need_input_grad:
            return None
        wmat = self.params["w"].reshape(self.out_channels, -1)
        dcols = dz @ wmat  # (B*OH*OW, C*k*k)
        idx = self._scatter_indices(b, xp_shape, oh, ow)
        flat = np.bincount(idx, weights=dcols.ravel(), minlength=int(np.prod(xp_shape)))
        dxp = flat.reshape(xp_shape)
        p = self.padding
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp)


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2. Ties resolve to the first maximum in row-major
    window order, matching ``np.argmax`` over the flattened window."""

    kind = "maxpool2x2"

    def __init__(self, name: str = "pool"):
        super().__init__(name)
        self._cache = None

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            self._fail(f"input {h}x{w} not divisible by the 2x2 window")
        return (c, h // 2, w // 2)

    def forward(self, x):
        if x.ndim != 4:
            self._fail(f"expected 4-d input, got shape {x.shape}")
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            self._fail(f"input {h}x{w} not divisible by the 2x2 window")
        win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            b, c, h // 2, w // 2, 4)
        arg = win.argmax(axis=-1)  # first max wins on ties: row-major within the window
        self._cache = (x.shape, arg)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        x_shape, arg = self._cache
        b, c, h, w = x_shape
        if dy.shape != arg.shape:
            self._fail(f"upstream grad shape {dy.shape}, expected {arg.shape}")
        if not need_input_grad:
            return None
        dwin = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
        return np.ascontiguousarray(
            dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape))

    def kink_signature(self):
        return None if self._cache is None else self._cache[1]


class Dense(Layer):
    """Fully connected layer: y = x @ w + b with w of shape (in, out)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, name: str = "fc"):
        super().__init__(name)
        if in_features < 1 or out_features < 1:
            raise ValueError(f"{name}: feature counts must be positive")
        self.in_features = in_features
        self.out_features = out_features
        self.params = {"w": np.zeros((in_features, out_features)), "b": np.zeros(out_features)}
        self.grads = {n: np.zeros_like(p) for n, p in self.params.items()}
        self._cache = None

    def initialize(self, rng):
        self.params["w"][...] = glorot_uniform(
            rng, self.params["w"].shape, self.in_features, self.out_features)
        self.params["b"][...] = 0.0

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            self._fail(f"expected flat {self.in_features}-wide input, got {in_shape}")
        return (self.out_features,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            self._fail(f"expected (B, {self.in_features}) input, got shape {x.shape}")
        self._cache = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        x = self._cache
        if dy.shape != (x.shape[0], self.out_features):
            self._fail(f"upstream grad shape {dy.shape}, expected {(x.shape[0], self.out_features)}")
        self.grads["w"] += x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["w"].T if need_input_grad else None


class Tanh(Layer):
    kind = "tanh"

    def __init__(self, name: str = "tanh"):
        super().__init__(name)
        self._cache = None

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, dy, need_input_grad=True):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        y = self._cache
        if dy.shape != y.shape:
            self._fail(f"upstream grad shape {dy.shape}, expected {y.shape}")
        return dy * (1.0 - y * y) if need_input_grad else None


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name: str = "relu"):
        super().__init__(name)
        self._mask = None

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        self._mask = x > 0.0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy, need_input_grad=True):
        if self._mask is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        if dy.shape != self._mask.shape:
            self._fail(f"upstream grad shape {dy.shape}, expected {self._mask.shape}")
        return np.where(self._mask, dy, 0.0) if need_input_grad else None

    def kink_signature(self):
        return self._mask


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name: str = "flatten"):
        super().__init__(name)
        self._shape = None

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, need_input_grad=True):
        if self._shape is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        b = self._shape[0]
        if dy.shape != (b, int(np.prod(self._shape[1:]))):
            self._fail(f"upstream grad shape {dy.shape} does not flatten back to {self._shape}")
        return dy.reshape(self._shape) if need_input_grad else None
