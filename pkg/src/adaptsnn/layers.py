"""Weighted and shape layers used between LIF populations.

All layers act on a leading batch axis; the network folds the time axis into
it so one call covers every timestep.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, kaiming_normal


class Layer:
    kind = "layer"
    weighted = False
    lif = False

    def __init__(self):
        self.in_shape: tuple = ()
        self.out_shape: tuple = ()

    def build(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        """Return (grad_weight or None, grad_input)."""
        raise NotImplementedError

    def ops(self) -> int:
        """Multiply-accumulates of the equivalent non-spiking layer."""
        return 0

    def spec(self) -> str:
        raise NotImplementedError


class Affine(Layer):
    kind = "affine"
    weighted = True

    def __init__(self, fan_out: int, lif: bool = True):
        super().__init__()
        self.fan_out = fan_out
        self.lif = lif
        self.weight: np.ndarray | None = None

    def build(self, in_shape):
        if len(in_shape) != 1:
            raise DimensionError(f"affine layer needs flat input, got {in_shape}")
        self.in_shape = tuple(in_shape)
        self.out_shape = (self.fan_out,)
        return self.out_shape

    @property
    def fan_in(self) -> int:
        return self.in_shape[0]

    def init(self, rng):
        self.weight = kaiming_normal(rng, (self.fan_out, self.fan_in), self.fan_in)

    def forward(self, x):
        return x @ self.weight.T

    def backward(self, x, grad_out):
        return grad_out.T @ x, grad_out @ self.weight

    def ops(self):
        return self.fan_in * self.fan_out

    def spec(self):
        return f"{self.fan_out}FC"


class Conv2d(Layer):
    """Stride-1 convolution with symmetric zero padding."""

    kind = "conv2d"
    weighted = True

    def __init__(self, out_channels: int, kernel: int = 3, padding: int | None = None, lif: bool = True):
        super().__init__()
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = (kernel - 1) // 2 if padding is None else padding
        self.lif = lif
        self.weight: np.ndarray | None = None

    def build(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"conv layer needs CxHxW input, got {in_shape}")
        c, h, w = in_shape
        ho = h + 2 * self.padding - self.kernel + 1
        wo = w + 2 * self.padding - self.kernel + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"kernel {self.kernel} too large for {in_shape}")
        self.in_shape = tuple(in_shape)
        self.out_shape = (self.out_channels, ho, wo)
        return self.out_shape

    @property
    def fan_in(self) -> int:
        return self.in_shape[0] * self.kernel * self.kernel

    def init(self, rng):
        shape = (self.out_channels, self.in_shape[0], self.kernel, self.kernel)
        self.weight = kaiming_normal(rng, shape, self.fan_in)

    def _windows(self, x, pad):
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        # (B, C, Ho, Wo, k, k)
        return sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))

    def forward(self, x):
        win = self._windows(x, self.padding)
        out = np.tensordot(win, self.weight, axes=([1, 4, 5], [1, 2, 3]))
        return np.moveaxis(out, 3, 1)

    def backward(self, x, grad_out):
        win = self._windows(x, self.padding)
        gw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
        # input gradient: full correlation with the flipped kernel
        flipped = self.weight[:, :, ::-1, ::-1]
        gwin = self._windows(grad_out, self.kernel - 1 - self.padding)
        gx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))
        return gw, np.moveaxis(gx, 3, 1)

    def ops(self):
        c, _, _ = self.in_shape
        o, ho, wo = self.out_shape
        return o * ho * wo * c * self.kernel * self.kernel

    def spec(self):
        return f"{self.out_channels}C{self.kernel}"


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def build(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"pooling needs CxHxW input, got {in_shape}")
        c, h, w = in_shape
        if h % self.size or w % self.size:
            raise DimensionError(f"pool size {self.size} does not divide {h}x{w}")
        self.in_shape = tuple(in_shape)
        self.out_shape = (c, h // self.size, w // self.size)
        return self.out_shape

    def forward(self, x):
        b, c, h, w = x.shape
        s = self.size
        return x.reshape(b, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def backward(self, x, grad_out):
        s = self.size
        g = np.repeat(np.repeat(grad_out, s, axis=2), s, axis=3) / (s * s)
        return None, g

    def spec(self):
        return f"{self.size}AP"


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = (int(np.prod(in_shape)),)
        return self.out_shape

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, grad_out):
        return None, grad_out.reshape((grad_out.shape[0],) + self.in_shape)

    def spec(self):
        return "FLAT"


def parse_arch(arch: str) -> list[Layer]:
    """Parse ``"16C3-2AP-32C3-2AP-10FC"`` style architecture strings.

    ``nFC`` is a fully connected layer, ``cCk`` a k x k convolution with
    c output channels, ``sAP`` an s x s average pool. Every weighted layer
    except the last is followed by a LIF population; a flatten is inserted
    automatically before the first FC layer that follows a spatial layer.
    """
    tokens = [t.strip() for t in arch.split("-") if t.strip()]
    if not tokens:
        raise ValueError("empty architecture")
    layers: list[Layer] = []
    for tok in tokens:
        up = tok.upper()
        try:
            if up.endswith("FC"):
                layers.append(Affine(int(up[:-2])))
            elif up.endswith("AP"):
                layers.append(AvgPool(int(up[:-2])))
            elif "C" in up:
                c, k = up.split("C")
                layers.append(Conv2d(int(c), int(k)))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"bad architecture token {tok!r} in {arch!r}") from None
    weighted = [l for l in layers if l.weighted]
    if not weighted or not isinstance(layers[-1], Affine):
        raise ValueError(f"architecture {arch!r} must end with an FC readout layer")
    for l in weighted[:-1]:
        l.lif = True
    weighted[-1].lif = False
    out: list[Layer] = []
    spatial = False
    for l in layers:
        if isinstance(l, Affine) and spatial:
            out.append(Flatten())
            spatial = False
        elif isinstance(l, (Conv2d, AvgPool)):
            spatial = True
        out.append(l)
    return out
