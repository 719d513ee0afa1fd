"""Small network building blocks on top of the tape."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError
from . import core
from .conv import conv2d, conv2d_transpose, conv_output_size, deconv_output_size
from .core import Tensor

ACTIVATIONS: dict[str, Callable] = {
    "elu": core.elu,
    "relu": core.relu,
    "tanh": core.tanh,
    "sigmoid": core.sigmoid,
    "softplus": core.softplus,
    "none": lambda x: x,
}


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Parameter container: Tensors with ``requires_grad`` plus child modules."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{name}.{i}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, act: str = "none"):
        self.w = Tensor(glorot(rng, (n_in, n_out), n_in, n_out), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)
        self.act = act

    def __call__(self, x) -> Tensor:
        return ACTIVATIONS[self.act](core.dense(x, self.w, self.b))


class MLP(Module):
    """Stack of dense layers; hidden layers use ``act``, the last ``out_act``."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, act: str = "elu", out_act: str = "none"):
        self.layers = [
            Dense(a, b, rng, act if i < len(sizes) - 2 else out_act)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class GRUCell(Module):
    """Gated recurrent update with one fused dense layer for all gates."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.n_hidden = n_hidden
        self.gates = Dense(n_in + n_hidden, 3 * n_hidden, rng)

    def __call__(self, x, h) -> Tensor:
        parts = self.gates(core.concat([x, h], axis=-1))
        reset, cand, update = core.split(parts, [self.n_hidden] * 3, axis=-1)
        reset = core.sigmoid(reset)
        cand = core.tanh(core.mul(reset, cand))
        update = core.sigmoid(core.affine(update, 1.0, -1.0))
        keep = core.affine(update, -1.0, 1.0)
        return core.add(core.mul(update, cand), core.mul(keep, h))


class ConvEncoder(Module):
    """Stride-``stride`` valid convolutions followed by flattening."""

    def __init__(self, in_channels: int, image_hw: tuple[int, int], channels: Sequence[int],
                 kernels: Sequence[int], rng: np.random.Generator, stride: int = 2, act: str = "elu"):
        if len(channels) != len(kernels):
            raise DimensionError("channels and kernels must have equal length")
        self.stride, self.act = stride, act
        self.kernels, self.biases = [], []
        c, (h, w) = in_channels, image_hw
        for co, k in zip(channels, kernels):
            fan_in, fan_out = c * k * k, co * k * k
            self.kernels.append(_ParamBox(glorot(rng, (co, c, k, k), fan_in, fan_out)))
            self.biases.append(_ParamBox(np.zeros(co)))
            h, w = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
            if h < 1 or w < 1:
                raise DimensionError(f"conv stack collapses image {image_hw} to nothing")
            c = co
        self.out_shape = (c, h, w)
        self.out_features = c * h * w

    def __call__(self, x) -> Tensor:
        """``x``: (n, c, h, w) -> (n, out_features)."""
        for k, b in zip(self.kernels, self.biases):
            x = ACTIVATIONS[self.act](conv2d(x, k.t, self.stride, bias=b.t))
        return core.reshape(x, (x.shape[0], self.out_features))


class ConvDecoder(Module):
    """Dense projection to a 1x1 map, then transposed convolutions up to the image."""

    def __init__(self, n_in: int, depth: int, channels: Sequence[int], kernels: Sequence[int],
                 out_channels: int, image_hw: tuple[int, int], rng: np.random.Generator,
                 stride: int = 2, act: str = "elu"):
        if len(channels) != len(kernels) - 1:
            raise DimensionError("decoder needs one more kernel than hidden channel entries")
        self.stride, self.act, self.depth = stride, act, depth
        self.project = Dense(n_in, depth, rng)
        self.kernels, self.biases = [], []
        c, h = depth, 1
        for co, k in zip(list(channels) + [out_channels], kernels):
            self.kernels.append(_ParamBox(glorot(rng, (c, co, k, k), c * k * k, co * k * k)))
            self.biases.append(_ParamBox(np.zeros(co)))
            h = deconv_output_size(h, k, stride)
            c = co
        if (h, h) != tuple(image_hw):
            raise DimensionError(f"decoder kernels {list(kernels)} produce {h}x{h}, need {image_hw}")
        self.image_hw = tuple(image_hw)
        self.out_channels = out_channels

    def __call__(self, x) -> Tensor:
        """``x``: (n, n_in) -> (n, out_channels, h, w)."""
        x = self.project(x)
        x = core.reshape(x, (x.shape[0], self.depth, 1, 1))
        last = len(self.kernels) - 1
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            x = conv2d_transpose(x, k.t, self.stride, bias=b.t)
            if i < last:
                x = ACTIVATIONS[self.act](x)
        return x


class _ParamBox(Module):
    """Holds a single raw parameter array so lists of them get stable names."""

    def __init__(self, arr: np.ndarray):
        self.t = Tensor(arr, requires_grad=True)
