"""Dense float64 layers with hand-written forward and backward passes.

Arrays are numpy ``float64`` in channels-last layout: an image is ``(H, W, C)``.
Every layer also accepts one or more leading batch dimensions, which the
trainer and the finite-difference oracles use to evaluate many inputs at once.

There is no autodiff tape. The model is a fixed chain, so each layer only needs

* ``forward(x, mask)``
* ``backward_input(x, g)``   -> dL/dx given dL/d(out) = g
* ``backward_weights(x, g)`` -> tuple of dL/dparam, aligned with ``layer.params``
"""
from __future__ import annotations

import copy
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError

KINDS = ("Conv2D", "FullyConnected", "ReLU", "AvgPool2x2", "Flatten", "DropoutSite")


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Layer:
    kind: str = ""

    def __init__(self, in_shape: Sequence[int]):
        self.in_shape = tuple(int(d) for d in in_shape)

    @property
    def out_shape(self) -> Tuple[int, ...]:
        return self.in_shape

    @property
    def params(self) -> Tuple[np.ndarray, ...]:
        return ()

    def with_params(self, *arrays) -> "Layer":
        """Copy of this layer carrying ``arrays`` in place of ``params``."""
        if len(arrays) != len(self.params):
            raise ValueError(f"{self.kind} takes {len(self.params)} parameter arrays, got {len(arrays)}")
        new = copy.copy(self)
        new._set_params([_as_f64(a).copy() for a in arrays])
        return new

    def _set_params(self, arrays):
        pass

    def config(self) -> dict:
        """JSON-serializable description (everything except parameter values)."""
        return {"kind": self.kind, "in_shape": list(self.in_shape)}

    def check_input(self, x: np.ndarray) -> np.ndarray:
        x = _as_f64(x)
        n = len(self.in_shape)
        if x.ndim < n or x.shape[x.ndim - n:] != self.in_shape:
            raise ShapeError(self.kind, self.in_shape, x.shape)
        return x

    def check_upstream(self, x: np.ndarray, g) -> np.ndarray:
        g = _as_f64(g)
        expected = x.shape[: x.ndim - len(self.in_shape)] + self.out_shape
        if g.shape != expected:
            raise ShapeError(f"{self.kind} upstream gradient", expected, g.shape)
        return g

    def forward(self, x, mask=None) -> np.ndarray:
        raise NotImplementedError

    def backward_input(self, x, g, mask=None) -> np.ndarray:
        raise NotImplementedError

    def backward_weights(self, x, g) -> Tuple[np.ndarray, ...]:
        return ()

    def __repr__(self):
        return f"{type(self).__name__}(in_shape={self.in_shape}, out_shape={self.out_shape})"


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, in_shape, out_channels, kernel_size=3, stride=1, padding=0, weight=None, bias=None):
        super().__init__(in_shape)
        if len(self.in_shape) != 3:
            raise ValueError(f"Conv2D expects an (H, W, C) input shape, got {self.in_shape}")
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        h, w, _ = self.in_shape
        for side in (h, w):
            span = side + 2 * self.padding - self.kernel_size
            if span < 0 or span % self.stride:
                raise ValueError(
                    f"Conv2D kernel {self.kernel_size}, stride {self.stride}, padding {self.padding} "
                    f"does not tile input side {side}"
                )
        wshape = (self.kernel_size, self.kernel_size, self.in_shape[2], self.out_channels)
        self.weight = np.zeros(wshape) if weight is None else _as_f64(weight)
        self.bias = np.zeros(self.out_channels) if bias is None else _as_f64(bias)
        if self.weight.shape != wshape:
            raise ShapeError("Conv2D weight", wshape, self.weight.shape)
        if self.bias.shape != (self.out_channels,):
            raise ShapeError("Conv2D bias", (self.out_channels,), self.bias.shape)

    @property
    def out_shape(self):
        h, w, _ = self.in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1, self.out_channels)

    @property
    def params(self):
        return (self.weight, self.bias)

    def _set_params(self, arrays):
        self.weight, self.bias = arrays

    def config(self):
        return {
            **super().config(),
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }

    def _pad(self, x):
        p = self.padding
        if not p:
            return x
        lead = [(0, 0)] * (x.ndim - 3)
        return np.pad(x, lead + [(p, p), (p, p), (0, 0)])

    def _windows(self):
        ho, wo, _ = self.out_shape
        s = self.stride
        for dy in range(self.kernel_size):
            for dx in range(self.kernel_size):
                yield dy, dx, slice(dy, dy + s * (ho - 1) + 1, s), slice(dx, dx + s * (wo - 1) + 1, s)

    def forward(self, x, mask=None):
        x = self.check_input(x)
        xp = self._pad(x)
        out = np.zeros(x.shape[:-3] + self.out_shape)
        for dy, dx, rows, cols in self._windows():
            out += xp[..., rows, cols, :] @ self.weight[dy, dx]
        return out + self.bias

    def backward_input(self, x, g, mask=None):
        x = self.check_input(x)
        g = self.check_upstream(x, g)
        gp = np.zeros(self._pad(x).shape)
        for dy, dx, rows, cols in self._windows():
            gp[..., rows, cols, :] += g @ self.weight[dy, dx].T
        p = self.padding
        h, w, _ = self.in_shape
        return gp[..., p:p + h, p:p + w, :]

    def backward_weights(self, x, g):
        x = self.check_input(x)
        g = self.check_upstream(x, g)
        xp = self._pad(x)
        cin, cout = self.in_shape[2], self.out_channels
        g2 = g.reshape(-1, cout)
        dw = np.empty_like(self.weight)
        for dy, dx, rows, cols in self._windows():
            dw[dy, dx] = xp[..., rows, cols, :].reshape(-1, cin).T @ g2
        return dw, g2.sum(axis=0)


class FullyConnected(Layer):
    """``out = W @ x + b`` with ``W`` of shape ``(out_features, in_features)``."""

    kind = "FullyConnected"

    def __init__(self, in_features, out_features, weight=None, bias=None):
        super().__init__((int(in_features),))
        self.out_features = int(out_features)
        wshape = (self.out_features, self.in_shape[0])
        self.weight = np.zeros(wshape) if weight is None else _as_f64(weight)
        self.bias = np.zeros(self.out_features) if bias is None else _as_f64(bias)
        if self.weight.shape != wshape:
            raise ShapeError("FullyConnected weight", wshape, self.weight.shape)
        if self.bias.shape != (self.out_features,):
            raise ShapeError("FullyConnected bias", (self.out_features,), self.bias.shape)

    @property
    def out_shape(self):
        return (self.out_features,)

    @property
    def params(self):
        return (self.weight, self.bias)

    def _set_params(self, arrays):
        self.weight, self.bias = arrays

    def config(self):
        return {**super().config(), "out_features": self.out_features}

    def forward(self, x, mask=None):
        x = self.check_input(x)
        return x @ self.weight.T + self.bias

    def backward_input(self, x, g, mask=None):
        x = self.check_input(x)
        return self.check_upstream(x, g) @ self.weight

    def backward_weights(self, x, g):
        x = self.check_input(x)
        g = self.check_upstream(x, g)
        g2 = g.reshape(-1, self.out_features)
        return g2.T @ x.reshape(-1, self.in_shape[0]), g2.sum(axis=0)


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, mask=None):
        x = self.check_input(x)
        return np.where(x > 0, x, 0.0)

    def backward_input(self, x, g, mask=None):
        x = self.check_input(x)
        g = self.check_upstream(x, g)
        # subgradient 0 at exactly 0
        return np.where(x > 0, g, 0.0)


class AvgPool2x2(Layer):
    kind = "AvgPool2x2"

    def __init__(self, in_shape):
        super().__init__(in_shape)
        if len(self.in_shape) != 3 or self.in_shape[0] % 2 or self.in_shape[1] % 2:
            raise ValueError(f"AvgPool2x2 needs an (H, W, C) input with even H and W, got {self.in_shape}")

    @property
    def out_shape(self):
        h, w, c = self.in_shape
        return (h // 2, w // 2, c)

    def forward(self, x, mask=None):
        x = self.check_input(x)
        h, w, c = self.in_shape
        blocks = x.reshape(x.shape[:-3] + (h // 2, 2, w // 2, 2, c))
        return blocks.mean(axis=(-4, -2))

    def backward_input(self, x, g, mask=None):
        x = self.check_input(x)
        g = self.check_upstream(x, g)
        return np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2) * 0.25


class Flatten(Layer):
    kind = "Flatten"

    @property
    def out_shape(self):
        return (int(np.prod(self.in_shape)),)

    def forward(self, x, mask=None):
        x = self.check_input(x)
        return x.reshape(x.shape[: x.ndim - len(self.in_shape)] + self.out_shape)

    def backward_input(self, x, g, mask=None):
        x = self.check_input(x)
        g = self.check_upstream(x, g)
        return g.reshape(x.shape)


class DropoutSite(Layer):
    """Inverted dropout: ``x * mask / (1 - p)``; identity when no mask is given."""

    kind = "DropoutSite"

    def __init__(self, in_shape, p=0.5):
        super().__init__(in_shape)
        p = float(p)
        if not 0.0 < p < 1.0:
            raise ValueError(f"drop probability must lie in (0, 1), got {p}")
        self.p = p

    def config(self):
        return {**super().config(), "p": self.p}

    def _scaled_mask(self, x, mask, p):
        mask = _as_f64(mask)
        feat = x.shape[x.ndim - len(self.in_shape):]
        if mask.shape[mask.ndim - len(self.in_shape):] != feat:
            raise ShapeError("DropoutSite mask", self.in_shape, mask.shape)
        return mask / (1.0 - (self.p if p is None else p))

    def forward(self, x, mask=None, p=None):
        x = self.check_input(x)
        if mask is None:
            return x.copy()
        return x * self._scaled_mask(x, mask, p)

    def backward_input(self, x, g, mask=None, p=None):
        x = self.check_input(x)
        g = self.check_upstream(x, g)
        if mask is None:
            return g.copy()
        return g * self._scaled_mask(x, mask, p)


def forward(layer: Layer, x, dropout_mask=None, *, index: Optional[int] = None) -> np.ndarray:
    """Apply ``layer`` to ``x``. ``index`` is only used to label shape errors."""
    if dropout_mask is not None and not isinstance(layer, DropoutSite):
        raise ValueError(f"a dropout mask was given to a {layer.kind} layer")
    try:
        return layer.forward(x, dropout_mask)
    except ShapeError as err:
        raise err.at(index) from None


def backward_input(layer: Layer, x, upstream_grad, dropout_mask=None, *, index: Optional[int] = None) -> np.ndarray:
    try:
        return layer.backward_input(x, upstream_grad, dropout_mask)
    except ShapeError as err:
        raise err.at(index) from None


def backward_weights(layer: Layer, x, upstream_grad, *, index: Optional[int] = None) -> Tuple[np.ndarray, ...]:
    try:
        return layer.backward_weights(x, upstream_grad)
    except ShapeError as err:
        raise err.at(index) from None


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def layer_from_config(cfg: dict) -> Layer:
    kind = cfg.get("kind")
    in_shape = cfg["in_shape"]
    if kind == "Conv2D":
        return Conv2D(in_shape, cfg["out_channels"], cfg["kernel_size"], cfg["stride"], cfg["padding"])
    if kind == "FullyConnected":
        (n_in,) = in_shape
        return FullyConnected(n_in, cfg["out_features"])
    if kind == "ReLU":
        return ReLU(in_shape)
    if kind == "AvgPool2x2":
        return AvgPool2x2(in_shape)
    if kind == "Flatten":
        return Flatten(in_shape)
    if kind == "DropoutSite":
        return DropoutSite(in_shape, cfg["p"])
    raise ValueError(f"unknown layer kind {kind!r}")
