# -*- coding: utf-8 -*-
# network.py: red de juguete: capas, registro de parámetros y cabezas de loss
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from acu_ops import (
    AcuLayer,
    ConvLayer,
    acu_backward,
    acu_forward,
    naive_conv_backward,
    naive_conv_forward,
)
from errors import InvalidArgumentError

Shape3 = Tuple[int, int, int]  # (c, h, w)

PARAM_KINDS = ("weight", "bias", "position")


@dataclass
class Parameter:
    """Tensor entrenable vivo (value apunta al array de la capa) + su gradiente."""

    name: str
    value: np.ndarray
    kind: str
    mask: Optional[np.ndarray] = None  # entradas entrenables; None = todas
    limit: Optional[Tuple[float, float]] = None  # clamp opcional (sólo posiciones)
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise InvalidArgumentError(f"{self.name}: kind desconocido {self.kind!r}")
        self.grad = np.zeros_like(self.value, dtype=np.float64)

    @property
    def trainable_count(self) -> int:
        return int(self.value.size if self.mask is None else np.count_nonzero(self.mask))

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# =============================================================================
# Capas
# =============================================================================

class Module:
    name: str = ""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> List[Parameter]:
        return []

    def output_shape(self, shape: Shape3) -> Shape3:
        return shape

    def children(self) -> List["Module"]:
        return []


class ConvModule(Module):
    def __init__(self, name: str, layer: ConvLayer, threads: Optional[int] = None):
        self.name = name
        self.layer = layer
        self.threads = threads
        self._x = None
        self._params = [
            Parameter(f"{name}.weights", layer.weights, "weight"),
            Parameter(f"{name}.bias", layer.bias, "bias"),
        ]

    def forward(self, x):
        self._x = x
        return naive_conv_forward(x, self.layer, self.threads)

    def backward(self, dy):
        grads = naive_conv_backward(self._x, self.layer, dy)
        self._params[0].grad += grads.d_weights
        self._params[1].grad += grads.d_bias
        return grads.d_input

    def parameters(self):
        return list(self._params)

    def output_shape(self, shape):
        geo = self.layer.geometry
        if shape[0] != geo.in_channels:
            raise InvalidArgumentError(f"{self.name}: entran {shape[0]} canales, espera {geo.in_channels}")
        return (geo.out_channels,) + self.layer.output_hw(shape[1], shape[2])


class AcuModule(Module):
    def __init__(self, name: str, layer: AcuLayer, threads: Optional[int] = None):
        self.name = name
        self.layer = layer
        self.threads = threads
        self._x = None
        self._params = [
            Parameter(f"{name}.weights", layer.weights, "weight"),
            Parameter(f"{name}.bias", layer.bias, "bias"),
            Parameter(f"{name}.positions", layer.positions.offsets, "position", mask=layer.positions.free_mask()),
        ]

    def forward(self, x):
        self._x = x
        return acu_forward(x, self.layer, self.threads)

    def backward(self, dy):
        grads = acu_backward(self._x, self.layer, dy, self.threads)
        self._params[0].grad += grads.d_weights
        self._params[1].grad += grads.d_bias
        self._params[2].grad += grads.d_positions_full()
        return grads.d_input

    def parameters(self):
        return list(self._params)

    def output_shape(self, shape):
        geo = self.layer.geometry
        if shape[0] != geo.in_channels:
            raise InvalidArgumentError(f"{self.name}: entran {shape[0]} canales, espera {geo.in_channels}")
        return (geo.out_channels,) + self.layer.output_hw(shape[1], shape[2])


class ReLU(Module):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


class GlobalAvgPool(Module):
    def __init__(self, name: str = "gap"):
        self.name = name
        self._hw = None

    def forward(self, x):
        self._hw = x.shape[2], x.shape[3]
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dy):
        h, w = self._hw
        return np.broadcast_to(dy / (h * w), dy.shape[:2] + (h, w)).copy()

    def output_shape(self, shape):
        return shape[0], 1, 1


class FullyConnected(Module):
    """weights (out, in, 1, 1) sobre entradas (N, in, 1, 1)."""

    def __init__(self, name: str, weights: np.ndarray, bias: np.ndarray):
        self.name = name
        self.weights = np.asarray(weights)
        self.bias = np.asarray(bias).reshape(-1)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (1, 1) or self.bias.shape != self.weights.shape[:1]:
            raise InvalidArgumentError(f"{name}: weights {self.weights.shape} / bias {self.bias.shape} inconsistentes")
        self._x = None
        self._params = [
            Parameter(f"{name}.weights", self.weights, "weight"),
            Parameter(f"{name}.bias", self.bias, "bias"),
        ]

    def forward(self, x):
        if x.shape[2:] != (1, 1):
            raise InvalidArgumentError(f"{self.name}: espera entrada (N, C, 1, 1), llegó {x.shape}")
        self._x = x
        y = x[:, :, 0, 0] @ self.weights[:, :, 0, 0].T + self.bias
        return y[:, :, None, None]

    def backward(self, dy):
        d = dy[:, :, 0, 0]
        self._params[0].grad += (d.T @ self._x[:, :, 0, 0])[:, :, None, None]
        self._params[1].grad += d.sum(axis=0)
        return (d @ self.weights[:, :, 0, 0])[:, :, None, None]

    def parameters(self):
        return list(self._params)

    def output_shape(self, shape):
        if shape != (self.weights.shape[1], 1, 1):
            raise InvalidArgumentError(f"{self.name}: espera ({self.weights.shape[1]}, 1, 1), llegó {shape}")
        return self.weights.shape[0], 1, 1


class Residual(Module):
    """y = x + body(x), bloque pre-activación (el body suele empezar con ReLU)."""

    def __init__(self, name: str, body: Sequence[Module]):
        self.name = name
        self.body = list(body)

    def forward(self, x):
        y = x
        for m in self.body:
            y = m.forward(y)
        if y.shape != x.shape:
            raise InvalidArgumentError(f"{self.name}: el body cambia el shape {x.shape} -> {y.shape}")
        return x + y

    def backward(self, dy):
        d = dy
        for m in reversed(self.body):
            d = m.backward(d)
        return dy + d

    def parameters(self):
        return [p for m in self.body for p in m.parameters()]

    def output_shape(self, shape):
        out = shape
        for m in self.body:
            out = m.output_shape(out)
        if out != shape:
            raise InvalidArgumentError(f"{self.name}: el body cambia el shape {shape} -> {out}")
        return shape

    def children(self):
        return list(self.body)


# =============================================================================
# Cabezas de loss
# =============================================================================

class Head(Module):
    def loss(self, pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
        raise NotImplementedError


class MeanSquaredError(Head):
    def __init__(self, name: str = "mse"):
        self.name = name

    def loss(self, pred, target):
        target = np.asarray(target).reshape(pred.shape)
        diff = pred - target
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


class SoftmaxCrossEntropy(Head):
    def __init__(self, name: str = "softmax_ce"):
        self.name = name

    def loss(self, pred, target):
        logits = pred.reshape(pred.shape[0], -1)
        labels = np.asarray(target).astype(int).reshape(-1)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        n = logits.shape[0]
        loss = -float(np.mean(logp[np.arange(n), labels]))
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return loss, (d / n).reshape(pred.shape)


# =============================================================================
# Red
# =============================================================================

class ToyNetwork:
    def __init__(self, layers: Sequence[Module], input_shape: Optional[Shape3] = None, name: str = "net"):
        self.name = name
        layers = list(layers)
        self.head: Head = MeanSquaredError()
        if layers and isinstance(layers[-1], Head):
            self.head = layers.pop()
        if any(isinstance(m, Head) for m in layers):
            raise InvalidArgumentError("la cabeza de loss debe ser la última capa")
        self.layers: List[Module] = layers
        self.input_shape = input_shape
        self.registry: "OrderedDict[str, Parameter]" = OrderedDict()
        for p in (p for m in self.layers for p in m.parameters()):
            if p.name in self.registry:
                raise InvalidArgumentError(f"parámetro duplicado: {p.name}")
            self.registry[p.name] = p
        if input_shape is not None:
            self.output_shape(input_shape)

    def modules(self) -> Iterator[Module]:
        stack = list(reversed(self.layers))
        while stack:
            m = stack.pop()
            yield m
            stack.extend(reversed(m.children()))

    def acu_modules(self) -> List[AcuModule]:
        return [m for m in self.modules() if isinstance(m, AcuModule)]

    def output_shape(self, shape: Shape3) -> Shape3:
        for m in self.layers:
            shape = m.output_shape(shape)
        return shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        for m in self.layers:
            x = m.forward(x)
        return x

    def zero_grad(self) -> None:
        for p in self.registry.values():
            p.zero_grad()

    def loss_and_grads(self, x: np.ndarray, target: np.ndarray) -> float:
        self.zero_grad()
        pred = self.forward(x)
        loss, d = self.head.loss(pred, target)
        for m in reversed(self.layers):
            d = m.backward(d)
        return loss

    def loss(self, x: np.ndarray, target: np.ndarray) -> float:
        return self.head.loss(self.forward(x), target)[0]

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.registry.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self.registry[name].value[...] = value

    def max_width(self) -> int:
        widths = [0]
        for m in self.modules():
            if isinstance(m, (ConvModule, AcuModule)):
                widths += [m.layer.geometry.in_channels, m.layer.geometry.out_channels]
        return max(widths)
