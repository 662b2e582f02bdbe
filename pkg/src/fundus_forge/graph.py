"""Executable layer graphs with named parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import layers
from .layers import BatchNormState, ConvSpec
from .tensor import ShapeError, Tensor, add, concat_channels, default_dtype, pad_channels, relu, sigmoid

CONV_OPS = ("conv", "tconv")


@dataclass
class Node:
    name: str
    op: str
    inputs: Tuple[str, ...]
    attrs: dict = field(default_factory=dict)
    stage: Optional[int] = None


class ModelGraph:
    """A DAG of layer nodes, executed in insertion order.

    Parameters live in ``params`` under ``"<node>.<role>"`` names; batch-norm
    running statistics live in ``bn_states`` keyed by node name.
    """

    def __init__(self, arch: str, hyper: Optional[dict] = None):
        self.arch = arch
        self.hyper = dict(hyper or {})
        self.nodes: List[Node] = []
        self.params: Dict[str, Tensor] = {}
        self.bn_states: Dict[str, BatchNormState] = {}
        self.downsampling = 1
        self.output = "input"

    # construction ----------------------------------------------------------

    def _add(self, node: Node) -> str:
        if any(n.name == node.name for n in self.nodes) or node.name == "input":
            raise ValueError(f"duplicate node name {node.name!r}")
        self.nodes.append(node)
        self.output = node.name
        return node.name

    def _param(self, name: str, shape: tuple, fill: float = 0.0) -> None:
        self.params[name] = Tensor(np.full(shape, fill, dtype=default_dtype()), requires_grad=True, name=name)

    def conv(self, name, x, spec: ConvSpec, stage=None) -> str:
        self._param(f"{name}.weight", spec.weight_shape)
        if spec.bias:
            self._param(f"{name}.bias", (spec.out_channels,))
        return self._add(Node(name, "conv", (x,), {"spec": spec}, stage))

    def tconv(self, name, x, spec: ConvSpec, stage=None) -> str:
        self._param(f"{name}.weight", spec.transposed_weight_shape)
        if spec.bias:
            self._param(f"{name}.bias", (spec.out_channels,))
        return self._add(Node(name, "tconv", (x,), {"spec": spec}, stage))

    def bn(self, name, x, channels: int, stage=None) -> str:
        self._param(f"{name}.gamma", (channels,), 1.0)
        self._param(f"{name}.beta", (channels,), 0.0)
        self.bn_states[name] = BatchNormState.fresh(channels, default_dtype())
        return self._add(Node(name, "bn", (x,), {"channels": channels}, stage))

    def prelu(self, name, x, channels: int, stage=None) -> str:
        self._param(f"{name}.slope", (channels,), 0.25)
        return self._add(Node(name, "prelu", (x,), {"channels": channels}, stage))

    def relu(self, name, x, stage=None) -> str:
        return self._add(Node(name, "relu", (x,), {}, stage))

    def sigmoid(self, name, x, stage=None) -> str:
        return self._add(Node(name, "sigmoid", (x,), {}, stage))

    def maxpool(self, name, x, window=(2, 2), stage=None) -> str:
        return self._add(Node(name, "maxpool", (x,), {"window": window}, stage))

    def unpool(self, name, x, pool: str, stage=None) -> str:
        """Unpool ``x`` with the indices recorded by maxpool node ``pool``."""
        return self._add(Node(name, "unpool", (x, pool), {}, stage))

    def concat(self, name, a, b, stage=None) -> str:
        return self._add(Node(name, "concat", (a, b), {}, stage))

    def add(self, name, a, b, stage=None) -> str:
        return self._add(Node(name, "add", (a, b), {}, stage))

    def pad_channels(self, name, x, extra: int, stage=None) -> str:
        return self._add(Node(name, "pad_channels", (x,), {"extra": extra}, stage))

    # execution ---------------------------------------------------------------

    def forward(self, x, train: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"{self.arch}: expected input (batch, 3, H, W), got {x.shape}")
        h, w = x.shape[2:]
        f = self.downsampling
        if h % f or w % f:
            raise ShapeError(f"{self.arch}: input {h}x{w} not divisible by downsampling factor {f}")
        values: Dict[str, Tensor] = {"input": x}
        indices: Dict[str, Tuple[np.ndarray, tuple]] = {}
        p = self.params
        for node in self.nodes:
            a = values[node.inputs[0]]
            op = node.op
            if op == "conv":
                out = layers.conv2d(a, node.attrs["spec"], p[f"{node.name}.weight"], p.get(f"{node.name}.bias"))
            elif op == "tconv":
                out = layers.transposed_conv2d(a, node.attrs["spec"], p[f"{node.name}.weight"], p.get(f"{node.name}.bias"))
            elif op == "bn":
                out = layers.batch_norm(a, p[f"{node.name}.gamma"], p[f"{node.name}.beta"], self.bn_states[node.name], train)
            elif op == "prelu":
                out = layers.prelu(a, p[f"{node.name}.slope"])
            elif op == "relu":
                out = relu(a)
            elif op == "sigmoid":
                out = sigmoid(a)
            elif op == "maxpool":
                out, idx = layers.maxpool2d(a, node.attrs["window"])
                indices[node.name] = (idx, a.shape[2:])
            elif op == "unpool":
                idx, size = indices[node.inputs[1]]
                out = layers.max_unpool2d(a, idx, size)
            elif op == "concat":
                out = concat_channels(a, values[node.inputs[1]])
            elif op == "add":
                out = add(a, values[node.inputs[1]])
            elif op == "pad_channels":
                out = pad_channels(a, node.attrs["extra"])
            else:
                raise ValueError(f"unknown op {op!r}")
            values[node.name] = out
        return values[self.output]

    __call__ = forward

    # bookkeeping ---------------------------------------------------------------

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "ModelGraph":
        """Cast parameters and running statistics in place (used for 64-bit checks)."""
        dtype = np.dtype(dtype)
        for name, t in self.params.items():
            self.params[name] = Tensor(t.data.astype(dtype), requires_grad=True, dtype=dtype, name=name)
        for s in self.bn_states.values():
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        return self

    def conv_layer_count(self) -> int:
        return sum(1 for n in self.nodes if n.op in CONV_OPS)

    def stage_count(self) -> int:
        return len({n.stage for n in self.nodes if n.stage is not None})

    def signature(self) -> list:
        """Node wiring plus parameter shapes; equal for equal builds."""
        nodes = [(n.name, n.op, n.inputs, repr(sorted(n.attrs.items())), n.stage) for n in self.nodes]
        shapes = [(k, v.shape) for k, v in self.params.items()]
        return nodes + shapes


def param_count(model: ModelGraph) -> int:
    """Number of learnable scalars."""
    return int(sum(t.size for t in model.params.values()))


def he_uniform(shape: tuple, fan_in: float, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _fan_in(node: Node) -> float:
    spec: ConvSpec = node.attrs["spec"]
    if node.op == "conv":
        return spec.fan_in
    # inputs feeding one output pixel of a transposed convolution
    taps = spec.kernel[0] * spec.kernel[1] / (spec.stride[0] * spec.stride[1])
    return spec.in_channels * max(taps, 1.0)


def init_he_uniform(model: ModelGraph, seed: int) -> None:
    """He-uniform weights, zero biases, unit BN scale, 0.25 PReLU slopes."""
    rng = np.random.default_rng(seed)
    for node in model.nodes:
        p = model.params
        if node.op in CONV_OPS:
            w = p[f"{node.name}.weight"]
            w.data = he_uniform(w.shape, _fan_in(node), rng).astype(w.dtype)
            if f"{node.name}.bias" in p:
                p[f"{node.name}.bias"].data[...] = 0
        elif node.op == "bn":
            p[f"{node.name}.gamma"].data[...] = 1
            p[f"{node.name}.beta"].data[...] = 0
            c = node.attrs["channels"]
            model.bn_states[node.name] = BatchNormState.fresh(c, p[f"{node.name}.gamma"].dtype)
        elif node.op == "prelu":
            p[f"{node.name}.slope"].data[...] = 0.25
    for t in model.params.values():
        t.grad = None
