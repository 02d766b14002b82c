"""Convolutional LSTM cell with sequence unrolling and BPTT via the tape.

Gate pre-activations for (i, f, g, o) are computed by two stacked
convolutions, one over the input and one over the hidden map, so a step costs
two conv2d calls instead of eight. The individual gate kernels (``Wxi`` ...)
are exposed as views into the stacked parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tape import Node, Tape

GATES = ("i", "f", "c", "o")


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(T.get_dtype())


@dataclass
class ConvLSTMState:
    h: Node
    c: Node

    @property
    def shape(self) -> tuple:
        return self.h.shape


@dataclass
class ConvLSTMCell:
    in_channels: int
    out_channels: int
    kernel: int = 5
    input_stride: int = 1
    peephole: bool = False
    w_x: Node = field(default=None, repr=False)
    w_h: Node = field(default=None, repr=False)
    bias: Node = field(default=None, repr=False)
    peep: Node | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError(f"ConvLSTM kernel must be odd for shape-preserving padding, got {self.kernel}")
        if self.input_stride not in (1, 2):
            raise ValueError(f"input_stride must be 1 or 2, got {self.input_stride}")
        dtype = T.get_dtype()
        c, k = self.out_channels, self.kernel
        if self.w_x is None:
            self.w_x = Node(np.zeros((4 * c, self.in_channels, k, k), dtype))
        if self.w_h is None:
            self.w_h = Node(np.zeros((4 * c, c, k, k), dtype))
        if self.bias is None:
            self.bias = Node(np.zeros(4 * c, dtype))
        if self.peephole and self.peep is None:
            self.peep = Node(np.zeros((3, c), dtype))

    @classmethod
    def initialized(cls, in_channels: int, out_channels: int, rng: np.random.Generator,
                    kernel: int = 5, input_stride: int = 1, peephole: bool = False) -> "ConvLSTMCell":
        cell = cls(in_channels, out_channels, kernel, input_stride, peephole)
        k2 = kernel * kernel
        cell.w_x.value[...] = glorot_uniform(rng, cell.w_x.shape, in_channels * k2, out_channels * k2)
        cell.w_h.value[...] = glorot_uniform(rng, cell.w_h.shape, out_channels * k2, out_channels * k2)
        cell.bias.value[out_channels:2 * out_channels] = 1.0
        return cell

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2

    def gate_kernels(self) -> dict[str, np.ndarray]:
        """Views ``Wxi, Whi, ..., bo`` into the stacked parameters."""
        c = self.out_channels
        out = {}
        for n, g in enumerate(GATES):
            sl = slice(n * c, (n + 1) * c)
            out[f"Wx{g}"] = self.w_x.value[sl]
            out[f"Wh{g}"] = self.w_h.value[sl]
            out[f"b{g}"] = self.bias.value[sl]
        return out

    def parameters(self) -> dict[str, Node]:
        params = {"w_x": self.w_x, "w_h": self.w_h, "bias": self.bias}
        if self.peephole:
            params["peep"] = self.peep
        return params

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        if h % self.input_stride or w % self.input_stride:
            raise T.ShapeError(f"input {h}x{w} not divisible by ConvLSTM stride {self.input_stride}")
        return h // self.input_stride, w // self.input_stride


def zero_state(cell: ConvLSTMCell, batch: int, h: int, w: int) -> ConvLSTMState:
    """All-zero state sized for an input of ``h``x``w`` pixels (pre-stride)."""
    if batch < 1 or h < 1 or w < 1:
        raise ValueError(f"state dims must be positive, got batch={batch}, {h}x{w}")
    oh, ow = cell.output_size(h, w)
    shape = (batch, cell.out_channels, oh, ow)
    dtype = T.get_dtype()
    return ConvLSTMState(Node(np.zeros(shape, dtype)), Node(np.zeros(shape, dtype)))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(T.asarray(x))


def convlstm_step(cell: ConvLSTMCell, x, state: ConvLSTMState, tape: Tape | None = None):
    """One ConvLSTM step; returns ``(h', state')`` with ``state' = (h', c')``."""
    tape = Tape(record=False) if tape is None else tape
    x = _as_node(x)
    n, cin, h, w = x.shape
    if cin != cell.in_channels:
        raise T.ShapeError(f"ConvLSTM expects {cell.in_channels} input channels, got {cin}")
    expected = (n, cell.out_channels) + cell.output_size(h, w)
    if state.h.shape != expected or state.c.shape != expected:
        raise T.ShapeError(f"ConvLSTM state geometry {state.h.shape}/{state.c.shape} != expected {expected}")
    zx = tape.conv2d(x, cell.w_x, cell.bias, stride=cell.input_stride, padding=cell.padding)
    zh = tape.conv2d(state.h, cell.w_h, None, stride=1, padding=cell.padding)
    z = tape.add(zx, zh)
    h_new, c_new = tape.lstm_gates(z, state.c, cell.peep if cell.peephole else None)
    return h_new, ConvLSTMState(h_new, c_new)


def convlstm_sequence(cell: ConvLSTMCell, xs: Sequence, init: ConvLSTMState,
                      tape: Tape | None = None) -> tuple[list[Node], ConvLSTMState]:
    xs = [_as_node(x) for x in xs]
    if any(x.shape != xs[0].shape for x in xs):
        raise T.ShapeError("convlstm_sequence: all inputs must share one shape")
    tape = Tape(record=False) if tape is None else tape
    state = init
    hs = []
    for x in xs:
        h, state = convlstm_step(cell, x, state, tape)
        hs.append(h)
    return hs, state
