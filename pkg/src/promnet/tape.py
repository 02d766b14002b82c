"""Reverse-sweep composition of the hand-written primitive adjoints.

A :class:`Tape` records each primitive application in execution order; the
backward sweep replays the recorded ``*_backward`` functions in reverse and
sums gradient contributions per :class:`Node`. Unrolling over time (BPTT)
falls out of recording every step on the same tape.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

from . import tensor as T


class Node:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    def accumulate(self, g) -> None:
        if g is None:
            return
        # Adjoints never mutate their arguments, so sharing the first array is safe.
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self._ops: list[tuple] = []

    def apply(self, prim: T.Primitive, *inputs: Node | None, **kwargs):
        values = [None if n is None else n.value for n in inputs]
        out, cache = prim.forward(*values, **kwargs)
        if isinstance(out, tuple):
            nodes = tuple(Node(o) for o in out)
        else:
            nodes = Node(out)
        if self.record:
            self._ops.append((prim.backward, cache, inputs, nodes))
        return nodes

    def backward(self, seeds: dict[Node, object] | Iterable[tuple[Node, object]]) -> None:
        items = seeds.items() if isinstance(seeds, dict) else seeds
        for node, g in items:
            node.accumulate(g)
        for backward, cache, inputs, outs in reversed(self._ops):
            if isinstance(outs, tuple):
                douts = tuple(o.grad for o in outs)
                if all(d is None for d in douts):
                    continue
                grads = backward(douts, cache)
            else:
                if outs.grad is None:
                    continue
                grads = backward(outs.grad, cache)
            for node, g in zip(inputs, grads):
                if node is not None:
                    node.accumulate(g)
        self._ops.clear()

    # convenience wrappers --------------------------------------------------

    def conv2d(self, x: Node, w: Node, b: Node | None, stride: int = 1, padding: int = 0) -> Node:
        return self.apply(T.PRIMITIVES["conv2d"], x, w, b, stride=stride, padding=padding)

    def conv2d_transpose(self, x: Node, w: Node, b: Node | None, stride: int = 2, padding: int = 1) -> Node:
        return self.apply(T.PRIMITIVES["conv2d_transpose"], x, w, b, stride=stride, padding=padding)

    def maxpool2d(self, x: Node, window: int = 2, stride: int = 2) -> Node:
        return self.apply(T.PRIMITIVES["maxpool2d"], x, window=window, stride=stride)

    def batchnorm(self, x: Node, gamma: Node, beta: Node, running: T.RunningStats, mode: str) -> Node:
        return self.apply(T.PRIMITIVES["batchnorm"], x, gamma, beta, running=running, mode=mode)

    def relu(self, x: Node) -> Node:
        return self.apply(T.PRIMITIVES["relu"], x)

    def sigmoid(self, x: Node) -> Node:
        return self.apply(T.PRIMITIVES["sigmoid"], x)

    def add(self, a: Node, b: Node) -> Node:
        return self.apply(T.PRIMITIVES["add"], a, b)

    def linear(self, x: Node, w: Node, b: Node) -> Node:
        return self.apply(T.PRIMITIVES["linear"], x, w, b)

    def lstm_gates(self, z: Node, c_prev: Node, peep: Node | None = None) -> tuple[Node, Node]:
        return self.apply(T.PRIMITIVES["lstm_gates"], z, c_prev, peep)

    def reshape(self, x: Node, shape: tuple) -> Node:
        return self.apply(T.PRIMITIVES["reshape"], x, shape=shape)

    def clamp01(self, x: Node) -> Node:
        return self.apply(T.PRIMITIVES["clamp01"], x)

    def mse(self, pred: Node, target: Node) -> Node:
        return self.apply(T.PRIMITIVES["mse_loss"], pred, target)


def const(value) -> Node:
    return Node(value)

