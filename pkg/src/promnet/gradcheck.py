"""64-bit finite-difference verification suite.

Each check returns the maximum relative error between analytic adjoints and
central differences; :data:`CHECKS` pairs it with its pass threshold.
Parameters of composite models are jittered away from zero first so that no
ReLU/max-pool input sits exactly on a kink, where the analytic subgradient (0)
and the central difference (half slope) legitimately disagree.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .convlstm import ConvLSTMCell, convlstm_sequence, zero_state
from .model import FcLstm, FcLstmConfig, PromNet, PromNetConfig, SequenceModel
from .tape import Node, Tape

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    # ReLU inputs bounded away from the kink by far more than the FD step
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def check_conv2d(eps=1e-4):
    r = _rng(1)
    return T.grad_check("conv2d", [r.standard_normal((1, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)),
                                   r.standard_normal(3)], eps=eps, stride=1, padding=1)


def check_conv2d_strided(eps=1e-4):
    r = _rng(2)
    return T.grad_check("conv2d", [r.standard_normal((2, 2, 8, 8)), r.standard_normal((3, 2, 5, 5)),
                                   r.standard_normal(3)], eps=eps, stride=2, padding=2)


def check_conv2d_transpose(eps=1e-4):
    r = _rng(3)
    return T.grad_check("conv2d_transpose", [r.standard_normal((2, 3, 4, 4)), r.standard_normal((3, 2, 4, 4)),
                                             r.standard_normal(2)], eps=eps, stride=2, padding=1)


def check_maxpool2d(eps=1e-4):
    r = _rng(4)
    # distinct values spaced well beyond eps keep the argmax stable under perturbation
    x = r.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.01
    return T.grad_check("maxpool2d", [x], eps=eps)


def check_batchnorm(eps=1e-4):
    r = _rng(5)
    return T.grad_check("batchnorm", [r.standard_normal((3, 2, 4, 4)), r.standard_normal(2), r.standard_normal(2)],
                        eps=eps, running=T.RunningStats.fresh(2, np.float64), mode="train")


def check_batchnorm_infer(eps=1e-4):
    r = _rng(6)
    running = T.RunningStats(r.standard_normal(2), r.uniform(0.5, 2.0, 2))
    return T.grad_check("batchnorm", [r.standard_normal((3, 2, 4, 4)), r.standard_normal(2), r.standard_normal(2)],
                        eps=eps, running=running, mode="infer")


def check_relu(eps=1e-4):
    return T.grad_check("relu", [_away_from_zero(_rng(7), (2, 3, 4, 4), margin=10 * eps)], eps=eps)


def check_sigmoid(eps=1e-4):
    return T.grad_check("sigmoid", [_rng(8).standard_normal((2, 3, 4))], eps=eps)


def check_tanh(eps=1e-4):
    return T.grad_check("tanh", [_rng(9).standard_normal((2, 3, 4))], eps=eps)


def check_add(eps=1e-4):
    r = _rng(10)
    return T.grad_check("add", [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))], eps=eps)


def check_hadamard(eps=1e-4):
    r = _rng(11)
    return T.grad_check("hadamard", [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))], eps=eps)


def check_linear(eps=1e-4):
    r = _rng(12)
    return T.grad_check("linear", [r.standard_normal((3, 5)), r.standard_normal((5, 4)), r.standard_normal(4)], eps=eps)


def check_mse(eps=1e-4):
    r = _rng(13)
    return T.grad_check("mse_loss", [r.standard_normal((2, 1, 4, 4)), r.standard_normal((2, 1, 4, 4))], eps=eps)


def check_lstm_gates(eps=1e-4):
    r = _rng(14)
    return T.grad_check("lstm_gates", [r.standard_normal((2, 8, 3, 3)), r.standard_normal((2, 2, 3, 3)),
                                       r.standard_normal((3, 2))], eps=eps)


def _check_convlstm(steps: int, eps: float, stride: int = 1, peephole: bool = False) -> float:
    r = _rng(20 + steps + 10 * stride)
    cell = ConvLSTMCell.initialized(2, 3, r, kernel=3, input_stride=stride, peephole=peephole)
    for node in cell.parameters().values():
        node.value += 0.1 * r.standard_normal(node.shape)
    xs = [r.standard_normal((2, 2, 4, 4)) for _ in range(steps)]
    c0 = r.standard_normal((2, 3, 4 // stride, 4 // stride))
    up = [r.standard_normal((2, 3, 4 // stride, 4 // stride)) for _ in range(steps)]
    x_nodes = [Node(x) for x in xs]

    def run(tape):
        init = zero_state(cell, 2, 4, 4)
        init.c.value[...] = c0
        hs, final = convlstm_sequence(cell, x_nodes, init, tape)
        return hs

    tape = Tape()
    for n in cell.parameters().values():
        n.grad = None
    hs = run(tape)
    tape.backward([(h, u) for h, u in zip(hs, up)])
    analytic = {k: n.grad for k, n in cell.parameters().items()}
    analytic.update({f"x{t}": x_nodes[t].grad for t in range(steps)})

    def f():
        return float(sum(np.sum(h.value * u) for h, u in zip(run(Tape(record=False)), up)))

    worst = 0.0
    targets = {**cell.parameters(), **{f"x{t}": x_nodes[t] for t in range(steps)}}
    for name, node in targets.items():
        worst = max(worst, T.relative_error(analytic[name], T.numeric_gradient(f, node.value, eps)))
    return worst


def check_convlstm_step(eps=1e-4):
    return _check_convlstm(1, eps)


def check_convlstm_bptt(eps=1e-4):
    return _check_convlstm(3, eps)


def check_convlstm_strided(eps=1e-4):
    return _check_convlstm(2, eps, stride=2, peephole=True)


def jitter(model: SequenceModel, rng: np.random.Generator, scale: float = 0.1) -> SequenceModel:
    for node in model.params.values():
        node.value += scale * rng.standard_normal(node.shape)
    return model


def model_gradient_error(model: SequenceModel, inputs, targets, teacher_forcing=False, eps=1e-4,
                         names: list[str] | None = None, max_entries: int | None = None,
                         seed: int = 0) -> dict[str, float]:
    """Per-parameter max relative error of ``forward_train`` gradients.

    ``max_entries`` caps the probed coordinates per tensor; the sample is drawn
    without replacement from a seeded generator, so reruns probe the same entries.
    """
    _, grads = model.forward_train(inputs, targets, teacher_forcing)
    grads = {k: v.copy() for k, v in grads.items()}

    def f():
        return model.forward_train(inputs, targets, teacher_forcing, backward=False)[0]

    rng = np.random.default_rng(seed)
    out = {}
    for name in names or list(model.params):
        value = model.params[name].value
        if max_entries is None or value.size <= max_entries:
            out[name] = T.relative_error(grads[name], T.numeric_gradient(f, value, eps))
        else:
            idx = np.sort(rng.choice(value.size, max_entries, replace=False))
            out[name] = T.relative_error(grads[name].reshape(-1)[idx], T.numeric_gradient(f, value, eps, idx))
    return out


def tiny_promnet(seed: int = 3) -> PromNet:
    cfg = PromNetConfig(input_h=16, input_w=16, scale="1/8", t_in=2, t_out=2, seed=seed)
    return jitter(PromNet(cfg), _rng(seed))


def check_promnet_end_to_end(eps=1e-6, teacher_forcing=False):
    # A bias step of 1e-4 shifts hundreds of ReLU inputs at once; 1e-6 keeps them on one side of the kink.
    net = tiny_promnet()
    r = _rng(31)
    x = r.random((2, 2, 1, 16, 16))
    y = r.random((2, 2, 1, 16, 16))
    return max(model_gradient_error(net, x, y, teacher_forcing, eps, max_entries=64).values())


def check_fclstm_end_to_end(eps=1e-4):
    cfg = FcLstmConfig(input_h=8, input_w=8, hidden=6, layers=2, t_in=2, t_out=2, seed=4)
    net = jitter(FcLstm(cfg), _rng(4))
    r = _rng(41)
    x = r.random((2, 2, 1, 8, 8))
    y = r.random((2, 2, 1, 8, 8))
    return max(model_gradient_error(net, x, y, False, eps).values())


@dataclass(frozen=True)
class Check:
    fn: Callable[..., float]
    tol: float
    target: str = ""        # primitive whose adjoint the check exercises


CHECKS: dict[str, Check] = {
    "conv2d": Check(check_conv2d, PRIMITIVE_TOL, "conv2d"),
    "conv2d_strided": Check(check_conv2d_strided, PRIMITIVE_TOL, "conv2d"),
    "conv2d_transpose": Check(check_conv2d_transpose, PRIMITIVE_TOL, "conv2d_transpose"),
    "maxpool2d": Check(check_maxpool2d, PRIMITIVE_TOL, "maxpool2d"),
    "batchnorm": Check(check_batchnorm, PRIMITIVE_TOL, "batchnorm"),
    "batchnorm_infer": Check(check_batchnorm_infer, PRIMITIVE_TOL, "batchnorm"),
    "relu": Check(check_relu, 1e-6, "relu"),
    "sigmoid": Check(check_sigmoid, PRIMITIVE_TOL, "sigmoid"),
    "tanh": Check(check_tanh, PRIMITIVE_TOL, "tanh"),
    "add": Check(check_add, 1e-8, "add"),
    "hadamard": Check(check_hadamard, PRIMITIVE_TOL, "hadamard"),
    "linear": Check(check_linear, PRIMITIVE_TOL, "linear"),
    "mse_loss": Check(check_mse, 1e-6, "mse_loss"),
    "lstm_gates": Check(check_lstm_gates, PRIMITIVE_TOL, "lstm_gates"),
    "convlstm_step": Check(check_convlstm_step, PRIMITIVE_TOL, "lstm_gates"),
    "convlstm_bptt": Check(check_convlstm_bptt, PRIMITIVE_TOL, "lstm_gates"),
    "convlstm_strided": Check(check_convlstm_strided, PRIMITIVE_TOL, "lstm_gates"),
    "fclstm_end_to_end": Check(check_fclstm_end_to_end, END_TO_END_TOL, "linear"),
    "promnet_end_to_end": Check(check_promnet_end_to_end, END_TO_END_TOL, "conv2d"),
}


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tol


def perturbed_adjoint(name: str, factor: float = 1.01):
    """Context manager scaling one primitive's adjoint, to prove the suite is sensitive."""
    import contextlib

    @contextlib.contextmanager
    def cm():
        prim = T.PRIMITIVES[name]

        def bad_backward(dout, cache):
            grads = prim.backward(dout, cache)
            return tuple(None if g is None else g * factor for g in grads)

        T.PRIMITIVES[name] = T.Primitive(prim.forward, bad_backward)
        try:
            yield
        finally:
            T.PRIMITIVES[name] = prim

    return cm()


def run_checks(only: list[str] | None = None, perturb: str | None = None) -> list[CheckResult]:
    names = only or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}; available: {', '.join(CHECKS)}")
    results = []
    with T.precision("float64"):
        for name in names:
            check = CHECKS[name]
            t0 = time.perf_counter()
            if perturb:
                with perturbed_adjoint(perturb):
                    err = check.fn()
            else:
                err = check.fn()
            results.append(CheckResult(name, err, check.tol, time.perf_counter() - t0))
    return results
