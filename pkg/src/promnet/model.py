"""PROM-Net encoder-decoder and the fully connected LSTM baseline.

Both models share the :class:`SequenceModel` surface: an ordered parameter
table of :class:`~promnet.tape.Node` leaves, ``predict_sequence`` for
inference (batchnorm in infer mode) and ``forward_train`` returning the loss
together with gradients for every parameter.

Frame tensors are laid out ``[T, N, 1, H, W]`` with pixels in [0, 1].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .convlstm import ConvLSTMCell, ConvLSTMState, convlstm_step, glorot_uniform, zero_state
from .tape import Node, Tape


def parse_scale(scale) -> Fraction:
    value = Fraction(str(scale)) if not isinstance(scale, Fraction) else scale
    if value <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return value


@dataclass
class PromNetConfig:
    input_h: int = 64
    input_w: int = 64
    input_channels: int = 1
    conv1_filters: int = 8
    conv1_kernel: int = 3
    pool: int = 2
    conv2_filters: int = 16
    conv2_kernel: int = 5
    conv2_stride: int = 2
    enc_lstm: tuple[int, int] = (16, 32)
    lstm_kernel: int = 5
    dec_lstm: tuple[int, int, int] = (32, 16, 8)
    deconv_kernel: int = 4
    deconv_stride: int = 2
    deconv_padding: int = 1
    out_kernel: int = 3
    t_in: int = 10
    t_out: int = 10
    scale: str = "1"
    peephole: bool = False
    output_activation: str = "sigmoid"
    seed: int = 0

    def __post_init__(self):
        self.enc_lstm = tuple(self.enc_lstm)
        self.dec_lstm = tuple(self.dec_lstm)
        self.scale = str(parse_scale(self.scale))
        if self.input_h % 8 or self.input_w % 8:
            raise ValueError(f"input {self.input_h}x{self.input_w} must be divisible by 8")
        if self.input_channels != 1:
            # RGB hook: the layer tables take any channel count, the data pipeline is grayscale only.
            raise ValueError("only grayscale input (input_channels=1) is supported")
        if self.output_activation not in ("sigmoid", "relu_clamp"):
            raise ValueError(f"unknown output_activation {self.output_activation!r}")
        if self.t_in < 1 or self.t_out < 1:
            raise ValueError("t_in and t_out must be positive")

    def ch(self, channels: int) -> int:
        return max(1, round(channels * parse_scale(self.scale)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FcLstmConfig:
    input_h: int = 64
    input_w: int = 64
    hidden: int = 1024
    layers: int = 2
    t_in: int = 10
    t_out: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1:
            raise ValueError("hidden size and layer count must be >= 1")

    @property
    def input_size(self) -> int:
        return self.input_h * self.input_w

    def to_dict(self) -> dict:
        return asdict(self)


def _check_frames(frames: np.ndarray, t: int, h: int, w: int, what: str) -> None:
    if frames.ndim != 5 or frames.shape[2] != 1 or frames.shape[3:] != (h, w):
        raise T.ShapeError(f"{what}: expected [T,N,1,{h},{w}] frames, got {frames.shape}")
    if frames.shape[0] != t:
        raise T.ShapeError(f"{what}: expected exactly {t} frames, got {frames.shape[0]}")


class SequenceModel:
    kind: str = ""
    config: PromNetConfig | FcLstmConfig
    params: dict[str, Node]
    buffers: dict[str, T.RunningStats]

    def parameter_count(self) -> int:
        return sum(n.value.size for n in self.params.values())

    def zero_grad(self) -> None:
        for n in self.params.values():
            n.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in self.params.items()}

    def zero_(self) -> "SequenceModel":
        """Set every parameter to zero (used by closed-form checks)."""
        for n in self.params.values():
            n.value[...] = 0
        return self

    def _dtype(self):
        return next(iter(self.params.values())).value.dtype

    def _unroll(self, inputs, targets, mode, teacher, tape) -> list[Node]:
        raise NotImplementedError

    def predict_sequence(self, frames: np.ndarray) -> np.ndarray:
        """Predict ``t_out`` frames after the ``t_in`` given ones (infer mode)."""
        cfg = self.config
        frames = np.asarray(frames, dtype=self._dtype())
        _check_frames(frames, cfg.t_in, cfg.input_h, cfg.input_w, "predict_sequence")
        preds = self._unroll(frames, None, "infer", [False] * cfg.t_out, Tape(record=False))
        return np.stack([p.value for p in preds])

    def forward_train(self, inputs: np.ndarray, targets: np.ndarray,
                      teacher_forcing: bool | Sequence[bool] = False,
                      backward: bool = True) -> tuple[float, dict[str, np.ndarray]]:
        """Mean per-frame MSE over the horizon plus gradients by BPTT."""
        cfg = self.config
        dtype = self._dtype()
        inputs = np.asarray(inputs, dtype=dtype)
        targets = np.asarray(targets, dtype=dtype)
        _check_frames(inputs, cfg.t_in, cfg.input_h, cfg.input_w, "forward_train inputs")
        _check_frames(targets, cfg.t_out, cfg.input_h, cfg.input_w, "forward_train targets")
        if inputs.shape[1] != targets.shape[1]:
            raise T.ShapeError(f"batch mismatch: inputs {inputs.shape[1]} vs targets {targets.shape[1]}")
        if isinstance(teacher_forcing, (bool, np.bool_)):
            teacher = [bool(teacher_forcing)] * cfg.t_out
        else:
            teacher = [bool(t) for t in teacher_forcing]
            if len(teacher) != cfg.t_out:
                raise ValueError(f"teacher_forcing needs {cfg.t_out} flags, got {len(teacher)}")
        tape = Tape(record=backward)
        self.zero_grad()
        preds = self._unroll(inputs, targets, "train", teacher, tape)
        losses = [tape.mse(p, Node(targets[k])) for k, p in enumerate(preds)]
        loss = float(np.mean([l.value for l in losses]))
        self.last_predictions = np.stack([p.value for p in preds])
        if not backward:
            return loss, {}
        tape.backward([(l, 1.0 / len(losses)) for l in losses])
        return loss, self.grads()


# ---------------------------------------------------------------------------
# PROM-Net


def promnet_shapes(cfg: PromNetConfig) -> dict[str, tuple]:
    """Ordered trainable-parameter shapes for a configuration."""
    c1, c2 = cfg.ch(cfg.conv1_filters), cfg.ch(cfg.conv2_filters)
    e1, e2 = (cfg.ch(c) for c in cfg.enc_lstm)
    d1, d2, d3 = (cfg.ch(c) for c in cfg.dec_lstm)
    k, kd = cfg.lstm_kernel, cfg.deconv_kernel
    shapes: dict[str, tuple] = {}

    def conv(name, cout, cin, kk):
        shapes[f"{name}.w"] = (cout, cin, kk, kk)
        shapes[f"{name}.b"] = (cout,)

    def deconv(name, cin, cout):
        shapes[f"{name}.w"] = (cin, cout, kd, kd)
        shapes[f"{name}.b"] = (cout,)

    def lstm(name, cin, cout):
        shapes[f"{name}.w_x"] = (4 * cout, cin, k, k)
        shapes[f"{name}.w_h"] = (4 * cout, cout, k, k)
        shapes[f"{name}.bias"] = (4 * cout,)
        if cfg.peephole:
            shapes[f"{name}.peep"] = (3, cout)

    def bn(name, c):
        shapes[f"{name}.gamma"] = (c,)
        shapes[f"{name}.beta"] = (c,)

    conv("enc_conv1", c1, cfg.input_channels, cfg.conv1_kernel)
    conv("enc_conv2", c2, c1, cfg.conv2_kernel)
    lstm("enc_lstm1", c2, e1)
    bn("enc_bn1", e1)
    lstm("enc_lstm2", e1, e2)
    bn("enc_bn2", e2)
    lstm("dec_lstm1", e2, d1)
    bn("dec_bn1", d1)
    deconv("deconv1", d1, e1)
    lstm("dec_lstm2", e1, d2)
    bn("dec_bn2", d2)
    deconv("deconv2", d2, c1)
    lstm("dec_lstm3", c1, d3)
    bn("dec_bn3", d3)
    deconv("deconv3", d3, c1)
    conv("out_conv", cfg.input_channels, c1, cfg.out_kernel)
    return shapes


def bn_key(layer: str, step: int) -> str:
    return f"{layer}@{step:02d}"


def param_count(config: PromNetConfig | FcLstmConfig) -> int:
    shapes = promnet_shapes(config) if isinstance(config, PromNetConfig) else fclstm_shapes(config)
    return int(sum(np.prod(s) for s in shapes.values()))


@dataclass
class EncoderStates:
    lstm1: ConvLSTMState
    lstm2: ConvLSTMState


@dataclass
class Skips:
    s1: Node
    s2: Node


class PromNet(SequenceModel):
    kind = "promnet"

    def __init__(self, config: PromNetConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config = config or PromNetConfig()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        dtype = T.get_dtype()
        self.params = {}
        for name, shape in promnet_shapes(config).items():
            self.params[name] = Node(self._init_param(name, shape, rng).astype(dtype))
        # population statistics are kept per time step: activations right after a zero state look
        # nothing like those ten steps later, so one average would fit neither
        self.buffers = {}
        steps = {"enc": config.t_in + config.t_out - 1, "dec": config.t_out}
        for name in self.params:
            if name.endswith(".gamma"):
                layer = name[: -len(".gamma")]
                for t in range(steps[layer[:3]]):
                    self.buffers[bn_key(layer, t)] = T.RunningStats.fresh(self.params[name].value.size, dtype)
        k = config.lstm_kernel
        self.cells = {}
        for name, stride in (("enc_lstm1", 1), ("enc_lstm2", 2), ("dec_lstm1", 1), ("dec_lstm2", 1), ("dec_lstm3", 1)):
            wx = self.params[f"{name}.w_x"]
            self.cells[name] = ConvLSTMCell(
                wx.shape[1], wx.shape[0] // 4, k, stride, config.peephole,
                w_x=wx, w_h=self.params[f"{name}.w_h"], bias=self.params[f"{name}.bias"],
                peep=self.params.get(f"{name}.peep"),
            )

    @staticmethod
    def _init_param(name: str, shape: tuple, rng) -> np.ndarray:
        suffix = name.rsplit(".", 1)[1]
        if suffix == "gamma":
            return np.ones(shape)
        if suffix in ("beta", "b", "peep"):
            return np.zeros(shape)
        if suffix == "bias":
            b = np.zeros(shape)
            c = shape[0] // 4
            b[c:2 * c] = 1.0  # forget gate
            return b
        if suffix in ("w_x", "w_h"):
            cout = shape[0] // 4
            k2 = shape[2] * shape[3]
            return glorot_uniform(rng, shape, shape[1] * k2, cout * k2)
        k2 = shape[2] * shape[3]
        if "deconv" in name:
            return glorot_uniform(rng, shape, shape[0] * k2, shape[1] * k2)
        return glorot_uniform(rng, shape, shape[1] * k2, shape[0] * k2)

    # building blocks --------------------------------------------------------

    def _conv(self, tape, name, x, stride=1, padding=None):
        w = self.params[f"{name}.w"]
        if padding is None:
            padding = (w.shape[2] - 1) // 2
        return tape.conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=padding)

    def _bn(self, tape, name, x, mode, step):
        key = bn_key(name, step)
        if key not in self.buffers:
            raise ValueError(f"{name}: no running statistics for step {step}")
        return tape.batchnorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.buffers[key], mode)

    def _deconv(self, tape, name, x):
        cfg = self.config
        return tape.conv2d_transpose(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                                     stride=cfg.deconv_stride, padding=cfg.deconv_padding)

    def zero_encoder_states(self, batch: int) -> EncoderStates:
        cfg = self.config
        q = cfg.input_h // 4, cfg.input_w // 4
        return EncoderStates(zero_state(self.cells["enc_lstm1"], batch, *q),
                             zero_state(self.cells["enc_lstm2"], batch, *q))

    def init_decoder_states(self, enc: EncoderStates) -> list[ConvLSTMState]:
        n = enc.lstm2.h.shape[0]
        cfg = self.config
        return [
            enc.lstm2,
            zero_state(self.cells["dec_lstm2"], n, cfg.input_h // 4, cfg.input_w // 4),
            zero_state(self.cells["dec_lstm3"], n, cfg.input_h // 2, cfg.input_w // 2),
        ]

    def encode_step(self, frame, enc_states: EncoderStates | None = None, tape: Tape | None = None,
                    mode: str = "infer", step: int = 0) -> tuple[Node, Skips, EncoderStates]:
        """conv1-relu-pool-conv2-relu-lstm1-bn-lstm2-bn for one frame.

        Returns the latent map, the skip sources (post-pool map and
        normalized first-LSTM output) and the advanced encoder states.
        ``step`` counts encoded frames (inputs, then re-encoded outputs) and
        selects the batchnorm population statistics.
        """
        cfg = self.config
        tape = Tape(record=False) if tape is None else tape
        x = frame if isinstance(frame, Node) else Node(np.asarray(frame, dtype=self._dtype()))
        if x.value.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_h, cfg.input_w):
            raise T.ShapeError(f"encode_step: frame {x.shape} does not match config "
                               f"[N,{cfg.input_channels},{cfg.input_h},{cfg.input_w}]")
        if enc_states is None:
            enc_states = self.zero_encoder_states(x.shape[0])
        a = tape.relu(self._conv(tape, "enc_conv1", x))
        s1 = tape.maxpool2d(a, window=cfg.pool, stride=cfg.pool)
        a = tape.relu(self._conv(tape, "enc_conv2", s1, stride=cfg.conv2_stride))
        h1, st1 = convlstm_step(self.cells["enc_lstm1"], a, enc_states.lstm1, tape)
        s2 = self._bn(tape, "enc_bn1", h1, mode, step)
        h2, st2 = convlstm_step(self.cells["enc_lstm2"], s2, enc_states.lstm2, tape)
        latent = self._bn(tape, "enc_bn2", h2, mode, step)
        return latent, Skips(s1, s2), EncoderStates(st1, st2)

    def decode_step(self, dec_states: list[ConvLSTMState] | None, latent: Node, skips: Skips,
                    tape: Tape | None = None, mode: str = "infer", step: int = 0) -> tuple[Node, list[ConvLSTMState]]:
        """[ConvLSTM-BN-deconv] x3 with additive skips, then the output head."""
        if dec_states is None or len(dec_states) != 3 or any(s is None for s in dec_states):
            raise ValueError("decode_step: decoder states are not initialized")
        tape = Tape(record=False) if tape is None else tape
        h, st1 = convlstm_step(self.cells["dec_lstm1"], latent, dec_states[0], tape)
        a = tape.relu(self._deconv(tape, "deconv1", self._bn(tape, "dec_bn1", h, mode, step)))
        a = tape.add(a, skips.s2)
        h, st2 = convlstm_step(self.cells["dec_lstm2"], a, dec_states[1], tape)
        a = tape.relu(self._deconv(tape, "deconv2", self._bn(tape, "dec_bn2", h, mode, step)))
        a = tape.add(a, skips.s1)
        h, st3 = convlstm_step(self.cells["dec_lstm3"], a, dec_states[2], tape)
        a = tape.relu(self._deconv(tape, "deconv3", self._bn(tape, "dec_bn3", h, mode, step)))
        y = self._conv(tape, "out_conv", a)
        y = tape.sigmoid(y) if self.config.output_activation == "sigmoid" else tape.clamp01(tape.relu(y))
        return y, [st1, st2, st3]

    def _unroll(self, inputs, targets, mode, teacher, tape) -> list[Node]:
        cfg = self.config
        enc = self.zero_encoder_states(inputs.shape[1])
        for t in range(cfg.t_in):
            latent, skips, enc = self.encode_step(inputs[t], enc, tape, mode, t)
        dec = self.init_decoder_states(enc)
        preds = []
        for k in range(cfg.t_out):
            y, dec = self.decode_step(dec, latent, skips, tape, mode, k)
            preds.append(y)
            if k + 1 < cfg.t_out:
                feed = Node(targets[k]) if teacher[k] else y
                latent, skips, enc = self.encode_step(feed, enc, tape, mode, cfg.t_in + k)
        return preds

    def layer_shapes(self, batch: int = 1) -> list[tuple[str, tuple]]:
        """Feature-map shapes along the encoder-decoder chain for one frame."""
        cfg = self.config
        chain = []
        x = Node(np.zeros((batch, cfg.input_channels, cfg.input_h, cfg.input_w), self._dtype()))
        chain.append(("input", x.shape))
        tape = _ShapeTape(chain)
        latent, skips, enc = self.encode_step(x, None, tape, "infer")
        dec = self.init_decoder_states(enc)
        self.decode_step(dec, latent, skips, tape, "infer")
        return chain


class _ShapeTape(Tape):
    """Non-recording tape that logs the output shape of each named layer."""

    def __init__(self, log: list):
        super().__init__(record=False)
        self.log = log
        self._conv_names = iter(["enc_conv1", "enc_conv2", "enc_lstm1", "enc_lstm2",
                                 "dec_lstm1", "dec_lstm2", "dec_lstm3", "out_conv"])
        self._deconv_names = iter(["deconv1", "deconv2", "deconv3"])

    def maxpool2d(self, x, window=2, stride=2):
        out = super().maxpool2d(x, window, stride)
        self.log.append(("pool", out.shape))
        return out

    def conv2d(self, x, w, b, stride=1, padding=0):
        out = super().conv2d(x, w, b, stride, padding)
        if b is not None:  # hidden-path ConvLSTM convolutions carry no bias
            name = next(self._conv_names)
            channels = out.shape[1] // 4 if name.startswith(("enc_lstm", "dec_lstm")) else out.shape[1]
            self.log.append((name, (out.shape[0], channels) + out.shape[2:]))
        return out

    def conv2d_transpose(self, x, w, b, stride=2, padding=1):
        out = super().conv2d_transpose(x, w, b, stride, padding)
        self.log.append((next(self._deconv_names), out.shape))
        return out


# ---------------------------------------------------------------------------
# fully connected LSTM baseline


def fclstm_shapes(cfg: FcLstmConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    d, h = cfg.input_size, cfg.hidden
    for layer in range(cfg.layers):
        cin = d if layer == 0 else h
        shapes[f"lstm{layer}.w_x"] = (cin, 4 * h)
        shapes[f"lstm{layer}.w_h"] = (h, 4 * h)
        shapes[f"lstm{layer}.bias"] = (4 * h,)
    shapes["head.w"] = (h, d)
    shapes["head.b"] = (d,)
    return shapes


class FcLstm(SequenceModel):
    """Stacked LSTM over flattened frames with a linear-sigmoid frame head."""

    kind = "fclstm"

    def __init__(self, config: FcLstmConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config = config or FcLstmConfig()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        dtype = T.get_dtype()
        self.params = {}
        self.buffers = {}
        for name, shape in fclstm_shapes(config).items():
            if name.endswith("bias"):
                v = np.zeros(shape)
                v[shape[0] // 4: shape[0] // 2] = 1.0
            elif name.endswith(".b"):
                v = np.zeros(shape)
            else:
                fan_out = shape[1] // 4 if "lstm" in name else shape[1]
                v = glorot_uniform(rng, shape, shape[0], fan_out)
            self.params[name] = Node(np.asarray(v, dtype=dtype))
        self._zero_bias = Node(np.zeros(4 * config.hidden, dtype))

    def _step(self, tape, x: Node, states: list):
        new = []
        inp = x
        n = x.shape[0]
        hd = self.config.hidden
        for layer, (h, c) in enumerate(states):
            z = tape.add(tape.linear(inp, self.params[f"lstm{layer}.w_x"], self.params[f"lstm{layer}.bias"]),
                         tape.linear(h, self.params[f"lstm{layer}.w_h"], self._zero_bias))
            z = tape.reshape(z, (n, 4 * hd, 1, 1))
            c4 = tape.reshape(c, (n, hd, 1, 1))
            h4, c4 = tape.lstm_gates(z, c4)
            h2, c2 = tape.reshape(h4, (n, hd)), tape.reshape(c4, (n, hd))
            new.append((h2, c2))
            inp = h2
        return inp, new

    def _head(self, tape, h: Node) -> Node:
        cfg = self.config
        y = tape.sigmoid(tape.linear(h, self.params["head.w"], self.params["head.b"]))
        return tape.reshape(y, (h.shape[0], 1, cfg.input_h, cfg.input_w))

    def _unroll(self, inputs, targets, mode, teacher, tape) -> list[Node]:
        cfg = self.config
        n = inputs.shape[1]
        dtype = self._dtype()
        states = [(Node(np.zeros((n, cfg.hidden), dtype)), Node(np.zeros((n, cfg.hidden), dtype)))
                  for _ in range(cfg.layers)]
        for t in range(cfg.t_in):
            top, states = self._step(tape, Node(inputs[t].reshape(n, -1)), states)
        preds = []
        for k in range(cfg.t_out):
            y = self._head(tape, top)
            preds.append(y)
            if k + 1 < cfg.t_out:
                feed = Node(targets[k].reshape(n, -1)) if teacher[k] else tape.reshape(y, (n, cfg.input_size))
                top, states = self._step(tape, feed, states)
        return preds


def fc_lstm_predict(baseline: FcLstm, frames: np.ndarray) -> np.ndarray:
    return baseline.predict_sequence(frames)


def predict_sequence(net: SequenceModel, frames: np.ndarray) -> np.ndarray:
    return net.predict_sequence(frames)


def build_model(kind: str, config: dict | None = None):
    config = dict(config or {})
    if kind == "promnet":
        return PromNet(PromNetConfig(**config))
    if kind == "fclstm":
        return FcLstm(FcLstmConfig(**config))
    raise ValueError(f"unknown model kind {kind!r}; expected 'promnet' or 'fclstm'")
