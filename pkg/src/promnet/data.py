"""Synthetic moving-robot sequences, the ``PRDS`` dataset container and PGM I/O.

Sequences show a small wheeled sprite travelling along one of four path
families (straight, arc, incline left-to-right, incline right-to-left) at
one of three depths. Speed and heading are perturbed by a proportional
tracking loop with noisy gains, so repeated runs towards the same goal give
neighbouring but distinct trajectories.

All randomness comes from :class:`XorShift64Star` so that generated datasets
are byte-identical across platforms for a fixed seed.
"""
from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

FAMILIES = ("straight", "arc", "incline_lr", "incline_rl")
DEPTHS = ("near", "mid", "far")
DEPTH_SCALE = {"near": 1.5, "mid": 1.0, "far": 0.6}
# vertical scene position of the path baseline for each depth (y grows downwards)
DEPTH_ROW = {"near": 0.70, "mid": 0.52, "far": 0.36}

# Goal points of the four-target tracking runs, (forward, lateral) metres from the observer.
TRACKING_TARGETS = ((1.0, 0.8), (1.5, -0.8), (2.0, -0.8), (0.5, -0.5))

_MASK64 = (1 << 64) - 1


class XorShift64Star:
    """xorshift64* generator.

    Update: ``x ^= x >> 12; x ^= x << 25; x ^= x >> 27`` (mod 2**64), output
    ``x * 0x2545F4914F6CDD1D`` (mod 2**64). A zero seed is remapped because
    zero is a fixed point of the shift register.
    """

    MULT = 0x2545F4914F6CDD1D

    def __init__(self, seed: int):
        self.state = self._mix(seed)

    @staticmethod
    def _mix(seed: int) -> int:
        # splitmix64 finalizer spreads small consecutive seeds over the state space
        z = (seed + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
        return z or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & _MASK64

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self) -> float:
        # Box-Muller, one variate per call keeps the stream position simple.
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        return self.next_u64() % n

    def shuffle(self, items: list) -> list:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def derive_seed(base: int, *parts: int) -> int:
    rng = XorShift64Star(base)
    for p in parts:
        rng.state ^= XorShift64Star._mix(p)
        rng.next_u64()
    return rng.next_u64() >> 1


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectorySpec:
    family: str = "straight"
    depth: str = "mid"
    goal: tuple[float, float] | None = None
    start: tuple[float, float] | None = None
    gain_noise: float = 0.0
    heading_noise: float = 0.0
    bulge: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown trajectory family {self.family!r}; expected one of {FAMILIES}")
        if self.depth not in DEPTHS:
            raise ValueError(f"unknown depth {self.depth!r}; expected one of {DEPTHS}")
        if self.gain_noise < 0 or self.heading_noise < 0:
            raise ValueError("jitter standard deviations must be non-negative")
        default_start, default_goal = canonical_endpoints(self.family, self.depth)
        self.start = tuple(self.start) if self.start is not None else default_start
        self.goal = tuple(self.goal) if self.goal is not None else default_goal
        for name, (x, y) in (("start", self.start), ("goal", self.goal)):
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"{name} {(x, y)} outside the unit scene")


def canonical_endpoints(family: str, depth: str) -> tuple[tuple[float, float], tuple[float, float]]:
    row = DEPTH_ROW[depth]
    if family == "straight":
        return (0.1, row), (0.9, row)
    if family == "incline_lr":
        return (0.1, row - 0.15), (0.9, row + 0.15)
    if family == "incline_rl":
        return (0.9, row - 0.15), (0.1, row + 0.15)
    return (0.1, row + 0.1), (0.9, row + 0.1)  # arc


def target_to_scene(forward: float, lateral: float) -> tuple[float, float]:
    """Map an observer-frame goal (metres) onto normalized scene coordinates.

    Lateral offsets span the image width; larger forward distances sit higher
    in the frame (closer to the horizon).
    """
    x = min(max(0.5 - lateral / 2.0, 0.0), 1.0)
    y = min(max(0.9 - forward / 2.5, 0.0), 1.0)
    return (x, y)


def arc_geometry(start, goal, bulge: float) -> tuple[tuple[float, float], float, float, float]:
    """Circle through ``start`` and ``goal`` whose arc bulges ``bulge`` (sagitta) upwards.

    Returns ``(center, radius, angle_start, angle_sweep)``.
    """
    (x0, y0), (x1, y1) = start, goal
    chord = math.hypot(x1 - x0, y1 - y0)
    if bulge <= 0 or chord == 0:
        raise ValueError("arc needs a positive bulge and distinct endpoints")
    radius = bulge / 2 + chord * chord / (8 * bulge)
    mx, my = (x0 + x1) / 2, (y0 + y1) / 2
    # unit normal to the chord pointing "up" in image space (negative y)
    nx, ny = -(y1 - y0) / chord, (x1 - x0) / chord
    if ny > 0:
        nx, ny = -nx, -ny
    apex = (mx + nx * bulge, my + ny * bulge)
    cx, cy = apex[0] - nx * radius, apex[1] - ny * radius
    a0 = math.atan2(y0 - cy, x0 - cx)
    a1 = math.atan2(y1 - cy, x1 - cx)
    am = math.atan2(apex[1] - cy, apex[0] - cx)
    sweep = (a1 - a0 + math.pi) % (2 * math.pi) - math.pi
    # pick the sweep direction that passes through the apex
    mid = a0 + sweep / 2
    if abs((mid - am + math.pi) % (2 * math.pi) - math.pi) > 1e-6:
        sweep = sweep - math.copysign(2 * math.pi, sweep)
    return (cx, cy), radius, a0, sweep


def _curve(spec: TrajectorySpec):
    (x0, y0), (x1, y1) = spec.start, spec.goal
    if spec.family == "arc":
        (cx, cy), r, a0, sweep = arc_geometry(spec.start, spec.goal, spec.bulge)

        def point(s):
            a = a0 + sweep * s
            return cx + r * math.cos(a), cy + r * math.sin(a)

        def tangent(s):
            a = a0 + sweep * s
            t = (-math.sin(a) * sweep, math.cos(a) * sweep)
            n = math.hypot(*t)
            return t[0] / n, t[1] / n
    else:
        def point(s):
            return x0 + (x1 - x0) * s, y0 + (y1 - y0) * s

        def tangent(s):
            n = math.hypot(x1 - x0, y1 - y0) or 1.0
            return (x1 - x0) / n, (y1 - y0) / n
    return point, tangent


def generate_trajectory(spec: TrajectorySpec, steps: int) -> list[tuple[float, float, float]]:
    """Poses ``(x, y, scale)`` from ``spec.start`` towards ``spec.goal``.

    Progress along the family curve advances by a nominal increment scaled
    by a noisy speed gain; a lateral heading error is injected every step and
    decays under proportional correction. Without noise the poses are the
    analytic curve sampled uniformly in its parameter.
    """
    if steps < 2:
        raise ValueError(f"a trajectory needs at least 2 steps, got {steps}")
    rng = XorShift64Star(spec.seed)
    point, tangent = _curve(spec)
    increments = []
    for _ in range(steps - 1):
        gain = 1.0 + spec.gain_noise * rng.normal() if spec.gain_noise else 1.0
        increments.append(max(gain, 0.05))
    total = sum(increments)
    progress = [0.0]
    for inc in increments:
        progress.append(progress[-1] + inc / total)
    progress[-1] = 1.0
    correction = 0.35  # proportional pull back onto the reference path
    offset = 0.0
    scale = DEPTH_SCALE[spec.depth]
    poses = []
    for k, s in enumerate(progress):
        if spec.heading_noise and 0 < k < steps - 1:
            offset = (1.0 - correction) * offset + spec.heading_noise * rng.normal()
        elif k == steps - 1:
            offset = 0.0
        x, y = point(s)
        if offset:
            tx, ty = tangent(s)
            x, y = x - ty * offset, y + tx * offset
        poses.append((x, y, scale))
    return poses


# ---------------------------------------------------------------------------
# rendering


@dataclass
class Sprite:
    width: float = 9.0     # pixels at depth scale 1
    height: float = 6.0
    body: float = 0.9
    wheel: float = 0.45
    wheel_fraction: float = 0.3


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    # fraction of each unit pixel [i, i+1) covered by the interval [lo, hi)
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def textured_background(h: int, w: int, seed: int, level: float = 0.25, amplitude: float = 0.06) -> np.ndarray:
    """Static floor texture: a vertical brightness ramp plus coarse seeded speckle."""
    rng = XorShift64Star(seed)
    coarse = np.array([[rng.uniform() for _ in range(w // 8)] for _ in range(h // 8)])
    speckle = np.kron(coarse - 0.5, np.ones((8, 8)))
    ramp = np.linspace(-0.5, 0.5, h)[:, None]
    return np.clip(level + amplitude * (ramp + speckle), 0.0, 1.0)


def render_sequence(poses: Sequence[tuple[float, float, float]], h: int, w: int,
                    sprite: Sprite | None = None, background: np.ndarray | None = None) -> np.ndarray:
    """Composite the sprite at each pose onto the background; returns ``[T, h, w]`` in [0, 1].

    Edges are anti-aliased by exact box coverage; sprites leaving the frame
    are clipped.
    """
    if h % 8 or w % 8:
        raise ValueError(f"frame size {h}x{w} must be divisible by 8")
    sprite = sprite or Sprite()
    if background is None:
        background = np.full((h, w), 0.25)
    if background.shape != (h, w):
        raise ValueError(f"background shape {background.shape} != {(h, w)}")
    frames = np.empty((len(poses), h, w))
    for t, (x, y, scale) in enumerate(poses):
        cx, cy = x * w, y * h
        sw, sh = sprite.width * scale, sprite.height * scale
        x0, x1 = cx - sw / 2, cx + sw / 2
        y0, y1 = cy - sh / 2, cy + sh / 2
        ycut = y1 - sh * sprite.wheel_fraction
        cov_x = _coverage(x0, x1, w)
        body = np.outer(_coverage(y0, ycut, h), cov_x)
        wheel = np.outer(_coverage(ycut, y1, h), cov_x)
        covered = body + wheel
        frames[t] = background * (1 - covered) + sprite.body * body + sprite.wheel * wheel
    return np.clip(frames, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SequenceDataset:
    frames: np.ndarray                     # uint8 [S, T, H, W]
    metadata: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4:
            raise ValueError(f"frames must be uint8 [S,T,H,W], got {self.frames.dtype} {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("a dataset needs at least one sequence")
        if len(self.metadata) != self.frames.shape[0]:
            raise ValueError(f"{len(self.metadata)} metadata records for {self.frames.shape[0]} sequences")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def as_float(self, index: int | slice | np.ndarray = slice(None)) -> np.ndarray:
        return self.frames[index].astype(np.float64) / 255.0

    def indices(self, split: str | None = None, families: Sequence[str] | None = None) -> list[int]:
        return [i for i, m in enumerate(self.metadata)
                if (split is None or m["split"] == split) and (families is None or m["family"] in families)]

    def subset(self, indices: Sequence[int]) -> "SequenceDataset":
        indices = list(indices)
        return SequenceDataset(self.frames[indices], [dict(self.metadata[i]) for i in indices])

    def split(self, name: str) -> "SequenceDataset":
        idx = self.indices(split=name)
        if not idx:
            raise ValueError(f"dataset has no {name!r} sequences")
        return self.subset(idx)


def to_bytes(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)


@dataclass
class GeneratorConfig:
    families: tuple[str, ...] = FAMILIES
    count: int = 20                     # sequences per family
    length: int = 30
    size: int = 64
    base_seed: int = 0
    gain_noise: float = 0.15
    heading_noise: float = 0.01
    goal_spread: float = 0.04
    goals: tuple[tuple[float, float], ...] | None = None
    holdout: tuple[str, ...] = ()       # families assigned entirely to the test split
    duplicate: bool = False             # repeat every trajectory once more ("twice per video")
    textured: bool = True

    def __post_init__(self):
        self.families = tuple(self.families)
        self.holdout = tuple(self.holdout)
        for f in self.families + self.holdout:
            if f not in FAMILIES:
                raise ValueError(f"unknown family {f!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.length < 2:
            raise ValueError("length must be >= 2")
        if self.size % 8:
            raise ValueError(f"frame size {self.size} must be divisible by 8")


def generate_dataset(config: GeneratorConfig | None = None, **overrides) -> SequenceDataset:
    """Deterministic synthetic dataset; splits train:test 3:1 by seeded assignment."""
    cfg = config or GeneratorConfig(**overrides)
    background = textured_background(cfg.size, cfg.size, derive_seed(cfg.base_seed, 0xB6)) if cfg.textured else None
    frames, meta = [], []
    for fi, family in enumerate(cfg.families):
        for k in range(cfg.count):
            seed = derive_seed(cfg.base_seed, fi, k)
            rng = XorShift64Star(seed)
            depth = DEPTHS[k % len(DEPTHS)]
            start, goal = canonical_endpoints(family, depth)
            if cfg.goals:
                goal = cfg.goals[k % len(cfg.goals)]
            goal = (min(max(goal[0] + cfg.goal_spread * (2 * rng.uniform() - 1), 0.0), 1.0),
                    min(max(goal[1] + cfg.goal_spread * (2 * rng.uniform() - 1), 0.0), 1.0))
            spec = TrajectorySpec(family, depth, goal=goal, start=start, gain_noise=cfg.gain_noise,
                                  heading_noise=cfg.heading_noise, seed=rng.next_u64() >> 1)
            poses = generate_trajectory(spec, cfg.length)
            seq = to_bytes(render_sequence(poses, cfg.size, cfg.size, background=background))
            record = {"family": family, "depth": depth, "seed": spec.seed,
                      "goal": [round(goal[0], 6), round(goal[1], 6)], "split": ""}
            for _ in range(2 if cfg.duplicate else 1):
                frames.append(seq)
                meta.append(dict(record))
    _assign_splits(meta, cfg)
    return SequenceDataset(np.stack(frames), meta)


def _assign_splits(meta: list[dict], cfg: GeneratorConfig) -> None:
    rng = XorShift64Star(derive_seed(cfg.base_seed, 0x5B11))
    pool = []
    for i, m in enumerate(meta):
        if m["family"] in cfg.holdout:
            m["split"] = "test"
        else:
            pool.append(i)
    if cfg.holdout:
        for i in pool:
            meta[i]["split"] = "train"
        return
    # duplicated copies stay in the same split as their original
    groups = sorted({(m["family"], m["seed"]) for m in (meta[i] for i in pool)})
    rng.shuffle(groups)
    n_test = len(groups) // 4
    test = set(groups[:n_test])
    for i in pool:
        meta[i]["split"] = "test" if (meta[i]["family"], meta[i]["seed"]) in test else "train"


# ---------------------------------------------------------------------------
# PRDS container

DS_MAGIC = b"PRDS"
DS_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIIIIB")


class FormatError(ValueError):
    """Malformed, truncated or corrupted container file."""


def _encode_records(records: Sequence[dict]) -> bytes:
    out = bytearray()
    for r in records:
        blob = json.dumps(r, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out += struct.pack("<I", len(blob)) + blob
    return bytes(out)


def write_dataset(ds: SequenceDataset, path: str | os.PathLike) -> None:
    s, t, h, w = ds.shape
    meta = _encode_records(ds.metadata)
    body = (_DS_HEADER.pack(DS_MAGIC, DS_VERSION, s, t, h, w, 0)
            + struct.pack("<I", len(meta)) + meta + np.ascontiguousarray(ds.frames).tobytes())
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def _parse_header(buf: bytes, path) -> tuple[int, int, int, int]:
    if len(buf) < _DS_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, version, s, t, h, w, dtype = _DS_HEADER.unpack_from(buf)
    if magic != DS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DS_MAGIC!r}")
    if version != DS_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    if dtype != 0:
        raise FormatError(f"{path}: unsupported frame dtype code {dtype}")
    return s, t, h, w


def inspect_dataset(path: str | os.PathLike) -> tuple[int, int, int, int]:
    """Read only the fixed header and return ``(S, T, H, W)``."""
    with open(path, "rb") as fh:
        return _parse_header(fh.read(_DS_HEADER.size), path)


def read_dataset(path: str | os.PathLike) -> SequenceDataset:
    data = Path(path).read_bytes()
    s, t, h, w = _parse_header(data, path)
    if len(data) < _DS_HEADER.size + 8:
        raise FormatError(f"{path}: truncated before metadata block")
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    (meta_len,) = struct.unpack_from("<I", data, _DS_HEADER.size)
    payload_at = _DS_HEADER.size + 4 + meta_len
    expected = payload_at + s * t * h * w + 4
    if len(data) != expected:
        raise FormatError(f"{path}: file is {len(data)} bytes, header implies {expected} (truncated or padded)")
    crc = zlib.crc32(body)
    if crc != stored:
        raise FormatError(f"{path}: CRC32 mismatch over header/metadata/frame payload "
                          f"(stored {stored:08x}, computed {crc:08x})")
    records, off = [], _DS_HEADER.size + 4
    while off < payload_at:
        (n,) = struct.unpack_from("<I", data, off)
        records.append(json.loads(data[off + 4:off + 4 + n].decode("utf-8")))
        off += 4 + n
    frames = np.frombuffer(data, dtype=np.uint8, count=s * t * h * w, offset=payload_at).reshape(s, t, h, w)
    return SequenceDataset(frames.copy(), records)


# ---------------------------------------------------------------------------
# PGM frames


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Binary (P5) PGM to a uint8 or uint16 array."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: unsupported image format {data[:2]!r}; only binary PGM (P5) is accepted")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte before raster
    width, height, maxval = fields
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height
    if len(data) - pos < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated PGM raster")
    img = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(height, width)
    if maxval != 255:
        img = np.rint(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img.astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_bytes(image)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def area_downsample(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area averaging onto an ``out_h`` x ``out_w`` grid (any ratio)."""
    h, w = image.shape

    def weights(n_in, n_out):
        # overlap of input pixel i with output pixel j, in output units
        edges_in = np.arange(n_in + 1) * (n_out / n_in)
        lo = np.maximum(edges_in[:-1, None], np.arange(n_out)[None, :])
        hi = np.minimum(edges_in[1:, None], np.arange(n_out)[None, :] + 1)
        return np.clip(hi - lo, 0, None)

    wy = weights(h, out_h)
    wx = weights(w, out_w)
    return wy.T @ image.astype(np.float64) @ wx


def list_frames(directory: str | os.PathLike) -> list[Path]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".pgm")
    if not paths:
        raise FormatError(f"{directory}: no .pgm frames found")
    return paths


def import_frames(directory: str | os.PathLike, size: int = 64, stride: int = 1) -> np.ndarray:
    """Load a lexicographically ordered PGM frame directory as ``[T, size, size]`` in [0, 1]."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    frames = []
    shape = None
    for p in list_frames(directory)[::stride]:
        img = read_pgm(p)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise FormatError(f"{p}: frame size {img.shape[::-1]} differs from {shape[::-1]}")
        frames.append(area_downsample(img, size, size) / 255.0)
    return np.stack(frames)


def iter_windows(length: int, t_in: int, t_out: int, stride: int = 1) -> Iterator[int]:
    """Start offsets of every admissible ``t_in + t_out`` window in a sequence."""
    if length < t_in + t_out:
        raise ValueError(f"sequence of {length} frames is shorter than the {t_in}+{t_out} window")
    yield from range(0, length - t_in - t_out + 1, stride)
