"""PSNR / SSIM and per-horizon-step evaluation reports."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import SequenceDataset, iter_windows

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 1.0) -> float:
    """10*log10(max_val**2 / MSE); identical inputs give ``inf``."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over the valid region, on the last two axes
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-1) @ g


def ssim_map(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b, "ssim")
    if a.ndim < 2 or a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"ssim: frame {a.shape[-2:]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 1.0) -> float:
    """Mean single-scale SSIM over valid windows."""
    return float(np.mean(ssim_map(a, b, window, sigma, k1, k2, data_range)))


# ---------------------------------------------------------------------------
# horizon evaluation

CSV_HEADER = ("step", "psnr_mean", "psnr_std", "psnr_min", "psnr_max",
              "ssim_mean", "ssim_std", "ssim_min", "ssim_max")


@dataclass
class StepStats:
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, values) -> "StepStats":
        v = np.asarray(values, dtype=np.float64)
        if np.isinf(v).any():
            # identical frames: keep inf where it dominates, avoid inf - inf in the spread
            finite = v[np.isfinite(v)]
            std = float(np.std(finite)) if finite.size else 0.0
            return cls(float(np.mean(v)), std, float(v.min()), float(v.max()))
        return cls(float(np.mean(v)), float(np.std(v)), float(v.min()), float(v.max()))


@dataclass
class EvalReport:
    psnr: list[StepStats]
    ssim: list[StepStats]
    model_tag: str = ""
    dataset_tag: str = ""
    windows: int = 0
    raw_psnr: np.ndarray | None = field(default=None, repr=False)   # [windows, T_out]
    raw_ssim: np.ndarray | None = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.psnr)

    def mean_psnr(self) -> float:
        return float(np.mean([s.mean for s in self.psnr]))

    def mean_ssim(self) -> float:
        return float(np.mean([s.mean for s in self.ssim]))

    def rows(self) -> list[tuple]:
        return [(t + 1, p.mean, p.std, p.min, p.max, s.mean, s.std, s.min, s.max)
                for t, (p, s) in enumerate(zip(self.psnr, self.ssim))]


def report_from_scores(psnrs: np.ndarray, ssims: np.ndarray, model_tag="", dataset_tag="") -> EvalReport:
    psnrs = np.asarray(psnrs, dtype=np.float64)
    ssims = np.asarray(ssims, dtype=np.float64)
    return EvalReport([StepStats.of(psnrs[:, t]) for t in range(psnrs.shape[1])],
                      [StepStats.of(ssims[:, t]) for t in range(ssims.shape[1])],
                      model_tag, dataset_tag, psnrs.shape[0], psnrs, ssims)


class LastFrameModel:
    """Copies the final input frame across the horizon."""

    kind = "last_frame"

    def __init__(self, t_in: int = 10, t_out: int = 10, size: int = 64):
        self.config = type("Cfg", (), {"t_in": t_in, "t_out": t_out, "input_h": size, "input_w": size})()

    def predict_sequence(self, frames: np.ndarray) -> np.ndarray:
        return np.repeat(np.asarray(frames)[-1:], self.config.t_out, axis=0)


def evaluate_horizon(model, dataset: SequenceDataset, window_stride: int = 1,
                     model_tag: str = "", dataset_tag: str = "") -> EvalReport:
    """PSNR/SSIM per horizon step over every admissible window of ``dataset``.

    ``dataset`` is the test split. Windows of one sequence are predicted as a
    single batch; iteration order is sequence-major, then start offset.
    """
    if len(dataset) == 0:
        raise ValueError("evaluation split is empty")
    cfg = model.config
    s, length, h, w = dataset.shape
    if (h, w) != (cfg.input_h, cfg.input_w):
        raise ValueError(f"dataset frames are {h}x{w}, model expects {cfg.input_h}x{cfg.input_w}")
    starts = list(iter_windows(length, cfg.t_in, cfg.t_out, window_stride))
    psnrs, ssims = [], []
    for i in range(s):
        seq = dataset.as_float(i)
        clips = np.stack([seq[st:st + cfg.t_in + cfg.t_out] for st in starts], axis=1)[:, :, None]
        pred = np.asarray(model.predict_sequence(clips[:cfg.t_in]), dtype=np.float64)
        truth = clips[cfg.t_in:]
        for j in range(len(starts)):
            psnrs.append([psnr(pred[t, j, 0], truth[t, j, 0]) for t in range(cfg.t_out)])
            ssims.append([ssim(pred[t, j, 0], truth[t, j, 0]) for t in range(cfg.t_out)])
    return report_from_scores(np.array(psnrs), np.array(ssims), model_tag, dataset_tag)


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"


def emit_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for row in report.rows():
            fh.write(",".join([str(row[0])] + [_fmt(v) for v in row[1:]]) + "\n")


def emit_compare_csv(reports: dict[str, EvalReport], path: str | os.PathLike) -> None:
    """Side-by-side columns ``<tag>_<metric>`` for two or more reports."""
    tags = list(reports)
    steps = {r.steps for r in reports.values()}
    if len(steps) != 1:
        raise ValueError(f"reports disagree on horizon length: {sorted(steps)}")
    header = ["step"] + [f"{tag}_{col}" for tag in tags for col in CSV_HEADER[1:]]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(steps.pop()):
            cells = [str(t + 1)]
            for tag in tags:
                cells += [_fmt(v) for v in reports[tag].rows()[t][1:]]
            fh.write(",".join(cells) + "\n")


def read_csv(path: str | os.PathLike) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
