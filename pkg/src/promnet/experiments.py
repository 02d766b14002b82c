"""Reusable experiment drivers (also called by scripts/ and the acceptance suite)."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import FAMILIES, GeneratorConfig, SequenceDataset, generate_dataset
from .metrics import EvalReport, evaluate_horizon
from .model import FcLstm, FcLstmConfig, PromNet, PromNetConfig
from .optim import RmsPropState, TrainConfig, train


@dataclass
class OverfitConfig:
    """Two straight-line sequences, small frames, short horizon."""

    size: int = 16
    length: int = 6
    t_in: int = 3
    t_out: int = 3
    scale: str = "1/4"
    epochs: int = 200
    batch_size: int = 2
    seed: int = 0
    data_seed: int = 0


def overfit_run(cfg: OverfitConfig | None = None) -> list[float]:
    """Per-epoch mean training MSE of PROM-Net on a 2-sequence dataset."""
    cfg = cfg or OverfitConfig()
    ds = generate_dataset(GeneratorConfig(families=("straight",), count=2, length=cfg.length,
                                          size=cfg.size, base_seed=cfg.data_seed))
    net = PromNet(PromNetConfig(input_h=cfg.size, input_w=cfg.size, scale=cfg.scale,
                                t_in=cfg.t_in, t_out=cfg.t_out, seed=cfg.seed))
    history, _ = train(net, ds, TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed))
    return [m.mean_loss for m in history]


@dataclass
class GeneralizationConfig:
    holdout: str = "arc"
    count: int = 20
    length: int = 30
    size: int = 64
    data_seed: int = 7
    scale: str = "1/4"
    fc_hidden: int = 256
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.001
    seed: int = 1
    window_stride: int = 2
    eval_stride: int = 1
    teacher_forcing_prob: float | None = None

    def train_families(self) -> tuple[str, ...]:
        return tuple(f for f in FAMILIES if f != self.holdout)


@dataclass
class ModelResult:
    kind: str
    parameters: int
    losses: list[float]
    report: EvalReport
    train_seconds: float

    def summary(self) -> dict:
        r = self.report
        return {"kind": self.kind, "parameters": self.parameters, "losses": self.losses,
                "train_seconds": round(self.train_seconds, 1), "windows": r.windows,
                "mean_psnr": r.mean_psnr(), "mean_ssim": r.mean_ssim(),
                "psnr_by_step": [s.mean for s in r.psnr], "ssim_by_step": [s.mean for s in r.ssim]}


@dataclass
class GeneralizationResult:
    config: GeneralizationConfig
    results: dict[str, ModelResult] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"config": asdict(self.config), **{k: v.summary() for k, v in self.results.items()}}


def generalization_dataset(cfg: GeneralizationConfig) -> SequenceDataset:
    return generate_dataset(GeneratorConfig(families=FAMILIES, count=cfg.count, length=cfg.length,
                                            size=cfg.size, base_seed=cfg.data_seed, holdout=(cfg.holdout,)))


def run_generalization(cfg: GeneralizationConfig | None = None, log=None) -> GeneralizationResult:
    """Train PROM-Net and FC-LSTM on non-held-out families, evaluate on the held-out one."""
    cfg = cfg or GeneralizationConfig()
    ds = generalization_dataset(cfg)
    train_ds, test_ds = ds.split("train"), ds.split("test")
    out = GeneralizationResult(cfg)
    models = {
        "promnet": lambda: PromNet(PromNetConfig(input_h=cfg.size, input_w=cfg.size, scale=cfg.scale, seed=cfg.seed)),
        "fclstm": lambda: FcLstm(FcLstmConfig(input_h=cfg.size, input_w=cfg.size, hidden=cfg.fc_hidden, seed=cfg.seed)),
    }
    tcfg = TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed,
                       teacher_forcing_prob=cfg.teacher_forcing_prob, window_stride=cfg.window_stride)
    with T.precision("float32"):
        for kind, make in models.items():
            net = make()
            t0 = time.perf_counter()

            def cb(m, kind=kind):
                if log:
                    log(f"{kind} epoch {m.epoch + 1}/{cfg.epochs} loss {m.mean_loss:.5f} tf {m.teacher_prob:.2f}")

            history, _ = train(net, train_ds, tcfg, RmsPropState.for_model(net, lr=cfg.lr), callback=cb)
            seconds = time.perf_counter() - t0
            report = evaluate_horizon(net, test_ds, cfg.eval_stride, model_tag=kind, dataset_tag=f"holdout-{cfg.holdout}")
            out.results[kind] = ModelResult(kind, net.parameter_count(), [m.mean_loss for m in history], report, seconds)
            if log:
                log(f"{kind}: mean PSNR {report.mean_psnr():.3f} dB, mean SSIM {report.mean_ssim():.4f}, "
                    f"train {seconds:.0f}s")
    return out


def last_frame_baseline(cfg: GeneralizationConfig | None = None) -> EvalReport:
    from .metrics import LastFrameModel

    cfg = cfg or GeneralizationConfig()
    test_ds = generalization_dataset(cfg).split("test")
    return evaluate_horizon(LastFrameModel(size=cfg.size), test_ds, cfg.eval_stride)


def mean_psnr_by_step(report: EvalReport) -> np.ndarray:
    return np.array([s.mean for s in report.psnr])
