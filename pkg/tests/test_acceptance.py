"""One test per acceptance criterion, each at its stated tolerance.

Every test records a PASS/FAIL line (shown in the terminal summary and printed
inline) before asserting, so a red criterion still reports its measured value.
"""
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from promnet import tensor as T
from promnet.checkpoint import (FormatError, load_checkpoint, parameter_payload_bytes, save_checkpoint)
from promnet.cli import main
from promnet.data import GeneratorConfig, generate_dataset, read_dataset, write_dataset, write_pgm
from promnet.experiments import GeneralizationConfig, OverfitConfig, overfit_run, run_generalization
from promnet.gradcheck import run_checks
from promnet.metrics import psnr, ssim
from promnet.model import PromNet, PromNetConfig, param_count
from promnet.optim import RmsPropState
from test_metrics import psnr_loops, ssim_loops


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    results = run_checks()
    seconds = time.perf_counter() - t0
    failed = [f"{r.name}={r.error:.2e}" for r in results if not r.passed]
    worst = max(results, key=lambda r: r.error / r.tol)
    names = {r.name for r in results}
    covered = {"conv2d", "conv2d_transpose", "maxpool2d", "batchnorm", "relu", "sigmoid", "tanh", "add",
               "hadamard", "mse_loss", "convlstm_step", "convlstm_bptt", "promnet_end_to_end"} <= names
    record(1, not failed and covered and seconds < 120,
           f"{len(results)} checks, worst {worst.name} {worst.error:.2e} (tol {worst.tol:.0e}), "
           f"{seconds:.0f}s, failed={failed}")


def test_criterion_2_shape_fidelity():
    chain = PromNet(PromNetConfig()).layer_shapes()
    got = [(name, s[1:]) for name, s in chain
           if name in ("input", "enc_conv1", "pool", "enc_conv2", "enc_lstm1", "enc_lstm2",
                       "deconv1", "deconv2", "out_conv")]
    expect = [("input", (1, 64, 64)), ("enc_conv1", (8, 64, 64)), ("pool", (8, 32, 32)),
              ("enc_conv2", (16, 16, 16)), ("enc_lstm1", (16, 16, 16)), ("enc_lstm2", (32, 8, 8)),
              ("deconv1", (16, 16, 16)), ("deconv2", (8, 32, 32)), ("out_conv", (1, 64, 64))]
    record(2, got == expect, " -> ".join(f"{s[0]}@{s[1]}x{s[2]}" for _, s in got))


def test_criterion_3_capacity(tmp_path):
    net = PromNet(PromNetConfig())
    count = param_count(PromNetConfig())
    payload = parameter_payload_bytes(net)
    size = save_checkpoint(net, RmsPropState.for_model(net), tmp_path / "scale1.prck")
    ok = 3_000_000 <= count <= 9_000_000 and 3_000_000 <= payload <= 40_000_000
    record(3, ok, f"param_count={count} (band [3e6, 9e6]), 32-bit payload={payload} B (band [3 MB, 40 MB]), "
                  f"checkpoint file with optimizer state={size} B")


def test_criterion_4_learning_dynamics():
    t0 = time.perf_counter()
    losses = overfit_run(OverfitConfig())
    seconds = time.perf_counter() - t0
    ratio = losses[-1] / losses[0]
    record(4, ratio < 0.1 and seconds < 600,
           f"epoch-1 MSE {losses[0]:.5f}, epoch-200 MSE {losses[-1]:.5f}, ratio {ratio:.4f}, {seconds:.0f}s")


@pytest.fixture(scope="module")
def generalization():
    t0 = time.perf_counter()
    result = run_generalization(GeneralizationConfig())
    return result, time.perf_counter() - t0


def test_criterion_5_generalization_ordering(generalization):
    result, seconds = generalization
    prom, fc = result.results["promnet"].report, result.results["fclstm"].report
    cfg = result.config
    record(5, prom.mean_psnr() >= fc.mean_psnr() and seconds <= 7200,
           f"held-out {cfg.holdout}: PROM-Net {prom.mean_psnr():.3f} dB vs FC-LSTM {fc.mean_psnr():.3f} dB "
           f"(scale {cfg.scale}, FC hidden {cfg.fc_hidden}, {cfg.epochs} epochs, seed {cfg.seed}, "
           f"data seed {cfg.data_seed}), {seconds:.0f}s")


def test_criterion_6_horizon_degradation(generalization):
    result, _ = generalization
    rep = result.results["promnet"].report
    p1, p10 = rep.psnr[0].mean, rep.psnr[-1].mean
    s1, s10 = rep.ssim[0].mean, rep.ssim[-1].mean
    record(6, p1 >= p10 and s1 >= s10,
           f"PROM-Net PSNR step1 {p1:.3f} vs step10 {p10:.3f} dB; SSIM step1 {s1:.4f} vs step10 {s10:.4f}")


def test_criterion_7_metric_oracles():
    r = np.random.default_rng(2024)
    worst_p = worst_s = 0.0
    for _ in range(100):
        a, b = r.random((16, 16)), r.random((16, 16))
        worst_p = max(worst_p, abs(psnr(a, b) - psnr_loops(a, b)))
        worst_s = max(worst_s, abs(ssim(a, b) - ssim_loops(a, b)))
    const = ssim(np.zeros((16, 16)), np.ones((16, 16)))
    db = psnr(np.zeros((16, 16)), np.full((16, 16), 0.5))
    ok = worst_p < 1e-6 and worst_s < 1e-6 and abs(const - 9.999e-5) < 1e-4 and abs(db - 6.0206) < 1e-4
    record(7, ok, f"max |psnr-ref|={worst_p:.1e}, max |ssim-ref|={worst_s:.1e}, "
                  f"constant SSIM={const:.6e}, PSNR(0 vs 0.5)={db:.4f} dB")


def test_criterion_8_determinism_and_formats(tmp_path):
    checks = {}
    gen = ["generate", "--families", "straight,arc", "--count", "2", "--length", "20", "--seed", "11"]
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(gen + ["--out-dir", str(d)]) == 0
        assert main(["train", "--out-dir", str(d), "--data", str(d / "dataset.prds"), "--epochs", "1",
                     "--scale", "0.125", "--seed", "5", "--window-stride", "4", "--threads", "1"]) == 0
        frames = d / "frames"
        frames.mkdir()
        ds = read_dataset(d / "dataset.prds")
        for t in range(10):
            write_pgm(frames / f"{t:02d}.pgm", ds.frames[1, t])
        assert main(["predict", "--out-dir", str(d), "--checkpoint", str(d / "model.prck"),
                     "--input", str(frames), "--threads", "1"]) == 0
        assert main(["evaluate", "--out-dir", str(d), "--checkpoint", str(d / "model.prck"),
                     "--data", str(d / "dataset.prds"), "--split", "train", "--window-stride", "4",
                     "--threads", "1"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    checks["dataset"] = (a / "dataset.prds").read_bytes() == (b / "dataset.prds").read_bytes()
    checks["training"] = ((a / "model.prck").read_bytes() == (b / "model.prck").read_bytes()
                          and (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes())
    checks["prediction"] = all((a / "predictions" / p.name).read_bytes() == p.read_bytes()
                               for p in sorted((b / "predictions").glob("*.pgm")))
    checks["evaluation"] = (a / "eval.csv").read_bytes() == (b / "eval.csv").read_bytes()

    net, state, meta = load_checkpoint(a / "model.prck")
    save_checkpoint(net, state, tmp_path / "again.prck", {k: meta[k] for k in ("epoch", "train")})
    checks["checkpoint roundtrip"] = (tmp_path / "again.prck").read_bytes() == (a / "model.prck").read_bytes()
    ds = read_dataset(a / "dataset.prds")
    write_dataset(ds, tmp_path / "again.prds")
    checks["dataset roundtrip"] = (tmp_path / "again.prds").read_bytes() == (a / "dataset.prds").read_bytes()

    def rejects(path):
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x40
        bad = tmp_path / ("bad" + path.suffix)
        bad.write_bytes(bytes(data))
        try:
            (load_checkpoint if path.suffix == ".prck" else read_dataset)(bad)
        except FormatError as e:
            return "CRC32" in str(e)
        return False

    checks["checkpoint CRC"] = rejects(a / "model.prck")
    checks["dataset CRC"] = rejects(a / "dataset.prds")
    record(8, all(checks.values()), ", ".join(f"{k}={'ok' if v else 'MISMATCH'}" for k, v in checks.items()))


def test_criterion_9_protocol_fidelity(tmp_path):
    d = tmp_path
    assert main(["generate", "--out-dir", str(d), "--families", "straight", "--count", "2", "--length", "20"]) == 0
    assert main(["train", "--out-dir", str(d), "--data", str(d / "dataset.prds"), "--epochs", "1",
                 "--scale", "0.125", "--window-stride", "10"]) == 0
    ds = read_dataset(d / "dataset.prds")
    frames = d / "frames"
    frames.mkdir()
    for t in range(14):
        write_pgm(frames / f"{t:02d}.pgm", ds.frames[0, t])
    code = main(["predict", "--out-dir", str(d), "--checkpoint", str(d / "model.prck"), "--input", str(frames)])
    manifest = json.loads((d / "predict.manifest.json").read_text())
    consumed = len(manifest["config"]["inputs_used"])
    emitted = len(list((d / "predictions").glob("*.pgm")))
    few = d / "few"
    few.mkdir()
    for t in range(9):
        write_pgm(few / f"{t:02d}.pgm", ds.frames[0, t])
    short_code = main(["predict", "--out-dir", str(d / "o"), "--checkpoint", str(d / "model.prck"),
                       "--input", str(few)])
    record(9, code == 0 and consumed == 10 and emitted == 10 and short_code == 1,
           f"consumed {consumed} frames, emitted {emitted} frames, 9-frame input exit code {short_code}")
