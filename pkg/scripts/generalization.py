"""Held-out-family comparison of PROM-Net against the FC-LSTM baseline.

Writes summary.json and per-step compare.csv into --out. Any
GeneralizationConfig field can be overridden, e.g. ``--set epochs=20``.
"""
import argparse
import dataclasses
import json
from pathlib import Path

from promnet.experiments import GeneralizationConfig, last_frame_baseline, run_generalization
from promnet.metrics import emit_compare_csv


def parse_overrides(pairs):
    fields = {f.name: f for f in dataclasses.fields(GeneralizationConfig)}
    out = {}
    for pair in pairs:
        key, _, raw = pair.partition("=")
        if key not in fields:
            raise SystemExit(f"unknown field {key!r}; choose from {', '.join(fields)}")
        default = getattr(GeneralizationConfig(), key)
        out[key] = raw if isinstance(default, str) or default is None else type(default)(raw)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/generalization"))
    ap.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE")
    ap.add_argument("--baseline", action="store_true", help="also score the copy-last-frame predictor")
    args = ap.parse_args()
    cfg = GeneralizationConfig(**parse_overrides(args.set))
    args.out.mkdir(parents=True, exist_ok=True)
    result = run_generalization(cfg, log=print)
    summary = result.summary()
    reports = {k: r.report for k, r in result.results.items()}
    if args.baseline:
        reports["last_frame"] = last_frame_baseline(cfg)
        summary["last_frame"] = {"mean_psnr": reports["last_frame"].mean_psnr(),
                                 "mean_ssim": reports["last_frame"].mean_ssim()}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1, default=float) + "\n")
    emit_compare_csv(reports, args.out / "compare.csv")
    for tag, rep in reports.items():
        print(f"{tag:>10}: PSNR {rep.mean_psnr():.3f} dB  SSIM {rep.mean_ssim():.4f}")


if __name__ == "__main__":
    main()
