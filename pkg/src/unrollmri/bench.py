"""Benchmark harness: variant comparison, iteration sweep, cross-setting
robustness, CSV reports, and PNG dumps.

Reported statistics use the package PSNR convention (peak = max|target| of
each image, complex residual, population std); every CSV starts with a
comment line stating it so reports are self-describing.
"""

from __future__ import annotations

import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, PngImagePlugin

from .config import Config
from .data import DatasetBundle
from .dc import CgConfig
from .errors import ParameterError
from .metrics import psnr, summarize
from .model import UnrolledModel, VariantSpec, build_model, reconstruct
from .operators import adjoint
from .training import (
    DEFAULT_PD_LEVELS,
    build_pd_model,
    pd_deployment_schedule,
    prepare_samples,
    pretrain_denoisers,
    train,
    tune_pd_lambda,
)

CSV_NOTE = "# psnr: 20*log10(max|target| / rmse(complex residual)) per image; std is population"

BENCH_HEADER = "method,mean_psnr,std_psnr,min_psnr,max_psnr,train_seconds,test_seconds"
SWEEP_HEADER = "K,dc_mode,mean_psnr"
CROSS_HEADER = "setting,mean_psnr"
METRICS_HEADER = "epoch,loss,val_psnr"


@dataclass
class BenchRow:
    method: str
    mean_psnr: float
    std_psnr: float
    min_psnr: float
    max_psnr: float
    train_seconds: float
    test_seconds: float


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    per_sample: list = field(default_factory=list)  # (method, sample_id, psnr)

    def row(self, method) -> BenchRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def eval_psnrs(model: UnrolledModel, prepared) -> list[tuple[int, float]]:
    return [(s.sample_id, psnr(reconstruct(model, s.fm, s.b), s.target)) for s in prepared]


def baseline_psnrs(prepared) -> list[tuple[int, float]]:
    """The zero-filled adjoint reconstruction A^H b, the common baseline."""
    return [(s.sample_id, psnr(adjoint(s.fm, s.b), s.target)) for s in prepared]


def train_variant(cfg: Config, variant: VariantSpec, data: DatasetBundle, monitor_dc=False):
    """Build and train one variant under a shared config.

    End-to-end variants run :func:`train`; the pre-trained variant trains
    only the noise levels its deployment schedule needs and tunes its
    regularization weight on the validation split.
    """
    cg_cfg = CgConfig(tol=cfg.cg_tol, max_iters=cfg.cg_iters)
    if variant.training_mode == "pd":
        slots = max(cfg.K - 1, 1)
        levels = sorted(set(pd_deployment_schedule(DEFAULT_PD_LEVELS, slots)))
        denoisers = pretrain_denoisers(
            levels,
            data,
            epochs=cfg.epochs,
            batch_size=cfg.batch,
            lr=cfg.lr,
            seed=cfg.seed,
            layers=cfg.layers,
            filters=cfg.filters,
            dtype=cfg.dtype,
        )
        pd_model = build_pd_model(dict(zip(levels, denoisers)), K=cfg.K, lam=0.05, cg_cfg=cg_cfg)
        val_prepared = prepare_samples(
            data.split("val"), cfg.accel, cfg.noise_sigma, cfg.dtype
        )
        tune_pd_lambda(pd_model, val_prepared)
        return pd_model, None
    model = build_model(
        K=cfg.K,
        variant=variant,
        layers=cfg.layers,
        filters=cfg.filters,
        seed=cfg.seed,
        dtype=cfg.dtype,
        cg_cfg=cg_cfg,
    )
    result = train(
        model,
        data,
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        lr=cfg.lr,
        seed=cfg.seed,
        accel=cfg.accel,
        noise_sigma=cfg.noise_sigma,
        monitor_dc=monitor_dc,
    )
    return model, result


BENCH_VARIANTS = (
    VariantSpec("cg", "et", "ws"),
    VariantSpec("sd", "et", "ws"),
    VariantSpec("cg", "et", "ns"),
    VariantSpec("cg", "pd", "ns"),
)


def bench_variants(cfg: Config, data: DatasetBundle, out_dir=None) -> BenchReport:
    """Train and evaluate the four framework variants plus the adjoint
    baseline on the test split. A variant that fails to train contributes a
    NaN row instead of aborting the whole run."""
    report = BenchReport()
    test_prepared = prepare_samples(data.split("test"), cfg.accel, cfg.noise_sigma, cfg.dtype)

    baseline = baseline_psnrs(test_prepared)
    for sid, value in baseline:
        report.per_sample.append(("AHB", sid, value))
    stats = summarize([v for _, v in baseline])
    report.rows.append(BenchRow("AHB", stats["mean"], stats["std"], stats["min"], stats["max"], 0.0, 0.0))

    for variant in BENCH_VARIANTS:
        name = variant.name
        try:
            t0 = time.perf_counter()
            model, _ = train_variant(cfg, variant, data)
            train_s = time.perf_counter() - t0
            t0 = time.perf_counter()
            scored = eval_psnrs(model, test_prepared)
            test_s = time.perf_counter() - t0
        except Exception as exc:  # keep the other variants alive
            print(f"warning: variant {name} failed: {exc}", file=sys.stderr)
            report.rows.append(BenchRow(name, *(float("nan"),) * 4, 0.0, 0.0))
            continue
        for sid, value in scored:
            report.per_sample.append((name, sid, value))
        stats = summarize([v for _, v in scored])
        report.rows.append(
            BenchRow(name, stats["mean"], stats["std"], stats["min"], stats["max"], train_s, test_s)
        )

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_bench_csv(os.path.join(out_dir, "bench.csv"), report)
        write_per_sample_csv(os.path.join(out_dir, "bench_per_sample.csv"), report)
    return report


def sweep_iterations(Ks, cfg: Config, data: DatasetBundle, dc_modes=("cg", "sd"), out_path=None):
    """Train one end-to-end weight-shared model per (K, dc_mode) and report
    mean test PSNR for each."""
    rows = []
    test_prepared = prepare_samples(data.split("test"), cfg.accel, cfg.noise_sigma, cfg.dtype)
    for dc_mode in dc_modes:
        for k in Ks:
            cfg_k = replace(cfg, K=int(k), dc_mode=dc_mode)
            model, _ = train_variant(cfg_k, VariantSpec(dc_mode, "et", "ws"), data)
            mean = float(np.mean([v for _, v in eval_psnrs(model, test_prepared)]))
            rows.append((int(k), dc_mode, mean))
    if out_path is not None:
        _write_csv(out_path, SWEEP_HEADER, [f"{k},{m},{v:.6f}" for k, m, v in rows])
    return rows


def cross_setting_eval(model, cfg: Config, data: DatasetBundle, accels, lowpass=None, out_dir=None):
    """Evaluate one trained model across acceleration factors and an
    optional low-pass (super-resolution) mask.

    Returns (setting, mean_psnr) rows; each setting also gets an adjoint
    baseline row prefixed ``ahb_``. With ``out_dir``, dumps PNG magnitude
    images and error maps for the first test sample of every setting.
    """
    rows = []
    test_samples = data.split("test")
    if not test_samples:
        raise ParameterError("test split is empty")
    error_vmax = 0.2 * float(np.abs(test_samples[0].target).max())

    settings = [(f"accel{_fmt_num(a)}", dict(accel=a, lowpass=None)) for a in accels]
    if lowpass is not None:
        settings.append((f"lowpass{lowpass[0]}x{lowpass[1]}", dict(accel=cfg.accel, lowpass=lowpass)))

    for name, kw in settings:
        prepared = prepare_samples(
            test_samples, kw["accel"], cfg.noise_sigma, cfg.dtype, lowpass=kw["lowpass"]
        )
        recons = [reconstruct(model, s.fm, s.b) for s in prepared]
        vals = [psnr(r, s.target) for r, s in zip(recons, prepared)]
        base = [psnr(adjoint(s.fm, s.b), s.target) for s in prepared]
        rows.append((name, float(np.mean(vals))))
        rows.append((f"ahb_{name}", float(np.mean(base))))
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            s0 = prepared[0]
            save_png(os.path.join(out_dir, f"{name}_recon.png"), np.abs(recons[0]))
            save_png(os.path.join(out_dir, f"{name}_ahb.png"), np.abs(adjoint(s0.fm, s0.b)))
            save_png(
                os.path.join(out_dir, f"{name}_error.png"),
                np.abs(recons[0] - s0.target),
                vmax=error_vmax,
                meta={"error_vmax": f"{error_vmax:.6g}"},
            )
            save_png(os.path.join(out_dir, "target.png"), np.abs(s0.target))

    if out_dir is not None:
        _write_csv(
            os.path.join(out_dir, "cross.csv"),
            CROSS_HEADER,
            [f"{name},{val:.6f}" for name, val in rows],
        )
    return rows


def _fmt_num(x) -> str:
    xf = float(x)
    return str(int(xf)) if xf == int(xf) else f"{xf:g}"


def save_png(path, image, vmax=None, meta=None):
    """8-bit grayscale dump of a magnitude image. ``vmax=None`` normalizes
    the image to its own max; a fixed ``vmax`` (recorded in the PNG text
    header) keeps error maps comparable across settings."""
    arr = np.asarray(image, dtype=float)
    lo = float(arr.min()) if vmax is None else 0.0
    hi = float(arr.max()) if vmax is None else float(vmax)
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = Image.fromarray(np.clip((arr - lo) * scale, 0, 255).astype(np.uint8), mode="L")
    info = PngImagePlugin.PngInfo()
    info.add_text("normalization", "per-image min-max" if vmax is None else f"fixed [0, {hi:.6g}]")
    for key, val in (meta or {}).items():
        info.add_text(key, val)
    img.save(path, pnginfo=info)


def _write_csv(path, header, lines):
    with open(path, "w") as f:
        f.write(CSV_NOTE + "\n")
        f.write(header + "\n")
        for line in lines:
            f.write(line + "\n")


def write_bench_csv(path, report: BenchReport):
    lines = [
        f"{r.method},{r.mean_psnr:.6f},{r.std_psnr:.6f},{r.min_psnr:.6f},"
        f"{r.max_psnr:.6f},{r.train_seconds:.3f},{r.test_seconds:.3f}"
        for r in report.rows
    ]
    _write_csv(path, BENCH_HEADER, lines)


def write_per_sample_csv(path, report: BenchReport):
    _write_csv(
        path,
        "method,sample_id,psnr",
        [f"{m},{sid},{v:.10f}" for m, sid, v in report.per_sample],
    )


def write_metrics_csv(path, metrics):
    _write_csv(
        path,
        METRICS_HEADER,
        [f"{m.epoch},{m.loss:.10e},{m.val_psnr:.6f}" for m in metrics],
    )
