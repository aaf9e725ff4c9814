"""Latency measurement and ablation sweeps."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .analysis import count_macs, count_params
from .arch import LCNetConfig, build_model, forward

SE_ABLATION_MASKS = ("1100000000000", "0000001100000", "0000000000011", "1111111111111")
KERNEL_ABLATION_MASKS = ("1111111111111", "1111111000000", "0000001111111")


@dataclass
class BenchResult:
    config: str
    workers: int
    warmup: int
    iters: int
    batch: int
    times_ms: list[float]

    @property
    def median_ms(self) -> float:
        return statistics.median(self.times_ms)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.times_ms)

    @property
    def p90_ms(self) -> float:
        return float(np.percentile(self.times_ms, 90))

    def summary(self) -> str:
        return (
            f"config: {self.config}\n"
            f"machine: {platform.machine()} {platform.processor() or ''} cpus={os.cpu_count()}\n"
            f"workers={self.workers} batch={self.batch} warmup={self.warmup} iters={self.iters}\n"
            f"median {self.median_ms:.3f} ms  mean {self.mean_ms:.3f} ms  p90 {self.p90_ms:.3f} ms\n"
        )


def describe(config: LCNetConfig) -> str:
    return f"scale={config.scale} se_mask={config.se_mask} kernel_mask={config.kernel_mask}"


def benchmark(
    config: LCNetConfig,
    *,
    workers: int = 1,
    warmup: int = 5,
    iters: int = 20,
    batch: int = 1,
    input_hw: tuple[int, int] = (224, 224),
    seed: int = 0,
) -> BenchResult:
    """Time ``iters`` inference passes after ``warmup`` unrecorded ones."""
    if iters < 10:
        raise ValueError("iters must be ≥ 10")
    if warmup < 0 or batch < 1:
        raise ValueError("warmup must be >= 0 and batch >= 1")
    model = build_model(config, seed)
    x = np.random.default_rng(seed).standard_normal((batch, 3, *input_hw)).astype(np.float32)
    for _ in range(warmup):
        forward(model, x, "infer", workers=workers)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        forward(model, x, "infer", workers=workers)
        times.append((time.perf_counter() - t0) * 1e3)
    return BenchResult(describe(config), workers, warmup, iters, batch, times)


@dataclass
class AblationRow:
    mask: str
    params: int
    macs: int
    median_ms: float


def ablate(
    mode: str,
    masks: Sequence[str] | None = None,
    *,
    base: LCNetConfig | None = None,
    iters: int = 10,
    warmup: int = 2,
    workers: int = 1,
    input_hw: tuple[int, int] = (224, 224),
) -> list[AblationRow]:
    """Cost and latency for each SE or large-kernel placement mask."""
    if mode not in ("se", "kernel"):
        raise ValueError(f"mode must be 'se' or 'kernel', got {mode!r}")
    if masks is None:
        masks = SE_ABLATION_MASKS if mode == "se" else KERNEL_ABLATION_MASKS
    if not masks:
        raise ValueError("mask list is empty")
    base = base or LCNetConfig(scale=0.5)
    rows = []
    for mask in masks:
        cfg = replace(base, se_mask=mask) if mode == "se" else replace(base, kernel_mask=mask)
        result = benchmark(cfg, workers=workers, warmup=warmup, iters=iters, input_hw=input_hw)
        rows.append(AblationRow(mask, count_params(cfg), count_macs(cfg, input_hw), result.median_ms))
    return rows


def format_ablation(rows: Sequence[AblationRow], csv: bool = False) -> str:
    if csv:
        lines = ["mask,params,macs,median_ms"]
        lines += [f"{r.mask},{r.params},{r.macs},{r.median_ms:.4f}" for r in rows]
        return "\n".join(lines) + "\n"
    lines = [f"{'mask':<13}  {'params':>10}  {'MACs':>12}  {'median ms':>9}"]
    lines += [f"{r.mask:<13}  {r.params:>10,}  {r.macs:>12,}  {r.median_ms:>9.3f}" for r in rows]
    return "\n".join(lines) + "\n"
