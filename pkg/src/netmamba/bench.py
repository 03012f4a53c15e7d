"""Throughput harness: encoder forward timing across batch sizes and
sequence lengths, peak-memory probes, and the log-log scaling fit that
demonstrates linear cost in sequence length."""

from __future__ import annotations

import time
import tracemalloc

import numpy as np

from . import autodiff as ad
from . import model as nm
from . import ssm

CSV_HEADER = "batch,seq_len,samples_per_sec,peak_bytes"


def _encoder(cfg: nm.ModelConfig, seed: int = 0):
    params = nm.init_params(cfg, np.random.default_rng(seed), with_decoder=False)
    return params.enc_blocks, params.enc_norm, cfg.norm


def bench_forward(cfg: nm.ModelConfig, batch_sizes, lengths,
                  repeats: int = 5, warmup: int = 2, seed: int = 0) -> list[dict]:
    """Median wall-clock of no-grad encoder passes per (batch, length) plus
    peak allocation bytes of one traced pass. The encoder blocks are
    length-agnostic, so one parameter set serves every length."""
    blocks, gain, norm = _encoder(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    rows = []
    for batch in batch_sizes:
        for length in lengths:
            x = ad.Tensor(rng.standard_normal((batch, length, cfg.d_enc))
                          .astype(np.float32))
            with ad.no_grad():
                for _ in range(warmup):
                    ssm.stack_forward(x, blocks, gain, norm)
                times = []
                for _ in range(max(repeats, 5)):
                    t0 = time.perf_counter()
                    ssm.stack_forward(x, blocks, gain, norm)
                    times.append(time.perf_counter() - t0)
                tracemalloc.start()
                ssm.stack_forward(x, blocks, gain, norm)
                _, peak = tracemalloc.get_traced_memory()
                tracemalloc.stop()
            median = float(np.median(times))
            rows.append({
                "batch": batch,
                "seq_len": length,
                "samples_per_sec": batch / median,
                "peak_bytes": int(peak),
                "median_seconds": median,
            })
    return rows


def fit_scaling_exponent(lengths, seconds) -> float:
    """Least-squares slope of log(time) against log(length)."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(seconds, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def scaling_exponent(cfg: nm.ModelConfig, lengths=(400, 800, 1600),
                     batch: int = 2, repeats: int = 5, seed: int = 0) -> float:
    rows = bench_forward(cfg, [batch], lengths, repeats=repeats, seed=seed)
    return fit_scaling_exponent([r["seq_len"] for r in rows],
                                [r["median_seconds"] for r in rows])


def write_bench_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(f"{r['batch']},{r['seq_len']},"
                     f"{r['samples_per_sec']:.6g},{r['peak_bytes']}\n")
