"""Dataset plumbing: class balancing, stratified splits, the NMSTRIDE sample
file format, and the seeded synthetic generator used for desk-scale runs.

NMSTRIDE layout (all integers little-endian):
    8-byte magic "NMSTRIDE", version u16,
    M, N_h, N_p, L_s, C, sample_count as u32 each,
    then per sample: u32 label (0xFFFFFFFF = unlabeled) + L_b raw bytes.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .traffic import ReprConfig, StrideSample

MAGIC = b"NMSTRIDE"
VERSION = 1
UNLABELED = 0xFFFFFFFF


def balance_dataset(per_class: dict, lower: int, upper: int,
                    seed: int) -> dict:
    """Drop classes below ``lower`` samples; subsample classes above
    ``upper`` to exactly ``upper`` without replacement (input order kept)."""
    if lower > upper:
        raise ConfigError(f"lower limit {lower} exceeds upper limit {upper}")
    rng = np.random.default_rng(seed)
    out = {}
    for label in per_class:
        samples = per_class[label]
        if len(samples) < lower:
            continue
        if len(samples) > upper:
            keep = np.sort(rng.choice(len(samples), size=upper, replace=False))
            out[label] = [samples[i] for i in keep]
        else:
            out[label] = list(samples)
    return out


def split_dataset(samples, ratios, seed: int):
    """Per-class stratified shuffle into (train, val, test).

    Val/test sizes are floored; the remainder goes to train. Classes with
    fewer than 3 samples are warned about and assigned wholly to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    by_class: dict = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for label, group in by_class.items():
        n = len(group)
        if n < 3:
            warnings.warn(f"class {label!r} has only {n} samples; "
                          f"assigning all of them to train")
            train.extend(group)
            continue
        order = rng.permutation(n)
        n_val = int(n * ratios[1])
        n_test = int(n * ratios[2])
        n_train = n - n_val - n_test
        train.extend(group[i] for i in order[:n_train])
        val.extend(group[i] for i in order[n_train:n_train + n_val])
        test.extend(group[i] for i in order[n_train + n_val:])
    return train, val, test


@dataclass
class StrideFile:
    """In-memory view of one NMSTRIDE file."""

    packets_per_flow: int
    header_bytes: int
    payload_bytes: int
    stride_len: int
    num_classes: int
    data: np.ndarray       # (n, L_b) uint8
    labels: np.ndarray     # (n,) int64, -1 where unlabeled

    @property
    def flow_bytes(self) -> int:
        return self.packets_per_flow * (self.header_bytes + self.payload_bytes)

    @property
    def n_strides(self) -> int:
        return self.flow_bytes // self.stride_len

    @property
    def strides(self) -> np.ndarray:
        return self.data.reshape(len(self.data), self.n_strides, self.stride_len)

    def repr_config(self, **overrides) -> ReprConfig:
        return ReprConfig(
            packets_per_flow=self.packets_per_flow,
            header_bytes=self.header_bytes,
            payload_bytes=self.payload_bytes,
            stride_len=self.stride_len,
            **overrides,
        )


def write_samples(path, samples, cfg: ReprConfig, num_classes: int) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack(
            "<6I", cfg.packets_per_flow, cfg.header_bytes, cfg.payload_bytes,
            cfg.stride_len, num_classes, len(samples)))
        for i, s in enumerate(samples):
            flat = s.flat
            if flat.size != cfg.flow_bytes:
                raise DataError(
                    f"sample {i} holds {flat.size} bytes, expected {cfg.flow_bytes}")
            label = UNLABELED if s.label is None else int(s.label)
            if label != UNLABELED and not 0 <= label < num_classes:
                raise DataError(f"sample {i} label {label} outside [0, {num_classes})")
            fh.write(struct.pack("<I", label))
            fh.write(flat.astype(np.uint8).tobytes())


def read_samples(path) -> StrideFile:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ParseError(f"{path}: bad sample-file magic {blob[:8]!r}")
    (version,) = struct.unpack_from("<H", blob, 8)
    if version != VERSION:
        raise ParseError(f"{path}: unsupported sample-file version {version}")
    m, n_h, n_p, l_s, c, count = struct.unpack_from("<6I", blob, 10)
    flow_bytes = m * (n_h + n_p)
    expected = 34 + count * (4 + flow_bytes)
    if len(blob) != expected:
        raise ParseError(
            f"{path}: file is {len(blob)} bytes, header implies {expected}")
    data = np.empty((count, flow_bytes), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    off = 34
    for i in range(count):
        (raw_label,) = struct.unpack_from("<I", blob, off)
        labels[i] = -1 if raw_label == UNLABELED else raw_label
        off += 4
        data[i] = np.frombuffer(blob, dtype=np.uint8, count=flow_bytes, offset=off)
        off += flow_bytes
    return StrideFile(packets_per_flow=m, header_bytes=n_h, payload_bytes=n_p,
                      stride_len=l_s, num_classes=c, data=data, labels=labels)


def write_manifest(path, class_names) -> None:
    """JSON object mapping class index -> class name."""
    mapping = {str(i): name for i, name in enumerate(class_names)}
    Path(path).write_text(json.dumps(mapping, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict[int, str]:
    raw = json.loads(Path(path).read_text())
    return {int(k): v for k, v in raw.items()}


# ---------------------------------------------------------------------------
# synthetic flows for desk-scale training runs

_TEMPLATE_SEED = 0x5EED
_SIG_BYTES_PER_PACKET = 24


def synthetic_samples(n_classes: int, per_class: int, cfg: ReprConfig,
                      seed: int) -> list[StrideSample]:
    """Seeded synthetic flows: every packet's header region carries a shared
    deterministic template with class-specific signature bytes written at
    fixed offsets; payload regions are uniform random per sample.
    """
    if n_classes < 1 or per_class < 1:
        raise ConfigError("need at least one class and one sample per class")
    rng = np.random.default_rng(seed)
    template = np.random.default_rng(_TEMPLATE_SEED).integers(
        0, 256, size=(cfg.packets_per_flow, cfg.header_bytes), dtype=np.uint8)
    n_sig = min(_SIG_BYTES_PER_PACKET, cfg.header_bytes)
    sig_pos = (np.linspace(0, max(cfg.header_bytes - 1, 0), num=n_sig)
               .astype(np.int64) if n_sig else np.empty(0, dtype=np.int64))
    samples = []
    for label in range(n_classes):
        flow = np.zeros((cfg.packets_per_flow, cfg.packet_bytes), dtype=np.uint8)
        if cfg.header_bytes:
            flow[:, :cfg.header_bytes] = template
            for m in range(cfg.packets_per_flow):
                sig = (17 * label + 11 * np.arange(n_sig) + 5 * m) % 256
                flow[m, sig_pos] = sig
        for _ in range(per_class):
            sample = flow.copy()
            if cfg.payload_bytes:
                sample[:, cfg.header_bytes:] = rng.integers(
                    0, 256, size=(cfg.packets_per_flow, cfg.payload_bytes),
                    dtype=np.uint8)
            samples.append(StrideSample(
                strides=sample.reshape(cfg.n_strides, cfg.stride_len),
                label=label,
            ))
    return samples


def samples_to_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    """(n, L_b) uint8 bytes plus int64 labels (-1 where unlabeled)."""
    data = np.stack([s.flat for s in samples])
    labels = np.array([-1 if s.label is None else s.label for s in samples],
                      dtype=np.int64)
    return data, labels
