"""Stride embedding, masked-reconstruction pre-training, and the
classification head on top of the unidirectional SSM encoder.

The class token sits at the *end* of the sequence: the encoder is causal, so
only the trailing position sees every stride, and the classifier reads that
row alone. During pre-training the encoder sees only the visible strides (in
original temporal order) plus the class token; the decoder fills masked slots
with a shared trainable token, restores the original order, and reconstructs
the masked strides' normalized bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import ssm
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericFaultError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    stride_len: int = 4
    d_enc: int = 256
    e_enc: int = 512
    depth_enc: int = 4
    d_dec: int = 128
    e_dec: int = 256
    depth_dec: int = 2
    state_dim: int = 16
    seq_len: int = 401            # strides plus the trailing class token
    mask_ratio: float = 0.9
    num_classes: int = 2
    use_pos_embed: bool = True
    dt_rank: int = 16
    conv_kernel: int = 4
    norm: str = "rms"             # or "layer"
    recon_target: str = "bytes"   # or "embedded"
    use_state_skip: bool = False

    def __post_init__(self):
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.norm not in ("rms", "layer"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.recon_target not in ("bytes", "embedded"):
            raise ConfigError(f"unknown recon_target {self.recon_target!r}")

    @property
    def n_strides(self) -> int:
        return self.seq_len - 1

    @property
    def n_visible(self) -> int:
        """ceil((1 - r) * L), counting the always-visible class token."""
        return math.ceil((1.0 - self.mask_ratio) * self.seq_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class MaskPlan:
    """One sample's random masking: a permutation of stride indices, the
    sorted visible subset, and the sorted masked complement. The class token
    (index n_strides) is never in either set."""

    permutation: np.ndarray
    visible: np.ndarray
    masked: np.ndarray


def make_mask(seq_len: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_strides = seq_len - 1
    n_visible = math.ceil((1.0 - ratio) * seq_len) - 1
    perm = rng.permutation(n_strides)
    visible = np.sort(perm[:n_visible])
    masked = np.sort(perm[n_visible:])
    return MaskPlan(permutation=perm, visible=visible, masked=masked)


@dataclass
class ModelParams:
    """All learnable tensors. Decoder-side fields are None for a fine-tuning
    model, head fields are None for a pre-training model."""

    cfg: ModelConfig
    embed_w: Tensor
    cls_token: Tensor
    pos_enc: Tensor
    enc_blocks: list[ssm.MambaBlockParams]
    enc_norm: Tensor
    enc2dec_w: Tensor | None = None
    enc2dec_b: Tensor | None = None
    dec_pos: Tensor | None = None
    mask_token: Tensor | None = None
    dec_blocks: list[ssm.MambaBlockParams] = field(default_factory=list)
    dec_norm: Tensor | None = None
    recon_w: Tensor | None = None
    recon_b: Tensor | None = None
    head_w1: Tensor | None = None
    head_b1: Tensor | None = None
    head_w2: Tensor | None = None
    head_b2: Tensor | None = None

    def named(self):
        yield "embed.w", self.embed_w
        yield "embed.cls", self.cls_token
        yield "embed.pos", self.pos_enc
        for i, blk in enumerate(self.enc_blocks):
            yield from blk.named(f"enc.{i}.")
        yield "enc.norm_gain", self.enc_norm
        simple = [
            ("enc2dec.w", self.enc2dec_w), ("enc2dec.b", self.enc2dec_b),
            ("dec.pos", self.dec_pos), ("dec.mask_token", self.mask_token),
        ]
        for name, t in simple:
            if t is not None:
                yield name, t
        for i, blk in enumerate(self.dec_blocks):
            yield from blk.named(f"dec.{i}.")
        tail = [
            ("dec.norm_gain", self.dec_norm),
            ("recon.w", self.recon_w), ("recon.b", self.recon_b),
            ("head.w1", self.head_w1), ("head.b1", self.head_b1),
            ("head.w2", self.head_w2), ("head.b2", self.head_b2),
        ]
        for name, t in tail:
            if t is not None:
                yield name, t

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.named())

    def num_params(self) -> int:
        total = 0
        for _, t in self.named():
            total += t.size
        return total


def _enc_dims(cfg: ModelConfig) -> ssm.SSMDims:
    return ssm.SSMDims(d=cfg.d_enc, e=cfg.e_enc, n=cfg.state_dim,
                       r=cfg.dt_rank, k=cfg.conv_kernel)


def _dec_dims(cfg: ModelConfig) -> ssm.SSMDims:
    return ssm.SSMDims(d=cfg.d_dec, e=cfg.e_dec, n=cfg.state_dim,
                       r=cfg.dt_rank, k=cfg.conv_kernel)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                with_decoder: bool = True, with_head: bool = False) -> ModelParams:
    """Positional tables and the class/mask tokens start from a 0.02-std
    normal; projections use fan-in uniform init."""

    def normal(*shape):
        return ad.parameter((rng.standard_normal(shape) * 0.02).astype(dtype))

    L, D = cfg.seq_len, cfg.d_enc
    params = ModelParams(
        cfg=cfg,
        embed_w=ad.parameter(
            (rng.uniform(-1, 1, size=(cfg.stride_len, D))
             / np.sqrt(cfg.stride_len)).astype(dtype)),
        cls_token=normal(D),
        pos_enc=normal(L, D),
        enc_blocks=[
            ssm.init_mamba_block(_enc_dims(cfg), rng, dtype, index=i,
                                 norm=cfg.norm, use_state_skip=cfg.use_state_skip)
            for i in range(cfg.depth_enc)
        ],
        enc_norm=ad.parameter(np.ones(D, dtype=dtype)),
    )
    if with_decoder:
        Dd = cfg.d_dec
        recon_width = cfg.d_enc if cfg.recon_target == "embedded" else cfg.stride_len
        params.enc2dec_w = ad.parameter(
            (rng.uniform(-1, 1, size=(D, Dd)) / np.sqrt(D)).astype(dtype))
        params.enc2dec_b = ad.parameter(np.zeros(Dd, dtype=dtype))
        params.dec_pos = normal(L, Dd)
        params.mask_token = normal(Dd)
        params.dec_blocks = [
            ssm.init_mamba_block(_dec_dims(cfg), rng, dtype, index=i,
                                 norm=cfg.norm, use_state_skip=cfg.use_state_skip)
            for i in range(cfg.depth_dec)
        ]
        params.dec_norm = ad.parameter(np.ones(Dd, dtype=dtype))
        # near-zero head weights with the bias at the byte-range midpoint:
        # an untrained model then predicts the marginal mean and scores near
        # the marginal variance on uniform bytes
        params.recon_w = ad.parameter(
            (rng.standard_normal((Dd, recon_width)) * 0.02 / np.sqrt(Dd))
            .astype(dtype))
        bias0 = 0.5 if cfg.recon_target == "bytes" else 0.0
        params.recon_b = ad.parameter(np.full(recon_width, bias0, dtype=dtype))
    if with_head:
        if cfg.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {cfg.num_classes}")
        C = cfg.num_classes
        params.head_w1 = ad.parameter(
            (rng.uniform(-1, 1, size=(D, D)) / np.sqrt(D)).astype(dtype))
        params.head_b1 = ad.parameter(np.zeros(D, dtype=dtype))
        params.head_w2 = ad.parameter(
            (rng.uniform(-1, 1, size=(D, C)) / np.sqrt(D)).astype(dtype))
        params.head_b2 = ad.parameter(np.zeros(C, dtype=dtype))
    return params


def normalize_strides(strides: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map raw bytes to [0, 1]; float inputs are assumed already normalized."""
    arr = np.asarray(strides)
    if arr.dtype.kind == "f":
        return arr.astype(dtype, copy=False)
    return arr.astype(dtype) / 255.0


def embed(sample, params: ModelParams) -> Tensor:
    """One sample's strides -> (L, d_enc) embedded rows with the class token
    appended last; accepts a StrideSample or an (n_strides, stride_len) array."""
    strides = sample if isinstance(sample, np.ndarray) else sample.strides
    x0 = embed_batch(normalize_strides(strides)[None], params)
    return ad.reshape(x0, x0.shape[1:])


def embed_batch(strides: np.ndarray, params: ModelParams) -> Tensor:
    """(B, n_strides, stride_len) normalized floats -> (B, L, d_enc)."""
    cfg = params.cfg
    B, n, w = strides.shape
    if n != cfg.n_strides or w != cfg.stride_len:
        raise ShapeError(
            f"expected {cfg.n_strides} strides of {cfg.stride_len} bytes, "
            f"got {n} of {w}")
    rows = ad.matmul(ad.Tensor(strides), params.embed_w)
    cls = ad.broadcast_to(ad.reshape(params.cls_token, (1, 1, cfg.d_enc)),
                          (B, 1, cfg.d_enc))
    x0 = ad.concat([rows, cls], axis=1)
    if cfg.use_pos_embed:
        x0 = ad.add(x0, params.pos_enc)
    return x0


def encoder_forward(x0: Tensor, params: ModelParams) -> Tensor:
    return ssm.stack_forward(x0, params.enc_blocks, params.enc_norm,
                             norm=params.cfg.norm)


def _restore_indices(plans: list[MaskPlan], seq_len: int) -> np.ndarray:
    """Row j of the encoder+mask concat holds original position order[j];
    the decoder needs the inverse map."""
    out = np.empty((len(plans), seq_len), dtype=np.int64)
    for b, plan in enumerate(plans):
        order = np.concatenate([plan.visible, [seq_len - 1], plan.masked])
        out[b, order] = np.arange(seq_len)
    return out


def pretrain_forward(
    x0: Tensor,
    targets: np.ndarray | None,
    plans: list[MaskPlan],
    params: ModelParams,
) -> tuple[Tensor, Tensor]:
    """Masked-reconstruction pass over a batch.

    x0: (B, L, d_enc) embedded rows; targets: (B, n_strides, stride_len)
    normalized bytes (ignored under recon_target="embedded", where the
    detached embedded rows are the targets). Returns the per-masked-position
    predictions (B, n_masked, width) and the scalar MSE over masked positions
    (exactly 0 when nothing is masked).
    """
    cfg = params.cfg
    if params.recon_w is None:
        raise ContractError("model was built without a decoder")
    B, L, _ = x0.shape
    if len(plans) != B:
        raise ContractError(f"{len(plans)} mask plans for batch of {B}")
    vis_idx = np.stack([np.concatenate([p.visible, [L - 1]]) for p in plans])
    enc_out = encoder_forward(ad.gather_rows(x0, vis_idx), params)
    enc_out = ad.add(ad.matmul(enc_out, params.enc2dec_w), params.enc2dec_b)

    n_masked = L - 1 - plans[0].visible.shape[0]
    mask_rows = ad.broadcast_to(
        ad.reshape(params.mask_token, (1, 1, cfg.d_dec)), (B, n_masked, cfg.d_dec))
    stacked = ad.concat([enc_out, mask_rows], axis=1)
    dec_in = ad.add(ad.gather_rows(stacked, _restore_indices(plans, L)),
                    params.dec_pos)
    dec_out = ssm.stack_forward(dec_in, params.dec_blocks, params.dec_norm,
                                norm=cfg.norm)

    masked_idx = np.stack([p.masked for p in plans])
    dec_masked = ad.gather_rows(dec_out, masked_idx)
    pred = ad.add(ad.matmul(dec_masked, params.recon_w), params.recon_b)

    if cfg.recon_target == "embedded":
        tgt_all = x0.data
    else:
        if targets is None:
            raise ContractError("byte-reconstruction mode needs stride targets")
        tgt_all = normalize_strides(targets, dtype=x0.dtype)
    tgt = np.take_along_axis(tgt_all, masked_idx[..., None], axis=1)
    loss = ad.mse(pred, tgt)
    if not np.isfinite(loss.data):
        raise NumericFaultError("non-finite reconstruction loss")
    return pred, loss


def finetune_forward(x0: Tensor, params: ModelParams) -> Tensor:
    """Full-sequence encoder pass; the normalized trailing class-token row
    feeds the MLP head. Returns unnormalized logits (B, C)."""
    if params.head_w1 is None:
        raise ContractError("model was built without a classification head")
    if params.cfg.num_classes < 2:
        raise ConfigError("classification needs at least 2 classes")
    h = encoder_forward(x0, params)
    cls = h[:, -1, :]
    hidden = ad.silu(ad.add(ad.matmul(cls, params.head_w1), params.head_b1))
    return ad.add(ad.matmul(hidden, params.head_w2), params.head_b2)


def loss_cls(logits: Tensor, labels) -> Tensor:
    return ad.softmax_cross_entropy(logits, labels)


def patch_tokens(flat: np.ndarray, stride_len: int) -> np.ndarray:
    """Ablation tokenizer: reshape each flow's bytes to a square matrix and
    emit 2 x (stride_len/2) patches, flattened row-major, row-major over the
    patch grid. Token count and width match 1-D stride cutting, but each
    token now groups vertically adjacent (semantically unrelated) bytes.
    """
    flat = np.asarray(flat)
    n, total = flat.shape
    side = math.isqrt(total)
    if side * side != total:
        raise ConfigError(
            f"patch splitting needs a square byte count, got {total}")
    if stride_len % 2:
        raise ConfigError("patch splitting needs an even stride_len")
    cols = stride_len // 2
    if side % 2 or side % cols:
        raise ConfigError(
            f"matrix side {side} is not divisible by the 2x{cols} patch shape")
    grid = flat.reshape(n, side // 2, 2, side // cols, cols)
    return np.ascontiguousarray(
        grid.transpose(0, 1, 3, 2, 4).reshape(n, total // stride_len, stride_len))


def count_parameters(cfg: ModelConfig) -> tuple[int, int]:
    """Exact learnable-scalar counts for the pre-training model
    (encoder + decoder + reconstruction head) and the fine-tuning model
    (encoder + classification head)."""
    rng = np.random.default_rng(0)
    pre = init_params(cfg, rng, with_decoder=True, with_head=False)
    fin = init_params(cfg, rng, with_decoder=False, with_head=True)
    return pre.num_params(), fin.num_params()
