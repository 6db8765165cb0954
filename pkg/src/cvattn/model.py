"""Complex transformer building blocks, the encoder/decoder stacks, and the real baseline."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .attention import (ComplexLinear, MultiHeadAttention, causal_mask, real_attend,
                        validate_combination)
from .autodiff import CParameter, complex_init
from .config import ModelConfig
from .ctensor import CTensor
from .norm import ComplexLayerNorm

__all__ = [
    "ComplexLinear", "ComplexConv1d", "crelu", "complex_dropout", "positional_encoding",
    "apply_pe", "FeedForward", "ClassificationHead", "ComplexTransformer",
    "RealTransformer", "build_model", "interleave", "count_parameters", "causal_mask",
]


def complex_linear(x: CTensor, layer: ComplexLinear) -> CTensor:
    return layer(x)


def crelu(x: CTensor) -> CTensor:
    """ReLU applied to the real and imaginary parts separately."""
    return CTensor(torch.relu(x.re), torch.relu(x.im))


def complex_dropout(x: CTensor, p: float, training: bool = True,
                    generator: torch.Generator | None = None) -> CTensor:
    """Inverted dropout with one Bernoulli mask shared by both parts, so phases survive."""
    if not training or p == 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=torch.float64) >= p).to(x.dtype)
    keep = keep / (1.0 - p)
    return CTensor(x.re * keep, x.im * keep)


class ComplexConv1d(nn.Module):
    """Complex cross-correlation over the sequence axis.

    Input is ``(..., seq, ch_in)``; the kernel is stored as ``(k, ch_in, ch_out)``.
    """

    def __init__(self, ch_in: int, ch_out: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 1, bias: bool = True, dtype=torch.float64):
        super().__init__()
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ValueError("invalid convolution geometry")
        self.ch_in, self.ch_out = ch_in, ch_out
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = ch_in * kernel_size
        self.kernel = CParameter(*complex_init((kernel_size, ch_in, ch_out), fan_in, dtype=dtype))
        self.bias = CParameter.zeros(ch_out, dtype=dtype) if bias else None

    def forward(self, x: CTensor) -> CTensor:
        bias = None if self.bias is None else self.bias.value
        return complex_conv1d(x, self.kernel.value, self.stride, self.padding, bias)


def complex_conv1d(x: CTensor, kernel: CTensor, stride: int = 1, padding: int = 0,
                   bias: CTensor | None = None) -> CTensor:
    """``out[t, o] = sum_{j, c} x[t*stride + j - padding, c] * kernel[j, c, o]``."""
    k, ch_in, ch_out = kernel.shape
    if x.shape[-1] != ch_in:
        raise ValueError(f"expected {ch_in} input channels, got {x.shape[-1]}")
    seq = x.shape[-2]
    if seq + 2 * padding < k:
        raise ValueError("kernel longer than the padded input")
    lead = x.shape[:-2]
    xr = x.re.reshape(-1, seq, ch_in).transpose(1, 2)
    xi = x.im.reshape(-1, seq, ch_in).transpose(1, 2)
    # one real convolution on stacked channels: [[Wr, -Wi], [Wi, Wr]]
    wr = kernel.re.permute(2, 1, 0)
    wi = kernel.im.permute(2, 1, 0)
    w = torch.cat([torch.cat([wr, -wi], 1), torch.cat([wi, wr], 1)], 0)
    b = None if bias is None else torch.cat([bias.re, bias.im])
    y = torch.nn.functional.conv1d(torch.cat([xr, xi], 1), w, b, stride=stride, padding=padding)
    y = y.transpose(1, 2)
    out_len = y.shape[1]
    re = y[..., :ch_out].reshape(*lead, out_len, ch_out)
    im = y[..., ch_out:].reshape(*lead, out_len, ch_out)
    return CTensor(re, im)


def positional_encoding(seq_len: int, d_model: int, dtype=torch.float64) -> Tensor:
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    pos = torch.arange(seq_len, dtype=torch.float64).unsqueeze(1)
    freq = torch.pow(10000.0, -torch.arange(0, d_model, 2, dtype=torch.float64) / d_model)
    pe = torch.empty(seq_len, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype)


def apply_pe(x: CTensor, imag: bool = False) -> CTensor:
    """Add the encoding to the real part (and to the imaginary part if ``imag``)."""
    pe = positional_encoding(x.shape[-2], x.shape[-1], x.dtype)
    return CTensor(x.re + pe, x.im + pe if imag else x.im)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout_p: float = 0.0):
        super().__init__()
        self.lin1 = ComplexLinear(d_model, d_ff)
        self.lin2 = ComplexLinear(d_ff, d_model)
        self.dropout_p = dropout_p

    def forward(self, x: CTensor) -> CTensor:
        h = crelu(self.lin1(x))
        h = complex_dropout(h, self.dropout_p, self.training)
        return self.lin2(h)


def feed_forward(x: CTensor, params: FeedForward) -> CTensor:
    return params(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.variant, cfg.kernel,
                                       real_projections=_real_proj(cfg))
        self.norm1 = ComplexLayerNorm(cfg.d_model, cfg.norm_eps, cfg.per_feature_norm)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout_p)
        self.norm2 = ComplexLayerNorm(cfg.d_model, cfg.norm_eps, cfg.per_feature_norm)

    def forward(self, x: CTensor) -> CTensor:
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ff(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        real_proj = _real_proj(cfg)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.variant, cfg.kernel,
                                            real_projections=real_proj)
        self.norm1 = ComplexLayerNorm(cfg.d_model, cfg.norm_eps, cfg.per_feature_norm)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.variant, cfg.kernel,
                                             real_projections=real_proj)
        self.norm2 = ComplexLayerNorm(cfg.d_model, cfg.norm_eps, cfg.per_feature_norm)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout_p)
        self.norm3 = ComplexLayerNorm(cfg.d_model, cfg.norm_eps, cfg.per_feature_norm)

    def forward(self, x: CTensor, memory: CTensor, mask: Tensor) -> CTensor:
        x = self.norm1(x + self.self_attn(x, x, x, mask))
        x = self.norm2(x + self.cross_attn(x, memory, memory))
        return self.norm3(x + self.ff(x))


def _real_proj(cfg: ModelConfig) -> bool:
    return cfg.variant == "yang" and cfg.yang_real_projections


class ConvEmbedding(nn.Module):
    """Four complex conv layers (kernel 3, CReLU) followed by a complex linear map."""

    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        chans = [d_in, d_model, d_model, d_model, d_model]
        self.convs = nn.ModuleList(ComplexConv1d(a, b, 3, 1, 1) for a, b in zip(chans, chans[1:]))
        self.proj = ComplexLinear(d_model, d_model)

    def forward(self, x: CTensor) -> CTensor:
        for conv in self.convs:
            x = crelu(conv(x))
        return self.proj(x)


class ClassificationHead(nn.Module):
    """Real logits from concatenated ``(Re, Im)`` features; ``pool`` averages tokens first."""

    def __init__(self, d_model: int, n_classes: int, pool: bool):
        super().__init__()
        self.pool = pool
        self.linear = nn.Linear(2 * d_model, n_classes, dtype=torch.float64)

    def forward(self, x: CTensor) -> Tensor:
        re, im = x.re, x.im
        if self.pool:
            re, im = re.mean(-2), im.mean(-2)
        return self.linear(torch.cat([re, im], -1))


def classification_head(x: CTensor, head: ClassificationHead) -> Tensor:
    return head(x)


def decoder_inputs(targets: Tensor) -> Tensor:
    """Shift label frames right by one, with an all-zero start frame."""
    start = torch.zeros_like(targets[..., :1, :])
    return torch.cat([start, targets[..., :-1, :]], -2)


class ComplexTransformer(nn.Module):
    """Encoder-only classifier, or encoder-decoder sequence model when ``cfg.task == 'sequence'``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        validate_combination(cfg.variant, cfg.kernel)
        self.cfg = cfg
        self.sequence = cfg.task == "sequence"
        if cfg.conv_embedding:
            self.embed = ConvEmbedding(cfg.d_in, cfg.d_model)
        else:
            self.embed = ComplexLinear(cfg.d_in, cfg.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        if self.sequence:
            self.dec_embed = ComplexLinear(cfg.n_classes, cfg.d_model)
            self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.head = ClassificationHead(cfg.d_model, cfg.n_classes, pool=not self.sequence)

    def encode(self, tokens: CTensor) -> CTensor:
        x = apply_pe(self.embed(tokens), self.cfg.pe_imag)
        for layer in self.encoder:
            x = layer(x)
        return x

    def decode(self, dec_in: Tensor, memory: CTensor) -> Tensor:
        """Logits for every target position given (shifted) label frames ``dec_in``."""
        x = self.dec_embed(CTensor(dec_in, torch.zeros_like(dec_in)))
        x = apply_pe(x, self.cfg.pe_imag)
        mask = causal_mask(x.shape[-2])
        for layer in self.decoder:
            x = layer(x, memory, mask)
        return self.head(x)

    def forward(self, tokens: CTensor, dec_in: Tensor | None = None) -> Tensor:
        memory = self.encode(tokens)
        if not self.sequence:
            return self.head(memory)
        if dec_in is None:
            raise ValueError("sequence model needs decoder inputs")
        return self.decode(dec_in, memory)


def encoder_forward(tokens: CTensor, model: ComplexTransformer) -> CTensor:
    return model.encode(tokens)


def decoder_forward(targets: Tensor, memory: CTensor, model: ComplexTransformer) -> Tensor:
    return model.decode(targets, memory)


def interleave(x: CTensor) -> Tensor:
    """``[Re0, Im0, Re1, Im1, ...]`` along the last axis."""
    return torch.stack([x.re, x.im], -1).reshape(*x.shape[:-1], 2 * x.shape[-1])


class RealMultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq, self.wk, self.wv, self.wo = (nn.Linear(d_model, d_model, dtype=torch.float64)
                                              for _ in range(4))

    def forward(self, q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
        h = self.n_heads

        def split(t):
            *lead, n, d = t.shape
            return t.reshape(*lead, n, h, d // h).transpose(-3, -2)

        out = real_attend(split(self.wq(q)), split(self.wk(k)), split(self.wv(v)), mask)
        *lead, _, n, dh = out.shape
        return self.wo(out.transpose(-3, -2).reshape(*lead, n, h * dh))


class RealFeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout_p: float):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff, dtype=torch.float64)
        self.lin2 = nn.Linear(d_ff, d_model, dtype=torch.float64)
        self.dropout = nn.Dropout(dropout_p)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(self.dropout(torch.relu(self.lin1(x))))


class RealEncoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, p: float):
        super().__init__()
        self.attn = RealMultiHeadAttention(d, n_heads)
        self.norm1 = nn.LayerNorm(d, dtype=torch.float64)
        self.ff = RealFeedForward(d, d_ff, p)
        self.norm2 = nn.LayerNorm(d, dtype=torch.float64)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ff(x))


class RealDecoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int, p: float):
        super().__init__()
        self.self_attn = RealMultiHeadAttention(d, n_heads)
        self.norm1 = nn.LayerNorm(d, dtype=torch.float64)
        self.cross_attn = RealMultiHeadAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d, dtype=torch.float64)
        self.ff = RealFeedForward(d, d_ff, p)
        self.norm3 = nn.LayerNorm(d, dtype=torch.float64)

    def forward(self, x: Tensor, memory: Tensor, mask: Tensor) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x, x, mask))
        x = self.norm2(x + self.cross_attn(x, memory, memory))
        return self.norm3(x + self.ff(x))


class RealConvEmbedding(nn.Module):
    def __init__(self, d_in: int, d: int):
        super().__init__()
        chans = [d_in, d, d, d, d]
        self.convs = nn.ModuleList(nn.Conv1d(a, b, 3, 1, 1, dtype=torch.float64)
                                   for a, b in zip(chans, chans[1:]))
        self.proj = nn.Linear(d, d, dtype=torch.float64)

    def forward(self, x: Tensor) -> Tensor:
        lead, seq = x.shape[:-2], x.shape[-2]
        y = x.reshape(-1, seq, x.shape[-1]).transpose(1, 2)
        for conv in self.convs:
            y = torch.relu(conv(y))
        y = y.transpose(1, 2)
        return self.proj(y.reshape(*lead, seq, y.shape[-1]))


class RealTransformer(nn.Module):
    """Ordinary real transformer on interleaved inputs.

    Every complex unit of ``cfg`` becomes two real units: width ``2*d_model``,
    hidden ``2*d_ff``, input ``2*d_in``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.sequence = cfg.task == "sequence"
        d, d_ff, p = 2 * cfg.d_model, 2 * cfg.d_ff, cfg.dropout_p
        if cfg.conv_embedding:
            self.embed = RealConvEmbedding(2 * cfg.d_in, d)
        else:
            self.embed = nn.Linear(2 * cfg.d_in, d, dtype=torch.float64)
        self.encoder = nn.ModuleList(RealEncoderLayer(d, cfg.n_heads, d_ff, p) for _ in range(cfg.n_layers))
        if self.sequence:
            self.dec_embed = nn.Linear(cfg.n_classes, d, dtype=torch.float64)
            self.decoder = nn.ModuleList(RealDecoderLayer(d, cfg.n_heads, d_ff, p)
                                         for _ in range(cfg.n_layers))
        self.head = nn.Linear(d, cfg.n_classes, dtype=torch.float64)

    def encode(self, tokens: CTensor) -> Tensor:
        x = self.embed(interleave(tokens))
        x = x + positional_encoding(x.shape[-2], x.shape[-1], x.dtype)
        for layer in self.encoder:
            x = layer(x)
        return x

    def decode(self, dec_in: Tensor, memory: Tensor) -> Tensor:
        x = self.dec_embed(dec_in)
        x = x + positional_encoding(x.shape[-2], x.shape[-1], x.dtype)
        mask = causal_mask(x.shape[-2])
        for layer in self.decoder:
            x = layer(x, memory, mask)
        return self.head(x)

    def forward(self, tokens: CTensor, dec_in: Tensor | None = None) -> Tensor:
        memory = self.encode(tokens)
        if not self.sequence:
            return self.head(memory.mean(-2))
        if dec_in is None:
            raise ValueError("sequence model needs decoder inputs")
        return self.decode(dec_in, memory)


def real_baseline_forward(tokens: CTensor, model: RealTransformer, dec_in: Tensor | None = None) -> Tensor:
    return model(tokens, dec_in)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float64) -> nn.Module:
    """Construct and initialize a model deterministically from ``seed``."""
    cfg.validate()
    torch.manual_seed(seed)
    model = RealTransformer(cfg) if cfg.variant == "real" else ComplexTransformer(cfg)
    return model.to(dtype)


def count_parameters(model: nn.Module) -> dict[str, int]:
    """Real-valued parameter counts per top-level block plus ``total``.

    Complex parameters are two real tensors, so their real and imaginary
    parts are counted separately.
    """
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + p.numel()
    counts["total"] = sum(counts.values())
    return counts


def save_checkpoint(model: nn.Module, directory) -> None:
    """Write ``manifest.txt`` (key, dtype, shape, byte offset) and ``weights.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# cvattn checkpoint v1: key<TAB>dtype<TAB>shape<TAB>offset<TAB>nbytes"]
    offset = 0
    with open(directory / "weights.bin", "wb") as fh:
        for key, t in model.state_dict().items():
            arr = t.detach().cpu().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            data = np.ascontiguousarray(arr).tobytes()
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"{key}\t{arr.dtype.str}\t{shape}\t{offset}\t{len(data)}")
            fh.write(data)
            offset += len(data)
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(model: nn.Module, directory) -> None:
    """Load a checkpoint written by :func:`save_checkpoint`; shapes must match exactly."""
    directory = Path(directory)
    blob = (directory / "weights.bin").read_bytes()
    state = model.state_dict()
    seen = set()
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, dtype, shape, offset, nbytes = line.split("\t")
        if key not in state:
            raise ValueError(f"checkpoint key {key!r} not present in model")
        shape = tuple(int(s) for s in shape.split(",") if s)
        arr = np.frombuffer(blob, dtype=np.dtype(dtype), count=math.prod(shape) if shape else 1,
                            offset=int(offset)).reshape(shape)
        if tuple(state[key].shape) != shape:
            raise ValueError(f"shape mismatch for {key}: checkpoint {shape}, model {tuple(state[key].shape)}")
        with torch.no_grad():
            state[key].copy_(torch.from_numpy(arr.copy()).to(state[key].dtype))
        seen.add(key)
    missing = set(state) - seen
    if missing:
        raise ValueError(f"checkpoint lacks {sorted(missing)[:3]}...")
