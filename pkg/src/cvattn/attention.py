"""Complex scaled dot-product attention variants and multi-head assembly.

All functions accept leading batch/head dimensions: ``q`` is ``(..., n, d_k)``,
``k`` is ``(..., m, d_k)``, ``v`` is ``(..., m, d_v)``. Masks are boolean
``(n, m)`` (or broadcastable) with ``True`` marking blocked positions.
"""

from __future__ import annotations

import math
from enum import Enum

import torch
from torch import Tensor, nn

from . import ctensor as ct
from .autodiff import CParameter, complex_init
from .ctensor import CTensor


class SimilarityKernel(str, Enum):
    DOT = "dot"  # <Q, K> = Q conj(K)^T
    PLAIN = "qkt"  # Q K^T, no conjugation


class AttentionVariant(str, Enum):
    CATT = "catt"
    AATT = "aatt"
    APATT = "apatt"
    RIATT = "riatt"
    YANG = "yang"


def validate_combination(variant, kernel) -> None:
    variant, kernel = AttentionVariant(variant), SimilarityKernel(kernel)
    if variant is AttentionVariant.YANG and kernel is SimilarityKernel.DOT:
        raise ValueError("the split attention scheme is only defined for the plain Q K^T product (kernel 'qkt')")


def causal_mask(n: int, m: int | None = None) -> Tensor:
    """Blocked iff column > row."""
    m = n if m is None else m
    return torch.ones(n, m, dtype=torch.bool).triu(1)


def _check_mask(mask: Tensor | None, n: int, m: int) -> None:
    if mask is None:
        return
    if mask.shape[-2:] != (n, m):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not fit scores ({n}, {m})")
    if bool(mask.all(dim=-1).any()):
        raise ValueError("attention mask blocks an entire row")


def _masked(scores: Tensor, mask: Tensor | None) -> Tensor:
    if mask is None:
        return scores
    return scores.masked_fill(mask, float("-inf"))


def similarity(q: CTensor, k: CTensor, kernel=SimilarityKernel.DOT) -> CTensor:
    """Unscaled score matrix: ``q conj(k)^T`` (dot) or ``q k^T`` (qkt)."""
    kernel = SimilarityKernel(kernel)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key width mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    kt = ct.hermitian(k) if kernel is SimilarityKernel.DOT else k.T
    return ct.cmatmul(q, kt)


def attention_weights(q: CTensor, k: CTensor, variant, kernel, mask: Tensor | None,
                      d_k: int | None = None) -> CTensor:
    """Complex weight matrix that multiplies ``V`` for the non-split variants."""
    variant = AttentionVariant(variant)
    if variant is AttentionVariant.YANG:
        raise ValueError("split attention has no single weight matrix; use yang_attend")
    d_k = q.shape[-1] if d_k is None else d_k
    scale = 1.0 / math.sqrt(d_k)
    s = similarity(q, k, kernel)
    _check_mask(mask, s.shape[-2], s.shape[-1])
    if variant is AttentionVariant.CATT:
        w = ct.softmax_rows(_masked(s.re * scale, mask))
        return CTensor(w, torch.zeros_like(w))
    if variant is AttentionVariant.AATT:
        w = ct.softmax_rows(_masked(ct.cabs(s) * scale, mask))
        return CTensor(w, torch.zeros_like(w))
    if variant is AttentionVariant.APATT:
        w = ct.softmax_rows(_masked(ct.cabs(s) * scale, mask))
        return ct.csgn(s) * w
    # RIATT: two independent softmaxes become real and imaginary weights
    w_re = ct.softmax_rows(_masked(s.re * scale, mask))
    w_im = ct.softmax_rows(_masked(s.im * scale, mask))
    return CTensor(w_re, w_im)


def attend(q: CTensor, k: CTensor, v: CTensor, variant=AttentionVariant.CATT,
           kernel=SimilarityKernel.DOT, mask: Tensor | None = None,
           d_k: int | None = None) -> CTensor:
    if AttentionVariant(variant) is AttentionVariant.YANG:
        raise ValueError("use yang_attend for the split scheme")
    if v.shape[-2] != k.shape[-2]:
        raise ValueError("V must have one row per key")
    w = attention_weights(q, k, variant, kernel, mask, d_k)
    if AttentionVariant(variant) in (AttentionVariant.CATT, AttentionVariant.AATT):
        # real weights: skip the zero imaginary half of the product
        return CTensor(w.re @ v.re, w.re @ v.im)
    return ct.cmatmul(w, v)


def real_attend(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """Ordinary real scaled dot-product attention."""
    _check_mask(mask, q.shape[-2], k.shape[-2])
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    return ct.softmax_rows(_masked(scores, mask)) @ v


def yang_attend(q: CTensor, k: CTensor, v: CTensor, mask: Tensor | None = None,
                d_k: int | None = None) -> CTensor:
    """Real attention over the eight summands of the expanded ``Q K^T V``.

    With ``Q = A+iB``, ``K = C+iD``, ``V = E+iF`` and
    ``R(X, Y, Z) = softmax(X Y^T / sqrt(d_k)) Z``:

    re = R(A,C,E) - R(A,D,F) - R(B,C,F) - R(B,D,E)
    im = R(A,C,F) + R(A,D,E) + R(B,C,E) - R(B,D,F)
    """
    if v.shape[-2] != k.shape[-2]:
        raise ValueError("V must have one row per key")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query/key width mismatch")
    _check_mask(mask, q.shape[-2], k.shape[-2])
    d_k = q.shape[-1] if d_k is None else d_k
    scale = 1.0 / math.sqrt(d_k)
    a, b, c, d, e, f = q.re, q.im, k.re, k.im, v.re, v.im

    def weights(x, y):
        return ct.softmax_rows(_masked((x @ y.transpose(-2, -1)) * scale, mask))

    w_ac, w_ad, w_bc, w_bd = weights(a, c), weights(a, d), weights(b, c), weights(b, d)
    re = w_ac @ e - w_ad @ f - w_bc @ f - w_bd @ e
    im = w_ac @ f + w_ad @ e + w_bc @ e - w_bd @ f
    return CTensor(re, im)


def _split_heads(x: CTensor, h: int) -> CTensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, h, d // h).transpose(-3, -2)


def _merge_heads(x: CTensor) -> CTensor:
    *lead, h, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dh)


def multi_head_attention(wq, wk, wv, wo, q: CTensor, k: CTensor, v: CTensor,
                         variant=AttentionVariant.CATT, kernel=SimilarityKernel.DOT,
                         mask: Tensor | None = None, h: int = 1) -> CTensor:
    """Project, split into ``h`` heads, attend per head, concatenate, project.

    ``wq``/``wk``/``wv``/``wo`` are callables mapping ``(..., n, d_model)``
    complex tensors to the same width (e.g. :class:`ComplexLinear` modules).
    """
    d_model = q.shape[-1]
    if d_model % h:
        raise ValueError(f"d_model={d_model} is not divisible by {h} heads")
    qh, kh, vh = _split_heads(wq(q), h), _split_heads(wk(k), h), _split_heads(wv(v), h)
    d_k = d_model // h
    if AttentionVariant(variant) is AttentionVariant.YANG:
        heads = yang_attend(qh, kh, vh, mask, d_k)
    else:
        heads = attend(qh, kh, vh, variant, kernel, mask, d_k)
    return wo(_merge_heads(heads))


class ComplexLinear(nn.Module):
    """``y = x W^T + b`` with complex ``W`` (out x in) and ``b``."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True,
                 generator: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = CParameter(*complex_init((d_out, d_in), d_in, generator, dtype))
        self.bias = CParameter.zeros(d_out, dtype=dtype) if bias else None

    def forward(self, x: CTensor) -> CTensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"expected last dim {self.d_in}, got {x.shape[-1]}")
        if x.ndim == 1:
            return self(x.reshape(1, -1)).reshape(-1)
        y = ct.cmatmul(x, self.weight.value.T)
        if self.bias is not None:
            y = y + self.bias.value
        return y


class RealProjection(nn.Module):
    """Real-valued weights applied identically to the real and imaginary parts."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator | None = None,
                 dtype=torch.float64):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        w = (torch.rand(d_out, d_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.weight = nn.Parameter(w.to(dtype))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dtype))

    def forward(self, x: CTensor) -> CTensor:
        wt = self.weight.T
        return CTensor(x.re @ wt + self.bias, x.im @ wt)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, variant=AttentionVariant.CATT,
                 kernel=SimilarityKernel.DOT, real_projections: bool = False,
                 generator: torch.Generator | None = None, dtype=torch.float64):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by {n_heads} heads")
        validate_combination(variant, kernel)
        self.variant = AttentionVariant(variant)
        self.kernel = SimilarityKernel(kernel)
        self.n_heads = n_heads
        proj = RealProjection if real_projections else ComplexLinear
        self.wq = proj(d_model, d_model, generator=generator, dtype=dtype)
        self.wk = proj(d_model, d_model, generator=generator, dtype=dtype)
        self.wv = proj(d_model, d_model, generator=generator, dtype=dtype)
        self.wo = proj(d_model, d_model, generator=generator, dtype=dtype)

    def forward(self, q: CTensor, k: CTensor, v: CTensor, mask: Tensor | None = None) -> CTensor:
        return multi_head_attention(self.wq, self.wk, self.wv, self.wo, q, k, v,
                                    self.variant, self.kernel, mask, self.n_heads)
