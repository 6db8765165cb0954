"""Split-storage complex tensors and the numeric kernels built on them.

A :class:`CTensor` carries two real ``torch.Tensor`` arrays of identical
shape, one for the real part and one for the imaginary part. Every
operation here is expressed in real arithmetic on those two arrays, so
autograd differentiates with respect to the real and imaginary components
independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

__all__ = [
    "CTensor",
    "Spd2",
    "cmatmul",
    "hermitian",
    "softmax_rows",
    "cabs",
    "csgn",
    "spd2_sqrt",
    "spd2_inv_sqrt",
    "spd2_apply",
    "spd2_matmul",
]


class CTensor:
    """Dense complex tensor stored as parallel real/imaginary arrays."""

    __slots__ = ("re", "im")

    def __init__(self, re: Tensor, im: Tensor | None = None):
        if im is None:
            im = torch.zeros_like(re)
        if re.shape != im.shape:
            raise ValueError(f"re/im shape mismatch: {tuple(re.shape)} vs {tuple(im.shape)}")
        self.re = re
        self.im = im

    # construction helpers
    @classmethod
    def from_numpy(cls, z, dtype=torch.float64) -> CTensor:
        z = np.asarray(z)
        return cls(torch.as_tensor(np.ascontiguousarray(z.real), dtype=dtype),
                   torch.as_tensor(np.ascontiguousarray(z.imag), dtype=dtype))

    @classmethod
    def zeros(cls, *shape, dtype=torch.float64) -> CTensor:
        return cls(torch.zeros(*shape, dtype=dtype), torch.zeros(*shape, dtype=dtype))

    def numpy(self) -> np.ndarray:
        return self.re.detach().cpu().numpy() + 1j * self.im.detach().cpu().numpy()

    @property
    def shape(self) -> torch.Size:
        return self.re.shape

    @property
    def dtype(self) -> torch.dtype:
        return self.re.dtype

    @property
    def ndim(self) -> int:
        return self.re.ndim

    def __repr__(self) -> str:
        return f"CTensor(shape={tuple(self.shape)}, dtype={self.dtype})"

    # views
    def conj(self) -> CTensor:
        return CTensor(self.re, -self.im)

    def transpose(self, a: int = -2, b: int = -1) -> CTensor:
        return CTensor(self.re.transpose(a, b), self.im.transpose(a, b))

    @property
    def T(self) -> CTensor:
        return self.transpose(-2, -1)

    def reshape(self, *shape) -> CTensor:
        return CTensor(self.re.reshape(*shape), self.im.reshape(*shape))

    def __getitem__(self, idx) -> CTensor:
        return CTensor(self.re[idx], self.im[idx])

    def to(self, dtype) -> CTensor:
        return CTensor(self.re.to(dtype), self.im.to(dtype))

    def detach(self) -> CTensor:
        return CTensor(self.re.detach(), self.im.detach())

    # arithmetic
    def __add__(self, other) -> CTensor:
        if isinstance(other, CTensor):
            return CTensor(self.re + other.re, self.im + other.im)
        if isinstance(other, complex):
            return CTensor(self.re + other.real, self.im + other.imag)
        return CTensor(self.re + other, self.im)

    __radd__ = __add__

    def __neg__(self) -> CTensor:
        return CTensor(-self.re, -self.im)

    def __sub__(self, other) -> CTensor:
        return self + (-other)

    def __rsub__(self, other) -> CTensor:
        return (-self) + other

    def __mul__(self, other) -> CTensor:
        if isinstance(other, CTensor):
            return CTensor(self.re * other.re - self.im * other.im,
                           self.re * other.im + self.im * other.re)
        if isinstance(other, complex):
            a, b = other.real, other.imag
            return CTensor(self.re * a - self.im * b, self.re * b + self.im * a)
        return CTensor(self.re * other, self.im * other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> CTensor:
        if isinstance(other, (CTensor, complex)):
            raise TypeError("division by a complex value is not supported")
        return CTensor(self.re / other, self.im / other)

    def __matmul__(self, other: CTensor) -> CTensor:
        return cmatmul(self, other)

    def abs(self) -> Tensor:
        return cabs(self)

    def sgn(self) -> CTensor:
        return csgn(self)


def cat(items: list[CTensor], dim: int = -1) -> CTensor:
    return CTensor(torch.cat([z.re for z in items], dim), torch.cat([z.im for z in items], dim))


def stack(items: list[CTensor], dim: int = 0) -> CTensor:
    return CTensor(torch.stack([z.re for z in items], dim), torch.stack([z.im for z in items], dim))


def cmatmul(a: CTensor, b: CTensor) -> CTensor:
    """Complex matrix product ``a @ b`` (leading batch dims broadcast)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("cmatmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"inner dimensions disagree: {tuple(a.shape)} @ {tuple(b.shape)}")
    re = a.re @ b.re - a.im @ b.im
    im = a.re @ b.im + a.im @ b.re
    return CTensor(re, im)


def hermitian(a: CTensor) -> CTensor:
    """Conjugate transpose over the last two axes."""
    if a.ndim < 2:
        raise ValueError("hermitian needs a matrix")
    return CTensor(a.re.transpose(-2, -1), -a.im.transpose(-2, -1))


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax along the last axis.

    ``-inf`` entries come out as exact zeros. A row made only of ``-inf``
    has no defined distribution and raises ``ValueError``.
    """
    if bool(torch.isneginf(x).all(dim=-1).any()):
        raise ValueError("softmax row is fully masked")
    # torch subtracts the row max before exponentiating; exp(-inf) == 0 exactly
    return torch.softmax(x, dim=-1)


def _safe_modulus(z: CTensor) -> tuple[Tensor, Tensor]:
    sq = z.re * z.re + z.im * z.im
    nonzero = sq > 0
    # keep sqrt away from 0 so its derivative stays finite on the masked branch
    mod = torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq)))
    return mod, nonzero


def cabs(z: CTensor) -> Tensor:
    """Elementwise modulus; derivative at 0 is taken as 0."""
    mod, nonzero = _safe_modulus(z)
    return torch.where(nonzero, mod, torch.zeros_like(mod))


def csgn(z: CTensor) -> CTensor:
    """Elementwise ``z/|z|``, with ``csgn(0) = 1`` and zero derivative there."""
    mod, nonzero = _safe_modulus(z)
    re = torch.where(nonzero, z.re / mod, torch.ones_like(mod))
    im = torch.where(nonzero, z.im / mod, torch.zeros_like(mod))
    return CTensor(re, im)


@dataclass(frozen=True)
class Spd2:
    """Symmetric 2x2 matrix ``[[a, b], [b, c]]``.

    Fields may be python floats or broadcastable tensors, which lets one
    object describe a whole batch of per-token covariances.
    """

    a: float | Tensor
    b: float | Tensor
    c: float | Tensor

    def is_pd(self) -> bool:
        a, b, c = (torch.as_tensor(v, dtype=torch.float64) for v in (self.a, self.b, self.c))
        return bool(((a > 0) & (c > 0) & (b * b < a * c)).all())

    def as_matrix(self) -> np.ndarray:
        return np.array([[float(self.a), float(self.b)], [float(self.b), float(self.c)]])


def _sqrt(v):
    return torch.sqrt(v) if isinstance(v, Tensor) else math.sqrt(v)


def _check_pd(m: Spd2) -> None:
    if not m.is_pd():
        raise ValueError("matrix is not positive definite (need a>0, c>0, b^2<ac)")


def spd2_sqrt(m: Spd2, check: bool = True) -> Spd2:
    """Principal square root via ``(M + sI) / t``, ``s = sqrt(det)``, ``t = sqrt(tr + 2s)``."""
    if check:
        _check_pd(m)
    s = _sqrt(m.a * m.c - m.b * m.b)
    t = _sqrt(m.a + m.c + 2 * s)
    return Spd2((m.a + s) / t, m.b / t, (m.c + s) / t)


def spd2_inv_sqrt(m: Spd2, check: bool = True) -> Spd2:
    """Inverse of :func:`spd2_sqrt` through the 2x2 adjugate formula."""
    if check:
        _check_pd(m)
    s = _sqrt(m.a * m.c - m.b * m.b)
    t = _sqrt(m.a + m.c + 2 * s)
    # det(sqrt(M)) = sqrt(det M) = s
    scale = 1.0 / (s * t)
    return Spd2((m.c + s) * scale, -m.b * scale, (m.a + s) * scale)


def spd2_matmul(x: Spd2, y: Spd2) -> tuple:
    """Product of two symmetric 2x2 matrices as a general ``(m00, m01, m10, m11)``."""
    return (x.a * y.a + x.b * y.b, x.a * y.b + x.b * y.c,
            x.b * y.a + x.c * y.b, x.b * y.b + x.c * y.c)


def spd2_apply(m, z: CTensor) -> CTensor:
    """Left-multiply stacked ``(re, im)`` by a 2x2 matrix.

    ``m`` is either an :class:`Spd2` or a general ``(m00, m01, m10, m11)`` tuple.
    """
    if isinstance(m, Spd2):
        m = (m.a, m.b, m.b, m.c)
    m00, m01, m10, m11 = m
    return CTensor(m00 * z.re + m01 * z.im, m10 * z.re + m11 * z.im)
