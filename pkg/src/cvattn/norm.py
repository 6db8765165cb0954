"""Complex layer normalization by 2x2 covariance whitening."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import ctensor as ct
from .autodiff import CParameter
from .ctensor import CTensor, Spd2

ZETA_EPS = 1e-6


def complex_stats(z: CTensor) -> tuple[CTensor, Spd2]:
    """Mean and population 2x2 covariance of ``(Re z, Im z)`` along the last axis."""
    n = z.shape[-1]
    if n < 2:
        raise ValueError("need at least two features to estimate a covariance")
    mean = CTensor(z.re.mean(-1, keepdim=True), z.im.mean(-1, keepdim=True))
    xr, xi = z.re - mean.re, z.im - mean.im
    cov = Spd2((xr * xr).mean(-1), (xr * xi).mean(-1), (xi * xi).mean(-1))
    return CTensor(mean.re.squeeze(-1), mean.im.squeeze(-1)), cov


def materialize_zeta(raw: Tensor) -> Spd2:
    """Map unconstrained ``(alpha, gamma, delta)`` (last axis) to a PD matrix."""
    a = F.softplus(raw[..., 0]) + ZETA_EPS
    c = F.softplus(raw[..., 1]) + ZETA_EPS
    b = torch.tanh(raw[..., 2]) * torch.sqrt(a * c) * (1 - ZETA_EPS)
    return Spd2(a, b, c)


def identity_zeta_raw() -> list[float]:
    """Raw parameters whose materialized matrix is the identity."""
    return [math.log(math.expm1(1 - ZETA_EPS))] * 2 + [0.0]


def zeta_raw_for(m: Spd2) -> list[float]:
    """Inverse of :func:`materialize_zeta` for a given PD matrix."""
    a, b, c = float(m.a), float(m.b), float(m.c)
    alpha = math.log(math.expm1(a - ZETA_EPS))
    gamma = math.log(math.expm1(c - ZETA_EPS))
    delta = math.atanh(b / (math.sqrt(a * c) * (1 - ZETA_EPS)))
    return [alpha, gamma, delta]


def complex_layer_norm(x: CTensor, zeta: Spd2 | None = None, beta: CTensor | complex | None = None,
                       eps: float = 1e-5) -> CTensor:
    """Whiten every token over its feature axis, then recolor by ``zeta`` and shift by ``beta``.

    ``zeta`` fields and ``beta`` broadcast against the feature axis, so a
    per-feature affine is expressed with length-``n_features`` tensors.
    """
    mean, cov = complex_stats(x)
    centred = CTensor(x.re - mean.re.unsqueeze(-1), x.im - mean.im.unsqueeze(-1))
    # eps keeps the inverse square root finite for constant or purely real tokens
    whiten = ct.spd2_inv_sqrt(Spd2(cov.a + eps, cov.b, cov.c + eps), check=False)
    w = Spd2(whiten.a.unsqueeze(-1), whiten.b.unsqueeze(-1), whiten.c.unsqueeze(-1))
    if zeta is None:
        out = ct.spd2_apply(w, centred)
    else:
        root = ct.spd2_sqrt(zeta, check=False)
        out = ct.spd2_apply(ct.spd2_matmul(root, w), centred)
    if beta is not None:
        out = out + beta
    return out


class ComplexLayerNorm(nn.Module):
    """Learnable-affine complex layer norm (5 real degrees of freedom per layer).

    With ``per_feature=True`` every feature gets its own ``zeta``/``beta``.
    """

    def __init__(self, n_features: int, eps: float = 1e-5, per_feature: bool = False,
                 dtype=torch.float64):
        super().__init__()
        self.eps = eps
        self.per_feature = per_feature
        shape = (n_features,) if per_feature else ()
        raw = torch.tensor(identity_zeta_raw(), dtype=dtype).expand(*shape, 3).clone()
        self.zeta_raw = nn.Parameter(raw)
        self.beta = CParameter.zeros(*shape, dtype=dtype)

    @property
    def zeta(self) -> Spd2:
        return materialize_zeta(self.zeta_raw)

    def forward(self, x: CTensor) -> CTensor:
        return complex_layer_norm(x, self.zeta, self.beta.value, self.eps)
