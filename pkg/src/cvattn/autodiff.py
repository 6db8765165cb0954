"""Real-composite gradients through complex computation graphs.

The tape is torch's autograd graph: each forward pass records the
primitive real operations on the ``re``/``im`` arrays of every
:class:`~cvattn.ctensor.CTensor`. Because a complex parameter is held as two
real leaves, reverse mode yields ``dL/dRe(p)`` and ``dL/dIm(p)`` directly,
which is twice the conjugate Wirtinger derivative.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable

import torch
from torch import Tensor, nn

from .ctensor import CTensor

__all__ = ["CParameter", "backward", "grad_check", "complex_init"]


def complex_init(shape, fan_in: int, generator: torch.Generator | None = None,
                 dtype=torch.float64) -> tuple[Tensor, Tensor]:
    """Rayleigh magnitudes (sigma = 1/sqrt(2 fan_in)) with uniform phases.

    Gives ``E|w|^2 = 1/fan_in``.
    """
    sigma = 1.0 / math.sqrt(2.0 * fan_in)
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    # inverse CDF of the Rayleigh distribution
    mag = sigma * torch.sqrt(-2.0 * torch.log1p(-u))
    phase = (torch.rand(shape, generator=generator, dtype=torch.float64) * 2 - 1) * math.pi
    return (mag * torch.cos(phase)).to(dtype), (mag * torch.sin(phase)).to(dtype)


class CParameter(nn.Module):
    """A learnable complex array, registered as two real parameters ``re``/``im``."""

    def __init__(self, re: Tensor, im: Tensor):
        super().__init__()
        if re.shape != im.shape:
            raise ValueError("re/im shape mismatch")
        self.re = nn.Parameter(re)
        self.im = nn.Parameter(im)

    @classmethod
    def zeros(cls, *shape, dtype=torch.float64) -> CParameter:
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))

    @property
    def value(self) -> CTensor:
        return CTensor(self.re, self.im)

    @property
    def grad(self) -> CTensor:
        re = self.re.grad if self.re.grad is not None else torch.zeros_like(self.re)
        im = self.im.grad if self.im.grad is not None else torch.zeros_like(self.im)
        return CTensor(re, im)

    @property
    def shape(self):
        return self.re.shape

    def extra_repr(self) -> str:
        return f"shape={tuple(self.re.shape)}"


def _as_real_loss(loss) -> Tensor:
    if isinstance(loss, CTensor):
        if loss.re.numel() != 1:
            raise ValueError("loss must be a scalar")
        if float(loss.im.detach().abs().max()) != 0.0:
            raise ValueError("loss has a nonzero imaginary part; only real losses can be differentiated")
        return loss.re.reshape(())
    if not isinstance(loss, Tensor) or loss.numel() != 1:
        raise ValueError("loss must be a real scalar tensor")
    if loss.is_complex():
        raise ValueError("loss must be real-valued")
    return loss.reshape(())


def backward(loss, module: nn.Module) -> dict[str, CTensor | Tensor]:
    """Backpropagate ``loss`` and collect gradients of every parameter of ``module``.

    Complex parameters come back as a :class:`CTensor` keyed by the
    :class:`CParameter` path; purely real parameters as a tensor keyed by
    their own path. Existing ``.grad`` buffers are zeroed first.
    """
    loss = _as_real_loss(loss)
    module.zero_grad(set_to_none=True)
    loss.backward()
    out: dict[str, CTensor | Tensor] = {}
    seen: set[int] = set()
    for name, sub in module.named_modules():
        if isinstance(sub, CParameter):
            out[name] = sub.grad
            seen.add(id(sub.re))
            seen.add(id(sub.im))
    for name, p in module.named_parameters():
        if id(p) not in seen:
            out[name] = p.grad if p.grad is not None else torch.zeros_like(p)
    return out


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6,
               max_per_param: int | None = None, seed: int = 0, floor: float = 1e-8) -> float:
    """Max relative error between autograd and central differences.

    ``f`` must be deterministic and return a real scalar; ``params`` are
    real leaf tensors that ``f`` reads (``CParameter.re``/``.im`` included).
    Each checked coordinate contributes
    ``|analytic - cd| / max(|analytic|, |cd|, floor)``. Central differences
    carry roundoff of roughly ``ulp(loss) / h``, so for large graphs with
    near-zero gradient entries a floor well above that keeps the check honest.
    With ``max_per_param`` only that many randomly chosen coordinates of
    each tensor are perturbed.
    """
    params = list(params)
    loss = _as_real_loss(f())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            if max_per_param is not None and n > max_per_param:
                idx = torch.randperm(n, generator=gen)[:max_per_param].tolist()
            else:
                idx = range(n)
            gflat = g.reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(f())
                flat[i] = orig - h
                down = float(f())
                flat[i] = orig
                cd = (up - down) / (2 * h)
                an = float(gflat[i])
                err = abs(an - cd) / max(abs(an), abs(cd), floor)
                worst = max(worst, err)
    return worst
