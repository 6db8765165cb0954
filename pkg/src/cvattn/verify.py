"""Property and gradient suites run by ``cvattn verify``.

Each check returns a :class:`CheckResult`; a suite passes only if every
check does. ``mutate("csgn")`` swaps in a deliberately wrong ``csgn`` so the
suite's sensitivity can itself be tested.
"""

from __future__ import annotations

import contextlib
import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch

from . import attention as att
from . import ctensor as ct
from .attention import AttentionVariant as V
from .attention import SimilarityKernel as K
from .autodiff import grad_check
from .config import preset
from .ctensor import CTensor, Spd2
from .model import (ClassificationHead, ComplexConv1d, FeedForward, apply_pe, build_model,
                    complex_dropout, crelu, decoder_inputs)
from .norm import ComplexLayerNorm, complex_layer_norm
from .tasks import fft
from .train import bce_with_logits

SUITES = ("invariants", "gradients", "all")
GRAD_SEEDS = 5


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<48} {self.value:<12.3e} {self.bound:<10} {self.seconds:6.2f}s"


def _c(z) -> CTensor:
    return CTensor.from_numpy(np.asarray(z, dtype=np.complex128))


def _rand(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _run(variant, kernel, q, k, v, mask=None) -> np.ndarray:
    if variant is V.YANG:
        return att.yang_attend(_c(q), _c(k), _c(v), mask).numpy()
    return att.attend(_c(q), _c(k), _c(v), variant, kernel, mask).numpy()


# ---------------------------------------------------------------- invariants

def _symmetry():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        q, k = _rand(rng, 6, 8), _rand(rng, 6, 8)
        s1 = att.similarity(_c(q), _c(k), K.DOT).re.numpy()
        s2 = att.similarity(_c(k), _c(q), K.DOT).re.numpy()
        worst = max(worst, _max_abs(s1, s2.T))
    return worst, worst <= 1e-12, "<= 1e-12"


def _joint_rotation():
    rng = np.random.default_rng(1)
    worst = 0.0
    for variant in (V.CATT, V.AATT, V.APATT, V.RIATT):
        for alpha in (0.4, math.pi / 2, 2.2, -2.9):
            q, k, v = _rand(rng, 5, 4), _rand(rng, 7, 4), _rand(rng, 7, 3)
            rot = np.exp(1j * alpha)
            worst = max(worst, _max_abs(_run(variant, K.DOT, q, k, v), _run(variant, K.DOT, rot * q, rot * k, v)))
    return worst, worst <= 1e-12, "<= 1e-12"


def _plain_not_invariant():
    # AAtt is excluded: |exp(2i alpha) Q K^T| = |Q K^T|, so it is invariant under both kernels
    rng = np.random.default_rng(2)
    smallest = math.inf
    for variant in (V.CATT, V.APATT, V.RIATT, V.YANG):
        q, k, v = _rand(rng, 5, 4), _rand(rng, 7, 4), _rand(rng, 7, 3)
        diff = _max_abs(_run(variant, K.PLAIN, q, k, v), _run(variant, K.PLAIN, 1j * q, 1j * k, v))
        smallest = min(smallest, diff)
    return smallest, smallest > 1e-3, "> 1e-3"


def _one_sided_rotation():
    rng = np.random.default_rng(3)
    worst = 0.0
    for alpha in (0.7, 1.9, -0.3):
        q, k, v = _rand(rng, 5, 4), _rand(rng, 7, 4), _rand(rng, 7, 3)
        rot = np.exp(1j * alpha)
        worst = max(worst, _max_abs(_run(V.AATT, K.DOT, q, k, v), _run(V.AATT, K.DOT, rot * q, k, v)))
    return worst, worst <= 1e-12, "<= 1e-12"


def _real_reduction():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        q, k, v = rng.standard_normal((5, 4)), rng.standard_normal((7, 4)), _rand(rng, 7, 3)
        out = _run(V.CATT, K.DOT, q, k, v)
        qt, kt = torch.tensor(q), torch.tensor(k)
        ref = att.real_attend(qt, kt, torch.tensor(v.real)) + 1j * att.real_attend(qt, kt, torch.tensor(v.imag))
        worst = max(worst, _max_abs(out, ref.numpy()))
    return worst, worst <= 1e-12, "<= 1e-12"


def _masked_zero():
    rng = np.random.default_rng(5)
    q, k = _rand(rng, 6, 4), _rand(rng, 6, 4)
    mask = att.causal_mask(6)
    worst = 0.0
    for variant in (V.CATT, V.AATT, V.APATT, V.RIATT):
        w = att.attention_weights(_c(q), _c(k), variant, K.DOT, mask)
        parts = (w.re, w.im) if isinstance(w, CTensor) else (w,)
        for p in parts:
            worst = max(worst, float(p[mask].abs().max()))
    return worst, worst == 0.0, "== 0"


def _causal_independence():
    rng = np.random.default_rng(6)
    mask = att.causal_mask(6)
    broken = 0
    for variant in (V.CATT, V.AATT, V.APATT, V.RIATT, V.YANG):
        kernel = K.PLAIN if variant is V.YANG else K.DOT
        q, k, v = _rand(rng, 6, 4), _rand(rng, 6, 4), _rand(rng, 6, 3)
        base = _run(variant, kernel, q, k, v, mask)
        for t in range(5):
            k2, v2 = k.copy(), v.copy()
            k2[t + 1:] += _rand(rng, 5 - t, 4)
            v2[t + 1:] += _rand(rng, 5 - t, 3)
            if not np.array_equal(_run(variant, kernel, q, k2, v2, mask)[: t + 1], base[: t + 1]):
                broken += 1
    return float(broken), broken == 0, "exact"


def _csgn_reconstructs():
    rng = np.random.default_rng(7)
    z = _c(_rand(rng, 500))
    s = ct.csgn(z)
    rebuilt = s * ct.cabs(z)
    err = max(_max_abs(rebuilt.numpy(), z.numpy()), _max_abs(ct.cabs(s).numpy(), 1.0))
    zero = ct.csgn(_c([0j])).numpy()[0]
    ok = err <= 1e-12 and zero == 1 + 0j
    return err, ok, "<= 1e-12"


def _apatt_oracle():
    rng = np.random.default_rng(8)
    q, k, v = _rand(rng, 5, 4), _rand(rng, 7, 4), _rand(rng, 7, 3)
    s = q @ np.conj(k).T
    logits = np.abs(s) / 2.0
    w = np.exp(logits - logits.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    ref = (w * s / np.abs(s)) @ v
    err = _max_abs(_run(V.APATT, K.DOT, q, k, v), ref)
    return err, err <= 1e-12, "<= 1e-12"


def _whitening():
    # a negligible eps: the default 1e-5 regularizer shifts the covariance by ~1e-5 relative
    rng = np.random.default_rng(9)
    re = rng.standard_normal((20, 64)) * 2 + 1
    im = 0.6 * re + rng.standard_normal((20, 64))
    out = complex_layer_norm(_c(re + 1j * im), eps=1e-14).numpy()
    mean = out.mean(-1)
    xr, xi = (out - mean[:, None]).real, (out - mean[:, None]).imag
    cov_err = max(_max_abs((xr * xr).mean(-1), 1), _max_abs((xr * xi).mean(-1), 0), _max_abs((xi * xi).mean(-1), 1))
    mean_err = float(np.abs(mean).max())
    return max(cov_err, mean_err), cov_err <= 1e-8 and mean_err <= 1e-10, "<= 1e-8"


def _fft_naive():
    rng = np.random.default_rng(10)
    worst = 0.0
    for n in (1, 2, 4, 16, 128, 1024):
        x = _rand(rng, n)
        idx = np.arange(n)
        naive = np.exp(-2j * np.pi * np.outer(idx, idx) / n) @ x
        worst = max(worst, _max_abs(fft(x), naive))
    return worst, worst <= 1e-10, "<= 1e-10"


def _parseval():
    rng = np.random.default_rng(11)
    worst = 0.0
    for n in (8, 64, 512, 1024):
        x = _rand(rng, n)
        worst = max(worst, abs(np.sum(np.abs(x) ** 2) - np.sum(np.abs(fft(x)) ** 2) / n))
    return worst, worst <= 1e-10, "<= 1e-10"


INVARIANTS: dict[str, Callable] = {
    "similarity real part symmetric": _symmetry,
    "joint rotation invariance (dot kernels)": _joint_rotation,
    "plain product not rotation invariant": _plain_not_invariant,
    "one-sided rotation invariance (AAtt dot)": _one_sided_rotation,
    "CAtt reduces to real attention": _real_reduction,
    "masked weights exactly zero": _masked_zero,
    "causal independence": _causal_independence,
    "csgn times modulus reconstructs input": _csgn_reconstructs,
    "APAtt matches direct formula": _apatt_oracle,
    "layer norm whitens to mean 0, covariance I": _whitening,
    "FFT matches naive DFT": _fft_naive,
    "Parseval identity": _parseval,
}


# ----------------------------------------------------------------- gradients

def _leaves(rng, *shape):
    return (torch.tensor(rng.standard_normal(shape), requires_grad=True),
            torch.tensor(rng.standard_normal(shape), requires_grad=True))


def _project(out, rng):
    """Random fixed linear functional, so every output coordinate feeds the scalar."""
    if isinstance(out, CTensor):
        wr = torch.tensor(rng.standard_normal(tuple(out.shape)))
        wi = torch.tensor(rng.standard_normal(tuple(out.shape)))
        return lambda y: (y.re * wr + y.im * wi).sum()
    w = torch.tensor(rng.standard_normal(tuple(out.shape)))
    return lambda y: (y * w).sum()


def _check_fn(build: Callable[[np.random.Generator], tuple[Callable, list]], seed: int, **kw) -> float:
    """``build`` returns a forward closure and its real leaves; the closure is projected to a scalar."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    forward, params = build(rng)
    proj = _project(forward(), rng)
    return grad_check(lambda: proj(forward()), params, **kw)


def _binary(op):
    def build(rng):
        ar, ai = _leaves(rng, 3, 4)
        br, bi = _leaves(rng, 4, 2)
        return (lambda: op(CTensor(ar, ai), CTensor(br, bi))), [ar, ai, br, bi]
    return build


def _unary(op, shape=(3, 5)):
    def build(rng):
        r, i = _leaves(rng, *shape)
        return (lambda: op(CTensor(r, i))), [r, i]
    return build


def _real_unary(op, shape=(3, 5)):
    def build(rng):
        x = torch.tensor(rng.standard_normal(shape), requires_grad=True)
        return (lambda: op(x)), [x]
    return build


def _spd(op):
    def build(rng):
        l = torch.tensor(rng.standard_normal(3), requires_grad=True)

        def forward():
            # M = L L^T + 0.1 I with L lower triangular keeps M comfortably PD
            a = l[0] * l[0] + 0.1
            b = l[0] * l[1]
            c = l[1] * l[1] + l[2] * l[2] + 0.1
            m = op(Spd2(a, b, c))
            return torch.stack([m.a, m.b, m.c])
        return forward, [l]
    return build


def _attention(variant, kernel, masked=True):
    def build(rng):
        qr, qi = _leaves(rng, 5, 4)
        kr, ki = _leaves(rng, 5, 4)
        vr, vi = _leaves(rng, 5, 3)
        mask = att.causal_mask(5) if masked else None
        if variant is V.YANG:
            def forward():
                return att.yang_attend(CTensor(qr, qi), CTensor(kr, ki), CTensor(vr, vi), mask)
        else:
            def forward():
                return att.attend(CTensor(qr, qi), CTensor(kr, ki), CTensor(vr, vi), variant, kernel, mask)
        return forward, [qr, qi, kr, ki, vr, vi]
    return build


def _module(make, in_shape):
    def build(rng):
        mod = make().to(torch.float64)
        xr, xi = _leaves(rng, *in_shape)
        return (lambda: mod(CTensor(xr, xi))), [xr, xi, *mod.parameters()]
    return build


def _mha(variant, kernel):
    def build(rng):
        mod = att.MultiHeadAttention(8, 2, variant, kernel)
        xr, xi = _leaves(rng, 5, 8)
        mask = att.causal_mask(5)
        return (lambda: mod(CTensor(xr, xi), CTensor(xr, xi), CTensor(xr, xi), mask)), [xr, xi, *mod.parameters()]
    return build


def _layer_norm(rng):
    mod = ComplexLayerNorm(6)
    with torch.no_grad():
        mod.zeta_raw.add_(torch.tensor(rng.standard_normal(3)) * 0.3)
        mod.beta.re.normal_()
    xr, xi = _leaves(rng, 4, 6)
    return (lambda: mod(CTensor(xr, xi))), [xr, xi, *mod.parameters()]


def _dropout(rng):
    r, i = _leaves(rng, 4, 6)
    # a fresh generator per call keeps the mask fixed across finite-difference evaluations
    return (lambda: complex_dropout(CTensor(r, i), 0.3, True, torch.Generator().manual_seed(5))), [r, i]


def _bce(rng):
    x = torch.tensor(rng.standard_normal((4, 5)) * 3, requires_grad=True)
    t = torch.tensor((rng.random((4, 5)) < 0.4).astype(np.float64))
    return (lambda: bce_with_logits(x, t).reshape(1)), [x]


def _toy_model(task):
    def build(rng):
        cfg = preset("toy", task)
        cfg.model.dropout_p = 0.0
        cfg.resolve()
        model = build_model(cfg.model, int(rng.integers(1 << 30)), torch.float64).eval()
        seq = cfg.task.seq_in if task == "sequence" else cfg.task.seq_len
        x = CTensor(torch.tensor(rng.standard_normal((1, seq, cfg.task.frame_len))),
                    torch.tensor(rng.standard_normal((1, seq, cfg.task.frame_len))))
        if task == "sequence":
            y = torch.tensor((rng.random((1, cfg.task.seq_out, cfg.task.n_classes)) < 0.3).astype(np.float64))
            return (lambda: model(x, decoder_inputs(y))), list(model.parameters())
        return (lambda: model(x)), list(model.parameters())
    return build


# Composite graphs have exactly-zero gradient entries (a key bias shifts a whole
# softmax row), where central differences return pure roundoff (~1e-9). The
# floor turns the relative bound into an absolute one, tol * floor, there.
COMPOSITE = dict(max_per_param=6, h=1e-5, floor=1e-4)
FULL_MODEL = dict(max_per_param=2, h=1e-5, floor=1e-4)

# name -> (builder, tolerance, grad_check keyword arguments)
GRADIENTS: dict[str, tuple[Callable, float, dict]] = {
    "cmatmul": (_binary(ct.cmatmul), 1e-5, {}),
    "hermitian": (_unary(ct.hermitian), 1e-5, {}),
    "softmax_rows": (_real_unary(ct.softmax_rows), 1e-5, {}),
    "cabs": (_unary(ct.cabs), 1e-5, {}),
    "csgn": (_unary(lambda z: ct.csgn(z)), 1e-5, {}),
    "spd2_sqrt": (_spd(ct.spd2_sqrt), 1e-5, {}),
    "spd2_inv_sqrt": (_spd(ct.spd2_inv_sqrt), 1e-4, {}),
    "similarity dot": (_binary(lambda a, b: att.similarity(a, b.T, K.DOT)), 1e-5, {}),
    "similarity qkt": (_binary(lambda a, b: att.similarity(a, b.T, K.PLAIN)), 1e-5, {}),
    **{f"attend {v.value} {k.value}": (_attention(v, k), 1e-5, {})
       for v in (V.CATT, V.AATT, V.APATT, V.RIATT) for k in (K.DOT, K.PLAIN)},
    "attend yang qkt": (_attention(V.YANG, K.PLAIN), 1e-5, {}),
    "multi_head_attention catt dot": (_mha(V.CATT, K.DOT), 1e-5, COMPOSITE),
    "multi_head_attention riatt qkt": (_mha(V.RIATT, K.PLAIN), 1e-5, COMPOSITE),
    "complex_linear": (_module(lambda: att.ComplexLinear(4, 3), (5, 4)), 1e-5, {}),
    "complex_conv1d": (_module(lambda: ComplexConv1d(3, 2, 3, 2, 1), (7, 3)), 1e-5, {}),
    "crelu": (_unary(crelu), 1e-5, {}),
    "complex_dropout": (_dropout, 1e-5, {}),
    "apply_pe": (_unary(apply_pe, (3, 6)), 1e-5, {}),
    "feed_forward": (_module(lambda: FeedForward(4, 8), (5, 4)), 1e-5, {}),
    "complex_layer_norm": (_layer_norm, 1e-4, {}),
    "classification_head": (_module(lambda: ClassificationHead(4, 3, pool=True), (5, 4)), 1e-5, {}),
    "bce_with_logits": (_bce, 1e-5, {}),
    # the full models contain layer norms, so they sit on the inverse-sqrt path
    "full toy model (classification)": (_toy_model("classification"), 1e-4, FULL_MODEL),
    "full toy model (sequence)": (_toy_model("sequence"), 1e-4, FULL_MODEL),
}


# ------------------------------------------------------------------ running

def _timed(name: str, fn: Callable[[], tuple[float, bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        value, ok, bound = fn()
    except Exception as exc:  # a crashing check is a failing check
        return CheckResult(f"{name} ({type(exc).__name__}: {exc})", False, math.nan, "-",
                           time.perf_counter() - t0)
    return CheckResult(name, bool(ok), float(value), bound, time.perf_counter() - t0)


def run_invariants() -> list[CheckResult]:
    return [_timed(name, fn) for name, fn in INVARIANTS.items()]


def run_gradients(seeds: int = GRAD_SEEDS) -> list[CheckResult]:
    results = []
    for name, (build, tol, kw) in GRADIENTS.items():
        def fn(build=build, tol=tol, kw=kw):
            worst = max(_check_fn(build, seed, **kw) for seed in range(seeds))
            return worst, worst < tol, f"< {tol:g}"
        results.append(_timed(f"grad {name} x{seeds} seeds", fn))
    return results


def run_suite(suite: str = "all") -> list[CheckResult]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    results = []
    if suite in ("invariants", "all"):
        results += run_invariants()
    if suite in ("gradients", "all"):
        results += run_gradients()
    return results


_original_csgn = ct.csgn


def _broken_csgn(z: CTensor) -> CTensor:
    # right modulus, wrong phase
    return _original_csgn(z).conj()


@contextlib.contextmanager
def mutate(name: str):
    """Temporarily replace a primitive with a wrong version (suite sensitivity test)."""
    if name != "csgn":
        raise ValueError(f"no mutation named {name!r}")
    ct.csgn = _broken_csgn
    try:
        yield
    finally:
        ct.csgn = _original_csgn
