"""Loss, optimizer, metrics and the train/evaluate loops."""

from __future__ import annotations

import copy
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .config import TrainConfig
from .ctensor import CTensor
from .model import decoder_inputs
from .tasks import Dataset


class TrainingDiverged(RuntimeError):
    pass


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean of ``max(x, 0) - x t + log(1 + exp(-|x|))``."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}")
    if bool(((targets != 0) & (targets != 1)).any()):
        raise ValueError("targets must be 0 or 1")
    t = targets.to(logits.dtype)
    return (torch.clamp(logits, min=0) - logits * t + torch.log1p(torch.exp(-logits.abs()))).mean()


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[Tensor | None], state: AdamState,
              config: TrainConfig) -> AdamState:
    """Bias-corrected Adam, in place, treating every real component as its own coordinate."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(config.eps)
            p.addcdiv_(m, denom, value=-config.lr / bc1)
    return state


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks of positive items.

    Items are ranked by descending score; ties keep their original order.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in size")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    rel = (labels[order] == 1).astype(np.float64)
    precision = np.cumsum(rel) / np.arange(1, len(rel) + 1)
    return float((precision * rel).sum() / n_pos)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    micro_ap: float


def metrics_csv(history: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    buf.write("epoch,split,loss,micro_ap\n")
    for r in history:
        buf.write(f"{r.epoch},{r.split},{float(r.loss)!r},{float(r.micro_ap)!r}\n")
    return buf.getvalue()


def torch_dtype(precision: str) -> torch.dtype:
    return torch.float32 if precision == "f32" else torch.float64


def _batch(ds: Dataset, idx, dtype) -> tuple[CTensor, Tensor]:
    tok = ds.tokens[idx]
    x = CTensor(torch.as_tensor(tok.real, dtype=dtype), torch.as_tensor(tok.imag, dtype=dtype))
    y = torch.as_tensor(ds.labels[idx].astype(np.float64), dtype=dtype)
    return x, y


def _logits(model: nn.Module, x: CTensor, y: Tensor) -> Tensor:
    if getattr(model, "sequence", False):
        return model(x, decoder_inputs(y))
    return model(x)


def evaluate(model: nn.Module, ds: Dataset, batch_size: int, dtype=torch.float32,
             mode: str = "teacher-forced") -> tuple[float, float]:
    """``(loss, micro_ap)`` over a split, in fixed batch order."""
    if mode not in ("teacher-forced", "autoregressive"):
        raise ValueError(f"unknown mode {mode!r}")
    sequence = getattr(model, "sequence", False)
    if mode == "autoregressive" and not sequence:
        raise ValueError("autoregressive evaluation needs a sequence model")
    model.eval()
    all_logits, all_labels = [], []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            x, y = _batch(ds, idx, dtype)
            if mode == "autoregressive":
                logits = generate(model, x, y.shape[-2])
            else:
                logits = _logits(model, x, y)
            all_logits.append(logits)
            all_labels.append(y)
    logits = torch.cat(all_logits)
    labels = torch.cat(all_labels)
    loss = float(bce_with_logits(logits, labels))
    return loss, average_precision(logits.double().numpy(), labels.numpy())


def generate(model: nn.Module, x: CTensor, steps: int, threshold: float = 0.5) -> Tensor:
    """Autoregressive decoding: each step feeds back thresholded earlier predictions.

    The decoder always sees a full-length input, with not-yet-generated
    frames left at zero; the causal mask hides them, so the result at each
    step is identical to a run on the truncated prefix.
    """
    memory = model.encode(x)
    n_classes = model.cfg.n_classes
    dec_in = torch.zeros(*x.shape[:-2], steps, n_classes, dtype=x.dtype)
    out = torch.zeros_like(dec_in)
    for t in range(steps):
        logits = model.decode(dec_in, memory)
        out[..., t, :] = logits[..., t, :]
        if t + 1 < steps:
            dec_in[..., t + 1, :] = (torch.sigmoid(logits[..., t, :]) > threshold).to(x.dtype)
    return out


def evaluate_autoregressive(model: nn.Module, ds: Dataset, batch_size: int,
                            dtype=torch.float32) -> tuple[float, float]:
    return evaluate(model, ds, batch_size, dtype, mode="autoregressive")


@dataclass
class TrainResult:
    history: list[MetricsRecord]
    best_epoch: int
    best_state: dict
    test: dict[str, float]


def train_loop(model: nn.Module, data: dict[str, Dataset], cfg: TrainConfig,
               log=None) -> TrainResult:
    """Fixed-epoch training with per-epoch train/val metrics and a best-validation snapshot.

    The model is left holding its final-epoch weights; ``best_state`` holds
    the weights with the highest validation micro-AP (initial weights when
    ``epochs == 0``), and ``test`` is measured with those.
    """
    dtype = torch_dtype(cfg.precision)
    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState()
    train, val = data["train"], data["val"]
    history: list[MetricsRecord] = []
    best_state = copy.deepcopy(model.state_dict())
    best_ap, best_epoch = -math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = order_rng.permutation(len(train))
        for start in range(0, len(perm), cfg.batch_size):
            idx = np.sort(perm[start:start + cfg.batch_size])
            x, y = _batch(train, idx, dtype)
            loss = bce_with_logits(_logits(model, x, y), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {float(loss.detach())} at epoch {epoch}, batch starting {start}")
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            adam_step(params, grads, state, cfg)
        for split, ds in (("train", train), ("val", val)):
            loss_v, ap = evaluate(model, ds, cfg.batch_size, dtype)
            if not math.isfinite(loss_v):
                raise TrainingDiverged(f"non-finite {split} loss at epoch {epoch}")
            history.append(MetricsRecord(epoch, split, loss_v, ap))
        ap_val = history[-1].micro_ap
        if log is not None:
            log(f"epoch {epoch}: train loss {history[-2].loss:.4f} ap {history[-2].micro_ap:.4f} | "
                f"val loss {history[-1].loss:.4f} ap {ap_val:.4f}")
        if ap_val > best_ap:
            best_ap, best_epoch = ap_val, epoch
            best_state = copy.deepcopy(model.state_dict())
    test: dict[str, float] = {}
    test_ds = data.get("test")
    if test_ds is not None and len(test_ds):
        final_state = copy.deepcopy(model.state_dict())
        model.load_state_dict(best_state)
        test["loss"], test["micro_ap"] = evaluate(model, test_ds, cfg.batch_size, dtype)
        if getattr(model, "sequence", False):
            test["ar_loss"], test["ar_micro_ap"] = evaluate_autoregressive(model, test_ds, cfg.batch_size, dtype)
        model.load_state_dict(final_state)
    return TrainResult(history, best_epoch, best_state, test)
