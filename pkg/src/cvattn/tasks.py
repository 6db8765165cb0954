"""Synthetic spectral datasets that mimic multi-label note transcription.

Each class ``k`` is a sinusoid with ``k + 1`` cycles per frame, so its
energy lands in FFT bin ``k + 1`` (bin 0, the DC term, is never used).
A sample is a real time signal cut into ``seq_len`` frames; every frame
is Fourier transformed into one complex token of ``frame_len`` bins,
scaled by ``1/sqrt(frame_len)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import TaskConfig

SPLITS = ("train", "val", "test")
MAGIC = b"CVATTN-DATA 1\n"


def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 decimation-in-time DFT along the last axis.

    ``X_k = sum_n x_n exp(-2 pi i k n / N)``; the inverse uses the opposite
    sign and divides by ``N``.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"fft length must be a power of two, got {n}")
    lead = x.shape[:-1]
    a = x[..., _bit_reverse_permutation(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        a = a.reshape(*lead, n // size, size)
        even = a[..., :half]
        odd = a[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    a = a.reshape(*lead, n)
    return a / n if inverse else a


def ifft(x) -> np.ndarray:
    return fft(x, inverse=True)


def class_bin(k: int) -> int:
    return k + 1


@dataclass
class Dataset:
    """One split. ``labels`` is ``(N, n_classes)`` for classification, ``(N, seq_out, n_classes)`` for sequences."""

    task: str
    split: str
    tokens: np.ndarray  # complex128 (N, seq, frame_len)
    labels: np.ndarray  # uint8

    def __len__(self) -> int:
        return len(self.tokens)

    def sample_hash(self, i: int) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.tokens[i]).tobytes())
        h.update(np.ascontiguousarray(self.labels[i]).tobytes())
        return h.hexdigest()


def _rng(spec: TaskConfig, split: int, index: int) -> np.random.Generator:
    # one independent stream per (seed, split, index)
    return np.random.default_rng([spec.seed, split, index])


def _render(states: np.ndarray, amps: np.ndarray, phases: np.ndarray, spec: TaskConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Spectra of a signal whose class ``k`` is on during frame ``t`` iff ``states[t, k]``."""
    n_tok, n = states.shape[0], spec.frame_len
    freqs = np.array([class_bin(k) for k in range(spec.n_classes)], dtype=np.float64)
    freqs = freqs + rng.uniform(-spec.detune, spec.detune, spec.n_classes)
    # continuous time across frames; detuned notes drift in phase from frame to frame
    t = np.arange(n_tok * n).reshape(n_tok, n) / n
    waves = amps[None, :, None] * np.cos(2 * np.pi * freqs[None, :, None] * t[:, None, :]
                                         + phases[None, :, None])
    frames = np.einsum("tk,tkn->tn", states.astype(np.float64), waves)
    frames = frames + spec.noise_sigma * rng.standard_normal((n_tok, n))
    return fft(frames) / np.sqrt(n)


def _classification_sample(spec: TaskConfig, split: int, index: int):
    rng = _rng(spec, split, index)
    n_active = rng.integers(1, spec.max_active_notes + 1)
    active = rng.choice(spec.n_classes, size=n_active, replace=False)
    label = np.zeros(spec.n_classes, dtype=np.uint8)
    label[active] = 1
    amps = rng.uniform(0.5, 1.5, spec.n_classes)
    phases = rng.uniform(-np.pi, np.pi, spec.n_classes)
    states = np.repeat(label[None, :], spec.seq_len, axis=0)
    return _render(states, amps, phases, spec, rng), label


def _sequence_sample(spec: TaskConfig, split: int, index: int):
    rng = _rng(spec, split, index)
    states = np.zeros((spec.seq_len, spec.n_classes), dtype=np.uint8)
    states[0] = rng.random(spec.n_classes) < spec.activation_prior
    for t in range(1, spec.seq_len):
        keep = rng.random(spec.n_classes) < spec.persistence
        fresh = rng.random(spec.n_classes) < spec.activation_prior
        states[t] = np.where(keep, states[t - 1], fresh)
    amps = rng.uniform(0.5, 1.5, spec.n_classes)
    phases = rng.uniform(-np.pi, np.pi, spec.n_classes)
    spectra = _render(states, amps, phases, spec, rng)
    return spectra[: spec.seq_in], states[spec.seq_in:]


def _generate(spec: TaskConfig, make) -> dict[str, Dataset]:
    spec.validate()
    out = {}
    for split_id, (name, size) in enumerate(zip(SPLITS, spec.split_sizes())):
        toks, labs = [], []
        for i in range(size):
            x, y = make(spec, split_id, i)
            toks.append(x)
            labs.append(y)
        tok_shape = (0, spec.seq_in if spec.task == "sequence" else spec.seq_len, spec.frame_len)
        lab_shape = (0, spec.seq_out, spec.n_classes) if spec.task == "sequence" else (0, spec.n_classes)
        tokens = np.stack(toks) if toks else np.zeros(tok_shape, np.complex128)
        labels = np.stack(labs) if labs else np.zeros(lab_shape, np.uint8)
        out[name] = Dataset(spec.task, name, tokens, labels)
    return out


def gen_classification(spec: TaskConfig) -> dict[str, Dataset]:
    """Stationary chords: each sample's notes sound in every frame."""
    if spec.task != "classification":
        raise ValueError("spec.task must be 'classification'")
    return _generate(spec, _classification_sample)


def gen_sequence(spec: TaskConfig) -> dict[str, Dataset]:
    """Notes toggle at frame boundaries: each keeps its state with probability
    ``persistence``, otherwise it is redrawn as on with probability ``activation_prior``."""
    if spec.task != "sequence":
        raise ValueError("spec.task must be 'sequence'")
    return _generate(spec, _sequence_sample)


def generate(spec: TaskConfig) -> dict[str, Dataset]:
    return gen_sequence(spec) if spec.task == "sequence" else gen_classification(spec)


def _spec_dict(spec: TaskConfig) -> dict:
    d = asdict(spec)
    d["split_fractions"] = list(spec.split_fractions)
    return d


def export_dataset(data: dict[str, Dataset], spec: TaskConfig, path) -> None:
    """Magic line, one JSON header line, then per-sample little-endian blocks.

    Each block is the token real parts (f8), imaginary parts (f8), then the
    labels (u1), in split order train/val/test.
    """
    header = {
        "spec": _spec_dict(spec),
        "splits": {name: len(data[name]) for name in SPLITS},
        "token_shape": list(data["train"].tokens.shape[1:]),
        "label_shape": list(data["train"].labels.shape[1:]),
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name in SPLITS:
            ds = data[name]
            for i in range(len(ds)):
                fh.write(np.ascontiguousarray(ds.tokens[i].real, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(ds.tokens[i].imag, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(ds.labels[i], dtype="u1").tobytes())


def import_dataset(path) -> tuple[dict[str, Dataset], TaskConfig]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a cvattn dataset file")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    spec = TaskConfig(**{**header["spec"], "split_fractions": tuple(header["spec"]["split_fractions"])})
    tshape, lshape = tuple(header["token_shape"]), tuple(header["label_shape"])
    nt, nl = int(np.prod(tshape)), int(np.prod(lshape))
    block = 16 * nt + nl
    pos = end + 1
    out = {}
    for name in SPLITS:
        n = header["splits"][name]
        chunk = np.frombuffer(raw, dtype=np.uint8, count=n * block, offset=pos).reshape(n, block)
        re = chunk[:, : 8 * nt].copy().view("<f8").reshape(n, *tshape)
        im = chunk[:, 8 * nt: 16 * nt].copy().view("<f8").reshape(n, *tshape)
        labels = chunk[:, 16 * nt:].copy().reshape(n, *lshape)
        out[name] = Dataset(spec.task, name, re + 1j * im, labels)
        pos += n * block
    if pos != len(raw):
        raise ValueError("trailing bytes in dataset file")
    return out, spec
