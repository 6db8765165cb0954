"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 3 and 4 train the default toy configuration end to end (several minutes each
on one CPU core). Their reference values were measured once with this implementation
and are pinned to +-0.02 on top of the absolute thresholds.
"""

import json
import math
import time

import pytest

from cvattn import verify
from cvattn.cli import main, parameter_report
from cvattn.config import KERNELS, VARIANTS, preset

REFERENCE = {"classification_ap": 0.9943, "sequence_ar_ap": 0.9156}
PIN_TOL = 0.02


@pytest.fixture
def report(capsys):
    def emit(number: int, passed: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}")
    return emit


def _train(tmp_path, name, *argv):
    out = tmp_path / name
    start = time.perf_counter()
    code = main(["train", "--out", str(out), *argv])
    return code, out, time.perf_counter() - start


def test_1_invariant_suite(report):
    results = verify.run_invariants()
    seconds = sum(r.seconds for r in results)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and seconds < 120
    report(1, ok, f"invariants {len(results) - len(failed)}/{len(results)} in {seconds:.1f}s (< 120s)"
                  + (f"; failed {failed}" if failed else ""))
    assert ok


def test_2_gradient_suite(report):
    results = verify.run_gradients(seeds=5)
    seconds = sum(r.seconds for r in results)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and seconds < 300
    report(2, ok, f"gradient checks {len(results) - len(failed)}/{len(results)} in {seconds:.1f}s (< 300s)"
                  + (f"; failed {failed}" if failed else ""))
    assert ok


def _pinned(value, reference, threshold):
    pin = reference is None or abs(value - reference) <= PIN_TOL
    return value >= threshold and pin


def test_3_toy_classification(tmp_path, report):
    code, out, seconds = _train(tmp_path, "cls", "--variant", "catt", "--kernel", "dot")
    ap = json.loads((out / "test_metrics.json").read_text())["test"]["micro_ap"] if code == 0 else math.nan
    ref = REFERENCE["classification_ap"]
    ok = code == 0 and _pinned(ap, ref, 0.95) and seconds < 600
    report(3, ok, f"classification test micro-AP {ap:.4f} (>= 0.95, reference {ref} +- {PIN_TOL}) "
                  f"in {seconds:.0f}s (< 600s)")
    assert ok


def test_4_toy_sequence(tmp_path, report):
    code, out, seconds = _train(tmp_path, "seq", "--task", "sequence", "--variant", "catt", "--kernel", "dot")
    ap = json.loads((out / "test_metrics.json").read_text())["test"]["ar_micro_ap"] if code == 0 else math.nan
    ref = REFERENCE["sequence_ar_ap"]
    ok = code == 0 and _pinned(ap, ref, 0.85) and seconds < 600
    report(4, ok, f"sequence autoregressive test micro-AP {ap:.4f} (>= 0.85, reference {ref} +- {PIN_TOL}) "
                  f"in {seconds:.0f}s (< 600s)")
    assert ok


SWEEP = [(v, k) for v in VARIANTS if v not in ("yang", "real") for k in KERNELS] + [("yang", "qkt"), ("real", "dot")]
SHORT = ["--set", "train.epochs=2", "--set", "task.n_samples=200"]


def test_5_variant_sweep(tmp_path, report):
    assert len(SWEEP) == 10
    problems = []
    for task in ("classification", "sequence"):
        for variant, kernel in SWEEP:
            name = f"{task}-{variant}-{kernel}"
            code, out, _ = _train(tmp_path, name, "--task", task, "--variant", variant, "--kernel", kernel, *SHORT)
            if code != 0:
                problems.append(f"{name}: exit {code}")
                continue
            rows = (out / "metrics.csv").read_text().splitlines()
            if rows[0] != "epoch,split,loss,micro_ap" or len(rows) != 1 + 2 * 2:
                problems.append(f"{name}: incomplete metrics.csv")
            elif not all(math.isfinite(float(x)) for r in rows[1:] for x in r.split(",")[2:]):
                problems.append(f"{name}: non-finite metric")
    ok = not problems
    report(5, ok, f"{2 * len(SWEEP)} sweep runs (9 variant x kernel + real, both tasks) trained without NaN"
                  + (f"; problems {problems}" if problems else ""))
    assert ok


def test_6_parameter_ordering(report):
    counts = {k: v["total"] for k, v in parameter_report(preset("paper-full")).items()}
    ok = counts["real"] > counts["complex"] >= counts["yang"]
    report(6, ok, f"paper-full parameters real {counts['real']:,} > complex {counts['complex']:,} "
                  f">= yang {counts['yang']:,}")
    assert ok


def test_7_determinism(tmp_path, report):
    work, saved = tmp_path / "work", tmp_path / "first"
    train_dir = work / "train"
    argv = ["--task", "sequence", "--variant", "apatt", "--kernel", "dot", *SHORT]
    outputs = []
    for attempt in range(2):
        if attempt == 0:
            assert main(["train", "--out", str(train_dir), *argv]) == 0
        else:
            # the second run is driven only by the first run's manifest, writing to the same paths
            work.rename(saved)
            assert main(["train", "--out", str(train_dir), "--config", str(saved / "train/manifest.json")]) == 0
        assert main(["eval", "--checkpoint", str(train_dir / "best"), "--mode", "autoregressive",
                     "--out", str(work / "eval.json")]) == 0
        assert main(["gen-data", "--config", str(train_dir / "manifest.json"), "--out", str(work / "data.bin")]) == 0
        outputs.append({p.relative_to(work).as_posix(): p.read_bytes() for p in sorted(work.rglob("*")) if p.is_file()})
    first, second = outputs
    differing = sorted(name for name in first.keys() | second.keys() if first.get(name) != second.get(name))
    ok = not differing
    report(7, ok, f"{len(first)} output files byte-identical on re-run from manifest"
                  + (f"; differing {differing}" if differing else ""))
    assert ok
