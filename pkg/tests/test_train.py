import itertools
import math

import numpy as np
import pytest
import torch

from cvattn.autodiff import CParameter, grad_check
from cvattn.config import RunConfig, TrainConfig
from cvattn.ctensor import CTensor
from cvattn.model import build_model, decoder_inputs
from cvattn.tasks import generate as make_data
from cvattn.train import (AdamState, adam_step, average_precision, bce_with_logits, evaluate,
                          generate, metrics_csv, train_loop)


def tiny(task="classification", **train) -> RunConfig:
    cfg = RunConfig()
    cfg.task.task = task
    cfg.task.n_samples = 60
    cfg.task.frame_len = 16
    cfg.task.n_classes = 4
    cfg.task.seq_len = 6
    if task == "sequence":
        cfg.task.seq_in, cfg.task.seq_out = 4, 2
    cfg.model.d_model = 8
    cfg.model.d_ff = 16
    cfg.model.n_layers = 1
    cfg.train.batch_size = 16
    cfg.train.epochs = 2
    cfg.train.lr = 3e-3
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.resolve()


class TestBCE:
    def test_zero_logit(self):
        assert bce_with_logits(torch.tensor([0.0]), torch.tensor([1.0])).item() == pytest.approx(math.log(2))

    def test_saturated(self):
        val = bce_with_logits(torch.tensor([20.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
        assert val.item() == pytest.approx(2.061e-9, rel=1e-3)

    def test_matches_naive(self):
        x = torch.linspace(-10, 10, 201, dtype=torch.float64)
        t = (torch.arange(201) % 2).to(torch.float64)
        s = torch.sigmoid(x)
        naive = (-t * torch.log(s) - (1 - t) * torch.log(1 - s)).mean()
        assert bce_with_logits(x, t).item() == pytest.approx(naive.item(), abs=1e-9)

    def test_large_logits_finite(self):
        assert torch.isfinite(bce_with_logits(torch.tensor([1e4, -1e4]), torch.tensor([0.0, 1.0])))

    def test_bad_targets(self):
        with pytest.raises(ValueError):
            bce_with_logits(torch.zeros(2), torch.tensor([0.0, 0.5]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bce_with_logits(torch.zeros(2), torch.zeros(3))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = torch.zeros(4, dtype=torch.float64)
        g = torch.tensor([3.0, -0.001, 50.0, -2.0], dtype=torch.float64)
        cfg = TrainConfig(lr=0.01)
        adam_step([p], [g], AdamState(), cfg)
        np.testing.assert_allclose(p.numpy(), -0.01 * np.sign(g.numpy()), rtol=1e-4)

    def test_zero_gradient_keeps_params(self):
        p = torch.tensor([1.0, -2.0], dtype=torch.float64)
        state = AdamState()
        for _ in range(50):
            adam_step([p], [torch.zeros(2, dtype=torch.float64)], state, TrainConfig())
        assert p.tolist() == [1.0, -2.0]

    def test_scale_consistent_first_step(self):
        g = torch.tensor([0.3, -4.0, 1e-3], dtype=torch.float64)
        p1, p2 = torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)
        adam_step([p1], [g], AdamState(), TrainConfig())
        adam_step([p2], [g * 1000.0], AdamState(), TrainConfig())
        assert torch.equal(torch.sign(p1), torch.sign(p2))
        np.testing.assert_allclose(p1.numpy(), p2.numpy(), rtol=1e-4)

    def test_complex_quadratic(self):
        target = complex(1.5, -0.75)
        z = CParameter(torch.tensor(0.0, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64))
        params = [z.re, z.im]
        cfg = TrainConfig(lr=0.01)
        state = AdamState()
        for _ in range(5000):
            d = z.value - target
            loss = d.re ** 2 + d.im ** 2
            adam_step(params, list(torch.autograd.grad(loss, params)), state, cfg)
        assert abs(complex(z.re.item(), z.im.item()) - target) < 1e-6


def brute_force_ap(scores, labels):
    """Definition-based AP: rank by descending score, ties in original order, O(n^2)."""
    n = len(scores)

    def rank(i):
        return sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i)) + 1

    total, n_pos = 0.0, sum(labels)
    for i in range(n):
        if labels[i]:
            k = rank(i)
            hits = sum(1 for j in range(n) if labels[j] and rank(j) <= k)
            total += hits / k
    return total / n_pos


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([0.9, 0.1], [1, 0]) == 1.0

    def test_inverted(self):
        assert average_precision([0.1, 0.9], [1, 0]) == 0.5

    def test_ties_keep_order(self):
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = 60
        scores = np.round(rng.random(n), 1)  # coarse rounding forces ties
        labels = (rng.random(n) < 0.3).astype(int)
        labels[0] = 1
        assert average_precision(scores, labels) == pytest.approx(brute_force_ap(list(scores), list(labels)),
                                                                   abs=1e-12)

    def test_no_positives(self):
        with pytest.raises(ValueError):
            average_precision([0.3, 0.2], [0, 0])


class TestLoop:
    def test_zero_epochs(self):
        cfg = tiny(epochs=0)
        model = build_model(cfg.model, 0, torch.float32)
        init = {k: v.clone() for k, v in model.state_dict().items()}
        res = train_loop(model, make_data(cfg.task), cfg.train)
        assert res.history == [] and res.best_epoch == 0
        for k, v in res.best_state.items():
            assert torch.equal(v, init[k])

    def test_loss_decreases_after_one_epoch(self):
        cfg = tiny(epochs=1)
        data = make_data(cfg.task)
        model = build_model(cfg.model, 0, torch.float32)
        before, _ = evaluate(model, data["train"], 16, torch.float32)
        res = train_loop(model, data, cfg.train)
        assert res.history[0].split == "train" and res.history[0].loss < before

    def test_csv_deterministic_and_complete(self):
        cfg = tiny(epochs=2)
        data = make_data(cfg.task)
        csvs = []
        for _ in range(2):
            model = build_model(cfg.model, 0, torch.float32)
            csvs.append(metrics_csv(train_loop(model, data, cfg.train).history))
        assert csvs[0] == csvs[1]
        rows = csvs[0].splitlines()
        assert rows[0] == "epoch,split,loss,micro_ap"
        assert [r.split(",")[:2] for r in rows[1:]] == [[str(e), s] for e, s in
                                                         itertools.product((1, 2), ("train", "val"))]
        assert "\r" not in csvs[0]

    def test_csv_floats_round_trip(self):
        from cvattn.train import MetricsRecord
        x = 0.1 + 0.2
        line = metrics_csv([MetricsRecord(1, "val", x, 1 / 3)]).splitlines()[1]
        assert float(line.split(",")[2]) == x and float(line.split(",")[3]) == 1 / 3

    def test_nan_aborts(self):
        from cvattn.train import TrainingDiverged
        cfg = tiny(epochs=1)
        model = build_model(cfg.model, 0, torch.float32)
        with torch.no_grad():
            model.head.linear.weight.fill_(float("nan"))
        with pytest.raises(TrainingDiverged):
            train_loop(model, make_data(cfg.task), cfg.train)

    def test_sequence_reports_autoregressive(self):
        cfg = tiny("sequence", epochs=1)
        res = train_loop(build_model(cfg.model, 0, torch.float32), make_data(cfg.task), cfg.train)
        assert {"loss", "micro_ap", "ar_loss", "ar_micro_ap"} <= set(res.test)


class TestGeneration:
    def setup_method(self):
        self.cfg = tiny("sequence")
        self.model = build_model(self.cfg.model, 1, torch.float64).eval()
        rng = np.random.default_rng(0)
        self.x = CTensor(torch.tensor(rng.standard_normal((3, 4, 16))), torch.tensor(rng.standard_normal((3, 4, 16))))

    def test_first_step_equals_teacher_forcing(self):
        y = torch.tensor(np.random.default_rng(1).random((3, 2, 4)) < 0.5, dtype=torch.float64)
        with torch.no_grad():
            tf = self.model(self.x, decoder_inputs(y))
            ar = generate(self.model, self.x, 2)
        assert torch.equal(tf[:, 0], ar[:, 0])

    def test_feeds_back_thresholded_predictions(self):
        with torch.no_grad():
            ar = generate(self.model, self.x, 2)
            fed = torch.stack([torch.zeros(3, 4, dtype=torch.float64), (torch.sigmoid(ar[:, 0]) > 0.5).double()], 1)
            tf = self.model(self.x, fed)
        torch.testing.assert_close(tf, ar, rtol=0, atol=1e-12)

    def test_deterministic(self):
        with torch.no_grad():
            assert torch.equal(generate(self.model, self.x, 2), generate(self.model, self.x, 2))

    def test_classification_model_rejected(self):
        cfg = tiny()
        data = make_data(cfg.task)
        with pytest.raises(ValueError):
            evaluate(build_model(cfg.model, 0, torch.float32), data["val"], 8, torch.float32, mode="autoregressive")


def test_full_model_gradient():
    cfg = tiny("sequence")
    cfg.model.dropout_p = 0.0
    model = build_model(cfg.model, 2, torch.float64).eval()
    rng = np.random.default_rng(3)
    x = CTensor(torch.tensor(rng.standard_normal((2, 4, 16))), torch.tensor(rng.standard_normal((2, 4, 16))))
    y = torch.tensor(rng.random((2, 2, 4)) < 0.4, dtype=torch.float64)

    def f():
        return bce_with_logits(model(x, decoder_inputs(y)), y)

    # floor above the ~1e-10 central-difference roundoff of near-zero entries
    assert grad_check(f, model.parameters(), max_per_param=3, floor=1e-6) < 1e-4
