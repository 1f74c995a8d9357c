import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotr import numerics as nx
from spotr.geometry import SHAPE_CLASSES, gen_shapes
from spotr.model import build_model
from spotr.numerics import Tensor
from spotr.train import (
    Adam,
    DivergenceError,
    SGD,
    TrainConfig,
    classification_metrics,
    content_hash,
    cross_entropy,
    evaluate,
    experiment_record,
    instance_miou,
    train,
)

from conftest import grad_check, tiny_config


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert abs(cross_entropy(np.zeros((3, 5)), [0, 2, 4]).item() - math.log(5)) < 1e-15

    def test_saturated(self):
        logits = np.array([[50.0, 0.0, 0.0]])
        assert cross_entropy(logits, [0]).item() < 1e-20

    def test_gradient(self, rng):
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        worst, _, _ = grad_check(lambda: cross_entropy(x, [0, 2, 1, 1]), [x])
        assert worst < 1e-6

    def test_per_point_labels(self, rng):
        logits = rng.normal(size=(2, 5, 3))
        labels = rng.integers(0, 3, size=(2, 5))
        ls = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        expect = -np.take_along_axis(ls, labels[..., None], -1).mean()
        assert abs(cross_entropy(logits, labels).item() - expect) < 1e-14

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((2, 3)), [0, 3])
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((2, 3)), [0])


class TestOptimizers:
    def test_sgd_step(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.array([0.5, -1.0])
        SGD([p], 0.1).step()
        np.testing.assert_allclose(p.data, [0.95, 2.1])

    def test_adam_first_step_is_lr_sign(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.array([0.5, -3.0])
        Adam([p], 0.01).step()
        np.testing.assert_allclose(p.data, [0.99, 2.01], atol=1e-9)

    def test_adam_minimizes_quadratic(self):
        p = Tensor([3.0, -2.0], requires_grad=True)
        opt = Adam([p], 0.1)
        for _ in range(500):
            p.grad = None
            nx.sum(nx.square(p)).backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2


class TestMetrics:
    def test_perfect(self):
        y = np.array([0, 1, 2, 3, 1])
        m = classification_metrics(y, y, 4)
        assert m["oa"] == m["macc"] == 1.0
        assert instance_miou([y], [y]) == 1.0

    def test_constant_predictor(self):
        y = np.repeat(np.arange(4), 25)
        m = classification_metrics(np.zeros(100, int), y, 4)
        assert m["oa"] == 0.25 and m["macc"] == 0.25

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
    def test_recount_oracle(self, pairs):
        pred = np.array([p for p, _ in pairs])
        true = np.array([t for _, t in pairs])
        m = classification_metrics(pred, true, 5)
        hits = sum(p == t for p, t in pairs)
        assert m["oa"] == hits / len(pairs)
        per = {}
        for c in set(true.tolist()):
            rows = [p for p, t in pairs if t == c]
            per[c] = sum(p == c for p in rows) / len(rows)
        assert m["per_class"] == per
        assert abs(m["macc"] - sum(per.values()) / len(per)) < 1e-15

    @settings(max_examples=50)
    @given(st.lists(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=20), min_size=1, max_size=5))
    def test_miou_recount(self, samples):
        preds = [np.array([p for p, _ in s]) for s in samples]
        trues = [np.array([t for _, t in s]) for s in samples]
        scores = []
        for s in samples:
            parts = {p for p, _ in s} | {t for _, t in s}
            ious = []
            for k in parts:
                inter = sum(p == k and t == k for p, t in s)
                union = sum(p == k or t == k for p, t in s)
                ious.append(inter / union)
            scores.append(sum(ious) / len(ious))
        assert abs(instance_miou(preds, trues) - sum(scores) / len(scores)) < 1e-12


@pytest.fixture(scope="module")
def tiny_data():
    return gen_shapes(["sphere", "torus"], 32, 8, seed=3), gen_shapes(["sphere", "torus"], 32, 4, seed=3, offset=8)


class TestTrain:
    def test_zero_lr_keeps_parameters(self, tiny_data):
        data, _ = tiny_data
        cfg = tiny_config(num_classes=2)
        before = [p.data.copy() for p in build_model(cfg, 0).parameters()]
        res = train(data, cfg, TrainConfig(epochs=3, batch_size=4, lr=0.0, optimizer="sgd"))
        for a, p in zip(before, res.model.parameters()):
            assert np.array_equal(a, p.data)
        losses = [r["loss"] for r in res.history]
        assert losses[0] == losses[1] == losses[2]

    def test_memorizes_two_samples(self):
        data = gen_shapes(["sphere", "cube"], 32, 2, seed=0)
        cfg = tiny_config(num_classes=2)
        res = train(data, cfg, TrainConfig(epochs=200, batch_size=2, lr=1e-2))
        first = next(r["epoch"] for r in res.history if r["oa"] == 1.0)
        assert first <= 200
        assert evaluate(data, res.model)["oa"] == 1.0
        losses = [r["loss"] for r in res.history][19:]
        rises = sum(b > a for a, b in zip(losses, losses[1:]))
        assert rises <= 0.05 * (len(losses) - 1)

    def test_deterministic(self, tiny_data):
        data, test = tiny_data
        cfg = tiny_config(num_classes=2)
        tc = TrainConfig(epochs=2, batch_size=3, seed=5)
        a = train(data, cfg, tc, test).metrics_csv()
        b = train(data, cfg, tc, test).metrics_csv()
        assert a == b and a.splitlines()[0] == "epoch,split,loss,oa,macc"
        assert len(a.splitlines()) == 1 + 2 * 2

    def test_segmentation_columns(self):
        data = gen_shapes(["cube", "cylinder"], 32, 4, seed=2, segmentation=True)
        res = train(data, tiny_config("segment"), TrainConfig(epochs=1, batch_size=2))
        assert res.metrics_csv().splitlines()[0] == "epoch,split,loss,oa,macc,miou"
        m = evaluate(data, res.model)
        assert 0.0 <= m["miou"] <= 1.0

    def test_variant_override(self, tiny_data):
        data, _ = tiny_data
        res = train(data, tiny_config(num_classes=2), TrainConfig(epochs=1, variant="no_spa", relation="add"))
        assert res.model.cfg.variant == "no_spa" and res.model.cfg.relation == "add"
        assert all(b.spa is None for b in res.model.blocks)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, tiny_data):
        data, _ = tiny_data
        with pytest.raises(DivergenceError):
            train(data, tiny_config(num_classes=2), TrainConfig(epochs=3, lr=1e200, optimizer="sgd"))

    def test_label_mismatch(self):
        data = gen_shapes(SHAPE_CLASSES, 32, 4, seed=0)
        with pytest.raises(ValueError):
            train(data, tiny_config(num_classes=2), TrainConfig(epochs=1))

    def test_segmentation_needs_point_labels(self, tiny_data):
        with pytest.raises(ValueError):
            train(tiny_data[0], tiny_config("segment"), TrainConfig(epochs=1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            TrainConfig(variant="bogus")
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)


class TestRecords:
    def test_git_blob_hash(self):
        # `printf hello | git hash-object --stdin`
        assert content_hash(b"hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"

    def test_record_contents(self):
        rec = experiment_record(tiny_config(), TrainConfig(seed=9), "abc")
        assert rec["seed"] == 9 and rec["dataset_hash"] == "abc"
        assert rec["model"]["stage_channels"] == "6,8"
