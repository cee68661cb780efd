import dataclasses
import math

import numpy as np
import pytest
import torch
from torch import nn

from stylebias import serial
from stylebias.datagen import DomainDataset, leave_one_out
from stylebias.errors import ConfigurationError, SchemaError
from stylebias.stylizer import StylizationConfig
from stylebias.trainer import (
    ClassifierModel,
    EpochMetrics,
    Protocol,
    RunRecord,
    TrainConfig,
    augment,
    cross_entropy,
    evaluate,
    load_checkpoint,
    lr_at,
    make_optimizer,
    mean_std,
    predict,
    repeat_runs,
    save_checkpoint,
    select_epoch,
    summarize_runs,
    train,
)

TINY = TrainConfig(lr=0.01, batch_size=8, epochs=3, lr_drop_epoch=2, val_fraction=0.25)


def test_cross_entropy_closed_form():
    expected = math.log(math.exp(1) + math.exp(2) + math.exp(3)) - 1
    assert cross_entropy([1.0, 2.0, 3.0], 0) == pytest.approx(expected, abs=1e-12)
    assert cross_entropy([1.0, 2.0, 3.0], 0) == pytest.approx(2.40760596, abs=1e-8)


def test_cross_entropy_uniform_and_confident():
    assert cross_entropy([0.0] * 7, 3) == pytest.approx(math.log(7), abs=1e-12)
    z = [0.0] * 5
    z[2] = 1000.0
    assert cross_entropy(z, 2) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_batch_and_errors():
    z = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], requires_grad=True)
    loss = cross_entropy(z, torch.tensor([0, 1]))
    assert loss.item() == pytest.approx((2.40760596 + math.log(3)) / 2, abs=1e-6)
    loss.backward()
    assert z.grad is not None
    with pytest.raises(ValueError):
        cross_entropy([1.0, 2.0], 2)
    with pytest.raises(ValueError):
        cross_entropy([float("nan"), 1.0], 0)


def test_softmax_sums_to_one():
    m = ClassifierModel(5, seed=0).eval()
    p = torch.softmax(m(torch.rand(3, 3, 32, 32)), 1)
    np.testing.assert_allclose(p.sum(1).detach().numpy(), 1.0, atol=1e-5)
    assert m.features(torch.rand(2, 3, 32, 32)).shape == (2, 128)


def test_sgd_matches_reference_recurrence():
    # f(w) = 0.5 * (a1 w1^2 + a2 w2^2); reference heavy-ball update with L2 decay
    a = [3.0, 0.5]
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01, epochs=1, lr_drop_epoch=1)
    w = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([w], cfg)
    ref_w, ref_v = [1.0, -2.0], [0.0, 0.0]
    for step in range(5):
        loss = 0.5 * (a[0] * w[0] ** 2 + a[1] * w[1] ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        for i in range(2):
            g = a[i] * ref_w[i] + 0.01 * ref_w[i]
            ref_v[i] = g if step == 0 else 0.9 * ref_v[i] + g
            ref_w[i] -= 0.1 * ref_v[i]
        np.testing.assert_allclose(w.detach().numpy(), ref_w, rtol=0, atol=1e-10)


def test_lr_schedule_exact():
    cfg = TrainConfig(lr=0.001, epochs=80, lr_drop_epoch=60, lr_drop_factor=0.1)
    assert all(lr_at(cfg, e) == 0.001 for e in range(60))
    assert all(lr_at(cfg, e) == 0.001 * 0.1 for e in range(60, 80))


@pytest.mark.parametrize(
    "kwargs", [dict(lr=0), dict(momentum=1.0), dict(batch_size=0), dict(epochs=5, lr_drop_epoch=6)]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_classifier_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = ClassifierModel(3, seed=2).double().eval()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    y = torch.tensor([1])
    params = [p for p in model.parameters()]
    loss = cross_entropy(model(x), y)
    grads = torch.autograd.grad(loss, params)
    g = np.random.default_rng(0)
    h = 1e-6
    for _ in range(24):
        k = int(g.integers(len(params)))
        flat = params[k].data.view(-1)
        i = int(g.integers(flat.numel()))
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + h
            up = cross_entropy(model(x), y).item()
            flat[i] = old - h
            down = cross_entropy(model(x), y).item()
            flat[i] = old
        numeric = (up - down) / (2 * h)
        analytic = grads[k].view(-1)[i].item()
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-9, (k, i, analytic, numeric)


class _Fixed(nn.Module):
    """Stub classifier returning preset logits, one row per input."""

    def __init__(self, logits, classes):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)
        self.classes = classes
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return self.logits[: len(x)] + 0 * self.w


def _ds(labels, classes=("a", "b", "c")):
    return DomainDataset("d", np.zeros((len(labels), 3, 4, 4), np.float32), np.array(labels), classes)


def test_evaluate_counts():
    classes = ("a", "b")
    always_zero = _Fixed([[1.0, 0.0]] * 4, classes)
    assert evaluate(always_zero, _ds([0, 0, 0, 0], classes)) == 1.0
    labels = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]
    logits = np.eye(3)[labels]
    logits[[1, 4, 8]] = np.eye(3)[[0, 0, 0]]  # three wrong
    assert evaluate(_Fixed(logits, ("a", "b", "c")), _ds(labels)) == pytest.approx(0.7)


def test_evaluate_errors():
    m = ClassifierModel(3, classes=("a", "b", "c"))
    with pytest.raises(ValueError):
        evaluate(m, _ds([]))
    with pytest.raises(SchemaError):
        evaluate(m, _ds([0], ("a", "b", "x")))


def test_evaluate_is_side_effect_free(tiny_group):
    m = ClassifierModel(3, classes=tiny_group.classes, seed=0)
    m.train()
    before = serial.state_hash(m)
    evaluate(m, tiny_group["photo"])
    predict(m, tiny_group["art"].images)
    assert serial.state_hash(m) == before
    assert m.training


def test_checkpoint_roundtrip(tmp_path, tiny_group):
    m = ClassifierModel(3, classes=tiny_group.classes, seed=4).eval()
    save_checkpoint(m, tmp_path / "c.bin", epoch=7, config_hash="abc")
    back, meta = load_checkpoint(tmp_path / "c.bin")
    assert meta["epoch"] == 7 and meta["config_hash"] == "abc" and back.classes == m.classes
    x = torch.from_numpy(tiny_group["photo"].images)
    torch.testing.assert_close(back(x), m(x))
    assert back.to_bytes(7, "abc") == m.to_bytes(7, "abc")


def test_augment_identity_and_range(rng):
    x = torch.rand(4, 3, 16, 16)
    off = TrainConfig(hflip=False, crop=False, color_jitter=False)
    assert augment(x, off, rng) is x
    out = augment(x, TrainConfig(), rng)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    flip_only = TrainConfig(crop=False, color_jitter=False)
    out = augment(x, flip_only, np.random.default_rng(0))
    for a, b in zip(out, x):
        assert torch.equal(a, b) or torch.equal(a, b.flip(-1))


def _history(vals, targets):
    return [EpochMetrics(i, 0.1, 1.0, v, t) for i, (v, t) in enumerate(zip(vals, targets))]


def test_select_epoch_ties_go_later():
    h = _history([0.5, 0.9, 0.9, 0.8], [0.1, 0.2, 0.3, 0.9])
    assert select_epoch(h, Protocol.SOURCE_VAL) == 2
    assert select_epoch(h, Protocol.MAX_TARGET) == 3


def test_run_record_roundtrip():
    rec = RunRecord("h", 1, "sketch", _history([0.5, 0.6], [0.3, 0.4]), 1, 0.4, 0.4,
                    train_domain_counts={"a": 3}, style_domain_counts={"b": 1}, stylized_fraction=0.25, wall_time=9.0)
    back = RunRecord.from_jsonl(rec.to_jsonl())
    assert back == rec
    assert "wall_time" not in rec.to_jsonl()


def test_mean_std():
    m, s = mean_std([84.5, 84.6, 84.7])
    assert m == pytest.approx(84.6) and s == pytest.approx(0.1)
    assert mean_std([3.0]) == (3.0, 0.0)


def test_repeat_runs_deterministic_gives_zero_std():
    s = repeat_runs(lambda t, seed: {"a": 0.8, "b": 0.6}[t], ["a", "b"], n_runs=3)
    assert s.per_domain["a"] == (pytest.approx(0.8), 0.0)
    assert s.average[0] == pytest.approx(0.7) and s.average[1] == 0.0


def test_summarize_runs_average_of_run_means():
    s = summarize_runs({"a": [1.0, 0.0], "b": [0.0, 1.0]})
    assert s.average == (0.5, 0.0)
    with pytest.raises(ValueError):
        summarize_runs({"a": [1.0], "b": [0.0, 1.0]})


def test_train_baseline_deterministic(tiny_group):
    sources, target = leave_one_out(tiny_group, "cartoon")
    m1, r1 = train(sources, target, TINY, config_hash="x")
    m2, r2 = train(sources, target, TINY, config_hash="x")
    assert r1.to_jsonl() == r2.to_jsonl()
    assert m1.to_bytes() == m2.to_bytes()
    assert r1.max_target_acc >= r1.selected_target_acc
    assert len(r1.epochs) == 3 and r1.epochs[2].lr == pytest.approx(0.001)


def test_train_stylized_isolation_and_provenance(tiny_group, small_weights):
    sources, target = leave_one_out(tiny_group, "photo")
    seen = []
    cfg = dataclasses.replace(TINY, epochs=2, lr_drop_epoch=2, stylization=StylizationConfig(p=0.5))
    _, rec = train(sources, target, cfg, small_weights, on_batch=lambda o, d: seen.append((o, d)))
    for origins, draws in seen:
        assert "photo" not in origins
        for o, d in zip(origins, draws):
            assert d is None or (d.domain != o and d.domain != "photo")
    assert 0.2 < rec.stylized_fraction < 0.8
    assert set(rec.style_domain_counts) <= {"art", "cartoon"}
    _, rec2 = train(sources, target, cfg, small_weights)
    assert rec2.to_jsonl() == rec.to_jsonl()


def test_train_rejects_target_among_sources(tiny_group):
    with pytest.raises(SchemaError):
        train(tiny_group.domains, tiny_group["art"], TINY)
