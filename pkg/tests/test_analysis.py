import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from stylebias import serial
from stylebias.analysis import (
    BiasReport,
    CueConflictSample,
    CueConflictSet,
    build_cue_conflict,
    format_ablation,
    format_bias_tables,
    gram_matrix,
    gram_style_transfer,
    limited_source_ablation,
    probe_accuracy,
    probe_features,
    shape_bias,
    shape_bias_from_predictions,
)
from stylebias.datagen import DomainDataset
from stylebias.errors import OptimizationError, UndefinedReportError
from stylebias.trainer import ClassifierModel, TrainConfig


def test_gram_matches_double_loop():
    f = torch.arange(12, dtype=torch.float64).reshape(3, 2, 2) / 7 - 0.5
    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            expected[i, j] = sum(f[i, y, x].item() * f[j, y, x].item() for y in range(2) for x in range(2)) / 4
    np.testing.assert_allclose(gram_matrix(f).numpy(), expected, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_gram_symmetric_psd(c, m, seed):
    f = torch.from_numpy(np.random.default_rng(seed).normal(size=(c, m, m)))
    g = gram_matrix(f)
    assert torch.equal(g, g.T)
    assert torch.linalg.eigvalsh(g).min().item() >= -1e-8


def test_gram_transfer_basic(small_weights, rng):
    c = rng.random((3, 32, 32), dtype=np.float32)
    t = rng.random((3, 32, 32), dtype=np.float32)
    out, hist = gram_style_transfer(c, t, 60, small_weights, return_history=True)
    assert out.shape == c.shape and out.min() >= 0 and out.max() <= 1
    assert hist[-1] < hist[0]
    one = gram_style_transfer(c, t, 1, small_weights)
    assert one.shape == c.shape
    with pytest.raises(ValueError):
        gram_style_transfer(c, t, 0, small_weights)


def test_gram_transfer_fixed_point(small_weights, tiny_group):
    c = tiny_group["photo"].images[0]
    out = gram_style_transfer(c, c, 50, small_weights)
    assert np.sqrt(((out - c) ** 2).mean()) < 0.05


def test_gram_transfer_non_finite(small_weights):
    c = np.full((3, 32, 32), np.nan, np.float32)
    with pytest.raises(OptimizationError) as exc:
        gram_style_transfer(c, np.zeros_like(c), 5, small_weights)
    assert exc.value.epoch == 0


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gram_transfer_reduces_loss(seed):
    g = np.random.default_rng(seed)
    c = _GROUP.domains[int(g.integers(3))].images[int(g.integers(6))]
    t = _GROUP.domains[int(g.integers(3))].images[int(g.integers(6))]
    _, hist = gram_style_transfer(c, t, 50, _WEIGHTS, return_history=True)
    assert hist[-1] < hist[0]


class _LabelReader(nn.Module):
    """Reads the class from the mean of channel 0 (value = label / 10)."""

    def __init__(self, n, flip=False):
        super().__init__()
        self.n, self.flip = n, flip
        self.classes = tuple(f"c{i}" for i in range(n))
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        k = torch.round(x[:, 0].mean((1, 2)) * 10).long().clamp(0, self.n - 1)
        if self.flip:
            k = (k + 1) % self.n
        return torch.nn.functional.one_hot(k, self.n).float() + 0 * self.dummy


def _pool(name, n_classes, per_class):
    labels = np.repeat(np.arange(n_classes), per_class)
    imgs = np.zeros((len(labels), 3, 32, 32), np.float32)
    imgs[:, 0] = (labels / 10)[:, None, None]
    imgs[:, 1] = np.linspace(0, 1, 32)[None, None, :]
    return DomainDataset(name, imgs, labels, tuple(f"c{i}" for i in range(n_classes)))


def test_cue_conflict_sample_rejects_matching_labels():
    with pytest.raises(ValueError):
        CueConflictSample(np.zeros((3, 4, 4)), 1, 1)


def test_build_cue_conflict_cap_and_exclusion(small_weights):
    content, textures = _pool("content", 3, 4), _pool("textures", 3, 2)
    cue = build_cue_conflict([_LabelReader(3)], content, textures, cap=2, seed=0, weights=small_weights, iterations=2)
    counts = np.bincount(cue.shape_labels, minlength=3)
    assert counts.max() <= 2 and len(cue) == 6
    assert all(s.y_s != s.y_t for s in cue.samples)
    assert all(textures.labels[s.texture_index] == s.y_t for s in cue.samples)
    again = build_cue_conflict([_LabelReader(3)], content, textures, cap=2, seed=0, weights=small_weights, iterations=2)
    assert np.array_equal(again.images, cue.images)


def test_build_cue_conflict_disagreeing_models(small_weights):
    content, textures = _pool("content", 3, 2), _pool("textures", 3, 2)
    cue = build_cue_conflict([_LabelReader(3), _LabelReader(3, flip=True)], content, textures, cap=5, seed=0,
                             weights=small_weights, iterations=2)
    assert len(cue) == 0
    assert sorted(cue.manifest["omitted"]) == ["c0", "c1", "c2"]


def test_build_cue_conflict_argument_checks(small_weights):
    content = _pool("content", 2, 1)
    with pytest.raises(ValueError):
        build_cue_conflict([], content, content, weights=small_weights)
    with pytest.raises(ValueError):
        build_cue_conflict([_LabelReader(2)], content, content, cap=0, weights=small_weights)


def test_cue_set_roundtrip(tmp_path, rng):
    samples = [CueConflictSample(rng.random((3, 16, 16), dtype=np.float32), i % 3, (i + 1) % 3, i, i) for i in range(5)]
    cue = CueConflictSet(samples, 45, ("a", "b", "c"), {"seed": 0})
    cue.save(tmp_path)
    back = CueConflictSet.load(tmp_path)
    assert back.classes == cue.classes and back.per_class_cap == 45
    np.testing.assert_array_equal(back.shape_labels, cue.shape_labels)
    np.testing.assert_array_equal(back.texture_labels, cue.texture_labels)
    assert np.abs(back.images - cue.images).max() <= 0.5 / 255 + 1e-6


def test_shape_bias_table_example():
    # A=0, B=1, C=2
    r = shape_bias_from_predictions([0, 0, 1], [0, 2, 1], [1, 0, 0], ("A", "B", "C"))
    assert r.per_class == [0.5, 1.0, None]
    assert r.average == pytest.approx(0.75)
    assert r.sample_average == pytest.approx(2 / 3)


def test_shape_bias_follows_shape():
    y_s = np.array([0, 1, 2, 0])
    r = shape_bias_from_predictions(y_s, y_s, (y_s + 1) % 3, ("a", "b", "c"))
    assert r.per_class == [1.0, 1.0, 1.0]


def test_shape_bias_all_undefined():
    with pytest.raises(UndefinedReportError):
        shape_bias_from_predictions([2, 2], [0, 1], [1, 0], ("a", "b", "c"))


def _brute_force(preds, y_s, y_t, n):
    out = []
    for c in range(n):
        s = sum(1 for p, a, b in zip(preds, y_s, y_t) if p == c and a == c)
        t = sum(1 for p, a, b in zip(preds, y_s, y_t) if p == c and b == c)
        out.append(None if s + t == 0 else s / (s + t))
    return out


@st.composite
def prediction_tables(draw):
    n = draw(st.integers(2, 7))
    size = draw(st.integers(1, 100))
    y_s = draw(st.lists(st.integers(0, n - 1), min_size=size, max_size=size))
    y_t = [(a + draw(st.integers(1, n - 1))) % n for a in y_s]
    preds = draw(st.lists(st.integers(0, n - 1), min_size=size, max_size=size))
    return n, preds, y_s, y_t


@settings(max_examples=200, deadline=None)
@given(prediction_tables())
def test_shape_bias_matches_enumeration(table):
    n, preds, y_s, y_t = table
    expected = _brute_force(preds, y_s, y_t, n)
    if all(v is None for v in expected):
        with pytest.raises(UndefinedReportError):
            shape_bias_from_predictions(preds, y_s, y_t, tuple(range(n)))
        return
    r = shape_bias_from_predictions(preds, y_s, y_t, tuple(range(n)))
    assert r.per_class == expected
    defined = [v for v in expected if v is not None]
    assert all(0 <= v <= 1 for v in defined)
    assert r.average == pytest.approx(sum(defined) / len(defined))


def test_probe_one_hot_texture_features():
    labels = np.tile(np.arange(4), 10)
    assert probe_features(np.eye(4)[labels], labels, 4) == 1.0


def test_probe_random_features_near_chance():
    g = np.random.default_rng(0)
    labels = np.tile(np.arange(4), 50)
    acc = probe_features(g.normal(size=(200, 16)), labels, 4)
    assert 0.1 < acc < 0.5


def test_probe_needs_enough_samples():
    with pytest.raises(ValueError):
        probe_features(np.zeros((3, 2)), [0, 1, 0], 2)


def _cue_set(rng, n=20, n_classes=3):
    y_s = np.arange(n) % n_classes
    return CueConflictSet(
        [CueConflictSample(rng.random((3, 32, 32), dtype=np.float32), int(a), int((a + 1) % n_classes)) for a in y_s],
        45,
        tuple(f"c{i}" for i in range(n_classes)),
    )


def test_probe_accuracy_isolation(rng):
    model = ClassifierModel(3, classes=("c0", "c1", "c2"), seed=0)
    cue = _cue_set(rng)
    before = serial.state_hash(model)
    acc = probe_accuracy(model, cue, "texture", epochs=20)
    assert 0 <= acc <= 1
    assert serial.state_hash(model) == before
    with pytest.raises(ValueError):
        probe_accuracy(model, cue, "colour")


def test_shape_bias_of_shape_reading_model():
    content = _pool("content", 3, 2)
    samples = [CueConflictSample(img, int(y), int((y + 1) % 3)) for img, y in zip(content.images, content.labels)]
    cue = CueConflictSet(samples, 45, content.classes)
    r = shape_bias(_LabelReader(3), cue, "reader")
    assert r.per_class == [1.0, 1.0, 1.0] and r.model_tag == "reader"


def test_format_bias_tables_marks_undefined():
    r = BiasReport("m", ("a", "b", "c"), [None, 0.5, 1.0], 0.75, 0.6, shape_accuracy=0.5)
    text = format_bias_tables([r])
    assert "Shape Bias" in text
    assert text.splitlines()[2].split()[1:] == ["-", "50.00", "100.00", "75.00"]


def test_limited_source_ablation(tiny_group, small_weights):
    cfg = TrainConfig(lr=0.01, batch_size=8, epochs=1, lr_drop_epoch=1, val_fraction=0.25,
                      stylization=dataclasses.replace(TrainConfig().stylization, p=0.5))
    rows = limited_source_ablation(tiny_group, "photo", [["art"], ["art", "cartoon"], ["cartoon"]], runs=1,
                                   config=cfg, stylizer=small_weights)
    assert [r.subset for r in rows] == [("art",), ("art", "cartoon"), ("cartoon",)]
    assert set(rows[0].style_domains) <= {"art"}
    assert set(rows[2].style_domains) <= {"cartoon"}
    assert "art,cartoon" in format_ablation(rows, "photo")
    with pytest.raises(ValueError):
        limited_source_ablation(tiny_group, "photo", [["photo"]], runs=1, config=cfg, stylizer=small_weights)


from conftest import SMALL_WIDTHS  # noqa: E402
from stylebias.datagen import synthesize_group as _synth  # noqa: E402
from stylebias.stylizer import StylizerWeights  # noqa: E402

_GROUP = _synth(0, 3, 3, 2, 32)
_WEIGHTS = StylizerWeights(widths=SMALL_WIDTHS, seed=0)
