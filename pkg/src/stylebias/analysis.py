"""Shape/texture bias analysis.

Cue-conflict images put the silhouette of one class under the texture of
another, produced by optimizing pixels against a Gram-matrix texture loss.
On such a set the shape bias of a class is the share of its cue-matching
predictions that follow the shape; linear probes on frozen penultimate
features measure how much shape and texture information the backbone keeps.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from sklearn.model_selection import KFold

from . import serial
from .datagen import DomainDataset, leave_one_out, load_image
from .errors import OptimizationError, StyleBiasError, UndefinedReportError
from .stylizer import LimitedSources, StylizationConfig, StylizerWeights
from .trainer import TrainConfig, extract_features, mean_std, predict, train

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Gram-matrix style transfer
# ---------------------------------------------------------------------------


def gram_matrix(feats: torch.Tensor) -> torch.Tensor:
    """``G[i, j] = <F_i, F_j> / (H * W)`` for a ``(C, H, W)`` or ``(B, C, H, W)`` map."""
    *lead, c, h, w = feats.shape
    flat = feats.reshape(*lead, c, h * w)
    return flat @ flat.transpose(-1, -2) / (h * w)


def gram_losses(encoder, image, content_target, style_grams, layers, content_weight, style_weight):
    feats = encoder(image, all_layers=True)
    content = F.mse_loss(feats[-1], content_target)
    style = sum(F.mse_loss(gram_matrix(feats[i]), style_grams[i]) for i in layers)
    return content_weight * content + style_weight * style


def gram_style_transfer(
    content,
    texture,
    iterations=200,
    weights: StylizerWeights = None,
    *,
    content_weight=1.0,
    style_weight=1.0,
    layers=(0, 1, 2, 3),
    lr=0.01,
    decay_every=None,
    decay=0.5,
    return_history=False,
):
    """Optimize an image, initialized at ``content``, toward ``texture``'s Gram statistics.

    Content loss: deepest-layer feature MSE against the content image.
    Style loss: Gram MSE at ``layers`` against the texture image.  Pixels are
    updated with Adam under a step-decayed rate and projected to [0, 1] after
    each step.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if weights is None:
        raise ValueError("a feature extractor (stylizer weights) is required")
    encoder = weights.encoder
    c = torch.as_tensor(np.asarray(content, dtype=np.float32))[None]
    t = torch.as_tensor(np.asarray(texture, dtype=np.float32))[None]
    if t.shape[-2:] != c.shape[-2:]:
        t = F.interpolate(t, size=c.shape[-2:], mode="bilinear", align_corners=False, antialias=True)
    with torch.no_grad():
        content_target = encoder(c)
        style_grams = {i: gram_matrix(f) for i, f in enumerate(encoder(t, all_layers=True)) if i in layers}
    x = c.clone().requires_grad_(True)
    opt = torch.optim.Adam([x], lr=lr)
    step = decay_every or max(1, iterations // 4)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=step, gamma=decay)
    history = []
    for it in range(iterations):
        loss = gram_losses(encoder, x, content_target, style_grams, layers, content_weight, style_weight)
        if not torch.isfinite(loss):
            raise OptimizationError(f"non-finite loss at iteration {it}", it, history)
        history.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        with torch.no_grad():
            x.clamp_(0, 1)
    with torch.no_grad():
        final = gram_losses(encoder, x, content_target, style_grams, layers, content_weight, style_weight).item()
    history.append(final)
    out = x.detach()[0].numpy()
    return (out, history) if return_history else out


# ---------------------------------------------------------------------------
# cue-conflict sets
# ---------------------------------------------------------------------------


@dataclass
class CueConflictSample:
    image: np.ndarray
    y_s: int
    y_t: int
    content_index: int = -1
    texture_index: int = -1

    def __post_init__(self):
        if self.y_s == self.y_t:
            raise ValueError("cue-conflict sample needs different shape and texture labels")


@dataclass
class CueConflictSet:
    samples: list[CueConflictSample]
    per_class_cap: int
    classes: tuple[str, ...]
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 3, 1, 1), np.float32)
        return np.stack([s.image for s in self.samples])

    @property
    def shape_labels(self) -> np.ndarray:
        return np.array([s.y_s for s in self.samples], dtype=np.int64)

    @property
    def texture_labels(self) -> np.ndarray:
        return np.array([s.y_t for s in self.samples], dtype=np.int64)

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        rows = []
        for i, s in enumerate(self.samples):
            fname = f"{i:05d}.png"
            pixels = np.round(np.clip(s.image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(root / fname)
            rows.append({
                "id": i,
                "file": fname,
                "y_s": s.y_s,
                "y_t": s.y_t,
                "content_index": s.content_index,
                "texture_index": s.texture_index,
            })
        doc = {"classes": list(self.classes), "per_class_cap": self.per_class_cap, "samples": rows, "build": self.manifest}
        serial.atomic_write(root / "manifest.json", json.dumps(doc, indent=2, sort_keys=True))

    @classmethod
    def load(cls, root) -> "CueConflictSet":
        root = Path(root)
        doc = json.loads((root / "manifest.json").read_text())
        samples = []
        for r in doc["samples"]:
            with Image.open(root / r["file"]) as im:
                side = im.size[0]
            samples.append(CueConflictSample(load_image(root / r["file"], side), r["y_s"], r["y_t"], r["content_index"], r["texture_index"]))
        return cls(samples, doc["per_class_cap"], tuple(doc["classes"]), doc.get("build", {}))


def all_correct(models, dataset: DomainDataset) -> np.ndarray:
    """Indices every model classifies correctly."""
    ok = np.ones(len(dataset), dtype=bool)
    for m in models:
        ok &= predict(m, dataset.images) == dataset.labels
    return np.flatnonzero(ok)


def build_cue_conflict(
    models: Sequence,
    content_pool: DomainDataset,
    texture_pool: DomainDataset,
    cap=45,
    seed=0,
    *,
    weights: StylizerWeights,
    iterations=200,
    **transfer_kwargs,
) -> CueConflictSet:
    """Cue-conflict set from images every model gets right.

    Each surviving content image (at most ``cap`` per shape class, chosen by
    a seeded shuffle) is paired with a uniformly drawn surviving texture of a
    different class and passed through :func:`gram_style_transfer`.
    Classes without usable content or textures are listed in the manifest.
    """
    if not models:
        raise ValueError("need at least one model")
    if len(content_pool) == 0 or len(texture_pool) == 0:
        raise ValueError("content and texture pools must be non-empty")
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    classes = content_pool.classes
    rng = np.random.default_rng([seed, 45])
    good_content = all_correct(models, content_pool)
    good_texture = all_correct(models, texture_pool)
    manifest = {
        "seed": seed,
        "cap": cap,
        "iterations": iterations,
        "content_pool": content_pool.name,
        "texture_pool": texture_pool.name,
        "content_survivors": int(len(good_content)),
        "texture_survivors": int(len(good_texture)),
        "omitted": {},
    }
    tex_labels = texture_pool.labels[good_texture]
    samples = []
    for c in range(len(classes)):
        cands = good_content[content_pool.labels[good_content] == c]
        if len(cands) == 0:
            manifest["omitted"][classes[c]] = "no content image classified correctly by all models"
            continue
        others = good_texture[tex_labels != c]
        if len(others) == 0:
            manifest["omitted"][classes[c]] = "no texture of another class classified correctly by all models"
            continue
        chosen = np.sort(rng.permutation(cands)[:cap])
        for ci in chosen:
            ti = int(others[rng.integers(len(others))])
            img = gram_style_transfer(content_pool.images[ci], texture_pool.images[ti], iterations, weights, **transfer_kwargs)
            samples.append(CueConflictSample(img, c, int(texture_pool.labels[ti]), int(ci), ti))
    manifest["n_samples"] = len(samples)
    return CueConflictSet(samples, cap, classes, manifest)


# ---------------------------------------------------------------------------
# shape bias
# ---------------------------------------------------------------------------


@dataclass
class BiasReport:
    model_tag: str
    classes: tuple[str, ...]
    per_class: list  # float or None (undefined) per class
    average: float
    sample_average: float
    shape_accuracy: float | None = None
    texture_accuracy: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def shape_bias_counts(preds, y_s, y_t, n_classes):
    """Per predicted class: (# predictions matching shape, # matching texture)."""
    preds, y_s, y_t = (np.asarray(a, dtype=np.int64) for a in (preds, y_s, y_t))
    shape_hits = np.bincount(preds[preds == y_s], minlength=n_classes)
    texture_hits = np.bincount(preds[preds == y_t], minlength=n_classes)
    return shape_hits, texture_hits


def shape_bias_from_predictions(preds, y_s, y_t, classes, model_tag="model") -> BiasReport:
    shape_hits, texture_hits = shape_bias_counts(preds, y_s, y_t, len(classes))
    denom = shape_hits + texture_hits
    if denom.sum() == 0:
        raise UndefinedReportError("no prediction matched either the shape or the texture label")
    per_class = [float(s / d) if d > 0 else None for s, d in zip(shape_hits, denom)]
    defined = [v for v in per_class if v is not None]
    return BiasReport(
        model_tag=model_tag,
        classes=tuple(classes),
        per_class=per_class,
        average=float(np.mean(defined)),
        sample_average=float(shape_hits.sum() / denom.sum()),
    )


def shape_bias(model, cue_set: CueConflictSet, model_tag=None) -> BiasReport:
    if len(cue_set) == 0:
        raise ValueError("cue-conflict set is empty")
    preds = predict(model, cue_set.images)
    tag = model_tag or getattr(model, "arch", "model")
    return shape_bias_from_predictions(preds, cue_set.shape_labels, cue_set.texture_labels, cue_set.classes, tag)


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------


def probe_features(features, labels, n_classes, folds=5, epochs=200, lr=0.01, seed=0) -> float:
    """Mean over folds of the best validation accuracy of a linear softmax probe.

    Full-batch gradient descent from zero weights on features standardized
    with the training fold's statistics.  Folds whose training part holds a
    single class are skipped.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) < folds:
        raise ValueError(f"need at least {folds} samples for {folds}-fold probing, got {len(x)}")
    scores = []
    for k, (tr, va) in enumerate(KFold(n_splits=folds, shuffle=True, random_state=seed).split(x)):
        if len(np.unique(y[tr])) < 2:
            logger.warning("probe fold %d skipped: training part has a single class", k)
            continue
        mu = x[tr].mean(0)
        sd = x[tr].std(0) + 1e-8
        xtr = torch.from_numpy((x[tr] - mu) / sd)
        xva = torch.from_numpy((x[va] - mu) / sd)
        ytr = torch.from_numpy(y[tr])
        yva = torch.from_numpy(y[va])
        w = torch.zeros(x.shape[1], n_classes, dtype=torch.float64, requires_grad=True)
        b = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
        best = 0.0
        for _ in range(epochs):
            loss = F.cross_entropy(xtr @ w + b, ytr)
            gw, gb = torch.autograd.grad(loss, (w, b))
            with torch.no_grad():
                w -= lr * gw
                b -= lr * gb
                acc = ((xva @ w + b).argmax(1) == yva).double().mean().item()
            best = max(best, acc)
        scores.append(best)
    if not scores:
        raise StyleBiasError("every probe fold was degenerate")
    return float(np.mean(scores))


def probe_accuracy(model, cue_set: CueConflictSet, label_kind="shape", folds=5, epochs=200, lr=0.01, seed=0) -> float:
    """Shape or texture accuracy of a linear probe on the frozen penultimate layer."""
    kind = label_kind.lower()
    if kind not in ("shape", "texture"):
        raise ValueError(f"label_kind must be 'shape' or 'texture', got {label_kind!r}")
    labels = cue_set.shape_labels if kind == "shape" else cue_set.texture_labels
    feats = extract_features(model, cue_set.images)
    return probe_features(feats, labels, len(cue_set.classes), folds, epochs, lr, seed)


def bias_report(model, cue_set: CueConflictSet, model_tag=None, folds=5, seed=0) -> BiasReport:
    report = shape_bias(model, cue_set, model_tag)
    report.shape_accuracy = probe_accuracy(model, cue_set, "shape", folds, seed=seed)
    report.texture_accuracy = probe_accuracy(model, cue_set, "texture", folds, seed=seed)
    return report


def format_bias_tables(reports: Sequence[BiasReport]) -> str:
    """Per-class shape bias table followed by a shape/texture probe table (percent)."""
    if not reports:
        raise ValueError("no reports")
    classes = reports[0].classes
    tag_w = max(12, max(len(r.model_tag) for r in reports) + 2)
    head = "".ljust(tag_w) + "".join(c.capitalize().rjust(10) for c in classes) + "Avg.".rjust(10)
    lines = ["Shape Bias", head]
    for r in reports:
        cells = "".join(("-" if v is None else f"{100 * v:.2f}").rjust(10) for v in r.per_class)
        lines.append(r.model_tag.ljust(tag_w) + cells + f"{100 * r.average:.2f}".rjust(10))
    lines += ["", "".ljust(tag_w) + "Shape".rjust(10) + "Texture".rjust(10)]
    for r in reports:
        def pct(v):
            return "-" if v is None else f"{100 * v:.2f}"

        lines.append(r.model_tag.ljust(tag_w) + pct(r.shape_accuracy).rjust(10) + pct(r.texture_accuracy).rjust(10))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# limited-source stylization ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    subset: tuple[str, ...]
    mean: float
    std: float
    accuracies: list
    style_domains: list  # union of style provenance domains over the runs


def limited_source_ablation(
    group,
    target: str,
    subsets: Sequence,
    runs=3,
    *,
    config: TrainConfig,
    stylizer: StylizerWeights,
    base_seed=0,
) -> list[AblationRow]:
    """Train with ``LimitedSources(subset)`` stylization for every subset, ``runs`` times each."""
    sources, tgt = leave_one_out(group, target)
    source_names = {d.name for d in sources}
    rows = []
    for subset in subsets:
        subset = tuple(sorted(subset))
        if not subset or not set(subset) <= source_names:
            raise ValueError(f"subset {subset} must be a non-empty subset of the sources {sorted(source_names)}")
        sty = StylizationConfig(
            p=config.stylization.p,
            alpha=config.stylization.alpha,
            regime=LimitedSources(subset),
            seed=config.stylization.seed,
            stylize_first=config.stylization.stylize_first,
        )
        accs, seen = [], set()
        for r in range(runs):
            cfg = dataclasses.replace(config, stylization=sty, seed=base_seed + r)
            _, record = train(sources, tgt, cfg, stylizer)
            accs.append(record.selected_target_acc)
            seen |= set(record.style_domain_counts)
        mean, std = mean_std(accs)
        rows.append(AblationRow(subset, mean, std, accs, sorted(seen)))
        logger.info("ablation %s -> %s: %.4f +- %.4f", ",".join(subset), target, mean, std)
    return rows


def format_ablation(rows: Sequence[AblationRow], target: str) -> str:
    head = target.ljust(12) + "".join(",".join(r.subset).rjust(16) for r in rows)
    body = "".ljust(12) + "".join(f"{100 * r.mean:.2f} ± {100 * r.std:.2f}".rjust(16) for r in rows)
    return head + "\n" + body + "\n"
