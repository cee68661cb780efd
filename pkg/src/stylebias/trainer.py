"""Classifier training under probabilistic stylization, and evaluation.

Training pools the train splits of all source domains, passes every sample
through the stylization transform and then the standard augmentations, and
optimizes cross entropy with SGD (momentum, weight decay, one step-decay of
the learning rate).  Every epoch is scored on the pooled source validation
splits and on the held-out target; the checkpoint is selected either by
source validation accuracy or, for the oracle protocol, by target accuracy.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch import nn

from . import serial
from .datagen import DomainDataset, check_vocabulary, split
from .errors import ConfigurationError, SchemaError, TrainingError
from .stylizer import ProbabilisticStylizer, StylizationConfig, StylizerWeights

logger = logging.getLogger(__name__)

DESK_WIDTHS = (16, 32, 64, 128)


class Protocol(str, enum.Enum):
    SOURCE_VAL = "source_val"
    MAX_TARGET = "max_target"


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(), nn.MaxPool2d(2))


class ClassifierModel(nn.Module):
    """Backbone producing ``feature_dim`` penultimate features plus a linear head.

    ``arch="desk-cnn"`` is four conv blocks and global average pooling.
    ``"resnet18"`` and ``"alexnet"`` build the torchvision networks without
    weights; pass ``backbone_state`` to load externally supplied ones.
    """

    KIND = b"CKPT"

    def __init__(self, n_classes, arch="desk-cnn", classes=None, seed=0, backbone_state=None):
        super().__init__()
        self.arch = arch
        self.classes = tuple(classes) if classes is not None else tuple(str(i) for i in range(n_classes))
        if len(self.classes) != n_classes:
            raise SchemaError(f"{len(self.classes)} class names for {n_classes} classes")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if arch == "desk-cnn":
                layers, c = [], 3
                for w in DESK_WIDTHS:
                    layers.append(_block(c, w))
                    c = w
                self.backbone = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
                self.feature_dim = DESK_WIDTHS[-1]
            elif arch == "resnet18":
                import torchvision

                net = torchvision.models.resnet18(weights=None)
                self.feature_dim = net.fc.in_features
                net.fc = nn.Identity()
                self.backbone = net
            elif arch == "alexnet":
                import torchvision

                net = torchvision.models.alexnet(weights=None)
                self.feature_dim = net.classifier[-1].in_features
                net.classifier[-1] = nn.Identity()
                self.backbone = net
            else:
                raise ConfigurationError(f"unknown architecture tag {arch!r}")
            self.head = nn.Linear(self.feature_dim, n_classes)
        if backbone_state is not None:
            self.backbone.load_state_dict(backbone_state, strict=False)
        self._imagenet = arch != "desk-cnn"

    @property
    def n_classes(self) -> int:
        return self.head.out_features

    def _normalize(self, x):
        if self._imagenet:
            mean = x.new_tensor([0.485, 0.456, 0.406])[:, None, None]
            std = x.new_tensor([0.229, 0.224, 0.225])[:, None, None]
            return (x - mean) / std
        return (x - 0.5) / 0.25

    def features(self, x):
        return self.backbone(self._normalize(x))

    def forward(self, x):
        return self.head(self.features(x))

    def to_bytes(self, epoch=None, config_hash=None) -> bytes:
        meta = {
            "arch": self.arch,
            "classes": list(self.classes),
            "feature_dim": self.feature_dim,
            "epoch": epoch,
            "config_hash": config_hash,
        }
        return serial.pack(self.KIND, meta, self.state_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["ClassifierModel", dict]:
        meta, tensors = serial.unpack(data, cls.KIND)
        model = cls(len(meta["classes"]), meta["arch"], meta["classes"])
        try:
            model.load_state_dict(tensors)
        except RuntimeError as exc:
            raise SchemaError(f"checkpoint does not match architecture {meta['arch']!r}: {exc}") from exc
        model.eval()
        return model, meta


def save_checkpoint(model: ClassifierModel, path, epoch=None, config_hash=None):
    serial.atomic_write(path, model.to_bytes(epoch, config_hash))


def load_checkpoint(path) -> tuple[ClassifierModel, dict]:
    with open(path, "rb") as fh:
        return ClassifierModel.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# loss, evaluation
# ---------------------------------------------------------------------------


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]``.

    A 1-D ``logits`` with an int label returns a float; a ``(B, c)`` tensor
    with ``(B,)`` labels returns the differentiable batch mean.
    """
    single = not isinstance(logits, torch.Tensor) or logits.dim() == 1
    z = torch.as_tensor(logits, dtype=torch.float64) if not isinstance(logits, torch.Tensor) else logits
    if z.dim() == 1:
        z = z[None]
    y = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    c = z.shape[-1]
    if y.numel() != z.shape[0]:
        raise ValueError(f"{y.numel()} labels for {z.shape[0]} logit rows")
    if bool(((y < 0) | (y >= c)).any()):
        raise ValueError(f"label out of range for {c} classes: {y.tolist()}")
    if not bool(torch.isfinite(z).all()):
        raise ValueError("logits must be finite")
    nll = torch.logsumexp(z, dim=-1) - z.gather(1, y[:, None])[:, 0]
    if single:
        return float(nll[0])
    return nll.mean()


@torch.no_grad()
def predict(model: nn.Module, images, batch_size=256) -> np.ndarray:
    was_training = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    preds = [model(x[i : i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


@torch.no_grad()
def extract_features(model: ClassifierModel, images, batch_size=256) -> np.ndarray:
    was_training = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    out = [model.features(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return torch.cat(out).numpy()


def evaluate(model: ClassifierModel, dataset: DomainDataset) -> float:
    """Top-1 accuracy without augmentation; leaves the model untouched."""
    if len(dataset) == 0:
        raise ValueError(f"cannot evaluate on empty dataset {dataset.name!r}")
    classes = getattr(model, "classes", None)
    if classes is not None and tuple(classes) != tuple(dataset.classes):
        raise SchemaError(f"model classes {classes} differ from dataset classes {dataset.classes}")
    return float((predict(model, dataset.images) == dataset.labels).mean())


# ---------------------------------------------------------------------------
# configuration and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 128
    epochs: int = 80
    lr_drop_epoch: int = 60
    lr_drop_factor: float = 0.1
    hflip: bool = True
    crop: bool = True
    crop_area: tuple = (0.8, 1.0)
    color_jitter: bool = True
    jitter: tuple = (0.4, 0.4, 0.4, 0.1)
    stylization: StylizationConfig = field(default_factory=lambda: StylizationConfig(p=0.0))
    selection: Protocol = Protocol.SOURCE_VAL
    val_fraction: float = 0.1
    domain_balanced: bool = False
    arch: str = "desk-cnn"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_drop_epoch > self.epochs:
            raise ConfigurationError(f"lr_drop_epoch {self.lr_drop_epoch} exceeds epochs {self.epochs}")
        object.__setattr__(self, "selection", Protocol(self.selection))


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    """SGD with momentum and L2 weight decay (decay added to the gradient)."""
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during 0-based ``epoch``."""
    return config.lr if epoch < config.lr_drop_epoch else config.lr * config.lr_drop_factor


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    source_val_acc: float
    target_acc: float


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    target: str
    epochs: list[EpochMetrics]
    selected_epoch: int
    selected_target_acc: float
    max_target_acc: float
    protocol: str = Protocol.SOURCE_VAL.value
    train_domain_counts: dict = field(default_factory=dict)
    style_domain_counts: dict = field(default_factory=dict)
    stylized_fraction: float = 0.0
    # kept out of the serialized rows so reruns stay byte-identical
    wall_time: float = field(default=0.0, compare=False)

    def summary(self) -> dict:
        return {
            "type": "summary",
            "config_hash": self.config_hash,
            "seed": self.seed,
            "target": self.target,
            "protocol": self.protocol,
            "selected_epoch": self.selected_epoch,
            "selected_target_acc": self.selected_target_acc,
            "max_target_acc": self.max_target_acc,
            "train_domain_counts": self.train_domain_counts,
            "style_domain_counts": self.style_domain_counts,
            "stylized_fraction": self.stylized_fraction,
        }

    def to_jsonl(self) -> str:
        rows = [{"type": "epoch", **dataclasses.asdict(e)} for e in self.epochs]
        rows.append(self.summary())
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)

    @classmethod
    def from_jsonl(cls, text: str) -> "RunRecord":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        epochs = [EpochMetrics(**{k: v for k, v in r.items() if k != "type"}) for r in rows if r["type"] == "epoch"]
        s = next(r for r in rows if r["type"] == "summary")
        return cls(
            config_hash=s["config_hash"],
            seed=s["seed"],
            target=s["target"],
            epochs=epochs,
            selected_epoch=s["selected_epoch"],
            selected_target_acc=s["selected_target_acc"],
            max_target_acc=s["max_target_acc"],
            protocol=s["protocol"],
            train_domain_counts=s["train_domain_counts"],
            style_domain_counts=s["style_domain_counts"],
            stylized_fraction=s["stylized_fraction"],
        )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def select_epoch(history: Sequence[EpochMetrics], protocol: Protocol) -> int:
    """Epoch with the best selection score; ties go to the later epoch."""
    if not history:
        raise ValueError("empty history")
    protocol = Protocol(protocol)
    best = None
    for m in history:
        key = m.source_val_acc if protocol is Protocol.SOURCE_VAL else m.target_acc
        if best is None or key >= best[0]:
            best = (key, m.epoch)
    return best[1]


def augment(images: torch.Tensor, config: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    """Random flip, area crop (resized back) and color jitter, per sample."""
    if not (config.hflip or config.crop or config.color_jitter):
        return images
    out = images.clone()
    n, _, h, w = out.shape
    b, c, s, hue = config.jitter
    for i in range(n):
        x = out[i]
        if config.hflip and rng.random() < 0.5:
            x = x.flip(-1)
        if config.crop:
            area = rng.uniform(*config.crop_area)
            ch, cw = max(1, round(h * math.sqrt(area))), max(1, round(w * math.sqrt(area)))
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            x = x[:, top : top + ch, left : left + cw]
            if (ch, cw) != (h, w):
                x = F.interpolate(x[None], size=(h, w), mode="bilinear", align_corners=False)[0]
        if config.color_jitter:
            x = TF.adjust_brightness(x, rng.uniform(1 - b, 1 + b))
            x = TF.adjust_contrast(x, rng.uniform(1 - c, 1 + c))
            x = TF.adjust_saturation(x, rng.uniform(1 - s, 1 + s))
            x = TF.adjust_hue(x, rng.uniform(-hue, hue))
        out[i] = x.clamp(0, 1)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _pool(datasets, index_sets):
    images = np.concatenate([d.images[idx] for d, idx in zip(datasets, index_sets)])
    labels = np.concatenate([d.labels[idx] for d, idx in zip(datasets, index_sets)])
    origin = np.concatenate([np.full(len(idx), k) for k, idx in enumerate(index_sets)])
    return images, labels, origin


def _epoch_order(n, origin, n_domains, balanced, rng):
    if not balanced:
        return rng.permutation(n)
    counts = np.bincount(origin, minlength=n_domains).astype(float)
    p = 1.0 / (counts[origin] * n_domains)
    return rng.choice(n, size=n, replace=True, p=p / p.sum())


def train(
    sources: Sequence[DomainDataset],
    target: DomainDataset,
    config: TrainConfig,
    stylizer: StylizerWeights | None = None,
    *,
    config_hash: str = "",
    on_batch: Callable | None = None,
) -> tuple[ClassifierModel, RunRecord]:
    """Leave-one-domain-out training run.

    ``on_batch(origins, draws)`` is called with the domain tag of every item
    in each minibatch and its style provenance, for auditing.
    """
    classes = check_vocabulary(list(sources) + [target])
    source_names = [d.name for d in sources]
    if target.name in source_names:
        raise SchemaError(f"target {target.name!r} is also a source")
    sty = ProbabilisticStylizer(sources, config.stylization, stylizer)
    if stylizer is not None:
        stylizer.eval()

    splits = [split(d, config.val_fraction, seed=config.seed) for d in sources]
    x_train, y_train, o_train = _pool(sources, [s.train for s in splits])
    val = DomainDataset("source-val", *_pool(sources, [s.val for s in splits])[:2], classes)

    torch.manual_seed(config.seed)
    model = ClassifierModel(len(classes), config.arch, classes, seed=config.seed)
    opt = make_optimizer(model.parameters(), config)
    x_all = torch.from_numpy(x_train)
    y_all = torch.from_numpy(y_train)

    start = time.perf_counter()
    history, states = [], {}
    train_counts = {n: 0 for n in source_names}
    style_counts: dict[str, int] = {}
    n_seen = n_styled = 0
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([config.seed, epoch])
        order = _epoch_order(len(y_train), o_train, len(sources), config.domain_balanced, rng)
        model.train()
        total, batches = 0.0, 0
        for start_i in range(0, len(order), config.batch_size):
            idx = order[start_i : start_i + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            origins = [source_names[k] for k in o_train[idx]]
            if target.name in origins:
                raise SchemaError("target-domain item reached a training batch")
            x, y = x_all[idx], y_all[idx]
            if config.stylization.stylize_first:
                x, draws = sty.apply_batch(x, origins, rng)
                x = augment(x, config, rng)
            else:
                x = augment(x, config, rng)
                x, draws = sty.apply_batch(x, origins, rng)
            if on_batch is not None:
                on_batch(origins, draws)
            for o in origins:
                train_counts[o] += 1
            for d in draws:
                if d is not None:
                    style_counts[d.domain] = style_counts.get(d.domain, 0) + 1
                    n_styled += 1
            n_seen += len(idx)
            loss = cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss became {loss.item()} in epoch {epoch}", epoch, [h.train_loss for h in history])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        metrics = EpochMetrics(
            epoch=epoch,
            lr=lr,
            train_loss=total / max(batches, 1),
            source_val_acc=evaluate(model, val) if len(val) else 0.0,
            target_acc=evaluate(model, target),
        )
        history.append(metrics)
        logger.info(
            "epoch %d lr %.5f loss %.4f val %.4f target %.4f",
            epoch, lr, metrics.train_loss, metrics.source_val_acc, metrics.target_acc,
        )
        # keep only the state that could still be selected
        if select_epoch(history, config.selection) == epoch:
            states = {epoch: copy.deepcopy(model.state_dict())}

    if not history:
        raise ConfigurationError("training ran zero epochs")
    selected_epoch = select_epoch(history, config.selection)
    model.load_state_dict(states[selected_epoch])
    model.eval()
    record = RunRecord(
        config_hash=config_hash,
        seed=config.seed,
        target=target.name,
        epochs=history,
        selected_epoch=selected_epoch,
        selected_target_acc=history[selected_epoch].target_acc,
        max_target_acc=max(h.target_acc for h in history),
        protocol=config.selection.value,
        train_domain_counts=train_counts,
        style_domain_counts=dict(sorted(style_counts.items())),
        stylized_fraction=n_styled / max(n_seen, 1),
        wall_time=time.perf_counter() - start,
    )
    return model, record


# ---------------------------------------------------------------------------
# repetition
# ---------------------------------------------------------------------------


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = list(values)
    if not values:
        raise ValueError("no values")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


@dataclass
class RepeatSummary:
    per_domain: dict  # domain -> (mean, std)
    average: tuple
    runs: dict  # domain -> list of accuracies, run order


def summarize_runs(runs: dict) -> RepeatSummary:
    """Per-domain mean/std, plus mean/std of the per-run domain average."""
    n = {len(v) for v in runs.values()}
    if len(n) != 1:
        raise ValueError(f"unequal run counts across domains: {sorted(n)}")
    per_domain = {d: mean_std(v) for d, v in runs.items()}
    n_runs = n.pop()
    per_run_avg = [statistics.fmean(v[r] for v in runs.values()) for r in range(n_runs)]
    return RepeatSummary(per_domain, mean_std(per_run_avg), {d: list(v) for d, v in runs.items()})


def repeat_runs(run_fn: Callable[[str, int], float], targets: Sequence[str], n_runs=3, base_seed=0) -> RepeatSummary:
    """Call ``run_fn(target, seed)`` with ``seed = base_seed + run`` for every target."""
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    runs = {t: [run_fn(t, base_seed + r) for r in range(n_runs)] for t in targets}
    return summarize_runs(runs)
