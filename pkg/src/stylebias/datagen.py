"""Multi-domain labeled image data.

Images are float32 arrays of shape ``(3, side, side)`` with values in [0, 1].
A :class:`DomainDataset` stores them stacked as ``(n, 3, side, side)``.

The synthetic generator factorizes every image into a silhouette (the class)
filled with a texture family (the domain).  Inside the colored families the
fill also carries a class-specific palette and pattern frequency, so texture
is a usable but non-transferable shortcut: the ``sketch`` family draws every
class with the same gray hatching.
"""

from __future__ import annotations

import colorsys
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .errors import IngestionError, SchemaError

logger = logging.getLogger(__name__)

SHAPE_FAMILIES = (
    "circle",
    "square",
    "triangle",
    "star",
    "cross",
    "crescent",
    "arrow",
    "hexagon",
    "ring",
    "lshape",
)
TEXTURE_FAMILIES = ("photo", "art", "cartoon", "sketch", "dots", "noise")
# families whose fill carries no class information
UNINFORMATIVE_FAMILIES = frozenset({"sketch"})

_SUPERSAMPLE = 4


@dataclass
class DomainDataset:
    name: str
    images: np.ndarray  # (n, 3, side, side) float32
    labels: np.ndarray  # (n,) int64
    classes: tuple[str, ...]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.classes = tuple(self.classes)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise SchemaError(f"{self.name}: images must be (n, 3, side, side), got {self.images.shape}")
        if self.images.shape[2] != self.images.shape[3]:
            raise SchemaError(f"{self.name}: images must be square")
        if len(self.labels) != len(self.images):
            raise SchemaError(f"{self.name}: {len(self.labels)} labels for {len(self.images)} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise SchemaError(f"{self.name}: label index out of range")
        if len(self.images) and not (self.images.min() >= 0 and self.images.max() <= 1):
            raise SchemaError(f"{self.name}: pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    @property
    def side(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, indices, name=None) -> "DomainDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return DomainDataset(name or self.name, self.images[indices], self.labels[indices], self.classes)


@dataclass
class DatasetGroup:
    name: str
    domains: list[DomainDataset]

    def __post_init__(self):
        if len(self.domains) < 2:
            raise SchemaError("a dataset group needs at least two domains")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate domain names: {names}")
        classes = self.domains[0].classes
        for d in self.domains[1:]:
            if d.classes != classes:
                raise SchemaError(f"class vocabulary of {d.name} differs from {self.domains[0].name}")

    @property
    def classes(self) -> tuple[str, ...]:
        return self.domains[0].classes

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def __getitem__(self, name) -> DomainDataset:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# procedural rendering
# ---------------------------------------------------------------------------


def _regular(k, phase=0.0, radius=1.0):
    t = phase + 2 * np.pi * np.arange(k) / k
    return np.stack([radius * np.sin(t), -radius * np.cos(t)], axis=1)


def _star(points=5, inner=0.45):
    outer = _regular(points)
    inn = _regular(points, phase=np.pi / points, radius=inner)
    return np.stack([outer, inn], axis=1).reshape(-1, 2)


def _shape_layers(family):
    """Polygons (normalized to roughly the unit disc) with fill values.

    Later layers paint over earlier ones, which is how holes are cut.
    """
    if family == "circle":
        return [(_regular(64), 1)]
    if family == "square":
        return [(_regular(4, phase=np.pi / 4) * 1.05, 1)]
    if family == "triangle":
        return [(_regular(3) * 1.1 + [0, 0.15], 1)]
    if family == "star":
        return [(_star(), 1)]
    if family == "cross":
        w = 0.32
        pts = [(-w, -1), (w, -1), (w, -w), (1, -w), (1, w), (w, w), (w, 1), (-w, 1), (-w, w), (-1, w), (-1, -w), (-w, -w)]
        return [(np.array(pts, dtype=float), 1)]
    if family == "crescent":
        return [(_regular(64), 1), (_regular(64, radius=0.85) + [0.45, -0.2], 0)]
    if family == "arrow":
        pts = [(0, -1), (0.8, -0.15), (0.32, -0.15), (0.32, 1), (-0.32, 1), (-0.32, -0.15), (-0.8, -0.15)]
        return [(np.array(pts, dtype=float), 1)]
    if family == "hexagon":
        return [(_regular(6), 1)]
    if family == "ring":
        return [(_regular(64), 1), (_regular(64, radius=0.5), 0)]
    if family == "lshape":
        pts = [(-0.8, -1), (-0.2, -1), (-0.2, 0.4), (0.8, 0.4), (0.8, 1), (-0.8, 1)]
        return [(np.array(pts, dtype=float), 1)]
    raise ValueError(f"unknown shape family {family!r}")


def render_mask(family, side, rng) -> np.ndarray:
    """Anti-aliased silhouette mask in [0, 1] with random pose jitter."""
    big = side * _SUPERSAMPLE
    scale = rng.uniform(0.28, 0.40) * big
    aspect = rng.uniform(0.88, 1.12)
    angle = np.deg2rad(rng.uniform(-15, 15))
    center = big / 2 + rng.uniform(-0.08, 0.08, size=2) * big
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    for poly, fill in _shape_layers(family):
        pts = (poly * [aspect, 1.0 / aspect]) @ rot.T * scale + center
        draw.polygon([tuple(p) for p in pts], fill=255 * fill)
    small = canvas.resize((side, side), Image.BOX)
    return np.asarray(small, dtype=np.float32) / 255.0


def _outline(mask, width=1):
    img = Image.fromarray((mask * 255).astype(np.uint8))
    size = 2 * width + 1
    dil = np.asarray(img.filter(ImageFilter.MaxFilter(size)), dtype=np.float32) / 255
    ero = np.asarray(img.filter(ImageFilter.MinFilter(size)), dtype=np.float32) / 255
    return np.clip(dil - ero, 0, 1)


def class_palette(label, n_classes):
    hue = label / n_classes
    primary = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.92), dtype=np.float32)
    secondary = np.array(colorsys.hsv_to_rgb((hue + 0.04) % 1.0, 0.75, 0.42), dtype=np.float32)
    return primary, secondary


def class_frequency(label):
    """Pattern cycles per image width for the colored families."""
    return 2.5 + 1.25 * label


def _grid(side):
    y, x = np.mgrid[0:side, 0:side].astype(np.float32) / side
    return x, y


def _mix(a, b, t):
    t = np.clip(t, 0, 1)[None]
    return a[:, None, None] * (1 - t) + b[:, None, None] * t


def _smooth_noise(side, rng, cells=4):
    coarse = rng.uniform(0, 1, size=(cells, cells)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((side, side), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32)


def render_fill(family, label, n_classes, side, rng) -> np.ndarray:
    """Full-frame texture of one family; class-specific unless the family is uninformative."""
    x, y = _grid(side)
    primary, secondary = class_palette(label, n_classes)
    freq = class_frequency(label)
    theta = rng.uniform(0, np.pi)
    u = x * np.cos(theta) + y * np.sin(theta)
    v = -x * np.sin(theta) + y * np.cos(theta)
    phase = rng.uniform(0, 2 * np.pi)
    if family == "photo":
        t = 0.35 * np.sin(2 * np.pi * 0.5 * freq * u + phase) + 0.5 * _smooth_noise(side, rng) + 0.1
        out = _mix(primary, secondary, t)
        out = out + rng.normal(0, 0.02, size=out.shape)
    elif family == "art":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase)
        out = _mix(primary, secondary, t)
        out = out + rng.normal(0, 0.05, size=out.shape)
    elif family == "cartoon":
        period = 1.0 / freq
        t = ((np.floor(u / period) + np.floor(v / period)) % 2).astype(np.float32)
        light = np.clip(primary * 0.6 + 0.4, 0, 1)
        out = _mix(primary, light, t)
    elif family == "sketch":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * 7.0 * u + phase)
        gray = 0.93 - 0.35 * (t > 0.8)
        out = np.repeat(gray[None], 3, axis=0) + rng.normal(0, 0.02, size=(1, side, side))
    elif family == "dots":
        period = 1.0 / freq
        du = (u % period) / period - 0.5
        dv = (v % period) / period - 0.5
        t = (du**2 + dv**2 < 0.09).astype(np.float32)
        out = _mix(primary * 0.5 + 0.5, secondary, t)
    elif family == "noise":
        cells = max(2, int(round(freq)))
        t = _smooth_noise(side, rng, cells=cells)
        out = _mix(primary, secondary, (t - t.min()) / (np.ptp(t) + 1e-6))
        out = out + rng.normal(0, 0.08, size=out.shape)
    else:
        raise ValueError(f"unknown texture family {family!r}")
    return np.clip(out, 0, 1).astype(np.float32)


def render_background(family, side, rng) -> np.ndarray:
    """Class-independent backdrop for a family."""
    if family == "photo":
        hue = rng.uniform()
        a = np.array(colorsys.hsv_to_rgb(hue, 0.25, 0.75), dtype=np.float32)
        b = np.array(colorsys.hsv_to_rgb((hue + 0.1) % 1, 0.2, 0.5), dtype=np.float32)
        out = _mix(a, b, _smooth_noise(side, rng, cells=3))
    elif family == "art":
        base = np.array([0.86, 0.80, 0.68], dtype=np.float32)
        out = base[:, None, None] + rng.normal(0, 0.04, size=(3, side, side))
    elif family == "cartoon":
        pastel = np.array(colorsys.hsv_to_rgb(rng.uniform(), 0.15, 0.97), dtype=np.float32)
        out = np.broadcast_to(pastel[:, None, None], (3, side, side))
    elif family == "sketch":
        out = 0.98 + rng.normal(0, 0.015, size=(1, side, side)).repeat(3, 0)
    elif family == "dots":
        out = np.full((3, side, side), 0.82, dtype=np.float32)
    elif family == "noise":
        out = 0.5 + rng.normal(0, 0.12, size=(1, side, side)).repeat(3, 0)
    else:
        raise ValueError(f"unknown texture family {family!r}")
    return np.clip(out, 0, 1).astype(np.float32)


def render_sample(shape_family, texture_family, label, n_classes, side, rng) -> tuple[np.ndarray, np.ndarray]:
    """One silhouette-on-background image and its mask."""
    mask = render_mask(shape_family, side, rng)
    fill = render_fill(texture_family, label, n_classes, side, rng)
    bg = render_background(texture_family, side, rng)
    img = fill * mask[None] + bg * (1 - mask[None])
    if texture_family in ("sketch", "cartoon"):
        edge = _outline(mask, width=1)
        ink = 0.12 if texture_family == "sketch" else 0.05
        img = img * (1 - edge[None]) + ink * edge[None]
    return np.clip(img, 0, 1).astype(np.float32), mask


def synthesize_group(seed, n_domains=4, n_classes=7, per_class=50, side=64, name="shapes") -> DatasetGroup:
    """Desk-scale shapes-on-textures benchmark.

    Domain ``d`` uses ``TEXTURE_FAMILIES[d]``; class ``c`` uses
    ``SHAPE_FAMILIES[c]``.  Deterministic in ``seed``.
    """
    if not 2 <= n_domains <= len(TEXTURE_FAMILIES):
        raise ValueError(f"n_domains must be in [2, {len(TEXTURE_FAMILIES)}], got {n_domains}")
    if not 2 <= n_classes <= len(SHAPE_FAMILIES):
        raise ValueError(f"n_classes must be in [2, {len(SHAPE_FAMILIES)}], got {n_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if side < 32:
        raise ValueError(f"side must be >= 32, got {side}")
    classes = SHAPE_FAMILIES[:n_classes]
    domains = []
    for d in range(n_domains):
        family = TEXTURE_FAMILIES[d]
        images = np.empty((n_classes * per_class, 3, side, side), dtype=np.float32)
        labels = np.repeat(np.arange(n_classes), per_class)
        for c in range(n_classes):
            for i in range(per_class):
                rng = np.random.default_rng([seed, d, c, i])
                images[c * per_class + i], _ = render_sample(classes[c], family, c, n_classes, side, rng)
        domains.append(DomainDataset(family, images, labels, classes))
    return DatasetGroup(name, domains)


def synthesize_textures(seed, n_classes=7, per_class=10, side=64, families=("photo", "art", "cartoon")) -> DomainDataset:
    """Full-frame class textures, labeled by class.

    Families are cycled across items so every class appears in each of them.
    """
    fams = [f for f in families if f not in UNINFORMATIVE_FAMILIES]
    if not fams:
        raise ValueError("texture pool needs at least one class-informative family")
    images = np.empty((n_classes * per_class, 3, side, side), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), per_class)
    for c in range(n_classes):
        for i in range(per_class):
            rng = np.random.default_rng([seed, 991, c, i])
            images[c * per_class + i] = render_fill(fams[i % len(fams)], c, n_classes, side, rng)
    return DomainDataset("textures", images, labels, SHAPE_FAMILIES[:n_classes])


def texture_shift_scores(group: DatasetGroup) -> dict[str, float]:
    """How far each domain's color/texture statistics sit from the other domains.

    Uses per-image channel means and stds plus a gray-level cue (channel
    spread); a larger score means a more texture-shifted held-out domain.
    """
    desc = {}
    for d in group.domains:
        x = d.images
        mean = x.mean(axis=(2, 3))
        std = x.std(axis=(2, 3))
        chroma = (x.max(axis=1) - x.min(axis=1)).mean(axis=(1, 2))[:, None]
        desc[d.name] = np.concatenate([mean, std, chroma], axis=1)
    scores = {}
    for name, feats in desc.items():
        others = np.concatenate([v for k, v in desc.items() if k != name])
        scores[name] = float(np.linalg.norm(feats.mean(0) - others.mean(0)) + np.linalg.norm(feats.std(0) - others.std(0)))
    return scores


# ---------------------------------------------------------------------------
# ingestion and export
# ---------------------------------------------------------------------------


def _visible_dirs(path):
    return sorted(p for p in path.iterdir() if p.is_dir() and not p.name.startswith("."))


def load_image(path, side) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((side, side), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of types
        raise IngestionError(path, exc) from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def ingest_domain(root, side=64, classes=None, name=None) -> DomainDataset:
    """Read ``root/<class>/<image>`` into one domain, lexicographic order.

    ``classes`` fixes the vocabulary (and label order); class directories
    outside it are a schema error, missing ones simply contribute no items.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(root, "not a directory")
    found = [c.name for c in _visible_dirs(root)]
    classes = tuple(classes) if classes is not None else tuple(found)
    extra = sorted(set(found) - set(classes))
    if extra:
        raise SchemaError(f"{root}: class directories {extra} are not in the vocabulary")
    images, labels = [], []
    for c, cname in enumerate(classes):
        if not (root / cname).is_dir():
            continue
        files = sorted(p for p in (root / cname).iterdir() if p.is_file() and not p.name.startswith("."))
        for f in files:
            images.append(load_image(f, side))
            labels.append(c)
    arr = np.stack(images) if images else np.zeros((0, 3, side, side), np.float32)
    logger.info("ingested %s: %d images", root.name, len(labels))
    return DomainDataset(name or root.name, arr, np.asarray(labels, dtype=np.int64), classes)


def ingest_directory(root, side=64, name=None) -> DatasetGroup:
    """Read ``root/<domain>/<class>/<image>`` into a group, lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(root, "not a directory")
    domain_dirs = _visible_dirs(root)
    if len(domain_dirs) < 2:
        raise SchemaError(f"{root}: need at least two domain directories, found {len(domain_dirs)}")
    class_sets = {d.name: [c.name for c in _visible_dirs(d)] for d in domain_dirs}
    reference = class_sets[domain_dirs[0].name]
    for dname, cls in class_sets.items():
        if cls != reference:
            missing = sorted(set(reference) ^ set(cls))
            raise SchemaError(f"class directories of {dname!r} differ from {domain_dirs[0].name!r}: {missing}")
    domains = [ingest_domain(ddir, side, classes=reference) for ddir in domain_dirs]
    return DatasetGroup(name or root.name, domains)


def export_group(group: DatasetGroup, root) -> Path:
    """Write a group to the ``root/<domain>/<class>/`` layout as PNG files."""
    root = Path(root)
    for d in group.domains:
        counters = {}
        for img, label in zip(d.images, d.labels):
            cname = d.classes[label]
            k = counters.get(cname, 0)
            counters[cname] = k + 1
            out = root / d.name / cname
            out.mkdir(parents=True, exist_ok=True)
            pixels = np.round(np.clip(img, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(out / f"{k:05d}.png")
    return root


def save_group(group: DatasetGroup, path) -> None:
    arrays = {}
    for i, d in enumerate(group.domains):
        arrays[f"images_{i}"] = d.images
        arrays[f"labels_{i}"] = d.labels
    np.savez_compressed(
        path,
        name=np.array(group.name),
        domains=np.array(group.domain_names),
        classes=np.array(group.classes),
        **arrays,
    )


def load_group(path) -> DatasetGroup:
    with np.load(path, allow_pickle=False) as z:
        classes = tuple(str(c) for c in z["classes"])
        domains = [
            DomainDataset(str(n), z[f"images_{i}"], z[f"labels_{i}"], classes)
            for i, n in enumerate(z["domains"])
        ]
        return DatasetGroup(str(z["name"]), domains)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split(dataset: DomainDataset, val_fraction=0.1, seed=0) -> Split:
    """Stratified train/validation split.

    The validation budget ``round(n * val_fraction)`` is spread over classes
    by largest remainder, so the overall fraction is exact to one item.
    Classes with fewer than two items stay entirely in train.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    labels = dataset.labels
    rng = np.random.default_rng([seed, 7211])
    per_class = {c: np.flatnonzero(labels == c) for c in range(len(dataset.classes))}
    eligible = {c: idx for c, idx in per_class.items() if len(idx) >= 2}
    for c, idx in per_class.items():
        if 0 < len(idx) < 2:
            warnings.warn(f"{dataset.name}: class {dataset.classes[c]!r} has {len(idx)} item(s); kept in train", stacklevel=2)
    budget = int(round(n * val_fraction))
    exact = {c: len(idx) * val_fraction for c, idx in eligible.items()}
    alloc = {c: min(int(np.floor(v)), len(eligible[c]) - 1) for c, v in exact.items()}
    remaining = budget - sum(alloc.values())
    order = sorted(eligible, key=lambda c: (-(exact[c] - np.floor(exact[c])), c))
    while remaining > 0:
        progressed = False
        for c in order:
            if remaining == 0:
                break
            if alloc[c] < len(eligible[c]) - 1:
                alloc[c] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    train, val = [], []
    for c, idx in per_class.items():
        perm = rng.permutation(idx)
        k = alloc.get(c, 0)
        val.extend(perm[:k].tolist())
        train.extend(perm[k:].tolist())
    return Split(np.array(sorted(train), dtype=np.int64), np.array(sorted(val), dtype=np.int64))


def leave_one_out(group: DatasetGroup, target: str) -> tuple[list[DomainDataset], DomainDataset]:
    names = group.domain_names
    if target not in names:
        raise ValueError(f"unknown target domain {target!r}; available: {names}")
    sources = [d for d in group.domains if d.name != target]
    return sources, group[target]


def check_vocabulary(datasets: Sequence[DomainDataset]) -> tuple[str, ...]:
    classes = datasets[0].classes
    for d in datasets[1:]:
        if d.classes != classes:
            raise SchemaError(f"class vocabulary of {d.name} differs from {datasets[0].name}")
    return classes
