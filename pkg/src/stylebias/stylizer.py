"""Feed-forward AdaIN stylization and the probabilistic style augmentation.

The network is a small encoder/decoder pair.  The encoder is a stack of
conv blocks; stylization swaps the per-channel statistics of the content
features for those of the style features (AdaIN) and decodes the result.
:class:`ProbabilisticStylizer` wraps the network as a training-time
augmentation that replaces an image with a stylized version of itself with
probability ``p``, drawing the style image from a regime-dependent set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import serial
from .errors import ConfigurationError, SchemaError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

EPS = 1e-5
ENCODER_WIDTHS = (32, 64, 128, 256)
# the first block keeps full resolution: 64 px inputs give 8x8 feature maps
ENCODER_STRIDES = (1, 2, 2, 2)


# ---------------------------------------------------------------------------
# AdaIN
# ---------------------------------------------------------------------------


def channel_stats(feats: torch.Tensor, eps=EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel spatial mean and ``sqrt(var + eps)`` over the last two axes."""
    mean = feats.mean(dim=(-2, -1), keepdim=True)
    var = feats.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return mean, torch.sqrt(var + eps)


def adain(content_feats: torch.Tensor, style_feats: torch.Tensor, eps=EPS) -> torch.Tensor:
    """Re-normalize content features to the channel statistics of the style.

    Works on ``(C, H, W)`` or ``(B, C, H, W)``; style spatial size may differ
    from the content's.
    """
    if content_feats.shape[-3] != style_feats.shape[-3]:
        raise ShapeError(f"channel mismatch: content {content_feats.shape[-3]} vs style {style_feats.shape[-3]}")
    c_mean, c_std = channel_stats(content_feats, eps)
    s_mean, s_std = channel_stats(style_feats, eps)
    return s_std * (content_feats - c_mean) / c_std + s_mean


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Encoder(nn.Module):
    def __init__(self, widths=ENCODER_WIDTHS, strides=ENCODER_STRIDES):
        super().__init__()
        self.widths = tuple(widths)
        self.strides = tuple(strides)
        blocks, c = [], 3
        for w, s in zip(self.widths, self.strides):
            blocks.append(nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(c, w, 3, stride=s), nn.ReLU()))
            c = w
        self.blocks = nn.ModuleList(blocks)

    @property
    def reduction(self) -> int:
        return math.prod(self.strides)

    def forward(self, x, all_layers=False):
        h = (x - 0.5) / 0.25
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return outs if all_layers else h


class Decoder(nn.Module):
    """Mirror of :class:`Encoder` with nearest-neighbor upsampling."""

    def __init__(self, widths=ENCODER_WIDTHS, strides=ENCODER_STRIDES):
        super().__init__()
        layers = []
        rev_w = list(widths)[::-1]
        rev_s = list(strides)[::-1]
        for i, s in enumerate(rev_s[:-1]):
            layers += [nn.ReflectionPad2d(1), nn.Conv2d(rev_w[i], rev_w[i + 1], 3), nn.ReLU()]
            if s > 1:
                layers.append(nn.Upsample(scale_factor=s, mode="nearest"))
        layers += [nn.ReflectionPad2d(1), nn.Conv2d(rev_w[-1], rev_w[-1], 3), nn.ReLU()]
        if rev_s[-1] > 1:
            layers.append(nn.Upsample(scale_factor=rev_s[-1], mode="nearest"))
        layers += [nn.ReflectionPad2d(1), nn.Conv2d(rev_w[-1], 3, 3)]
        self.net = nn.Sequential(*layers)

    def forward(self, t):
        return self.net(t)


class StylizerWeights(nn.Module):
    """Encoder + decoder parameters and training metadata.

    Treat instances as immutable once trained or loaded; the encoder never
    receives gradients outside of :func:`train_stylizer`'s fitting stage.
    """

    KIND = b"STYL"

    def __init__(self, widths=ENCODER_WIDTHS, strides=ENCODER_STRIDES, seed=0, meta=None):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(widths, strides)
            self.decoder = Decoder(widths, strides)
        self.encoder.requires_grad_(False)
        self.meta = {"seed": seed, "trained": False, "epochs": 0, "encoder_epochs": 0, "corpora": {}}
        self.meta.update(meta or {})
        self.eval()

    @property
    def architecture(self) -> dict:
        return {"widths": list(self.encoder.widths), "strides": list(self.encoder.strides), "eps": EPS}

    def check_input(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, N, N) images, got {tuple(x.shape)}")
        if x.shape[-1] % self.encoder.reduction or x.shape[-2] % self.encoder.reduction:
            raise ShapeError(f"image side {x.shape[-1]} not divisible by encoder reduction {self.encoder.reduction}")

    def to_bytes(self) -> bytes:
        return serial.pack(self.KIND, {"architecture": self.architecture, "metadata": self.meta}, self.state_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> "StylizerWeights":
        meta, tensors = serial.unpack(data, cls.KIND)
        arch = meta["architecture"]
        obj = cls(arch["widths"], arch["strides"], seed=meta["metadata"].get("seed", 0), meta=meta["metadata"])
        try:
            obj.load_state_dict(tensors)
        except RuntimeError as exc:
            raise SchemaError(f"stylizer weights do not match manifest: {exc}") from exc
        return obj

    def save(self, path):
        serial.atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "StylizerWeights":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _as_batch(x) -> tuple[torch.Tensor, bool, bool]:
    """Return ``(batch tensor, was_single_image, was_numpy)``."""
    was_numpy = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x, dtype=np.float32)) if was_numpy else x
    single = t.dim() == 3
    return (t[None] if single else t), single, was_numpy


def _restore(t, single, was_numpy):
    if single:
        t = t[0]
    return t.numpy() if was_numpy else t


def stylize(content, style, alpha, weights: StylizerWeights):
    """Decode ``alpha * adain(e(c), e(s)) + (1 - alpha) * e(c)``, clamped to [0, 1].

    Accepts single images ``(3, N, N)`` or batches; numpy in, numpy out.
    Style images are resized to the content side first.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    c, single, was_numpy = _as_batch(content)
    s, _, _ = _as_batch(style)
    weights.check_input(c)
    if s.shape[0] != c.shape[0]:
        if s.shape[0] != 1:
            raise ShapeError(f"{s.shape[0]} style images for {c.shape[0]} content images")
        s = s.expand(c.shape[0], -1, -1, -1)
    if s.shape[-2:] != c.shape[-2:]:
        s = F.interpolate(s, size=c.shape[-2:], mode="bilinear", align_corners=False, antialias=True)
    dtype = next(weights.parameters()).dtype
    with torch.no_grad():
        fc = weights.encoder(c.to(dtype))
        if alpha == 0.0:
            t = fc
        else:
            t = adain(fc, weights.encoder(s.to(dtype)))
            if alpha < 1.0:
                t = alpha * t + (1 - alpha) * fc
        out = weights.decoder(t).clamp(0, 1).to(c.dtype)
    return _restore(out, single, was_numpy)


# ---------------------------------------------------------------------------
# style regimes and the probabilistic transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class External:
    """Styles come from a corpus outside the source domains (e.g. paintings)."""

    style_corpus: np.ndarray = field(repr=False)
    name: str = "external"


@dataclass(frozen=True)
class InterSource:
    """Styles come from every source domain except the image's own."""


@dataclass(frozen=True)
class IntraSource:
    """Styles come only from the image's own domain."""


@dataclass(frozen=True)
class LimitedSources:
    names: frozenset

    def __init__(self, names):
        if isinstance(names, str):
            names = [names]
        names = frozenset(names)
        if not names:
            raise ConfigurationError("LimitedSources needs at least one domain")
        object.__setattr__(self, "names", names)


StyleRegime = External | InterSource | IntraSource | LimitedSources


def regime_label(regime) -> str:
    if isinstance(regime, External):
        return f"external:{regime.name}"
    if isinstance(regime, InterSource):
        return "inter"
    if isinstance(regime, IntraSource):
        return "intra"
    if isinstance(regime, LimitedSources):
        return "limited:" + ",".join(sorted(regime.names))
    raise TypeError(f"not a style regime: {regime!r}")


@dataclass(frozen=True)
class StylizationConfig:
    p: float = 0.1
    alpha: float = 1.0
    regime: object = field(default_factory=InterSource)
    seed: int = 0
    # apply stylization before the geometric/color augmentations
    stylize_first: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"stylization probability must be in [0, 1], got {self.p}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"stylizing strength must be in [0, 1], got {self.alpha}")


class StyleDraw(NamedTuple):
    """Where a style image came from: domain name and index within it."""

    domain: str
    index: int


class ProbabilisticStylizer:
    """The transform ``x -> stylize(x, s, alpha)`` with probability ``p``.

    ``s`` is drawn uniformly (with replacement) from the style set implied by
    the regime and the image's origin domain.  Style sets are resolved here,
    so an empty set fails at construction rather than on first use.
    """

    def __init__(self, sources: Sequence, config: StylizationConfig, weights: StylizerWeights | None):
        self.config = config
        self.weights = weights
        if config.p > 0 and weights is None:
            raise ConfigurationError("stylization probability > 0 needs stylizer weights")
        regime = config.regime
        source_names = [d.name for d in sources]
        if isinstance(regime, External):
            corpus = np.asarray(regime.style_corpus, dtype=np.float32)
            if corpus.ndim != 4 or len(corpus) == 0:
                raise ConfigurationError("external style corpus is empty")
            self._bank = [corpus]
            self._bank_names = [regime.name]
        else:
            self._bank = [d.images for d in sources]
            self._bank_names = source_names
        if isinstance(regime, LimitedSources):
            unknown = sorted(regime.names - set(source_names))
            if unknown:
                raise ConfigurationError(f"LimitedSources names {unknown} are not source domains {source_names}")
        offsets = np.cumsum([0] + [len(b) for b in self._bank])
        self._offsets = offsets
        self._candidates = {}
        for origin in source_names:
            pools = [i for i, n in enumerate(self._bank_names) if self._allowed(origin, n)]
            cand = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in pools]) if pools else np.zeros(0, np.int64)
            if len(cand) == 0:
                raise ConfigurationError(f"{regime_label(regime)} leaves no style images for origin domain {origin!r}")
            self._candidates[origin] = cand.astype(np.int64)

    def _allowed(self, origin, pool_name) -> bool:
        regime = self.config.regime
        if isinstance(regime, External):
            return True
        if isinstance(regime, InterSource):
            return pool_name != origin
        if isinstance(regime, IntraSource):
            return pool_name == origin
        if isinstance(regime, LimitedSources):
            return pool_name in regime.names
        raise TypeError(f"not a style regime: {regime!r}")

    def style_set(self, origin) -> list[StyleDraw]:
        return [self._locate(i) for i in self._candidates[origin]]

    def _locate(self, flat) -> StyleDraw:
        pool = int(np.searchsorted(self._offsets, flat, side="right") - 1)
        return StyleDraw(self._bank_names[pool], int(flat - self._offsets[pool]))

    def _image(self, draw: StyleDraw) -> np.ndarray:
        return self._bank[self._bank_names.index(draw.domain)][draw.index]

    def draw_styles(self, origins: Sequence[str], rng: np.random.Generator) -> list[StyleDraw | None]:
        """Coin flip per item, then a style draw for each item that stylizes."""
        for o in origins:
            if o not in self._candidates:
                raise ConfigurationError(f"origin domain {o!r} is not a source")
        if self.config.p == 0.0:
            return [None] * len(origins)
        flips = rng.random(len(origins)) < self.config.p
        draws = []
        for origin, flip in zip(origins, flips):
            if flip:
                cand = self._candidates[origin]
                draws.append(self._locate(cand[rng.integers(len(cand))]))
            else:
                draws.append(None)
        return draws

    def apply_batch(self, images: torch.Tensor, origins: Sequence[str], rng: np.random.Generator):
        """Stylize a batch in place of per-item calls; returns ``(images, draws)``."""
        draws = self.draw_styles(origins, rng)
        hit = [i for i, d in enumerate(draws) if d is not None]
        if not hit:
            return images, draws
        styles = torch.from_numpy(np.stack([self._image(draws[i]) for i in hit]))
        out = images.clone()
        out[hit] = stylize(images[hit], styles, self.config.alpha, self.weights).to(images.dtype)
        return out, draws

    def __call__(self, x, origin: str, rng: np.random.Generator):
        draw = self.draw_styles([origin], rng)[0]
        if draw is None:
            return x, None
        return stylize(x, self._image(draw), self.config.alpha, self.weights), draw


def transform(x, origin_domain, sources, config: StylizationConfig, weights, rng):
    """Single-image form of :class:`ProbabilisticStylizer`; returns the image only."""
    return ProbabilisticStylizer(sources, config, weights)(x, origin_domain, rng)[0]


def worker_rng(seed, worker_id, sample_index) -> np.random.Generator:
    """Independent stream per (seed, worker, sample) for multi-worker pipelines."""
    return np.random.default_rng([seed, worker_id, sample_index])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _as_corpus(corpus) -> torch.Tensor:
    if hasattr(corpus, "images"):
        corpus = corpus.images
    if isinstance(corpus, (list, tuple)):
        corpus = np.concatenate([c.images if hasattr(c, "images") else np.asarray(c) for c in corpus])
    return torch.as_tensor(np.asarray(corpus, dtype=np.float32))


def _corpus_name(corpus) -> str:
    if isinstance(corpus, (list, tuple)):
        return "+".join(_corpus_name(c) for c in corpus)
    return getattr(corpus, "name", "array")


def stylizer_loss(weights: StylizerWeights, content, style, alpha=1.0, content_weight=1.0, style_weight=10.0):
    """AdaIN training objective; returns ``(total, content_term, style_term)``.

    The content term compares the encoded output with the AdaIN target at the
    deepest layer; the style term matches channel mean/std of the output and
    the style image at every encoder layer.
    """
    with torch.no_grad():
        fc = weights.encoder(content)
        fs = weights.encoder(style, all_layers=True)
        target = adain(fc, fs[-1])
        if alpha < 1.0:
            target = alpha * target + (1 - alpha) * fc
    out = weights.decoder(target)
    fo = weights.encoder(out, all_layers=True)
    content_term = F.mse_loss(fo[-1], target)
    style_term = 0.0
    for a, b in zip(fo, fs):
        ma, sa = channel_stats(a)
        mb, sb = channel_stats(b)
        style_term = style_term + F.mse_loss(ma, mb) + F.mse_loss(sa, sb)
    return content_weight * content_term + style_weight * style_term, content_term, style_term


def train_stylizer(
    content_corpus,
    style_corpus,
    epochs=6,
    seed=0,
    *,
    encoder_epochs=None,
    batch_size=8,
    lr=3e-4,
    encoder_lr=1e-3,
    content_weight=1.0,
    style_weight=10.0,
    alpha=1.0,
    widths=ENCODER_WIDTHS,
    strides=ENCODER_STRIDES,
) -> StylizerWeights:
    """Fit a stylizer from scratch.

    Stage one fits encoder and decoder as an autoencoder on the content
    corpus (``encoder_epochs``, defaulting to ``epochs``).  Stage two freezes
    the encoder and trains the decoder on :func:`stylizer_loss` with style
    images sampled with replacement.  ``epochs=0`` skips both stages and
    returns the seed-initialized network flagged ``trained=False``.
    """
    content = _as_corpus(content_corpus)
    style = _as_corpus(style_corpus)
    if len(content) == 0 or len(style) == 0:
        raise ValueError("content and style corpora must be non-empty")
    encoder_epochs = epochs if encoder_epochs is None else encoder_epochs
    weights = StylizerWeights(widths, strides, seed=seed)
    weights.check_input(content[:1])
    weights.meta.update(
        corpora={"content": _corpus_name(content_corpus), "style": _corpus_name(style_corpus)},
        epochs=int(epochs),
        encoder_epochs=int(encoder_epochs) if epochs > 0 else 0,
        content_weight=content_weight,
        style_weight=style_weight,
        alpha=alpha,
    )
    if epochs == 0:
        return weights

    gen = torch.Generator().manual_seed(seed)
    steps_per_epoch = max(1, math.ceil(len(content) / batch_size))
    weights.train()

    weights.encoder.requires_grad_(True)
    opt = torch.optim.Adam(weights.parameters(), lr=encoder_lr)
    recon_history = []
    for epoch in range(encoder_epochs):
        perm = torch.randperm(len(content), generator=gen)
        total = 0.0
        for step in range(steps_per_epoch):
            batch = content[perm[step * batch_size : (step + 1) * batch_size]]
            loss = F.mse_loss(weights.decoder(weights.encoder(batch)), batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"autoencoder loss diverged in epoch {epoch}", epoch, recon_history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        recon_history.append(total / steps_per_epoch)
        logger.info("stylizer encoder epoch %d recon %.5f", epoch, recon_history[-1])
    weights.encoder.requires_grad_(False)

    opt = torch.optim.Adam(weights.decoder.parameters(), lr=lr)
    probe_c = content[torch.randint(len(content), (min(16, len(content)),), generator=gen)]
    probe_s = style[torch.randint(len(style), (len(probe_c),), generator=gen)]
    with torch.no_grad():
        initial = stylizer_loss(weights, probe_c, probe_s, alpha, content_weight, style_weight)[0].item()
    history = []
    for epoch in range(epochs):
        perm = torch.randperm(len(content), generator=gen)
        total = 0.0
        for step in range(steps_per_epoch):
            batch = content[perm[step * batch_size : (step + 1) * batch_size]]
            sty = style[torch.randint(len(style), (len(batch),), generator=gen)]
            loss = stylizer_loss(weights, batch, sty, alpha, content_weight, style_weight)[0]
            if not torch.isfinite(loss):
                raise TrainingError(f"stylizer loss diverged in epoch {epoch}", epoch, history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        history.append(total / steps_per_epoch)
        logger.info("stylizer epoch %d loss %.5f", epoch, history[-1])
    with torch.no_grad():
        final = stylizer_loss(weights, probe_c, probe_s, alpha, content_weight, style_weight)[0].item()
    weights.eval()
    weights.meta.update(
        trained=True,
        recon_history=[round(v, 8) for v in recon_history],
        loss_history=[round(v, 8) for v in history],
        initial_loss=round(initial, 8),
        final_loss=round(final, 8),
    )
    return weights
