"""Reference desk-scale backbone and the model bundle contract.

The encoder/decoder pair is deliberately tiny (output stride 4, 64
feature channels); real backbones plug in through the same bundle
surface.  The localizer head is fixed at three convolution stages
(3x3-256, 3x3-256, 1x1-C) and exists only during training.
"""

from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .errors import SchemaError

ENCODER_CHANNELS = 64
ENCODER_STRIDE = 4
LOCALIZER_WIDTH = 256


class TinyEncoder(nn.Module):
    """Strided convolutional encoder: image -> (B, 64, H/4, W/4)."""

    out_channels = ENCODER_CHANNELS
    out_stride = ENCODER_STRIDE

    def __init__(self):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class TinyDecoder(nn.Module):
    """Two-stage upsampling decoder: features -> logits at image resolution."""

    def __init__(self, num_classes: int, in_channels: int = ENCODER_CHANNELS):
        super().__init__()
        self.stage1 = nn.Sequential(
            nn.Conv2d(in_channels, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
        )
        self.stage2 = nn.Sequential(
            nn.Conv2d(64, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
        )
        self.classifier = nn.Conv2d(32, num_classes, 1)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_channels

    def forward(self, features):
        return self.classifier(self.stage2(self.stage1(features)))


class Localizer(nn.Module):
    """Per-pixel class scores from encoder features (training-time only)."""

    def __init__(self, num_classes: int, in_channels: int = ENCODER_CHANNELS,
                 width: int = LOCALIZER_WIDTH):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(width, num_classes, 1)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_channels

    def forward(self, features):
        return self.classifier(self.body(features))


def extend_classifier(conv: nn.Conv2d, num_new: int, init_std: float = 1e-2) -> nn.Conv2d:
    """Append output channels to a 1x1 classifier; old rows copied, new
    rows small random."""
    if num_new < 0:
        raise SchemaError("cannot shrink a classifier head")
    out = nn.Conv2d(conv.in_channels, conv.out_channels + num_new, 1)
    with torch.no_grad():
        nn.init.normal_(out.weight, std=init_std)
        nn.init.zeros_(out.bias)
        out.weight[: conv.out_channels].copy_(conv.weight)
        out.bias[: conv.out_channels].copy_(conv.bias)
    return out


class FrozenSnapshot(nn.Module):
    """Deep, immutable copy of an encoder/decoder pair in inference mode.

    Forward passes run without autograd, parameters never require
    gradients, the module refuses to enter training mode, and it exposes
    no parameters to optimizers.
    """

    def __init__(self, encoder: nn.Module, decoder: nn.Module):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.decoder = copy.deepcopy(decoder)
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        for p in self.decoder.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        if mode:
            raise RuntimeError("frozen snapshot cannot re-enter training mode")
        return super().train(False)

    def parameters(self, recurse: bool = True):
        return iter(())

    def features(self, x):
        with torch.no_grad():
            return self.encoder(x)

    def logits(self, x, features=None):
        with torch.no_grad():
            if features is None:
                features = self.encoder(x)
            return self.decoder(features)

    def forward(self, x):
        return self.logits(x)


class ModelBundle:
    """Encoder, decoder, optional localizer, and the frozen previous model.

    Deliberately not an nn.Module: the snapshot lives alongside the live
    modules without ever leaking into parameter traversals.
    """

    def __init__(self, encoder: nn.Module, decoder: nn.Module,
                 localizer: nn.Module | None = None,
                 old_snapshot: FrozenSnapshot | None = None,
                 class_ids: tuple[int, ...] = (), step: int = 0):
        self.encoder = encoder
        self.decoder = decoder
        self.localizer = localizer
        self.old_snapshot = old_snapshot
        self.class_ids = tuple(class_ids)
        self.step = step

    @property
    def num_classes(self) -> int:
        return self.decoder.num_classes

    def live_modules(self):
        mods = [self.encoder, self.decoder]
        if self.localizer is not None:
            mods.append(self.localizer)
        return mods

    def train(self):
        for mod in self.live_modules():
            mod.train()

    def eval(self):
        for mod in self.live_modules():
            mod.eval()

    def features(self, x):
        return self.encoder(x)

    def logits(self, x, features=None):
        if features is None:
            features = self.encoder(x)
        return self.decoder(features)

    def scores(self, x, features=None):
        if self.localizer is None:
            raise SchemaError("bundle has no localizer head")
        if features is None:
            features = self.encoder(x)
        return self.localizer(features)

    @torch.no_grad()
    def segment(self, x) -> torch.Tensor:
        """Decoder-only inference: per-pixel argmax channel indices."""
        return self.logits(x).argmax(dim=1)


def snapshot_old_model(bundle: ModelBundle) -> FrozenSnapshot:
    """Freeze the bundle's segmentation model as the previous-step teacher."""
    return FrozenSnapshot(bundle.encoder, bundle.decoder)


def new_base_bundle(num_classes: int, class_ids, seed: int | None = None) -> ModelBundle:
    if seed is not None:
        torch.manual_seed(seed)
    return ModelBundle(TinyEncoder(), TinyDecoder(num_classes), class_ids=tuple(class_ids))


def extend_bundle(prev: ModelBundle, num_new: int, class_ids, step: int,
                  seed: int | None = None) -> ModelBundle:
    """Step-t bundle: snapshot the previous model, extend the decoder head,
    and attach a localizer covering the grown label set."""
    if seed is not None:
        torch.manual_seed(seed)
    snapshot = snapshot_old_model(prev)
    encoder = copy.deepcopy(prev.encoder)
    decoder = copy.deepcopy(prev.decoder)
    decoder.classifier = extend_classifier(decoder.classifier, num_new)
    total = decoder.num_classes
    if prev.localizer is not None:
        localizer = copy.deepcopy(prev.localizer)
        localizer.classifier = extend_classifier(localizer.classifier, num_new)
        if localizer.num_classes != total:
            raise SchemaError("localizer and decoder disagree on class count")
    else:
        localizer = Localizer(total)
    return ModelBundle(encoder, decoder, localizer=localizer, old_snapshot=snapshot,
                       class_ids=tuple(class_ids), step=step)
