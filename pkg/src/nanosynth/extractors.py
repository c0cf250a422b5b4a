"""Frozen feature extractors for the perceptual loss and for FID.

``fallback`` is a fixed-seed random convolutional stack that needs no download;
``vgg16`` and ``inception_v3`` load torchvision's ImageNet weights. Metric values
are only comparable between runs that used the same extractor.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ExtractorUnavailableError

FALLBACK_SEED = 20250101
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureExtractor(nn.Module):
    """Maps a batch (B, 1, H, W) in [-1, 1] to a dict of named feature tensors."""

    name = "abstract"
    in_channels = 1
    input_size = None  # (H, W) the extractor expects, or None for any
    layers: tuple = ()

    def prepare(self, images):
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if self.input_size is not None and tuple(images.shape[-2:]) != tuple(self.input_size):
            images = F.interpolate(images, size=self.input_size, mode="bilinear", align_corners=False)
        if images.shape[1] != self.in_channels:
            images = images.expand(-1, self.in_channels, -1, -1)
        return images

    def pooled(self, images):
        """(B, d) global-average-pooled vector for distribution statistics."""
        feats = self(images)
        return torch.cat([feats[k].mean(dim=(2, 3)) for k in self.pool_layers], dim=1)

    pool_layers: tuple = ()


class RandomConvExtractor(FeatureExtractor):
    """Deterministic stand-in: three frozen random conv stages seeded by a constant."""

    name = "fallback-randconv-v1"
    layers = ("conv1", "conv2", "conv3")
    pool_layers = ("conv2", "conv3")

    def __init__(self, seed=FALLBACK_SEED, widths=(16, 32, 32), input_size=None):
        super().__init__()
        self.input_size = input_size
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 1
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                bound = (6.0 / (cin * 9)) ** 0.5
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.copy_(torch.rand(conv.bias.shape, generator=gen) * 0.2 - 0.1)
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def forward(self, images):
        x = self.prepare(images)
        out = {}
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), 0.2)
            out[self.layers[i]] = x
            if i < len(self.convs) - 1:
                x = F.avg_pool2d(x, 2) if min(x.shape[-2:]) >= 2 else x
        return out


def _imagenet_normalize(x):
    mean = torch.tensor(_IMAGENET_MEAN, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    std = torch.tensor(_IMAGENET_STD, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return ((x + 1) / 2 - mean) / std


class VGGExtractor(FeatureExtractor):
    name = "vgg16-imagenet"
    in_channels = 3
    layers = ("relu2_2", "relu3_3")
    pool_layers = layers
    _cut = {"relu2_2": 8, "relu3_3": 15}

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import VGG16_Weights, vgg16
            features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        except Exception as exc:  # download/offline failures surface in many forms
            raise ExtractorUnavailableError(
                f"pretrained VGG16 weights unavailable ({exc}); use extractor 'fallback' instead") from None
        self.features = features[: max(self._cut.values()) + 1]
        self.requires_grad_(False)
        self.eval()

    def forward(self, images):
        x = _imagenet_normalize(self.prepare(images))
        out = {}
        cut_at = {v: k for k, v in self._cut.items()}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in cut_at:
                out[cut_at[i]] = x
        return out


class InceptionExtractor(FeatureExtractor):
    name = "inception_v3-imagenet-pool3"
    in_channels = 3
    input_size = (299, 299)
    layers = ("pool3",)

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3
            net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True, transform_input=False)
        except Exception as exc:
            raise ExtractorUnavailableError(
                f"pretrained Inception-v3 weights unavailable ({exc}); use extractor 'fallback' instead") from None
        net.fc = nn.Identity()
        self.net = net
        self.requires_grad_(False)
        self.eval()

    def forward(self, images):
        feats = self.net(_imagenet_normalize(self.prepare(images)))
        return {"pool3": feats[:, :, None, None]}

    def pooled(self, images):
        return self(images)["pool3"].flatten(1)


EXTRACTORS = {
    "fallback": RandomConvExtractor,
    "vgg16": VGGExtractor,
    "inception_v3": InceptionExtractor,
}


def get_extractor(name: str, dtype=torch.float32) -> FeatureExtractor:
    try:
        klass = EXTRACTORS[name]
    except KeyError:
        raise ConfigError(f"unknown extractor {name!r}; choose one of {sorted(EXTRACTORS)}") from None
    return klass().to(dtype)
