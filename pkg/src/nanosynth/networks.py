"""Generator (style U-Net), segmenter (attention U-Net) and PatchGAN discriminators."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

ADAIN_EPS = 1e-5


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2),
    )


def _check_divisible(x, depth):
    h, w = x.shape[-2:]
    k = 2 ** depth
    if h % k or w % k:
        raise ConfigError(f"spatial size {(h, w)} must be divisible by 2**depth = {k}")


def _as_batch(x, ndim):
    """Accept an unbatched tensor by adding the leading batch axis."""
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise ShapeError(f"expected a {ndim - 1}-D or {ndim}-D tensor, got shape {tuple(x.shape)}")
    return x, False


# ---------------------------------------------------------------------------
# style path

class MappingNetwork(nn.Module):
    """MLP taking a latent vector z to a style vector w."""

    def __init__(self, latent_dim=128, style_dim=128, n_layers=4):
        super().__init__()
        self.latent_dim, self.style_dim = latent_dim, style_dim
        layers = []
        dims = [latent_dim] + [style_dim] * n_layers
        for i in range(n_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < n_layers - 1:
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)

    @property
    def final(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, z):
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent dimension {z.shape[-1]} != expected {self.latent_dim}")
        if not torch.isfinite(z).all():
            raise ShapeError("latent vector must be finite")
        return self.net(z)


def adain(features, style, affine: nn.Linear, eps=ADAIN_EPS):
    """Adaptive instance normalization.

    Each channel of ``features`` (B, C, H, W) is standardized with its own
    spatial mean and (biased) variance, then scaled and shifted by the
    per-channel ``(gamma, beta)`` produced by ``affine(style)``.
    """
    features, unbatched = _as_batch(features, 4)
    if style.dim() == 1:
        style = style.unsqueeze(0)
    params = affine(style)
    c = features.shape[1]
    if params.shape[-1] != 2 * c:
        raise ShapeError(f"affine output {params.shape[-1]} != 2 x channels ({c})")
    gamma, beta = params[:, :c, None, None], params[:, c:, None, None]
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), keepdim=True, unbiased=False)
    out = gamma * (features - mean) / torch.sqrt(var + eps) + beta
    return out[0] if unbatched else out


def noise_inject(features, noise, scales):
    """features + scales[c] * noise, with one spatial noise field shared by all channels."""
    if noise.shape[-2:] != features.shape[-2:]:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match features {tuple(features.shape)}")
    c = features.shape[-3]
    if scales.numel() != c:
        raise ShapeError(f"{scales.numel()} noise scales for {c} channels")
    if noise.dim() == features.dim() - 1:
        noise = noise.unsqueeze(-3)
    return features + scales.view(c, 1, 1) * noise


def style_blend(styles: Sequence, level_assignment: dict, n_levels: int) -> list:
    """Pick the style for every decoder level: level l gets ``styles[level_assignment[l]]``."""
    out = []
    for level in range(n_levels):
        if level not in level_assignment:
            raise ConfigError(f"decoder level {level} has no style assigned")
        idx = level_assignment[level]
        if not 0 <= idx < len(styles):
            raise ConfigError(f"level {level} assigned style index {idx}, only {len(styles)} styles given")
        out.append(styles[idx])
    return out


class StyleDecoderStage(nn.Module):
    def __init__(self, cin, cout, style_dim):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.conv1 = nn.Sequential(nn.Conv2d(2 * cout, cout, 3, padding=1), nn.LeakyReLU(0.2))
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.affine = nn.Linear(style_dim, 2 * cout)
        self.noise_scale = nn.Parameter(torch.zeros(cout))
        with torch.no_grad():
            self.affine.weight.mul_(0.1)
            self.affine.bias.copy_(torch.cat([torch.ones(cout), torch.zeros(cout)]))

    def forward(self, x, skip, w, noise):
        x = self.up(x)
        x = self.conv1(torch.cat([x, skip], dim=1))
        x = self.conv2(x)
        x = adain(x, w, self.affine)
        x = noise_inject(x, noise, self.noise_scale)
        return F.leaky_relu(x, 0.2)


class StyleUNet(nn.Module):
    """Mask-to-image U-Net whose decoder levels are modulated by AdaIN styles and noise."""

    def __init__(self, depth=4, width=64, latent_dim=128, style_dim=128, mapping_layers=4, in_channels=1):
        super().__init__()
        self.depth, self.latent_dim = depth, latent_dim
        widths = [width * 2 ** i for i in range(depth + 1)]
        self.encoder = nn.ModuleList()
        cin = in_channels
        for i in range(depth):
            self.encoder.append(conv_block(cin, widths[i]))
            cin = widths[i]
        self.bottleneck = conv_block(widths[depth - 1], widths[depth])
        # decoder level 0 is the coarsest
        self.decoder = nn.ModuleList(
            StyleDecoderStage(widths[i + 1], widths[i], style_dim) for i in reversed(range(depth))
        )
        self.head = nn.Conv2d(widths[0], 1, 1)
        self.mapping = MappingNetwork(latent_dim, style_dim, mapping_layers)

    @property
    def n_levels(self):
        return self.depth

    def noise_shapes(self, batch, h, w):
        return [(batch, 1, h >> (self.depth - 1 - lvl), w >> (self.depth - 1 - lvl)) for lvl in range(self.depth)]

    def draw_noise(self, batch, h, w, generator=None, dtype=torch.float32, device="cpu"):
        return [torch.randn(s, generator=generator, dtype=dtype).to(device) for s in self.noise_shapes(batch, h, w)]

    def styles(self, z=None, zs=None, level_assignment=None):
        if zs is not None:
            ws = [self.mapping(zi) for zi in zs]
            return style_blend(ws, level_assignment or {lvl: 0 for lvl in range(self.depth)}, self.depth)
        if z is None:
            raise ConfigError("either z or zs must be given")
        return [self.mapping(z)] * self.depth

    def forward(self, mask, z=None, *, zs=None, level_assignment=None, noise_seed: Optional[int] = None,
                generator: Optional[torch.Generator] = None, noise: Optional[list] = None):
        """Render images in [-1, 1] from masks (B, 1, H, W).

        Noise fields come from ``noise`` if given, else from ``noise_seed`` or
        ``generator``; with none of these the global torch RNG is used.
        """
        mask, unbatched = _as_batch(mask, 4)
        _check_divisible(mask, self.depth)
        b, _, h, w = mask.shape
        ws = self.styles(z, zs, level_assignment)
        ws = [wi.expand(b, -1) if wi.dim() == 2 and wi.shape[0] == 1 else wi for wi in ws]
        if noise is None:
            if noise_seed is not None:
                generator = torch.Generator().manual_seed(int(noise_seed))
            noise = self.draw_noise(b, h, w, generator, mask.dtype, mask.device)

        skips = []
        x = mask
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        x = self.bottleneck(x)
        for lvl, stage in enumerate(self.decoder):
            x = stage(x, skips[-1 - lvl], ws[lvl], noise[lvl])
        out = torch.tanh(self.head(x))
        return out[0] if unbatched else out


# ---------------------------------------------------------------------------
# segmenter

class AttentionGate(nn.Module):
    """Additive attention on a skip connection, gated by a (possibly coarser) decoder signal."""

    def __init__(self, skip_channels, gate_channels, inter_channels):
        super().__init__()
        self.proj_skip = nn.Conv2d(skip_channels, inter_channels, 1, bias=False)
        self.proj_gate = nn.Conv2d(gate_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def coefficients(self, skip, gate):
        g = self.proj_gate(gate)
        if g.shape[-2:] != skip.shape[-2:]:
            g = F.interpolate(g, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.psi(F.relu(self.proj_skip(skip) + g)))

    def forward(self, skip, gate):
        skip, unbatched = _as_batch(skip, 4)
        gate, _ = _as_batch(gate, 4)
        out = skip * self.coefficients(skip, gate)
        return out[0] if unbatched else out


class AttentionUNet(nn.Module):
    """Image-to-mask U-Net with attention-gated skips; outputs foreground probabilities."""

    def __init__(self, depth=4, width=64, in_channels=1):
        super().__init__()
        self.depth = depth
        widths = [width * 2 ** i for i in range(depth + 1)]
        self.encoder = nn.ModuleList()
        cin = in_channels
        for i in range(depth):
            self.encoder.append(conv_block(cin, widths[i]))
            cin = widths[i]
        self.bottleneck = conv_block(widths[depth - 1], widths[depth])
        levels = list(reversed(range(depth)))
        self.gates = nn.ModuleList(AttentionGate(widths[i], widths[i + 1], max(widths[i] // 2, 1)) for i in levels)
        self.ups = nn.ModuleList(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in levels)
        self.decoder = nn.ModuleList(conv_block(2 * widths[i], widths[i]) for i in levels)
        self.head = nn.Conv2d(widths[0], 1, 1)

    def logits(self, image):
        _check_divisible(image, self.depth)
        skips = []
        x = image
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for lvl in range(self.depth):
            skip = self.gates[lvl](skips[-1 - lvl], x)
            x = self.decoder[lvl](torch.cat([self.ups[lvl](x), skip], dim=1))
        return self.head(x)

    def forward(self, image):
        image, unbatched = _as_batch(image, 4)
        out = torch.sigmoid(self.logits(image))
        return out[0] if unbatched else out


# ---------------------------------------------------------------------------
# discriminator

class ResidualLinearAttention(nn.Module):
    """x + out(attn(x)) with kernelized attention, cost linear in the pixel count.

    The feature map is elu(.) + 1. The output projection starts at zero, so a
    freshly built block is exactly the identity.
    """

    def __init__(self, channels, key_dim=None, eps=1e-6):
        super().__init__()
        key_dim = key_dim or max(channels // 8, 1)
        self.query = nn.Conv2d(channels, key_dim, 1)
        self.key = nn.Conv2d(channels, key_dim, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)
        self.eps = eps
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        x, unbatched = _as_batch(x, 4)
        b, c, h, w = x.shape
        q = F.elu(self.query(x)).add(1).flatten(2)  # (B, d, N)
        k = F.elu(self.key(x)).add(1).flatten(2)
        v = self.value(x).flatten(2)  # (B, C, N)
        kv = torch.einsum("bdn,bcn->bdc", k, v)
        num = torch.einsum("bdn,bdc->bcn", q, kv)
        den = torch.einsum("bdn,bd->bn", q, k.sum(dim=2)).unsqueeze(1) + self.eps
        y = x + self.out((num / den).view(b, c, h, w))
        return y[0] if unbatched else y


def patch_output_size(size: int, n_layers: int) -> int:
    """Score-map side length for an input side ``size`` (4x4 kernels, padding 1)."""
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    return size - 2  # two stride-1 convolutions


class PatchDiscriminator(nn.Module):
    """PatchGAN: ``n_layers`` stride-2 convs, one stride-1 conv, residual linear attention, 1-channel head.

    Raw scores are returned (no sigmoid) for the least-squares objective.
    """

    def __init__(self, in_channels=1, width=64, n_layers=3, attention=True):
        super().__init__()
        self.n_layers = n_layers
        layers = [nn.Conv2d(in_channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        cout = width
        for i in range(1, n_layers):
            cin, cout = cout, width * min(2 ** i, 8)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.InstanceNorm2d(cout, affine=True),
                       nn.LeakyReLU(0.2)]
        cin, cout = cout, width * min(2 ** n_layers, 8)
        layers += [nn.Conv2d(cin, cout, 4, stride=1, padding=1), nn.InstanceNorm2d(cout, affine=True),
                   nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.attention = ResidualLinearAttention(cout) if attention else nn.Identity()
        self.head = nn.Conv2d(cout, 1, 4, stride=1, padding=1)

    def output_shape(self, h, w):
        return patch_output_size(h, self.n_layers), patch_output_size(w, self.n_layers)

    def forward(self, x):
        x, unbatched = _as_batch(x, 4)
        oh, ow = self.output_shape(*x.shape[-2:])
        if oh < 1 or ow < 1:
            raise ConfigError(f"input {tuple(x.shape[-2:])} too small for a {self.n_layers}-layer PatchGAN")
        out = self.head(self.attention(self.features(x)))
        return out[0] if unbatched else out


# ---------------------------------------------------------------------------
# builders

def build_generator(cfg) -> StyleUNet:
    return StyleUNet(cfg.unet_depth, cfg.unet_width, cfg.latent_dim, cfg.style_dim, cfg.mapping_layers)


def build_segmenter(cfg) -> AttentionUNet:
    return AttentionUNet(cfg.unet_depth, cfg.unet_width)


def build_discriminator(cfg) -> PatchDiscriminator:
    return PatchDiscriminator(1, cfg.disc_width, cfg.disc_layers, cfg.disc_attention)
