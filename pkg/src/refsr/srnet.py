"""Attention U-Net generator, CNN discriminator, frozen perceptual feature
extractor and the four-term composite loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .substrate import ContractError, dft2, softplus


@dataclass
class GeneratorConfig:
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    attention_at_depth: frozenset = frozenset({2})
    attention_heads: int = 4
    residual_output: bool = True
    in_channels: int = 2

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_at_depth = frozenset(self.attention_at_depth)
        if self.in_channels not in (1, 2):
            raise ContractError(f"in_channels must be 1 or 2, got {self.in_channels}")
        if any(d >= len(self.channel_mults) + 1 for d in self.attention_at_depth):
            raise ContractError("attention depth must be < len(channel_mults) + 1")

    def to_dict(self) -> dict:
        return {
            "base_width": self.base_width,
            "channel_mults": list(self.channel_mults),
            "attention_at_depth": sorted(self.attention_at_depth),
            "attention_heads": self.attention_heads,
            "residual_output": self.residual_output,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "channel_mults" in d:
            d["channel_mults"] = tuple(d["channel_mults"])
        if "attention_at_depth" in d:
            d["attention_at_depth"] = frozenset(d["attention_at_depth"])
        return cls(**d)


@dataclass
class LossWeights:
    w_pixel: float = 1.0
    w_freq: float = 0.1
    w_percep: float = 0.01
    w_adv: float = 0.005

    def __post_init__(self):
        vals = (self.w_pixel, self.w_freq, self.w_percep, self.w_adv)
        if any(w < 0 for w in vals) or not any(w > 0 for w in vals):
            raise ContractError(f"weights must be non-negative with at least one positive: {vals}")

    def to_dict(self) -> dict:
        return {"w_pixel": self.w_pixel, "w_freq": self.w_freq,
                "w_percep": self.w_percep, "w_adv": self.w_adv}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else None

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class SelfAttention2d(nn.Module):
    """Multi-head self-attention over flattened spatial positions."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        if ch % heads:
            raise ContractError(f"channels {ch} not divisible by heads {heads}")
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]  # (b, heads, dh, hw)
        scale = 1.0 / math.sqrt(c // self.heads)
        attn = torch.softmax((q.transpose(-1, -2) @ k) * scale, dim=-1)  # (b, heads, hw, hw)
        out = (v @ attn.transpose(-1, -2)).reshape(b, c, h, w)
        return x + self.proj(out)


class Generator(nn.Module):
    """U-Net with residual blocks, bottleneck self-attention and skip concatenation.

    With residual_output the network predicts a correction that is added to
    input channel 0 (the bilinear-upsampled LR image).
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        widths = [w * m for m in cfg.channel_mults]

        self.stem = nn.Conv2d(cfg.in_channels, w, 3, padding=1)
        self.enc = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        ch = w
        for d, ch_out in enumerate(widths):
            self.enc.append(nn.ModuleList([ResBlock(ch, ch_out), ResBlock(ch_out, ch_out)]))
            self.enc_attn.append(
                SelfAttention2d(ch_out, cfg.attention_heads) if d in cfg.attention_at_depth else None
            )
            self.downs.append(nn.Conv2d(ch_out, ch_out, 3, stride=2, padding=1))
            ch = ch_out

        self.mid1 = ResBlock(ch, ch)
        self.mid_attn = SelfAttention2d(ch, cfg.attention_heads)
        self.mid2 = ResBlock(ch, ch)

        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        for d in reversed(range(len(widths))):
            ch_skip = widths[d]
            ch_out = widths[d - 1] if d > 0 else w
            self.ups.append(nn.Conv2d(ch, ch, 3, padding=1))
            self.dec.append(
                nn.ModuleList([ResBlock(ch + ch_skip, ch_out), ResBlock(ch_out, ch_out)])
            )
            self.dec_attn.append(
                SelfAttention2d(ch_out, cfg.attention_heads) if d in cfg.attention_at_depth else None
            )
            ch = ch_out

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, 1, 3, padding=1)

    def forward(self, x):
        levels = len(self.cfg.channel_mults)
        if x.shape[-1] % (1 << levels) or x.shape[-2] % (1 << levels):
            raise ContractError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by 2^{levels}"
            )
        h = self.stem(x)
        skips = []
        for blocks, attn, down in zip(self.enc, self.enc_attn, self.downs):
            for blk in blocks:
                h = blk(h)
            if attn is not None:
                h = attn(h)
            skips.append(h)
            h = down(h)

        h = self.mid2(self.mid_attn(self.mid1(h)))

        for up, blocks, attn, skip in zip(self.ups, self.dec, self.dec_attn, reversed(skips)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skip], dim=1)
            for blk in blocks:
                h = blk(h)
            if attn is not None:
                h = attn(h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        if self.cfg.residual_output:
            out = out + x[:, :1]
        return out


class Discriminator(nn.Module):
    """Stride-2 CNN classifier: 4 conv blocks, global mean pool, 1 logit."""

    def __init__(self, in_channels: int = 1, widths=(32, 64, 128, 256)):
        super().__init__()
        layers = []
        ch = in_channels
        for w in widths:
            layers.append(nn.Conv2d(ch, w, 3, stride=2, padding=1))
            ch = w
        self.convs = nn.ModuleList(layers)
        self.fc = nn.Linear(ch, 1)

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return self.fc(h.mean(dim=(2, 3)))


class FeatureExtractor(nn.Module):
    """Frozen fixed-seed convolutional stack standing in for a pre-trained
    perceptual network; never trained."""

    WIDTHS = (16, 32, 64, 64)

    def __init__(self, seed: int = 1234, in_channels: int = 1):
        super().__init__()
        layers = []
        ch = in_channels
        for w in self.WIDTHS:
            layers.append(nn.Conv2d(ch, w, 3, stride=2, padding=1))
            ch = w
        self.convs = nn.ModuleList(layers)
        init_parameters(self, seed)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled uniform init over registration order."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.shape[1:].numel()
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


def build_generator(cfg: GeneratorConfig, seed: int) -> Generator:
    g = Generator(cfg)
    init_parameters(g, seed)
    # zero-init the output head: the generator starts as the identity on its
    # LR channel (the bilinear baseline) and learns a correction from there
    with torch.no_grad():
        g.out_conv.weight.zero_()
        g.out_conv.bias.zero_()
    return g


def build_discriminator(seed: int) -> Discriminator:
    d = Discriminator()
    init_parameters(d, seed)
    return d


# --- losses -------------------------------------------------------------------

def pixel_loss(pred, gt):
    return ((pred - gt) ** 2).mean()


def frequency_loss(pred, gt):
    """Mean squared modulus of the orthonormal-DFT spectrum difference.

    With the 1/sqrt(N*M) normalization Parseval makes this equal to the pixel
    loss; it is kept as a separately weighted term of the composite loss.
    """
    if pred.shape[-1] < 2 or pred.ndim < 2:
        raise ContractError(f"frequency_loss needs 2D slices, got shape {tuple(pred.shape)}")
    diff = dft2(pred, norm="ortho") - dft2(gt, norm="ortho")
    return (diff.real**2 + diff.imag**2).mean()


def perceptual_loss(pred, gt, extractor: FeatureExtractor):
    fp = extractor(pred)
    fg = extractor(gt)
    loss = pred.new_zeros(())
    for a, b in zip(fp, fg):
        loss = loss + ((a - b) ** 2).mean()
    return loss


def adversarial_losses(disc: Discriminator, fake, real):
    """Non-saturating GAN losses: (generator_loss, discriminator_loss)."""
    disc_loss = softplus(-disc(real)).mean() + softplus(disc(fake.detach())).mean()
    gen_loss = softplus(-disc(fake)).mean()
    return gen_loss, disc_loss


def total_loss(parts: dict, w: LossWeights):
    """Weighted sum of the four generator loss terms.

    parts holds "pixel", "freq", "percep", "adv" scalars; missing entries are
    treated as zero.
    """
    zero = 0.0
    return (
        w.w_pixel * parts.get("pixel", zero)
        + w.w_freq * parts.get("freq", zero)
        + w.w_percep * parts.get("percep", zero)
        + w.w_adv * parts.get("adv", zero)
    )
