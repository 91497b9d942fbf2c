"""Two-stage dual-branch propagation network.

The proposing stage encodes a support slice (image + annotation) and a query
slice (image + zero map) with a shared residual encoder, enriches both with
multi-scale intra-slice context, relates them with the inter-slice context
module and decodes region and boundary features that are fused by a composite
head. The refining stage repeats the topology (without inter-slice context)
on the query image stacked with one-channel projections of the proposing
stage's decoder features.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

STRIDES = (2, 4, 8, 16, 32)


@dataclass
class NetworkConfig:
    input_size: int = 64
    base_channels: int = 16
    blocks: tuple[int, ...] = (3, 4, 6, 3)
    dilation_rates: tuple[int, ...] = (1, 2, 4, 8)
    psp_scales: tuple[int, ...] = (1, 2, 3, 6)
    leak_slope: float = 0.01
    boundary_branch_enabled: bool = True
    refining_stage_enabled: bool = True
    detach_stage_features: bool = False

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        self.psp_scales = tuple(int(s) for s in self.psp_scales)
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ValueError("blocks must list four positive stage depths")
        if not self.dilation_rates or list(self.dilation_rates) != sorted(self.dilation_rates):
            raise ValueError("dilation_rates must be nonempty and ascending")
        if not self.psp_scales:
            raise ValueError("psp_scales must be nonempty")


class StageOutputs(NamedTuple):
    """Probability maps are (B, H, W); features are (B, C, H, W) at stride 1.

    With the boundary branch disabled ``y_b`` and ``f_b`` are None and the
    composite map is the region map.
    """

    y_r: torch.Tensor
    y_b: torch.Tensor | None
    y_c: torch.Tensor
    f_r: torch.Tensor
    f_b: torch.Tensor | None


class ConvBlock(nn.Sequential):
    """k x k convolution + batch norm + leaky ReLU (resolution preserving)."""

    def __init__(self, cin, cout, k=3, dilation=1, slope=0.01, stride=1):
        pad = dilation * (k - 1) // 2
        super().__init__(
            nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(slope, inplace=True),
        )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, slope):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(slope, inplace=True)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        idt = x if self.shortcut is None else self.shortcut(x)
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + idt)


def stage_channels(base: int) -> list[int]:
    """Channel count of encoder stages E1..E5."""
    return [base, base, 2 * base, 4 * base, 8 * base]


class Encoder(nn.Module):
    """Residual encoder with the ResNet-34 stage layout.

    E1 is the 7x7 stride-2 stem, E2 max-pooling plus the first residual stage,
    E3..E5 the remaining stages; outputs sit at strides 2, 4, 8, 16, 32.
    """

    def __init__(self, in_channels: int, cfg: NetworkConfig):
        super().__init__()
        ch = stage_channels(cfg.base_channels)
        slope = cfg.leak_slope
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, ch[0], 7, 2, 3, bias=False),
            nn.BatchNorm2d(ch[0]),
            nn.LeakyReLU(slope, inplace=True),
        )
        self.pool = nn.MaxPool2d(3, 2, 1)
        self.stages = nn.ModuleList()
        cin = ch[0]
        for i, depth in enumerate(cfg.blocks):
            cout = ch[i + 1]
            stride = 1 if i == 0 else 2
            layers = [BasicBlock(cin, cout, stride, slope)]
            layers += [BasicBlock(cout, cout, 1, slope) for _ in range(depth - 1)]
            self.stages.append(nn.Sequential(*layers))
            cin = cout

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input spatial dims must be divisible by 32, got {h}x{w}")
        feats = [self.stem(x)]
        out = self.pool(feats[0])
        for stage in self.stages:
            out = stage(out)
            feats.append(out)
        return feats


class IntraSliceContext(nn.Module):
    """Multi-scale context within one slice.

    Component 1: parallel cascades of dilated convolutions, path k applying
    rates r_1..r_k. With ``share_weights`` the convolution for a given rate is
    one module referenced by every path that uses it. Paths are fused by
    summation. Component 2: pyramid pooling, concatenation, projection back to
    the input width.
    """

    def __init__(self, channels: int, cfg: NetworkConfig, share_weights: bool = True,
                 active_paths: int | None = None):
        super().__init__()
        rates = cfg.dilation_rates
        slope = cfg.leak_slope
        n_paths = len(rates) if active_paths is None else active_paths
        if not 1 <= n_paths <= len(rates):
            raise ValueError(f"active_paths must be in [1, {len(rates)}]")
        self.n_paths = n_paths
        if share_weights:
            self.dilated = nn.ModuleList(ConvBlock(channels, channels, 3, r, slope) for r in rates)
            self.paths = [[self.dilated[j] for j in range(k + 1)] for k in range(len(rates))]
        else:
            mods = []
            self.paths = []
            for k in range(len(rates)):
                path = [ConvBlock(channels, channels, 3, rates[j], slope) for j in range(k + 1)]
                mods.extend(path)
                self.paths.append(path)
            self.dilated = nn.ModuleList(mods)

        branch_ch = max(1, channels // len(cfg.psp_scales))
        self.psp_scales = cfg.psp_scales
        self.psp = nn.ModuleList(nn.Conv2d(channels, branch_ch, 1) for _ in cfg.psp_scales)
        self.project = ConvBlock(channels + branch_ch * len(cfg.psp_scales), channels, 3, 1, slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        fused = 0
        for path in self.paths[: self.n_paths]:
            out = x
            for conv in path:
                out = conv(out)
            fused = fused + out
        size = fused.shape[-2:]
        pyramid = [fused]
        for scale, conv in zip(self.psp_scales, self.psp):
            pooled = conv(F.adaptive_avg_pool2d(fused, scale))
            pyramid.append(F.interpolate(pooled, size=size, mode="bilinear", align_corners=False))
        return self.project(torch.cat(pyramid, dim=1))


class InterSliceContext(nn.Module):
    """Two 3x3 conv blocks over the channel concatenation [f_s, f_q]."""

    def __init__(self, channels: int, slope: float):
        super().__init__()
        self.body = nn.Sequential(
            ConvBlock(2 * channels, channels, 3, 1, slope),
            ConvBlock(channels, channels, 3, 1, slope),
        )

    def forward(self, f_s: torch.Tensor, f_q: torch.Tensor) -> torch.Tensor:
        if f_s.shape != f_q.shape:
            raise ValueError(f"support/query feature shapes differ: {tuple(f_s.shape)} vs {tuple(f_q.shape)}")
        return self.body(torch.cat([f_s, f_q], dim=1))


class UpBlock(nn.Module):
    # 1x1 conv -> 2x2 stride-2 deconv (+BN, leaky) -> 1x1 conv
    def __init__(self, cin, cout, slope):
        super().__init__()
        mid = max(cin // 4, 4)
        self.reduce = nn.Conv2d(cin, mid, 1)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(mid, mid, 2, 2, bias=False),
            nn.BatchNorm2d(mid),
            nn.LeakyReLU(slope, inplace=True),
        )
        self.expand = nn.Conv2d(mid, cout, 1)

    def forward(self, x):
        return self.expand(self.up(self.reduce(x)))


class Decoder(nn.Module):
    """Upsamples stride-32 features to stride 1, adding encoder skips at
    strides 16, 8, 4 and 2."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = stage_channels(cfg.base_channels)
        slope = cfg.leak_slope
        # stride 32 -> 16 -> 8 -> 4 -> 2
        self.ups = nn.ModuleList(UpBlock(ch[i + 1], ch[i], slope) for i in reversed(range(4)))
        self.final = UpBlock(ch[0], ch[0], slope)
        self.out_channels = ch[0]

    def forward(self, f_m: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        if len(skips) != 4:
            raise ValueError("decoder expects the four encoder maps at strides 2..16")
        out = f_m
        for up, skip in zip(self.ups, reversed(skips)):
            out = up(out)
            if out.shape != skip.shape:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match decoder {tuple(out.shape)}")
            out = out + skip
        return self.final(out)


class Predictor(nn.Module):
    """1x1 projection to one channel followed by the logistic function."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels, 1, 1)

    def forward(self, f):
        return torch.sigmoid(self.proj(f)).squeeze(1)


class Composite(nn.Module):
    def __init__(self, channels: int, slope: float):
        super().__init__()
        self.fuse = ConvBlock(2 * channels, channels, 3, 1, slope)
        self.head = Predictor(channels)

    def forward(self, f_r, f_b):
        if f_r.shape != f_b.shape:
            raise ValueError("region and boundary features must share a shape")
        return self.head(self.fuse(torch.cat([f_r, f_b], dim=1)))


class Stage(nn.Module):
    """Encoder, intra-slice context, dual decoders, predictors and composite."""

    def __init__(self, in_channels: int, cfg: NetworkConfig, inter_slice: bool):
        super().__init__()
        ch = stage_channels(cfg.base_channels)
        self.encoder = Encoder(in_channels, cfg)
        self.intra = IntraSliceContext(ch[4], cfg)
        self.inter = InterSliceContext(ch[4], cfg.leak_slope) if inter_slice else None
        self.decoder_r = Decoder(cfg)
        self.predict_r = Predictor(ch[0])
        self.boundary = cfg.boundary_branch_enabled
        if self.boundary:
            self.decoder_b = Decoder(cfg)
            self.predict_b = Predictor(ch[0])
            self.composite = Composite(ch[0], cfg.leak_slope)

    def heads(self, f_m, skips) -> StageOutputs:
        f_r = self.decoder_r(f_m, skips)
        y_r = self.predict_r(f_r)
        if not self.boundary:
            return StageOutputs(y_r, None, y_r, f_r, None)
        f_b = self.decoder_b(f_m, skips)
        return StageOutputs(y_r, self.predict_b(f_b), self.composite(f_r, f_b), f_r, f_b)


def _as_batch(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 2 else t


class PropNet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        ch0 = stage_channels(cfg.base_channels)[0]
        self.propose = Stage(2, cfg, inter_slice=True)
        if cfg.refining_stage_enabled:
            self.refine_logit_r = nn.Conv2d(ch0, 1, 1)
            self.refine_logit_b = nn.Conv2d(ch0, 1, 1) if cfg.boundary_branch_enabled else None
            self.refine = Stage(3, cfg, inter_slice=False)

    def encode_support(self, image: torch.Tensor, mask: torch.Tensor):
        """Context-enhanced support features; reusable across many queries."""
        x = torch.stack([_as_batch(image), _as_batch(mask).to(image.dtype)], dim=1)
        feats = self.propose.encoder(x)
        return self.propose.intra(feats[-1])

    def forward_propose(self, support_image, support_mask, query_image, f_s=None) -> StageOutputs:
        """Proposing stage. Inputs are (H, W) or (B, H, W); ``f_s`` may carry
        precomputed support features (broadcast over the query batch)."""
        xq = _as_batch(query_image)
        q_in = torch.stack([xq, torch.zeros_like(xq)], dim=1)
        if f_s is None:
            xs = _as_batch(support_image)
            if xs.shape[-2:] != xq.shape[-2:]:
                raise ValueError("support and query images must share H x W")
            s_in = torch.stack([xs, _as_batch(support_mask).to(xs.dtype)], dim=1)
            n = s_in.shape[0]
            # one shared-encoder pass over support and query
            feats = self.propose.encoder(torch.cat([s_in, q_in], dim=0))
            f5 = self.propose.intra(feats[-1])
            f_s, f_q = f5[:n], f5[n:]
            skips = [f[n:] for f in feats[:4]]
        else:
            feats = self.propose.encoder(q_in)
            f_q = self.propose.intra(feats[-1])
            skips = feats[:4]
        if f_s.shape[0] != f_q.shape[0]:
            f_s = f_s.expand(f_q.shape[0], *f_s.shape[1:])
        f_m = self.propose.inter(f_s, f_q)
        return self.propose.heads(f_m, skips)

    def forward_refine(self, query_image, f_r, f_b) -> StageOutputs:
        if not self.cfg.refining_stage_enabled:
            raise RuntimeError("refining stage is disabled in this network")
        xq = _as_batch(query_image)
        if self.cfg.detach_stage_features:
            f_r = f_r.detach()
            f_b = None if f_b is None else f_b.detach()
        if f_r.shape[-2:] != xq.shape[-2:]:
            raise ValueError("refiner features must be at the query resolution")
        logit_r = self.refine_logit_r(f_r)
        logit_b = torch.zeros_like(logit_r) if f_b is None else self.refine_logit_b(f_b)
        x = torch.cat([xq.unsqueeze(1), logit_r, logit_b], dim=1)
        feats = self.refine.encoder(x)
        f = self.refine.intra(feats[-1])
        return self.refine.heads(f, feats[:4])

    def forward(self, support_image, support_mask, query_image, f_s=None):
        """Returns (proposing outputs, refining outputs or None)."""
        prop = self.forward_propose(support_image, support_mask, query_image, f_s=f_s)
        if not self.cfg.refining_stage_enabled:
            return prop, None
        return prop, self.forward_refine(query_image, prop.f_r, prop.f_b)

    @torch.no_grad()
    def predict_queries(self, support_image, support_mask, query_images) -> torch.Tensor:
        """Final per-query probability map: refined composite if the refiner
        is enabled, proposing composite otherwise."""
        f_s = self.encode_support(support_image, support_mask)
        prop, ref = self(None, None, query_images, f_s=f_s)
        return (ref if ref is not None else prop).y_c


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
