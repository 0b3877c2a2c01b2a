"""The interactive anomaly mask network.

Two branches meet in a multi-scale fusion pyramid: a ViT over the raw
image concatenated with click maps and the previous mask, and a small
Swin stack over the residual feature grid with optional language
cross-attention. Zero-initialized 1x1 convolutions gate one branch into
the other, so at initialization the gated branch contributes nothing.
In "click" mode the residual side is gated into the image side; "seg"
mode swaps the roles and keeps only the two finest scales.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .language import CrossAttentionFusion, LinguisticEncoder

IMAGE_MEAN = 0.5
IMAGE_STD = 0.5


class DivergenceError(RuntimeError):
    """Forward pass produced non-finite activations."""


class ZeroConv2d(nn.Conv2d):
    """1x1 convolution with weights and bias initialized to exactly zero."""

    def __init__(self, channels: int):
        super().__init__(channels, channels, kernel_size=1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class ConvNeck(nn.Module):
    """1x1 conv + norm + activation, resampled to one pyramid scale."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_dim, out_dim, kernel_size=1)
        groups = 8 if out_dim % 8 == 0 else 1
        self.norm = nn.GroupNorm(groups, out_dim)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor, size) -> torch.Tensor:
        x = self.act(self.norm(self.conv(x)))
        if x.shape[-2:] != tuple(size):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return x


def _window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def _window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window with relative position bias."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.relative_bias, std=0.02)
        coords = torch.stack(torch.meshgrid(
            torch.arange(window), torch.arange(window), indexing="ij"
        )).flatten(1)                                   # (2, w*w)
        rel = coords[:, :, None] - coords[:, None, :]   # (2, n, n)
        rel = rel.permute(1, 2, 0) + (window - 1)
        index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
        self.register_buffer("bias_index", index, persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b_, n, c = x.shape
        qkv = self.qkv(x).reshape(b_, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.relative_bias[self.bias_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b_ // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(b_, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    """One (optionally shifted) windowed transformer block on a fixed grid."""

    def __init__(self, dim: int, heads: int, window: int, shift: int, grid: int):
        super().__init__()
        if grid % window != 0:
            raise ValueError("residual grid must be divisible by the window size")
        self.window = window
        self.shift = shift % window
        self.grid = grid
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )
        if self.shift > 0:
            mask = self._shift_mask(grid, window, self.shift)
        else:
            mask = None
        self.register_buffer("attn_mask", mask, persistent=False)

    @staticmethod
    def _shift_mask(grid: int, window: int, shift: int) -> torch.Tensor:
        img_mask = torch.zeros(1, grid, grid, 1)
        slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
        region = 0
        for hs in slices:
            for ws in slices:
                img_mask[:, hs, ws, :] = region
                region += 1
        windows = _window_partition(img_mask, window).squeeze(-1)
        diff = windows.unsqueeze(1) - windows.unsqueeze(2)
        return diff.masked_fill(diff != 0, float(-100.0)).masked_fill(diff == 0, 0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        shortcut = x
        x = self.norm1(x)
        if self.shift > 0:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        windows = _window_partition(x, self.window)
        windows = self.attn(windows, self.attn_mask)
        x = _window_reverse(windows, self.window, h, w)
        if self.shift > 0:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class TransformerBlock(nn.Module):
    """Standard pre-norm ViT block."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ImageBranch(nn.Module):
    """ViT over the image stacked with click maps and the previous mask.

    The patch embedding of the three auxiliary channels starts at zero so
    a pretrained RGB branch is undisturbed before any clicks are learned.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.image_patch
        self.dim = cfg.image_dim
        self.base_grid = cfg.image_size // cfg.image_patch
        self.patch_embed = nn.Conv2d(6, cfg.image_dim, kernel_size=cfg.image_patch,
                                     stride=cfg.image_patch)
        with torch.no_grad():
            self.patch_embed.weight[:, 3:].zero_()
        self.pos_embed = nn.Parameter(
            torch.zeros(1, cfg.image_dim, self.base_grid, self.base_grid)
        )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.image_dim, cfg.image_heads)
            for _ in range(cfg.image_depth)
        )
        self.norm = nn.LayerNorm(cfg.image_dim)

    def forward(self, image: torch.Tensor, aux: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(torch.cat([image, aux], dim=1))
        b, c, h, w = x.shape
        pos = self.pos_embed
        if (h, w) != (self.base_grid, self.base_grid):
            pos = F.interpolate(pos, size=(h, w), mode="bilinear", align_corners=False)
        x = x + pos
        x = x.flatten(2).transpose(1, 2)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(b, c, h, w)


class ResidualBranch(nn.Module):
    """Linear embedding plus a short stack of Swin blocks over the
    residual grid; blocks alternate unshifted and shifted windows."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.grid = cfg.residual_grid
        self.embed = nn.Linear(cfg.residual_dim, cfg.residual_dim)
        self.embed_norm = nn.LayerNorm(cfg.residual_dim)
        self.pos_embed = nn.Parameter(
            torch.zeros(1, cfg.residual_grid, cfg.residual_grid, cfg.residual_dim)
        )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            SwinBlock(cfg.residual_dim, cfg.swin_heads, cfg.swin_window,
                      shift=0 if i % 2 == 0 else cfg.swin_window // 2,
                      grid=cfg.residual_grid)
            for i in range(cfg.swin_blocks)
        )
        self.norm = nn.LayerNorm(cfg.residual_dim)

    def forward(self, residuals: torch.Tensor) -> torch.Tensor:
        """residuals: (B, h, w, d) -> feature map (B, d, h, w)."""
        if residuals.shape[1] != self.grid or residuals.shape[2] != self.grid:
            raise ValueError(
                f"residual grid {tuple(residuals.shape[1:3])} != configured "
                f"({self.grid}, {self.grid})"
            )
        x = self.embed_norm(self.embed(residuals)) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x.permute(0, 3, 1, 2)


class AnomalyMaskNet(nn.Module):
    """Full model: both branches, gated multi-scale fusion, decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.image_branch = ImageBranch(config)
        self.residual_branch = ResidualBranch(config)
        self.linguistic_encoder = LinguisticEncoder(config.text_dim, config.linguistic_dim)
        self.fusion = (
            CrossAttentionFusion(config.residual_dim, config.linguistic_dim)
            if config.use_language else None
        )
        n_scales = len(config.active_scales)
        self.image_necks = nn.ModuleList(
            ConvNeck(config.image_dim, config.pyramid_dim) for _ in range(n_scales)
        )
        self.residual_necks = nn.ModuleList(
            ConvNeck(config.residual_dim, config.pyramid_dim) for _ in range(n_scales)
        )
        self.zero_convs = nn.ModuleList(
            ZeroConv2d(config.pyramid_dim) for _ in range(n_scales)
        )
        groups = 8 if config.pyramid_dim % 8 == 0 else 1
        self.dec_conv1 = nn.Conv2d(config.pyramid_dim, config.pyramid_dim, 3, padding=1)
        self.dec_norm1 = nn.GroupNorm(groups, config.pyramid_dim)
        self.dec_conv2 = nn.Conv2d(config.pyramid_dim, config.pyramid_dim, 3, padding=1)
        self.dec_norm2 = nn.GroupNorm(groups, config.pyramid_dim)
        self.head = nn.Conv2d(config.pyramid_dim, 1, kernel_size=1)

    def encode_tokens(self, text_embeddings: torch.Tensor) -> torch.Tensor:
        return self.linguistic_encoder(text_embeddings)

    def _decode(self, fused: list[torch.Tensor], out_size) -> torch.Tensor:
        x = fused[0]
        for f in fused[1:]:
            x = F.interpolate(x, size=f.shape[-2:], mode="bilinear",
                              align_corners=False) + f
        x = F.gelu(self.dec_norm1(self.dec_conv1(x)))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.gelu(self.dec_norm2(self.dec_conv2(x)))
        logits = self.head(x)
        logits = F.interpolate(logits, size=out_size, mode="bilinear",
                               align_corners=False)
        return logits

    def forward(self, image: torch.Tensor, clicks: torch.Tensor,
                residuals: torch.Tensor, tokens: torch.Tensor | None = None,
                token_mask: torch.Tensor | None = None,
                return_pyramid: bool = False):
        """image: (B, 3, H, W) normalized; clicks: (B, 3, H, W) positive,
        negative and previous-mask planes; residuals: (B, h, w, d);
        tokens: per-token linguistic features (T, Z) or (B, T, Z)."""
        h_in, w_in = image.shape[-2:]
        coarsest = int(round(1.0 / self.config.active_scales[0]))
        if h_in % coarsest or w_in % coarsest:
            raise ValueError(f"input resolution must be divisible by {coarsest}")
        if self.config.mode == "seg" and bool((clicks[:, :2] != 0).any()):
            raise ValueError("seg mode runs without clicks")

        f_img = self.image_branch(image, clicks)
        r = self.residual_branch(residuals)
        if self.fusion is not None and tokens is not None:
            r = self.fusion(r, tokens, token_mask=token_mask)

        sizes = [(max(1, int(h_in * s)), max(1, int(w_in * s)))
                 for s in self.config.active_scales]
        img_pyramid = [neck(f_img, size) for neck, size in zip(self.image_necks, sizes)]
        res_pyramid = [neck(r, size) for neck, size in zip(self.residual_necks, sizes)]
        if self.config.mode == "click":
            fused = [fi + zc(fr) for fi, fr, zc
                     in zip(img_pyramid, res_pyramid, self.zero_convs)]
        else:
            fused = [zc(fi) + fr for fi, fr, zc
                     in zip(img_pyramid, res_pyramid, self.zero_convs)]

        logits = self._decode(fused, (h_in, w_in))
        if not torch.isfinite(logits).all():
            raise DivergenceError("non-finite activations in forward pass")
        scores = torch.sigmoid(logits).squeeze(1)
        if return_pyramid:
            return scores, {"image": img_pyramid, "residual": res_pyramid,
                            "fused": fused}
        return scores

    def trainable_submodules(self) -> dict[str, nn.Module]:
        mods = {
            "image_branch": self.image_branch,
            "residual_branch": self.residual_branch,
            "linguistic_encoder": self.linguistic_encoder,
            "zero_convs": self.zero_convs,
            "decoder": nn.ModuleList(
                [self.dec_conv1, self.dec_norm1, self.dec_conv2,
                 self.dec_norm2, self.head]
            ),
            "necks": nn.ModuleList(list(self.image_necks) + list(self.residual_necks)),
        }
        if self.fusion is not None:
            mods["fusion"] = self.fusion
        return mods


def normalize_image(image: np.ndarray) -> np.ndarray:
    """float [0, 1] H x W x 3 -> normalized, channels-first."""
    arr = (np.asarray(image, dtype=np.float32) - IMAGE_MEAN) / IMAGE_STD
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def predict_scores(model: AnomalyMaskNet, image: np.ndarray, click_encoding,
                   residuals: np.ndarray, tokens: torch.Tensor | None = None,
                   device: str = "cpu") -> np.ndarray:
    """Single-image convenience forward; returns (H, W) float32 scores."""
    was_training = model.training
    model.eval()
    try:
        img = torch.from_numpy(normalize_image(image))[None].to(device)
        aux = torch.from_numpy(np.stack([
            click_encoding.positive_map,
            click_encoding.negative_map,
            click_encoding.previous_mask,
        ]))[None].to(device)
        res = torch.from_numpy(np.asarray(residuals, dtype=np.float32))[None].to(device)
        with torch.no_grad():
            scores = model(img, aux, res, tokens=tokens)
        return scores[0].cpu().numpy().astype(np.float32)
    finally:
        model.train(was_training)
