"""Frozen patch feature extractors producing position-tagged feature grids.

Each extractor maps a normalized H x W x 3 float image to an
(h_f, w_f, dim) grid of patch descriptors with a fixed stride, applies a
3x3 local average pooling, and carries a fingerprint that identifies its
architecture and weights for reference-bank compatibility checks.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ResolutionMismatchError(Exception):
    """Input image resolution differs from the extractor's configured size."""


def _weights_digest(module: nn.Module) -> str:
    h = hashlib.sha1()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:12]


class PatchFeatureExtractor:
    """Base: holds sizing metadata and the numpy <-> torch plumbing."""

    def __init__(self, image_size: int, stride: int, dim: int,
                 mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
        self.image_size = image_size
        self.stride = stride
        self.dim = dim
        self.grid_size = image_size // stride
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.fingerprint = "unset"

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def __call__(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError("expected an H x W x 3 image")
        if image.shape[0] != self.image_size or image.shape[1] != self.image_size:
            raise ResolutionMismatchError(
                f"got {image.shape[0]}x{image.shape[1]}, "
                f"extractor expects {self.image_size}x{self.image_size}"
            )
        x = (image - self.mean) / self.std
        x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            feats = self._forward(x)
            # local neighborhood smoothing, the usual memory-bank recipe
            feats = F.avg_pool2d(feats, kernel_size=3, stride=1, padding=1)
        out = feats[0].permute(1, 2, 0).contiguous().numpy()
        assert out.shape == (self.grid_size, self.grid_size, self.dim)
        return out


class ToyConvExtractor(PatchFeatureExtractor):
    """Small frozen random conv stack for desk-scale work.

    Weights are drawn from a seeded generator, so two instances with the
    same (size, stride, dim, seed) produce identical features.
    """

    def __init__(self, image_size: int = 64, stride: int = 8, dim: int = 64, seed: int = 0):
        super().__init__(image_size, stride, dim)
        if stride not in (2, 4, 8, 16, 32):
            raise ValueError("stride must be a power of two in [2, 32]")
        gen = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        in_ch, remaining = 3, stride
        width = max(dim // 2, 8)
        while remaining > 1:
            out_ch = dim if remaining == 2 else width
            conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * (2.0 / conv.weight[0].numel()) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.GELU()]
            in_ch, remaining = out_ch, remaining // 2
        self.net = nn.Sequential(*layers).eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.seed = seed
        self.fingerprint = (
            f"toy-conv/s{stride}/d{dim}/r{image_size}/seed{seed}/{_weights_digest(self.net)}"
        )

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class WideResNetExtractor(PatchFeatureExtractor):
    """WideResNet-50 mid-level features (layer2 + upsampled layer3),
    concatenated and projected to ``dim`` with a frozen seeded 1x1 map.

    ``weights_path`` points at a torchvision-format state dict; without it
    the backbone is randomly initialized (shape-correct, for tests only).
    """

    def __init__(self, image_size: int = 1024, dim: int = 512, seed: int = 0,
                 weights_path: str | None = None):
        super().__init__(image_size, stride=8, dim=dim,
                         mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))
        from torchvision.models import wide_resnet50_2

        backbone = wide_resnet50_2(weights=None)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            backbone.load_state_dict(state)
        self.stem = nn.Sequential(
            backbone.conv1, backbone.bn1, backbone.relu, backbone.maxpool,
            backbone.layer1,
        ).eval()
        self.layer2 = backbone.layer2.eval()
        self.layer3 = backbone.layer3.eval()
        gen = torch.Generator().manual_seed(seed)
        proj = nn.Conv2d(512 + 1024, dim, kernel_size=1, bias=False)
        with torch.no_grad():
            proj.weight.copy_(torch.randn(proj.weight.shape, generator=gen)
                              / (512 + 1024) ** 0.5)
        self.proj = proj.eval()
        for m in (self.stem, self.layer2, self.layer3, self.proj):
            for p in m.parameters():
                p.requires_grad_(False)
        source = weights_path or "random-init"
        self.fingerprint = f"wide-resnet50/d{dim}/r{image_size}/seed{seed}/{source}"

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        f1 = self.stem(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        f3 = F.interpolate(f3, size=f2.shape[-2:], mode="bilinear", align_corners=False)
        return self.proj(torch.cat([f2, f3], dim=1))


def build_extractor(kind: str, image_size: int, dim: int, seed: int = 0,
                    stride: int = 8, weights_path: str | None = None) -> PatchFeatureExtractor:
    if kind == "toy-conv":
        return ToyConvExtractor(image_size=image_size, stride=stride, dim=dim, seed=seed)
    if kind == "wide-resnet50":
        return WideResNetExtractor(image_size=image_size, dim=dim, seed=seed,
                                   weights_path=weights_path)
    raise ValueError(f"unknown extractor kind: {kind}")
