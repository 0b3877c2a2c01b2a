"""Defect-description encoding and cross-attention fusion with residual maps."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class EncoderUnavailableError(Exception):
    """The configured frozen text encoder cannot be loaded."""


class HashTextEncoder:
    """Frozen deterministic token embedding without external weights.

    Splits the prompt into lowercase word tokens and maps each to a fixed
    pseudo-random unit vector derived from a hash of the token and the
    seed. A stand-in for a pretrained sentence encoder at desk scale.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.fingerprint = f"hash-text/d{dim}/seed{seed}"

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def encode(self, prompt: str) -> np.ndarray:
        tokens = [t for t in "".join(
            c.lower() if c.isalnum() else " " for c in prompt
        ).split() if t]
        if not tokens:
            raise ValueError("prompt has no tokens")
        return np.stack([self._token_vector(t) for t in tokens])


class PretrainedTextEncoder:
    """Frozen transformer embeddings loaded from a local checkpoint path."""

    def __init__(self, model_path: str):
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:  # pragma: no cover
            raise EncoderUnavailableError("transformers is not installed") from e
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_path)
            self.model = AutoModel.from_pretrained(model_path).eval()
        except Exception as e:
            raise EncoderUnavailableError(f"cannot load text encoder: {e}") from e
        self.dim = self.model.config.hidden_size
        self.fingerprint = f"pretrained-text/{model_path}"

    def encode(self, prompt: str) -> np.ndarray:
        if not prompt.strip():
            raise ValueError("prompt has no tokens")
        with torch.no_grad():
            inputs = self.tokenizer(prompt, return_tensors="pt")
            out = self.model(**inputs).last_hidden_state[0]
        return out.numpy().astype(np.float32)


class LinguisticEncoder(nn.Module):
    """Trainable per-token map from frozen text embeddings to the compact
    linguistic space the fusion attends over."""

    def __init__(self, text_dim: int, linguistic_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(text_dim, linguistic_dim),
            nn.GELU(),
            nn.Linear(linguistic_dim, linguistic_dim),
            nn.LayerNorm(linguistic_dim),
        )

    def forward(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        return self.net(token_embeddings)


@dataclass
class LinguisticFeature:
    tokens: torch.Tensor  # (T, linguistic_dim)
    source_prompt: str
    object_name: str = ""
    defect: str = ""

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError("linguistic feature must be (T >= 1, dim)")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("linguistic feature contains non-finite values")

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def encode_prompt(prompt: str, text_encoder, linguistic_encoder: LinguisticEncoder,
                  object_name: str = "", defect: str = "") -> LinguisticFeature:
    """Frozen embedding followed by the trainable compact encoder."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    embeddings = torch.from_numpy(text_encoder.encode(prompt))
    was_training = linguistic_encoder.training
    linguistic_encoder.eval()
    try:
        with torch.no_grad():
            tokens = linguistic_encoder(embeddings)
    finally:
        linguistic_encoder.train(was_training)
    return LinguisticFeature(tokens=tokens, source_prompt=prompt,
                             object_name=object_name, defect=defect)


class CrossAttentionFusion(nn.Module):
    """Injects linguistic tokens into a residual feature map.

    Queries come from a normalized 1x1 convolution of the map; keys and
    values are per-token projections. Attention is a softmax over the
    tokens, and the attended values are added back onto the map so the
    visual signal is preserved.
    """

    def __init__(self, residual_dim: int, linguistic_dim: int):
        super().__init__()
        self.query_conv = nn.Conv2d(residual_dim, residual_dim, kernel_size=1)
        self.query_norm = nn.GroupNorm(1, residual_dim)
        self.key_proj = nn.Linear(linguistic_dim, residual_dim, bias=False)
        self.value_proj = nn.Linear(linguistic_dim, residual_dim, bias=False)
        self.scale = 1.0 / math.sqrt(residual_dim)

    def forward(self, residual_map: torch.Tensor, tokens: torch.Tensor,
                token_mask: torch.Tensor | None = None,
                return_weights: bool = False):
        """residual_map: (B, C, h, w); tokens: (T, Z) or (B, T, Z);
        token_mask: (B, T) bool, True marks valid (non-padding) tokens."""
        if tokens.ndim == 2:
            tokens = tokens.unsqueeze(0).expand(residual_map.shape[0], -1, -1)
        if tokens.shape[-1] != self.key_proj.in_features:
            raise ValueError(
                f"linguistic dim {tokens.shape[-1]} != expected {self.key_proj.in_features}"
            )
        if residual_map.shape[1] != self.query_conv.in_channels:
            raise ValueError(
                f"residual dim {residual_map.shape[1]} != expected "
                f"{self.query_conv.in_channels}"
            )
        q = self.query_norm(self.query_conv(residual_map))       # (B, C, h, w)
        k = self.key_proj(tokens)                                # (B, T, C)
        v = self.value_proj(tokens)                              # (B, T, C)
        logits = torch.einsum("bchw,btc->bthw", q, k) * self.scale
        if token_mask is not None:
            bad = ~token_mask.bool()
            logits = logits.masked_fill(bad[:, :, None, None], float("-inf"))
        weights = torch.softmax(logits, dim=1)                   # over tokens
        attended = torch.einsum("bthw,btc->bchw", weights, v)
        out = residual_map + attended
        if return_weights:
            return out, weights
        return out


def fuse_language(residual_map: np.ndarray, feature: LinguisticFeature,
                  params: CrossAttentionFusion, return_weights: bool = False):
    """Single-map convenience wrapper over ``CrossAttentionFusion``.

    ``residual_map`` is (h, w, d); the result has the same shape.
    """
    t = torch.as_tensor(np.asarray(residual_map), dtype=feature.tokens.dtype)
    if t.ndim != 3:
        raise ValueError("residual map must be (h, w, d)")
    x = t.permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        out = params(x, feature.tokens, return_weights=return_weights)
    if return_weights:
        fused, weights = out
        return (fused[0].permute(1, 2, 0).numpy(), weights[0].numpy())
    return out[0].permute(1, 2, 0).numpy()


def prompt_contrastive_loss(pooled: torch.Tensor, group_ids: torch.Tensor,
                            temperature: float = 0.1) -> torch.Tensor:
    """Pulls phrase embeddings of one defect together, pushes others apart.

    ``pooled`` is (B, Z) mean-pooled phrase embeddings; ``group_ids`` give
    the (object, defect) group per phrase. Anchors without a positive are
    skipped; returns 0 when no anchor has one.
    """
    emb = F.normalize(pooled, dim=1)
    sim = emb @ emb.t() / temperature
    n = emb.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=emb.device)
    same = group_ids.unsqueeze(0) == group_ids.unsqueeze(1)
    pos_mask = same & ~eye
    has_pos = pos_mask.any(dim=1)
    if not has_pos.any():
        return pooled.sum() * 0.0
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    # zero out non-positive slots before summing (avoids -inf * 0)
    pos_log_prob = log_prob.masked_fill(~pos_mask, 0.0).sum(dim=1)
    pos_log_prob = pos_log_prob / pos_mask.sum(dim=1).clamp(min=1)
    return -(pos_log_prob[has_pos]).mean()
