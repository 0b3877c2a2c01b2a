"""Loaded-model bundle shared by evaluation, the CLI, and the service."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import ReferenceBank, load_bank
from .clicks import encode_clicks
from .extractors import build_extractor
from .language import HashTextEncoder, LinguisticFeature, PretrainedTextEncoder, encode_prompt
from .model import AnomalyMaskNet, predict_scores
from .prompts import PromptCorpus, load_prompt_corpus
from .residuals import ResidualGrid, extract_features, residual_grid
from .training import checkpoint_fingerprint, load_checkpoint


class RuntimeError_(Exception):
    """Runtime assembly failed (missing artifact or fingerprint mismatch)."""


def make_text_encoder(cfg: dict, text_dim: int):
    kind = cfg.get("kind", "hash")
    if kind == "hash":
        return HashTextEncoder(dim=text_dim, seed=int(cfg.get("seed", 0)))
    if kind == "pretrained":
        return PretrainedTextEncoder(cfg["model_path"])
    raise ValueError(f"unknown text encoder kind: {kind}")


@dataclass
class ModelRuntime:
    model: AnomalyMaskNet
    extractor: object
    banks: dict[str, ReferenceBank]
    corpus: PromptCorpus | None
    text_encoder: object
    fingerprint: str = "unknown"
    prompt_seed: int = 0

    def __post_init__(self):
        self._prompt_rng = np.random.default_rng(self.prompt_seed)
        for category, bank in self.banks.items():
            if bank.extractor_fingerprint != self.extractor.fingerprint:
                raise RuntimeError_(
                    f"bank for '{category}' was built with a different extractor "
                    f"({bank.extractor_fingerprint} != {self.extractor.fingerprint})"
                )

    @property
    def config(self):
        return self.model.config

    def residuals_for(self, image: np.ndarray, category: str) -> ResidualGrid:
        if category not in self.banks:
            raise RuntimeError_(f"no reference bank for category '{category}'")
        grid = extract_features(image, self.extractor)
        return residual_grid(grid, self.banks[category],
                             self.config.window_radius, self.config.theta)

    def select_prompt(self, object_name: str, defect: str,
                      rng: np.random.Generator | None = None) -> str:
        """Uniformly random phrase for the entry; seeded rng for replays."""
        phrases = self.corpus.phrases(object_name, defect)
        r = rng if rng is not None else self._prompt_rng
        return phrases[int(r.integers(len(phrases)))]

    def linguistic_for(self, object_name: str, defect: str,
                       prompt: str | None = None,
                       rng: np.random.Generator | None = None) -> LinguisticFeature | None:
        if not self.config.use_language or self.corpus is None:
            return None
        if prompt is None:
            prompt = self.select_prompt(object_name, defect, rng)
        return encode_prompt(prompt, self.text_encoder, self.model.linguistic_encoder,
                             object_name=object_name, defect=defect)

    def predict(self, image: np.ndarray, clicks, previous_mask,
                residuals: ResidualGrid, feature: LinguisticFeature | None) -> np.ndarray:
        h, w = image.shape[:2]
        enc = encode_clicks(clicks, previous_mask, (h, w), self.config.click_radius)
        tokens = feature.tokens if feature is not None else None
        return predict_scores(self.model, image, enc, residuals.residuals,
                              tokens=tokens)


def load_runtime(cfg: dict) -> ModelRuntime:
    """Assemble a runtime from a configuration mapping.

    Expects keys: checkpoint, banks_dir, corpus (optional), extractor
    {kind, stride, seed, weights_path?}, text_encoder {kind, ...}, seed.
    """
    checkpoint = cfg.get("checkpoint")
    if not checkpoint or not Path(checkpoint).is_file():
        raise RuntimeError_(f"checkpoint not found: {checkpoint}")
    model, _, _ = load_checkpoint(checkpoint)
    mc = model.config

    ex_cfg = cfg.get("extractor", {})
    extractor = build_extractor(
        kind=ex_cfg.get("kind", "toy-conv"),
        image_size=mc.image_size,
        dim=mc.residual_dim,
        seed=int(ex_cfg.get("seed", 0)),
        stride=int(ex_cfg.get("stride", mc.image_size // mc.residual_grid)),
        weights_path=ex_cfg.get("weights_path"),
    )

    banks_dir = Path(cfg.get("banks_dir", "banks"))
    banks: dict[str, ReferenceBank] = {}
    if banks_dir.is_dir():
        for path in sorted(banks_dir.glob("*.bank")):
            bank = load_bank(path)
            banks[bank.category] = bank
    if not banks:
        raise RuntimeError_(f"no reference banks under {banks_dir}")

    corpus = None
    if mc.use_language:
        corpus_path = cfg.get("corpus")
        if not corpus_path:
            raise RuntimeError_("model uses language but no corpus is configured")
        corpus = load_prompt_corpus(corpus_path)

    text_encoder = make_text_encoder(cfg.get("text_encoder", {}), mc.text_dim)
    return ModelRuntime(
        model=model,
        extractor=extractor,
        banks=banks,
        corpus=corpus,
        text_encoder=text_encoder,
        fingerprint=checkpoint_fingerprint(checkpoint),
        prompt_seed=int(cfg.get("seed", 0)),
    )
