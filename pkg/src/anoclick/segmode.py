"""Fully automatic detection: one forward per candidate defect type,
aggregated by per-pixel maximum."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .clicks import encode_clicks
from .language import encode_prompt
from .model import AnomalyMaskNet, predict_scores
from .prompts import PromptCorpus


class UnresolvableDefectError(Exception):
    """A defect type has no corpus entry (and no fallback)."""


@dataclass
class DefectTypeSet:
    """Ordered (object, defect) prompt keys for the category under test."""

    types: list[tuple[str, str]]

    def __post_init__(self):
        if not self.types:
            raise ValueError("defect type set must not be empty")

    def __len__(self) -> int:
        return len(self.types)

    def validate(self, corpus: PromptCorpus) -> None:
        for obj, defect in self.types:
            try:
                corpus.resolve_key(obj, defect)
            except KeyError as e:
                raise UnresolvableDefectError(str(e)) from e

    @classmethod
    def from_index(cls, index, corpus: PromptCorpus | None = None) -> "DefectTypeSet":
        types = [(index.category, d) for d in index.defect_types if d != "good"]
        out = cls(types)
        if corpus is not None:
            out.validate(corpus)
        return out


@dataclass
class ScoreMapSet:
    maps: np.ndarray          # (P, H, W)
    aggregate: np.ndarray     # (H, W) per-pixel max
    image_score: float

    @classmethod
    def from_maps(cls, maps) -> "ScoreMapSet":
        maps = np.asarray(maps, dtype=np.float32)
        if maps.ndim != 3 or maps.shape[0] < 1:
            raise ValueError("need at least one (H, W) score map")
        aggregate = maps.max(axis=0)
        return cls(maps=maps, aggregate=aggregate,
                   image_score=image_level_score(aggregate))


def aggregate_max(maps) -> np.ndarray:
    """Per-pixel maximum over defect-type score maps."""
    maps = np.asarray(maps, dtype=np.float32)
    return maps.max(axis=0)


def image_level_score(score_map: np.ndarray) -> float:
    """Maximum of the 3x3 mean-smoothed map; robust to single-pixel spikes."""
    smoothed = ndimage.uniform_filter(np.asarray(score_map, dtype=np.float64), size=3)
    return float(np.clip(smoothed.max(), 0.0, 1.0))


def save_score_map(scores: np.ndarray, path) -> Path:
    """Persist a score map as 16-bit grayscale PNG (score * 65535)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (np.clip(np.asarray(scores, dtype=np.float64), 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)
    return path


def load_score_map(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 65535.0


def seg_forward(image: np.ndarray, residuals: np.ndarray,
                defect_types: DefectTypeSet, model: AnomalyMaskNet,
                corpus: PromptCorpus | None, text_encoder=None,
                rng: np.random.Generator | None = None) -> ScoreMapSet:
    """One clickless forward per defect type, combined by pixel-wise max.

    Without the language pathway a single pass covers every type.
    """
    if model.config.mode != "seg":
        raise ValueError("seg_forward needs a checkpoint trained in seg mode")
    h, w = image.shape[:2]
    empty = encode_clicks([], None, (h, w), model.config.click_radius)
    if not model.config.use_language or corpus is None:
        scores = predict_scores(model, image, empty, residuals, tokens=None)
        return ScoreMapSet.from_maps(np.repeat(scores[None], len(defect_types), axis=0))
    defect_types.validate(corpus)
    if rng is None:
        rng = np.random.default_rng(0)
    maps = []
    for obj, defect in defect_types.types:
        phrases = corpus.phrases(obj, defect)
        prompt = phrases[int(rng.integers(len(phrases)))]
        feature = encode_prompt(prompt, text_encoder, model.linguistic_encoder,
                                object_name=obj, defect=defect)
        maps.append(predict_scores(model, image, empty, residuals,
                                   tokens=feature.tokens))
    return ScoreMapSet.from_maps(np.stack(maps))
