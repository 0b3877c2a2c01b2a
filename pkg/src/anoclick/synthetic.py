"""Synthetic textured-square dataset with blob anomalies, in MVTec layout.

Used for desk-scale training and for loader fixtures. Every image is a
seeded procedural texture; defective images carry an irregular elliptical
blob that is brighter ("spot") or darker ("smudge") than the texture.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

DEFECT_TYPES = ("spot", "smudge")


def _texture(rng: np.random.Generator, size: int, flavor: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0, 2 * np.pi, size=3)
    if flavor % 2 == 0:
        base = 0.5 + 0.18 * np.sin(2 * np.pi * (3 * xx + 2 * yy) + phase[0])
        base += 0.08 * np.sin(2 * np.pi * 7 * yy + phase[1])
        tint = np.array([1.0, 0.92, 0.80])
    else:
        base = 0.5 + 0.16 * np.sin(2 * np.pi * 4 * xx + phase[0]) * np.sin(
            2 * np.pi * 4 * yy + phase[1]
        )
        base += 0.07 * np.sin(2 * np.pi * (2 * xx - 3 * yy) + phase[2])
        tint = np.array([0.82, 0.95, 1.0])
    img = base[..., None] * tint[None, None, :]
    img += rng.normal(0, 0.015, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def _blob_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    r_lo, r_hi = 0.14 * size, 0.22 * size
    base_r = rng.uniform(r_lo, r_hi)
    margin = r_hi * 1.3 + 2
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    squash = rng.uniform(0.7, 1.3)
    lobes = rng.integers(2, 5)
    wobble_phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.05, 0.2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = (yy - cy) * squash, (xx - cx) / squash
    rad = np.hypot(dy, dx)
    ang = np.arctan2(dy, dx)
    return rad <= base_r * (1.0 + amp * np.sin(lobes * ang + wobble_phase))


def render_sample(rng: np.random.Generator, size: int, flavor: int,
                  defect_type: str | None):
    """One toy image plus its ground-truth mask (None for good images)."""
    img = _texture(rng, size, flavor)
    if defect_type is None:
        return img, None
    mask = _blob_mask(rng, size)
    if defect_type == "spot":
        shift = np.array([0.38, 0.30, -0.12])
    elif defect_type == "smudge":
        shift = np.array([-0.32, -0.30, -0.22])
    else:
        raise ValueError(f"unknown toy defect type: {defect_type}")
    noise = rng.normal(0, 0.04, size=img.shape)
    img = np.where(mask[..., None], np.clip(img + shift + noise, 0, 1), img)
    return img, mask


def synthesize_anomaly(rng: np.random.Generator, image: np.ndarray):
    """Paste a random blob defect onto a defect-free image.

    Returns (image, mask, defect_type); used for self-supervised training
    when no labeled defects exist.
    """
    size = image.shape[0]
    mask = _blob_mask(rng, size)
    defect = DEFECT_TYPES[int(rng.integers(len(DEFECT_TYPES)))]
    if defect == "spot":
        shift = np.array([0.38, 0.30, -0.12])
    else:
        shift = np.array([-0.32, -0.30, -0.22])
    noise = rng.normal(0, 0.04, size=image.shape)
    out = np.where(mask[..., None], np.clip(image + shift + noise, 0, 1), image)
    return out.astype(np.float32), mask, defect


def _save_image(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((arr * 255).astype(np.uint8)).save(path)


def _save_mask(mask: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255).save(path)


def generate_toy_dataset(root, categories=("weave", "grid"), size: int = 64,
                         n_train_good: int = 8, n_test_good: int = 4,
                         n_test_defect: int = 6, seed: int = 0) -> Path:
    """Write a toy dataset tree in MVTec layout; returns the root path."""
    root = Path(root)
    for flavor, category in enumerate(categories):
        rng = np.random.default_rng([seed, flavor])
        for i in range(n_train_good):
            img, _ = render_sample(rng, size, flavor, None)
            _save_image(img, root / category / "train" / "good" / f"{i:03d}.png")
        for i in range(n_test_good):
            img, _ = render_sample(rng, size, flavor, None)
            _save_image(img, root / category / "test" / "good" / f"{i:03d}.png")
        for defect in DEFECT_TYPES:
            for i in range(n_test_defect):
                img, mask = render_sample(rng, size, flavor, defect)
                _save_image(img, root / category / "test" / defect / f"{i:03d}.png")
                _save_mask(
                    mask,
                    root / category / "ground_truth" / defect / f"{i:03d}_mask.png",
                )
    return root


def toy_prompt_corpus(categories=("weave", "grid"), n_phrases: int = 6) -> dict:
    """Nested corpus dict with simple phrase variants per (object, defect)."""
    spot_templates = [
        "a bright discolored spot on the {obj} surface",
        "small pale blotch contrasting with the {obj} texture",
        "light colored stain disrupting the {obj} pattern",
        "a shiny round mark on the {obj}",
        "washed out patch against the {obj} weave",
        "a luminous blemish on the {obj} material",
    ]
    smudge_templates = [
        "a dark smeared patch on the {obj} surface",
        "deep shadowy smudge across the {obj} texture",
        "blackened area staining the {obj} pattern",
        "a dull dark blot on the {obj}",
        "a grimy streak darkening the {obj} weave",
        "a murky stain spoiling the {obj} material",
    ]
    corpus: dict = {}
    for category in categories:
        corpus[category] = {
            "spot": [t.format(obj=category) for t in spot_templates[:n_phrases]],
            "smudge": [t.format(obj=category) for t in smudge_templates[:n_phrases]],
        }
    return corpus
