"""Dataset indexing for MVTec-style and KolektorSDD2-style directory layouts."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class LayoutError(Exception):
    """Directory tree does not match the declared dataset layout."""


class MissingMaskError(Exception):
    """A defective test image has no ground-truth mask."""


@dataclass
class Sample:
    image_path: Path
    mask_path: Path | None
    defect_type: str


@dataclass
class DatasetIndex:
    root: Path
    category: str
    split: str
    samples: list[Sample] = field(default_factory=list)
    resolution: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def defect_types(self) -> list[str]:
        seen = []
        for s in self.samples:
            if s.defect_type not in seen:
                seen.append(s.defect_type)
        return seen

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.samples:
            out[s.defect_type] = out.get(s.defect_type, 0) + 1
        return out

    def subset(self, defect_types) -> "DatasetIndex":
        wanted = set(defect_types)
        return DatasetIndex(
            root=self.root,
            category=self.category,
            split=self.split,
            samples=[s for s in self.samples if s.defect_type in wanted],
            resolution=self.resolution,
        )

    def good_only(self) -> "DatasetIndex":
        return self.subset(["good"])

    def defective(self) -> "DatasetIndex":
        return DatasetIndex(
            root=self.root,
            category=self.category,
            split=self.split,
            samples=[s for s in self.samples if s.defect_type != "good"],
            resolution=self.resolution,
        )

    def to_json(self) -> str:
        payload = {
            "root": str(self.root),
            "category": self.category,
            "split": self.split,
            "resolution": list(self.resolution) if self.resolution else None,
            "samples": [
                {
                    "image": str(s.image_path),
                    "mask": str(s.mask_path) if s.mask_path else None,
                    "defect_type": s.defect_type,
                }
                for s in self.samples
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetIndex":
        payload = json.loads(text)
        samples = [
            Sample(
                image_path=Path(s["image"]),
                mask_path=Path(s["mask"]) if s["mask"] else None,
                defect_type=s["defect_type"],
            )
            for s in payload["samples"]
        ]
        resolution = tuple(payload["resolution"]) if payload.get("resolution") else None
        return cls(
            root=Path(payload["root"]),
            category=payload["category"],
            split=payload["split"],
            samples=samples,
            resolution=resolution,
        )


def _is_image(path: Path) -> bool:
    return path.suffix.lower() in IMAGE_SUFFIXES


def _load_mvtec(root: Path, category: str, split: str) -> DatasetIndex:
    split_dir = root / category / split
    if not split_dir.is_dir():
        raise LayoutError(f"expected split directory missing: {split_dir}")
    defect_dirs = sorted(p for p in split_dir.iterdir())
    if not defect_dirs:
        raise LayoutError(f"empty split directory: {split_dir}")
    samples: list[Sample] = []
    for entry in defect_dirs:
        if not entry.is_dir():
            raise LayoutError(f"unexpected file in split directory: {entry}")
        defect_type = entry.name
        images = sorted(p for p in entry.iterdir() if _is_image(p))
        stray = sorted(p for p in entry.iterdir() if not _is_image(p))
        if stray:
            raise LayoutError(f"unexpected path: {stray[0]}")
        for image_path in images:
            mask_path = None
            if defect_type != "good":
                mask_path = (
                    root / category / "ground_truth" / defect_type
                    / f"{image_path.stem}_mask.png"
                )
                if split == "test" and not mask_path.exists():
                    raise MissingMaskError(
                        f"no ground-truth mask for {image_path} (expected {mask_path})"
                    )
                if not mask_path.exists():
                    mask_path = None
            samples.append(Sample(image_path, mask_path, defect_type))
    if not samples:
        raise LayoutError(f"no images found under {split_dir}")
    return DatasetIndex(root=root, category=category, split=split, samples=samples)


def _load_ksdd2(root: Path, category: str, split: str) -> DatasetIndex:
    split_dir = root / split
    if not split_dir.is_dir():
        raise LayoutError(f"expected split directory missing: {split_dir}")
    files = sorted(p for p in split_dir.iterdir() if _is_image(p))
    if not files:
        raise LayoutError(f"empty split directory: {split_dir}")
    images = [p for p in files if not p.stem.endswith("_GT")]
    masks = {p.stem[:-3]: p for p in files if p.stem.endswith("_GT")}
    samples: list[Sample] = []
    for image_path in images:
        mask_path = masks.pop(image_path.stem, None)
        if mask_path is None:
            raise LayoutError(f"image without paired mask file: {image_path}")
        with Image.open(mask_path) as m:
            defective = np.asarray(m.convert("L")).any()
        if defective:
            samples.append(Sample(image_path, mask_path, "defect"))
        else:
            samples.append(Sample(image_path, None, "good"))
    if masks:
        orphan = sorted(masks.values())[0]
        raise LayoutError(f"mask file without paired image: {orphan}")
    return DatasetIndex(root=root, category=category, split=split, samples=samples)


def load_dataset(root, layout: str, category: str = "ksdd2", split: str = "test") -> DatasetIndex:
    """Index one category/split of a dataset tree.

    ``layout`` is ``mvtec`` (per-defect subdirectories plus a ground_truth
    tree) or ``ksdd2`` (flat split directories of image/_GT pairs).
    """
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root does not exist: {root}")
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    if layout == "mvtec":
        index = _load_mvtec(root, category, split)
    elif layout == "ksdd2":
        index = _load_ksdd2(root, category, split)
    else:
        raise ValueError(f"unknown layout: {layout}")
    logger.info(
        "indexed %s/%s (%s): %s", category, split, layout,
        ", ".join(f"{k}={v}" for k, v in sorted(index.counts().items())),
    )
    return index


def load_image(path, size: int | None = None) -> np.ndarray:
    """Load an RGB image as float32 in [0, 1], optionally resized square."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


def load_mask(path, size: int | None = None) -> np.ndarray:
    """Load a binary mask as bool, nearest-resized to keep labels crisp."""
    with Image.open(path) as img:
        img = img.convert("L")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.NEAREST)
        return np.asarray(img) > 0
