"""Defect-free reference feature bank: construction, coreset, persistence.

The on-disk format is a little-endian binary file:

    magic   4s   b"ACBK"            (b"ACRG" for residual-grid dumps)
    version u32  1
    dim     u32
    h, w    u32  feature-grid shape
    count   u32  number of vectors
    flen    u32  fingerprint byte length
    clen    u32  category byte length
    fingerprint, category            utf-8
    positions   count x 2 u32       row, col per vector
    vectors     count x dim float32 row-major

Residual-grid dumps append a float32 theta right after the header ints
and store the matched indices as count u32 values before the vectors.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BANK_MAGIC = b"ACBK"
RESIDUAL_MAGIC = b"ACRG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")


class BankFormatError(Exception):
    """Bank file is corrupt or has an unsupported version."""


@dataclass
class ReferenceBank:
    category: str
    positions: np.ndarray  # (N, 2) int32 grid row/col per vector
    vectors: np.ndarray    # (N, dim) float32
    grid_shape: tuple[int, int]
    extractor_fingerprint: str

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.int32)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if len(self.positions) != len(self.vectors):
            raise ValueError("positions and vectors disagree on count")
        if len(self.vectors) == 0:
            raise ValueError("reference bank must contain at least one vector")
        h, w = self.grid_shape
        if (self.positions[:, 0] < 0).any() or (self.positions[:, 0] >= h).any():
            raise ValueError("bank position row out of grid bounds")
        if (self.positions[:, 1] < 0).any() or (self.positions[:, 1] >= w).any():
            raise ValueError("bank position col out of grid bounds")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def greedy_coreset(vectors: np.ndarray, n_keep: int, seed: int = 0) -> np.ndarray:
    """Farthest-point subset selection, deterministic given the seed.

    Starts at a seeded random vector, then repeatedly adds the vector with
    the largest distance to the selected set (first index on ties).
    """
    n = len(vectors)
    if not (1 <= n_keep <= n):
        raise ValueError("n_keep must be in [1, len(vectors)]")
    vectors = np.asarray(vectors, dtype=np.float64)
    rng = np.random.default_rng(seed)
    selected = [int(rng.integers(n))]
    dist = np.linalg.norm(vectors - vectors[selected[0]], axis=1)
    while len(selected) < n_keep:
        nxt = int(np.argmax(dist))
        selected.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(vectors - vectors[nxt], axis=1))
    return np.asarray(selected, dtype=np.int64)


def build_reference_bank(index, extractor, coreset_fraction: float = 1.0,
                         seed: int = 0) -> ReferenceBank:
    """Extract patch features from every defect-free training image.

    With ``coreset_fraction`` < 1 the bank keeps a greedy farthest-point
    subset of that fraction (at least one vector).
    """
    from .datasets import load_image

    if index.split != "train":
        raise ValueError("reference bank must be built from the train split")
    bad = [s for s in index.samples if s.defect_type != "good"]
    if bad:
        raise ValueError(
            f"reference bank requires defect-free samples; found {bad[0].defect_type}: "
            f"{bad[0].image_path}"
        )
    if not (0.0 < coreset_fraction <= 1.0):
        raise ValueError("coreset_fraction must lie in (0, 1]")

    grid = extractor.grid_size
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    cell_positions = np.stack([rows.ravel(), cols.ravel()], axis=1)

    all_positions, all_vectors = [], []
    for sample in index.samples:
        image = load_image(sample.image_path, size=extractor.image_size)
        feats = extractor(image)
        all_vectors.append(feats.reshape(-1, extractor.dim))
        all_positions.append(cell_positions)
    positions = np.concatenate(all_positions, axis=0)
    vectors = np.concatenate(all_vectors, axis=0)

    if coreset_fraction < 1.0:
        n_keep = max(1, int(round(coreset_fraction * len(vectors))))
        keep = greedy_coreset(vectors, n_keep, seed=seed)
        keep = np.sort(keep)
        positions, vectors = positions[keep], vectors[keep]

    return ReferenceBank(
        category=index.category,
        positions=positions,
        vectors=vectors,
        grid_shape=(grid, grid),
        extractor_fingerprint=extractor.fingerprint,
    )


def save_bank(bank: ReferenceBank, path) -> None:
    path = Path(path)
    fp = bank.extractor_fingerprint.encode()
    cat = bank.category.encode()
    h, w = bank.grid_shape
    header = _HEADER.pack(BANK_MAGIC, FORMAT_VERSION, bank.dim, h, w,
                          len(bank), len(fp), len(cat))
    with open(path, "wb") as f:
        f.write(header)
        f.write(fp)
        f.write(cat)
        f.write(bank.positions.astype("<u4").tobytes())
        f.write(bank.vectors.astype("<f4").tobytes())


def load_bank(path) -> ReferenceBank:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise BankFormatError(f"file too short to be a bank: {path}")
    magic, version, dim, h, w, count, flen, clen = _HEADER.unpack_from(data)
    if magic != BANK_MAGIC:
        raise BankFormatError(f"bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise BankFormatError(f"unsupported bank version {version}")
    off = _HEADER.size
    fingerprint = data[off:off + flen].decode()
    off += flen
    category = data[off:off + clen].decode()
    off += clen
    positions = np.frombuffer(data, dtype="<u4", count=count * 2, offset=off)
    off += positions.nbytes
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off)
    off += vectors.nbytes
    if off != len(data):
        raise BankFormatError(f"trailing bytes in bank file: {path}")
    return ReferenceBank(
        category=category,
        positions=positions.reshape(count, 2).astype(np.int32),
        vectors=vectors.reshape(count, dim).copy(),
        grid_shape=(h, w),
        extractor_fingerprint=fingerprint,
    )


def save_residual_dump(residual_grid, path, fingerprint: str = "") -> None:
    """Debug dump of a residual grid in the bank container format."""
    path = Path(path)
    res = residual_grid.residuals
    h, w, dim = res.shape
    fp = fingerprint.encode()
    header = _HEADER.pack(RESIDUAL_MAGIC, FORMAT_VERSION, dim, h, w,
                          h * w, len(fp), 0)
    with open(path, "wb") as f:
        f.write(header)
        f.write(struct.pack("<f", residual_grid.theta))
        f.write(fp)
        f.write(residual_grid.matched_indices.astype("<u4").tobytes())
        f.write(res.astype("<f4").tobytes())


def load_residual_dump(path):
    from .residuals import ResidualGrid

    data = Path(path).read_bytes()
    magic, version, dim, h, w, count, flen, _ = _HEADER.unpack_from(data)
    if magic != RESIDUAL_MAGIC:
        raise BankFormatError(f"bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise BankFormatError(f"unsupported version {version}")
    off = _HEADER.size
    (theta,) = struct.unpack_from("<f", data, off)
    off += 4
    off += flen  # fingerprint, informational only
    indices = np.frombuffer(data, dtype="<u4", count=count, offset=off)
    off += indices.nbytes
    res = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off)
    return ResidualGrid(
        residuals=res.reshape(h, w, dim).copy(),
        theta=float(theta),
        matched_indices=indices.reshape(h, w).astype(np.int64),
    )
