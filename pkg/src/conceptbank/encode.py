"""Descriptor encoding: codebooks, soft quantization, spatial pyramid.

Each feature channel gets its own codebook (seeded k-means). An image's
raw per-patch descriptors are soft-assigned to the soft_k nearest
codewords with Gaussian weights summing to one per patch, and the mass is
accumulated into every spatial pyramid block (1x1 + 2x2 + 3x1 = 8 blocks)
containing the patch center. Each block's K-bin sub-histogram is
L1-normalized, so a K=1,000 codebook yields the 8,000-dim channel vector.

Two built-in descriptors (gray-patch, color-hist) over dense 20x20
patches with 50% overlap keep the whole pipeline testable without any
external feature extractor; production channels arrive as CBFV files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, PreconditionError
from .formats import read_cbfv, read_ppm

PATCH_SIZE = 20
PATCH_STRIDE = 10  # 50% overlap
PYRAMID_GRIDS = ((1, 1), (2, 2), (3, 1))  # (rows, cols) per level
PYRAMID_BLOCKS = sum(r * c for r, c in PYRAMID_GRIDS)  # 8
BUILTIN_CHANNELS = ("gray-patch", "color-hist")


@dataclass
class DescriptorBlock:
    """Raw dense descriptors for one image and one channel."""

    channel: str
    grid_positions: np.ndarray  # (n, 2) patch centers as (x, y)
    vectors: np.ndarray  # (n, dim)

    def __post_init__(self):
        self.grid_positions = np.asarray(self.grid_positions, dtype=np.float64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.grid_positions.shape[0] != self.vectors.shape[0]:
            raise PreconditionError(
                f"channel {self.channel}: {self.grid_positions.shape[0]} positions "
                f"vs {self.vectors.shape[0]} vectors"
            )


@dataclass
class Codebook:
    channel: str
    centers: np.ndarray  # (k, dim)
    train_seed: int
    soft_sigma: float = 1.0
    inertia: float = field(default=0.0, compare=False)

    @property
    def k(self) -> int:
        return self.centers.shape[0]


@dataclass
class FeatureSet:
    """Per-channel pyramid histograms for one image (or frame)."""

    vectors: dict[str, np.ndarray]

    def dim(self, channel: str) -> int:
        return self.vectors[channel].size

    @property
    def channels(self) -> list[str]:
        return list(self.vectors)


def train_codebook(
    descriptors: np.ndarray, k: int, seed: int, channel: str = ""
) -> Codebook:
    """Seeded k-means (k-means++ init, Lloyd iterations).

    Stops after 100 iterations or when the relative inertia change drops
    below 1e-4; deterministic given (input order, seed). soft_sigma is the
    mean distance of the training descriptors to their nearest center,
    used later as the soft-assignment bandwidth.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2:
        raise PreconditionError("descriptors must be a 2-d array")
    distinct = np.unique(descriptors, axis=0).shape[0]
    if distinct < k:
        raise PreconditionError(
            f"need >= {k} distinct vectors to train a {k}-word codebook, "
            f"got {distinct}"
        )
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(descriptors, k, rng)

    inertia = np.inf
    for _ in range(100):
        d2 = _sq_dists(descriptors, centers)
        assign = np.argmin(d2, axis=1)
        new_inertia = float(d2[np.arange(len(descriptors)), assign].sum())
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = descriptors[mask].mean(axis=0)
            else:
                # re-seed dead cluster at the worst-served point
                worst = int(np.argmax(d2[np.arange(len(descriptors)), assign]))
                centers[j] = descriptors[worst]
        if np.isfinite(inertia) and inertia > 0:
            if (inertia - new_inertia) / inertia < 1e-4:
                inertia = new_inertia
                break
        if new_inertia == 0.0:
            inertia = 0.0
            break
        inertia = new_inertia

    d = np.sqrt(np.maximum(_sq_dists(descriptors, centers), 0.0))
    soft_sigma = float(d.min(axis=1).mean())
    return Codebook(
        channel=channel,
        centers=centers,
        train_seed=seed,
        soft_sigma=soft_sigma,
        inertia=float(inertia),
    )


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass on already-chosen points; pick unseen ones
            centers[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        idx = rng.choice(n, p=probs)
        centers[j] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centers[j : j + 1]).ravel())
    return centers


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances, (len(a), len(b))."""
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def soft_assign(
    vectors: np.ndarray, codebook: Codebook, soft_k: int = 5
) -> tuple[np.ndarray, np.ndarray]:
    """Distribute each patch's unit mass over its soft_k nearest codewords.

    Returns (indices (n, k'), weights (n, k')) with weights rows summing
    to 1. Weights are Gaussian in distance with the codebook's soft_sigma;
    a non-positive sigma degrades to hard assignment.
    """
    k_eff = min(soft_k, codebook.k)
    d2 = _sq_dists(vectors, codebook.centers)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
    rows = np.arange(vectors.shape[0])[:, None]
    near = d2[rows, idx]
    sigma = codebook.soft_sigma
    if sigma > 0:
        # shift by the per-row minimum: same normalized weights, no underflow
        w = np.exp(-(near - near[:, :1]) / (2.0 * sigma * sigma))
    else:
        w = np.zeros_like(near)
        w[:, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def encode_image(
    blocks: dict[str, DescriptorBlock],
    codebooks: dict[str, Codebook],
    image_size: tuple[float, float],
    soft_k: int = 5,
) -> FeatureSet:
    """Encode one image's descriptor blocks into pyramid histograms.

    image_size is (width, height); a patch contributes to the one block
    per pyramid level whose extent contains its center. Patch order does
    not matter: patches are canonically sorted before accumulation.
    """
    width, height = float(image_size[0]), float(image_size[1])
    out: dict[str, np.ndarray] = {}
    for channel, block in blocks.items():
        codebook = codebooks.get(channel)
        if codebook is None:
            raise PreconditionError(f"channel without codebook: {channel}")
        n = block.vectors.shape[0]
        if n == 0:
            raise PreconditionError(f"channel {channel}: zero patches")
        order = np.lexsort((block.grid_positions[:, 0], block.grid_positions[:, 1]))
        positions = block.grid_positions[order]
        idx, w = soft_assign(block.vectors[order], codebook, soft_k)

        k = codebook.k
        hist = np.zeros((PYRAMID_BLOCKS, k), dtype=np.float64)
        block_offset = 0
        for rows, cols in PYRAMID_GRIDS:
            r = _grid_index(positions[:, 1], height, rows)
            c = _grid_index(positions[:, 0], width, cols)
            flat_block = block_offset + r * cols + c
            np.add.at(hist, (flat_block[:, None], idx), w)
            block_offset += rows * cols
        sums = hist.sum(axis=1, keepdims=True)
        nonempty = sums[:, 0] > 0
        hist[nonempty] /= sums[nonempty]
        out[channel] = hist.ravel()
    return FeatureSet(vectors=out)


def _grid_index(coords: np.ndarray, extent: float, cells: int) -> np.ndarray:
    if extent <= 0:
        return np.zeros(coords.shape[0], dtype=np.intp)
    idx = np.floor(coords * cells / extent).astype(np.intp)
    return np.clip(idx, 0, cells - 1)


def infer_image_size(positions: np.ndarray) -> tuple[float, float]:
    """Nominal (width, height) from dense-grid patch centers: the last
    center sits half a patch from the image edge."""
    margin = PATCH_SIZE / 2.0
    return (
        float(positions[:, 0].max()) + margin,
        float(positions[:, 1].max()) + margin,
    )


def builtin_descriptors(pixels: np.ndarray, channel: str) -> DescriptorBlock:
    """Dense 20x20/stride-10 patches of a raster.

    gray-patch: mean-subtracted flattened grayscale patch (400-dim).
    color-hist: L1-normalized 4x4x4 RGB histogram of the patch (64-dim).
    """
    if channel not in BUILTIN_CHANNELS:
        raise PreconditionError(f"unknown builtin descriptor channel: {channel}")
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise PreconditionError(
            f"image {w}x{h} smaller than patch size {PATCH_SIZE}"
        )
    if pixels.ndim == 2:
        rgb = np.repeat(pixels[:, :, None], 3, axis=2)
    else:
        rgb = pixels
    gray = (
        0.299 * rgb[:, :, 0].astype(np.float64)
        + 0.587 * rgb[:, :, 1].astype(np.float64)
        + 0.114 * rgb[:, :, 2].astype(np.float64)
    )

    xs = range(0, w - PATCH_SIZE + 1, PATCH_STRIDE)
    ys = range(0, h - PATCH_SIZE + 1, PATCH_STRIDE)
    positions = []
    vectors = []
    half = PATCH_SIZE // 2
    for y0 in ys:
        for x0 in xs:
            positions.append((x0 + half, y0 + half))
            if channel == "gray-patch":
                patch = gray[y0 : y0 + PATCH_SIZE, x0 : x0 + PATCH_SIZE].ravel()
                vectors.append(patch - patch.mean())
            else:
                patch = rgb[y0 : y0 + PATCH_SIZE, x0 : x0 + PATCH_SIZE]
                bins = (patch.astype(np.intp) // 64).reshape(-1, 3)
                flat = bins[:, 0] * 16 + bins[:, 1] * 4 + bins[:, 2]
                hist = np.bincount(flat, minlength=64).astype(np.float64)
                vectors.append(hist / hist.sum())
    return DescriptorBlock(
        channel=channel,
        grid_positions=np.array(positions, dtype=np.float64),
        vectors=np.array(vectors, dtype=np.float64),
    )


def load_descriptors(image_path: str | Path, channel: str) -> DescriptorBlock:
    """Descriptors for one image and channel: computed from a .ppm raster
    for builtin channels, otherwise read from <stem>.<channel>.cbfv."""
    image_path = Path(image_path)
    if image_path.suffix == ".ppm":
        return builtin_descriptors(read_ppm(image_path), channel)
    cbfv = image_path.parent / f"{image_path.name}.{channel}.cbfv"
    if not cbfv.is_file():
        raise DataFormatError(f"missing descriptor file {cbfv}")
    positions, vectors = read_cbfv(cbfv)
    return DescriptorBlock(channel=channel, grid_positions=positions, vectors=vectors)


def encode_from_path(
    image_path: str | Path,
    codebooks: dict[str, Codebook],
    soft_k: int = 5,
) -> FeatureSet:
    """Load/compute descriptors for every codebook channel and encode."""
    blocks = {ch: load_descriptors(image_path, ch) for ch in codebooks}
    if not blocks:
        raise PreconditionError("no channels configured")
    any_block = next(iter(blocks.values()))
    size = infer_image_size(any_block.grid_positions)
    return encode_image(blocks, codebooks, size, soft_k=soft_k)
