"""Visual feature grids: a small stride-2 conv encoder and the FGRD file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, conv2d, leaky_relu, reshape
from .errors import ConfigurationError, FormatError

GRID_MAGIC = b"FGRD"
ENCODER_LAYERS = 3
ENCODER_STRIDE = 2
ENCODER_KERNEL = 3
COORD_CHANNELS = 2      # intensity-gated row and column ramps appended to RGB


@dataclass
class FeatureGrid:
    """``d * d`` visual vectors of width ``D_c``, ordered row-major by grid position."""

    vectors: np.ndarray  # (N, D_c)
    d: int

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.d * self.d:
            raise FormatError(f"feature grid with d={self.d} needs {self.d * self.d} vectors, "
                              f"got array of shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise FormatError("feature grid contains non-finite values")

    @property
    def n(self) -> int:
        return self.d * self.d

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]


def save_feature_grid(grid: FeatureGrid, path) -> None:
    payload = np.ascontiguousarray(grid.vectors, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<II", grid.d, grid.channels) + payload)


def load_feature_grid(path) -> FeatureGrid:
    blob = Path(path).read_bytes()
    if blob[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: bad feature-grid magic {blob[:4]!r}", 0)
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated feature-grid header", len(blob))
    d, channels = struct.unpack_from("<II", blob, 4)
    need = 12 + d * d * channels * 4
    if len(blob) < need:
        raise FormatError(f"{path}: payload for d={d}, D_c={channels} needs {need} bytes", len(blob))
    if len(blob) > need:
        raise FormatError(f"{path}: {len(blob) - need} trailing bytes after payload", need)
    vectors = np.frombuffer(blob, dtype="<f4", count=d * d * channels, offset=12)
    return FeatureGrid(vectors.reshape(d * d, channels).astype(np.float32), d)


def encoder_param_shapes(channels: Sequence[int], d_feat: int) -> dict[str, tuple[int, ...]]:
    """Kernel/bias shapes for the three stride-2 layers: 3+2 -> channels[0] -> channels[1] -> d_feat."""
    if len(channels) != ENCODER_LAYERS - 1:
        raise ConfigurationError(f"encoder channel plan needs {ENCODER_LAYERS - 1} hidden widths, got {channels}")
    plan = [3 + COORD_CHANNELS, *channels, d_feat]
    shapes = {}
    for i in range(ENCODER_LAYERS):
        shapes[f"enc{i}.w"] = (ENCODER_KERNEL, ENCODER_KERNEL, plan[i], plan[i + 1])
        shapes[f"enc{i}.b"] = (plan[i + 1],)
    return shapes


def grid_side(image_size: int) -> int:
    factor = ENCODER_STRIDE ** ENCODER_LAYERS
    if image_size <= 0 or image_size % factor:
        raise ConfigurationError(f"image side {image_size} is not divisible by {factor}")
    return image_size // factor


def coordinate_planes(size: int) -> np.ndarray:
    """(size, size, 2) row and column ramps over [-1, 1]."""
    ramp = np.linspace(-1.0, 1.0, size)
    return np.stack(np.meshgrid(ramp, ramp, indexing="ij"), axis=-1)


def encode(images, params: dict[str, Tensor]) -> Tensor:
    """
    Map (B, S, S, 3) or (S, S, 3) images to a (B, N, D_c) feature tensor, N = (S/8)^2.

    uint8 input is scaled to [0, 1]; float input is assumed to be scaled already.
    Two coordinate planes, scaled by each pixel's brightest channel, are
    appended to the RGB channels.  They let the grid vectors carry where their
    content sits, which a three-layer stack with a 15-pixel receptive field
    could not otherwise see; blank pixels contribute nothing, so an all-zero
    image still maps to position-independent features.
    """
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != arr.shape[2] or arr.shape[3] != 3:
        raise ConfigurationError(f"encoder expects square RGB images, got {arr.shape}")
    d = grid_side(arr.shape[1])
    coords = coordinate_planes(arr.shape[1]) * arr.max(axis=-1, keepdims=True)
    x = Tensor(np.concatenate([arr, coords], axis=-1), dtype=params["enc0.w"].dtype)
    for i in range(ENCODER_LAYERS):
        x = conv2d(x, params[f"enc{i}.w"], params[f"enc{i}.b"], stride=ENCODER_STRIDE, padding=1)
        x = leaky_relu(x)
    return reshape(x, (x.shape[0], d * d, x.shape[3]))


def encode_grid(image: np.ndarray, params: dict[str, Tensor]) -> FeatureGrid:
    features = encode(image, params)
    return FeatureGrid(features.data[0], grid_side(image.shape[0]))


def receptive_rows(d: int, image_size: int, region: tuple[int, int, int, int]) -> set[int]:
    """
    Grid positions whose input footprint intersects ``region`` = (y0, y1, x0, x1), half-open.

    Each layer (kernel 3, stride 2, padding 1) maps output index o to input
    indices 2o-1 .. 2o+1, so footprints compose by interval arithmetic.
    """
    def span(o: int) -> tuple[int, int]:
        lo, hi = o, o
        for _ in range(ENCODER_LAYERS):
            lo, hi = ENCODER_STRIDE * lo - 1, ENCODER_STRIDE * hi + 1
        return max(lo, 0), min(hi, image_size - 1)

    y0, y1, x0, x1 = region
    hits = set()
    for r in range(d):
        ry = span(r)
        if ry[1] < y0 or ry[0] >= y1:
            continue
        for c in range(d):
            rx = span(c)
            if rx[1] < x0 or rx[0] >= x1:
                continue
            hits.add(r * d + c)
    return hits
