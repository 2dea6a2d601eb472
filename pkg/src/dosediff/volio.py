"""Volume data model, binary containers, body masks, and patch grids.

Volumes are (H, W, D) float32 scalar fields with millimeter voxel spacing
and a dose tag.  The on-disk containers are little-endian:

  MDV1: magic "MDV1" | u32 H,W,D | f32 sx,sy,sz | u8 dose code | f32 payload
  MDM1: magic "MDM1" | u32 H,W,D | u8 payload (0/1)

Payloads are C order, so the D axis varies fastest.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError

MAGIC_VOLUME = b"MDV1"
MAGIC_MASK = b"MDM1"

ESTIMATE = "synthetic-estimate"

DOSE_LADDER = (
    Fraction(1, 20),
    Fraction(1, 10),
    Fraction(1, 4),
    Fraction(1, 2),
    Fraction(1, 1),
)

FULL_DOSE = Fraction(1, 1)
ULTRA_LOW_DOSE = Fraction(1, 20)

DOSE_TO_CODE = {
    Fraction(1, 1): 0,
    Fraction(1, 2): 1,
    Fraction(1, 4): 2,
    Fraction(1, 10): 3,
    Fraction(1, 20): 4,
    ESTIMATE: 255,
}
CODE_TO_DOSE = {v: k for k, v in DOSE_TO_CODE.items()}


def dose_to_str(dose) -> str:
    return ESTIMATE if dose == ESTIMATE else str(dose)


def dose_from_str(s: str):
    return ESTIMATE if s == ESTIMATE else Fraction(s)


@dataclass(frozen=True)
class Volume:
    """An immutable 3D scalar field in activity units."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dose_fraction: Fraction | str = ESTIMATE

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume intensities must be finite")
        if self.dose_fraction not in DOSE_TO_CODE:
            raise ValueError(f"unknown dose fraction {self.dose_fraction!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data, dose_fraction=None) -> "Volume":
        return Volume(
            data=data,
            spacing=self.spacing,
            dose_fraction=self.dose_fraction if dose_fraction is None else dose_fraction,
        )


@dataclass(frozen=True)
class BodyMask:
    """Boolean voxel support over which metrics and signatures are computed."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.ascontiguousarray(self.flags, dtype=bool)
        if flags.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {flags.shape}")
        if not flags.any():
            raise ValueError("mask must contain at least one voxel")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.flags.shape

    @property
    def n_voxels(self) -> int:
        return int(self.flags.sum())


def write_volume(v: Volume, path) -> None:
    h, w, d = v.dims
    payload = struct.pack("<III", h, w, d)
    payload += struct.pack("<fff", *v.spacing)
    payload += struct.pack("<B", DOSE_TO_CODE[v.dose_fraction])
    payload += v.data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(MAGIC_VOLUME + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    header = struct.calcsize("<III fff B") + 4
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC_VOLUME:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    h, w, d = struct.unpack_from("<III", raw, 4)
    spacing = struct.unpack_from("<fff", raw, 16)
    (code,) = struct.unpack_from("<B", raw, 28)
    if code not in CODE_TO_DOSE:
        raise FormatError(f"{path}: unknown dose code {code}")
    expected = h * w * d * 4
    body = raw[29:]
    if len(body) != expected:
        raise FormatError(
            f"{path}: payload is {len(body)} bytes, dims {h}x{w}x{d} need {expected}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(h, w, d)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    return Volume(data=data, spacing=spacing, dose_fraction=CODE_TO_DOSE[code])


def write_mask(m: BodyMask, path) -> None:
    h, w, d = m.dims
    payload = struct.pack("<III", h, w, d)
    payload += m.flags.astype(np.uint8).tobytes(order="C")
    Path(path).write_bytes(MAGIC_MASK + payload)


def read_mask(path) -> BodyMask:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC_MASK:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    h, w, d = struct.unpack_from("<III", raw, 4)
    body = raw[16:]
    if len(body) != h * w * d:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {h * w * d}")
    flags = np.frombuffer(body, dtype=np.uint8)
    if not np.isin(flags, (0, 1)).all():
        raise FormatError(f"{path}: mask payload has values outside 0/1")
    return BodyMask(flags=flags.reshape(h, w, d).astype(bool))


def compute_body_mask(v_full: Volume, threshold: float = 0.1) -> BodyMask:
    """Threshold at a fraction of the max, keep the largest 6-connected blob."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    peak = float(v_full.data.max())
    if peak <= 0.0:
        raise ValueError("cannot build a body mask from a volume with no positive voxel")
    above = v_full.data >= threshold * peak
    labels, n = ndimage.label(above)  # default structure = 6-connectivity
    if n == 0:
        raise ValueError("thresholding produced an empty mask")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return BodyMask(flags=labels == int(sizes.argmax()))


@dataclass(frozen=True)
class PatchGrid:
    """Cubic patch decomposition with end-aligned last origins per axis."""

    patch_size: int
    stride: int
    origins: tuple[tuple[int, int, int], ...] = field(repr=False)


def _axis_starts(dim: int, p: int, s: int) -> list[int]:
    starts = list(range(0, dim - p + 1, s))
    if starts[-1] != dim - p:
        starts.append(dim - p)
    return starts


def make_patch_grid(dims, p: int, s: int) -> PatchGrid:
    if p > min(dims):
        raise ValueError(f"patch size {p} exceeds volume dims {dims}")
    if not 1 <= s <= p:
        raise ValueError(f"stride must satisfy 1 <= s <= {p}, got {s}")
    axes = [_axis_starts(dim, p, s) for dim in dims]
    origins = tuple(itertools.product(*axes))
    return PatchGrid(patch_size=p, stride=s, origins=origins)


def extract_patch(data: np.ndarray, origin, p: int) -> np.ndarray:
    i, j, k = origin
    return np.array(data[i : i + p, j : j + p, k : k + p])


def extract_all(data: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    return [extract_patch(data, o, grid.patch_size) for o in grid.origins]


def stitch_patches(patches, grid: PatchGrid, dims) -> np.ndarray:
    """Reassemble by uniform averaging of overlapping contributions."""
    if len(patches) != len(grid.origins):
        raise ValueError(f"expected {len(grid.origins)} patches, got {len(patches)}")
    p = grid.patch_size
    acc = np.zeros(dims, dtype=np.float64)
    cnt = np.zeros(dims, dtype=np.float64)
    for patch, (i, j, k) in zip(patches, grid.origins):
        acc[i : i + p, j : j + p, k : k + p] += np.asarray(patch, dtype=np.float64)
        cnt[i : i + p, j : j + p, k : k + p] += 1.0
    if not (cnt > 0).all():
        raise ValueError("patch grid does not cover the volume")
    return (acc / cnt).astype(np.float32)


def masked_percentile(volumes, masks, q: float) -> float:
    """Percentile of the pooled masked voxel intensities across volumes."""
    pooled = np.concatenate(
        [v.data[m.flags] for v, m in zip(volumes, masks)]
    )
    return float(np.percentile(pooled.astype(np.float64), q))
