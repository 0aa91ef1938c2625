"""Image, disparity-map and label-map containers with bit-exact file I/O.

Supported formats: binary PGM (P5, 8/16-bit big-endian) for intensity and
label images, single-channel PFM for float disparity maps.  Dataset frames
in other formats (PNG etc.) are expected to be converted offline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PatchSpec


class MalformedHeader(ValueError):
    """File header does not describe a supported PGM/PFM variant."""


class TruncatedData(ValueError):
    """File ends before the sample data announced in the header."""


class UnsupportedChannels(ValueError):
    """PFM carries more than one channel."""


class OutOfBounds(ValueError):
    """Sample position outside the image domain."""


class OddDimensions(ValueError):
    """Operation requires even image dimensions."""


#: invalid-disparity sentinel in float maps
INVALID = np.nan


@dataclass(frozen=True)
class IntensityImage:
    """Grayscale image with float64 row-major pixels (nominally 0..4095)."""

    pixels: np.ndarray
    maxval: int = 4095

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("pixels must be a 2-D array")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels must be finite")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class DisparityMap:
    """Float disparity map; invalid pixels carry NaN."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("values must be a 2-D array")
        valid = np.isfinite(v)
        if np.any(v[valid] <= 0):
            raise ValueError("valid disparities must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel instance IDs: 0 unlabeled, 1 free-space, >= 2 obstacle IDs."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("labels must be a 2-D integer array")
        lab = lab.astype(np.int32, copy=True)
        if lab.min() < 0:
            raise ValueError("labels must be non-negative")
        ids = np.unique(lab)
        obstacle = ids[ids >= 2]
        if obstacle.size and not np.array_equal(obstacle, np.arange(2, 2 + obstacle.size)):
            raise ValueError("obstacle IDs must be contiguous starting at 2")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def instance_ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i >= 2]

    @property
    def free_space(self) -> np.ndarray:
        return self.labels == 1


@dataclass(frozen=True)
class PatchGrid:
    """Row-major patch centers covering an image at a fixed stride."""

    stride: int
    patch_w: int
    patch_h: int
    centers: tuple
    dwn: int = 1

    @classmethod
    def cover(cls, width: int, height: int, patch_w: int, patch_h: int,
              stride: int, dwn: int = 1) -> "PatchGrid":
        hw, hh = (patch_w - 1) // 2, (patch_h - 1) // 2
        xs = range(hw, width - hw, stride)
        ys = range(hh, height - hh, stride)
        centers = tuple((x, y) for y in ys for x in xs)
        return cls(stride=stride, patch_w=patch_w, patch_h=patch_h,
                   centers=centers, dwn=dwn)

    def patch(self, index: int) -> PatchSpec:
        x, y = self.centers[index]
        return PatchSpec(xc=x, yc=y, w=self.patch_w, h=self.patch_h)

    def __len__(self) -> int:
        return len(self.centers)


# ---------------------------------------------------------------------------
# PGM / PFM


def _read_pnm_tokens(fh, count):
    """Read whitespace-separated header tokens, skipping # comments."""
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise MalformedHeader("unexpected end of header")
        hash_pos = line.find(b"#")
        if hash_pos >= 0:
            line = line[:hash_pos]
        tokens.extend(line.split())
    return tokens


def save_pgm(image, path) -> None:
    """Write a P5 PGM; 16-bit big-endian samples when maxval > 255."""
    if isinstance(image, LabelMap):
        data = image.labels
        maxval = max(255, int(data.max())) if data.size else 255
        if maxval > 255:
            maxval = 65535
    else:
        data = np.rint(image.pixels).astype(np.int64)
        maxval = int(image.maxval)
    if np.any(data < 0) or np.any(data > maxval):
        raise ValueError("samples out of range for PGM maxval")
    h, w = data.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.astype(dtype).tobytes())


def load_pgm(path) -> IntensityImage:
    """Read a binary P5 PGM into an IntensityImage."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P5":
            raise MalformedHeader(f"expected P5, got {magic!r}")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(fh, 3))
        if maxval <= 0 or maxval > 65535:
            raise MalformedHeader(f"bad maxval {maxval}")
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = fh.read(w * h * dtype.itemsize)
    if len(raw) != w * h * dtype.itemsize:
        raise TruncatedData(f"expected {w * h * dtype.itemsize} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return IntensityImage(pixels=data.astype(np.float64), maxval=maxval)


def load_label_pgm(path) -> LabelMap:
    img = load_pgm(path)
    return LabelMap(labels=img.pixels.astype(np.int32))


def save_pfm(dmap: DisparityMap, path) -> None:
    """Write a single-channel little-endian PFM (rows bottom-up)."""
    data = dmap.values.astype("<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(data[::-1].tobytes())


def load_pfm(path) -> DisparityMap:
    """Read a single-channel PFM; header scale sign selects endianness."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic == b"PF":
            raise UnsupportedChannels("3-channel PFM not supported")
        if magic != b"Pf":
            raise MalformedHeader(f"expected Pf, got {magic!r}")
        tokens = _read_pnm_tokens(fh, 3)
        w, h = int(tokens[0]), int(tokens[1])
        scale = float(tokens[2])
        if scale == 0.0:
            raise MalformedHeader("PFM scale must be non-zero")
        dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        raw = fh.read(w * h * 4)
    if len(raw) != w * h * 4:
        raise TruncatedData(f"expected {w * h * 4} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w)[::-1]
    return DisparityMap(values=data.astype(np.float64))


# ---------------------------------------------------------------------------
# sampling


def bilinear_sample(img: IntensityImage, x: float, y: float) -> float:
    """Bilinear interpolation at a subpixel position; exact at integer coords."""
    w, h = img.width, img.height
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise OutOfBounds(f"({x}, {y}) outside [0, {w - 1}] x [0, {h - 1}]")
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    fx = x - x0
    fy = y - y0
    p = img.pixels
    top = p[y0, x0] * (1.0 - fx) + p[y0, x0 + 1] * fx
    bot = p[y0 + 1, x0] * (1.0 - fx) + p[y0 + 1, x0 + 1] * fx
    return float(top * (1.0 - fy) + bot * fy)


def downsample2(img: IntensityImage) -> IntensityImage:
    """2x2 box average; both dimensions must be even."""
    h, w = img.pixels.shape
    if h % 2 or w % 2:
        raise OddDimensions(f"dimensions {w}x{h} not divisible by 2")
    p = img.pixels
    out = 0.25 * (p[0::2, 0::2] + p[0::2, 1::2] + p[1::2, 0::2] + p[1::2, 1::2])
    return IntensityImage(pixels=out, maxval=img.maxval)


def downsample2_disparity(dmap: DisparityMap) -> DisparityMap:
    """Box-average a disparity map and halve it; any invalid input invalidates."""
    h, w = dmap.values.shape
    if h % 2 or w % 2:
        raise OddDimensions(f"dimensions {w}x{h} not divisible by 2")
    v = dmap.values
    blocks = np.stack([v[0::2, 0::2], v[0::2, 1::2], v[1::2, 0::2], v[1::2, 1::2]])
    out = 0.5 * np.mean(blocks, axis=0)
    return DisparityMap(values=out)
