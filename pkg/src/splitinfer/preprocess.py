"""Image feature extraction: segmentation, color/texture histograms, shape.

Implements the client-side feature pipeline at desk scale: Otsu threshold
segmentation, CIELUV color histograms (255 bins per channel), circular
local binary patterns with optional uniform / rotation-invariant mappings,
nine structural features over the largest region of interest, and the
orientation/flip augmentations. All functions are pure; images are
immutable once constructed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import Sample, SplitInferError


class DegenerateHistogram(SplitInferError):
    """The image has a single distinct intensity; no threshold separates it."""


class EmptyMask(SplitInferError):
    """The mask selects no pixels."""


class ImageTooSmall(SplitInferError):
    """The image cannot accommodate the requested neighborhood radius."""


@dataclass(frozen=True)
class GrayImage:
    """8-bit single-channel image, row-major."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise ValueError("expected a 2-D uint8 array")
        if self.pixels.size == 0:
            raise ValueError("empty image")
        self.pixels.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class RgbImage:
    """8-bit three-channel image, row-major, channels last."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError("expected an (h, w, 3) uint8 array")
        if self.pixels.size == 0:
            raise ValueError("empty image")
        self.pixels.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_gray(self) -> GrayImage:
        """Rec. 601 luma, rounded to the nearest integer."""
        p = self.pixels.astype(np.float64)
        luma = 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]
        return GrayImage(np.clip(np.rint(luma), 0, 255).astype(np.uint8))


@dataclass(frozen=True)
class Mask:
    """Boolean region-of-interest map matching a source image's shape."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2 or self.pixels.dtype != np.bool_:
            raise ValueError("expected a 2-D bool array")
        self.pixels.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class FeatureBundle:
    """Structural, color, and texture features for one image."""

    structural: tuple[float, ...]
    color: tuple[float, ...]
    texture: tuple[float, ...]

    def as_features(self) -> tuple[float, ...]:
        return self.structural + self.color + self.texture


def otsu_threshold(img: GrayImage, roi_is_dark: bool = True) -> tuple[int, Mask]:
    """Threshold maximizing between-class variance over the 256-bin histogram.

    Comparisons use exact integer arithmetic, so ties are broken toward the
    smallest threshold without floating-point ambiguity. The mask marks
    pixels <= threshold when `roi_is_dark`, else pixels > threshold.
    """
    hist = np.bincount(img.pixels.ravel(), minlength=256)
    if int(np.count_nonzero(hist)) < 2:
        raise DegenerateHistogram("image has a single distinct intensity")
    counts = [int(c) for c in hist]
    weighted = [i * int(c) for i, c in enumerate(hist)]
    total_n = sum(counts)
    total_s = sum(weighted)
    # Between-class variance at t is proportional to (s0*n1 - s1*n0)^2 / (n0*n1);
    # compare candidates by cross-multiplied integers.
    best_t = -1
    best_num = 0
    best_den = 1
    n0 = 0
    s0 = 0
    for t in range(256):
        n0 += counts[t]
        s0 += weighted[t]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_s - s0
        a = s0 * n1 - s1 * n0
        num = a * a
        den = n0 * n1
        if best_t < 0 or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    low = img.pixels <= best_t
    mask = low if roi_is_dark else ~low
    return best_t, Mask(mask.copy())


# sRGB (D65) to XYZ.
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = (0.95047, 1.0, 1.08883)
_UN_PRIME = 4.0 * _WHITE[0] / (_WHITE[0] + 15.0 * _WHITE[1] + 3.0 * _WHITE[2])
_VN_PRIME = 9.0 * _WHITE[1] / (_WHITE[0] + 15.0 * _WHITE[1] + 3.0 * _WHITE[2])

LUV_BINS = 255
LUV_RANGES = ((0.0, 100.0), (-134.0, 220.0), (-140.0, 122.0))


def _rgb_to_luv(rgb: np.ndarray) -> np.ndarray:
    """(n, 3) uint8 rows to (n, 3) CIELUV rows."""
    c = rgb.astype(np.float64) / 255.0
    linear = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T
    x, yy, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    yr = yy / _WHITE[1]
    delta3 = (6.0 / 29.0) ** 3
    kappa = 24389.0 / 27.0
    lstar = np.where(yr > delta3, 116.0 * np.cbrt(yr) - 16.0, kappa * yr)
    denom = x + 15.0 * yy + 3.0 * z
    safe = denom > 0
    up = np.where(safe, 4.0 * x / np.where(safe, denom, 1.0), _UN_PRIME)
    vp = np.where(safe, 9.0 * yy / np.where(safe, denom, 1.0), _VN_PRIME)
    ustar = 13.0 * lstar * (up - _UN_PRIME)
    vstar = 13.0 * lstar * (vp - _VN_PRIME)
    return np.stack([lstar, ustar, vstar], axis=1)


def luv_histogram(img: RgbImage, mask: Optional[Mask] = None) -> np.ndarray:
    """Concatenated L/u*/v* histograms, 255 bins each, each normalized to 1.

    Values are clamped to fixed channel ranges (L in [0, 100], u* in
    [-134, 220], v* in [-140, 122]) so bin edges are data-independent.
    """
    pix = img.pixels.reshape(-1, 3)
    if mask is not None:
        if mask.pixels.shape != img.pixels.shape[:2]:
            raise ValueError("mask dimensions do not match image")
        keep = mask.pixels.ravel()
        if not keep.any():
            raise EmptyMask("mask selects no pixels")
        pix = pix[keep]
    luv = _rgb_to_luv(pix)
    blocks = []
    for ch in range(3):
        lo, hi = LUV_RANGES[ch]
        scaled = (luv[:, ch] - lo) / (hi - lo) * LUV_BINS
        idx = np.clip(np.floor(scaled).astype(np.int64), 0, LUV_BINS - 1)
        hist = np.bincount(idx, minlength=LUV_BINS).astype(np.float64)
        blocks.append(hist / hist.sum())
    return np.concatenate(blocks)


def _circular_offsets(points: int, radius: float) -> list[tuple[float, float]]:
    return [
        (radius * math.sin(2.0 * math.pi * p / points), radius * math.cos(2.0 * math.pi * p / points))
        for p in range(points)
    ]


def _bilinear_shift(img: np.ndarray, dr: float, dc: float, interior: tuple[int, int, int, int]) -> np.ndarray:
    """Sample img at (r + dr, c + dc) for every interior pixel (r, c)."""
    top, bottom, left, right = interior
    r0 = math.floor(dr)
    c0 = math.floor(dc)
    fr = dr - r0
    fc = dc - c0
    h = bottom - top
    w = right - left

    def block(roff: int, coff: int) -> np.ndarray:
        rs = top + r0 + roff
        cs = left + c0 + coff
        return img[rs : rs + h, cs : cs + w]

    # Zero-weight blocks are skipped: exact integer offsets would otherwise
    # index one pixel past the sampling band.
    out = np.zeros((h, w))
    for roff, wr in ((0, 1.0 - fr), (1, fr)):
        if wr == 0.0:
            continue
        for coff, wc in ((0, 1.0 - fc), (1, fc)):
            if wc == 0.0:
                continue
            out += wr * wc * block(roff, coff)
    return out


def _uniform_pattern_labels(points: int) -> dict[int, int]:
    """Map each uniform code (<= 2 circular transitions) to a dense index."""
    codes = {0, (1 << points) - 1}
    for ones in range(1, points):
        run = (1 << ones) - 1
        for shift in range(points):
            rotated = ((run << shift) | (run >> (points - shift))) & ((1 << points) - 1)
            codes.add(rotated)
    return {code: i for i, code in enumerate(sorted(codes))}


def lbp_histogram(
    img: GrayImage,
    points: int = 24,
    radius: float = 3.0,
    mapping: str = "riu2",
) -> np.ndarray:
    """Normalized circular local-binary-pattern histogram.

    Neighbors are sampled on a circle with bilinear interpolation; a bit is
    set when the neighbor is strictly brighter than the center (with a tiny
    tolerance so interpolation noise on flat regions never sets bits).
    Histogram length: 2^P for mapping "none", P(P-1)+3 for "uniform",
    P+2 for "riu2". A border of ceil(radius) pixels is excluded.
    """
    if mapping not in ("none", "uniform", "riu2"):
        raise ValueError(f"unknown mapping {mapping!r}")
    if points < 2:
        raise ValueError("need at least 2 sampling points")
    if radius <= 0:
        raise ValueError("radius must be positive")
    h, w = img.pixels.shape
    if h <= 2 * radius + 1 or w <= 2 * radius + 1:
        raise ImageTooSmall(f"{w}x{h} image too small for radius {radius}")
    border = math.ceil(radius)
    interior = (border, h - border, border, w - border)
    f = img.pixels.astype(np.float64)
    centers = f[border : h - border, border : w - border]
    codes = np.zeros(centers.shape, dtype=np.int64)
    for p, (dr, dc) in enumerate(_circular_offsets(points, radius)):
        neighbor = _bilinear_shift(f, dr, dc, interior)
        codes |= ((neighbor - centers) > 1e-6).astype(np.int64) << p
    codes = codes.ravel()

    if mapping == "none":
        hist = np.bincount(codes, minlength=1 << points).astype(np.float64)
        return hist / hist.sum()

    full = (1 << points) - 1
    rotated = ((codes << 1) | (codes >> (points - 1))) & full
    changes = codes ^ rotated
    transitions = np.zeros(codes.shape, dtype=np.int64)
    ones = np.zeros(codes.shape, dtype=np.int64)
    for b in range(points):
        transitions += (changes >> b) & 1
        ones += (codes >> b) & 1
    uniform = transitions <= 2

    if mapping == "riu2":
        labels = np.where(uniform, ones, points + 1)
        hist = np.bincount(labels, minlength=points + 2).astype(np.float64)
        return hist / hist.sum()

    table = _uniform_pattern_labels(points)
    n_uniform = len(table)  # P(P-1) + 2
    uniq, inverse = np.unique(codes, return_inverse=True)
    lut = np.array([table.get(int(u), n_uniform) for u in uniq], dtype=np.int64)
    labels = lut[inverse]
    hist = np.bincount(labels, minlength=n_uniform + 1).astype(np.float64)
    return hist / hist.sum()


def _connected_components(mask: np.ndarray) -> np.ndarray:
    """8-connected component labels (0 = background), two-pass with union-find."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent = [0]

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    next_label = 1
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            neighbors = []
            for dr, dc in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and labels[rr, cc]:
                    neighbors.append(labels[rr, cc])
            if not neighbors:
                labels[r, c] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                lead = min(neighbors)
                labels[r, c] = lead
                for other in neighbors:
                    union(lead, other)
    remap: dict[int, int] = {}
    out = np.zeros((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            if labels[r, c]:
                root = find(labels[r, c])
                if root not in remap:
                    remap[root] = len(remap) + 1
                out[r, c] = remap[root]
    return out


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels = _connected_components(mask)
    if labels.max() == 0:
        raise EmptyMask("mask selects no pixels")
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == int(np.argmax(counts))


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain hull; returns vertices in counter-clockwise order."""
    pts = np.unique(pts, axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _polygon_area(vertices: np.ndarray) -> float:
    if len(vertices) < 3:
        return 0.0
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _pixel_corners(component: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(component)
    corners = np.concatenate(
        [
            np.stack([cols, rows], axis=1),
            np.stack([cols + 1, rows], axis=1),
            np.stack([cols, rows + 1], axis=1),
            np.stack([cols + 1, rows + 1], axis=1),
        ]
    )
    return corners.astype(np.float64)


def _border_pixels(component: np.ndarray) -> np.ndarray:
    padded = np.pad(component, 1, constant_values=False)
    inner = np.ones_like(component, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            inner &= padded[1 + dr : 1 + dr + component.shape[0], 1 + dc : 1 + dc + component.shape[1]]
    return component & ~inner


def _principal_axes(rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Unit eigenvectors and eigenvalues of the point covariance, major first."""
    x = cols - cols.mean()
    y = rows - rows.mean()
    mu20 = float((x * x).mean())
    mu02 = float((y * y).mean())
    mu11 = float((x * y).mean())
    common = 0.5 * (mu20 + mu02)
    diff = math.hypot(0.5 * (mu20 - mu02), mu11)
    lam1 = common + diff
    lam2 = common - diff
    theta = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    major = np.array([math.cos(theta), math.sin(theta)])
    minor = np.array([-math.sin(theta), math.cos(theta)])
    return major, minor, lam1, max(lam2, 0.0)


def _reflection_mismatch(component: np.ndarray, axis_dir: np.ndarray) -> float:
    """Non-overlap fraction after reflecting pixel centers about a centroid axis."""
    rows, cols = np.nonzero(component)
    cx = cols.mean()
    cy = rows.mean()
    vx = cols - cx
    vy = rows - cy
    dot = vx * axis_dir[0] + vy * axis_dir[1]
    rx = 2.0 * dot * axis_dir[0] - vx
    ry = 2.0 * dot * axis_dir[1] - vy
    ref_c = np.rint(rx + cx).astype(np.int64)
    ref_r = np.rint(ry + cy).astype(np.int64)
    original = {(int(r), int(c)) for r, c in zip(rows, cols)}
    reflected = {(int(r), int(c)) for r, c in zip(ref_r, ref_c)}
    sym_diff = len(original - reflected) + len(reflected - original)
    return sym_diff / len(original)


def shape_features(mask: Mask, gray: GrayImage) -> np.ndarray:
    """Nine structural features of the largest 8-connected ROI component.

    Order: asymmetry index, eccentricity, perimeter (border pixel count),
    max/min/mean intensity inside the component, solidity, compactness,
    circularity. Compactness and circularity are exact reciprocals.
    """
    if mask.pixels.shape != gray.pixels.shape:
        raise ValueError("mask dimensions do not match image")
    if not mask.pixels.any():
        raise EmptyMask("mask selects no pixels")
    component = _largest_component(mask.pixels)
    rows, cols = np.nonzero(component)
    area = float(len(rows))

    major, minor, lam1, lam2 = _principal_axes(rows.astype(float), cols.astype(float))
    eccentricity = math.sqrt(max(0.0, 1.0 - lam2 / lam1)) if lam1 > 0 else 0.0
    asymmetry = 0.5 * (
        _reflection_mismatch(component, major) + _reflection_mismatch(component, minor)
    )

    perimeter = float(np.count_nonzero(_border_pixels(component)))
    values = gray.pixels[component]
    max_intensity = float(values.max())
    min_intensity = float(values.min())
    mean_intensity = float(values.mean())

    hull = _convex_hull(_pixel_corners(component))
    hull_area = _polygon_area(hull)
    solidity = area / hull_area if hull_area > 0 else 1.0

    compactness = perimeter * perimeter / (4.0 * math.pi * area)
    circularity = 4.0 * math.pi * area / (perimeter * perimeter)
    return np.array(
        [
            asymmetry,
            eccentricity,
            perimeter,
            max_intensity,
            min_intensity,
            mean_intensity,
            solidity,
            compactness,
            circularity,
        ]
    )


AUGMENT_OPS = (
    "rot90",
    "rot180",
    "rot270",
    "hflip",
    "hflip_rot90",
    "hflip_rot180",
    "hflip_rot270",
)


def _apply_op(arr: np.ndarray, op: str) -> np.ndarray:
    if op.startswith("hflip"):
        arr = arr[:, ::-1]
        op = op[len("hflip_") :] if op != "hflip" else ""
    if op == "rot90":
        arr = np.rot90(arr, 1)
    elif op == "rot180":
        arr = np.rot90(arr, 2)
    elif op == "rot270":
        arr = np.rot90(arr, 3)
    elif op != "":
        raise ValueError(f"unknown augmentation op {op!r}")
    return arr.copy()


def augment_image(
    img: Union[GrayImage, RgbImage], ops: Sequence[str]
) -> list[Union[GrayImage, RgbImage]]:
    """Rotation/flip variants of an image, one output per requested op.

    Rotations are counter-clockwise; combined ops flip horizontally first,
    then rotate.
    """
    for op in ops:
        if op not in AUGMENT_OPS:
            raise ValueError(f"unknown augmentation op {op!r}")
    out: list[Union[GrayImage, RgbImage]] = []
    for op in ops:
        arr = _apply_op(img.pixels, op)
        out.append(GrayImage(arr) if isinstance(img, GrayImage) else RgbImage(arr))
    return out


def extract_features(
    img: RgbImage,
    roi_is_dark: bool = True,
    lbp_points: int = 24,
    lbp_radius: float = 3.0,
    lbp_mapping: str = "riu2",
) -> FeatureBundle:
    """Full pipeline for one image: segment, then structural+color+texture."""
    gray = img.to_gray()
    _, mask = otsu_threshold(gray, roi_is_dark=roi_is_dark)
    structural = shape_features(mask, gray)
    color = luv_histogram(img, mask)
    texture = lbp_histogram(gray, points=lbp_points, radius=lbp_radius, mapping=lbp_mapping)
    return FeatureBundle(
        structural=tuple(float(v) for v in structural),
        color=tuple(float(v) for v in color),
        texture=tuple(float(v) for v in texture),
    )


def bundle_to_sample(sample_id: str, bundle: FeatureBundle, label: Optional[int]) -> Sample:
    """Flatten a feature bundle into a dataset sample row."""
    return Sample(sample_id, bundle.as_features(), label)


def _read_netpbm_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise SplitInferError(f"expected {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SplitInferError("truncated header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise SplitInferError(f"only maxval 255 supported, got {maxval}")
    return width, height, maxval, pos


def read_pgm(path: Union[str, Path]) -> GrayImage:
    """Read a binary (P5) grayscale image."""
    data = Path(path).read_bytes()
    width, height, _, pos = _read_netpbm_header(data, b"P5")
    expected = width * height
    raw = data[pos : pos + expected]
    if len(raw) != expected:
        raise SplitInferError(f"{path}: expected {expected} pixel bytes, got {len(raw)}")
    return GrayImage(np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy())


def write_pgm(img: GrayImage, path: Union[str, Path]) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + img.pixels.tobytes())


def read_ppm(path: Union[str, Path]) -> RgbImage:
    """Read a binary (P6) color image."""
    data = Path(path).read_bytes()
    width, height, _, pos = _read_netpbm_header(data, b"P6")
    expected = width * height * 3
    raw = data[pos : pos + expected]
    if len(raw) != expected:
        raise SplitInferError(f"{path}: expected {expected} pixel bytes, got {len(raw)}")
    return RgbImage(np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy())


def write_ppm(img: RgbImage, path: Union[str, Path]) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + img.pixels.tobytes())
