"""Datasets, preprocessing and the low-level baselines: neighborhood
pixel-difference pseudo-likelihoods, a compressed-size code-length baseline,
IDX ingestion, grayscale conversion, patch tiling and seeded synthetic
smooth/textured generators.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

GRAY_R, GRAY_G, GRAY_B = 0.2989, 0.5870, 0.1140

HIST_BINS = 100


@dataclass
class LabeledDataset:
    """Images (integer pixels, (N,C,H,W)) with optional labels and a split tag."""

    images: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim == 3:  # (N,H,W) -> single channel
            self.images = self.images[:, None]
        if self.labels is not None and len(self.labels) != len(self.images):
            raise FormatError(
                f"{len(self.labels)} labels for {len(self.images)} images"
            )

    def __len__(self):
        return len(self.images)


def pixel_diff_features(image):
    """Difference of each pixel to the mean of its 3x3 neighborhood.

    The neighborhood includes the pixel itself (9 cells in the interior)
    and shrinks at the borders. Channels are processed independently;
    output shape equals the input shape.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return _pixel_diff_single(arr)
    if arr.ndim == 3:
        return np.stack([_pixel_diff_single(c) for c in arr])
    raise ContractError(f"expected a (H,W) or (C,H,W) image, got shape {arr.shape}")


def _pixel_diff_single(img):
    h, w = img.shape
    if h < 1 or w < 1:
        raise ContractError("image must be at least 1x1")
    padded = np.zeros((h + 2, w + 2))
    counts = np.zeros((h + 2, w + 2))
    padded[1:h + 1, 1:w + 1] = img
    counts[1:h + 1, 1:w + 1] = 1.0
    ssum = np.zeros((h, w))
    scnt = np.zeros((h, w))
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            ssum += padded[dy:dy + h, dx:dx + w]
            scnt += counts[dy:dy + h, dx:dx + w]
    return img - ssum / scnt


@dataclass
class PixelDiffHistogram:
    """100-bin histogram over pixel differences with Laplace smoothing."""

    lo: float
    hi: float
    probs: np.ndarray = field(repr=False)


def fit_pixel_diff_histogram(images):
    """Fit the difference histogram on a reference corpus of images.

    Bin edges span [min, max] of the corpus differences and are frozen;
    each bin gets a pseudo-count of 1 so every probability stays positive.
    """
    diffs = np.concatenate([pixel_diff_features(img).ravel() for img in images])
    lo, hi = float(diffs.min()), float(diffs.max())
    if hi <= lo:
        hi = lo + 1.0  # constant corpus: single degenerate span
    counts, _ = np.histogram(diffs, bins=HIST_BINS, range=(lo, hi))
    probs = (counts + 1.0) / (counts.sum() + HIST_BINS)
    return PixelDiffHistogram(lo=lo, hi=hi, probs=probs)


def _bin_indices(hist, values):
    width = (hist.hi - hist.lo) / HIST_BINS
    idx = np.floor((values - hist.lo) / width).astype(np.intp)
    return np.clip(idx, 0, HIST_BINS - 1)  # out-of-range falls in the edge bins


def pseudo_loglik(hist, image):
    """Sum over pixels of the log bin probability of each pixel's difference."""
    diffs = pixel_diff_features(image).ravel()
    return float(np.log(hist.probs[_bin_indices(hist, diffs)]).sum())


def compressed_size_bits(image):
    """Bit length of a deflate encoding of the raw pixel bytes.

    Serves as a general-distribution code length: up to constants,
    size_in_bits * ln 2 approximates -log p_g(x).
    """
    arr = np.asarray(image)
    data = arr.astype(np.uint8).tobytes()
    return 8 * len(zlib.compress(data, level=9))


def load_idx(path):
    """Read an IDX (big-endian) u8 tensor file; images (3-d) or labels (1-d)."""
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) != 4:
            raise FormatError("truncated IDX header")
        (magic,) = struct.unpack(">I", head)
        if magic == IDX_MAGIC_IMAGES:
            dims = struct.unpack(">3I", _read_exact(f, 12))
            n = dims[0] * dims[1] * dims[2]
            data = _read_exact(f, n)
            return np.frombuffer(data, dtype=np.uint8).reshape(dims).copy()
        if magic == IDX_MAGIC_LABELS:
            (count,) = struct.unpack(">I", _read_exact(f, 4))
            data = _read_exact(f, count)
            return np.frombuffer(data, dtype=np.uint8).copy()
        raise FormatError(f"unknown IDX magic 0x{magic:08x}")


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated IDX file")
    return buf


def save_idx(path, array):
    """Write a u8 array as IDX: 3-d arrays as images, 1-d as labels."""
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        if arr.ndim == 3:
            f.write(struct.pack(">I", IDX_MAGIC_IMAGES))
            f.write(struct.pack(">3I", *arr.shape))
        elif arr.ndim == 1:
            f.write(struct.pack(">I", IDX_MAGIC_LABELS))
            f.write(struct.pack(">I", arr.shape[0]))
        else:
            raise FormatError(f"IDX supports 1-d or 3-d arrays, got {arr.ndim}-d")
        f.write(arr.tobytes())


def load_idx_dataset(image_path, label_path=None, split="train"):
    images = load_idx(image_path)
    if images.ndim != 3:
        raise FormatError("expected an IDX image file")
    labels = None
    if label_path is not None:
        labels = load_idx(label_path)
        if labels.ndim != 1:
            raise FormatError("expected an IDX label file")
        if len(labels) != len(images):
            raise FormatError(f"{len(labels)} labels for {len(images)} images")
    return LabeledDataset(images=images, labels=labels, split=split)


def to_grayscale(r, g, b):
    """Luma-weighted channel mix: 0.2989 r + 0.5870 g + 0.1140 b."""
    return GRAY_R * np.asarray(r) + GRAY_G * np.asarray(g) + GRAY_B * np.asarray(b)


def grayscale_images(images):
    """(N,3,H,W) -> (N,1,H,W) with the luma weights, rounded back to integers."""
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ContractError(f"expected (N,3,H,W) images, got {arr.shape}")
    gray = to_grayscale(arr[:, 0], arr[:, 1], arr[:, 2])
    return np.clip(np.rint(gray), 0, 255).astype(arr.dtype)[:, None]


def extract_patches(image, size):
    """Row-major tiling of a (C,H,W) image into non-overlapping size x size patches."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ContractError(f"expected (C,H,W), got shape {arr.shape}")
    c, h, w = arr.shape
    if h % size or w % size:
        raise ContractError(f"image {h}x{w} not divisible by patch size {size}")
    patches = []
    for i in range(0, h, size):
        for j in range(0, w, size):
            patches.append(arr[:, i:i + size, j:j + size])
    return np.stack(patches)


def reassemble_patches(patches, height, width):
    """Exact inverse of :func:`extract_patches` for the given image size."""
    arr = np.asarray(patches)
    n, c, size, size2 = arr.shape
    if size != size2 or height % size or width % size:
        raise ContractError("patch grid does not tile the requested size")
    per_row = width // size
    if n != per_row * (height // size):
        raise ContractError(f"{n} patches cannot tile {height}x{width}")
    out = np.empty((c, height, width), dtype=arr.dtype)
    for k in range(n):
        i, j = divmod(k, per_row)
        out[:, i * size:(i + 1) * size, j * size:(j + 1) * size] = arr[k]
    return out


_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0])
_SMOOTH_KERNEL = np.outer(_BINOMIAL5, _BINOMIAL5) / 256.0


def _smooth_field(field2d, passes):
    h, w = field2d.shape
    out = field2d
    for _ in range(passes):
        padded = np.pad(out, 2, mode="edge")
        acc = np.zeros_like(out)
        for dy in range(5):
            for dx in range(5):
                acc += _SMOOTH_KERNEL[dy, dx] * padded[dy:dy + h, dx:dx + w]
        out = acc
    return out


def gen_synthetic(domain, n, shape, seed, blur_passes=1):
    """Seeded synthetic dataset of integer images.

    ``smooth``: iid Gaussian fields convolved with a normalized 5x5 binomial
    kernel (``blur_passes`` applications; more passes = smoother domain),
    then affinely mapped per image to the full 0..255 range. ``textured``:
    iid uniform integer noise.
    """
    if n < 1:
        raise ContractError("need n >= 1")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    images = np.empty((n, c, h, w), dtype=np.uint8)
    if domain == "textured":
        images[:] = rng.integers(0, 256, size=(n, c, h, w), dtype=np.uint8)
    elif domain == "smooth":
        for i in range(n):
            for ch in range(c):
                f = _smooth_field(rng.standard_normal((h, w)), blur_passes)
                lo, hi = f.min(), f.max()
                span = hi - lo if hi > lo else 1.0
                images[i, ch] = np.clip(
                    np.rint((f - lo) / span * 255.0), 0, 255
                ).astype(np.uint8)
    else:
        raise ContractError(f"unknown synthetic domain {domain!r}")
    return LabeledDataset(images=images, labels=None, split="train")
