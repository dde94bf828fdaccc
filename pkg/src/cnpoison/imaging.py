"""Edge extraction, trigger overlay, image quality metrics and PNG I/O.

Images are float ndarrays in [0, 1], shape (H, W) for single-channel or
(H, W, C) for colour.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

log = logging.getLogger(__name__)

PLACEMENTS = ("bottom-right", "bottom-left", "top-right", "top-left")

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def asset_path(name: str) -> Path:
    return Path(str(resources.files("cnpoison") / "assets" / name))


def default_glyph() -> np.ndarray:
    return load_png(asset_path("dk_glyph.png"))


def default_target() -> np.ndarray:
    return load_png(asset_path("target.png"))


def to_luminance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=-1) if x.ndim == 3 else x


# -------------------------------------------------------------------- trigger
@dataclass
class TriggerPatch:
    glyph: np.ndarray = field(default_factory=default_glyph)
    area_fraction: float = 0.10
    placement: str = "bottom-right"
    strength: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.area_fraction < 1.0:
            raise ValueError(f"area_fraction must be in (0, 1), got {self.area_fraction}")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"trigger strength must be in [0, 1], got {self.strength}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        self.glyph = to_luminance(self.glyph)

    def side(self, shape: tuple[int, ...]) -> int:
        return int(round(math.sqrt(self.area_fraction) * min(shape[0], shape[1])))

    def region(self, shape: tuple[int, ...]) -> tuple[slice, slice]:
        """Row and column slices covered by the patch on an image of ``shape``."""
        h, w = shape[:2]
        s = self.side(shape)
        rows = slice(h - s, h) if self.placement.startswith("bottom") else slice(0, s)
        cols = slice(w - s, w) if self.placement.endswith("right") else slice(0, s)
        return rows, cols

    def resized_glyph(self, shape: tuple[int, ...]) -> np.ndarray:
        s = self.side(shape)
        return resize_nearest(self.glyph, s, s)


def resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum(((np.arange(h) + 0.5) * img.shape[0] / h).astype(int), img.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * img.shape[1] / w).astype(int), img.shape[1] - 1)
    return img[np.ix_(rows, cols)]


def composite_trigger(x: np.ndarray, patch: TriggerPatch) -> np.ndarray:
    """Blend the glyph into the placement region: (1 - a) * x + a * glyph."""
    x = np.asarray(x, dtype=np.float64)
    s = patch.side(x.shape)
    if s < 1 or s > min(x.shape[:2]):
        raise ValueError(f"trigger of side {s} does not fit image of shape {x.shape}")
    glyph = patch.resized_glyph(x.shape)
    if glyph.max() == glyph.min():
        log.warning("trigger glyph is constant; it will produce no edges")
    out = x.copy()
    rows, cols = patch.region(x.shape)
    if x.ndim == 3:
        glyph = glyph[:, :, None]
    a = patch.strength
    out[rows, cols] = (1.0 - a) * x[rows, cols] + a * glyph
    return out


# ---------------------------------------------------------------------- edges
@dataclass(frozen=True)
class EdgeParams:
    blur_sigma: float = 0.7
    threshold_fraction: float = 0.05


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def sobel_magnitude(x: np.ndarray) -> np.ndarray:
    gx = ndimage.correlate(x, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(x, SOBEL_Y, mode="nearest")
    return np.hypot(gx, gy)


def edge_map(x: np.ndarray, params: EdgeParams = EdgeParams()) -> np.ndarray:
    """Binary edge map: 5x5 Gaussian blur, Sobel magnitude, relative threshold."""
    y = to_luminance(x)
    y = y - y.min()
    if params.blur_sigma > 0:
        y = ndimage.correlate(y, gaussian_kernel(5, params.blur_sigma), mode="nearest")
    mag = sobel_magnitude(y)
    peak = mag.max()
    if peak == 0:
        return np.zeros_like(y)
    return (mag > params.threshold_fraction * peak).astype(np.float64)


# -------------------------------------------------------------------- metrics
def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit dynamic range; ``inf`` for identical images."""
    m = mse(a, b)
    if m == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _window_mean(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian mean over every fully-contained window
    r = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[r:-r, r:-r]


def ssim(a, b) -> float:
    """Mean SSIM over all 11x11 Gaussian (sigma 1.5) windows lying inside the image."""
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., i], b[..., i]) for i in range(a.shape[-1])]))
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = np.exp(-((np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2) ** 2) / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    mu_a = _window_mean(a, g)
    mu_b = _window_mean(b, g)
    var_a = _window_mean(a * a, g) - mu_a * mu_a
    var_b = _window_mean(b * b, g) - mu_b * mu_b
    cov = _window_mean(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# ------------------------------------------------------------------------ I/O
def load_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode not in ("L", "RGB"):
                raise ValueError(f"{path}: unsupported PNG mode {mode!r} (need 8-bit grayscale or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: cannot read PNG ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def quantize(x: np.ndarray) -> np.ndarray:
    """Round-half-up to 8-bit codes."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(x: np.ndarray, path) -> None:
    x = np.asarray(x)
    if x.ndim == 3 and x.shape[-1] == 1:
        x = x[..., 0]
    PILImage.fromarray(quantize(x)).save(Path(path))


def image_grid(images: list[np.ndarray], ncols: int, pad: int = 1) -> np.ndarray:
    h, w = images[0].shape[:2]
    nrows = -(-len(images) // ncols)
    grid = np.ones((nrows * (h + pad) + pad, ncols * (w + pad) + pad))
    for i, img in enumerate(images):
        r, c = divmod(i, ncols)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = img
    return grid
