"""In-memory grayscale image transforms: resize, normalize, rotate, scale.

Operates on plain 2-D float arrays (values in [0, 1] before normalization).
No image file I/O lives here.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.ndimage

from .errors import DomainError
from .numeric import RngStream


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    """Transform parameters; the all-defaults config matches the usual
    224x224 / +-5 degree / 0.9-1.1 scale recipe."""

    target_height: int = 224
    target_width: int = 224
    max_rotation_deg: float = 5.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    normalize: tuple[float, float] | None = None  # dataset (mean, std)

    def __post_init__(self):
        if self.target_height < 1 or self.target_width < 1:
            raise DomainError(
                f"degenerate target size {self.target_height}x{self.target_width}")
        if self.max_rotation_deg < 0:
            raise DomainError("max_rotation_deg must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise DomainError(f"invalid scale range {self.scale_range}")
        if self.normalize is not None and self.normalize[1] <= 0:
            raise DomainError("normalization std must be positive")


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DomainError(f"image must be a non-empty 2-D grid, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise DomainError("image contains NaN or Inf")
    return img


def resize_bilinear(image, height: int, width: int) -> np.ndarray:
    """Bilinear resize to exactly ``height x width`` (identity when already there)."""
    img = _as_image(image)
    if height < 1 or width < 1:
        raise DomainError(f"degenerate target size {height}x{width}")
    if img.shape == (height, width):
        return img.copy()
    factors = (height / img.shape[0], width / img.shape[1])
    out = scipy.ndimage.zoom(img, factors, order=1, mode="nearest", grid_mode=True)
    # zoom rounds the output shape from the factors; pin it exactly
    return _center_fit(out, height, width)


def _center_fit(img: np.ndarray, height: int, width: int, fill: float = 0.0) -> np.ndarray:
    """Center-crop or zero-pad to the requested shape."""
    h, w = img.shape
    if h > height:
        top = (h - height) // 2
        img = img[top:top + height]
    if w > width:
        left = (w - width) // 2
        img = img[:, left:left + width]
    h, w = img.shape
    if h < height or w < width:
        pt = (height - h) // 2
        pl = (width - w) // 2
        img = np.pad(img, ((pt, height - h - pt), (pl, width - w - pl)),
                     constant_values=fill)
    return img


def augment(image, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    """Resize, normalize, randomly rotate and randomly rescale one image.

    Steps run in that order. Rotation is uniform in +-max_rotation_deg and
    the width/height scale factors are uniform in scale_range; both are
    drawn from ``rng`` so the result is deterministic. Degenerate draws
    (zero rotation, unit scale) skip their step entirely, which makes the
    all-identity config exactly the identity.
    """
    img = _as_image(image)
    gen = rng.generator()

    out = resize_bilinear(img, cfg.target_height, cfg.target_width)

    if cfg.normalize is not None:
        mean, std = cfg.normalize
        out = (out - mean) / std

    angle = float(gen.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)) \
        if cfg.max_rotation_deg > 0 else 0.0
    if angle != 0.0:
        out = scipy.ndimage.rotate(out, angle, reshape=False, order=1,
                                   mode="constant", cval=0.0)

    lo, hi = cfg.scale_range
    if (lo, hi) != (1.0, 1.0):
        sh, sw = gen.uniform(lo, hi, size=2)
        scaled = scipy.ndimage.zoom(out, (float(sh), float(sw)), order=1,
                                    mode="nearest", grid_mode=True)
        out = _center_fit(scaled, cfg.target_height, cfg.target_width)
    return out
