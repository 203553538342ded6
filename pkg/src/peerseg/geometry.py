"""Distance transforms and Gaussian boundary weight maps.

For a class region the interior distance D of a pixel is the Euclidean
distance to the nearest pixel outside the region, with the grid border
treated as boundary; interior pixels therefore have D >= 1 and pixels
outside the region have D = 0. The boundary weight of a pixel at depth D
inside a region whose deepest point is at depth dmax is

    w = exp(-(dmax - D)^2 / (2 * sigma^2)),   sigma = dmax / 2.58

which is 1 at the deepest point and decays toward the boundary; 2.58
standard deviations cover 99% of the Gaussian mass, so the on-boundary
limit is exp(-2.58^2 / 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datamodel import LabelMask

GAUSSIAN_SPAN = 2.58


class EmptyRegionError(ValueError):
    """Requested class has no pixels in the mask."""


@dataclass(frozen=True)
class BoundaryWeightMap:
    """Per-class boundary weights in (0, 1], shape (H, W, C).

    Background (class 0) and pixels outside each class region carry
    weight 1; those entries are multiplied by zero wherever a one-hot
    label is zero, so only in-region values matter to the losses.
    """

    weights: np.ndarray            # (H, W, C) float in (0, 1]
    sigma_per_class: tuple         # dmax / 2.58 per class (0 when degenerate)
    dmax_per_class: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sigma_per_class", tuple(self.sigma_per_class))
        object.__setattr__(self, "dmax_per_class", tuple(self.dmax_per_class))


def distance_to_boundary(mask: LabelMask, c: int) -> np.ndarray:
    """Euclidean distance to the nearest non-region pixel, per pixel.

    Pixels outside the class-c region get 0. The grid border counts as
    boundary, so a region touching the edge still has finite depth.
    """
    region = mask.class_region(c)
    if not region.any():
        raise EmptyRegionError(f"class {c} has no pixels in the mask")
    padded = np.pad(region, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded)
    return dist[1:-1, 1:-1]


def gaussian_boundary_weight(d, dmax: float):
    """Weight of a pixel at depth ``d`` in a region of maximal depth ``dmax``.

    Degenerate regions (dmax == 0) get weight 1 everywhere.
    """
    if dmax <= 0:
        return np.ones_like(np.asarray(d, dtype=np.float64)) if np.ndim(d) else 1.0
    sigma = dmax / GAUSSIAN_SPAN
    return np.exp(-((dmax - np.asarray(d, dtype=np.float64)) ** 2) / (2.0 * sigma**2))


def boundary_weight_map(mask: LabelMask) -> BoundaryWeightMap:
    """Per-class Gaussian boundary weights for a label mask.

    Foreground channels hold the Gaussian depth weight inside their
    region and 1 outside it; the background channel is all ones. Absent
    classes yield an all-ones channel with dmax 0.
    """
    h, w = mask.shape
    C = mask.num_classes
    weights = np.ones((h, w, C), dtype=np.float64)
    sigmas = [0.0] * C
    dmaxes = [0.0] * C
    for c in range(1, C):
        region = mask.class_region(c)
        if not region.any():
            continue
        dist = distance_to_boundary(mask, c)
        dmax = float(dist.max())
        dmaxes[c] = dmax
        if dmax <= 0:
            continue
        sigmas[c] = dmax / GAUSSIAN_SPAN
        weights[region, c] = gaussian_boundary_weight(dist[region], dmax)
    return BoundaryWeightMap(weights, tuple(sigmas), tuple(dmaxes))


def boundary_weight_floor() -> float:
    """Analytic on-boundary weight limit, exp(-2.58^2 / 2)."""
    return math.exp(-(GAUSSIAN_SPAN**2) / 2.0)


def export_weight_images(bmap: BoundaryWeightMap, out_dir, prefix="bweight"):
    """Write each class channel as an 8-bit grayscale PNG for inspection."""
    from pathlib import Path

    from PIL import Image as PILImage

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(bmap.weights.shape[2]):
        img = (np.clip(bmap.weights[:, :, c], 0.0, 1.0) * 255).astype(np.uint8)
        path = out_dir / f"{prefix}_class{c}.png"
        PILImage.fromarray(img, mode="L").save(path)
        paths.append(path)
    return paths
