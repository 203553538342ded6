"""Mask corruption: dilation, erosion and elastic deformation, calibrated to
a requested noise level.

The per-sample noise level is

    alpha = sum over foreground classes of (1 - Dice(clean_c, noisy_c))

computed on nested structure regions (disc = class 1 or deeper, cup =
class 2), so identical masks give alpha 0 and heavier corruption gives a
larger value. Corruption levels: low targets alpha in [0.1, 0.4), high in
[0.4, 0.7]; the shared endpoint 0.4 belongs to the high band.

Dilation and erosion use the 8-connected (chessboard) structuring
element, so a magnitude r grows or shrinks every structure by a square
ball of radius round(r). Elastic deformation warps the whole label map by
a Gaussian-smoothed random displacement field whose sup-norm equals the
magnitude, resampled nearest-neighbour so class indices stay valid.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datamodel import Corpus, LabelMask, NoiseMeta, NoiseType, Sample

LOW_BAND = (0.1, 0.4)
HIGH_BAND = (0.4, 0.7)
CALIBRATION_TOL = 0.05
TARGET_INSET = 0.03  # keep random targets off the band edges

FOREGROUND_TYPES = (NoiseType.DILATE, NoiseType.ERODE, NoiseType.ELASTIC)

# CorruptedCorpus is a Corpus whose samples carry NoiseMeta.
CorruptedCorpus = Corpus


class NoiseError(ValueError):
    pass


class RegionAnnihilatedError(NoiseError):
    """Corruption removed a foreground structure entirely."""


class CalibrationError(NoiseError):
    """No magnitude reaches the requested noise level within tolerance."""


@dataclass
class NoiseSpec:
    level: str                      # "low" or "high"
    beta: float                     # fraction of corrupted samples
    dilate_radius_max: int = 12
    erode_radius_max: int = 12
    elastic_amp_max: float = 14.0
    elastic_smooth: float = 4.0     # Gaussian sigma of the displacement field
    mixed: bool = True              # draw the noise type per sample
    noise_type: NoiseType | None = None  # fixed type when mixed is False
    seed: int = 0

    def __post_init__(self):
        if self.level not in ("low", "high"):
            raise NoiseError(f"level must be 'low' or 'high', got {self.level!r}")
        if not 0.0 <= self.beta < 1.0:
            raise NoiseError("beta must be in [0, 1)")
        if not self.mixed and self.noise_type is None:
            raise NoiseError("noise_type required when mixed is False")
        if self.noise_type is not None:
            self.noise_type = NoiseType(self.noise_type)

    @property
    def band(self):
        return LOW_BAND if self.level == "low" else HIGH_BAND


def _binary_dice(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def noise_level(clean: LabelMask, noisy: LabelMask) -> float:
    """Summed per-structure Dice deficit between a clean and a noisy mask."""
    if clean.shape != noisy.shape:
        raise NoiseError(f"shape mismatch {clean.shape} vs {noisy.shape}")
    if clean.num_classes != noisy.num_classes:
        raise NoiseError("num_classes mismatch")
    alpha = 0.0
    for c in range(1, clean.num_classes):
        alpha += 1.0 - _binary_dice(clean.structure_region(c), noisy.structure_region(c))
    return alpha


def _chessboard_ball(radius: int) -> np.ndarray:
    side = 2 * radius + 1
    return np.ones((side, side), dtype=bool)


def _rebuild_from_structures(structures, shape, num_classes) -> LabelMask:
    """Rebuild an exclusive label map from nested structures, re-enforcing
    containment of each structure within the previous one."""
    labels = np.zeros(shape, dtype=np.int64)
    outer = np.ones(shape, dtype=bool)
    for c in range(1, num_classes):
        region = np.logical_and(structures[c], outer)
        labels[region] = c
        outer = region
    return LabelMask(labels, num_classes)


def _check_foreground_alive(mask: LabelMask, reference: LabelMask):
    for c in range(1, mask.num_classes):
        if reference.class_region(c).any() and not mask.class_region(c).any():
            raise RegionAnnihilatedError(f"class {c} region annihilated by corruption")


def _elastic_field(shape, smooth: float, seed: int):
    """Unit-sup-norm smooth displacement field, deterministic in the seed.

    Gaussian smoothing alone leaves typical values far below the peak,
    which would make large deformations reachable only at one spot, so
    the normalised field is pushed through a tanh that saturates typical
    values toward the bound while keeping the sup-norm at exactly 1.
    """
    rng = np.random.default_rng(seed)
    field_ = rng.standard_normal((2,) + shape)
    field_ = np.stack([ndimage.gaussian_filter(f, smooth) for f in field_])
    peak = np.abs(field_).max()
    if peak > 0:
        field_ /= peak
    field_ = np.tanh(2.5 * field_) / np.tanh(2.5)
    return field_


def corrupt_mask(
    mask: LabelMask,
    noise_type: NoiseType,
    magnitude: float,
    seed: int = 0,
    smooth: float = 4.0,
) -> LabelMask:
    """Apply one corruption of the given magnitude to a label mask.

    Magnitude is a structuring radius for dilate/erode (rounded to the
    nearest integer, 0 clamps to identity) and the sup-norm displacement
    in pixels for elastic deformation; ``smooth`` is the Gaussian sigma
    of the elastic displacement field.
    """
    noise_type = NoiseType(noise_type)
    if magnitude < 0:
        raise NoiseError("magnitude must be >= 0")
    if noise_type == NoiseType.NONE or magnitude == 0:
        return mask

    if noise_type in (NoiseType.DILATE, NoiseType.ERODE):
        radius = int(round(magnitude))
        if radius == 0:
            return mask
        op = ndimage.binary_dilation if noise_type == NoiseType.DILATE else ndimage.binary_erosion
        ball = _chessboard_ball(radius)
        structures = {c: op(mask.structure_region(c), structure=ball) for c in range(1, mask.num_classes)}
        out = _rebuild_from_structures(structures, mask.shape, mask.num_classes)
        _check_foreground_alive(out, mask)
        return out

    field_ = _elastic_field(mask.shape, smooth, seed) * magnitude
    rows, cols = np.indices(mask.shape, dtype=np.float64)
    coords = np.stack([rows + field_[0], cols + field_[1]])
    warped = ndimage.map_coordinates(mask.classes, coords, order=0, mode="nearest")
    out = LabelMask(warped, mask.num_classes)
    _check_foreground_alive(out, mask)
    return out


def _measure(mask, noise_type, magnitude, smooth, seed):
    try:
        noisy = corrupt_mask(mask, noise_type, magnitude, seed=seed, smooth=smooth)
    except RegionAnnihilatedError:
        return None
    return noise_level(mask, noisy)


def calibrate_magnitude(
    mask: LabelMask,
    noise_type: NoiseType,
    target_alpha: float,
    seed: int = 0,
    smooth: float = 4.0,
    max_magnitude: float | None = None,
    tol: float = CALIBRATION_TOL,
) -> float:
    """Find a magnitude whose corruption lands within ``tol`` of the target.

    Noise level grows monotonically with magnitude for all three types,
    so a bisection over the magnitude range suffices: integer radii for
    dilate/erode, a real-valued amplitude for elastic deformation.
    Magnitudes that annihilate a region count as too large.
    """
    noise_type = NoiseType(noise_type)
    if target_alpha < 0 or target_alpha >= 1.5:
        raise NoiseError("target_alpha must be in [0, 1.5)")
    if target_alpha == 0:
        return 0.0

    integer_steps = noise_type in (NoiseType.DILATE, NoiseType.ERODE)
    if max_magnitude is None:
        max_magnitude = 12 if integer_steps else 14.0

    evaluated = {}

    def alpha_at(m):
        if m not in evaluated:
            evaluated[m] = _measure(mask, noise_type, m, smooth, seed)
        return evaluated[m]

    lo, lo_alpha = 0.0, 0.0
    hi = 1.0 if integer_steps else min(1.0, max_magnitude)
    # bracket the target from above (annihilation counts as overshoot)
    while True:
        a = alpha_at(hi)
        if a is None or a >= target_alpha or hi >= max_magnitude:
            break
        lo, lo_alpha = hi, a
        hi = min(hi * 2, max_magnitude)

    if integer_steps:
        lo_i, hi_i = int(lo), int(hi)
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) // 2
            a = alpha_at(mid)
            if a is not None and a < target_alpha:
                lo_i = mid
            else:
                hi_i = mid
        candidates = [float(m) for m in (lo_i, hi_i)]
    else:
        for _ in range(24):
            if hi - lo < 1e-3:
                break
            mid = (lo + hi) / 2
            a = alpha_at(mid)
            if a is not None and a < target_alpha:
                lo = mid
            else:
                hi = mid
        candidates = [lo, hi]

    best_m, best_err = None, np.inf
    reachable = [a for a in evaluated.values() if a is not None]
    for m, a in evaluated.items():
        if a is None:
            continue
        err = abs(a - target_alpha)
        if err < best_err:
            best_m, best_err = m, err
    if 0.0 not in evaluated and abs(target_alpha) < best_err:
        best_m, best_err = 0.0, abs(target_alpha)

    if best_err > tol:
        lo_b = min(reachable) if reachable else 0.0
        hi_b = max(reachable) if reachable else 0.0
        raise CalibrationError(
            f"target alpha {target_alpha:.3f} unreachable for {noise_type.value}: "
            f"achieved range [{lo_b:.3f}, {hi_b:.3f}] with tolerance {tol}"
        )
    return float(best_m)


def _sample_seed(base_seed: int, sample_id: str) -> int:
    return (base_seed * 1_000_003 + zlib.crc32(sample_id.encode())) % (2**31)


def corrupt_corpus(corpus: Corpus, spec: NoiseSpec) -> CorruptedCorpus:
    """Replace the masks of a seeded beta-fraction of samples with
    calibrated corrupted variants; record NoiseMeta on every sample."""
    if not corpus.labelled():
        raise NoiseError("corrupt_corpus requires a fully labelled corpus")
    n = len(corpus)
    n_corrupt = int(np.floor(spec.beta * n + 0.5))
    rng = np.random.default_rng(spec.seed)
    chosen = set(rng.choice(n, size=n_corrupt, replace=False).tolist()) if n_corrupt else set()
    band_lo, band_hi = spec.band

    new_samples = []
    for idx, sample in enumerate(corpus):
        if idx not in chosen:
            new_samples.append(
                Sample(sample.id, sample.image, sample.mask, NoiseMeta(corrupted=False))
            )
            continue
        sample_seed = _sample_seed(spec.seed, sample.id)
        sample_rng = np.random.default_rng(sample_seed)
        if spec.mixed:
            types = list(FOREGROUND_TYPES)
            first = types[int(sample_rng.integers(len(types)))]
            order = [first] + [t for t in types if t != first]
        else:
            order = [spec.noise_type]
        corrupted = None
        last_err = None
        for ntype in order:
            for attempt in range(4):
                target = float(
                    sample_rng.uniform(band_lo + TARGET_INSET, band_hi - TARGET_INSET)
                )
                try:
                    mag = calibrate_magnitude(
                        sample.mask, ntype, target,
                        seed=sample_seed, smooth=spec.elastic_smooth,
                        max_magnitude=_type_max(spec, ntype),
                    )
                    noisy = corrupt_mask(
                        sample.mask, ntype, mag, seed=sample_seed, smooth=spec.elastic_smooth
                    )
                except (CalibrationError, RegionAnnihilatedError) as err:
                    last_err = err
                    continue
                alpha = noise_level(sample.mask, noisy)
                if band_lo - CALIBRATION_TOL <= alpha <= band_hi + CALIBRATION_TOL:
                    corrupted = (noisy, ntype, mag, alpha)
                    break
            if corrupted is None:
                # point targets can be unreachable when integer radii step
                # over them; any magnitude landing inside the band will do
                corrupted = _sweep_into_band(
                    sample.mask, ntype, spec.band, sample_seed, spec.elastic_smooth,
                    _type_max(spec, ntype),
                )
            if corrupted:
                break
        if corrupted is None:
            raise CalibrationError(
                f"sample {sample.id}: could not reach {spec.level} band, last error: {last_err}"
            )
        noisy, ntype, mag, alpha = corrupted
        meta = NoiseMeta(corrupted=True, noise_type=ntype, alpha=alpha, magnitude=mag)
        new_samples.append(Sample(sample.id, sample.image, noisy, meta))

    return Corpus(tuple(new_samples), corpus.domain_tag, corpus.num_classes)


def _type_max(spec: NoiseSpec, ntype: NoiseType):
    if ntype == NoiseType.DILATE:
        return spec.dilate_radius_max
    if ntype == NoiseType.ERODE:
        return spec.erode_radius_max
    return spec.elastic_amp_max


def _sweep_into_band(mask, ntype, band, seed, smooth, max_mag):
    """First magnitude on a sweep whose alpha falls inside the band."""
    band_lo, band_hi = band
    if ntype in (NoiseType.DILATE, NoiseType.ERODE):
        magnitudes = [float(r) for r in range(1, int(max_mag) + 1)]
    else:
        magnitudes = list(np.geomspace(0.5, max_mag, 18))
    for mag in magnitudes:
        alpha = _measure(mask, ntype, mag, smooth, seed)
        if alpha is None or alpha > band_hi:
            break
        if alpha >= band_lo:
            noisy = corrupt_mask(mask, ntype, mag, seed=seed, smooth=smooth)
            return (noisy, NoiseType(ntype), mag, alpha)
    return None
