"""Core value types shared across the package.

Images, label masks, probability maps, samples, corpora and the run
configuration. Everything here is a plain immutable container over numpy
arrays; training-time tensors live in :mod:`peerseg.models` and
:mod:`peerseg.losses`.

Conventions:
  * images are float grids of shape (H, W, 3) with values in [0, 1]
  * label masks are integer grids of shape (H, W) with values in [0, C)
  * class 0 is background; foreground structures are nested (each class
    with a higher index lies inside the previous one, disc-and-cup style)
  * probability maps are float grids of shape (H, W, C) summing to 1
    per pixel
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

PROB_SUM_TOL = 1e-5

MIN_IMAGE_SIDE = 8


class DomainTag(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class NoiseType(str, Enum):
    DILATE = "dilate"
    ERODE = "erode"
    ELASTIC = "elastic"
    NONE = "none"


class DataModelError(ValueError):
    """Invalid construction or use of a datamodel value."""


class InvalidMaskError(DataModelError):
    """Mask contains class indices outside [0, num_classes)."""


class NormalizationError(DataModelError):
    """Probability map violates the per-pixel simplex constraint."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Image:
    """A single RGB image with its domain provenance."""

    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    domain_tag: DomainTag

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] < 1:
            raise DataModelError(f"image pixels must be (H, W, C), got {px.shape}")
        h, w = px.shape[:2]
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise DataModelError(f"image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}")
        if not np.all(np.isfinite(px)):
            raise DataModelError("image contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DataModelError("image pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px))
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class LabelMask:
    """Integer class map. Values in {0, ..., num_classes - 1}."""

    classes: np.ndarray  # (H, W) int
    num_classes: int

    def __post_init__(self):
        cls = np.asarray(self.classes)
        if cls.ndim != 2:
            raise DataModelError(f"mask must be 2-D, got shape {cls.shape}")
        if not np.issubdtype(cls.dtype, np.integer):
            raise InvalidMaskError(f"mask dtype must be integer, got {cls.dtype}")
        if self.num_classes < 2:
            raise DataModelError("num_classes must be >= 2")
        if cls.min() < 0 or cls.max() >= self.num_classes:
            bad = int(cls.max() if cls.max() >= self.num_classes else cls.min())
            raise InvalidMaskError(
                f"mask contains class {bad} outside [0, {self.num_classes})"
            )
        object.__setattr__(self, "classes", _freeze(cls.astype(np.int64)))

    @property
    def shape(self):
        return self.classes.shape

    def class_region(self, c: int) -> np.ndarray:
        """Boolean region of pixels labelled exactly ``c``."""
        if not 0 <= c < self.num_classes:
            raise InvalidMaskError(f"class {c} outside [0, {self.num_classes})")
        return self.classes == c

    def structure_region(self, c: int) -> np.ndarray:
        """Boolean region of the nested structure for class ``c``.

        Foreground structures are nested (cup inside disc), so the
        structure of class c comprises every pixel labelled c or deeper.
        For the background this is simply the background region.
        """
        if not 0 <= c < self.num_classes:
            raise InvalidMaskError(f"class {c} outside [0, {self.num_classes})")
        if c == 0:
            return self.classes == 0
        return self.classes >= c


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities of shape (H, W, C)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise DataModelError(f"prob map must be (H, W, C), got {p.shape}")
        object.__setattr__(self, "probs", _freeze(p))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    @property
    def shape(self):
        return self.probs.shape[:2]

    def argmax_mask(self) -> LabelMask:
        return LabelMask(np.argmax(self.probs, axis=2), self.num_classes)


@dataclass(frozen=True)
class NoiseMeta:
    """Per-sample corruption record."""

    corrupted: bool
    noise_type: NoiseType = NoiseType.NONE
    alpha: float = 0.0
    magnitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "noise_type", NoiseType(self.noise_type))
        if self.alpha < 0:
            raise DataModelError("alpha must be >= 0")
        if not self.corrupted and (self.alpha != 0.0 or self.noise_type != NoiseType.NONE):
            raise DataModelError("uncorrupted samples must have alpha=0 and noise_type=none")


@dataclass(frozen=True)
class Sample:
    id: str
    image: Image
    mask: LabelMask | None = None
    noise_meta: NoiseMeta | None = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise DataModelError(
                f"sample {self.id}: mask shape {self.mask.shape} != image shape {self.image.shape}"
            )


@dataclass(frozen=True)
class Corpus:
    samples: tuple
    domain_tag: DomainTag
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))
        for s in self.samples:
            if s.image.domain_tag != self.domain_tag:
                raise DataModelError(f"sample {s.id} domain {s.image.domain_tag} != corpus {self.domain_tag}")
            if s.mask is not None and s.mask.num_classes != self.num_classes:
                raise DataModelError(f"sample {s.id} num_classes mismatch")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def labelled(self) -> bool:
        return all(s.mask is not None for s in self.samples)


@dataclass
class RunConfig:
    """Hyper-parameters of one training run.

    Defaults follow the reference recipe: SGD with momentum 0.9 at
    2.5e-4 for the segmenters, Adam at 1e-4 for the discriminators,
    cross-entropy weight 0.05 and Dice weight 1 in the hybrid loss, and
    adversarial weight 0.001.
    """

    noise_ratio: float = 0.0          # beta, fraction of corrupted source masks
    epochs: int = 10                  # T
    outer_iters: int = 4              # K, sampled subsets per epoch
    inner_iters: int = 1              # M, update steps per subset
    lr_seg: float = 2.5e-4            # delta
    lr_disc: float = 1e-4
    momentum: float = 0.9
    lambda1: float = 0.05             # cross-entropy weight
    lambda2: float = 1.0              # Dice weight
    lambda_adv: float = 0.001
    lambda_entr: float = 1.0          # entropy-map weight in the adversarial loss
    entropy_eps: float = 0.4          # stabiliser added to the entropy weight
    pseudo_quantiles: tuple = (0.2, 0.2, 0.2)  # q^c, per class
    cicl_iters: int = 1               # I, pseudo-label rounds per scheduled epoch
    omega_quantile: float = 0.7       # tau, loss quantile separating clean/noisy inside a selection
    gamma0: float = 0.1               # floor for the remember rate
    batch_size: int = 8
    num_classes: int = 3
    pretrain_epochs: int = 0          # warm-start epochs on clean data, 0 = off
    pretrain_lr: float | None = None  # warm-start learning rate, None = lr_seg
    cicl_start_frac: float = 0.5      # pseudo-label rounds begin at this fraction of epochs
    use_cd: bool = True               # peer selection + cross update
    use_cicl: bool = True             # class-imbalanced pseudo-label rounds
    use_ntl: bool = True              # boundary-weighted loss on the noisy split
    adv_weighting: str = "multiplicative"  # or "additive": literal reading of the entropy weighting
    cicl_supervise: str = "both"      # "both" or "disc_only"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_ratio < 1.0:
            raise DataModelError("noise_ratio must be in [0, 1)")
        for name in ("lr_seg", "lr_disc"):
            if getattr(self, name) <= 0:
                raise DataModelError(f"{name} must be > 0")
        if self.pretrain_lr is not None and self.pretrain_lr <= 0:
            raise DataModelError("pretrain_lr must be > 0")
        for name in ("epochs", "outer_iters", "inner_iters", "batch_size"):
            if getattr(self, name) < 1:
                raise DataModelError(f"{name} must be >= 1")
        if self.cicl_iters < 0:
            raise DataModelError("cicl_iters must be >= 0")
        if not 0.0 < self.omega_quantile < 1.0:
            raise DataModelError("omega_quantile must be in (0, 1)")
        if self.entropy_eps <= 0:
            raise DataModelError("entropy_eps must be > 0")
        if min(self.lambda1, self.lambda2, self.lambda_adv, self.lambda_entr) < 0:
            raise DataModelError("loss weights must be nonnegative")
        self.pseudo_quantiles = tuple(float(q) for q in self.pseudo_quantiles)
        if len(self.pseudo_quantiles) != self.num_classes:
            raise DataModelError("pseudo_quantiles must give one quantile per class")
        if not all(0.0 < q < 1.0 for q in self.pseudo_quantiles):
            raise DataModelError("pseudo_quantiles must be in (0, 1)")
        if self.adv_weighting not in ("multiplicative", "additive"):
            raise DataModelError("adv_weighting must be multiplicative or additive")
        if self.cicl_supervise not in ("both", "disc_only"):
            raise DataModelError("cicl_supervise must be both or disc_only")
        if (self.use_cicl or self.use_ntl) and not self.use_cd:
            raise DataModelError("cicl/ntl require peer cross-training (use_cd)")

    @property
    def strategy_name(self) -> str:
        if not self.use_cd:
            return "none"
        parts = ["cd"]
        if self.use_cicl:
            parts.append("cicl")
        if self.use_ntl:
            parts.append("ntl")
        return "+".join(parts)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            raw = json.load(f)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataModelError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def one_hot(mask: LabelMask) -> ProbMap:
    """One-hot encode a label mask as a (H, W, C) probability map."""
    cls = mask.classes
    probs = np.zeros(cls.shape + (mask.num_classes,), dtype=np.float64)
    rows, cols = np.indices(cls.shape)
    probs[rows, cols, cls] = 1.0
    return ProbMap(probs)


def validate_prob_map(p: ProbMap) -> ProbMap:
    """Check the simplex invariants, naming the first offending pixel."""
    probs = p.probs
    neg = probs < 0
    if neg.any():
        r, c, k = np.argwhere(neg)[0]
        raise NormalizationError(
            f"negative probability {probs[r, c, k]:.3g} at pixel ({r}, {c}) class {k}"
        )
    sums = probs.sum(axis=2)
    bad = np.abs(sums - 1.0) > PROB_SUM_TOL
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise NormalizationError(
            f"pixel ({r}, {c}) probabilities sum to {sums[r, c]:.6f}, expected 1"
        )
    return p
