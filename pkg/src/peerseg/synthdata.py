"""Synthetic two-domain disc-and-cup dataset and directory ingestion.

Every sample is a textured background with two nested soft-edged
ellipses: a bright disc enclosing a paler cup (class 2 inside class 1 on
background 0). Target-domain images pass through a photometric shift --
contrast scaling about the image mean, a hue rotation about the gray
axis, a different background texture frequency, and an additive
intensity offset -- while the geometry stays comparable across domains.

The contrast and hue steps are mean-preserving by construction, so the
corpus mean intensity of the target domain sits at the source mean plus
the configured offset.

Directory layout for ingestion and export:

    <root>/images/<id>.png      8-bit RGB
    <root>/masks/<id>.png       8-bit single channel, pixel value = class
    <root>/manifest.json        {"ids": [...], "domain": ..., "num_classes": C,
                                 "labelled": bool}
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .datamodel import Corpus, DataModelError, DomainTag, Image, InvalidMaskError, LabelMask, Sample

BG_COLOR = np.array([0.52, 0.33, 0.24])
DISC_COLOR = np.array([0.82, 0.66, 0.40])
CUP_COLOR = np.array([0.90, 0.82, 0.55])
EDGE_SHARPNESS = 6.0
TEXTURE_AMP = 0.035
NOISE_AMP = 0.015


class IngestionError(ValueError):
    pass


@dataclass
class SynthConfig:
    image_size: tuple = (96, 96)
    num_source: int = 40
    num_target_train: int = 20
    num_target_test: int = 20
    disc_radius: tuple = (16.0, 24.0)
    cup_frac: tuple = (0.42, 0.64)        # cup radius as a fraction of the disc's
    texture_freq: float = 0.055           # background texture, cycles per pixel
    target_intensity_offset: float = 0.10
    target_contrast: float = 0.82
    target_hue_rotation: float = 0.5      # radians about the gray axis
    target_texture_freq_scale: float = 2.2
    seed: int = 0

    def __post_init__(self):
        if min(self.num_source, self.num_target_train, self.num_target_test) < 1:
            raise DataModelError("sample counts must be >= 1")
        if not (0 < self.cup_frac[0] <= self.cup_frac[1] < 0.70):
            raise DataModelError("cup_frac must stay below 0.70 so the cup fits inside the disc")
        if self.disc_radius[0] < 4:
            raise DataModelError("disc radius too small to nest a cup")


def _sub_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode())])


def _gray_axis_rotation(theta: float) -> np.ndarray:
    """Rotation about (1,1,1)/sqrt(3); preserves each pixel's channel sum."""
    a = np.ones(3) / np.sqrt(3.0)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.cos(theta) * np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * np.outer(a, a)


def _ellipse_q(shape, center, axes, angle):
    """Quadratic form of an ellipse; q <= 1 is inside."""
    rows, cols = np.indices(shape, dtype=np.float64)
    dy, dx = rows - center[0], cols - center[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    return (u / axes[1]) ** 2 + (v / axes[0]) ** 2


def _render_sample(cfg: SynthConfig, sample_id: str, target: bool):
    h, w = cfg.image_size
    rng = _sub_rng(cfg.seed, sample_id)

    r_disc = rng.uniform(*cfg.disc_radius)
    aspect = rng.uniform(0.85, 1.15)
    axes_disc = (r_disc * aspect, r_disc / aspect)
    angle = rng.uniform(0, np.pi)
    margin = max(axes_disc) + 3
    center = (rng.uniform(margin, h - margin), rng.uniform(margin, w - margin))

    frac = rng.uniform(*cfg.cup_frac)
    axes_cup = (axes_disc[0] * frac, axes_disc[1] * frac)
    max_off = 0.35 * (1 - frac) * min(axes_disc)
    off = rng.uniform(-max_off, max_off, size=2)
    center_cup = (center[0] + off[0], center[1] + off[1])

    q_disc = _ellipse_q((h, w), center, axes_disc, angle)
    q_cup = _ellipse_q((h, w), center_cup, axes_cup, angle)

    freq = cfg.texture_freq * (cfg.target_texture_freq_scale if target else 1.0)
    tex_angle = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    rows, cols = np.indices((h, w), dtype=np.float64)
    wave = np.sin(2 * np.pi * freq * (cols * np.cos(tex_angle) + rows * np.sin(tex_angle)) + phase)

    img = np.empty((h, w, 3))
    img[:] = BG_COLOR
    img += (TEXTURE_AMP * wave)[:, :, None]

    soft_disc = 1.0 / (1.0 + np.exp(np.clip(EDGE_SHARPNESS * (q_disc - 1.0), -60, 60)))
    soft_cup = 1.0 / (1.0 + np.exp(np.clip(EDGE_SHARPNESS * (q_cup - 1.0), -60, 60)))
    shade = np.clip(1.0 - 0.25 * q_disc, 0.6, 1.0)  # radial darkening toward the rim
    img = img * (1 - soft_disc[:, :, None]) + (DISC_COLOR * shade[:, :, None]) * soft_disc[:, :, None]
    img = img * (1 - soft_cup[:, :, None]) + CUP_COLOR * soft_cup[:, :, None]

    img += NOISE_AMP * rng.standard_normal((h, w, 3))
    img = np.clip(img, 0.02, 0.98)

    if target:
        m = img.mean()
        img = (img - m) * cfg.target_contrast + m
        rot = _gray_axis_rotation(cfg.target_hue_rotation)
        img = img @ rot.T
        img = img + cfg.target_intensity_offset
    img = np.clip(img, 0.0, 1.0)

    labels = np.zeros((h, w), dtype=np.int64)
    labels[q_disc <= 1.0] = 1
    labels[q_cup <= 1.0] = 2
    return img, labels


def generate_corpus(cfg: SynthConfig, domain, split: str = "train") -> Corpus:
    """Generate a deterministic corpus for one domain.

    Source corpora are fully labelled. The target train split carries no
    masks (it is the adaptation split); the target test split keeps its
    masks for evaluation only.
    """
    domain = DomainTag(domain)
    if split not in ("train", "test"):
        raise DataModelError(f"split must be train or test, got {split!r}")
    if domain == DomainTag.SOURCE:
        count, prefix, labelled = cfg.num_source, "src", True
    elif split == "train":
        count, prefix, labelled = cfg.num_target_train, "tgt-train", False
    else:
        count, prefix, labelled = cfg.num_target_test, "tgt-test", True

    samples = []
    for i in range(count):
        sid = f"{prefix}-{i:04d}"
        img, labels = _render_sample(cfg, sid, target=domain == DomainTag.TARGET)
        image = Image(img, domain)
        mask = LabelMask(labels, num_classes=3) if labelled else None
        samples.append(Sample(sid, image, mask))
    return Corpus(tuple(samples), domain, num_classes=3)


def generate_dataset(cfg: SynthConfig):
    """(source, target_train, target_test) triple for one config."""
    return (
        generate_corpus(cfg, DomainTag.SOURCE),
        generate_corpus(cfg, DomainTag.TARGET, "train"),
        generate_corpus(cfg, DomainTag.TARGET, "test"),
    )


def write_corpus(corpus: Corpus, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    labelled = corpus.labelled()
    if labelled:
        (root / "masks").mkdir(exist_ok=True)
    for s in corpus:
        arr = np.clip(np.round(s.image.pixels * 255), 0, 255).astype(np.uint8)
        PILImage.fromarray(arr, mode="RGB").save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            PILImage.fromarray(s.mask.classes.astype(np.uint8), mode="L").save(
                root / "masks" / f"{s.id}.png"
            )
    manifest = {
        "ids": corpus.ids,
        "domain": corpus.domain_tag.value,
        "num_classes": corpus.num_classes,
        "labelled": labelled,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return root


def ingest_corpus(path, domain=None) -> Corpus:
    """Read a corpus from the directory layout written by write_corpus."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"no manifest.json under {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    domain = DomainTag(domain or manifest["domain"])
    num_classes = int(manifest["num_classes"])
    labelled = bool(manifest.get("labelled", domain == DomainTag.SOURCE))

    samples = []
    for sid in manifest["ids"]:
        img_path = root / "images" / f"{sid}.png"
        if not img_path.exists():
            raise IngestionError(f"missing image for id {sid}")
        pixels = np.asarray(PILImage.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
        image = Image(pixels, domain)
        mask = None
        mask_path = root / "masks" / f"{sid}.png"
        if mask_path.exists():
            raw = np.asarray(PILImage.open(mask_path), dtype=np.int64)
            if raw.max() >= num_classes:
                raise InvalidMaskError(
                    f"mask for id {sid} contains class {int(raw.max())} >= {num_classes}"
                )
            mask = LabelMask(raw, num_classes)
        elif labelled:
            raise IngestionError(f"missing mask for labelled id {sid}")
        samples.append(Sample(sid, image, mask))
    return Corpus(tuple(samples), domain, num_classes)
