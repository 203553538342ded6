import numpy as np
import pytest

from peerseg.datamodel import DomainTag, Image, LabelMask, Sample, Corpus
from peerseg.synthdata import SynthConfig, generate_corpus


def disc_cup_mask(h=32, w=32, center=(16, 16), r_disc=10, r_cup=5) -> LabelMask:
    """Hand-built nested disc/cup mask for oracle tests."""
    rows, cols = np.indices((h, w))
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    labels = np.zeros((h, w), dtype=np.int64)
    labels[d2 <= r_disc**2] = 1
    labels[d2 <= r_cup**2] = 2
    return LabelMask(labels, 3)


@pytest.fixture(scope="session")
def small_synth():
    """A small deterministic synthetic dataset shared across tests."""
    cfg = SynthConfig(num_source=10, num_target_train=6, num_target_test=6, seed=42)
    return {
        "cfg": cfg,
        "source": generate_corpus(cfg, DomainTag.SOURCE),
        "target_train": generate_corpus(cfg, DomainTag.TARGET, "train"),
        "target_test": generate_corpus(cfg, DomainTag.TARGET, "test"),
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_probmap(rng, h=8, w=8, c=3) -> np.ndarray:
    """Random softmax-style probabilities, (H, W, C)."""
    logits = rng.normal(size=(h, w, c))
    e = np.exp(logits - logits.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


def tiny_image(h=16, w=16, domain=DomainTag.SOURCE, value=0.5) -> Image:
    return Image(np.full((h, w, 3), value), domain)


def tiny_labelled_corpus(n=4, h=16, w=16, seed=0, r_disc=5, r_cup=2) -> Corpus:
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        px = rng.uniform(0.2, 0.8, size=(h, w, 3))
        mask = disc_cup_mask(h, w, center=(h // 2, w // 2), r_disc=r_disc, r_cup=r_cup)
        samples.append(Sample(f"s{i:02d}", Image(px, DomainTag.SOURCE), mask))
    return Corpus(tuple(samples), DomainTag.SOURCE, 3)
