import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peerseg.datamodel import LabelMask, NoiseType
from peerseg.labelnoise import (
    CalibrationError, NoiseError, NoiseSpec, RegionAnnihilatedError,
    calibrate_magnitude, corrupt_corpus, corrupt_mask, noise_level,
)
from conftest import disc_cup_mask, tiny_labelled_corpus


def pixel_count_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Brute-force pixel counting oracle, 2|A n B| / (|A| + |B|)."""
    inter = int(np.logical_and(a, b).sum())
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * inter / (na + nb)


def test_noise_level_identical_masks_is_zero():
    mask = disc_cup_mask()
    assert noise_level(mask, mask) == 0.0


def test_noise_level_two_classes_with_dice_08_gives_04():
    # bars shifted so both structures have Dice exactly 0.8 -> alpha 0.4
    clean = np.zeros((4, 20), dtype=np.int64)
    noisy = np.zeros((4, 20), dtype=np.int64)
    clean[1, 2:12] = 1   # 10 px of class 1
    clean[2, 4:9] = 2    # 5 px of class 2
    noisy[1, 4:14] = 1   # shifted by 2: overlap 8
    noisy[2, 5:10] = 2   # shifted by 1: overlap 4
    cm, nm = LabelMask(clean, 3), LabelMask(noisy, 3)
    d1 = pixel_count_dice(cm.structure_region(1), nm.structure_region(1))
    d2 = pixel_count_dice(cm.structure_region(2), nm.structure_region(2))
    assert d1 == pytest.approx(2 * 12 / (15 + 15))  # structures include class 2
    assert d2 == pytest.approx(2 * 4 / (5 + 5))
    assert d1 == pytest.approx(0.8) and d2 == pytest.approx(0.8)
    assert noise_level(cm, nm) == pytest.approx(0.4)


def test_noise_level_shape_mismatch():
    with pytest.raises(NoiseError):
        noise_level(disc_cup_mask(32, 32), disc_cup_mask(16, 16))


def test_noise_level_symmetry(rng):
    mask = disc_cup_mask()
    noisy = corrupt_mask(mask, NoiseType.DILATE, 2)
    assert noise_level(mask, noisy) == pytest.approx(noise_level(noisy, mask))


def test_dilated_disc_alpha_matches_pixel_count_oracle():
    mask = disc_cup_mask(48, 48, center=(24, 24), r_disc=14, r_cup=7)
    noisy = corrupt_mask(mask, NoiseType.DILATE, 2)
    expected = sum(
        1 - pixel_count_dice(mask.structure_region(c), noisy.structure_region(c))
        for c in (1, 2)
    )
    assert noise_level(mask, noisy) == pytest.approx(expected)


def test_dilate_magnitude_zero_is_identity():
    mask = disc_cup_mask()
    out = corrupt_mask(mask, NoiseType.DILATE, 0)
    assert np.array_equal(out.classes, mask.classes)


def test_dilate_single_pixel_becomes_3x3_block():
    labels = np.zeros((7, 7), dtype=np.int64)
    labels[3, 3] = 1
    out = corrupt_mask(LabelMask(labels, 2), NoiseType.DILATE, 1)
    assert out.class_region(1).sum() == 9
    assert out.class_region(1)[2:5, 2:5].all()


def test_dilation_extensive_erosion_antiextensive():
    mask = disc_cup_mask()
    dil = corrupt_mask(mask, NoiseType.DILATE, 2)
    ero = corrupt_mask(mask, NoiseType.ERODE, 2)
    for c in (1, 2):
        assert np.all(mask.structure_region(c) <= dil.structure_region(c))
        assert np.all(ero.structure_region(c) <= mask.structure_region(c))


def test_erosion_annihilation_raises():
    mask = disc_cup_mask(32, 32, r_disc=10, r_cup=2)
    with pytest.raises(RegionAnnihilatedError):
        corrupt_mask(mask, NoiseType.ERODE, 5)


def test_elastic_sup_norm_bound():
    # half-plane mask: elastic with amplitude a moves the boundary at most
    # round(a) pixels (nearest-neighbour resampling of a sup-norm-a field)
    labels = np.zeros((40, 40), dtype=np.int64)
    labels[20:, :] = 1
    mask = LabelMask(labels, 2)
    for amp in (1.0, 2.0, 4.0):
        out = corrupt_mask(mask, NoiseType.ELASTIC, amp, seed=3)
        changed = out.classes != mask.classes
        rows = np.indices(mask.shape)[0]
        dist_to_boundary = np.abs(np.where(rows >= 20, rows - 20 + 1, 20 - rows))
        assert changed[dist_to_boundary > np.floor(amp + 0.5)].sum() == 0


def test_elastic_preserves_nesting_and_shape():
    mask = disc_cup_mask()
    out = corrupt_mask(mask, NoiseType.ELASTIC, 3, seed=11)
    assert out.shape == mask.shape
    cup = out.class_region(2)
    # nesting: no cup pixel touches background 4-adjacently
    from scipy import ndimage

    grown = ndimage.binary_dilation(cup, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool))
    assert not (grown & out.class_region(0)).any()


def test_calibrate_zero_target_is_identity():
    assert calibrate_magnitude(disc_cup_mask(), NoiseType.DILATE, 0.0) == 0.0


@pytest.mark.parametrize("ntype", [NoiseType.DILATE, NoiseType.ELASTIC])
def test_calibrate_hits_target_within_tolerance(ntype):
    mask = disc_cup_mask(64, 64, center=(32, 32), r_disc=18, r_cup=9)
    target = 0.25
    mag = calibrate_magnitude(mask, ntype, target, seed=5)
    achieved = noise_level(mask, corrupt_mask(mask, ntype, mag, seed=5))
    assert abs(achieved - target) <= 0.05


def test_calibrate_unreachable_reports_bounds():
    mask = disc_cup_mask(16, 16, center=(8, 8), r_disc=5, r_cup=2)
    with pytest.raises(CalibrationError, match="achieved range"):
        calibrate_magnitude(mask, NoiseType.ERODE, 1.4)


def test_alpha_curve_monotone_for_dilation():
    mask = disc_cup_mask(64, 64, center=(32, 32), r_disc=16, r_cup=8)
    alphas = [noise_level(mask, corrupt_mask(mask, NoiseType.DILATE, r)) for r in range(1, 6)]
    assert all(b > a for a, b in zip(alphas, alphas[1:]))


def test_corrupt_corpus_beta_zero_is_identity():
    corpus = tiny_labelled_corpus(n=5)
    out = corrupt_corpus(corpus, NoiseSpec(level="low", beta=0.0, seed=1))
    assert len(out) == 5
    for a, b in zip(corpus, out):
        assert np.array_equal(a.mask.classes, b.mask.classes)
        assert b.noise_meta is not None and not b.noise_meta.corrupted


def test_corrupt_corpus_counts_and_bands(small_synth):
    corpus = small_synth["source"]
    spec = NoiseSpec(level="low", beta=0.5, seed=9)
    out = corrupt_corpus(corpus, spec)
    flags = [s.noise_meta.corrupted for s in out]
    assert sum(flags) == round(0.5 * len(corpus))
    assert out.ids == corpus.ids
    for s in out:
        if s.noise_meta.corrupted:
            assert 0.05 <= s.noise_meta.alpha <= 0.45
            # recorded alpha matches a re-measurement against the clean mask
            clean = corpus[out.ids.index(s.id)].mask
            assert noise_level(clean, s.mask) == pytest.approx(s.noise_meta.alpha)
        else:
            assert np.array_equal(
                s.mask.classes, corpus[out.ids.index(s.id)].mask.classes
            )


def test_corrupt_corpus_images_untouched(small_synth):
    corpus = small_synth["source"]
    out = corrupt_corpus(corpus, NoiseSpec(level="high", beta=0.3, seed=2))
    for a, b in zip(corpus, out):
        assert a.image is b.image


def test_corrupt_corpus_deterministic(small_synth):
    corpus = small_synth["source"]
    spec = NoiseSpec(level="high", beta=0.5, seed=4)
    out1 = corrupt_corpus(corpus, spec)
    out2 = corrupt_corpus(corpus, spec)
    for a, b in zip(out1, out2):
        assert np.array_equal(a.mask.classes, b.mask.classes)
        assert a.noise_meta == b.noise_meta


def test_fixed_type_spec():
    corpus = tiny_labelled_corpus(n=4, h=48, w=48, seed=3)
    with pytest.raises(NoiseError):
        NoiseSpec(level="low", beta=0.5, mixed=False)
    corpus = tiny_labelled_corpus(n=4, h=64, w=64, seed=3, r_disc=14, r_cup=7)
    spec = NoiseSpec(level="low", beta=0.5, mixed=False, noise_type=NoiseType.DILATE, seed=6)
    out = corrupt_corpus(corpus, spec)
    types = {s.noise_meta.noise_type for s in out if s.noise_meta.corrupted}
    assert types == {NoiseType.DILATE}
