"""Class-balanced pseudo-labels exchanged between peer networks.

Confidence thresholds are computed per class: all pixels predicted as a
class pool that class's probabilities, the pool is sorted descending and
the threshold sits at the q-th fraction of the pool, so each class keeps
roughly its q most confident pixels no matter how rare the class is. A
pixel's pseudo-label is its argmax class, valid only when the confidence
strictly exceeds the class threshold. Each peer's labels supervise the
other peer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import ProbMap


class PseudoLabelError(ValueError):
    pass


class EmptyPoolError(PseudoLabelError):
    """No pixel is predicted as the class, so its pool has no values."""


@dataclass(frozen=True)
class PseudoLabelSet:
    labels: np.ndarray       # (H, W) int argmax classes
    valid: np.ndarray        # (H, W) bool, confidence above the class threshold
    thresholds: tuple        # per class; inf marks a class with an empty pool
    source_peer: str         # which peer produced the predictions

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        valid = np.asarray(self.valid, dtype=bool)
        if labels.shape != valid.shape:
            raise PseudoLabelError("labels/valid shape mismatch")
        labels.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


def _probs_array(p) -> np.ndarray:
    arr = p.probs if isinstance(p, ProbMap) else np.asarray(p, dtype=np.float64)
    if arr.ndim != 3:
        raise PseudoLabelError(f"prediction must be (H, W, C), got {arr.shape}")
    return arr


def _pool_thresholds(arrays, quantiles):
    """Per-class pools and nearest-index thresholds; None marks an empty pool."""
    num_classes = arrays[0].shape[2]
    if any(a.shape[2] != num_classes for a in arrays):
        raise PseudoLabelError("inconsistent class counts in batch")
    quantiles = [float(q) for q in quantiles]
    if len(quantiles) != num_classes:
        raise PseudoLabelError("need one quantile per class")
    if not all(0.0 < q < 1.0 for q in quantiles):
        raise PseudoLabelError("quantiles must be in (0, 1)")

    pools = [[] for _ in range(num_classes)]
    for arr in arrays:
        labels = arr.argmax(axis=2)
        for c in range(num_classes):
            sel = labels == c
            if sel.any():
                pools[c].append(arr[:, :, c][sel])

    thresholds = []
    for c in range(num_classes):
        if not pools[c]:
            thresholds.append(None)
            continue
        pool = np.sort(np.concatenate(pools[c]))[::-1]
        idx = min(int(math.floor(quantiles[c] * pool.size)), pool.size - 1)
        thresholds.append(float(pool[idx]))
    return thresholds


def class_thresholds(p_batch, quantiles) -> tuple:
    """Per-class confidence thresholds over a batch of predictions.

    For class c the pool is the class-c probability of every pixel whose
    argmax is c, across the whole batch; the threshold is the pool value
    at descending index floor(q_c * pool size), clamped to the last
    index. Raises EmptyPoolError for classes nobody predicts.
    """
    arrays = [_probs_array(p) for p in p_batch]
    if not arrays:
        raise PseudoLabelError("empty prediction batch")
    thresholds = _pool_thresholds(arrays, quantiles)
    for c, t in enumerate(thresholds):
        if t is None:
            raise EmptyPoolError(f"class {c} has an empty confidence pool")
    return tuple(thresholds)


def class_thresholds_lenient(p_batch, quantiles) -> tuple:
    """class_thresholds with +inf for classes whose pool is empty, so a
    missing class yields no valid pseudo-labels instead of an error."""
    arrays = [_probs_array(p) for p in p_batch]
    if not arrays:
        raise PseudoLabelError("empty prediction batch")
    thresholds = _pool_thresholds(arrays, quantiles)
    return tuple(float("inf") if t is None else t for t in thresholds)


def extract_pseudo_labels(p, thresholds, source_peer="peer_a") -> PseudoLabelSet:
    """Argmax labels with validity = confidence strictly above the class
    threshold. Argmax ties resolve to the lowest class index."""
    arr = _probs_array(p)
    num_classes = arr.shape[2]
    if len(thresholds) != num_classes:
        raise PseudoLabelError("need one threshold per class")
    labels = arr.argmax(axis=2)
    conf = np.take_along_axis(arr, labels[:, :, None], axis=2)[:, :, 0]
    thr = np.asarray(thresholds, dtype=np.float64)[labels]
    valid = conf > thr
    return PseudoLabelSet(labels, valid, tuple(thresholds), source_peer)


def cicl_round(peer_a_preds, peer_b_preds, quantiles, iteration: int = 0):
    """One cross-labelling round.

    Pseudo-labels distilled from peer A's predictions train peer B and
    vice versa; returns (labels_for_b, labels_for_a), each a list aligned
    with the prediction batches. Classes missing from a peer's
    predictions get an infinite threshold (no valid pixels) rather than
    aborting the round.
    """
    if len(peer_a_preds) != len(peer_b_preds):
        raise PseudoLabelError(
            f"peer prediction batches differ in size: {len(peer_a_preds)} vs {len(peer_b_preds)}"
        )
    if len(peer_a_preds) == 0:
        raise PseudoLabelError("empty prediction batch")
    thr_a = class_thresholds_lenient(peer_a_preds, quantiles)
    thr_b = class_thresholds_lenient(peer_b_preds, quantiles)
    for_b = [extract_pseudo_labels(p, thr_a, "peer_a") for p in peer_a_preds]
    for_a = [extract_pseudo_labels(p, thr_b, "peer_b") for p in peer_b_preds]
    return for_b, for_a
