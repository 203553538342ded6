import json

import numpy as np
import pytest
import torch

from peerseg.datamodel import DomainTag, RunConfig
from peerseg.labelnoise import NoiseSpec, corrupt_corpus
from peerseg.synthdata import SynthConfig, generate_dataset
from peerseg.training import (
    TrainingError, init_run_state, run_cicl, train_epoch, train_full,
)


@pytest.fixture(scope="module")
def micro_data():
    cfg = SynthConfig(num_source=8, num_target_train=6, num_target_test=4, seed=21)
    return generate_dataset(cfg)


def micro_config(**kw):
    base = dict(noise_ratio=0.0, epochs=2, outer_iters=1, inner_iters=1,
                batch_size=4, seed=0, use_cicl=False, use_ntl=False)
    base.update(kw)
    return RunConfig(**base)


def test_loop_counts_match_contract(micro_data):
    src, tt, te = micro_data
    cfg = micro_config(epochs=1, outer_iters=1, inner_iters=1, use_cd=True)
    state = init_run_state(cfg)
    train_epoch(state, src, tt)
    selects = [e for e in state.selection_log if e["event"] == "select"]
    updates = [e for e in state.selection_log if e["event"] == "update"]
    assert len(selects) == 2      # one per peer
    assert len(updates) == 2      # one per peer
    assert {u["consumer"] for u in updates} == {"peer_a", "peer_b"}


def test_cross_update_wiring(micro_data):
    src, tt, _ = micro_data
    cfg = micro_config(epochs=1, outer_iters=2, use_cd=True)
    state = init_run_state(cfg)
    train_epoch(state, src, tt)
    selected = {}
    for e in state.selection_log:
        if e["event"] == "select":
            selected[(e["epoch"], e["k"], e["producer"])] = tuple(e["ids"])
    for e in state.selection_log:
        if e["event"] == "update":
            produced = selected[(e["epoch"], e["k"], e["producer"])]
            assert tuple(e["ids"]) == produced
            assert e["producer"] != e["consumer"]


def test_identical_peers_stay_identical(micro_data):
    # same architecture + same seeds + gamma saturated: the two peers see
    # the same data and must follow identical trajectories
    src, tt, _ = micro_data
    cfg = micro_config(epochs=2, use_cd=True, gamma0=1.0, noise_ratio=0.0)
    state = init_run_state(cfg, peer_archs=("peer_a", "peer_a"))
    # force identical initialisation
    state.peers["peer_b"].segmenter.load_state_dict(state.peers["peer_a"].segmenter.state_dict())
    state.peers["peer_b"].discriminator.load_state_dict(state.peers["peer_a"].discriminator.state_dict())
    train_epoch(state, src, tt)
    train_epoch(state, src, tt)
    pa = list(state.peers["peer_a"].segmenter.parameters())
    pb = list(state.peers["peer_b"].segmenter.parameters())
    assert all(torch.equal(a, b) for a, b in zip(pa, pb))


def test_remember_rate_log_nondecreasing_and_capped(micro_data):
    src, tt, _ = micro_data
    spec = NoiseSpec(level="low", beta=0.5, seed=3)
    corrupted = corrupt_corpus(src, spec)
    cfg = micro_config(noise_ratio=0.5, epochs=4, use_cd=True)
    state = init_run_state(cfg)
    for _ in range(4):
        train_epoch(state, corrupted, tt)
    gammas = [row["gamma"] for row in state.history]
    assert all(b >= a for a, b in zip(gammas, gammas[1:]))
    assert all(g <= 0.5 + 1e-12 for g in gammas)


def test_losses_stay_finite(micro_data):
    src, tt, _ = micro_data
    cfg = micro_config(epochs=2, use_cd=True)
    state = init_run_state(cfg)
    for _ in range(2):
        train_epoch(state, src, tt)
    for row in state.history:
        for key, val in row.items():
            if isinstance(val, float):
                assert np.isfinite(val), (key, val)


def test_empty_corpus_errors(micro_data):
    src, tt, _ = micro_data
    from peerseg.datamodel import Corpus

    empty = Corpus((), DomainTag.SOURCE, 3)
    state = init_run_state(micro_config())
    with pytest.raises(TrainingError):
        train_epoch(state, empty, tt)


def test_cicl_zero_iters_is_noop(micro_data):
    src, tt, _ = micro_data
    cfg = micro_config(use_cd=True)
    state = init_run_state(cfg)
    train_epoch(state, src, tt)
    before = [p.detach().clone() for p in state.peers["peer_a"].segmenter.parameters()]
    run_cicl(state, tt, iters=0)
    after = list(state.peers["peer_a"].segmenter.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_cicl_tiny_quantile_skips_updates(micro_data):
    # q -> 0+ passes no pixel (strict inequality beats the pool maximum),
    # so both peers must be left exactly untouched
    src, tt, _ = micro_data
    cfg = micro_config(use_cd=True, pseudo_quantiles=(1e-12, 1e-12, 1e-12))
    state = init_run_state(cfg)
    train_epoch(state, src, tt)
    before = {
        pid: [p.detach().clone() for p in peer.segmenter.parameters()]
        for pid, peer in state.peers.items()
    }
    run_cicl(state, tt, iters=1)
    for pid, peer in state.peers.items():
        drift = max(
            float((a - b.detach()).abs().max())
            for a, b in zip(before[pid], peer.segmenter.parameters())
        )
        assert drift < 1e-6
    cicl_events = [e for e in state.selection_log if e["event"] == "cicl"]
    assert cicl_events and all(e["valid_pixels"] == 0 for e in cicl_events)


def test_cicl_runs_and_logs(micro_data):
    src, tt, _ = micro_data
    cfg = micro_config(use_cd=True, use_cicl=True, cicl_iters=1)
    state = init_run_state(cfg)
    train_epoch(state, src, tt)
    run_cicl(state, tt)
    events = [e for e in state.selection_log if e["event"] == "cicl"]
    assert {e["consumer"] for e in events} == {"peer_a", "peer_b"}
    for e in events:
        assert e["producer"] != e["consumer"]


def test_train_full_writes_run_artifacts(micro_data, tmp_path):
    src, tt, te = micro_data
    cfg = micro_config(epochs=2, use_cd=True)
    state = train_full(cfg, src, tt, te, run_dir=tmp_path / "run")
    root = tmp_path / "run"
    assert (root / "config.json").exists()
    assert (root / "metrics.csv").exists()
    assert (root / "selection_log.jsonl").exists()
    assert (root / "final_report.json").exists()
    assert sorted((root / "checkpoints").glob("epoch_*.pt"))
    header = (root / "metrics.csv").read_text().splitlines()[0]
    for col in ("epoch", "gamma", "dice_class1", "dice_class2", "dice_mean_fg"):
        assert col in header
    report = json.loads((root / "final_report.json").read_text())
    assert report["strategy"] == "cd"
    assert report["epochs"] == 2


def test_train_full_deterministic(micro_data, tmp_path):
    src, tt, te = micro_data
    cfg = micro_config(epochs=2, use_cd=True)
    train_full(cfg, src, tt, te, run_dir=tmp_path / "a")
    train_full(cfg, src, tt, te, run_dir=tmp_path / "b")
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert csv_a == csv_b


def test_train_full_resume_matches_straight_run(micro_data, tmp_path):
    src, tt, te = micro_data
    cfg = micro_config(epochs=3, use_cd=True)
    train_full(cfg, src, tt, te, run_dir=tmp_path / "straight")
    # interrupt after epoch 2, then resume to completion
    train_full(cfg, src, tt, te, run_dir=tmp_path / "resumed", stop_after=2)
    assert len((tmp_path / "resumed" / "metrics.csv").read_text().splitlines()) == 3
    state = train_full(cfg, src, tt, te, run_dir=tmp_path / "resumed", resume=True)
    assert state.epoch == 3
    straight = (tmp_path / "straight" / "metrics.csv").read_bytes()
    resumed = (tmp_path / "resumed" / "metrics.csv").read_bytes()
    assert straight == resumed


def test_resume_rejects_other_config(micro_data, tmp_path):
    src, tt, te = micro_data
    cfg = micro_config(epochs=2, use_cd=True)
    train_full(cfg, src, tt, te, run_dir=tmp_path / "run", stop_after=1)
    other = micro_config(epochs=2, use_cd=True, lr_seg=9e-4)
    with pytest.raises(TrainingError, match="config"):
        train_full(other, src, tt, te, run_dir=tmp_path / "run", resume=True)


def test_smoke_run_under_60s(tmp_path):
    import time

    cfg_data = SynthConfig(num_source=8, num_target_train=8, num_target_test=4, seed=5)
    src, tt, te = generate_dataset(cfg_data)
    cfg = RunConfig(epochs=1, outer_iters=1, inner_iters=1, batch_size=8, seed=0)
    t0 = time.time()
    train_full(cfg, src, tt, te, run_dir=tmp_path / "smoke")
    assert time.time() - t0 < 60.0


def test_baseline_single_peer(micro_data):
    src, tt, _ = micro_data
    cfg = micro_config(use_cd=False)
    state = init_run_state(cfg)
    assert list(state.peers) == ["peer_a"]
    train_epoch(state, src, tt)
    updates = [e for e in state.selection_log if e["event"] == "update"]
    assert all(e["producer"] == e["consumer"] == "peer_a" for e in updates)
    # baseline consumes the full batch
    assert all(len(e["ids"]) == cfg.batch_size for e in updates)


def test_pretrain_requires_corpus(micro_data):
    src, tt, _ = micro_data
    cfg = micro_config(pretrain_epochs=1)
    with pytest.raises(TrainingError, match="pretrain"):
        train_full(cfg, src, tt)


def test_pretrain_warm_start_runs(micro_data, tmp_path):
    src, tt, te = micro_data
    clean_cfg = SynthConfig(num_source=4, num_target_train=1, num_target_test=1, seed=77)
    clean, _, _ = generate_dataset(clean_cfg)
    cfg = micro_config(epochs=1, pretrain_epochs=1, use_cd=True)
    state = train_full(cfg, src, tt, te, pretrain_corpus=clean)
    assert state.epoch == 1


def test_cicl_pseudo_labels_beat_argmax(micro_data):
    """Valid-pixel pseudo-labels must be more accurate against hidden
    ground truth than the raw argmax over all pixels (that is the point
    of confidence thresholding)."""
    import torch

    from peerseg.pseudolabel import cicl_round

    src, tt, te = micro_data
    cfg = micro_config(epochs=5, outer_iters=3, lr_seg=8e-4, use_cd=True)
    state = init_run_state(cfg)
    for _ in range(cfg.epochs):
        train_epoch(state, src, tt)

    def predictions(peer_id):
        seg = state.peers[peer_id].segmenter
        out = []
        with torch.no_grad():
            for s in te:
                from peerseg.models import forward_softmax

                out.append(forward_softmax(seg, s.image).probs)
        return out

    preds_a, preds_b = predictions("peer_a"), predictions("peer_b")
    for_b, for_a = cicl_round(preds_a, preds_b, cfg.pseudo_quantiles)

    def masked_accuracy(pls_list, restrict_valid):
        good = total = 0
        for pls, sample in zip(pls_list, te):
            sel = pls.valid if restrict_valid else np.ones_like(pls.valid)
            good += int((pls.labels[sel] == sample.mask.classes[sel]).sum())
            total += int(sel.sum())
        return good / max(total, 1)

    if sum(p.valid.sum() for p in for_b):
        assert masked_accuracy(for_b, True) >= masked_accuracy(for_b, False)
    if sum(p.valid.sum() for p in for_a):
        assert masked_accuracy(for_a, True) >= masked_accuracy(for_a, False)


def test_ntl_gradient_smaller_near_boundary(micro_data):
    """For the cross-entropy term, boundary-adjacent pixels (depth <= 1)
    must contribute strictly smaller logit gradients under the noisy
    route than under the clean route."""
    from peerseg import losses as L
    from peerseg.geometry import boundary_weight_map, distance_to_boundary

    src, _, _ = micro_data
    sample = src[0]
    mask = sample.mask
    bw = torch.tensor(L.bweights_chw(boundary_weight_map(mask)), dtype=torch.float64)
    w_ce = L.LossWeights(lambda1=0.05, lambda2=0.0)
    torch.manual_seed(0)
    logits = torch.randn(3, *mask.shape, dtype=torch.float64)
    _, g_clean = L.with_logit_grad(lambda p: L.clean_loss(p, mask.classes, w_ce), logits)
    _, g_noise = L.with_logit_grad(lambda p: L.noise_loss(p, mask.classes, bw, w_ce), logits)
    d = distance_to_boundary(mask, 1)
    shallow = (d > 0) & (d <= 1.0)
    rows, cols = np.where(shallow)
    mag_clean = g_clean[1, rows, cols].abs()
    mag_noise = g_noise[1, rows, cols].abs()
    assert torch.all(mag_noise < mag_clean)
