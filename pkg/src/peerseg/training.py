"""Training orchestration: the peer cross-training loop, pseudo-label
rounds, and full runs with checkpoints and logs.

One epoch processes K randomly sampled source subsets. For each subset
both peers score every sample with the clean loss, keep the gamma
smallest-loss samples, split the kept set into clean/noisy by a loss
quantile, and then each peer takes M update steps on the subset selected
by the *other* peer: a discriminator step (source predictions real,
target fake, entropy-weighted) followed by a segmenter step minimising
the omega-switched segmentation loss plus the weighted adversarial term.
Pseudo-label rounds run after each epoch in the second half of training:
peers predict on the unlabelled target split, class-balanced pseudo
labels are exchanged, and each peer fine-tunes on the labels it received
over the valid pixels only.

Runs are deterministic given (config, seed): all sampling flows from one
numpy generator whose state is checkpointed, and parameter updates are
serialised peer A before peer B.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from . import models as M
from . import pseudolabel as PL
from . import selection as S
from .datamodel import Corpus, RunConfig
from .geometry import boundary_weight_map
from .evaluation import evaluate_segmenter

PEER_ORDER = ("peer_a", "peer_b")


class TrainingError(RuntimeError):
    pass


@dataclass
class PeerState:
    peer_id: str
    segmenter: torch.nn.Module
    discriminator: torch.nn.Module
    seg_opt: M.MomentumSGD
    disc_opt: M.Adam


@dataclass
class TrainRunState:
    config: RunConfig
    schedule: S.RememberSchedule
    peers: dict
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)
    selection_log: list = field(default_factory=list)
    last_source: Corpus | None = None  # most recent source corpus, for pseudo-label disc steps
    _tensor_cache: dict = field(default_factory=dict, repr=False)
    _bweight_cache: dict = field(default_factory=dict, repr=False)

    @property
    def peer_ids(self):
        return tuple(self.peers)


def init_run_state(config: RunConfig, peer_archs=("peer_a", "peer_b")) -> TrainRunState:
    """Build peers, discriminators and optimizer state for a run."""
    schedule = S.RememberSchedule(config.noise_ratio, config.epochs, config.gamma0)
    peers = {}
    arch_list = peer_archs if config.use_cd else peer_archs[:1]
    for i, arch in enumerate(arch_list):
        peer_id = PEER_ORDER[i]
        seg = M.build_segmenter(arch, config.num_classes, seed=config.seed + i)
        disc = M.build_discriminator(config.num_classes, seed=config.seed + 100 + i)
        peers[peer_id] = PeerState(
            peer_id=peer_id,
            segmenter=seg,
            discriminator=disc,
            seg_opt=M.MomentumSGD(seg.parameters(), config.lr_seg, config.momentum),
            disc_opt=M.Adam(disc.parameters(), config.lr_disc),
        )
    rng = np.random.default_rng(config.seed)
    return TrainRunState(config=config, schedule=schedule, peers=peers, rng=rng)


def _loss_weights(config: RunConfig) -> L.LossWeights:
    return L.LossWeights(
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        lambda_adv=config.lambda_adv,
        lambda_entr=config.lambda_entr,
        entropy_eps=config.entropy_eps,
        adv_weighting=config.adv_weighting,
    )


def _image_tensor(state: TrainRunState, sample) -> torch.Tensor:
    key = ("img", sample.id)
    if key not in state._tensor_cache:
        state._tensor_cache[key] = M.image_to_tensor(sample.image)
    return state._tensor_cache[key]


def _mask_tensor(state: TrainRunState, sample) -> torch.Tensor:
    key = ("mask", sample.id)
    if key not in state._tensor_cache:
        state._tensor_cache[key] = torch.from_numpy(sample.mask.classes.copy())
    return state._tensor_cache[key]


def _bweights(state: TrainRunState, sample) -> torch.Tensor:
    if sample.id not in state._bweight_cache:
        bmap = boundary_weight_map(sample.mask)
        state._bweight_cache[sample.id] = torch.from_numpy(
            L.bweights_chw(bmap).astype(np.float32)
        )
    return state._bweight_cache[sample.id]


def _stack_images(state, samples) -> torch.Tensor:
    return torch.stack([_image_tensor(state, s) for s in samples])


def _check_finite(value: torch.Tensor, what: str, peer: PeerState):
    if not torch.isfinite(value).all():
        pnorm = sum(p.detach().norm().item() for p in peer.segmenter.parameters())
        raise TrainingError(
            f"non-finite {what} for {peer.peer_id} (segmenter parameter norm {pnorm:.3e})"
        )


def per_sample_clean_losses(state: TrainRunState, peer: PeerState, samples, w) -> list:
    """Clean loss of each sample under a peer's current segmenter."""
    imgs = _stack_images(state, samples)
    with torch.no_grad():
        logits = peer.segmenter(imgs)
        _check_finite(logits, "selection logits", peer)
        probs = torch.softmax(logits, dim=1)
        out = []
        for i, s in enumerate(samples):
            out.append(float(L.clean_loss(probs[i], _mask_tensor(state, s), w)))
    return out


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _adv_terms(peer, probs_src, probs_tgt, w, valid_fracs=None):
    """Per-sample adversarial losses; returns (gen_mean, disc_mean)."""
    d_src = peer.discriminator(probs_src)[:, 0]
    d_tgt = peer.discriminator(probs_tgt)[:, 0]
    gens, discs = [], []
    for i in range(d_tgt.shape[0]):
        ent = L.entropy_map(probs_tgt[i])
        vf = None if valid_fracs is None else valid_fracs[i]
        g, d = L.adversarial_losses(
            d_src[i % d_src.shape[0]], d_tgt[i], ent, w, valid_frac=vf
        )
        gens.append(g)
        discs.append(d)
    return sum(gens) / len(gens), sum(discs) / len(discs)


def _disc_step(state, peer: PeerState, src_samples, tgt_samples, w, valid_fracs=None):
    with torch.no_grad():
        probs_src = torch.softmax(peer.segmenter(_stack_images(state, src_samples)), dim=1)
        probs_tgt = torch.softmax(peer.segmenter(_stack_images(state, tgt_samples)), dim=1)
    peer.disc_opt.zero_grad()
    _, disc_loss = _adv_terms(peer, probs_src, probs_tgt, w, valid_fracs)
    _check_finite(disc_loss, "discriminator loss", peer)
    disc_loss.backward()
    peer.disc_opt.step()
    peer.disc_opt.zero_grad()
    return float(disc_loss.detach())


def _gen_step(state, peer: PeerState, recv: S.SelectionResult, by_id, tgt_samples, w,
              use_ntl: bool, valids=None, valid_fracs=None):
    """Segmenter update on the received subset plus the adversarial term."""
    samples = [by_id[sid] for sid in recv.ids]
    imgs = _stack_images(state, samples)
    logits = peer.segmenter(imgs)
    _check_finite(logits, "segmenter logits", peer)
    probs = torch.softmax(logits, dim=1)
    seg_terms = []
    for i, s in enumerate(samples):
        omega = recv.omegas[i] if use_ntl else 0
        bw = _bweights(state, s) if omega else None
        valid = None if valids is None else valids[i]
        seg_terms.append(
            L.seg_loss(probs[i], _mask_tensor(state, s), omega, bw, w, valid=valid)
        )
    seg_mean = sum(seg_terms) / len(seg_terms)

    _set_requires_grad(peer.discriminator, False)
    logits_tgt = peer.segmenter(_stack_images(state, tgt_samples))
    probs_tgt = torch.softmax(logits_tgt, dim=1)
    probs_src_detached = probs.detach()
    gen_adv, _ = _adv_terms(peer, probs_src_detached, probs_tgt, w, valid_fracs)
    _set_requires_grad(peer.discriminator, True)

    total = L.overall_objective(seg_mean, gen_adv, w)
    _check_finite(total, "segmenter objective", peer)
    peer.seg_opt.zero_grad()
    total.backward()
    peer.seg_opt.step()
    peer.seg_opt.zero_grad()
    return float(seg_mean.detach()), float(gen_adv.detach())


def train_epoch(state: TrainRunState, source: Corpus, target: Corpus) -> TrainRunState:
    """One epoch of the peer cross-training loop (state is advanced in place)."""
    if len(source) == 0 or len(target) == 0:
        raise TrainingError("corpora must be nonempty")
    cfg = state.config
    state.last_source = source
    w = _loss_weights(cfg)
    t = state.epoch + 1
    gamma = S.remember_rate(t, state.schedule) if cfg.use_cd else 1.0
    stats = {pid: {"seg": [], "adv": [], "disc": []} for pid in state.peers}

    for k in range(cfg.outer_iters):
        idx = state.rng.choice(len(source), size=min(cfg.batch_size, len(source)), replace=False)
        batch = [source[int(i)] for i in idx]
        by_id = {s.id: s for s in batch}
        tgt_idx = state.rng.choice(len(target), size=min(cfg.batch_size, len(target)), replace=False)
        tgt_batch = [target[int(i)] for i in tgt_idx]
        ids = [s.id for s in batch]

        if cfg.use_cd:
            received = {}
            produced = {}
            for pid in state.peer_ids:
                losses = per_sample_clean_losses(state, state.peers[pid], batch, w)
                sel = S.split_omega(
                    S.select_small_loss(ids, losses, gamma), cfg.omega_quantile
                )
                produced[pid] = sel
                state.selection_log.append({
                    "event": "select", "epoch": t, "k": k, "producer": pid,
                    "gamma": gamma, "ids": list(sel.ids),
                    "losses": [round(x, 6) for x in sel.losses],
                    "omegas": list(sel.omegas),
                })
            received["peer_a"] = produced["peer_b"]
            received["peer_b"] = produced["peer_a"]
            consumed_from = {"peer_a": "peer_b", "peer_b": "peer_a"}
        else:
            sel = S.SelectionResult(ids, [0.0] * len(ids), [0] * len(ids))
            received = {"peer_a": sel}
            consumed_from = {"peer_a": "peer_a"}

        for m in range(cfg.inner_iters):
            for pid in state.peer_ids:
                peer = state.peers[pid]
                recv = received[pid]
                disc_loss = _disc_step(state, peer, batch, tgt_batch, w)
                seg_loss_val, gen_adv = _gen_step(
                    state, peer, recv, by_id, tgt_batch, w, cfg.use_ntl
                )
                stats[pid]["seg"].append(seg_loss_val)
                stats[pid]["adv"].append(gen_adv)
                stats[pid]["disc"].append(disc_loss)
                state.selection_log.append({
                    "event": "update", "epoch": t, "k": k, "m": m,
                    "consumer": pid, "producer": consumed_from[pid],
                    "ids": list(recv.ids), "omegas": list(recv.omegas),
                })

    state.epoch = t
    state.history.append({
        "epoch": t,
        "gamma": gamma,
        **{
            f"{key}_{pid}": float(np.mean(vals[key])) if vals[key] else float("nan")
            for pid, vals in stats.items()
            for key in ("seg", "adv", "disc")
        },
    })
    return state


def run_cicl(state: TrainRunState, target: Corpus, quantiles=None, iters=None) -> TrainRunState:
    """Pseudo-label rounds: predict on the target split, exchange
    class-balanced pseudo labels between peers, fine-tune each peer on
    the labels it received (valid pixels only). Peers whose received
    labels have no valid pixel are skipped entirely."""
    cfg = state.config
    if not cfg.use_cd or len(state.peers) < 2:
        return state
    quantiles = tuple(quantiles) if quantiles is not None else cfg.pseudo_quantiles
    iters = cfg.cicl_iters if iters is None else iters
    w = _loss_weights(cfg)

    for i in range(iters):
        idx = state.rng.choice(len(target), size=min(cfg.batch_size, len(target)), replace=False)
        samples = [target[int(j)] for j in idx]
        preds = {}
        for pid in state.peer_ids:
            seg = state.peers[pid].segmenter
            with torch.no_grad():
                logits = seg(_stack_images(state, samples))
                probs = torch.softmax(logits, dim=1).numpy()
            preds[pid] = [np.moveaxis(p, 0, 2).astype(np.float64) for p in probs]
        for_b, for_a = PL.cicl_round(preds["peer_a"], preds["peer_b"], quantiles, i)
        received = {"peer_a": for_a, "peer_b": for_b}
        for pid in state.peer_ids:
            pls = received[pid]
            n_valid = int(sum(p.valid.sum() for p in pls))
            state.selection_log.append({
                "event": "cicl", "epoch": state.epoch, "round": i, "consumer": pid,
                "producer": pls[0].source_peer, "valid_pixels": n_valid,
            })
            if n_valid == 0:
                continue
            _cicl_update(state, state.peers[pid], samples, pls, w)
    return state


def _cicl_update(state, peer, samples, pls, w):
    cfg = state.config
    masks = [torch.from_numpy(p.labels.copy()) for p in pls]
    valids = [torch.from_numpy(p.valid.copy()) for p in pls]
    valid_fracs = [torch.from_numpy(p.valid.astype(np.float32)) for p in pls]

    imgs = _stack_images(state, samples)
    if cfg.cicl_supervise == "both":
        logits = peer.segmenter(imgs)
        _check_finite(logits, "pseudo-label logits", peer)
        probs = torch.softmax(logits, dim=1)
        terms = [
            L.clean_loss(probs[i], masks[i], w, valid=valids[i]) for i in range(len(samples))
        ]
        seg_mean = sum(terms) / len(terms)
        _set_requires_grad(peer.discriminator, False)
        gen_adv, _ = _adv_terms(peer, probs.detach(), probs, w, valid_fracs)
        _set_requires_grad(peer.discriminator, True)
        total = L.overall_objective(seg_mean, gen_adv, w)
        peer.seg_opt.zero_grad()
        total.backward()
        peer.seg_opt.step()
        peer.seg_opt.zero_grad()
    # the discriminator sees the refreshed target predictions against
    # current source predictions, weighted by the trusted-pixel fraction
    if state.last_source is None or len(state.last_source) == 0:
        return
    src_idx = state.rng.choice(
        len(state.last_source), size=min(cfg.batch_size, len(state.last_source)), replace=False
    )
    src_batch = [state.last_source[int(j)] for j in src_idx]
    _disc_step(state, peer, src_batch, samples, w, valid_fracs)


def train_full(
    config: RunConfig,
    source: Corpus,
    target_train: Corpus,
    target_test: Corpus | None = None,
    run_dir=None,
    pretrain_corpus: Corpus | None = None,
    peer_archs=("peer_a", "peer_b"),
    resume: bool = False,
    checkpoint_every: int = 1,
    stop_after: int | None = None,
    init_weights: dict | None = None,
):
    """Full training run; returns the final state.

    Optional warm-start: when config.pretrain_epochs > 0 both peers are
    first trained supervised on a clean corpus; alternatively
    ``init_weights`` maps peer ids to segmenter state dicts trained
    elsewhere (shared pretrained weights), loaded with fresh optimizer
    state. Pseudo-label rounds are scheduled after each epoch from
    ceil(cicl_start_frac * T) onward. Inference and evaluation use peer A
    only. ``stop_after`` ends the session early after that epoch's
    checkpoint (resume later with resume=True).
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    state = init_run_state(config, peer_archs)
    if init_weights:
        for pid, weights in init_weights.items():
            if pid in state.peers:
                state.peers[pid].segmenter.load_state_dict(weights)
    state.last_source = source

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        config.to_json(run_dir / "config.json")
        if resume:
            last = _latest_checkpoint(run_dir)
            if last is not None:
                _load_run_checkpoint(state, last)

    if state.epoch == 0 and config.pretrain_epochs > 0:
        if pretrain_corpus is None:
            raise TrainingError("pretrain_epochs > 0 requires a clean pretrain corpus")
        _pretrain(state, pretrain_corpus)

    cicl_from = max(1, int(np.ceil(config.cicl_start_frac * config.epochs)))
    timings = []
    while state.epoch < config.epochs:
        t0 = time.time()
        train_epoch(state, source, target_train)
        if config.use_cicl and state.epoch >= cicl_from:
            run_cicl(state, target_train)
        row = state.history[-1]
        if target_test is not None:
            report = evaluate_segmenter(state.peers["peer_a"].segmenter, target_test)
            row.update({
                **{f"dice_class{c}": d for c, d in report.per_class.items()},
                "dice_mean_fg": report.mean_foreground,
            })
        timings.append(round(time.time() - t0, 3))  # kept out of metrics.csv so reruns are byte-identical
        if run_dir is not None:
            if state.epoch % checkpoint_every == 0 or state.epoch == config.epochs:
                _save_run_checkpoint(state, run_dir / "checkpoints" / f"epoch_{state.epoch:03d}.pt")
            write_metrics_csv(state.history, run_dir / "metrics.csv")
            write_selection_log(state.selection_log, run_dir / "selection_log.jsonl")
        if stop_after is not None and state.epoch >= stop_after:
            return state

    if run_dir is not None:
        final = {
            "strategy": config.strategy_name,
            "epochs": state.epoch,
            "final": {k: v for k, v in state.history[-1].items()},
        }
        with open(run_dir / "final_report.json", "w") as f:
            json.dump(final, f, indent=2, sort_keys=True)
    return state


def _pretrain(state: TrainRunState, corpus: Corpus):
    """Supervised warm-start of every peer on clean labels.

    Runs at config.pretrain_lr (falling back to lr_seg); the main phase
    then starts from the warmed weights with fresh momentum, like
    loading pretrained weights into a new optimizer.
    """
    cfg = state.config
    w = _loss_weights(cfg)
    warm_lr = cfg.pretrain_lr if cfg.pretrain_lr is not None else cfg.lr_seg
    for peer in state.peers.values():
        peer.seg_opt.lr = warm_lr
    for _ in range(cfg.pretrain_epochs):
        order = state.rng.permutation(len(corpus))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [corpus[int(i)] for i in order[start:start + cfg.batch_size]]
            for pid in state.peer_ids:
                peer = state.peers[pid]
                logits = peer.segmenter(_stack_images(state, chunk))
                _check_finite(logits, "pretrain logits", peer)
                probs = torch.softmax(logits, dim=1)
                terms = [
                    L.clean_loss(probs[i], _mask_tensor(state, s), w)
                    for i, s in enumerate(chunk)
                ]
                loss = sum(terms) / len(terms)
                peer.seg_opt.zero_grad()
                loss.backward()
                peer.seg_opt.step()
                peer.seg_opt.zero_grad()
    for peer in state.peers.values():
        peer.seg_opt.lr = cfg.lr_seg
        for v in peer.seg_opt.velocity:
            v.zero_()


def write_metrics_csv(history, path):
    cols = []
    for row in history:
        for key in row:
            if key not in cols:
                cols.append(key)
    lines = [",".join(cols)]
    for row in history:
        cells = []
        for key in cols:
            v = row.get(key, "")
            if isinstance(v, float):
                cells.append(f"{v:.6f}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_selection_log(log, path):
    with open(path, "w") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def _save_run_checkpoint(state: TrainRunState, path):
    cfg_hash = M.config_hash(dataclasses.asdict(state.config))
    payload = {
        "epoch": state.epoch,
        "config_hash": cfg_hash,
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
        "selection_log": state.selection_log,
        "peers": {},
    }
    for pid, peer in state.peers.items():
        payload["peers"][pid] = {
            "architecture_id": peer.segmenter.architecture_id,
            "seg_state": peer.segmenter.state_dict(),
            "disc_state": peer.discriminator.state_dict(),
            "seg_opt": peer.seg_opt.state_dict(),
            "disc_opt": peer.disc_opt.state_dict(),
        }
    torch.save(payload, path)


def _latest_checkpoint(run_dir: Path):
    ckpts = sorted((run_dir / "checkpoints").glob("epoch_*.pt"))
    return ckpts[-1] if ckpts else None


def _load_run_checkpoint(state: TrainRunState, path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg_hash = M.config_hash(dataclasses.asdict(state.config))
    if payload["config_hash"] != cfg_hash:
        raise TrainingError("checkpoint was produced by a different config")
    state.epoch = payload["epoch"]
    state.history = payload["history"]
    state.selection_log = payload["selection_log"]
    state.rng.bit_generator.state = payload["rng_state"]
    for pid, blob in payload["peers"].items():
        peer = state.peers[pid]
        if peer.segmenter.architecture_id != blob["architecture_id"]:
            raise TrainingError(f"checkpoint architecture mismatch for {pid}")
        peer.segmenter.load_state_dict(blob["seg_state"])
        peer.discriminator.load_state_dict(blob["disc_state"])
        peer.seg_opt.load_state_dict(blob["seg_opt"])
        peer.disc_opt.load_state_dict(blob["disc_opt"])
