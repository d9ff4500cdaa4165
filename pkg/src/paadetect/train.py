"""Self-supervised training loop: pair selection, the three losses, momentum encoder and bank."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import sample_candidate_pool, select_pair
from .checkpoint import json_entry, load_checkpoint, read_json_entry, save_checkpoint
from .config import Config
from .data import Dataset
from .detector import embed
from .encoder import PAAEncoder, get_variant, momentum_encoder_update
from .losses import icl_loss, pce_loss, pm_loss, sample_negatives, total_loss
from .prototypes import DiscriminationBank, Prototypes, assign, density_peaks, icl_sets
from .tensor import ContractError, backward, getitem, no_grad, save_ten

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite; the offending batch was dumped."""


@dataclass
class TrainState:
    encoder: PAAEncoder
    momentum: PAAEncoder
    velocity: dict[str, np.ndarray]
    bank: DiscriminationBank
    prototypes: Prototypes | None = None
    cluster_labels: np.ndarray | None = None
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)


def build_encoder(cfg: Config, seed: int | None = None) -> PAAEncoder:
    t = cfg.train
    variant = get_variant(t.variant, paa_blocks=t.paa_blocks)
    return PAAEncoder(variant, seed=t.seed if seed is None else seed)


def init_state(cfg: Config) -> TrainState:
    enc = build_encoder(cfg)
    return TrainState(
        encoder=enc,
        momentum=enc.copy(requires_grad=False),
        velocity={n: np.zeros_like(p.data) for n, p in enc.params.items()},
        bank=DiscriminationBank(cfg.bank.num_prototypes, enc.variant.embed_dim, cfg.bank.capacity),
    )


def sgd_step(encoder: PAAEncoder, velocity: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """Heavy-ball SGD; decay is skipped for batch-norm affine parameters and positional tables."""
    decay = encoder.decay_mask()
    for name, p in encoder.params.items():
        if p.grad is None:
            continue
        g = p.grad
        if decay[name] and weight_decay:
            g = g + weight_decay * p.data
        v = velocity[name]
        v *= momentum
        v += g
        p.data = (p.data - lr * v).astype(p.data.dtype)
    encoder.zero_grad()


def refresh_prototypes(state: TrainState, images: np.ndarray, cfg: Config) -> None:
    """Density-peak prototypes of the momentum features of the whole training split."""
    feats = embed(state.momentum, images)
    protos, labels = density_peaks(feats, cfg.bank.num_prototypes, beta=cfg.loss.beta,
                                   fraction=cfg.bank.density_fraction)
    state.prototypes = protos
    state.cluster_labels = labels
    state.bank.reset(len(protos))


def _dump_batch(out_dir: Path | None, epoch: int, step: int, batch: np.ndarray, parts: dict) -> Path | None:
    if out_dir is None:
        return None
    dump = out_dir / f"nan_dump_epoch{epoch}_step{step}"
    dump.mkdir(parents=True, exist_ok=True)
    save_ten(dump / "batch.ten", np.asarray(batch, dtype=np.float32))
    (dump / "losses.json").write_text(json.dumps({k: repr(v) for k, v in parts.items()}, indent=2))
    return dump


def train_step(state: TrainState, cfg: Config, batch: np.ndarray, batch_idx: np.ndarray,
               rng: np.random.Generator, warmup: bool, lr: float, out_dir: Path | None = None) -> dict:
    t, lc = cfg.train, cfg.loss
    enc, mom = state.encoder, state.momentum
    pool = sample_candidate_pool(rng, cfg.augment)
    sel = select_pair(batch, pool, lambda x: enc.forward(x, training=False), lc.tau)

    b = len(batch)
    both = enc.forward(np.concatenate([sel.view_t, sel.view_s]), training=True)
    v_t = getitem(both, slice(0, b))
    v_s = getitem(both, slice(b, 2 * b))
    pm = pm_loss(v_t, v_s, lc.tau)
    parts = {"pm": float(pm.data), "pce": 0.0, "icl": 0.0, "icl_skipped": 0}
    loss = pm if (warmup or t.use_pm) else pm * 0.0
    active = not warmup and state.prototypes is not None
    z = nearest = None
    if active:
        with no_grad():
            z = mom.forward(batch, training=False).data.astype(np.float64)
        protos = state.prototypes
        nearest = assign(z, protos)
        pce = icl = None
        if t.use_pce:
            labels = state.cluster_labels[batch_idx]
            negs = sample_negatives(labels, len(protos), lc.r, rng)
            pce = pce_loss(v_s, labels, protos.centroids, protos.gammas, negs,
                           positive_in_denominator=lc.pce_positive_in_denominator, gamma_min=lc.gamma_min)
            parts["pce"] = float(pce.data)
        if t.use_icl:
            sets = icl_sets(z, nearest, state.bank)
            phi_bank = state.bank.concentrations(protos.centroids, lc.beta)
            icl, skipped = icl_loss(v_s, sets, protos.centroids[nearest], phi_bank[nearest],
                                    gamma_min=lc.gamma_min, return_skipped=True)
            parts["icl"] = float(icl.data)
            parts["icl_skipped"] = skipped
        zero = loss * 0.0
        loss = total_loss(loss, pce if pce is not None else zero, icl if icl is not None else zero,
                          lc.lambda1, lc.lambda2)
    parts["total"] = float(loss.data)
    if not all(np.isfinite(v) for k, v in parts.items() if k != "icl_skipped"):
        dump = _dump_batch(out_dir, state.epoch, state.step, batch, parts)
        raise TrainingDiverged(f"non-finite loss at epoch {state.epoch} step {state.step}: {parts}; dump at {dump}")
    backward(loss, list(enc.params.values()))
    sgd_step(enc, state.velocity, lr, t.momentum, t.weight_decay)
    momentum_encoder_update(enc, mom, t.m_enc)
    if active and t.use_icl:
        state.bank.update(z, nearest, state.step)
    state.step += 1
    return parts


def epoch_record(state: TrainState, cfg: Config, parts: list[dict], lr: float, warmup: bool) -> dict:
    """Metrics for one epoch (no wall-clock fields, so identical runs give identical streams)."""
    lc = cfg.loss
    mean = {k: float(np.mean([p[k] for p in parts])) for k in ("pm", "pce", "icl", "total")}
    protos = state.prototypes
    gam = protos.gammas if protos is not None and not warmup else np.zeros(0)
    occ = state.bank.occupancy()
    return {
        "epoch": state.epoch,
        "lr": lr,
        "warmup": warmup,
        "loss_pm": mean["pm"],
        "loss_pce": mean["pce"],
        "loss_icl": mean["icl"],
        "weighted_pce": lc.lambda1 * mean["pce"],
        "weighted_icl": lc.lambda2 * mean["icl"],
        "loss_total": mean["total"],
        "icl_skipped": int(sum(p["icl_skipped"] for p in parts)),
        "gamma_min": float(gam.min()) if gam.size else None,
        "gamma_mean": float(gam.mean()) if gam.size else None,
        "gamma_max": float(gam.max()) if gam.size else None,
        "bank_occupancy": occ.tolist(),
        "bank_entries": int(occ.sum()),
        "steps": len(parts),
    }


def checkpoint_entries(state: TrainState, cfg: Config) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    out.update(state.encoder.state_arrays())
    for name, arr in state.momentum.state_arrays().items():
        out[f"momentum.{name}"] = arr
    if state.prototypes is not None:
        for m, c in enumerate(state.prototypes.centroids):
            out[f"proto.{m}"] = c.astype(np.float32)
        out["proto.gamma"] = state.prototypes.gammas.astype(np.float32)
    out.update(state.bank.state())
    out["meta.config"] = json_entry(cfg.to_dict())
    out["meta.progress"] = np.array([state.epoch, state.step], dtype=np.int64)
    return out


def load_trained(path) -> tuple[PAAEncoder, Config, dict[str, np.ndarray]]:
    """Online encoder and configuration stored in a checkpoint."""
    arrays = load_checkpoint(path)
    if "meta.config" not in arrays:
        raise ContractError(f"{path} carries no configuration")
    cfg = Config.from_dict(read_json_entry(arrays["meta.config"]))
    enc = build_encoder(cfg)
    enc.load_state_arrays(arrays)
    return enc, cfg, arrays


def stored_prototypes(arrays: dict[str, np.ndarray]) -> Prototypes | None:
    names = sorted((k for k in arrays if k.startswith("proto.") and k[6:].isdigit()), key=lambda k: int(k[6:]))
    if not names:
        return None
    cents = np.stack([arrays[k] for k in names]).astype(np.float64)
    return Prototypes(cents, arrays["proto.gamma"], np.zeros(len(names)))


def train(cfg: Config, data: Dataset, out_dir=None, epochs: int | None = None,
          state: TrainState | None = None) -> TrainState:
    """Run the schedule; writes ``metrics.jsonl`` and ``checkpoint.paac`` per epoch when ``out_dir`` is set."""
    t = cfg.train
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    images, _ = data.split("train")
    if len(images) < max(2, cfg.bank.num_prototypes):
        raise ContractError("training split is smaller than the prototype count")
    state = state or init_state(cfg)
    rng = np.random.default_rng(t.seed + 1)
    for epoch in range(1, (epochs or t.epochs) + 1):
        state.epoch = epoch
        start = time.perf_counter()
        lr = t.lr_at(epoch)
        warmup = epoch <= t.warmup_epochs
        if not warmup and (t.use_pce or t.use_icl):
            refresh_prototypes(state, images, cfg)
        order = rng.permutation(len(images))
        parts = []
        for s in range(0, len(order), t.batch_size):
            sel = order[s:s + t.batch_size]
            if len(sel) < 2:
                continue
            parts.append(train_step(state, cfg, images[sel], sel, rng, warmup, lr, out))
        rec = epoch_record(state, cfg, parts, lr, warmup)
        state.history.append(rec)
        log.info("epoch %d lr %.4g pm %.4f pce %.4f icl %.4f (%.1fs)", epoch, lr, rec["loss_pm"],
                 rec["loss_pce"], rec["loss_icl"], time.perf_counter() - start)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            save_checkpoint(out / "checkpoint.paac", checkpoint_entries(state, cfg))
    return state
