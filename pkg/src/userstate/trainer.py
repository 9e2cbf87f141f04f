"""Semi-supervised training of the audio and face models jointly with the fusion model.

Per step the objective is

    L_mod = L_s(M, x, y) + beta1 * L_u(M, u)          for M in (audio, face)
    L     = beta2 * (L_audio + L_face) + beta3 * L_s(fusion, x_c, y_c)

L_s is the batch-mean cross-entropy on weakly augmented labeled input. L_u
pseudo-labels the weak view of each unlabeled item (no gradient), keeps items
whose top probability reaches ``tau`` and scores the strong view against the
hard pseudo-label, dividing by the full unlabeled batch size. From epoch
``k`` on (epochs count from 0) unlabeled batches come from the distilled
pools: items the current model assigns a non-neutral class with probability
strictly above ``tau ** 3``.

Augmentation draws inside one step happen in a fixed order: audio labeled
weak, audio unlabeled weak, audio unlabeled strong, face labeled weak, face
unlabeled weak, face unlabeled strong, fusion audio weak, fusion face weak.
Unlabeled draws are skipped when beta1 is 0 or the pool is empty.
"""
from __future__ import annotations

import contextlib
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.nn import functional as F

from .augment import AugmentPolicy, augment_batch, strong_augment, weak_augment
from .backbones import ModelBundle
from .core_data import NEUTRAL, BatchCycler, DistilledPool, TrainConfig, TrainingData, UnlabeledPool
from .evaluation import macro_f1, predict_heads

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.get_default_dtype())


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NonFiniteLossError(f"non-finite {what}")


def weak_view(x, rng):
    return augment_batch(x, rng, weak_augment)


def strong_view_fn(policy: AugmentPolicy):
    def view(x, rng):
        return augment_batch(x, rng, strong_augment, policy=policy)
    return view


def supervised_loss(model, x, y, rng=None, weak: Callable | None = weak_view) -> torch.Tensor:
    """Batch mean of cross-entropy between labels and predictions on weak views.

    ``y`` holds class indices; ``model`` is anything with a ``logits`` method.
    """
    if len(y) < 1:
        raise ValueError("supervised batch must not be empty")
    xv = weak(x, rng) if weak is not None else x
    logits = model.logits(_tensor(xv))
    _check_finite(logits, "model output")
    return F.cross_entropy(logits, torch.as_tensor(np.asarray(y), dtype=torch.long))


def fusion_loss(bundle: ModelBundle, x_a, x_f, y, rng=None, weak: Callable | None = weak_view) -> torch.Tensor:
    if len(y) < 1:
        raise ValueError("fusion batch must not be empty")
    xa = weak(x_a, rng) if weak is not None else x_a
    xf = weak(x_f, rng) if weak is not None else x_f
    logits = bundle.fusion_logits(_tensor(xa), _tensor(xf))
    _check_finite(logits, "fusion output")
    return F.cross_entropy(logits, torch.as_tensor(np.asarray(y), dtype=torch.long))


@contextlib.contextmanager
def frozen_bn_stats(model):
    """Normalize with batch statistics but leave running statistics untouched.

    Unlabeled batches are large and strongly augmented; letting them update the
    running statistics drags eval-mode normalization away from clean inputs.
    """
    norms = _batch_norms(model)
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom


def _batch_norms(model):
    return [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]


@torch.no_grad()
def recalibrate_bn(bundle: ModelBundle, data: TrainingData, batch_size: int = 500):
    """Replace BN running statistics by a cumulative average over clean labeled inputs.

    Momentum estimates from 12-item weakly augmented batches are noisy enough
    to swing eval-mode predictions from one epoch to the next.
    """
    norms = _batch_norms(bundle)
    saved = [m.momentum for m in norms]
    was_training = bundle.training
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    bundle.train()
    try:
        for s in range(0, len(data.audio), batch_size):
            bundle.audio.logits(_tensor(data.audio.x[s:s + batch_size]))
        for s in range(0, len(data.face), batch_size):
            bundle.face.logits(_tensor(data.face.x[s:s + batch_size]))
        for s in range(0, len(data.combined), batch_size):
            bundle.fusion_logits(_tensor(data.combined.audio[s:s + batch_size]),
                                 _tensor(data.combined.face[s:s + batch_size]))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        bundle.train(was_training)


@dataclass
class PseudoLabelBatch:
    probs: np.ndarray        # q_b on the weak view
    hard: np.ndarray         # argmax of q_b
    accepted: np.ndarray     # max(q_b) >= tau

    @property
    def acceptance(self) -> float:
        return float(self.accepted.mean()) if len(self.accepted) else 0.0


def unlabeled_loss(model, u, tau: float, rng=None, weak: Callable = weak_view,
                   strong: Callable | None = None, return_labels: bool = False):
    """Consistency loss on an unlabeled batch and its pseudo-label acceptance rate.

    The sum over accepted items is divided by the full batch size, not by the
    number of accepted items.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    n = len(u)
    if n < 1:
        raise ValueError("unlabeled batch must not be empty")
    strong = strong or strong_view_fn(AugmentPolicy())
    with frozen_bn_stats(model):
        with torch.no_grad():
            weak_logits = model.logits(_tensor(weak(u, rng)))
            _check_finite(weak_logits, "model output")
            q = F.softmax(weak_logits, dim=-1)
            conf, hard = q.max(dim=-1)
            mask = (conf >= tau).to(q.dtype)
        strong_logits = model.logits(_tensor(strong(u, rng)))
    _check_finite(strong_logits, "model output")
    per_item = F.cross_entropy(strong_logits, hard, reduction="none")
    loss = (per_item * mask).sum() / n
    acceptance = float(mask.mean())
    if return_labels:
        return loss, acceptance, PseudoLabelBatch(q.numpy(), hard.numpy(), mask.numpy().astype(bool))
    return loss, acceptance


def distill_mask(probs: np.ndarray, tau: float) -> np.ndarray:
    """Items with top probability strictly above tau**3 and a non-neutral argmax."""
    probs = np.asarray(probs)
    return (probs.max(axis=1) > tau ** 3) & (probs.argmax(axis=1) < NEUTRAL)


@torch.no_grad()
def pool_probabilities(model, items: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for s in range(0, len(items), batch_size):
        out.append(F.softmax(model.logits(_tensor(items[s:s + batch_size])), dim=-1).numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0, 4))
    return np.concatenate(out)


def distill_pool(model, pool: UnlabeledPool, tau: float, epoch: int = 0) -> DistilledPool:
    """Select pool items for the distilled set using unaugmented inputs in eval mode."""
    probs = pool_probabilities(model, pool.items)
    keep = np.flatnonzero(distill_mask(probs, tau)) if len(probs) else np.zeros(0, dtype=np.int64)
    if len(keep) == 0:
        log.info("distilled %s pool is empty at epoch %d", pool.modality, epoch)
    return DistilledPool(keep, epoch, pool.modality)


def select_unlabeled_pool(epoch: int, k: int, raw: UnlabeledPool, distilled: UnlabeledPool | None):
    """Raw pool before epoch k, distilled pool afterwards (raw again if it is empty)."""
    if epoch < k or distilled is None or len(distilled) == 0:
        return raw
    return distilled


def sample_unlabeled(pool: UnlabeledPool, size: int, rng: np.random.Generator) -> np.ndarray:
    n = len(pool)
    idx = rng.choice(n, size=size, replace=n < size)
    return pool.items[idx]


@dataclass
class ModalityLoss:
    total: torch.Tensor
    supervised: torch.Tensor
    unlabeled: torch.Tensor
    acceptance: float
    pool_id: str | None


def modality_loss(model, x, y, raw_pool: UnlabeledPool | None, distilled_pool: UnlabeledPool | None,
                  epoch: int, k: int, beta1: float, tau: float, unlabeled_size: int,
                  rng=None, sample_rng=None, weak: Callable = weak_view,
                  strong: Callable | None = None) -> ModalityLoss:
    """L_s + beta1 * L_u with the unlabeled batch drawn per the epoch/k case split."""
    ls = supervised_loss(model, x, y, rng, weak)
    zero = ls.new_zeros(())
    if beta1 == 0 or raw_pool is None or len(raw_pool) == 0:
        return ModalityLoss(ls, ls, zero, 0.0, None)
    pool = select_unlabeled_pool(epoch, k, raw_pool, distilled_pool)
    sample_rng = sample_rng if sample_rng is not None else rng
    u = sample_unlabeled(pool, unlabeled_size, sample_rng)
    lu, acc = unlabeled_loss(model, u, tau, rng, weak, strong)
    return ModalityLoss(ls + beta1 * lu, ls, lu, acc, pool.pool_id)


@dataclass
class LossBreakdown:
    supervised_audio: float
    supervised_face: float
    unlabeled_audio: float
    unlabeled_face: float
    loss_audio: float
    loss_face: float
    loss_fusion: float
    total: float
    acceptance_audio: float
    acceptance_face: float
    pool_audio: str | None = None
    pool_face: str | None = None

    def as_dict(self):
        return asdict(self)


@dataclass
class StepBatches:
    audio_x: np.ndarray
    audio_y: np.ndarray
    face_x: np.ndarray
    face_y: np.ndarray
    comb_audio: np.ndarray
    comb_face: np.ndarray
    comb_y: np.ndarray


@dataclass
class Pools:
    raw_audio: UnlabeledPool | None = None
    raw_face: UnlabeledPool | None = None
    distilled_audio: UnlabeledPool | None = None
    distilled_face: UnlabeledPool | None = None


@dataclass
class AugmentSettings:
    audio_policy: AugmentPolicy = AugmentPolicy()
    face_policy: AugmentPolicy = AugmentPolicy.for_landmarks()


def combined_loss(bundle: ModelBundle, batches: StepBatches, pools: Pools, config: TrainConfig,
                  epoch: int, rng, sample_rng=None, augment: AugmentSettings = AugmentSettings()):
    """Three forward passes; returns (L as a tensor, LossBreakdown)."""
    tau = config.fixmatch_threshold
    mu_b = config.unlabeled_batch_size
    la = modality_loss(bundle.audio, batches.audio_x, batches.audio_y, pools.raw_audio, pools.distilled_audio,
                       epoch, config.distill_start, config.beta1, tau, mu_b, rng, sample_rng,
                       strong=strong_view_fn(augment.audio_policy))
    lf = modality_loss(bundle.face, batches.face_x, batches.face_y, pools.raw_face, pools.distilled_face,
                       epoch, config.distill_start, config.beta1, tau, mu_b, rng, sample_rng,
                       strong=strong_view_fn(augment.face_policy))
    lc = fusion_loss(bundle, batches.comb_audio, batches.comb_face, batches.comb_y, rng)
    total = config.beta2 * (la.total + lf.total) + config.beta3 * lc
    breakdown = LossBreakdown(
        supervised_audio=la.supervised.item(), supervised_face=lf.supervised.item(),
        unlabeled_audio=la.unlabeled.item(), unlabeled_face=lf.unlabeled.item(),
        loss_audio=la.total.item(), loss_face=lf.total.item(), loss_fusion=lc.item(),
        total=total.item(), acceptance_audio=la.acceptance, acceptance_face=lf.acceptance,
        pool_audio=la.pool_id, pool_face=lf.pool_id,
    )
    return total, breakdown


def make_optimizer(bundle: ModelBundle, config: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in bundle.named_parameters():
        (no_decay if p.ndim <= 1 else decay).append(p)
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=config.lr, momentum=config.momentum, nesterov=config.nesterov,
    )


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    return base_lr * math.cos(7.0 * math.pi * step / (16.0 * max(total_steps, 1)))


def combined_step(bundle: ModelBundle, batches: StepBatches, pools: Pools, config: TrainConfig,
                  optimizer: torch.optim.Optimizer, epoch: int, rng, sample_rng=None,
                  augment: AugmentSettings = AugmentSettings()) -> LossBreakdown:
    """One joint update over all three networks.

    A non-finite loss restores the pre-step parameters and buffers and raises
    NonFiniteLossError.
    """
    snapshot = copy.deepcopy(bundle.state_dict())
    bundle.train()
    try:
        total, breakdown = combined_loss(bundle, batches, pools, config, epoch, rng, sample_rng, augment)
        _check_finite(total, "total loss")
    except NonFiniteLossError:
        bundle.load_state_dict(snapshot)
        raise
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return breakdown


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list = field(default_factory=list)
    best_epoch: int | None = None
    best_state: dict | None = None
    best_score: float = -1.0

    def restore_best(self) -> ModelBundle:
        if self.best_state is not None:
            self.bundle.load_state_dict(self.best_state)
        return self.bundle


def _subset_pool(pool: UnlabeledPool, distilled: DistilledPool, tag: str) -> UnlabeledPool:
    return pool.subset(distilled.items, pool_id=f"distilled-{tag}-e{distilled.source_epoch}")


def _val_scores(bundle, val) -> dict:
    preds = predict_heads(bundle, val)
    return {head: macro_f1(p, val.y) for head, p in preds.items()}


def train(bundle: ModelBundle, data: TrainingData, config: TrainConfig, val=None,
          augment: AugmentSettings = AugmentSettings(), distill_every: int = 1,
          log_path=None, checkpoint_dir=None, on_epoch: Callable | None = None) -> TrainResult:
    """Run ``config.total_epochs`` epochs of joint training.

    ``val`` is an optional PairedSet used for per-epoch validation F1 and for
    the best-checkpoint pointer (scored by the fusion head's macro-F1). The
    distilled pools are refreshed at the start of epoch k and every
    ``distill_every`` epochs after it. With ``config.recalibrate_bn`` the BN
    running statistics are re-estimated after every epoch, before validation
    and before the next distillation.
    """
    if distill_every < 1:
        raise ValueError("distill_every must be >= 1")
    result = TrainResult(bundle)
    if config.total_epochs == 0:
        return result
    B = config.batch_size
    seed = config.seed
    cyclers = {
        "audio": BatchCycler(len(data.audio), B, seed * 1000 + 1),
        "face": BatchCycler(len(data.face), B, seed * 1000 + 2),
        "comb": BatchCycler(len(data.combined), B, seed * 1000 + 3),
    }
    steps = config.steps_per_epoch or max(len(data.audio), len(data.face), len(data.combined)) // B
    total_steps = steps * config.total_epochs
    optimizer = make_optimizer(bundle, config)
    pools = Pools(data.unlabeled_audio, data.unlabeled_face)
    use_unlabeled = config.beta1 > 0
    cached = {"audio": None, "face": None}
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    try:
        global_step = 0
        for epoch in range(config.total_epochs):
            record = {"epoch": epoch}
            if use_unlabeled and epoch >= config.distill_start:
                refresh = (epoch - config.distill_start) % distill_every == 0
                for name, net, raw in (("audio", bundle.audio, data.unlabeled_audio),
                                       ("face", bundle.face, data.unlabeled_face)):
                    if raw is None or len(raw) == 0:
                        continue
                    if refresh:
                        cached[name] = distill_pool(net, raw, config.fixmatch_threshold, epoch)
                    dp = cached[name]
                    record[f"distilled_{name}"] = len(dp)
                    record[f"fallback_{name}"] = len(dp) == 0
                    if len(dp) == 0:
                        log.warning("epoch %d: distilled %s pool empty; using raw pool", epoch, name)
                        setattr(pools, f"distilled_{name}", None)
                    else:
                        setattr(pools, f"distilled_{name}", _subset_pool(raw, dp, name))
                        if raw.hidden_labels is not None:
                            hidden = raw.hidden_labels[dp.items]
                            record[f"distilled_{name}_nonneutral"] = float(np.mean(hidden != NEUTRAL))

            sums = {}
            for step in range(steps):
                for g in optimizer.param_groups:
                    g["lr"] = cosine_lr(config.lr, global_step, total_steps)
                ia, i_f, ic = next(cyclers["audio"]), next(cyclers["face"]), next(cyclers["comb"])
                batches = StepBatches(
                    data.audio.x[ia], data.audio.y[ia], data.face.x[i_f], data.face.y[i_f],
                    data.combined.audio[ic], data.combined.face[ic], data.combined.y[ic],
                )
                rng = np.random.default_rng([seed, 1, epoch, step])
                sample_rng = np.random.default_rng([seed, 2, epoch, step])
                bd = combined_step(bundle, batches, pools if use_unlabeled else Pools(), config,
                                   optimizer, epoch, rng, sample_rng, augment)
                for key, value in bd.as_dict().items():
                    if isinstance(value, float):
                        sums[key] = sums.get(key, 0.0) + value
                global_step += 1
            record.update({k: v / steps for k, v in sums.items()})
            if config.recalibrate_bn:
                recalibrate_bn(bundle, data)

            if val is not None and len(val):
                scores = _val_scores(bundle, val)
                record.update({f"val_f1_{h}": s for h, s in scores.items()})
                if scores["fusion"] > result.best_score:
                    result.best_score = scores["fusion"]
                    result.best_epoch = epoch
                    result.best_state = copy.deepcopy(bundle.state_dict())
            result.log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if ckpt_dir:
                torch.save(bundle.state_dict(), ckpt_dir / f"bundle_epoch{epoch:04d}.pt")
            if on_epoch:
                on_epoch(record)
    finally:
        if log_fh:
            log_fh.close()
    if val is None:
        result.best_epoch = config.total_epochs - 1
        result.best_state = copy.deepcopy(bundle.state_dict())
    return result
