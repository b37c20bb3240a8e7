"""Patch-based training with a modality-dropping curriculum.

Phase 1 trains every weight on class-balanced patches. After the warmup
epochs (all modalities shown) each batch sees a random subset of modalities,
biased toward dropping none or one. Phase 2 freezes everything except the
final classification layer and retrains it on patches drawn with the natural
class distribution, restoring calibrated class priors. Both phases use
early stopping on the validation cross-entropy.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .model import HemisParams, ModalityMask, all_subsets, model_backward, model_forward
from .tensor import make_rng

log = logging.getLogger(__name__)

WARMUP, DROPPING, FINETUNE = "warmup", "dropping", "finetune"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    decay: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 5
    max_epochs: int = 50
    finetune_epochs: int = 10
    patience: int = 10
    patch_size: int = 33
    batch_size: int = 64
    batches_per_epoch: int = 50
    p_keep_all: float = 0.5
    p_drop_one: float = 0.25
    drop_modalities: bool = True
    finetune_drop: bool = True
    per_case_masks: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.p_keep_all < 0 or self.p_drop_one < 0 or self.p_keep_all + self.p_drop_one > 1:
            raise ValueError("need p_keep_all, p_drop_one >= 0 with p_keep_all + p_drop_one <= 1")
        if self.warmup_epochs >= self.max_epochs:
            raise ValueError("warmup_epochs must be smaller than max_epochs")
        if self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        if self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ValueError("batch_size and batches_per_epoch must be positive")


@dataclass
class CurriculumState:
    config: TrainConfig
    rng: np.random.Generator
    epoch: int = 0
    phase: str = WARMUP

    _ORDER = (WARMUP, DROPPING, FINETUNE)

    def advance(self, phase: str):
        if self._ORDER.index(phase) < self._ORDER.index(self.phase):
            raise ValueError(f"cannot move from {self.phase} back to {phase}")
        self.phase = phase

    @property
    def dropping(self) -> bool:
        cfg = self.config
        if not cfg.drop_modalities:
            return False
        if self.phase == FINETUNE:
            return cfg.finetune_drop
        return self.phase == DROPPING and self.epoch >= cfg.warmup_epochs


def sample_modality_subset(state: CurriculumState, n: int) -> ModalityMask:
    """Full mask during warmup; afterwards keep all with ``p_keep_all``, drop
    exactly one with ``p_drop_one``, else a uniform non-empty proper subset."""
    if n < 1:
        raise ValueError("need at least one modality")
    if n == 1 or not state.dropping:
        return ModalityMask.full(n)
    cfg = state.config
    u = state.rng.random()
    if u < cfg.p_keep_all:
        return ModalityMask.full(n)
    if u < cfg.p_keep_all + cfg.p_drop_one:
        drop = int(state.rng.integers(n))
        return ModalityMask(tuple(i != drop for i in range(n)))
    bits = int(state.rng.integers(1, 2 ** n - 1))
    return ModalityMask(tuple(bool(bits >> i & 1) for i in range(n)))


class PatchSampler:
    """Draws ``(N, P, P)`` patches with the class of their centre pixel.

    Images are zero-padded by ``P // 2`` so every pixel can be a centre.
    """

    def __init__(self, cases, patch_size: int, n_classes: int):
        if patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")
        self.patch_size = patch_size
        self.n_classes = n_classes
        half = patch_size // 2
        images = np.stack([c.images for c in cases]).astype(np.float32)
        self.padded = np.pad(images, ((0, 0), (0, 0), (half, half), (half, half)))
        self.labels = np.stack([c.labels for c in cases]).astype(np.int64)
        flat = self.labels.ravel()
        self.by_class = [np.flatnonzero(flat == k) for k in range(n_classes)]

    def _decode(self, flat_idx):
        return np.unravel_index(flat_idx, self.labels.shape)

    def sample(self, batch_size: int, rng: np.random.Generator, balanced: bool):
        if balanced:
            absent = [k for k, idx in enumerate(self.by_class) if idx.size == 0]
            if absent:
                raise ValueError(f"classes {absent} never occur in the dataset; cannot balance")
            classes = rng.integers(self.n_classes, size=batch_size)
            flat = np.array([self.by_class[k][rng.integers(self.by_class[k].size)] for k in classes],
                            dtype=np.intp)
        else:
            flat = rng.integers(self.labels.size, size=batch_size)
        ci, r, c = self._decode(flat)
        p = self.patch_size
        patches = np.stack([self.padded[i, :, y:y + p, x:x + p] for i, y, x in zip(ci, r, c)])
        return patches, self.labels[ci, r, c]


def sample_balanced_patch_batch(dataset, patch_size: int, batch_size: int, rng: np.random.Generator,
                                balanced: bool, n_classes: int | None = None):
    """One-shot convenience around :class:`PatchSampler`."""
    if n_classes is None:
        n_classes = int(max(c.labels.max() for c in dataset)) + 1
    return PatchSampler(dataset, patch_size, n_classes).sample(batch_size, rng, balanced)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    valid_loss: float
    lr: float
    mask_histogram: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    params: HemisParams
    history: list
    initial_valid_loss: float
    best_epoch: int
    best_valid_loss: float

    def history_tsv(self) -> str:
        lines = ["epoch\tphase\ttrain_loss\tvalid_loss\tlr\tmask_histogram"]
        for r in self.history:
            hist = ",".join(f"{k}:{v}" for k, v in sorted(r.mask_histogram.items()))
            lines.append(f"{r.epoch}\t{r.phase}\t{r.train_loss:.6f}\t{r.valid_loss:.6f}\t{r.lr:.8g}\t{hist}")
        return "\n".join(lines) + "\n"


def _center_weights(batch: int, patch: int, dtype) -> np.ndarray:
    w = np.zeros((batch, patch, patch), dtype=dtype)
    w[:, patch // 2, patch // 2] = 1
    return w


def batch_loss_and_grads(params: HemisParams, patches, labels, mask: ModalityMask, only=None):
    """Centre-pixel cross-entropy of a patch batch and its parameter gradients."""
    b, _, p, _ = patches.shape
    probs, tape = model_forward(patches, mask, params, return_tape=True)
    full_labels = np.zeros((b, p, p), dtype=np.int64)
    full_labels[:, p // 2, p // 2] = labels
    loss, grad_logits = layers.cross_entropy_loss(probs, full_labels, _center_weights(b, p, probs.dtype))
    return loss, model_backward(grad_logits, tape, params, only=only)


def validation_loss(params: HemisParams, cases, masks) -> float:
    """Mean full-image pixelwise cross-entropy, averaged over ``masks``."""
    images = np.stack([c.images for c in cases])
    labels = np.stack([c.labels for c in cases])
    losses = []
    for mask in masks:
        probs = model_forward(images, mask, params)
        loss, _ = layers.cross_entropy_loss(probs, labels)
        losses.append(loss)
    return float(np.mean(losses))


class _EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_params = None
        self.best_epoch = -1
        self.stale = 0

    def update(self, loss: float, params: HemisParams, epoch: int) -> bool:
        """Record an epoch; returns True when patience is exhausted."""
        if loss < self.best_loss:
            self.best_loss, self.best_params, self.best_epoch = loss, params.copy(), epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def train(params: HemisParams, train_cases, valid_cases, config: TrainConfig) -> TrainResult:
    """Two-phase training; returns the best-validation parameters and history."""
    params = params.copy()
    n_mod = params.config.n_modalities
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    state = CurriculumState(config, make_rng(seeds[0]))
    patch_rng = make_rng(seeds[1])
    sampler = PatchSampler(train_cases, config.patch_size, params.config.n_classes)
    valid_masks = all_subsets(n_mod) if config.drop_modalities else [ModalityMask.full(n_mod)]

    initial = validation_loss(params, valid_cases, valid_masks)
    history = []
    stopper = _EarlyStopping(config.patience)
    stopper.update(initial, params, 0)
    stopper.stale = 0

    def run_epoch(opt, balanced, only):
        losses, hist = [], Counter()
        lr = opt.current_lr
        for b in range(config.batches_per_epoch):
            patches, labels = sampler.sample(config.batch_size, patch_rng, balanced)
            if config.per_case_masks:
                masks = [sample_modality_subset(state, n_mod) for _ in range(len(labels))]
            else:
                masks = [sample_modality_subset(state, n_mod)] * len(labels)
            hist.update(m.key for m in masks)
            groups = {}
            for i, m in enumerate(masks):
                groups.setdefault(m, []).append(i)
            loss, grads = 0.0, None
            for m, idx in groups.items():
                frac = len(idx) / len(labels)
                gl, gg = batch_loss_and_grads(params, patches[idx], labels[idx], m, only)
                loss += frac * gl
                if grads is None:
                    grads = {k: frac * v for k, v in gg.items()}
                else:
                    for k, v in gg.items():
                        grads[k] += frac * v
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {state.epoch}, batch {b}, phase {state.phase}")
            layers.sgd_nesterov_step(params.tensors, grads, opt)
            losses.append(loss)
        return float(np.mean(losses)), lr, dict(hist)

    def new_opt():
        return layers.SgdState(config.learning_rate, config.momentum, config.decay, config.weight_decay)

    # phase 1: all weights, balanced patches
    opt = new_opt()
    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch - 1
        if state.epoch >= config.warmup_epochs and config.drop_modalities:
            state.advance(DROPPING)
        train_loss, lr, hist = run_epoch(opt, balanced=True, only=None)
        vloss = validation_loss(params, valid_cases, valid_masks)
        history.append(EpochRecord(epoch, state.phase, train_loss, vloss, lr, hist))
        log.info("epoch %d %s train %.4f valid %.4f", epoch, state.phase, train_loss, vloss)
        if stopper.update(vloss, params, epoch):
            break
    params = stopper.best_params.copy()

    # phase 2: final layer only, natural class distribution
    state.advance(FINETUNE)
    stopper.stale = 0
    opt = new_opt()
    start = len(history)
    for i in range(config.finetune_epochs):
        state.epoch += 1
        epoch = start + i + 1
        train_loss, lr, hist = run_epoch(opt, balanced=False, only=("C4",))
        vloss = validation_loss(params, valid_cases, valid_masks)
        history.append(EpochRecord(epoch, FINETUNE, train_loss, vloss, lr, hist))
        log.info("epoch %d finetune train %.4f valid %.4f", epoch, train_loss, vloss)
        if stopper.update(vloss, params, epoch):
            break

    return TrainResult(stopper.best_params.copy(), history, initial, stopper.best_epoch, stopper.best_loss)

