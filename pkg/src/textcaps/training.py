"""Training loop: Adam, cyclic cosine learning rate, snapshot ensembling.

The learning rate restarts every ``cycle_length`` epochs:

    lr(e) = lr_min + (lr_max - lr_min) * (1 + cos(pi * (e mod c) / c)) / 2

so each cycle opens at ``lr_max``, decays along a half cosine, and the next
cycle's restart snaps back to ``lr_max``.  One model snapshot is taken at the
end of every cycle; an :class:`EnsembleModel` keeps all of them and predicts
from their averaged capsule lengths.

The objective is ``margin + w * sum_d recon_d`` where each decoder d is scored
by its configured reconstruction loss against the input images.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import capsnet, decoder as decoder_mod, losses
from .data_io import Checkpoint
from .model import TextCapsModel
from .tensor import ensure_finite, make_rng

log = logging.getLogger("textcaps")


@dataclass
class TrainConfig:
    epochs: int = 90
    cycle_length: int = 30
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int = 32
    recon_weight: float = 0.392
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "single"
    decoder_losses: tuple = ("bce",)
    retrain_epochs: int = 10
    retrain_lr: float = 1e-3
    per_class: int = 50
    unsharp_repeats: int = 10
    unsharp_amount: float = 1.0
    unsharp_sigma: float = 1.0
    unsharp_threshold: int = 1

    def __post_init__(self):
        if isinstance(self.decoder_losses, str):
            self.decoder_losses = tuple(
                k.strip() for k in self.decoder_losses.split(",") if k.strip()
            )
        else:
            self.decoder_losses = tuple(self.decoder_losses)
        if self.cycle_length < 1:
            raise ValueError("cycle_length must be >= 1")
        if self.epochs % self.cycle_length != 0:
            raise ValueError(
                f"epochs ({self.epochs}) must be a whole number of cycles of {self.cycle_length}"
            )
        if not (0.0 < self.lr_min <= self.lr_max):
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["decoder_losses"] = list(self.decoder_losses)
        return d


def cyclic_lr(epoch, cfg):
    """Learning rate for an epoch index under the cyclic cosine schedule."""
    c = cfg.cycle_length
    phase = (epoch % c) / c
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase)) / 2.0


class Adam:
    """Adam over a ParamStore; slot order is the store's fixed parameter order."""

    def __init__(self, params, cfg, names=None):
        self.params = params
        self.names = list(names) if names is not None else params.names()
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].value) for n in self.names}
        self.v = {n: np.zeros_like(params[n].value) for n in self.names}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * np.square(g)
            mhat = self.m[n] / bias1
            vhat = self.v[n] / bias2
            p.value -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)


def total_loss(lengths, labels, recons, targets, w):
    """margin(lengths, labels) + w * sum of each decoder's reconstruction loss.

    ``recons`` is a list of (loss_kind, reconstruction) pairs; every decoder is
    scored against the same ``targets`` batch.
    """
    loss = capsnet.margin_loss(lengths, labels)
    for kind, recon in recons:
        val, _ = losses.reconstruction_loss(kind, recon, targets)
        loss += w * val
    return float(loss)


def train_step(model, images, labels, cfg):
    """One optimization step's forward+backward; returns the scalar total loss.

    Gradients are accumulated into ``model.params`` (caller zeroes and steps).
    """
    C, cls_cache = model.instantiation(images)
    lengths = capsnet.capsule_lengths(C)
    loss = capsnet.margin_loss(lengths, labels)
    dlengths = capsnet.margin_loss_backward(lengths, labels)
    dC = capsnet.capsule_lengths_backward(dlengths, C)

    targets = images.astype(C.dtype, copy=False)
    masked = decoder_mod.mask_true_class(C, labels)
    dmasked = np.zeros_like(masked)
    for d, kind in enumerate(model.cfg.decoder_losses):
        recon, dec_cache = model.decode(masked, d)
        val, grad = losses.reconstruction_loss(kind, recon, targets)
        loss += cfg.recon_weight * val
        dmasked += model.decode_backward(
            (cfg.recon_weight * grad).astype(C.dtype, copy=False), dec_cache, d
        )
    dC += decoder_mod.mask_backward(dmasked, labels, model.cfg.num_classes)
    model.instantiation_backward(dC, cls_cache)
    ensure_finite(np.asarray(loss), "training loss")
    return float(loss)


@dataclass
class EnsembleModel:
    """Cycle-end snapshots of one training run, used jointly at prediction time."""

    snapshots: list  # list[TextCapsModel]

    def predict(self, images, vote=False):
        return ensemble_predict(self.snapshots, images, vote=vote)

    @property
    def final(self):
        return self.snapshots[-1]


def ensemble_predict(models, images, vote=False):
    """Predict labels from several snapshots of one architecture.

    Default: average the class-capsule length vectors across snapshots, then
    argmax.  ``vote=True`` takes a majority vote of per-snapshot predictions
    (ties resolve to the lowest label).
    """
    if isinstance(models, EnsembleModel):
        models = models.snapshots
    if not models:
        raise ValueError("ensemble_predict needs at least one model")
    if vote:
        preds = np.stack([m.predict(images) for m in models])
        counts = np.apply_along_axis(
            np.bincount, 0, preds, minlength=models[0].cfg.num_classes
        )
        return np.argmax(counts, axis=0)
    total = None
    for m in models:
        C, _ = m.instantiation(images)
        lens = capsnet.capsule_lengths(C).astype(np.float64)
        total = lens if total is None else total + lens
    return np.argmax(total / len(models), axis=-1)


def _iter_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(model, dataset, cfg, callback=None):
    """Train *model* on a :class:`LabeledImageSet`; returns an EnsembleModel.

    Deterministic for a fixed (model init, dataset, config): batch order comes
    from a generator seeded with ``cfg.seed`` and nothing else is stochastic.
    ``callback(epoch, mean_loss)`` may return True to stop after a completed
    epoch (the current weights are then snapshotted as the final cycle).
    """
    images = dataset.images[..., None].astype(model.dtype)
    labels = dataset.labels
    rng = make_rng(cfg.seed)
    opt = Adam(model.params, cfg)
    snapshots = []
    snapped_at = -1
    for epoch in range(cfg.epochs):
        lr = cyclic_lr(epoch, cfg)
        batch_losses = []
        for idx in _iter_batches(len(dataset), cfg.batch_size, rng):
            model.params.zero_grads()
            batch_losses.append(train_step(model, images[idx], labels[idx], cfg))
            opt.step(lr)
        mean_loss = float(np.mean(batch_losses)) if batch_losses else 0.0
        log.info("epoch %d lr %.3e loss %.6f", epoch, lr, mean_loss)
        if (epoch + 1) % cfg.cycle_length == 0:
            snapshots.append(model.clone())
            snapped_at = epoch
        if callback is not None and callback(epoch, mean_loss):
            if snapped_at != epoch:
                snapshots.append(model.clone())
            break
    if not snapshots:
        snapshots.append(model.clone())
    return EnsembleModel(snapshots)


def evaluate(model_or_ensemble, dataset, batch_size=64):
    """Accuracy and mean reconstruction PSNR over a labelled set.

    Reconstructions mask with the *predicted* class (labels are only used for
    the accuracy figure).  For ensembles, accuracy uses the averaged-length
    prediction and PSNR uses the final snapshot's decoder.
    """
    if isinstance(model_or_ensemble, EnsembleModel):
        ens = model_or_ensemble.snapshots
        recon_model = model_or_ensemble.final
    else:
        ens = [model_or_ensemble]
        recon_model = model_or_ensemble
    images = dataset.images[..., None].astype(recon_model.dtype)
    correct = 0
    psnrs = []
    for start in range(0, len(dataset), batch_size):
        batch = images[start : start + batch_size]
        label_batch = dataset.labels[start : start + batch_size]
        pred = ensemble_predict(ens, batch)
        correct += int(np.sum(pred == label_batch))
        C, _ = recon_model.instantiation(batch)
        masked = decoder_mod.mask_true_class(C, pred)
        recon, _ = recon_model.decode(masked, 0)
        for j in range(batch.shape[0]):
            psnrs.append(losses.psnr(recon[j], batch[j].astype(np.float64)))
    return {
        "accuracy": correct / max(len(dataset), 1),
        "mean_psnr": float(np.mean(psnrs)) if psnrs else float("nan"),
        "count": len(dataset),
    }
