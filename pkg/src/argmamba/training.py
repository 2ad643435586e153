"""Adam + cosine-annealed training loop and evaluation helpers."""
import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import to_model_inputs
from .metrics import ConfusionMatrix, confusion, iou_per_class, oa
from .network import segmentation_loss


class NonFiniteLossError(RuntimeError):
    def __init__(self, msg, epoch, batch_ids):
        super().__init__(msg)
        self.epoch = epoch
        self.batch_ids = batch_ids


def cosine_lr(step, total, lr_max=1e-4, lr_min=1e-6):
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total``."""
    if total <= 1:
        return lr_max
    t = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t))


@dataclass
class TrainSettings:
    lr: float = 1e-4
    lr_min: float = 1e-6
    epochs: int = 50
    batch: int = 8
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def train(model, train_samples, settings, val_samples=None, on_epoch=None):
    """Train in place; returns per-epoch history records.

    The learning rate follows :func:`cosine_lr` over the total number of
    optimizer steps. ``on_epoch(record, model)`` is called after each epoch.
    """
    dtype = next(model.parameters()).dtype
    torch.manual_seed(settings.seed)
    rng = np.random.default_rng(settings.seed)
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr, betas=tuple(settings.betas), eps=settings.eps)
    optical, dsm, labels = to_model_inputs(train_samples, dtype)
    steps_per_epoch = -(-len(train_samples) // settings.batch)
    total = settings.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(settings.epochs):
        model.train()
        epoch_lr = cosine_lr(step, total, settings.lr, settings.lr_min)
        losses = []
        for idx in _batches(len(train_samples), settings.batch, rng):
            lr = cosine_lr(step, total, settings.lr, settings.lr_min)
            for g in opt.param_groups:
                g["lr"] = lr
            sel = torch.as_tensor(idx)
            out = model(optical[sel], dsm[sel])
            loss = segmentation_loss(out, labels[sel], model.cfg)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, step {step}", epoch,
                                         [int(i) for i in idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        record = {"epoch": epoch, "lr": epoch_lr, "train_loss": float(np.mean(losses)), "steps": step}
        if val_samples:
            cm = evaluate(model, val_samples)
            record["val_oa"] = oa(cm)
            record["val_miou"] = iou_per_class(cm)[1]
        history.append(record)
        if on_epoch is not None:
            on_epoch(record, model)
    return history


@torch.no_grad()
def predict(model, samples, batch=8):
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for i in range(0, len(samples), batch):
        optical, dsm, _ = to_model_inputs(samples[i:i + batch], dtype)
        preds.append(model(optical, dsm).logits.argmax(dim=-3).numpy())
    return np.concatenate(preds)


def evaluate(model, samples, batch=8):
    preds = predict(model, samples, batch)
    cm = ConfusionMatrix.empty(model.cfg.num_classes)
    for p, s in zip(preds, samples):
        cm = cm + confusion(p, s.labels, model.cfg.num_classes)
    return cm
