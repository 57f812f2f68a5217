"""Downstream MLP classifier used for utility evaluation.

A fixed-architecture binary classifier ([256, 128, 64] hidden units, ReLU,
sigmoid output) trained with Adam on the logit form of binary cross
entropy, softplus(z) - y*z. 10% of the rows are held out for early
stopping with a patience of five epochs; the returned parameters are the
ones with the best validation loss seen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .privacy import Adam
from .rng import substream

HIDDEN = (256, 128, 64)


@dataclass
class ClassifierModel:
    params: ad.ParamSet
    hidden: tuple[int, ...]
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def predict(self, features: np.ndarray) -> np.ndarray:
        """P(y = 1) for each row."""
        z = _logits(self.params, np.asarray(features, dtype=np.float64), self.hidden)
        return 1.0 / (1.0 + np.exp(-z.data[:, 0]))


def _activations(hidden) -> list[str]:
    return ["relu"] * len(hidden) + ["identity"]


def _logits(params: ad.ParamSet, x: np.ndarray, hidden) -> ad.Tensor:
    return ad.forward_mlp(params, ad.constant(x), _activations(hidden))


def _bce_loss(params: ad.ParamSet, x: np.ndarray, y: np.ndarray, hidden) -> ad.Tensor:
    z = _logits(params, x, hidden)
    y_col = ad.constant(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    return ad.mean_all(ad.sub(ad.softplus(z), ad.mul(y_col, z)))


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    hidden: tuple[int, ...] = HIDDEN,
    lr: float = 1e-3,
    batch_size: int = 256,
    max_epochs: int = 100,
    patience: int = 5,
) -> ClassifierModel:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ContractError(f"features {x.shape} and labels {y.shape} do not align")
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise ContractError(f"labels must be 0/1, got {classes}")
    if len(classes) < 2:
        raise ContractError("training labels contain a single class")
    n = x.shape[0]
    n_val = max(1, n // 10)
    if n - n_val < 2:
        raise ContractError(f"too few rows to train on: {n}")

    perm = substream(seed, "validation").permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_tr, y_tr = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]
    if len(np.unique(y_tr)) < 2:
        raise ContractError("training split contains a single class")

    params = ad.init_mlp_params([x.shape[1], *hidden, 1], substream(seed, "classifier", 0))
    opt = Adam(lr=lr)
    state = opt.init(params)

    model = ClassifierModel(params=params, hidden=tuple(hidden))
    best_val = float("inf")
    stale = 0
    n_tr = x_tr.shape[0]
    bs = min(batch_size, n_tr)

    for epoch in range(max_epochs):
        order = substream(seed, "classifier", 1, epoch).permutation(n_tr)
        epoch_losses = []
        for start in range(0, n_tr - bs + 1, bs):
            rows = order[start : start + bs]
            loss = _bce_loss(params, x_tr[rows], y_tr[rows], hidden)
            gs = ad.grad(loss, params.tensors())
            grads = {name: g.data for name, g in zip(params.names, gs)}
            state, params = opt.step(state, params, grads)
            epoch_losses.append(loss.item())
        val_loss = _bce_loss(params, x_val, y_val, hidden).item()
        model.train_losses.append(float(np.mean(epoch_losses)))
        model.val_losses.append(val_loss)
        if val_loss < best_val - 1e-9:
            best_val = val_loss
            model.params = params
            model.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    return model
