"""Mini-batch Adam loop shared by the autoencoder, mapper and coupled stages."""
from __future__ import annotations

import logging
from typing import Callable, List, Optional, Tuple

import numpy as np

from .config import StageConfig
from .numerics import (
    DENSE_MSE, MASKED_MSE, AdamState, DenseNetwork, LossSpec, NumericalError, adam_step,
    backprop, dense_mse_grad, iter_batches, masked_mse,
)

log = logging.getLogger("cdrae")

Fetch = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


def evaluate_loss(net: DenseNetwork, fetch: Fetch, indices, masked: bool) -> float:
    """Masked RMSE (or dense MSE when ``masked`` is False) over ``indices``."""
    x, y = fetch(np.asarray(indices))
    pred = net.forward(x)
    if masked:
        mask = y > 0
        if not mask.any():
            return float("nan")
        return float(np.sqrt(masked_mse(pred, y, mask)))
    return dense_mse_grad(pred, y)[0]


def fit(
    net: DenseNetwork,
    fetch: Fetch,
    indices,
    stage: StageConfig,
    batch_size: int,
    rng: np.random.Generator,
    masked: bool,
    tag: str,
) -> List[float]:
    """Train ``net`` in place.

    Returns the loss curve: the full-set value before training followed by the
    mean batch loss of every epoch (as RMSE for masked losses, MSE otherwise).

    ``fetch(batch)`` returns ``(inputs, targets)`` for a batch of row indices.
    With ``masked`` the loss ignores zero targets and batches without any
    observation are skipped.
    """
    indices = np.asarray(indices)
    params = net.params()
    state = AdamState()
    loss = LossSpec(MASKED_MSE if masked else DENSE_MSE)
    history = [evaluate_loss(net, fetch, indices, masked)]
    for epoch in range(1, stage.epochs + 1):
        total, count = 0.0, 0
        for batch in iter_batches(indices, batch_size, rng):
            x, y = fetch(batch)
            mask = None
            if masked:
                mask = y > 0
                if not mask.any():
                    continue
            value, grads = backprop(net, x, y, mask, loss)
            if not np.isfinite(value):
                raise NumericalError(f"[{tag}] loss became non-finite at epoch {epoch}", stage=tag)
            total += value
            count += 1
            if stage.l2:
                # gradient of l2 * sum ||W||^2; the curve reports the data term only
                for i, layer in enumerate(net.layers):
                    grads[f"{i}.W"] += (2.0 * stage.l2) * layer.weights
            try:
                adam_step(params, grads, state, stage.lr)
            except NumericalError as exc:
                raise NumericalError(f"[{tag}] {exc}", stage=tag) from exc
        if count:
            history.append(float(np.sqrt(total / count)) if masked else total / count)
        if epoch % 10 == 0:
            log.info("[%s] epoch %d/%d %s %.6f", tag, epoch, stage.epochs,
                     "rmse" if masked else "mse", history[-1])
    return history
