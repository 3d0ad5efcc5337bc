"""Finite-difference verification of every backward pass the models use."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import (
    MASKED_MSE, DenseNetwork, LossSpec, backprop, grad_check, min_kink_distance,
    random_gradcheck_case,
)

TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    n_nets: int
    max_random: float
    max_stacked: float
    seconds: float

    @property
    def max_error(self) -> float:
        return max(self.max_random, self.max_stacked)

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def stacked_case(rng: np.random.Generator, n_source: int = 7, n_target: int = 6, hidden: int = 5,
                 latent: int = 3, rows: int = 4, kink_margin: float = 1e-4, max_tries: int = 200):
    """Small source-encoder -> mapper -> target-decoder stack with a sparse masked target."""
    encoder = DenseNetwork.init([n_source, hidden, latent], rng)
    mapper = DenseNetwork.init([latent, 2 * latent, latent], rng)
    decoder = DenseNetwork.init([latent, hidden, n_target], rng)
    net = encoder.then(mapper).then(decoder)
    for layer in net.layers:
        layer.bias[:] = rng.uniform(0.05, 0.2, size=layer.bias.shape)
    for _ in range(max_tries):
        # rating-like inputs: sparse, in (0, 1]
        x = np.where(rng.uniform(size=(rows, n_source)) < 0.5, rng.uniform(0.2, 1.0, (rows, n_source)), 0.0)
        if min_kink_distance(net, x) > kink_margin:
            break
    else:
        raise RuntimeError("could not sample inputs away from ReLU kinks")
    target = np.where(rng.uniform(size=(rows, n_target)) < 0.5, rng.uniform(0.2, 1.0, (rows, n_target)), 0.0)
    target.reshape(-1)[0] = 0.5
    return net, x, target, target > 0, LossSpec(MASKED_MSE, 1e-3)


def _faulty(net, x, target, mask, loss):
    _, grads = backprop(net, x, target, mask, loss)
    key = next(iter(grads))
    grads[key].reshape(-1)[0] += 1e-2 + 0.5 * abs(grads[key].reshape(-1)[0])
    return grads


def run_gradcheck(seed: int = 0, n_nets: int = 100, inject_fault: bool = False) -> GradcheckResult:
    """Check ``n_nets`` random small nets (masked and dense losses, with and
    without weight decay) plus the stacked coupled network.

    ``inject_fault`` perturbs one analytic entry of the stacked case so the
    check must fail.
    """
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for i in range(n_nets):
        case = random_gradcheck_case(rng, masked=bool(i % 2), l2_weight=1e-3 * (i % 3))
        worst = max(worst, grad_check(*case))
    net, x, target, mask, loss = stacked_case(rng)
    analytic: Optional[dict] = _faulty(net, x, target, mask, loss) if inject_fault else None
    stacked = grad_check(net, x, target, mask, loss, analytic=analytic)
    return GradcheckResult(n_nets, worst, stacked, time.perf_counter() - start)
