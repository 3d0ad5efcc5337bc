"""Latent-factor coupled-autoencoder recommender (LFACDR).

Each domain owns an item autoencoder, a user autoencoder and two free
latent-factor matrices X (items x k) and Y (users x k). The latents are tied
softly to the encoder outputs, decoded back to the rating rows, and their
product X @ Y.T is fitted to the observed ratings. An MLP maps the source
latents of the shared entities onto the target ones; a coupled stage then
optimizes the mapped bilinear prediction directly.

Internally everything is expressed along the *shared* axis: in item mode the
shared latents are X and the "other" latents Y, in user mode the roles swap.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ConfigError, LfacdrConfig
from .data import ITEMS, USERS, DomainPair, RatingMatrix
from .numerics import (
    AdamState, DenseNetwork, NumericalError, Params, adam_step, add_l2, dense_mse_grad,
    masked_mse_grad,
)
from .training import fit

log = logging.getLogger("cdrae")

NETS = ("item_encoder", "item_decoder", "user_encoder", "user_decoder")


@dataclass
class LfacdrDomain:
    item_encoder: DenseNetwork
    item_decoder: DenseNetwork
    user_encoder: DenseNetwork
    user_decoder: DenseNetwork
    item_latents: np.ndarray
    user_latents: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        k = self.item_encoder.out_size
        if self.item_latents.ndim != 2 or self.user_latents.ndim != 2:
            raise ConfigError("latent matrices must be 2-d")
        if self.item_latents.shape[1] != k or self.user_latents.shape[1] != k:
            raise ConfigError("latent widths must equal the encoder output width")
        if self.item_encoder.in_size != self.user_latents.shape[0]:
            raise ConfigError("item encoder input must have one entry per user")
        if self.user_encoder.in_size != self.item_latents.shape[0]:
            raise ConfigError("user encoder input must have one entry per item")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")

    @property
    def n_items(self) -> int:
        return self.item_latents.shape[0]

    @property
    def n_users(self) -> int:
        return self.user_latents.shape[0]

    def networks(self) -> Dict[str, DenseNetwork]:
        return {name: getattr(self, name) for name in NETS}

    def params(self, prefix: str = "") -> Params:
        out = {}
        for name, net in self.networks().items():
            out.update(net.params(f"{prefix}{name}."))
        out[f"{prefix}item_latents"] = self.item_latents
        out[f"{prefix}user_latents"] = self.user_latents
        return out

    def encoder(self, axis: str) -> DenseNetwork:
        return self.item_encoder if axis == ITEMS else self.user_encoder

    def latents(self, axis: str) -> np.ndarray:
        return self.item_latents if axis == ITEMS else self.user_latents


def _other(axis: str) -> str:
    return USERS if axis == ITEMS else ITEMS


@dataclass
class LfacdrModel:
    source: LfacdrDomain
    target: LfacdrDomain
    mapper: DenseNetwork
    shared_axis: str
    history: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        k = self.source.item_latents.shape[1]
        if self.target.item_latents.shape[1] != k:
            raise ConfigError("source and target must share the latent width")
        if self.mapper.in_size != k or self.mapper.out_size != k:
            raise ConfigError("mapper must map k -> k")

    @property
    def latent_dim(self) -> int:
        return self.mapper.in_size


# --------------------------------------------------------------------------- joint objective


def _as_dense(ratings) -> np.ndarray:
    if isinstance(ratings, RatingMatrix):
        return ratings.dense()
    return np.asarray(ratings, dtype=np.float64)


def _tie(latent_rows, encoder: DenseNetwork, inputs, prefix, grads):
    """Dense MSE between free latents and encoder outputs; returns (value, d/d latent rows)."""
    enc, cache = encoder.forward_cached(inputs)
    value, g = dense_mse_grad(latent_rows, enc)
    grads.update(encoder.backward(cache, -g, prefix, input_grad=False)[0])
    return value, g


def _decode(decoder: DenseNetwork, latent_rows, target_rows, prefix, grads):
    """Masked reconstruction of rating rows from latents; returns (value, d/d latent rows)."""
    pred, cache = decoder.forward_cached(latent_rows)
    mask = target_rows > 0
    if not mask.any():
        for name, p in decoder.params(prefix).items():
            grads[name] = np.zeros_like(p)
        return 0.0, np.zeros_like(latent_rows)
    value, g = masked_mse_grad(pred, target_rows, mask)
    pgrads, g_in = decoder.backward(cache, g, prefix)
    grads.update(pgrads)
    return value, g_in


def _bilinear(left, right, block):
    """Masked MSE of left @ right.T against ``block``; returns value and both input grads."""
    mask = block > 0
    if not mask.any():
        return 0.0, np.zeros_like(left), np.zeros_like(right)
    value, g = masked_mse_grad(left @ right.T, block, mask)
    return value, g @ right, g.T @ left


def joint_latent_loss(
    domain: LfacdrDomain,
    ratings,
    items=None,
    users=None,
    l2: float = 0.0,
) -> Tuple[float, Params]:
    """Five-term per-domain objective and its gradients.

    Sum of masked item-row reconstruction from X, masked user-row
    reconstruction from Y, the two latent/encoder ties, and lambda times the
    masked fit of X @ Y.T to the ratings, plus ``l2`` on network weights.
    ``items`` / ``users`` select the latent rows of this (mini-)batch; the
    gradients of latent rows outside the batch are zero.
    """
    if domain.lam < 0:
        raise ValueError("lambda must be non-negative")
    if isinstance(ratings, RatingMatrix):
        I = np.arange(domain.n_items) if items is None else np.asarray(items)
        J = np.arange(domain.n_users) if users is None else np.asarray(users)
        M = ratings.item_rows(I)
        U = ratings.user_rows(J)
    else:
        R = _as_dense(ratings)
        I = np.arange(R.shape[0]) if items is None else np.asarray(items)
        J = np.arange(R.shape[1]) if users is None else np.asarray(users)
        M = R[I]
        U = R[:, J].T
    X, Y = domain.item_latents[I], domain.user_latents[J]
    grads: Params = {}
    v1, gx = _decode(domain.item_decoder, X, M, "item_decoder.", grads)
    v2, gy = _decode(domain.user_decoder, Y, U, "user_decoder.", grads)
    v3, gy3 = _tie(Y, domain.user_encoder, U, "user_encoder.", grads)
    v4, gx4 = _tie(X, domain.item_encoder, M, "item_encoder.", grads)
    v5, gx5, gy5 = _bilinear(X, Y, M[:, J])
    gx = gx + gx4 + domain.lam * gx5
    gy = gy + gy3 + domain.lam * gy5
    value = v1 + v2 + v3 + v4 + domain.lam * v5
    for name, net in domain.networks().items():
        value = add_l2(value, grads, net, l2, f"{name}.")
    grads["item_latents"] = _scatter_rows(domain.item_latents, I, gx)
    grads["user_latents"] = _scatter_rows(domain.user_latents, J, gy)
    return value, grads


def bilinear_rmse(domain: LfacdrDomain, ratings: RatingMatrix, items=None) -> float:
    """RMSE of X @ Y.T on the observed ratings (optionally only some item rows)."""
    I = np.arange(domain.n_items) if items is None else np.asarray(items)
    block = ratings.item_rows(I)
    mask = block > 0
    pred = domain.item_latents[I] @ domain.user_latents.T
    return float(np.sqrt(np.mean((pred - block)[mask] ** 2)))


# --------------------------------------------------------------------------- construction


def build_domain(ratings: RatingMatrix, config: LfacdrConfig, rng: np.random.Generator) -> LfacdrDomain:
    """Seeded networks; latents start as the encoder outputs of the full rating rows."""
    m, n = ratings.shape
    item_encoder = DenseNetwork.init(config.encoder_sizes(n), rng)
    item_decoder = DenseNetwork.init(config.decoder_sizes(n), rng)
    user_encoder = DenseNetwork.init(config.encoder_sizes(m), rng)
    user_decoder = DenseNetwork.init(config.decoder_sizes(m), rng)
    return LfacdrDomain(
        item_encoder, item_decoder, user_encoder, user_decoder,
        item_encoder(ratings.item_rows()), user_encoder(ratings.user_rows()), config.lam,
    )


def build_model(pair: DomainPair, config: LfacdrConfig, seed: Optional[int] = None) -> LfacdrModel:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    source = build_domain(pair.source, config, rng)
    target = build_domain(pair.target, config, rng)
    mapper = DenseNetwork.init(config.mapper_sizes(), rng)
    return LfacdrModel(source, target, mapper, pair.shared_axis)


def _paired_batches(a: np.ndarray, b: np.ndarray, batch_size: int, rng):
    """Split shuffled ``a`` and ``b`` into the same number of chunks."""
    nb = max(-(-a.size // batch_size), -(-b.size // batch_size), 1)
    a = a[rng.permutation(a.size)]
    b = b[rng.permutation(b.size)]
    return list(zip(np.array_split(a, nb), np.array_split(b, nb)))


def _scatter_rows(shape_like: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    out = np.zeros_like(shape_like)
    if np.unique(idx).size == idx.size:
        out[idx] = rows
    else:
        np.add.at(out, idx, rows)
    return out


def _check(value, tag, epoch):
    if not np.isfinite(value):
        raise NumericalError(f"[{tag}] loss became non-finite at epoch {epoch}", stage=tag)


def _adam(params, grads, state, lr, rows, tag):
    try:
        adam_step(params, grads, state, lr, rows)
    except NumericalError as exc:
        raise NumericalError(f"[{tag}] {exc}", stage=tag) from exc


def train_domain(
    domain: LfacdrDomain,
    ratings: RatingMatrix,
    config: LfacdrConfig,
    rng: np.random.Generator,
    items=None,
    users=None,
    tag: str = "lfacdr/init",
) -> List[float]:
    """Minimize the joint objective over all four networks and both latent matrices."""
    I = np.arange(domain.n_items) if items is None else np.asarray(items)
    J = np.arange(domain.n_users) if users is None else np.asarray(users)
    stage = config.init
    params = domain.params()
    state = AdamState()
    history = [joint_latent_loss(domain, ratings, I, J)[0]]
    for epoch in range(1, stage.epochs + 1):
        losses = []
        for bi, bj in _paired_batches(I, J, config.batch_size, rng):
            value, grads = joint_latent_loss(domain, ratings, bi, bj, stage.l2)
            _check(value, tag, epoch)
            losses.append(value)
            _adam(params, grads, state, stage.lr, {"item_latents": bi, "user_latents": bj}, tag)
        history.append(float(np.mean(losses)))
        if epoch % 10 == 0:
            log.info("[%s] epoch %d/%d loss %.6f", tag, epoch, stage.epochs, history[-1])
    return history


def _check_train(train_idx) -> np.ndarray:
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("no training entities")
    return train_idx


def init_stage(
    pair: DomainPair,
    train_idx,
    config: LfacdrConfig,
    seed: Optional[int] = None,
    model: Optional[LfacdrModel] = None,
) -> LfacdrModel:
    """Per-domain latent-factor training, then the mapper between shared latents.

    The source domain is trained on every entity; in the target domain only
    training entities take part on the shared axis.
    """
    train_idx = _check_train(train_idx)
    seed = config.seed if seed is None else seed
    if model is None:
        model = build_model(pair, config, seed)
    rng = np.random.default_rng([seed, 1])
    axis = pair.shared_axis
    model.history["init_source"] = train_domain(
        model.source, pair.source, config, rng, tag="lfacdr/init/source")
    restrict = {"items": train_idx} if axis == ITEMS else {"users": train_idx}
    model.history["init_target"] = train_domain(
        model.target, pair.target, config, rng, tag="lfacdr/init/target", **restrict)

    src = model.source.latents(axis)
    tgt = model.target.latents(axis)
    model.history["init_mapper"] = fit(
        model.mapper, lambda b: (src[train_idx[b]], tgt[train_idx[b]]),
        np.arange(train_idx.size), config.init, config.batch_size, rng,
        masked=False, tag="lfacdr/init/mapper")
    return model


# --------------------------------------------------------------------------- coupled stage


def coupled_loss(model: LfacdrModel, pair: DomainPair, shared=None, other=None,
                 l2: float = 0.0) -> Tuple[float, Params]:
    """Coupled objective along the shared axis and its gradients.

    Masked fit of F(P_s) @ Q_t.T to the target ratings (P_s: source latents of
    the shared entities, Q_t: target latents of the other axis) plus the two
    ties P_s ~ source shared-axis encoder and Q_t ~ target other-axis encoder.
    Gradient keys: ``mapper.*``, ``source_encoder.*``, ``target_encoder.*``,
    ``source_latents``, ``target_latents``.
    """
    axis = pair.shared_axis
    oth = _other(axis)
    S = np.arange(pair.n_shared) if shared is None else np.asarray(shared)
    O = np.arange(pair.target.axis_size(oth)) if other is None else np.asarray(other)
    src_enc = model.source.encoder(axis)
    tgt_enc = model.target.encoder(oth)
    P = model.source.latents(axis)[S]
    Q = model.target.latents(oth)[O]
    grads: Params = {}

    mapped, cache = model.mapper.forward_cached(P)
    block = pair.target.rows(axis, S)[:, O]
    v1, g_mapped, gq = _bilinear(mapped, Q, block)
    mg, gp = model.mapper.backward(cache, g_mapped, "mapper.")
    grads.update(mg)
    v2, gp2 = _tie(P, src_enc, pair.source.rows(axis, S), "source_encoder.", grads)
    v3, gq3 = _tie(Q, tgt_enc, pair.target.rows(oth, O), "target_encoder.", grads)
    value = v1 + v2 + v3
    value = add_l2(value, grads, model.mapper, l2, "mapper.")
    value = add_l2(value, grads, src_enc, l2, "source_encoder.")
    value = add_l2(value, grads, tgt_enc, l2, "target_encoder.")
    grads["source_latents"] = _scatter_rows(model.source.latents(axis), S, gp + gp2)
    grads["target_latents"] = _scatter_rows(model.target.latents(oth), O, gq + gq3)
    return value, grads


def coupled_params(model: LfacdrModel) -> Params:
    axis = model.shared_axis
    oth = _other(axis)
    out = {}
    out.update(model.mapper.params("mapper."))
    out.update(model.source.encoder(axis).params("source_encoder."))
    out.update(model.target.encoder(oth).params("target_encoder."))
    out["source_latents"] = model.source.latents(axis)
    out["target_latents"] = model.target.latents(oth)
    return out


def _coupled_stage(model: LfacdrModel, pair: DomainPair, train_idx, config: LfacdrConfig,
                   seed: Optional[int]) -> LfacdrModel:
    train_idx = _check_train(train_idx)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 2])
    tag = f"lfacdr/coupled/{pair.shared_axis}"
    stage = config.coupled
    others = np.arange(pair.target.axis_size(_other(pair.shared_axis)))
    params = coupled_params(model)
    state = AdamState()
    history = [coupled_loss(model, pair, train_idx, others)[0]]
    for epoch in range(1, stage.epochs + 1):
        losses = []
        for bs, bo in _paired_batches(train_idx, others, config.batch_size, rng):
            value, grads = coupled_loss(model, pair, bs, bo, stage.l2)
            _check(value, tag, epoch)
            losses.append(value)
            _adam(params, grads, state, stage.lr,
                  {"source_latents": bs, "target_latents": bo}, tag)
        history.append(float(np.mean(losses)))
        if epoch % 10 == 0:
            log.info("[%s] epoch %d/%d loss %.6f", tag, epoch, stage.epochs, history[-1])
    model.history["coupled"] = history
    return model


def coupled_stage_items(model: LfacdrModel, pair: DomainPair, train_idx, config: LfacdrConfig,
                        seed: Optional[int] = None) -> LfacdrModel:
    """Item-level coupling: F(X_s) @ Y_t.T against target ratings, with encoder ties."""
    if pair.shared_axis != ITEMS or model.shared_axis != ITEMS:
        raise ValueError("coupled_stage_items requires a pair sharing items")
    return _coupled_stage(model, pair, train_idx, config, seed)


def coupled_stage_users(model: LfacdrModel, pair: DomainPair, train_idx, config: LfacdrConfig,
                        seed: Optional[int] = None) -> LfacdrModel:
    """User-level coupling: X_t @ F(Y_s).T against target ratings, with encoder ties."""
    if pair.shared_axis != USERS or model.shared_axis != USERS:
        raise ValueError("coupled_stage_users requires a pair sharing users")
    return _coupled_stage(model, pair, train_idx, config, seed)


def coupled_stage(model, pair, train_idx, config, seed=None) -> LfacdrModel:
    if pair.shared_axis == ITEMS:
        return coupled_stage_items(model, pair, train_idx, config, seed)
    return coupled_stage_users(model, pair, train_idx, config, seed)


# --------------------------------------------------------------------------- prediction


def mapped_latents(model: LfacdrModel, source_rows) -> np.ndarray:
    """Target-domain shared latents estimated from source rating rows."""
    enc = model.source.encoder(model.shared_axis)
    return model.mapper(enc(np.asarray(source_rows, dtype=np.float64)))


def predict_shared_rows(model: LfacdrModel, source_rows) -> np.ndarray:
    """Predicted target rows along the shared axis, one per source row, clipped to [0, 1]."""
    other = model.target.latents(_other(model.shared_axis))
    return np.clip(mapped_latents(model, source_rows) @ other.T, 0.0, 1.0)


def predict_item_level(model: LfacdrModel, source_item_rows) -> np.ndarray:
    """Rows of target ratings (items x target users) for items seen only in the source."""
    if model.shared_axis != ITEMS:
        raise ValueError("item-level prediction needs a model trained on shared items")
    return predict_shared_rows(model, source_item_rows)


def predict_user_level(model: LfacdrModel, source_user_rows) -> np.ndarray:
    """Columns of target ratings (target items x users) for users seen only in the source."""
    if model.shared_axis != USERS:
        raise ValueError("user-level prediction needs a model trained on shared users")
    return predict_shared_rows(model, source_user_rows).T


def train(pair: DomainPair, train_idx, config: LfacdrConfig, seed: Optional[int] = None,
          use_init: bool = True, use_coupled: bool = True) -> LfacdrModel:
    seed = config.seed if seed is None else seed
    model = build_model(pair, config, seed)
    if use_init:
        init_stage(pair, train_idx, config, seed, model)
    if use_coupled:
        coupled_stage(model, pair, train_idx, config, seed)
    return model
