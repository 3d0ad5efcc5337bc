"""Coupled-autoencoder cross-domain recommender (CACDR).

Two autoencoders learn representations of the shared-axis rating rows of each
domain, an MLP maps source representations onto target ones, and a final
coupled stage fine-tunes source encoder -> mapper -> target decoder end to end
on the target ratings. Cold-start rows are predicted through that chain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .config import CacdrConfig, ConfigError
from .data import DomainPair
from .numerics import DenseNetwork
from .training import fit


@dataclass
class CacdrModel:
    source_encoder: DenseNetwork
    source_decoder: DenseNetwork
    target_encoder: DenseNetwork
    target_decoder: DenseNetwork
    mapper: DenseNetwork
    shared_axis: str
    history: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        k = self.source_encoder.out_size
        if not (self.mapper.in_size == k == self.source_decoder.in_size
                and self.mapper.out_size == self.target_decoder.in_size == self.target_encoder.out_size):
            raise ConfigError("latent widths of encoders, mapper and decoders disagree")

    @property
    def latent_dim(self) -> int:
        return self.source_encoder.out_size

    def coupled_network(self) -> DenseNetwork:
        """Target decoder after mapper after source encoder, sharing parameters."""
        return self.source_encoder.then(self.mapper).then(self.target_decoder)

    def networks(self) -> Dict[str, DenseNetwork]:
        return {
            "source_encoder": self.source_encoder,
            "source_decoder": self.source_decoder,
            "target_encoder": self.target_encoder,
            "target_decoder": self.target_decoder,
            "mapper": self.mapper,
        }


def build_model(pair: DomainPair, config: CacdrConfig, seed: Optional[int] = None) -> CacdrModel:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    n_src = pair.source.axis_size(pair.other_axis)
    n_tgt = pair.target.axis_size(pair.other_axis)
    return CacdrModel(
        source_encoder=DenseNetwork.init(config.encoder_sizes(n_src), rng),
        source_decoder=DenseNetwork.init(config.decoder_sizes(n_src), rng),
        target_encoder=DenseNetwork.init(config.encoder_sizes(n_tgt), rng),
        target_decoder=DenseNetwork.init(config.decoder_sizes(n_tgt), rng),
        mapper=DenseNetwork.init(config.mapper_sizes(), rng),
        shared_axis=pair.shared_axis,
    )


def _check_train(train_idx) -> np.ndarray:
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("no training entities")
    return train_idx


def init_stage(
    pair: DomainPair,
    train_idx,
    config: CacdrConfig,
    seed: Optional[int] = None,
    model: Optional[CacdrModel] = None,
) -> CacdrModel:
    """Independent pre-training: source AE, target AE, then the mapper.

    The source autoencoder sees every shared entity (the source domain is
    never masked); the target autoencoder and the mapper see training
    entities only.
    """
    train_idx = _check_train(train_idx)
    seed = config.seed if seed is None else seed
    if model is None:
        model = build_model(pair, config, seed)
    rng = np.random.default_rng([seed, 1])
    stage, bs = config.init, config.batch_size

    def src_fetch(idx):
        rows = pair.source_rows(idx)
        return rows, rows

    def tgt_fetch(idx):
        rows = pair.target_rows(idx)
        return rows, rows

    model.history["init_source"] = fit(
        model.source_encoder.then(model.source_decoder), src_fetch,
        np.arange(pair.n_shared), stage, bs, rng, masked=True, tag="cacdr/init/source")
    model.history["init_target"] = fit(
        model.target_encoder.then(model.target_decoder), tgt_fetch,
        train_idx, stage, bs, rng, masked=True, tag="cacdr/init/target")

    src_codes = model.source_encoder(pair.source_rows(train_idx))
    tgt_codes = model.target_encoder(pair.target_rows(train_idx))
    pos = np.arange(train_idx.size)
    model.history["init_mapper"] = fit(
        model.mapper, lambda b: (src_codes[b], tgt_codes[b]), pos, stage, bs, rng,
        masked=False, tag="cacdr/init/mapper")
    return model


def coupled_stage(
    model: CacdrModel,
    pair: DomainPair,
    train_idx,
    config: CacdrConfig,
    seed: Optional[int] = None,
) -> CacdrModel:
    """Jointly fine-tune source encoder, mapper and target decoder.

    The objective is the masked error between observed target ratings of the
    training entities and the chained prediction from their source rows. The
    source decoder and target encoder are not touched.
    """
    train_idx = _check_train(train_idx)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 2])

    def fetch(idx):
        return pair.source_rows(idx), pair.target_rows(idx)

    model.history["coupled"] = fit(
        model.coupled_network(), fetch, train_idx, config.coupled, config.batch_size, rng,
        masked=True, tag="cacdr/coupled")
    return model


def predict_cold_start(model: CacdrModel, source_rows) -> np.ndarray:
    """Target-domain rating rows for entities known only through their source rows."""
    x = np.asarray(source_rows, dtype=np.float64)
    codes = model.mapper(model.source_encoder(x))
    return np.clip(model.target_decoder(codes), 0.0, 1.0)


def train(pair: DomainPair, train_idx, config: CacdrConfig, seed: Optional[int] = None,
          use_init: bool = True, use_coupled: bool = True) -> CacdrModel:
    """Full two-stage procedure; either stage can be switched off for ablations."""
    seed = config.seed if seed is None else seed
    model = build_model(pair, config, seed)
    if use_init:
        init_stage(pair, train_idx, config, seed, model)
    if use_coupled:
        coupled_stage(model, pair, train_idx, config, seed)
    return model
