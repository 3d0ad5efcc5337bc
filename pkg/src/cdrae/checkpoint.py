"""Self-describing JSON checkpoints for trained models.

Every network is stored layer by layer with its shape, activation and
row-major weights; LFACDR checkpoints add the item and user latent matrices
of each domain. Floats are written with ``repr`` precision, so a load
restores parameters bit for bit.
"""
from __future__ import annotations

import json
from typing import Optional, Tuple

import numpy as np

from .cacdr import CacdrModel
from .lfacdr import LfacdrDomain, LfacdrModel
from .numerics import DenseLayer, DenseNetwork

FORMAT = "cdrae-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _matrix(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": a.ravel(order="C").tolist()}


def _unmatrix(d: dict) -> np.ndarray:
    values = np.asarray(d["values"], dtype=np.float64)
    shape = tuple(d["shape"])
    if values.size != int(np.prod(shape)):
        raise CheckpointError(f"block of shape {shape} holds {values.size} values")
    return values.reshape(shape)


def network_to_dict(net: DenseNetwork) -> dict:
    return {"layers": [
        {"activation": l.activation, "weights": _matrix(l.weights), "bias": _matrix(l.bias)}
        for l in net.layers
    ]}


def network_from_dict(d: dict) -> DenseNetwork:
    return DenseNetwork([
        DenseLayer(_unmatrix(l["weights"]), _unmatrix(l["bias"]), l["activation"])
        for l in d["layers"]
    ])


def _domain_to_dict(dom: LfacdrDomain) -> dict:
    return {
        "lam": dom.lam,
        "networks": {name: network_to_dict(net) for name, net in dom.networks().items()},
        "item_latents": _matrix(dom.item_latents),
        "user_latents": _matrix(dom.user_latents),
    }


def _domain_from_dict(d: dict) -> LfacdrDomain:
    nets = {name: network_from_dict(v) for name, v in d["networks"].items()}
    return LfacdrDomain(
        item_latents=_unmatrix(d["item_latents"]),
        user_latents=_unmatrix(d["user_latents"]),
        lam=float(d["lam"]),
        **nets,
    )


def model_to_dict(method: str, model, config: Optional[dict] = None, split: Optional[dict] = None) -> dict:
    if method not in ("cacdr", "lfacdr"):
        raise CheckpointError(f"cannot checkpoint method {method!r}")
    d = {
        "format": FORMAT,
        "version": VERSION,
        "method": method,
        "shared_axis": model.shared_axis,
        "config": config or {},
        "split": split or {},
    }
    if method == "cacdr":
        d["networks"] = {name: network_to_dict(net) for name, net in model.networks().items()}
    elif method == "lfacdr":
        d["networks"] = {"mapper": network_to_dict(model.mapper)}
        d["domains"] = {"source": _domain_to_dict(model.source), "target": _domain_to_dict(model.target)}
    return d


def model_from_dict(d: dict) -> Tuple[str, object]:
    if d.get("format") != FORMAT:
        raise CheckpointError("not a cdrae checkpoint")
    if d.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
    method = d["method"]
    nets = {name: network_from_dict(v) for name, v in d["networks"].items()}
    if method == "cacdr":
        return method, CacdrModel(shared_axis=d["shared_axis"], **nets)
    if method == "lfacdr":
        return method, LfacdrModel(
            source=_domain_from_dict(d["domains"]["source"]),
            target=_domain_from_dict(d["domains"]["target"]),
            mapper=nets["mapper"],
            shared_axis=d["shared_axis"],
        )
    raise CheckpointError(f"unknown method {method!r}")


def save(path, method: str, model, config=None, split=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(method, model, config, split), fh, sort_keys=True)
        fh.write("\n")


def load(path) -> Tuple[str, object, dict]:
    """Returns ``(method, model, raw)``; ``raw`` carries the config echo and split."""
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    method, model = model_from_dict(d)
    return method, model, d
