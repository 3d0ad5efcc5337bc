"""Small dense-network engine: forward/backward passes, masked losses, Adam.

Everything runs in float64 on numpy arrays. Networks use a row-major batch
convention: a batch ``x`` has shape ``(rows, in_size)`` and each layer computes
``act(x @ W.T + b)`` with ``W`` of shape ``(out, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

MASKED_MSE = "masked_mse"
DENSE_MSE = "dense_mse"

Params = Dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Raised when training produces non-finite values."""

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-d, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]


class DenseNetwork:
    """Ordered stack of fully-connected layers.

    Layers are held by reference, so ``a.then(b)`` builds a network whose
    parameters are the very arrays of ``a`` and ``b``; training the composite
    trains the parts.
    """

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].out_size != layers[i + 1].in_size:
                raise ShapeError(
                    f"layer {i} outputs {layers[i].out_size} units but layer {i + 1} "
                    f"expects {layers[i + 1].in_size}"
                )
        self.layers = layers

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = RELU,
        final_activation: Optional[str] = None,
    ) -> "DenseNetwork":
        """Scaled-uniform (Glorot) weights, zero biases.

        ``sizes`` lists the widths including input, e.g. ``[300, 256, 128, 64]``.
        """
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {list(sizes)}")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = activation
            if final_activation is not None and i == len(sizes) - 2:
                act = final_activation
            layers.append(DenseLayer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_size(self) -> int:
        return self.layers[0].in_size

    @property
    def out_size(self) -> int:
        return self.layers[-1].out_size

    @property
    def sizes(self) -> List[int]:
        return [self.in_size] + [layer.out_size for layer in self.layers]

    def then(self, other: "DenseNetwork") -> "DenseNetwork":
        return DenseNetwork(self.layers + other.layers)

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def params(self, prefix: str = "") -> Params:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.W"] = layer.weights
            out[f"{prefix}{i}.b"] = layer.bias
        return out

    def weight_sq_norm(self) -> float:
        return float(sum(np.vdot(l.weights, l.weights) for l in self.layers))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward_cached(self, x: np.ndarray) -> Tuple[np.ndarray, list]:
        """Forward pass keeping (input, pre-activation) per layer for backward()."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2:
            raise ShapeError(f"input must be 2-d (rows x features), got shape {h.shape}")
        cache = []
        for i, layer in enumerate(self.layers):
            if h.shape[1] != layer.in_size:
                raise ShapeError(
                    f"layer {i} expects {layer.in_size} input features, got {h.shape[1]}"
                )
            z = h @ layer.weights.T + layer.bias
            cache.append((h, z))
            h = np.maximum(z, 0.0) if layer.activation == RELU else z
        return h, cache

    def backward(
        self, cache: list, grad_out: np.ndarray, prefix: str = "", input_grad: bool = True
    ) -> Tuple[Params, Optional[np.ndarray]]:
        """Backpropagate ``grad_out`` (d loss / d output) through the cached pass.

        Returns parameter gradients keyed like ``params(prefix)`` and the
        gradient with respect to the network input (None if ``input_grad`` is
        False, which skips the costliest product for data inputs).
        """
        grads = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h, z = cache[i]
            if layer.activation == RELU:
                g = g * (z > 0)
            grads[f"{prefix}{i}.W"] = g.T @ h
            grads[f"{prefix}{i}.b"] = g.sum(axis=0)
            if i == 0 and not input_grad:
                return grads, None
            g = g @ layer.weights
        return grads, g

    def is_finite(self) -> bool:
        return all(
            np.isfinite(l.weights).all() and np.isfinite(l.bias).all() for l in self.layers
        )


def dense_forward(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


# --------------------------------------------------------------------------- losses


def _check_same_shape(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {a.shape}")


def masked_mse(pred, target, mask) -> float:
    """Mean squared error over entries where ``mask`` is set."""
    return masked_mse_grad(pred, target, mask)[0]


def masked_mse_grad(pred, target, mask) -> Tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(pred, target, mask)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked loss is undefined for an empty mask")
    # np.where, not multiplication: unobserved entries must not leak inf/nan
    diff = np.where(mask, pred - target, 0.0)
    value = float(np.sum(diff * diff) / count)
    return value, (2.0 / count) * diff


def dense_mse_grad(pred, target) -> Tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(pred, target)
    if pred.size == 0:
        raise ValueError("mean squared error of an empty array is undefined")
    diff = pred - target
    return float(np.sum(diff * diff) / diff.size), (2.0 / diff.size) * diff


def masked_rmse(pred, target, mask) -> float:
    return float(np.sqrt(masked_mse(pred, target, mask)))


@dataclass(frozen=True)
class LossSpec:
    kind: str = MASKED_MSE
    l2_weight: float = 0.0

    def __post_init__(self):
        if self.kind not in (MASKED_MSE, DENSE_MSE):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be non-negative")


def loss_and_output_grad(pred, target, mask, loss: LossSpec) -> Tuple[float, np.ndarray]:
    if loss.kind == MASKED_MSE:
        if mask is None:
            raise ValueError("masked loss requires a mask")
        return masked_mse_grad(pred, target, mask)
    if mask is not None:
        raise ValueError("dense loss does not take a mask")
    return dense_mse_grad(pred, target)


def add_l2(value: float, grads: Params, net: DenseNetwork, l2_weight: float, prefix: str = ""):
    """Add ``l2_weight * sum ||W||^2`` (weights only) to a loss and its gradients."""
    if l2_weight == 0.0:
        return value
    for i, layer in enumerate(net.layers):
        grads[f"{prefix}{i}.W"] = grads[f"{prefix}{i}.W"] + 2.0 * l2_weight * layer.weights
    return value + l2_weight * net.weight_sq_norm()


def network_loss(net: DenseNetwork, x, target, mask=None, loss: LossSpec = LossSpec()) -> float:
    pred = net.forward(x)
    value, _ = loss_and_output_grad(pred, np.asarray(target, dtype=np.float64), mask, loss)
    return value + loss.l2_weight * net.weight_sq_norm()


def backprop(
    net: DenseNetwork, x, target, mask=None, loss: LossSpec = LossSpec()
) -> Tuple[float, Params]:
    """Loss value and its gradient with respect to every parameter of ``net``."""
    pred, cache = net.forward_cached(x)
    target = np.asarray(target, dtype=np.float64)
    value, g = loss_and_output_grad(pred, target, mask, loss)
    grads, _ = net.backward(cache, g, input_grad=False)
    value = add_l2(value, grads, net, loss.l2_weight)
    return value, grads


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    lr: float,
    rows: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update, applied in place.

    ``rows`` optionally restricts the update of a named 2-d parameter to the
    given row indices (lazy update for embedding-like matrices); moments of
    the other rows are left as they are.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        idx = None if rows is None else rows.get(name)
        if idx is None:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            g2 = g * g
            g2 *= 1.0 - b2
            v += g2
            # lr * (m / c1) / (sqrt(v / c2) + eps), computed with one scratch array
            step = np.sqrt(v, out=g2)
            step *= 1.0 / np.sqrt(c2)
            step += state.eps
            np.divide(m, step, out=step)
            step *= lr / c1
            p -= step
        else:
            gi = g[idx]
            m[idx] = b1 * m[idx] + (1.0 - b1) * gi
            v[idx] = b2 * v[idx] + (1.0 - b2) * (gi * gi)
            p[idx] -= lr * (m[idx] / c1) / (np.sqrt(v[idx] / c2) + state.eps)
    return params, state


# --------------------------------------------------------------------------- gradient checking


def numeric_gradient(f: Callable[[], float], params: Params, h: float = 1e-5) -> Params:
    """Central differences of ``f`` with respect to every entry of ``params``.

    ``f`` must read the arrays in ``params`` (they are perturbed in place).
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = f()
            flat[j] = old - h
            down = f()
            flat[j] = old
            gflat[j] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(analytic: Params, numeric: Params) -> float:
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom, initial=0.0)))
    return worst


def grad_check(
    net: DenseNetwork,
    x,
    target,
    mask=None,
    loss: LossSpec = LossSpec(),
    h: float = 1e-5,
    analytic: Optional[Params] = None,
) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``analytic`` substitutes precomputed gradients (used for fault injection).
    """
    if analytic is None:
        _, analytic = backprop(net, x, target, mask, loss)
    numeric = numeric_gradient(lambda: network_loss(net, x, target, mask, loss), net.params(), h)
    return max_relative_error(analytic, numeric)


def min_kink_distance(net: DenseNetwork, x) -> float:
    """Smallest |pre-activation| over ReLU units; small values make finite differences unreliable."""
    _, cache = net.forward_cached(x)
    dist = np.inf
    for layer, (_, z) in zip(net.layers, cache):
        if layer.activation == RELU and z.size:
            dist = min(dist, float(np.min(np.abs(z))))
    return dist


def random_gradcheck_case(
    rng: np.random.Generator,
    max_layers: int = 3,
    max_units: int = 8,
    masked: bool = True,
    l2_weight: float = 0.0,
    kink_margin: float = 1e-4,
    max_tries: int = 100,
):
    """Draw a small random net and batch whose ReLU pre-activations avoid kinks.

    Inputs are re-sampled until every pre-activation sits at least
    ``kink_margin`` away from zero.
    """
    depth = int(rng.integers(1, max_layers + 1))
    sizes = [int(s) for s in rng.integers(1, max_units + 1, size=depth + 1)]
    net = DenseNetwork.init(sizes, rng)
    for layer in net.layers:
        layer.bias[:] = rng.normal(0.0, 0.1, size=layer.bias.shape)
    rows = int(rng.integers(1, 6))
    for _ in range(max_tries):
        x = rng.normal(size=(rows, sizes[0]))
        if min_kink_distance(net, x) > kink_margin:
            break
    else:
        raise RuntimeError("could not sample inputs away from ReLU kinks")
    target = rng.uniform(0.0, 1.0, size=(rows, sizes[-1]))
    mask = None
    if masked:
        mask = rng.uniform(size=target.shape) < 0.6
        mask.reshape(-1)[0] = True
    kind = MASKED_MSE if masked else DENSE_MSE
    return net, x, target, mask, LossSpec(kind, l2_weight)


def iter_batches(indices: np.ndarray, batch_size: int, rng: Optional[np.random.Generator]) -> Iterable[np.ndarray]:
    """Shuffled (when ``rng`` is given) consecutive chunks of ``indices``."""
    indices = np.asarray(indices)
    if rng is not None:
        indices = indices[rng.permutation(indices.size)]
    for start in range(0, indices.size, batch_size):
        yield indices[start:start + batch_size]
