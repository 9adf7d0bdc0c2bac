"""Dense hourglass network with a bottleneck tap and hand-written backprop.

Parameters of every layer live in one contiguous float64 buffer
(``Network.params``); ``DenseLayer.weights`` and ``DenseLayer.bias`` are views
into it. Gradients use the same layout, which keeps the Adam update a handful
of vectorized operations instead of one loop per array.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fairvic.errors import InvalidArgumentError, ShapeError


class Activation(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in, out), view into Network.params
    bias: np.ndarray  # (out,), view into Network.params
    activation: Activation

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]


def _layout(widths: Sequence[int]) -> list[tuple[slice, slice]]:
    spans = []
    offset = 0
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        w = slice(offset, offset + n_in * n_out)
        offset += n_in * n_out
        b = slice(offset, offset + n_out)
        offset += n_out
        spans.append((w, b))
    return spans


def _n_params(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def _split(buf: np.ndarray, widths: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [
        (buf[w].reshape(n_in, n_out), buf[b])
        for (w, b), n_in, n_out in zip(_layout(widths), widths[:-1], widths[1:])
    ]


@dataclass
class Network:
    widths: tuple[int, ...]
    params: np.ndarray
    layers: list[DenseLayer]
    bottleneck_index: int
    dropout_rate: float = 0.25
    l1_coeff: float = 1e-4
    l2_coeff: float = 1e-3
    bottleneck_activation: Activation = Activation.RELU

    @classmethod
    def from_params(
        cls,
        widths: Sequence[int],
        params: np.ndarray,
        *,
        dropout_rate: float = 0.25,
        l1_coeff: float = 1e-4,
        l2_coeff: float = 1e-3,
        bottleneck_activation: Activation | str = Activation.RELU,
    ) -> "Network":
        widths = tuple(int(w) for w in widths)
        _check_widths(widths)
        if not 0.0 <= dropout_rate < 1.0:
            raise InvalidArgumentError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        if l1_coeff < 0 or l2_coeff < 0:
            raise InvalidArgumentError("regularization coefficients must be nonnegative")
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (_n_params(widths),):
            raise ShapeError(
                f"expected {_n_params(widths)} parameters for widths {widths}, got {params.shape}"
            )
        n_layers = len(widths) - 1
        hidden = widths[1:-1]
        bottleneck = int(np.argmin(hidden))
        layers = []
        for k, (w, b) in enumerate(_split(params, widths)):
            if k == n_layers - 1:
                act = Activation.SIGMOID
            elif k == bottleneck:
                act = Activation(bottleneck_activation)
            else:
                act = Activation.RELU
            layers.append(DenseLayer(w, b, act))
        return cls(widths, params, layers, bottleneck, float(dropout_rate),
                   float(l1_coeff), float(l2_coeff), Activation(bottleneck_activation))

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def embedding_width(self) -> int:
        return self.widths[self.bottleneck_index + 1]

    def copy(self) -> "Network":
        return Network.from_params(
            self.widths, self.params.copy(), dropout_rate=self.dropout_rate,
            l1_coeff=self.l1_coeff, l2_coeff=self.l2_coeff,
            bottleneck_activation=self.bottleneck_activation,
        )

    def weight_mask(self) -> np.ndarray:
        """Boolean mask over ``params`` selecting weights (not biases)."""
        mask = np.zeros(self.params.shape, dtype=bool)
        for w, _ in _layout(self.widths):
            mask[w] = True
        return mask


@dataclass
class GradientSet:
    widths: tuple[int, ...]
    flat: np.ndarray

    @classmethod
    def zeros_like(cls, net: Network) -> "GradientSet":
        return cls(net.widths, np.zeros_like(net.params))

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight_grad, bias_grad) per layer, as views into ``flat``."""
        return _split(self.flat, self.widths)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)  # activations before dropout
    masks: list[np.ndarray | None] = field(default_factory=list)  # scaled keep-masks
    dropped: list[np.ndarray] = field(default_factory=list)  # activations after dropout
    weights: list[np.ndarray] = field(default_factory=list)  # weights in the compute dtype
    embeddings: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.inputs.shape[0]


def _check_widths(widths: Sequence[int]) -> None:
    if len(widths) < 3:
        raise InvalidArgumentError(
            f"need input, at least one hidden and an output width, got {list(widths)}"
        )
    if any(w <= 0 for w in widths):
        raise InvalidArgumentError(f"all widths must be positive, got {list(widths)}")
    if widths[-1] != 1:
        raise InvalidArgumentError("output layer must have width 1 (sigmoid head)")


def init_network(
    widths: Sequence[int],
    seed: int,
    *,
    dropout_rate: float = 0.25,
    l1_coeff: float = 1e-4,
    l2_coeff: float = 1e-3,
    bottleneck_activation: Activation | str = Activation.RELU,
) -> Network:
    """Glorot-uniform weights, zero biases, drawn from ``default_rng(seed)``.

    Hidden layers use ReLU except the bottleneck, whose activation is
    selectable; the head is a single sigmoid unit.
    """
    widths = tuple(int(w) for w in widths)
    _check_widths(widths)
    rng = np.random.default_rng(seed)
    params = np.zeros(_n_params(widths))
    for (w, _), n_in, n_out in zip(_layout(widths), widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        params[w] = rng.uniform(-limit, limit, size=n_in * n_out)
    return Network.from_params(widths, params, dropout_rate=dropout_rate,
                               l1_coeff=l1_coeff, l2_coeff=l2_coeff,
                               bottleneck_activation=bottleneck_activation)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.SIGMOID:
        return _sigmoid(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return (z > 0).astype(z.dtype)
    if act is Activation.SIGMOID:
        return a * (1.0 - a)
    return np.ones_like(z)


def forward(
    net: Network,
    batch: np.ndarray,
    mode: Mode | str = Mode.EVAL,
    seed: int | np.random.Generator | None = None,
    masks: Sequence[np.ndarray | None] | None = None,
    dtype: type | np.dtype = np.float64,
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the network on ``batch``.

    Returns ``(predictions, embeddings, cache)`` where predictions are the
    sigmoid-head probabilities (length ``rows``) and embeddings are the
    bottleneck activations (``rows x bottleneck width``) before dropout.
    Dropout is inverted and only applied in train mode; ``seed`` may be an int
    or an existing generator, and is ignored in eval mode. Passing ``masks``
    (e.g. ``cache.masks`` of an earlier call on a same-shaped batch) reuses
    those dropout masks instead of drawing new ones. ``dtype`` is the
    arithmetic precision; parameters stay float64 and are cast per call.
    """
    mode = Mode(mode)
    dtype = np.dtype(dtype)
    batch = np.asarray(batch, dtype=dtype)
    if batch.ndim != 2 or batch.shape[1] != net.n_inputs:
        raise ShapeError(f"batch shape {batch.shape} does not match input width {net.n_inputs}")
    use_dropout = mode is Mode.TRAIN and net.dropout_rate > 0.0
    rng = None
    if use_dropout and masks is not None:
        if len(masks) != len(net.layers):
            raise ShapeError(f"expected {len(net.layers)} masks, got {len(masks)}")
    elif use_dropout:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        keep = 1.0 - net.dropout_rate
        scale = dtype.type(1.0 / keep)

    cache = ForwardCache(inputs=batch)
    a = batch
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        w = layer.weights.astype(dtype, copy=False)
        cache.weights.append(w)
        z = a @ w
        z += layer.bias.astype(dtype, copy=False)
        a = _activate(z, layer.activation)
        cache.pre.append(z)
        cache.post.append(a)
        if k == net.bottleneck_index:
            cache.embeddings = a
        mask = None
        if use_dropout and k < last:
            if masks is not None:
                mask = masks[k]
                if mask is None or mask.shape != a.shape:
                    raise ShapeError(f"dropout mask {k} does not fit activations {a.shape}")
            else:
                mask = (rng.random(a.shape, dtype=np.float32) < keep).astype(dtype) * scale
            a = a * mask
        cache.masks.append(mask)
        cache.dropped.append(a)
    preds = a[:, 0].astype(np.float64, copy=False)
    return preds, cache.embeddings.astype(np.float64, copy=False), cache


def backward(
    net: Network,
    caches: Sequence[ForwardCache],
    output_grads: Sequence[np.ndarray],
    embedding_grad: np.ndarray | None = None,
    reg_scale: float = 1.0,
) -> GradientSet:
    """Sum parameter gradients over several forward branches.

    ``output_grads[b]`` is dL/d(prediction) for branch ``b``;
    ``embedding_grad`` is dL/dZ and attaches to the first branch's
    bottleneck. L1 (subgradient 0 at 0) and L2 contributions are added once,
    multiplied by ``reg_scale``.
    """
    if len(caches) != len(output_grads):
        raise ShapeError(f"{len(caches)} caches but {len(output_grads)} output gradients")
    grads = GradientSet.zeros_like(net)
    layer_grads = grads.layers
    for b, (cache, g_out) in enumerate(zip(caches, output_grads)):
        dtype = cache.inputs.dtype
        g_out = np.asarray(g_out, dtype=dtype)
        if g_out.shape != (cache.rows,):
            raise ShapeError(f"output gradient shape {g_out.shape} != ({cache.rows},)")
        delta = g_out[:, None]  # dL/d(post-activation of the last layer)
        for k in range(len(net.layers) - 1, -1, -1):
            layer = net.layers[k]
            if k == net.bottleneck_index and b == 0 and embedding_grad is not None:
                eg = np.asarray(embedding_grad, dtype=dtype)
                if eg.shape != cache.post[k].shape:
                    raise ShapeError(
                        f"embedding gradient shape {eg.shape} != {cache.post[k].shape}"
                    )
                delta = delta + eg
            delta = delta * _activation_grad(cache.pre[k], cache.post[k], layer.activation)
            prev = cache.inputs if k == 0 else cache.dropped[k - 1]
            gw, gb = layer_grads[k]
            gw += prev.T @ delta
            gb += delta.sum(axis=0)
            if k > 0:
                delta = delta @ cache.weights[k].T
                if cache.masks[k - 1] is not None:
                    delta = delta * cache.masks[k - 1]
    if reg_scale and (net.l1_coeff or net.l2_coeff):
        wmask = net.weight_mask()
        w = net.params[wmask]
        grads.flat[wmask] += reg_scale * (net.l1_coeff * np.sign(w) + 2.0 * net.l2_coeff * w)
    return grads


def regularization_penalty(net: Network) -> float:
    """``l1 * sum|w| + l2 * sum w^2`` over weights only."""
    total = 0.0
    for layer in net.layers:
        w = layer.weights
        total += net.l1_coeff * float(np.abs(w).sum()) + net.l2_coeff * float((w * w).sum())
    return total


def save_network(net: Network, path: str | Path) -> None:
    """Write a JSON header line followed by the raw little-endian float64 buffer."""
    header = {
        "widths": list(net.widths),
        "dropout_rate": net.dropout_rate,
        "l1_coeff": net.l1_coeff,
        "l2_coeff": net.l2_coeff,
        "bottleneck_activation": net.bottleneck_activation.value,
        "n_params": int(net.params.size),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(net.params.astype("<f8").tobytes())


def load_network(path: str | Path) -> Network:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ShapeError(f"{path}: expected {header['n_params']} parameters, found {params.size}")
    return Network.from_params(
        header["widths"], params, dropout_rate=header["dropout_rate"],
        l1_coeff=header["l1_coeff"], l2_coeff=header["l2_coeff"],
        bottleneck_activation=header.get("bottleneck_activation", "relu"),
    )
