"""Multi-label MLP with batch normalization, written directly over numpy.

The representation block is a stack of dense -> batch-norm -> ReLU layers;
on top sits one tiny sigmoid head per label so heads can be attached,
dropped, and merged independently of the shared trunk. Training is plain
SGD over a masked binary cross-entropy, with backprop done by hand.

Batch-norm has two behaviours, selected by ``BnPolicy`` during training:

* NORMAL: normalize with batch statistics and update the running estimates
  running <- (1 - momentum) * running + momentum * batch_stat
  (biased variance), with gradients flowing to gamma/beta.
* FROZEN: normalize with the stored running statistics, never mutate them,
  and produce no gamma/beta gradients at all.

Evaluation always uses running statistics and mutates nothing.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError, ProtocolError, ShapeError
from .numerics import RngStream, Tensor, batch_stats, check_finite

REPRESENTATION = "representation"
HEADS = "heads"

HEAD_PREFIX = "head:"


class BnPolicy(str, Enum):
    NORMAL = "normal"
    FROZEN = "frozen"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    label_names: tuple[str, ...]
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims entries must be positive")
        if len(set(self.label_names)) != len(self.label_names):
            raise ConfigError("label names must be unique")
        if not (0.0 < self.bn_momentum < 1.0):
            raise ConfigError("bn_momentum must lie in (0, 1)")
        if self.bn_eps <= 0.0:
            raise ConfigError("bn_eps must be positive")


@dataclass
class DenseParams:
    weight: Tensor
    bias: Tensor


@dataclass
class BnParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor


@dataclass
class Model:
    """Parameters plus the ModelSpec they were built for.

    ``layers`` holds the representation in forward order (dense0, bn0,
    dense1, bn1, ...); ``heads`` maps label name -> dense head. The
    ModelSpec's label_names fixes head/output ordering.
    """

    spec: ModelSpec
    layers: dict[str, DenseParams | BnParams] = field(default_factory=dict)
    heads: dict[str, DenseParams] = field(default_factory=dict)

    @property
    def label_names(self) -> tuple[str, ...]:
        return self.spec.label_names

    @property
    def hidden_width(self) -> int:
        """Width the heads consume: last hidden layer, or the raw inputs."""
        if self.spec.hidden_dims:
            return self.spec.hidden_dims[-1]
        return self.spec.input_dim


def layer_block(name: str) -> str:
    """Which learning-rate block a layer belongs to."""
    return HEADS if name.startswith(HEAD_PREFIX) else REPRESENTATION


def bn_layer_names(model: Model) -> list[str]:
    return [n for n, p in model.layers.items() if isinstance(p, BnParams)]


def model_copy(model: Model) -> Model:
    return copy.deepcopy(model)


def _init_dense(stream: RngStream, fan_in: int, fan_out: int) -> DenseParams:
    bound = math.sqrt(2.0 / fan_in)
    weight = stream.uniform(-bound, bound, (fan_in, fan_out))
    return DenseParams(weight=weight, bias=np.zeros(fan_out))


def _init_head(rng: RngStream, label: str, width: int) -> DenseParams:
    return _init_dense(rng.child(f"init:{HEAD_PREFIX}{label}"), width, 1)


def init_model(spec: ModelSpec, rng: RngStream) -> Model:
    """Build a model from per-layer child streams of ``rng``.

    Each tensor draws from its own derived stream keyed by the layer name,
    so the representation init is independent of the label list and any
    two models sharing a label (and seed) start with identical heads.
    """
    layers: dict[str, DenseParams | BnParams] = {}
    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_dims):
        layers[f"dense{i}"] = _init_dense(rng.child(f"init:dense{i}"), fan_in, width)
        layers[f"bn{i}"] = BnParams(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
        )
        fan_in = width
    heads = {
        label: _init_head(rng, label, fan_in) for label in spec.label_names
    }
    return Model(spec=spec, layers=layers, heads=heads)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_input(model: Model, x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(
            f"expected inputs of shape (n, {model.spec.input_dim}), got {x.shape}"
        )
    return x


def _forward(model: Model, x: Tensor, train: bool, policy: BnPolicy):
    """Run the network, returning logits plus per-layer caches.

    Only Train+NORMAL touches running statistics.
    """
    x = _check_input(model, x)
    spec = model.spec
    h = x
    caches: dict[str, dict] = {}
    for i in range(len(spec.hidden_dims)):
        dense = model.layers[f"dense{i}"]
        pre = h @ dense.weight + dense.bias
        caches[f"dense{i}"] = {"in": h}

        bn = model.layers[f"bn{i}"]
        use_batch = train and policy is BnPolicy.NORMAL
        if use_batch:
            if pre.shape[0] < 2:
                raise DataError(
                    "batch normalization with batch statistics needs a "
                    f"batch of >= 2 rows, got {pre.shape[0]}"
                )
            mean, var = batch_stats(pre)
            m = spec.bn_momentum
            bn.running_mean = (1.0 - m) * bn.running_mean + m * mean
            bn.running_var = (1.0 - m) * bn.running_var + m * var
        else:
            mean, var = bn.running_mean, bn.running_var
        inv_std = 1.0 / np.sqrt(var + spec.bn_eps)
        xn = (pre - mean) * inv_std
        out = bn.gamma * xn + bn.beta
        caches[f"bn{i}"] = {
            "pre": pre,
            "xn": xn,
            "inv_std": inv_std,
            "mean": mean,
            "batch": use_batch,
        }

        h = np.maximum(out, 0.0)
        caches[f"relu{i}"] = {"active": out > 0.0}

    logits = np.empty((x.shape[0], len(spec.label_names)))
    for j, label in enumerate(spec.label_names):
        head = model.heads[label]
        logits[:, j : j + 1] = h @ head.weight + head.bias
    caches["trunk_out"] = h
    check_finite(logits, "logits")
    return logits, caches


def predict(model: Model, x: Tensor) -> Tensor:
    """Per-label probabilities in evaluation mode (running stats, no mutation)."""
    logits, _ = _forward(model, x, train=False, policy=BnPolicy.FROZEN)
    return sigmoid(logits)


def masked_bce(probs: Tensor, labels: Tensor, mask: Tensor) -> float:
    """Mean binary cross-entropy over mask==1 entries.

    Probabilities are clamped to [1e-7, 1 - 1e-7] inside the logs only.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != labels.shape or probs.shape != mask.shape:
        raise ShapeError("probs, labels, and mask must share a shape")
    n_masked = float(mask.sum())
    if n_masked == 0:
        raise DataError("masked_bce: mask selects no entries")
    p = np.clip(probs, 1e-7, 1.0 - 1e-7)
    term = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    return float((term * mask).sum() / n_masked)


def evaluate_loss(model: Model, features: Tensor, labels: Tensor, mask: Tensor) -> float:
    """Full-batch evaluation-mode masked BCE."""
    return masked_bce(predict(model, features), labels, mask)


def backward(
    model: Model,
    x: Tensor,
    labels: Tensor,
    mask: Tensor,
    policy: BnPolicy,
) -> tuple[float, dict[str, dict[str, Tensor]]]:
    """One training-mode forward/backward pass.

    Returns (loss, grads) where grads maps layer name -> tensor-name ->
    gradient. Under FROZEN the batch-norm layers contribute no gradient
    entries and their statistics are left untouched; under NORMAL the
    running statistics are updated by the embedded forward pass.
    """
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    logits, caches = _forward(model, x, train=True, policy=policy)
    if labels.shape != logits.shape or mask.shape != logits.shape:
        raise ShapeError("labels/mask shape must be (batch, n_labels)")
    probs = sigmoid(logits)
    loss = masked_bce(probs, labels, mask)

    n_masked = float(mask.sum())
    # d loss / d logit for sigmoid+BCE fused: (p - y) * mask / n_masked
    dlogits = (probs - labels) * mask / n_masked

    grads: dict[str, dict[str, Tensor]] = {}
    trunk = caches["trunk_out"]
    dh = np.zeros_like(trunk)
    for j, label in enumerate(model.spec.label_names):
        head = model.heads[label]
        dcol = dlogits[:, j : j + 1]
        grads[f"{HEAD_PREFIX}{label}"] = {
            "weight": trunk.T @ dcol,
            "bias": dcol.sum(axis=0),
        }
        dh = dh + dcol @ head.weight.T

    spec = model.spec
    for i in reversed(range(len(spec.hidden_dims))):
        dh = dh * caches[f"relu{i}"]["active"]

        bn = model.layers[f"bn{i}"]
        c = caches[f"bn{i}"]
        xn, inv_std = c["xn"], c["inv_std"]
        if c["batch"]:
            n = xn.shape[0]
            dgamma = (dh * xn).sum(axis=0)
            dbeta = dh.sum(axis=0)
            dxn = dh * bn.gamma
            centered = c["pre"] - c["mean"]
            dvar = (dxn * centered).sum(axis=0) * (-0.5) * inv_std**3
            dmean = (
                -(dxn.sum(axis=0)) * inv_std
                + dvar * (-2.0 / n) * centered.sum(axis=0)
            )
            dpre = dxn * inv_std + dvar * 2.0 * centered / n + dmean / n
            grads[f"bn{i}"] = {"gamma": dgamma, "beta": dbeta}
        else:
            dpre = dh * bn.gamma * inv_std

        dense = model.layers[f"dense{i}"]
        h_in = caches[f"dense{i}"]["in"]
        grads[f"dense{i}"] = {
            "weight": h_in.T @ dpre,
            "bias": dpre.sum(axis=0),
        }
        dh = dpre @ dense.weight.T

    return loss, grads


def _param_tensors(params: DenseParams | BnParams) -> dict[str, Tensor]:
    if isinstance(params, DenseParams):
        return {"weight": params.weight, "bias": params.bias}
    return {
        "gamma": params.gamma,
        "beta": params.beta,
        "running_mean": params.running_mean,
        "running_var": params.running_var,
    }


def _lookup_params(model: Model, layer: str) -> DenseParams | BnParams:
    if layer.startswith(HEAD_PREFIX):
        label = layer[len(HEAD_PREFIX) :]
        if label not in model.heads:
            raise ProtocolError(f"gradient for unknown head '{label}'")
        return model.heads[label]
    if layer not in model.layers:
        raise ProtocolError(f"gradient for unknown layer '{layer}'")
    return model.layers[layer]


def sgd_step(
    model: Model,
    grads: dict[str, dict[str, Tensor]],
    lr_by_block: dict[str, float],
) -> None:
    """In-place SGD update; a block with lr == 0 is skipped exactly."""
    for block in (REPRESENTATION, HEADS):
        if block not in lr_by_block:
            raise ConfigError(f"lr_by_block missing '{block}'")
    for layer, layer_grads in grads.items():
        lr = lr_by_block[layer_block(layer)]
        if lr == 0.0:
            continue
        params = _lookup_params(model, layer)
        tensors = _param_tensors(params)
        for name, g in layer_grads.items():
            if name not in tensors:
                raise ProtocolError(f"gradient for unknown tensor {layer}/{name}")
            if tensors[name].shape != g.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} != parameter shape "
                    f"{tensors[name].shape} at {layer}/{name}"
                )
            tensors[name] -= lr * g


def train_epochs(
    model: Model,
    features: Tensor,
    labels: Tensor,
    mask: Tensor,
    epochs: int,
    lr_by_block: dict[str, float],
    policy: BnPolicy,
    batch_size: int,
    rng: RngStream,
) -> float:
    """Minibatch SGD for ``epochs`` passes; returns the mean batch loss.

    Batch order comes from ``rng`` permutations. A trailing batch of one
    row is dropped so batch statistics stay defined and every strategy
    sees the same step count.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    n = features.shape[0]
    if n < 2:
        raise DataError("training needs at least 2 rows")
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if idx.size == 1:
                continue
            loss, grads = backward(
                model, features[idx], labels[idx], mask[idx], policy
            )
            sgd_step(model, grads, lr_by_block)
            losses.append(loss)
    return float(np.mean(losses)) if losses else math.nan


def warmup_heads(
    model: Model,
    features: Tensor,
    labels: Tensor,
    mask: Tensor,
    epochs: int,
    rng: RngStream,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> float:
    """Fit freshly attached heads with the trunk fully immobilized.

    Batch norm runs FROZEN and the representation learning rate is zero,
    so only head tensors move and the trunk (statistics included) is
    bit-identical afterwards.
    """
    return train_epochs(
        model,
        features,
        labels,
        mask,
        epochs=epochs,
        lr_by_block={REPRESENTATION: 0.0, HEADS: lr},
        policy=BnPolicy.FROZEN,
        batch_size=batch_size,
        rng=rng,
    )


def pretrain_backbone(
    spec: ModelSpec,
    features: Tensor,
    labels: Tensor,
    mask: Tensor,
    source_labels: tuple[str, ...],
    epochs: int,
    rng: RngStream,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> Model:
    """Train a throwaway-source model and keep only its trunk.

    The source task's heads are dropped; what remains is a representation
    with learned weights and settled running statistics, ready for
    ``with_heads``. With epochs == 0 the trunk equals a fresh init from
    the same stream bit-for-bit.
    """
    source_spec = replace(spec, label_names=tuple(source_labels))
    model = init_model(source_spec, rng)
    if epochs > 0:
        train_epochs(
            model,
            features,
            labels,
            mask,
            epochs=epochs,
            lr_by_block={REPRESENTATION: lr, HEADS: lr},
            policy=BnPolicy.NORMAL,
            batch_size=batch_size,
            rng=rng.child("pretrain-batches"),
        )
    backbone = Model(
        spec=replace(spec, label_names=()), layers=model.layers, heads={}
    )
    return backbone


def with_heads(backbone: Model, labels: tuple[str, ...], rng: RngStream) -> Model:
    """Deep-copy the trunk and attach fresh heads for ``labels``.

    Head init streams are keyed by label name, so two nodes calling this
    with the same seed get identical heads for every shared label.
    """
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate labels in head attachment")
    spec = replace(backbone.spec, label_names=tuple(labels))
    model = Model(spec=spec, layers=copy.deepcopy(backbone.layers), heads={})
    for label in labels:
        model.heads[label] = _init_head(rng, label, model.hidden_width)
    return model
