"""Federated rounds over heterogeneous label sets, three aggregation rules.

Every round each node trains locally, ships a parameter bundle, and the
server combines bundles into a global model:

* FEDAVG: weighted mean of everything, batch-norm statistics included.
* FEDBN: weighted mean of dense layers only; each node keeps its own
  batch-norm layers, so the "global" model is per-node below the heads.
* FEDFBN: nodes train with batch norm frozen, so their BN tensors must
  still agree bit-for-bit at aggregation time; the server verifies that
  and carries the shared values through unchanged. Averaging identical
  tensors is the identity, implemented literally as a copy so no
  floating-point accumulation can perturb the frozen values.

Heads are merged surgically: the global label set is the union, a head
owned by one node is copied, and a head shared by several nodes is
averaged over its owners (bit-identical owners short-circuit to a copy).
All reductions accumulate in ascending node id so results are a pure
function of the inputs, not of scheduling.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import checkpoint
from .errors import (
    ConfigError,
    DataError,
    FrozenStatsError,
    LabelError,
    NodeFailure,
    ParseError,
    ProtocolError,
    ShapeError,
)
from .metrics import EvalReport, bootstrap_ci
from .network import (
    BnParams,
    BnPolicy,
    DenseParams,
    HEAD_PREFIX,
    HEADS,
    Model,
    ModelSpec,
    REPRESENTATION,
    evaluate_loss,
    predict,
    train_epochs,
)
from .numerics import RngStream, Tensor


class Strategy(str, Enum):
    FEDAVG = "fedavg"
    FEDBN = "fedbn"
    FEDFBN = "fedfbn"


class Weighting(str, Enum):
    UNIFORM = "uniform"
    BY_SAMPLES = "by_samples"


def _tensors_equal(a: Tensor, b: Tensor) -> bool:
    """Bitwise equality (distinguishes -0.0 from 0.0, NaN payloads, ...)."""
    if a.shape != b.shape:
        return False
    return (
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        == np.ascontiguousarray(b, dtype="<f8").tobytes()
    )


def _copy_tree(entries: dict[str, dict[str, Tensor]]) -> dict[str, dict[str, Tensor]]:
    return {
        layer: {name: t.copy() for name, t in tensors.items()}
        for layer, tensors in entries.items()
    }


@dataclass
class ParameterBundle:
    """One node's parameters as shipped to the server for a round."""

    node_id: int
    round_index: int
    sample_count: int
    entries: dict[str, dict[str, Tensor]]
    head_labels: tuple[str, ...]

    def representation_only(self) -> "ParameterBundle":
        rep = {
            layer: tensors
            for layer, tensors in self.entries.items()
            if not layer.startswith(HEAD_PREFIX)
        }
        return ParameterBundle(
            node_id=self.node_id,
            round_index=self.round_index,
            sample_count=self.sample_count,
            entries=_copy_tree(rep),
            head_labels=(),
        )

    def bn_layers(self) -> dict[str, dict[str, Tensor]]:
        return {
            layer: tensors
            for layer, tensors in self.entries.items()
            if "running_mean" in tensors
        }


def extract_bundle(
    model: Model, node_id: int, round_index: int, sample_count: int
) -> ParameterBundle:
    """Deep-copy a model's tensors into a bundle."""
    entries: dict[str, dict[str, Tensor]] = {}
    for name, params in model.layers.items():
        if isinstance(params, DenseParams):
            entries[name] = {"weight": params.weight.copy(), "bias": params.bias.copy()}
        else:
            entries[name] = {
                "gamma": params.gamma.copy(),
                "beta": params.beta.copy(),
                "running_mean": params.running_mean.copy(),
                "running_var": params.running_var.copy(),
            }
    for label in model.spec.label_names:
        head = model.heads[label]
        entries[f"{HEAD_PREFIX}{label}"] = {
            "weight": head.weight.copy(),
            "bias": head.bias.copy(),
        }
    return ParameterBundle(
        node_id=node_id,
        round_index=round_index,
        sample_count=sample_count,
        entries=entries,
        head_labels=model.spec.label_names,
    )


def _weights(bundles: list[ParameterBundle], weighting: Weighting) -> dict[int, float]:
    if weighting is Weighting.UNIFORM:
        w = 1.0 / len(bundles)
        return {b.node_id: w for b in bundles}
    total = 0
    for b in bundles:
        if b.sample_count < 1:
            raise ConfigError(
                f"by_samples weighting needs sample_count >= 1 (node {b.node_id})"
            )
        total += b.sample_count
    return {b.node_id: b.sample_count / total for b in bundles}


def _weighted_mean(
    items: list[tuple[int, Tensor]], weights: dict[int, float]
) -> Tensor:
    """Fixed-order multiply-accumulate; items must be sorted by node id."""
    first_id, first = items[0]
    acc = weights[first_id] * first
    for node_id, tensor in items[1:]:
        if tensor.shape != first.shape:
            raise ShapeError(
                f"tensor shape mismatch across nodes: {tensor.shape} vs {first.shape}"
            )
        acc = acc + weights[node_id] * tensor
    return acc


def _validate_bundles(bundles: list[ParameterBundle]) -> list[ParameterBundle]:
    if not bundles:
        raise ProtocolError("aggregate needs at least one bundle")
    ordered = sorted(bundles, key=lambda b: b.node_id)
    ids = [b.node_id for b in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate node ids in bundles: {ids}")
    rounds = {b.round_index for b in ordered}
    if len(rounds) != 1:
        raise ProtocolError(f"bundles span multiple rounds: {sorted(rounds)}")
    rep_keys = [
        tuple(k for k in b.entries if not k.startswith(HEAD_PREFIX)) for b in ordered
    ]
    if any(keys != rep_keys[0] for keys in rep_keys[1:]):
        raise ProtocolError("representation layer sets differ across bundles")
    return ordered


@dataclass
class GlobalModel:
    """Server-side model; per-node only in its FEDBN batch-norm layers."""

    spec: ModelSpec
    representation: dict[str, dict[str, Tensor]]
    heads: dict[str, dict[str, Tensor]]
    node_labels: dict[int, tuple[str, ...]]
    strategy: Strategy
    round_index: int
    per_node_bn: dict[int, dict[str, dict[str, Tensor]]] | None = None

    @property
    def label_names(self) -> tuple[str, ...]:
        return self.spec.label_names

    def materialize(self, labels, node_id: int | None = None) -> Model:
        """Build a concrete model for a label view (deep copies throughout).

        Under FEDBN a node_id must name whose batch-norm layers to use.
        """
        labels = tuple(labels)
        if not labels:
            raise LabelError("materialize needs at least one label")
        missing = [l for l in labels if l not in self.heads]
        if missing:
            raise LabelError(f"global model has no head for {missing}")
        if self.per_node_bn is not None:
            if node_id is None:
                raise ProtocolError(
                    "this global model keeps per-node batch norm; pass node_id"
                )
            if node_id not in self.per_node_bn:
                raise ProtocolError(f"no batch-norm layers stored for node {node_id}")
        layers: dict[str, DenseParams | BnParams] = {}
        for i in range(len(self.spec.hidden_dims)):
            dense = self.representation[f"dense{i}"]
            layers[f"dense{i}"] = DenseParams(
                weight=dense["weight"].copy(), bias=dense["bias"].copy()
            )
            if self.per_node_bn is None:
                bn = self.representation[f"bn{i}"]
            else:
                bn = self.per_node_bn[node_id][f"bn{i}"]
            layers[f"bn{i}"] = BnParams(
                gamma=bn["gamma"].copy(),
                beta=bn["beta"].copy(),
                running_mean=bn["running_mean"].copy(),
                running_var=bn["running_var"].copy(),
            )
        heads = {
            label: DenseParams(
                weight=self.heads[label]["weight"].copy(),
                bias=self.heads[label]["bias"].copy(),
            )
            for label in labels
        }
        return Model(
            spec=replace(self.spec, label_names=labels), layers=layers, heads=heads
        )


def merge_heads(
    bundles: list[ParameterBundle], weights: dict[int, float]
) -> tuple[dict[str, dict[str, Tensor]], tuple[str, ...]]:
    """Union the label sets; copy solo heads, average shared ones.

    Shared-head weights are the owners' aggregation weights renormalized
    to sum to one. Owners with bit-identical tensors short-circuit to a
    copy, so agreeing nodes cannot drift through arithmetic.
    """
    union: list[str] = []
    owners: dict[str, list[ParameterBundle]] = {}
    for b in bundles:
        for label in b.head_labels:
            if label not in owners:
                owners[label] = []
                union.append(label)
            owners[label].append(b)
    merged: dict[str, dict[str, Tensor]] = {}
    for label in union:
        own = owners[label]
        tensor_sets = [b.entries[f"{HEAD_PREFIX}{label}"] for b in own]
        if len(own) == 1 or all(
            _tensors_equal(ts["weight"], tensor_sets[0]["weight"])
            and _tensors_equal(ts["bias"], tensor_sets[0]["bias"])
            for ts in tensor_sets[1:]
        ):
            merged[label] = {
                "weight": tensor_sets[0]["weight"].copy(),
                "bias": tensor_sets[0]["bias"].copy(),
            }
            continue
        wsum = sum(weights[b.node_id] for b in own)
        local = {b.node_id: weights[b.node_id] / wsum for b in own}
        merged[label] = {
            name: _weighted_mean(
                [(b.node_id, b.entries[f"{HEAD_PREFIX}{label}"][name]) for b in own],
                local,
            )
            for name in ("weight", "bias")
        }
    return merged, tuple(union)


def aggregate(
    bundles: list[ParameterBundle],
    strategy: Strategy,
    spec: ModelSpec,
    weighting: Weighting = Weighting.UNIFORM,
) -> GlobalModel:
    """Combine one round's bundles into a global model."""
    ordered = _validate_bundles(bundles)
    weights = _weights(ordered, weighting)

    representation: dict[str, dict[str, Tensor]] = {}
    per_node_bn: dict[int, dict[str, dict[str, Tensor]]] | None = None
    rep_layers = [
        k for k in ordered[0].entries if not k.startswith(HEAD_PREFIX)
    ]
    for layer in rep_layers:
        tensor_names = list(ordered[0].entries[layer])
        is_bn = "running_mean" in tensor_names
        if is_bn and strategy is Strategy.FEDBN:
            continue
        if is_bn and strategy is Strategy.FEDFBN:
            # Frozen BN: demand bitwise agreement, then carry the value
            # through untouched. A float mean would not be exact.
            reference = ordered[0].entries[layer]
            for b in ordered[1:]:
                for name in tensor_names:
                    if not _tensors_equal(b.entries[layer][name], reference[name]):
                        raise FrozenStatsError(
                            f"frozen batch-norm tensor {layer}/{name} differs "
                            f"between node {ordered[0].node_id} and node "
                            f"{b.node_id}"
                        )
            representation[layer] = {n: reference[n].copy() for n in tensor_names}
            continue
        representation[layer] = {
            name: _weighted_mean(
                [(b.node_id, b.entries[layer][name]) for b in ordered], weights
            )
            for name in tensor_names
        }

    if strategy is Strategy.FEDBN:
        per_node_bn = {b.node_id: _copy_tree(b.bn_layers()) for b in ordered}

    heads, union = merge_heads(ordered, weights)
    return GlobalModel(
        spec=replace(spec, label_names=union),
        representation=representation,
        heads=heads,
        node_labels={b.node_id: b.head_labels for b in ordered},
        strategy=strategy,
        round_index=ordered[0].round_index,
        per_node_bn=per_node_bn,
    )


@dataclass
class Node:
    """A participant: private train/val data plus its current model.

    ``train`` and ``val`` need ``features``, ``labels``, and ``mask``
    arrays whose label columns match the model's label_names order.
    """

    node_id: int
    train: object
    val: object
    model: Model
    rng: RngStream
    lr: float
    batch_size: int = 64

    @property
    def label_names(self) -> tuple[str, ...]:
        return self.model.spec.label_names

    @property
    def n_train(self) -> int:
        return self.train.features.shape[0]


def _check_node_data(node: Node) -> None:
    for part_name, part in (("train", node.train), ("val", node.val)):
        want = (part.features.shape[0], len(node.label_names))
        if part.labels.shape != want or part.mask.shape != want:
            raise ShapeError(
                f"node {node.node_id} {part_name}: labels/mask shape "
                f"{part.labels.shape} does not match {want}"
            )
        if ((part.labels == -1.0) & (part.mask == 1.0)).any():
            raise DataError(
                f"node {node.node_id} {part_name}: uncertain labels must be "
                "recoded (u-zeros) before federated training"
            )


def local_train_round(node: Node, strategy: Strategy, local_epochs: int) -> float:
    """One node's local pass; FEDFBN trains with batch norm frozen."""
    policy = BnPolicy.FROZEN if strategy is Strategy.FEDFBN else BnPolicy.NORMAL
    return train_epochs(
        node.model,
        node.train.features,
        node.train.labels,
        node.train.mask,
        epochs=local_epochs,
        lr_by_block={REPRESENTATION: node.lr, HEADS: node.lr},
        policy=policy,
        batch_size=node.batch_size,
        rng=node.rng,
    )


@dataclass
class RoundReport:
    round_index: int
    train_losses: dict[int, float]
    val_losses: dict[int, float]
    mean_val_loss: float
    is_best: bool


@dataclass
class FederationResult:
    best: GlobalModel
    final: GlobalModel
    best_round: int
    reports: list[RoundReport] = field(default_factory=list)


def run_federation(
    nodes: list[Node],
    strategy: Strategy,
    rounds: int,
    local_epochs: int = 1,
    weighting: Weighting = Weighting.UNIFORM,
    on_round=None,
) -> FederationResult:
    """Train for ``rounds`` aggregation rounds and track the best global.

    "Best" is the global model whose post-aggregation mean validation BCE
    across nodes is strictly smallest; ties keep the earlier round. Node
    exceptions during local training surface as NodeFailure naming the
    node and round.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if local_epochs < 1:
        raise ConfigError("local_epochs must be >= 1")
    if not nodes:
        raise ConfigError("run_federation needs at least one node")
    ordered = sorted(nodes, key=lambda n: n.node_id)
    ids = [n.node_id for n in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate node ids: {ids}")
    base = replace(ordered[0].model.spec, label_names=())
    for node in ordered[1:]:
        if replace(node.model.spec, label_names=()) != base:
            raise ProtocolError(
                f"node {node.node_id} model spec differs from node {ids[0]}"
            )
    for node in ordered:
        _check_node_data(node)

    best: GlobalModel | None = None
    best_loss = float("inf")
    best_round = -1
    reports: list[RoundReport] = []
    latest: GlobalModel | None = None

    for r in range(rounds):
        train_losses: dict[int, float] = {}
        for node in ordered:
            try:
                train_losses[node.node_id] = local_train_round(
                    node, strategy, local_epochs
                )
            except Exception as exc:
                raise NodeFailure(node.node_id, r, exc) from exc

        bundles = [
            extract_bundle(node.model, node.node_id, r, node.n_train)
            for node in ordered
        ]
        latest = aggregate(bundles, strategy, base, weighting)

        val_losses: dict[int, float] = {}
        for node in ordered:
            node.model = latest.materialize(
                node.label_names,
                node_id=node.node_id if latest.per_node_bn is not None else None,
            )
            val_losses[node.node_id] = evaluate_loss(
                node.model, node.val.features, node.val.labels, node.val.mask
            )
        mean_val = float(np.mean([val_losses[i] for i in ids]))

        is_best = mean_val < best_loss
        if is_best:
            best_loss = mean_val
            best = copy.deepcopy(latest)
            best_round = r
        report = RoundReport(
            round_index=r,
            train_losses=train_losses,
            val_losses=val_losses,
            mean_val_loss=mean_val,
            is_best=is_best,
        )
        reports.append(report)
        if on_round is not None:
            on_round(report)

    assert best is not None and latest is not None
    return FederationResult(
        best=best, final=latest, best_round=best_round, reports=reports
    )


def evaluate_global(
    gm: GlobalModel,
    ds,
    labels,
    rng: RngStream,
    n_bootstrap: int = 1000,
    node_id: int | None = None,
    missing: str = "error",
    allowed_heads=None,
) -> EvalReport:
    """Bootstrap-evaluate a global model on a label view of ``ds``.

    ``missing`` decides what to do about requested labels the model has no
    head for: "error" refuses, "chance" scores them at a constant 0.5,
    which the tie-handling AUROC grades as exactly 0.5 when defined.
    ``allowed_heads`` restricts which heads may answer; a personalized
    (per-node) model is scored by passing the labels that node owns, so
    everything else falls to chance as well.
    """
    labels = tuple(labels)
    proj = ds.project_labels(labels)
    if ((proj.labels == -1.0) & (proj.mask == 1.0)).any():
        raise DataError("evaluation labels must be recoded (u-zeros) first")
    usable = set(gm.heads if allowed_heads is None else allowed_heads)
    absent = [l for l in labels if l not in gm.heads or l not in usable]
    if absent and missing != "chance":
        raise LabelError(f"model has no usable head for {absent}")
    present = [l for l in labels if l in gm.heads and l in usable]
    if not present:
        raise LabelError("no requested label has a trained head")
    model = gm.materialize(
        present, node_id=node_id if gm.per_node_bn is not None else None
    )
    probs = predict(model, proj.features)
    scores = np.full((proj.features.shape[0], len(labels)), 0.5)
    col = {l: j for j, l in enumerate(labels)}
    for k, label in enumerate(present):
        scores[:, col[label]] = probs[:, k]
    return bootstrap_ci(
        scores, proj.labels, proj.mask, list(labels), rng, n_bootstrap
    )


def save_global(gm: GlobalModel, path) -> None:
    """Checkpoint a global model (kind "global"), bit-exact round-trip."""
    tensors: dict[str, Tensor] = {}
    for layer, ts in gm.representation.items():
        for name, value in ts.items():
            tensors[f"rep/{layer}/{name}"] = value
    if gm.per_node_bn is not None:
        for node_id, bn_layers in sorted(gm.per_node_bn.items()):
            for layer, ts in bn_layers.items():
                for name, value in ts.items():
                    tensors[f"node_bn/{node_id}/{layer}/{name}"] = value
    for label, ts in gm.heads.items():
        for name, value in ts.items():
            tensors[f"head/{label}/{name}"] = value
    meta = {
        "spec": checkpoint.spec_meta(gm.spec),
        "strategy": gm.strategy.value,
        "round_index": gm.round_index,
        "node_labels": {str(i): list(v) for i, v in gm.node_labels.items()},
        "bn_nodes": (
            sorted(gm.per_node_bn) if gm.per_node_bn is not None else None
        ),
    }
    checkpoint.write_archive(path, "global", meta, tensors)


def load_global(path) -> GlobalModel:
    kind, meta, tensors = checkpoint.read_archive(path)
    if kind != "global":
        raise ParseError(f"{path}: expected a global checkpoint, got '{kind}'")
    spec = checkpoint.spec_from_meta(meta.get("spec", {}))
    representation: dict[str, dict[str, Tensor]] = {}
    per_node_bn: dict[int, dict[str, dict[str, Tensor]]] | None = None
    if meta.get("bn_nodes") is not None:
        per_node_bn = {int(i): {} for i in meta["bn_nodes"]}
    heads: dict[str, dict[str, Tensor]] = {}
    for key, value in tensors.items():
        parts = key.split("/")
        if parts[0] == "rep" and len(parts) == 3:
            representation.setdefault(parts[1], {})[parts[2]] = value
        elif parts[0] == "node_bn" and len(parts) == 4 and per_node_bn is not None:
            per_node_bn.setdefault(int(parts[1]), {}).setdefault(parts[2], {})[
                parts[3]
            ] = value
        elif parts[0] == "head" and len(parts) >= 3:
            # label names may themselves contain '/'
            heads.setdefault("/".join(parts[1:-1]), {})[parts[-1]] = value
        else:
            raise ParseError(f"{path}: unexpected tensor key '{key}'")
    return GlobalModel(
        spec=spec,
        representation=representation,
        heads=heads,
        node_labels={
            int(i): tuple(v) for i, v in meta.get("node_labels", {}).items()
        },
        strategy=Strategy(meta["strategy"]),
        round_index=int(meta["round_index"]),
        per_node_bn=per_node_bn,
    )
