"""Aggregation strategies, head merging, the round loop, and evaluation."""

import copy
import math

import numpy as np
import pytest

from fedfbn.checkpoint import model_tensors
from fedfbn.datagen import DomainSpec, LabelModel, generate, shifted_domain
from fedfbn.errors import (
    ConfigError,
    DataError,
    FrozenStatsError,
    LabelError,
    NodeFailure,
    ProtocolError,
)
from fedfbn.federation import (
    Node,
    Strategy,
    Weighting,
    aggregate,
    evaluate_global,
    extract_bundle,
    load_global,
    merge_heads,
    run_federation,
    save_global,
)
from fedfbn.network import (
    BnPolicy,
    ModelSpec,
    init_model,
    model_copy,
    train_epochs,
    warmup_heads,
    with_heads,
)
from fedfbn.numerics import RngStream

SPEC = ModelSpec(4, (5, 3), ())


def make_model(labels, seed=1):
    return init_model(
        ModelSpec(4, (5, 3), tuple(labels)), RngStream(seed)
    )


def node_data(labels, seed, n=48, shift=0.0):
    rng = RngStream(seed)
    x = rng.standard_normal((n, 4)) + shift
    y = (rng.random((n, len(labels))) < 0.4).astype(np.float64)
    mask = np.ones_like(y)

    class Part:
        pass

    part = Part()
    part.features, part.labels, part.mask = x, y, mask
    return part


def make_node(node_id, labels, seed, lr=0.05, shift=0.0, n=48):
    return Node(
        node_id=node_id,
        train=node_data(labels, seed, n=n, shift=shift),
        val=node_data(labels, seed + 100, n=max(8, n // 4), shift=shift),
        model=make_model(labels, seed=7),
        rng=RngStream(seed + 200),
        lr=lr,
        batch_size=8,
    )


def bundles_pair(labels0=("a", "b"), labels1=("b", "c"), train=True):
    m0 = make_model(labels0, seed=11)
    m1 = make_model(labels1, seed=12)
    if train:
        for seed, m in ((13, m0), (14, m1)):
            rng = RngStream(seed)
            x = rng.standard_normal((16, 4)) + float(seed % 3)
            y = (rng.random((16, len(m.spec.label_names))) < 0.5).astype(np.float64)
            train_epochs(
                m, x, y, np.ones_like(y), epochs=1,
                lr_by_block={"representation": 0.05, "heads": 0.05},
                policy=BnPolicy.NORMAL, batch_size=8, rng=RngStream(seed + 1),
            )
    return (
        extract_bundle(m0, 0, 0, 16),
        extract_bundle(m1, 1, 0, 16),
    )


def test_extract_bundle_is_a_snapshot():
    model = make_model(("a",), seed=2)
    b1 = extract_bundle(model, 0, 0, 10)
    b2 = extract_bundle(model, 0, 0, 10)
    model.layers["dense0"].weight[0, 0] += 5.0
    assert b1.entries["dense0"]["weight"][0, 0] == b2.entries["dense0"]["weight"][0, 0]
    assert model.layers["dense0"].weight[0, 0] != b1.entries["dense0"]["weight"][0, 0]


def test_fedavg_matches_elementwise_mean_oracle():
    b0, b1 = bundles_pair()
    gm = aggregate([b0, b1], Strategy.FEDAVG, SPEC)
    for layer, tensors in gm.representation.items():
        for name, value in tensors.items():
            oracle = 0.5 * b0.entries[layer][name] + 0.5 * b1.entries[layer][name]
            assert np.array_equal(value, oracle), (layer, name)


def test_fedavg_averages_bn_statistics_too():
    b0, b1 = bundles_pair()
    assert not np.array_equal(
        b0.entries["bn0"]["running_mean"], b1.entries["bn0"]["running_mean"]
    )
    gm = aggregate([b0, b1], Strategy.FEDAVG, SPEC)
    want = 0.5 * (
        b0.entries["bn0"]["running_mean"] + b1.entries["bn0"]["running_mean"]
    )
    assert np.array_equal(gm.representation["bn0"]["running_mean"], want)


def test_by_samples_weighting():
    b0, b1 = bundles_pair()
    b0 = copy.deepcopy(b0)
    b1 = copy.deepcopy(b1)
    b0.entries["dense0"]["weight"][:] = 0.0
    b1.entries["dense0"]["weight"][:] = 4.0
    b0 = type(b0)(node_id=0, round_index=0, sample_count=1,
                  entries=b0.entries, head_labels=b0.head_labels)
    b1 = type(b1)(node_id=1, round_index=0, sample_count=3,
                  entries=b1.entries, head_labels=b1.head_labels)
    gm = aggregate([b0, b1], Strategy.FEDAVG, SPEC, Weighting.BY_SAMPLES)
    assert np.all(gm.representation["dense0"]["weight"] == 3.0)


def test_fedbn_keeps_bn_per_node():
    b0, b1 = bundles_pair()
    gm = aggregate([b0, b1], Strategy.FEDBN, SPEC)
    assert gm.per_node_bn is not None
    for node_id, bundle in ((0, b0), (1, b1)):
        for layer in ("bn0", "bn1"):
            for name, value in bundle.entries[layer].items():
                assert np.array_equal(gm.per_node_bn[node_id][layer][name], value)
    # non-BN layers still use the mean oracle
    want = 0.5 * (b0.entries["dense1"]["weight"] + b1.entries["dense1"]["weight"])
    assert np.array_equal(gm.representation["dense1"]["weight"], want)
    assert "bn0" not in gm.representation


def test_fedfbn_requires_and_copies_identical_bn():
    b0, b1 = bundles_pair(train=False)
    # untrained models share the BN init bit-for-bit
    gm = aggregate([b0, b1], Strategy.FEDFBN, SPEC)
    for layer in ("bn0", "bn1"):
        for name, value in gm.representation[layer].items():
            assert np.array_equal(value, b0.entries[layer][name])
    drifted = copy.deepcopy(b1)
    drifted.entries["bn0"]["running_mean"][0] += 1e-12
    with pytest.raises(FrozenStatsError, match="bn0"):
        aggregate([b0, drifted], Strategy.FEDFBN, SPEC)


def test_merge_heads_union_rule():
    b0, b1 = bundles_pair()
    heads, union = merge_heads([b0, b1], {0: 0.5, 1: 0.5})
    assert union == ("a", "b", "c")
    assert np.array_equal(heads["a"]["weight"], b0.entries["head:a"]["weight"])
    assert np.array_equal(heads["c"]["weight"], b1.entries["head:c"]["weight"])
    want = 0.5 * (b0.entries["head:b"]["weight"] + b1.entries["head:b"]["weight"])
    assert np.allclose(heads["b"]["weight"], want, atol=0, rtol=0)


def test_merge_heads_identical_owners_copy_exactly():
    m0 = make_model(("a", "b"), seed=11)
    m1 = make_model(("b", "c"), seed=12)
    m1.heads["b"].weight[:] = m0.heads["b"].weight
    m1.heads["b"].bias[:] = m0.heads["b"].bias
    b0 = extract_bundle(m0, 0, 0, 16)
    b1 = extract_bundle(m1, 1, 0, 16)
    heads, _ = merge_heads([b0, b1], {0: 0.5, 1: 0.5})
    assert heads["b"]["weight"].tobytes() == b0.entries["head:b"]["weight"].tobytes()
    assert heads["b"]["bias"].tobytes() == b0.entries["head:b"]["bias"].tobytes()


def test_merge_heads_three_owner_mean():
    models = [make_model(("x",), seed=s) for s in (21, 22, 23)]
    for value, m in zip((1.0, 2.0, 6.0), models):
        m.heads["x"].weight[:] = value
        m.heads["x"].bias[:] = value
    bundles = [extract_bundle(m, i, 0, 10) for i, m in enumerate(models)]
    heads, _ = merge_heads(bundles, {0: 1 / 3, 1: 1 / 3, 2: 1 / 3})
    assert np.allclose(heads["x"]["weight"], 3.0)
    assert np.allclose(heads["x"]["bias"], 3.0)


def test_merge_heads_random_topologies_match_oracle():
    rng = RngStream(77)
    all_labels = tuple(f"l{i}" for i in range(6))
    for trial in range(100):
        k = int(rng.integers(1, 5))
        bundles = []
        for node in range(k):
            picks = rng.permutation(6)[: int(rng.integers(1, 7))]
            labels = tuple(all_labels[i] for i in sorted(picks.tolist()))
            m = make_model(labels, seed=int(rng.integers(0, 1_000_000)))
            bundles.append(extract_bundle(m, node, 0, 10))
        weights = {b.node_id: 1.0 / k for b in bundles}
        heads, union = merge_heads(bundles, weights)
        # oracle: first-seen union order, renormalized fixed-order mean
        want_union = []
        for b in bundles:
            for label in b.head_labels:
                if label not in want_union:
                    want_union.append(label)
        assert union == tuple(want_union)
        for label in want_union:
            owners = [b for b in bundles if label in b.head_labels]
            wsum = sum(weights[b.node_id] for b in owners)
            for name in ("weight", "bias"):
                acc = (weights[owners[0].node_id] / wsum) * owners[0].entries[
                    f"head:{label}"
                ][name]
                for b in owners[1:]:
                    acc = acc + (weights[b.node_id] / wsum) * b.entries[
                        f"head:{label}"
                    ][name]
                if len(owners) == 1:
                    acc = owners[0].entries[f"head:{label}"][name]
                assert np.array_equal(heads[label][name], acc), (trial, label, name)


def test_aggregate_validates_bundles():
    b0, b1 = bundles_pair()
    with pytest.raises(ProtocolError):
        aggregate([], Strategy.FEDAVG, SPEC)
    dup = copy.deepcopy(b0)
    with pytest.raises(ProtocolError, match="duplicate"):
        aggregate([b0, dup], Strategy.FEDAVG, SPEC)
    late = copy.deepcopy(b1)
    late.round_index = 3
    with pytest.raises(ProtocolError, match="rounds"):
        aggregate([b0, late], Strategy.FEDAVG, SPEC)


def test_single_node_federation_equals_local_training():
    node = make_node(0, ("a", "b"), seed=31)
    mirror = model_copy(node.model)
    mirror_rng = RngStream(31 + 200)
    fed = run_federation([node], Strategy.FEDAVG, rounds=1, local_epochs=1)
    train_epochs(
        mirror, node.train.features, node.train.labels, node.train.mask,
        epochs=1, lr_by_block={"representation": 0.05, "heads": 0.05},
        policy=BnPolicy.NORMAL, batch_size=8, rng=mirror_rng,
    )
    got = model_tensors(fed.final.materialize(("a", "b")))
    want = model_tensors(mirror)
    assert all(np.array_equal(got[k], want[k]) for k in want)


def test_identical_nodes_under_fedavg_keep_their_model():
    n0 = make_node(0, ("a", "b"), seed=41)
    n1 = make_node(1, ("a", "b"), seed=41)
    n1.rng = RngStream(41 + 200)  # same draws as node 0
    fed = run_federation([n0, n1], Strategy.FEDAVG, rounds=1)
    got = model_tensors(fed.final.materialize(("a", "b")))
    want = model_tensors(n0.model)
    assert all(np.array_equal(got[k], want[k]) for k in want)


def test_round_reports_track_running_minimum():
    n0 = make_node(0, ("a", "b"), seed=51, lr=0.2)
    n1 = make_node(1, ("b", "c"), seed=52, lr=0.2)
    fed = run_federation([n0, n1], Strategy.FEDAVG, rounds=6)
    running = math.inf
    for report in fed.reports:
        assert report.is_best == (report.mean_val_loss < running)
        running = min(running, report.mean_val_loss)
        assert report.mean_val_loss == pytest.approx(
            np.mean(list(report.val_losses.values()))
        )
    best_mean = min(r.mean_val_loss for r in fed.reports)
    assert fed.reports[fed.best_round].mean_val_loss == best_mean
    assert fed.best_round == min(
        r.round_index for r in fed.reports if r.mean_val_loss == best_mean
    )


def test_fedfbn_round_loop_never_moves_bn():
    n0 = make_node(0, ("a", "b"), seed=61, shift=0.5)
    n1 = make_node(1, ("b", "c"), seed=62, shift=-0.5)
    init_bn = {
        layer: {k: v.copy() for k, v in tensors.items()}
        for layer, tensors in extract_bundle(n0.model, 0, 0, 1).bn_layers().items()
    }
    seen = []

    def check(report):
        for node in (n0, n1):
            for layer, tensors in extract_bundle(
                node.model, node.node_id, 0, 1
            ).bn_layers().items():
                for name, value in tensors.items():
                    assert value.tobytes() == init_bn[layer][name].tobytes()
        seen.append(report.round_index)

    run_federation([n0, n1], Strategy.FEDFBN, rounds=4, on_round=check)
    assert seen == [0, 1, 2, 3]


def test_fedbn_separates_bn_after_aggregation():
    n0 = make_node(0, ("a", "b"), seed=71, shift=1.5)
    n1 = make_node(1, ("a", "b"), seed=72, shift=-1.5)
    fed = run_federation([n0, n1], Strategy.FEDBN, rounds=2)
    m0 = model_tensors(fed.final.materialize(("a", "b"), node_id=0))
    m1 = model_tensors(fed.final.materialize(("a", "b"), node_id=1))
    assert not np.array_equal(m0["bn0/running_mean"], m1["bn0/running_mean"])
    for key in m0:
        if not key.startswith("bn"):
            assert np.array_equal(m0[key], m1[key]), key
    with pytest.raises(ProtocolError):
        fed.final.materialize(("a",))


def test_node_failure_names_node_and_round():
    n0 = make_node(0, ("a",), seed=81)
    n1 = make_node(1, ("a",), seed=82, n=2)
    n1.train.features = n1.train.features[:1]
    n1.train.labels = n1.train.labels[:1]
    n1.train.mask = n1.train.mask[:1]
    with pytest.raises(NodeFailure) as info:
        run_federation([n0, n1], Strategy.FEDAVG, rounds=2)
    assert info.value.node_id == 1
    assert info.value.round_index == 0


def test_federation_rejects_unrecoded_uncertain_labels():
    node = make_node(0, ("a",), seed=91)
    node.train.labels[0, 0] = -1.0
    with pytest.raises(DataError, match="u-zeros"):
        run_federation([node], Strategy.FEDAVG, rounds=1)


def test_run_federation_validates_arguments():
    node = make_node(0, ("a",), seed=95)
    with pytest.raises(ConfigError):
        run_federation([node], Strategy.FEDAVG, rounds=0)
    with pytest.raises(ConfigError):
        run_federation([node], Strategy.FEDAVG, rounds=1, local_epochs=0)
    with pytest.raises(ConfigError):
        run_federation([], Strategy.FEDAVG, rounds=1)


def overfit_setup(seed=101):
    """A memorizable task: labels derived from the features themselves."""
    domain = DomainSpec(latent_dim=5, feature_dim=4, mix_seed=9, noise_std=0.0)
    lm = LabelModel.sample(2, 5, RngStream(seed), label_names=("p", "q"))
    ds = generate(domain, lm, 120, RngStream(seed + 1))
    return ds


def test_evaluate_global_memorized_task_and_purity():
    ds = overfit_setup()
    labels = ds.label_names
    node = Node(
        node_id=0,
        train=ds,
        val=ds,
        model=make_model(labels, seed=3),
        rng=RngStream(5),
        lr=0.3,
        batch_size=16,
    )
    warmup_heads(node.model, ds.features, ds.labels, ds.mask, epochs=5,
                 rng=RngStream(6), lr=0.3)
    fed = run_federation([node], Strategy.FEDAVG, rounds=40)
    before = {
        layer: {k: v.copy() for k, v in t.items()}
        for layer, t in fed.best.representation.items()
    }
    report = evaluate_global(fed.best, ds, labels, RngStream(7), n_bootstrap=100)
    assert report.mean_auroc >= 0.99
    for layer, tensors in fed.best.representation.items():
        for name, value in tensors.items():
            assert np.array_equal(value, before[layer][name])


def test_evaluate_global_label_handling():
    from fedfbn.datagen import Dataset

    b0, b1 = bundles_pair()
    gm = aggregate([b0, b1], Strategy.FEDAVG, SPEC)
    part = node_data(("a", "b", "nope"), seed=111, n=60)
    ds = Dataset(
        features=part.features,
        labels=part.labels,
        mask=part.mask,
        patient_ids=np.arange(60),
        label_names=("a", "b", "nope"),
    )
    # "nope" exists in the data but the model has no head for it
    with pytest.raises(LabelError):
        evaluate_global(gm, ds, ("a", "nope"), RngStream(8), n_bootstrap=100)
    padded = evaluate_global(
        gm, ds, ("a", "nope"), RngStream(8), n_bootstrap=100, missing="chance"
    )
    assert padded.per_label_auroc["nope"] is not None
    restricted = evaluate_global(
        gm, ds, ("a", "b"), RngStream(8), n_bootstrap=100,
        missing="chance", allowed_heads=("a",),
    )
    full = evaluate_global(gm, ds, ("a", "b"), RngStream(8), n_bootstrap=100)
    assert restricted.per_label_auroc["a"] == full.per_label_auroc["a"]
    assert restricted.per_label_auroc["b"] != full.per_label_auroc["b"]


def test_global_checkpoint_round_trips(tmp_path):
    b0, b1 = bundles_pair()
    for strategy in (Strategy.FEDAVG, Strategy.FEDBN):
        gm = aggregate([b0, b1], strategy, SPEC)
        path = tmp_path / f"{strategy.value}.ckpt"
        save_global(gm, path)
        back = load_global(path)
        assert back.strategy == gm.strategy
        assert back.node_labels == gm.node_labels
        assert back.spec == gm.spec
        for layer, tensors in gm.representation.items():
            for name, value in tensors.items():
                assert value.tobytes() == back.representation[layer][name].tobytes()
        for label, tensors in gm.heads.items():
            for name, value in tensors.items():
                assert value.tobytes() == back.heads[label][name].tobytes()
        if gm.per_node_bn is None:
            assert back.per_node_bn is None
        else:
            for node_id, layers in gm.per_node_bn.items():
                for layer, tensors in layers.items():
                    for name, value in tensors.items():
                        assert (
                            value.tobytes()
                            == back.per_node_bn[node_id][layer][name].tobytes()
                        )
