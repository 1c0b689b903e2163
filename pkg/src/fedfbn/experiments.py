"""The four benchmark scenarios, arm orchestration, and report files.

A scenario fixes datasets, label topology, test sets, and label views:

* iid_complete      one domain, stratified halves, full labels at both nodes
* iid_partial       same data, labels pruned to an 11/7 split sharing 4
* non_iid_complete  two shifted domains, both nodes train the same 7 labels
* non_iid_partial   two shifted domains plus the 11/7-share-4 label split

Every scenario adds a third shifted domain as an external test set. Arms
(fedfbn / fedavg / fedbn / per-node local / centralized) all start from
one shared pretrained trunk with warmed-up heads; only the aggregation
strategy differs, which is asserted by hashing the shared inputs.

Everything here is a pure function of (config, master seed): stream
labels name their purpose, reductions are fixed-order, file emission uses
repr() floats and sorted JSON keys, and nothing records wall-clock time.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from . import checkpoint
from .config import ExperimentConfig, node_learning_rates
from .datagen import (
    Dataset,
    DomainSpec,
    LabelModel,
    apply_u_zeros,
    concat_naive,
    generate,
    make_iid_halves,
    save_tabular,
    shifted_domain,
    split_by_patient,
)
from .errors import ConfigError, ParseError, ProtocolError
from .federation import (
    GlobalModel,
    Node,
    RoundReport,
    Strategy,
    Weighting,
    evaluate_global,
    run_federation,
    save_global,
)
from .metrics import EvalReport, paired_ttest
from .network import Model, ModelSpec, model_copy, pretrain_backbone, warmup_heads, with_heads
from .numerics import RngStream

REPORT_PREFIX = "report_"
ENVELOPE_SCHEMA_VERSION = 1

# patient-id namespaces keep ids unique across independently drawn pools
_PID_NODE1 = 1_000_000
_PID_EXTERNAL = 2_000_000
_PID_PRETRAIN = 3_000_000


@dataclass
class ScenarioData:
    """Everything an arm needs; all label recoding already applied."""

    all_labels: tuple[str, ...]
    node_labels: list[tuple[str, ...]]
    node_train: list[Dataset]
    node_val: list[Dataset]
    pooled_train: Dataset
    pooled_val: Dataset
    test_sets: dict[str, Dataset]
    views: dict[str, tuple[str, ...]]
    eval_pairs: list[tuple[str, str]]
    pretrain: Dataset
    source_labels: tuple[str, ...]

    def content_hashes(self) -> dict[str, str]:
        parts: dict[str, Dataset] = {
            "pretrain": self.pretrain,
            "pooled_train": self.pooled_train,
            "pooled_val": self.pooled_val,
        }
        for i in range(len(self.node_train)):
            parts[f"node{i}_train"] = self.node_train[i]
            parts[f"node{i}_val"] = self.node_val[i]
        for name, ds in self.test_sets.items():
            parts[f"test_{name}"] = ds
        return {name: ds.content_hash() for name, ds in sorted(parts.items())}


def _label_topology(cfg: ExperimentConfig, names: tuple[str, ...], master: RngStream):
    """11/7 node subsets sharing 4 labels, drawn from one permutation."""
    perm = master.child("label-topology").permutation(len(names))
    ordered = [names[i] for i in perm]
    node0 = tuple(ordered[0:11])
    node1 = tuple(ordered[7:14])
    shared = tuple(ordered[7:11])
    return node0, node1, shared


def build_scenario(cfg: ExperimentConfig) -> ScenarioData:
    """Deterministically construct datasets, label sets, and test views."""
    master = RngStream(cfg.seed)
    label_model = LabelModel.sample(
        cfg.n_labels,
        cfg.latent_dim,
        master.child("label-model"),
        uncertain_rate=cfg.uncertain_rate,
    )
    source_model = LabelModel.sample(
        cfg.n_labels,
        cfg.latent_dim,
        master.child("source-label-model"),
        uncertain_rate=0.0,
        label_names=tuple(f"src{i:02d}" for i in range(cfg.n_labels)),
    )
    base = DomainSpec(
        latent_dim=cfg.latent_dim,
        feature_dim=cfg.feature_dim,
        mix_seed=cfg.seed,
        noise_std=cfg.noise_std,
        images_per_patient=cfg.images_per_patient,
    )
    names = label_model.label_names
    n = cfg.n_patients_per_node

    pretrain = apply_u_zeros(
        generate(
            base,
            source_model,
            n,
            master.child("pretrain-data"),
            patient_id_start=_PID_PRETRAIN,
        )
    )
    external_domain = shifted_domain(
        base, master.child("shift:external"), cfg.shift_magnitude
    )
    external = apply_u_zeros(
        generate(
            external_domain,
            label_model,
            max(2, round(0.4 * n)),
            master.child("data:external"),
            patient_id_start=_PID_EXTERNAL,
        )
    )

    if cfg.scenario.startswith("iid"):
        pool = apply_u_zeros(
            generate(base, label_model, 2 * n, master.child("data:pool"))
        )
        train, val, test = split_by_patient(
            pool, (0.7, 0.1, 0.2), master.child("split:pool")
        )
        train0, train1 = make_iid_halves(train, master.child("halves:train"))
        val0, val1 = make_iid_halves(val, master.child("halves:val"))
        test_sets = {"internal": test, "external": external}
    else:
        domain0 = shifted_domain(base, master.child("shift:node0"), cfg.shift_magnitude)
        domain1 = shifted_domain(base, master.child("shift:node1"), cfg.shift_magnitude)
        ds0 = apply_u_zeros(generate(domain0, label_model, n, master.child("data:node0")))
        ds1 = apply_u_zeros(
            generate(
                domain1, label_model, n, master.child("data:node1"),
                patient_id_start=_PID_NODE1,
            )
        )
        train0, val0, test0 = split_by_patient(
            ds0, (0.7, 0.1, 0.2), master.child("split:node0")
        )
        train1, val1, test1 = split_by_patient(
            ds1, (0.7, 0.1, 0.2), master.child("split:node1")
        )
        test_sets = {
            "internal_node0": test0,
            "internal_node1": test1,
            "external": external,
        }

    if cfg.scenario == "iid_complete":
        node_labels = [names, names]
        views = {"all": names}
    elif cfg.scenario == "non_iid_complete":
        perm = master.child("label-topology").permutation(len(names))
        shared7 = tuple(names[i] for i in perm[:7])
        node_labels = [shared7, shared7]
        views = {"shared": shared7}
    else:
        node0_labels, node1_labels, shared = _label_topology(cfg, names, master)
        node_labels = [node0_labels, node1_labels]
        views = {
            "all": names,
            "shared": shared,
            "node0": node0_labels,
            "node1": node1_labels,
        }

    node_train = [
        train0.project_labels(node_labels[0]),
        train1.project_labels(node_labels[1]),
    ]
    node_val = [
        val0.project_labels(node_labels[0]),
        val1.project_labels(node_labels[1]),
    ]
    pooled_train = concat_naive(node_train[0], node_train[1])
    pooled_val = concat_naive(node_val[0], node_val[1])

    eval_pairs = [
        (test_name, view_name)
        for test_name in test_sets
        for view_name in views
    ]
    return ScenarioData(
        all_labels=names,
        node_labels=node_labels,
        node_train=node_train,
        node_val=node_val,
        pooled_train=pooled_train,
        pooled_val=pooled_val,
        test_sets=test_sets,
        views=views,
        eval_pairs=eval_pairs,
        pretrain=pretrain,
        source_labels=source_model.label_names,
    )


def model_hash(model: Model) -> str:
    h = hashlib.sha256()
    for key, tensor in checkpoint.model_tensors(model).items():
        h.update(key.encode("utf-8"))
        h.update(str(tensor.shape).encode())
        h.update(tensor.tobytes())
    return h.hexdigest()


@dataclass
class ArmResult:
    arm: str
    reports: dict[tuple[str, str, str], EvalReport] = field(default_factory=dict)
    round_reports: list[RoundReport] = field(default_factory=list)
    best_round: int = -1
    global_model: GlobalModel | None = None
    error: str | None = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    data: ScenarioData
    arms: dict[str, ArmResult]
    dataset_hashes: dict[str, str]
    start_model_hashes: dict[str, str]


def _bn_variants(gm: GlobalModel, test_name: str) -> list[tuple[str, int | None]]:
    """Which (variant, node_id) evaluations an arm owes on a test set.

    FEDBN keeps per-node models, so it answers once per node; a node's own
    internal test set only gets that node's view.
    """
    if gm.per_node_bn is None:
        return [("", None)]
    node_ids = sorted(gm.per_node_bn)
    if test_name == "internal_node0":
        return [("node0", 0)]
    if test_name == "internal_node1":
        return [("node1", 1)]
    return [(f"node{i}", i) for i in node_ids]


def _execute_arm(
    arm: str,
    cfg: ExperimentConfig,
    data: ScenarioData,
    node_models: list[Model],
    central_model: Model,
    master: RngStream,
) -> ArmResult:
    lrs = node_learning_rates(cfg)
    if arm in ("fedfbn", "fedavg", "fedbn"):
        nodes = [
            Node(
                node_id=i,
                train=data.node_train[i],
                val=data.node_val[i],
                model=model_copy(node_models[i]),
                rng=master.child(f"batches:node{i}"),
                lr=lrs[i],
                batch_size=cfg.batch_size,
            )
            for i in (0, 1)
        ]
        strategy = Strategy(arm)
    elif arm in ("local_node0", "local_node1"):
        i = int(arm[-1])
        nodes = [
            Node(
                node_id=i,
                train=data.node_train[i],
                val=data.node_val[i],
                model=model_copy(node_models[i]),
                rng=master.child(f"batches:node{i}"),
                lr=lrs[i],
                batch_size=cfg.batch_size,
            )
        ]
        strategy = Strategy.FEDAVG
    elif arm == "centralized":
        nodes = [
            Node(
                node_id=0,
                train=data.pooled_train,
                val=data.pooled_val,
                model=model_copy(central_model),
                rng=master.child("batches:centralized"),
                lr=cfg.lr,
                batch_size=cfg.batch_size,
            )
        ]
        strategy = Strategy.FEDAVG
    else:
        raise ConfigError(f"unknown arm '{arm}'")

    fed = run_federation(
        nodes,
        strategy,
        rounds=cfg.rounds,
        local_epochs=cfg.local_epochs,
        weighting=Weighting(cfg.weighting),
    )
    result = ArmResult(
        arm=arm,
        round_reports=fed.reports,
        best_round=fed.best_round,
        global_model=fed.best,
    )
    for test_name, view_name in data.eval_pairs:
        ds = data.test_sets[test_name]
        labels = data.views[view_name]
        for variant, node_id in _bn_variants(fed.best, test_name):
            # A per-node model only owns the heads its node trained; other
            # labels fall to chance, same as labels no arm ever saw.
            allowed = None
            if node_id is not None:
                allowed = fed.best.node_labels[node_id]
            result.reports[(test_name, view_name, variant)] = evaluate_global(
                fed.best,
                ds,
                labels,
                rng=master.child(f"eval:{test_name}:{view_name}"),
                n_bootstrap=cfg.n_bootstrap,
                node_id=node_id,
                missing="chance",
                allowed_heads=allowed,
            )
    return result


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentResult:
    """Build the scenario once, then run every configured arm against it.

    Arms share the pretrained trunk and warmed heads bit-for-bit (deep
    copies), and dataset/model hashes are checked afterwards so an arm
    mutating shared state is an error, not a silent skew. A failing arm is
    recorded and the remaining arms still run.
    """
    data = build_scenario(cfg)
    master = RngStream(cfg.seed)
    spec = ModelSpec(
        input_dim=cfg.feature_dim,
        hidden_dims=cfg.hidden_dims,
        label_names=(),
        bn_momentum=cfg.bn_momentum,
        bn_eps=cfg.bn_eps,
    )
    backbone = pretrain_backbone(
        spec,
        data.pretrain.features,
        data.pretrain.labels,
        data.pretrain.mask,
        source_labels=data.source_labels,
        epochs=cfg.pretrain_epochs,
        rng=master.child("pretrain"),
        lr=cfg.pretrain_lr,
        batch_size=cfg.batch_size,
    )
    node_models = []
    for i in (0, 1):
        model = with_heads(backbone, data.node_labels[i], master.child("heads"))
        if cfg.warmup_epochs > 0:
            warmup_heads(
                model,
                data.node_train[i].features,
                data.node_train[i].labels,
                data.node_train[i].mask,
                epochs=cfg.warmup_epochs,
                rng=master.child(f"warmup:node{i}"),
                lr=cfg.warmup_lr,
                batch_size=cfg.batch_size,
            )
        node_models.append(model)
    central_model = with_heads(
        backbone, data.pooled_train.label_names, master.child("heads")
    )
    if cfg.warmup_epochs > 0:
        warmup_heads(
            central_model,
            data.pooled_train.features,
            data.pooled_train.labels,
            data.pooled_train.mask,
            epochs=cfg.warmup_epochs,
            rng=master.child("warmup:centralized"),
            lr=cfg.warmup_lr,
            batch_size=cfg.batch_size,
        )

    dataset_hashes = data.content_hashes()
    start_hashes = {
        "node0": model_hash(node_models[0]),
        "node1": model_hash(node_models[1]),
        "centralized": model_hash(central_model),
    }

    arms: dict[str, ArmResult] = {}
    for arm in cfg.arms:
        try:
            arms[arm] = _execute_arm(
                arm, cfg, data, node_models, central_model, master
            )
        except Exception as exc:
            arms[arm] = ArmResult(arm=arm, error=f"{type(exc).__name__}: {exc}")
        if progress is not None:
            status = arms[arm].error or "ok"
            progress(f"arm {arm}: {status}")

    if data.content_hashes() != dataset_hashes:
        raise ProtocolError("an arm mutated the shared datasets")
    end_hashes = {
        "node0": model_hash(node_models[0]),
        "node1": model_hash(node_models[1]),
        "centralized": model_hash(central_model),
    }
    if end_hashes != start_hashes:
        raise ProtocolError("an arm mutated the shared warmed models")

    return ExperimentResult(
        config=cfg,
        data=data,
        arms=arms,
        dataset_hashes=dataset_hashes,
        start_model_hashes=start_hashes,
    )


# ---------------------------------------------------------------- reports


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _envelope(arm: str, variant: str, test_set: str, view: str,
              view_labels, report: EvalReport) -> dict:
    return {
        "schema_version": ENVELOPE_SCHEMA_VERSION,
        "arm": arm,
        "variant": variant,
        "test_set": test_set,
        "view": view,
        "view_labels": list(view_labels),
        "report": json.loads(report.to_json()),
    }


def _envelope_name(env: dict) -> str:
    parts = [env["arm"]]
    if env["variant"]:
        parts.append(env["variant"])
    parts.extend([env["test_set"], env["view"]])
    return REPORT_PREFIX + "_".join(parts) + ".json"


def render_tables(envelopes: list[dict]) -> dict[str, str]:
    """Summary and per-label CSV texts from report envelopes.

    Used both when a run emits its reports and when `report` re-renders an
    output directory, so the two paths cannot drift apart.
    """
    envelopes = sorted(
        envelopes,
        key=lambda e: (e["test_set"], e["view"], e["arm"], e["variant"]),
    )
    baseline: dict[tuple[str, str], list[float]] = {}
    for env in envelopes:
        if env["arm"] == "fedfbn" and env["variant"] == "":
            baseline[(env["test_set"], env["view"])] = env["report"][
                "per_replicate_means"
            ]

    groups: dict[tuple[str, str], list[dict]] = {}
    for env in envelopes:
        groups.setdefault((env["test_set"], env["view"]), []).append(env)

    lines = [
        "arm,variant,test_set,view,mean_auroc,ci_lo,ci_hi,n_bootstrap,"
        "undefined_labels,p_vs_fedfbn,significant,best"
    ]
    for key in sorted(groups):
        group = groups[key]
        best_mean = max(e["report"]["mean_auroc"] for e in group)
        for env in group:
            rep = env["report"]
            p_value: float | None = None
            significant: bool | None = None
            is_baseline = env["arm"] == "fedfbn" and env["variant"] == ""
            if not is_baseline and key in baseline:
                cmp = paired_ttest(baseline[key], rep["per_replicate_means"])
                p_value = cmp.p_value
                significant = cmp.significant
            row = [
                env["arm"],
                env["variant"],
                env["test_set"],
                env["view"],
                _fmt(rep["mean_auroc"]),
                _fmt(rep["ci95"][0]),
                _fmt(rep["ci95"][1]),
                str(rep["n_bootstrap"]),
                "|".join(rep["undefined_labels"]),
                _fmt(p_value),
                _fmt(significant),
                "true" if rep["mean_auroc"] == best_mean else "",
            ]
            lines.append(",".join(row))
    files = {"summary.csv": "\n".join(lines) + "\n"}

    by_arm: dict[str, list[dict]] = {}
    for env in envelopes:
        by_arm.setdefault(env["arm"], []).append(env)
    for arm, envs in by_arm.items():
        rows = ["variant,test_set,view,label,auroc"]
        for env in envs:
            per_label = env["report"]["per_label_auroc"]
            for label in sorted(per_label):
                rows.append(
                    ",".join(
                        [
                            env["variant"],
                            env["test_set"],
                            env["view"],
                            label,
                            _fmt(per_label[label]),
                        ]
                    )
                )
        files[f"per_label_{arm}.csv"] = "\n".join(rows) + "\n"
    return files


def _rounds_csv(result: ArmResult) -> str:
    lines = ["round,node_id,train_loss,val_loss,mean_val_loss,is_best"]
    for report in result.round_reports:
        for node_id in sorted(report.train_losses):
            lines.append(
                ",".join(
                    [
                        str(report.round_index),
                        str(node_id),
                        _fmt(report.train_losses[node_id]),
                        _fmt(report.val_losses[node_id]),
                        _fmt(report.mean_val_loss),
                        _fmt(report.is_best),
                    ]
                )
            )
    return "\n".join(lines) + "\n"


def emit_reports(result: ExperimentResult, out_dir, config_text: str) -> list[str]:
    """Write every run artifact; returns the relative file names written."""
    os.makedirs(out_dir, exist_ok=True)
    files: list[str] = []

    def _write(name: str, text: str) -> None:
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        files.append(name)

    _write("config.ini", config_text)

    envelopes: list[dict] = []
    errors: dict[str, str] = {}
    for arm, arm_result in result.arms.items():
        if arm_result.error is not None:
            errors[arm] = arm_result.error
            continue
        _write(f"rounds_{arm}.csv", _rounds_csv(arm_result))
        ckpt_name = f"global_{arm}.ckpt"
        save_global(arm_result.global_model, os.path.join(out_dir, ckpt_name))
        files.append(ckpt_name)
        for (test_set, view, variant), report in arm_result.reports.items():
            env = _envelope(
                arm, variant, test_set, view, result.data.views[view], report
            )
            _write(_envelope_name(env), json.dumps(env, sort_keys=True, indent=2) + "\n")
            envelopes.append(env)

    for name, text in render_tables(envelopes).items():
        _write(name, text)

    manifest = {
        "schema_version": 1,
        "scenario": result.config.scenario,
        "seed": result.config.seed,
        "config_sha256": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "arms": list(result.config.arms),
        "arm_errors": errors,
        "dataset_hashes": result.dataset_hashes,
        "start_model_hashes": result.start_model_hashes,
        "best_rounds": {
            arm: r.best_round for arm, r in result.arms.items() if r.error is None
        },
        "files": sorted(files),
    }
    _write("manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return sorted(files)


def load_envelopes(in_dir) -> list[dict]:
    envelopes = []
    for name in sorted(os.listdir(in_dir)):
        if not (name.startswith(REPORT_PREFIX) and name.endswith(".json")):
            continue
        path = os.path.join(in_dir, name)
        with open(path, "r", encoding="utf-8") as fh:
            try:
                env = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON: {exc}") from None
        if env.get("schema_version") != ENVELOPE_SCHEMA_VERSION:
            raise ParseError(f"{path}: unsupported envelope schema")
        envelopes.append(env)
    if not envelopes:
        raise ParseError(f"{in_dir}: no {REPORT_PREFIX}*.json files found")
    return envelopes


def rerender_reports(in_dir) -> list[str]:
    """Rebuild summary and per-label tables from the report JSONs."""
    tables = render_tables(load_envelopes(in_dir))
    for name, text in tables.items():
        with open(os.path.join(in_dir, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return sorted(tables)


def write_datasets(cfg: ExperimentConfig, out_dir) -> list[str]:
    """Materialize the scenario's datasets as tabular files (gen-data)."""
    data = build_scenario(cfg)
    os.makedirs(out_dir, exist_ok=True)
    parts: dict[str, Dataset] = {"pretrain": data.pretrain}
    for i in range(2):
        parts[f"node{i}_train"] = data.node_train[i]
        parts[f"node{i}_val"] = data.node_val[i]
    for name, ds in data.test_sets.items():
        parts[f"test_{name}"] = ds
    files = []
    index = {}
    for name in sorted(parts):
        ds = parts[name]
        fname = f"{name}.csv"
        save_tabular(ds, os.path.join(out_dir, fname))
        files.append(fname)
        index[name] = {
            "file": fname,
            "rows": ds.n,
            "labels": list(ds.label_names),
            "sha256": ds.content_hash(),
        }
    doc = {
        "schema_version": 1,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "datasets": index,
    }
    with open(
        os.path.join(out_dir, "datasets.json"), "w", encoding="utf-8", newline=""
    ) as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    files.append("datasets.json")
    return sorted(files)
