"""Scenario-driven attack runs: parsing, threat gating, scheduling, records.

A scenario is a strict JSON document (unknown fields are rejected, defaults
are echoed back explicitly) naming one attack, one target model reference,
an environment, and the threat-model grants the run is allowed to assume.
Execution refuses to start any attack whose required capability triple is
not dominated by the grants; that check is the security boundary of the
whole workbench and is enforced before any resource is touched.

Runs persist as append-only JSON records. Metrics maps are deterministic
functions of (scenario, seed); wall-clock timings live next to the metrics
in a separate `timings` block so re-runs reproduce metrics bit-for-bit.
"""

from __future__ import annotations

import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import zlib

from .datasets import Dataset, DatasetSpec, generate, load_dataset, save_dataset, split
from .network import TrainConfig, train
from .query_attacks import (
    GradientHandle,
    InversionConfig,
    KnockoffConfig,
    QueryHandle,
    ThreatModel,
    knockoff_extract,
    miface_invert,
    save_pgm,
    staged_inversion_study,
)
from .sidechannel import (
    BUILTIN_ENVIRONMENT_PROFILES,
    BUILTIN_MACHINE_PROFILES,
    ds_extract,
    ds_truth_sequence,
    sequence_fidelity,
    simulate_kernel_trace,
    simulate_symbol_stream,
    dr_classify,
    fit_fingerprint_space,
    train_ds_model,
    write_histograms_csv,
    write_trace_jsonl,
)
from .similarity import DistillConfig, accuracy, equivalency_report, fidelity
from .zoo import (
    ArchitectureSpec,
    BUILTIN_ARCHITECTURES,
    CheckpointError,
    ModelRef,
    build_model,
    builtin_spec,
    checkpoint_path,
    load_checkpoint,
    save_checkpoint,
)

SCHEMA_VERSION = 1
ROOT_ENV_VAR = "EXTRACTBENCH_ROOT"

ATTACK_TYPES = ("knockoff", "deepsniffer", "deeprecon", "miface",
                "staged_inversion", "equivalency")
EXCLUSIVE_ATTACKS = frozenset({"deepsniffer", "deeprecon"})

REQUIRED_TRIPLES = {
    "knockoff": ThreatModel("hidden", "none", "partial"),
    "miface": ThreatModel("hidden", "none", "partial"),
    "staged_inversion": ThreatModel("hidden", "none", "partial"),
    "equivalency": ThreatModel("hidden", "none", "partial"),
    "deepsniffer": ThreatModel("observed", "partial", "none"),
    "deeprecon": ThreatModel("observed", "partial", "none"),
}

CONVENTIONAL_ARCHITECTURES = ("mini-vgg-4", "mini-vgg-6", "mini-resnet-4",
                              "mini-resnet-6", "mini-dense-3", "mini-dense-4")

AVAILABLE_METRICS = {
    "knockoff": ("fidelity", "queries_used", "accuracy_target",
                 "accuracy_stolen", "final_loss"),
    "miface": ("success", "final_posterior", "iterations", "trace_length"),
    "staged_inversion": ("fidelity", "class_similarity", "pwcca",
                         "inversion_success"),
    "deepsniffer": ("sequence_fidelity", "predicted_length", "true_length"),
    "deeprecon": ("exact_accuracy", "family_accuracy"),
    "equivalency": ("fidelity", "pwcca", "distilled_pwcca", "accuracy_target",
                    "accuracy_stolen"),
}


class ScenarioError(ValueError):
    """Scenario document violates the schema."""


# ---------------------------------------------------------------------------
# strict document traversal
# ---------------------------------------------------------------------------

_REQUIRED = object()


class _Section:
    """Dict view that tracks consumption and rejects unknown fields."""

    def __init__(self, doc, path: str):
        if not isinstance(doc, dict):
            raise ScenarioError(f"{path or 'document'} must be an object")
        self.doc = doc
        self.path = path
        self.seen: set[str] = set()

    def _name(self, key):
        return f"{self.path}.{key}" if self.path else key

    def take(self, key, default=_REQUIRED):
        self.seen.add(key)
        if key not in self.doc or self.doc[key] is None:
            if default is _REQUIRED:
                raise ScenarioError(f"{self._name(key)} required")
            return default
        return self.doc[key]

    def section(self, key, required=False):
        self.seen.add(key)
        value = self.doc.get(key)
        if value is None:
            if required:
                raise ScenarioError(f"{self._name(key)} required")
            value = {}
        return _Section(value, self._name(key))

    def choice(self, key, options, default=_REQUIRED):
        value = self.take(key, default)
        if value not in options:
            raise ScenarioError(
                f"{self._name(key)}: {value!r} is not one of {sorted(options)}")
        return value

    def close(self):
        unknown = set(self.doc) - self.seen
        if unknown:
            raise ScenarioError(
                f"unknown field(s) {sorted(self._name(k) for k in unknown)}")


def _parse_train_config(section: _Section, scenario_seed: int,
                        defaults: TrainConfig) -> TrainConfig:
    cfg = TrainConfig(
        learning_rate=float(section.take("learning_rate", defaults.learning_rate)),
        batch_size=int(section.take("batch_size", defaults.batch_size)),
        epochs=int(section.take("epochs", defaults.epochs)),
        loss=section.choice("loss", ("cross_entropy", "soft_target_kl"),
                            defaults.loss),
        seed=int(section.take("seed", scenario_seed)))
    section.close()
    return cfg


# ---------------------------------------------------------------------------
# attack parameter blocks
# ---------------------------------------------------------------------------

@dataclass
class KnockoffParams:
    query_budget: int
    output_mode: str = "confidence_vector"
    surrogate_architecture: str | None = None
    query_fraction: float = 0.5
    recreate: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=20, loss="soft_target_kl"))

    def to_dict(self):
        return {"query_budget": self.query_budget, "output_mode": self.output_mode,
                "surrogate_architecture": self.surrogate_architecture,
                "query_fraction": self.query_fraction,
                "recreate": self.recreate.to_dict()}


@dataclass
class InversionParams:
    posterior_threshold: float = 0.95
    max_iterations: int = 400
    step_size: float = 0.2
    init_mode: str = "random"
    clamp_range: tuple[float, float] = (-4.0, 4.0)

    def to_dict(self):
        return {"posterior_threshold": self.posterior_threshold,
                "max_iterations": self.max_iterations,
                "step_size": self.step_size, "init_mode": self.init_mode,
                "clamp_range": list(self.clamp_range)}


@dataclass
class MifaceParams(InversionParams):
    target_class: int = 0
    query_fraction: float = 0.5

    def to_dict(self):
        out = super().to_dict()
        out.update({"target_class": self.target_class,
                    "query_fraction": self.query_fraction})
        return out


@dataclass
class StagedInversionParams:
    budgets: tuple[int, ...]
    output_mode: str = "confidence_vector"
    surrogate_architecture: str | None = None
    query_fraction: float = 0.5
    recreate: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=20, loss="soft_target_kl"))
    inversion: InversionParams = field(default_factory=InversionParams)

    def to_dict(self):
        return {"budgets": list(self.budgets), "output_mode": self.output_mode,
                "surrogate_architecture": self.surrogate_architecture,
                "query_fraction": self.query_fraction,
                "recreate": self.recreate.to_dict(),
                "inversion": self.inversion.to_dict()}


@dataclass
class DeepSnifferParams:
    corpus_architectures: tuple[str, ...] = CONVENTIONAL_ARCHITECTURES
    traces_per_architecture: int = 6
    train_jitter: float = 0.05
    window: int = 1
    classifier_epochs: int = 200

    def to_dict(self):
        return {"corpus_architectures": list(self.corpus_architectures),
                "traces_per_architecture": self.traces_per_architecture,
                "train_jitter": self.train_jitter, "window": self.window,
                "classifier_epochs": self.classifier_epochs}


@dataclass
class DeepReconParams:
    corpus_architectures: tuple[str, ...] = tuple(
        a for a in BUILTIN_ARCHITECTURES if a != "mini-student-cnn")
    histograms_per_architecture: int = 8
    trials: int = 6
    k_neighbors: int = 5

    def to_dict(self):
        return {"corpus_architectures": list(self.corpus_architectures),
                "histograms_per_architecture": self.histograms_per_architecture,
                "trials": self.trials, "k_neighbors": self.k_neighbors}


@dataclass
class EquivalencyParams:
    query_budget: int
    output_mode: str = "confidence_vector"
    surrogate_architecture: str | None = None
    query_fraction: float = 0.5
    recreate: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=20, loss="soft_target_kl"))
    student_architecture: str = "mini-student-cnn"
    temperature: float = 4.0
    hard_label_weight: float = 0.1
    distill_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=20))

    def to_dict(self):
        return {"query_budget": self.query_budget, "output_mode": self.output_mode,
                "surrogate_architecture": self.surrogate_architecture,
                "query_fraction": self.query_fraction,
                "recreate": self.recreate.to_dict(),
                "student_architecture": self.student_architecture,
                "temperature": self.temperature,
                "hard_label_weight": self.hard_label_weight,
                "distill_train": self.distill_train.to_dict()}


def _parse_attack_params(attack_type: str, section: _Section, seed: int):
    soft = TrainConfig(epochs=20, loss="soft_target_kl", seed=seed)
    if attack_type == "knockoff":
        params = KnockoffParams(
            query_budget=int(section.take("query_budget")),
            output_mode=section.choice("output_mode",
                                       ("confidence_vector", "top1_label"),
                                       "confidence_vector"),
            surrogate_architecture=section.take("surrogate_architecture", None),
            query_fraction=float(section.take("query_fraction", 0.5)),
            recreate=_parse_train_config(section.section("recreate"), seed, soft))
    elif attack_type == "miface":
        clamp = section.take("clamp_range", [-4.0, 4.0])
        params = MifaceParams(
            target_class=int(section.take("target_class")),
            posterior_threshold=float(section.take("posterior_threshold", 0.95)),
            max_iterations=int(section.take("max_iterations", 400)),
            step_size=float(section.take("step_size", 0.2)),
            init_mode=section.choice("init_mode",
                                     ("random", "auxiliary_sample"), "random"),
            clamp_range=(float(clamp[0]), float(clamp[1])),
            query_fraction=float(section.take("query_fraction", 0.5)))
    elif attack_type == "staged_inversion":
        inv = section.section("inversion")
        clamp = inv.take("clamp_range", [-4.0, 4.0])
        inversion = InversionParams(
            posterior_threshold=float(inv.take("posterior_threshold", 0.95)),
            max_iterations=int(inv.take("max_iterations", 400)),
            step_size=float(inv.take("step_size", 0.2)),
            init_mode=inv.choice("init_mode", ("random", "auxiliary_sample"),
                                 "random"),
            clamp_range=(float(clamp[0]), float(clamp[1])))
        inv.close()
        budgets = section.take("budgets")
        params = StagedInversionParams(
            budgets=tuple(int(b) for b in budgets),
            output_mode=section.choice("output_mode",
                                       ("confidence_vector", "top1_label"),
                                       "confidence_vector"),
            surrogate_architecture=section.take("surrogate_architecture", None),
            query_fraction=float(section.take("query_fraction", 0.5)),
            recreate=_parse_train_config(section.section("recreate"), seed, soft),
            inversion=inversion)
    elif attack_type == "deepsniffer":
        params = DeepSnifferParams(
            corpus_architectures=tuple(section.take(
                "corpus_architectures", list(CONVENTIONAL_ARCHITECTURES))),
            traces_per_architecture=int(section.take("traces_per_architecture", 6)),
            train_jitter=float(section.take("train_jitter", 0.05)),
            window=int(section.take("window", 1)),
            classifier_epochs=int(section.take("classifier_epochs", 200)))
    elif attack_type == "deeprecon":
        default_corpus = [a for a in BUILTIN_ARCHITECTURES
                          if a != "mini-student-cnn"]
        params = DeepReconParams(
            corpus_architectures=tuple(section.take("corpus_architectures",
                                                    default_corpus)),
            histograms_per_architecture=int(
                section.take("histograms_per_architecture", 8)),
            trials=int(section.take("trials", 6)),
            k_neighbors=int(section.take("k_neighbors", 5)))
    elif attack_type == "equivalency":
        params = EquivalencyParams(
            query_budget=int(section.take("query_budget")),
            output_mode=section.choice("output_mode",
                                       ("confidence_vector", "top1_label"),
                                       "confidence_vector"),
            surrogate_architecture=section.take("surrogate_architecture", None),
            query_fraction=float(section.take("query_fraction", 0.5)),
            recreate=_parse_train_config(section.section("recreate"), seed, soft),
            student_architecture=section.take("student_architecture",
                                              "mini-student-cnn"),
            temperature=float(section.take("temperature", 4.0)),
            hard_label_weight=float(section.take("hard_label_weight", 0.1)),
            distill_train=_parse_train_config(
                section.section("distill_train"), seed, TrainConfig(epochs=20)))
    else:
        raise ScenarioError(f"attack.type: unknown attack {attack_type!r}")
    section.close()
    return params


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass
class EnvironmentSpec:
    environment_profile: str | None = None
    machine_profile: str | None = None
    verbose_runtime: bool = False

    def to_dict(self):
        return {"environment_profile": self.environment_profile,
                "machine_profile": self.machine_profile,
                "verbose_runtime": self.verbose_runtime}


@dataclass
class Scenario:
    id: str
    attack_type: str
    attack_params: object
    target: ModelRef
    environment: EnvironmentSpec
    grants: ThreatModel
    evaluation: tuple[str, ...]
    seed: int
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "id": self.id,
                "seed": self.seed,
                "attack": {"type": self.attack_type,
                           "params": self.attack_params.to_dict()},
                "target": self.target.to_dict(),
                "environment": self.environment.to_dict(),
                "grants": self.grants.to_dict(),
                "evaluation": list(self.evaluation)}


def parse_scenario(document: str) -> Scenario:
    """Parse and fully validate a scenario JSON document.

    Unknown fields anywhere are rejected; every omitted optional field is
    filled with its default, so `to_dict()` round-trips an explicit form.
    """
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}")

    top = _Section(doc, "")
    version = int(top.take("schema_version"))
    if version != SCHEMA_VERSION:
        raise ScenarioError(
            f"schema_version: {version} unsupported (expected {SCHEMA_VERSION})")
    scenario_id = str(top.take("id"))
    seed = int(top.take("seed", 0))

    attack = top.section("attack", required=True)
    attack_type = attack.choice("type", ATTACK_TYPES)
    params = _parse_attack_params(attack_type, attack.section("params"), seed)
    attack.close()

    target = top.section("target", required=True)
    subset = target.take("class_subset", None)
    ref = ModelRef(
        architecture_id=str(target.take("architecture_id")),
        dataset_id=str(target.take("dataset_id")),
        class_subset=tuple(int(c) for c in subset) if subset else None,
        checkpoint_tag=str(target.take("checkpoint_tag", "default")))
    target.close()

    env = top.section("environment")
    environment = EnvironmentSpec(
        environment_profile=env.take("environment_profile", None),
        machine_profile=env.take("machine_profile", None),
        verbose_runtime=bool(env.take("verbose_runtime", False)))
    env.close()

    grants_sec = top.section("grants", required=True)
    grants = ThreatModel(
        model_knowledge=grants_sec.choice("model_knowledge",
                                          ("observed", "hidden")),
        system_knowledge=grants_sec.choice("system_knowledge",
                                           ("partial", "none")),
        aux_dataset=grants_sec.choice("aux_dataset", ("partial", "none")))
    grants_sec.close()

    evaluation = tuple(top.take("evaluation", list(AVAILABLE_METRICS[attack_type])))
    top.close()

    available = set(AVAILABLE_METRICS[attack_type])
    bad = [m for m in evaluation if m not in available]
    if bad:
        raise ScenarioError(
            f"evaluation: metric(s) {bad} not produced by {attack_type} "
            f"(available: {sorted(available)})")

    if attack_type == "deepsniffer":
        if environment.machine_profile is not None:
            raise ScenarioError(
                "environment.machine_profile: deepsniffer captures accelerator "
                "traces and needs environment.environment_profile, not a CPU "
                "machine_profile")
        if environment.environment_profile is None:
            raise ScenarioError(
                "environment.environment_profile required for deepsniffer")
        if environment.environment_profile not in BUILTIN_ENVIRONMENT_PROFILES:
            raise ScenarioError(
                f"environment.environment_profile: unknown profile "
                f"{environment.environment_profile!r}")
    if attack_type == "deeprecon":
        if environment.environment_profile is not None:
            raise ScenarioError(
                "environment.environment_profile: deeprecon probes the CPU "
                "cache and needs environment.machine_profile, not an "
                "accelerator environment_profile")
        if environment.machine_profile is None:
            raise ScenarioError(
                "environment.machine_profile required for deeprecon")
        if environment.machine_profile not in BUILTIN_MACHINE_PROFILES:
            raise ScenarioError(
                f"environment.machine_profile: unknown profile "
                f"{environment.machine_profile!r}")

    return Scenario(id=scenario_id, attack_type=attack_type,
                    attack_params=params, target=ref, environment=environment,
                    grants=grants, evaluation=evaluation, seed=seed,
                    schema_version=version)


def validate_threat_model(scenario: Scenario) -> list[str]:
    """Violations of the attack's required capability triple (empty = ok)."""
    violations = [f"{scenario.attack_type}: {v}" for v in
                  scenario.grants.dominates(REQUIRED_TRIPLES[scenario.attack_type])]
    init_mode = getattr(scenario.attack_params, "init_mode", None)
    if init_mode is None:
        init_mode = getattr(getattr(scenario.attack_params, "inversion", None),
                            "init_mode", None)
    if init_mode == "auxiliary_sample" and scenario.grants.aux_dataset != "partial":
        violations.append(
            f"{scenario.attack_type}: auxiliary_sample initialization requires "
            f"an auxiliary dataset grant")
    return violations


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    scenario_id: str
    window: int
    slots: tuple[int, ...]
    exclusive: bool


@dataclass
class ResourcePlan:
    slots: int
    assignments: list[Assignment]

    def windows(self) -> list[list[Assignment]]:
        out: dict[int, list[Assignment]] = {}
        for a in self.assignments:
            out.setdefault(a.window, []).append(a)
        return [out[w] for w in sorted(out)]


def schedule(batch: list[Scenario], slots: int) -> ResourcePlan:
    """FIFO plan: query-surface attacks share windows up to slot capacity,
    side-channel attacks get exclusive whole-system windows."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    assignments: list[Assignment] = []
    window = 0
    fill = 0
    for scenario in batch:
        if scenario.attack_type in EXCLUSIVE_ATTACKS:
            if fill:
                window += 1
                fill = 0
            assignments.append(Assignment(scenario.id, window,
                                          tuple(range(slots)), True))
            window += 1
        else:
            if fill >= slots:
                window += 1
                fill = 0
            assignments.append(Assignment(scenario.id, window, (fill,), False))
            fill += 1
    return ResourcePlan(slots=slots, assignments=assignments)


# ---------------------------------------------------------------------------
# workbench (registries + repository layout)
# ---------------------------------------------------------------------------

BUILTIN_DATASETS = {
    "blobs-2c-easy": DatasetSpec("blobs-2c-easy", 2, 300, (6, 6, 1), 0.0, 101),
    "blobs-4c-easy": DatasetSpec("blobs-4c-easy", 4, 700, (6, 6, 1), 0.0, 102),
    "blobs-4c-mid": DatasetSpec("blobs-4c-mid", 4, 700, (6, 6, 1), 0.5, 103),
    "blobs-4c-hard": DatasetSpec("blobs-4c-hard", 4, 700, (6, 6, 1), 1.0, 104),
    "blobs-5c-easy": DatasetSpec("blobs-5c-easy", 5, 300, (6, 6, 1), 0.0, 105),
    "blobs-10c-mid": DatasetSpec("blobs-10c-mid", 10, 250, (8, 8, 1), 0.3, 106),
}


@dataclass
class Workbench:
    """Repository roots plus the dataset/architecture/recipe registries.

    Cache fills (dataset generation, train-on-miss checkpoints) are
    serialized through one lock so concurrent scenarios sharing a target
    never write the same cache entry twice.
    """

    root: Path
    dataset_specs: dict[str, DatasetSpec] = field(
        default_factory=lambda: dict(BUILTIN_DATASETS))
    architecture_overrides: dict[str, ArchitectureSpec] = field(default_factory=dict)
    recipes: dict[str, TrainConfig] = field(default_factory=dict)
    default_recipe: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=12))

    def __post_init__(self):
        self.root = Path(self.root)
        self._cache_lock = threading.RLock()

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def datasets_dir(self) -> Path:
        return self.root / "datasets"

    @property
    def records_dir(self) -> Path:
        return self.root / "records"

    @property
    def artifacts_dir(self) -> Path:
        return self.root / "artifacts"

    def dataset(self, dataset_id: str) -> Dataset:
        """Load from the cache, generating (and caching) on first use."""
        if dataset_id not in self.dataset_specs:
            raise KeyError(f"unknown dataset id {dataset_id!r}")
        cache = self.datasets_dir / dataset_id
        with self._cache_lock:
            if (cache / "meta.json").exists():
                return load_dataset(cache)
            data = generate(self.dataset_specs[dataset_id])
            save_dataset(data, cache)
            return data

    def architecture(self, arch_id: str, input_shape,
                     class_count: int) -> ArchitectureSpec:
        if arch_id in self.architecture_overrides:
            return self.architecture_overrides[arch_id]
        try:
            return builtin_spec(arch_id, input_shape, class_count)
        except KeyError:
            raise KeyError(f"unknown architecture id {arch_id!r}") from None

    def recipe(self, dataset_id: str) -> TrainConfig:
        return self.recipes.get(dataset_id, self.default_recipe)


def default_workbench(root=None) -> Workbench:
    root = root or os.environ.get(ROOT_ENV_VAR, "extractbench-repo")
    return Workbench(root=Path(root))


def _ref_seed(ref: ModelRef) -> int:
    return zlib.crc32(ref.slug().encode()) & 0x7FFFFFFF


def zoo_resolve(ref: ModelRef, bench: Workbench):
    """Serve a model for a reference, training and caching it when absent.

    Returns (model, from_cache, seconds): the timing plus cache flag is what
    makes the train-on-miss policy observable in run records.
    """
    started = time.perf_counter()
    with bench._cache_lock:
        return _zoo_resolve_locked(ref, bench, started)


def _zoo_resolve_locked(ref: ModelRef, bench: Workbench, started: float):
    try:
        model = load_checkpoint(ref, bench.checkpoints_dir)
        return model, True, time.perf_counter() - started
    except CheckpointError:
        pass
    data = bench.dataset(ref.dataset_id)
    if ref.class_subset is not None:
        bad = [c for c in ref.class_subset if c >= data.class_count]
        if bad:
            raise ValueError(
                f"class_subset {bad} outside dataset {ref.dataset_id!r} with "
                f"{data.class_count} classes")
        from .datasets import restrict_to_classes
        data = restrict_to_classes(data, ref.class_subset)
    spec = bench.architecture(ref.architecture_id, data.spec.input_shape,
                              data.class_count)
    model = build_model(spec, seed=_ref_seed(ref))
    recipe = bench.recipe(ref.dataset_id)
    train(model, data.inputs, data.labels,
          replace(recipe, seed=_ref_seed(ref)))
    save_checkpoint(model, ref, bench.checkpoints_dir)
    return model, False, time.perf_counter() - started


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    scenario: dict
    status: str                       # ok | failed
    started: str
    ended: str
    metrics: dict[str, float]
    artifacts: list[str]
    timings: dict[str, float]
    failure_reason: str | None = None
    schema_version: int = SCHEMA_VERSION
    resolved_from_cache: bool | None = None

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version,
                "scenario": self.scenario, "status": self.status,
                "started": self.started, "ended": self.ended,
                "metrics": self.metrics, "artifacts": self.artifacts,
                "timings": self.timings,
                "resolved_from_cache": self.resolved_from_cache,
                "failure_reason": self.failure_reason}

    @staticmethod
    def from_dict(doc: dict) -> "RunRecord":
        return RunRecord(scenario=doc["scenario"], status=doc["status"],
                         started=doc["started"], ended=doc["ended"],
                         metrics=doc["metrics"], artifacts=doc["artifacts"],
                         timings=doc.get("timings", {}),
                         failure_reason=doc.get("failure_reason"),
                         schema_version=doc.get("schema_version", SCHEMA_VERSION),
                         resolved_from_cache=doc.get("resolved_from_cache"))


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def persist_record(record: RunRecord, bench: Workbench) -> Path:
    """Append-only store: unique file name, temp write, atomic rename."""
    bench.records_dir.mkdir(parents=True, exist_ok=True)
    stamp = record.started.replace(":", "").replace("+", "p")
    base = f"{record.scenario.get('id', 'scenario')}__{stamp}__{os.getpid()}"
    path = bench.records_dir / f"{base}.json"
    n = 0
    while path.exists():
        n += 1
        path = bench.records_dir / f"{base}_{n}.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record.to_dict(), indent=2))
    os.replace(tmp, path)
    return path


def load_records(records_dir) -> list[RunRecord]:
    paths = sorted(Path(records_dir).glob("*.json"))
    return [RunRecord.from_dict(json.loads(p.read_text())) for p in paths]


# ---------------------------------------------------------------------------
# attack dispatch
# ---------------------------------------------------------------------------

def _derived_seed(scenario: Scenario, tag: str) -> int:
    return zlib.crc32(f"{scenario.seed}|{tag}".encode()) & 0x7FFFFFFF


def _run_knockoff(scenario, bench, target, art_dir):
    p: KnockoffParams = scenario.attack_params
    data = bench.dataset(scenario.target.dataset_id)
    queries, test = split(data, p.query_fraction,
                          _derived_seed(scenario, "split"))
    arch_id = p.surrogate_architecture or scenario.target.architecture_id
    spec = bench.architecture(arch_id, data.spec.input_shape, data.class_count)
    config = KnockoffConfig(query_budget=p.query_budget,
                            output_mode=p.output_mode, recreate=p.recreate,
                            surrogate_architecture=spec.id)
    stolen, record = knockoff_extract(QueryHandle(target), queries, spec,
                                      config, seed=scenario.seed)
    stolen_ref = ModelRef(spec.id, scenario.target.dataset_id,
                          checkpoint_tag=f"stolen-{scenario.id}")
    save_checkpoint(stolen, stolen_ref, art_dir)
    metrics = {
        "fidelity": fidelity(stolen, target, test),
        "queries_used": float(record.queries_used),
        "accuracy_target": accuracy(target, test),
        "accuracy_stolen": accuracy(stolen, test),
        "final_loss": record.loss_history[-1] if record.loss_history else 0.0,
    }
    return metrics, [str(checkpoint_path(art_dir, stolen_ref))]


def _run_miface(scenario, bench, target, art_dir):
    p: MifaceParams = scenario.attack_params
    aux = None
    if p.init_mode == "auxiliary_sample":
        data = bench.dataset(scenario.target.dataset_id)
        aux, _ = split(data, p.query_fraction, _derived_seed(scenario, "split"))
    config = InversionConfig(
        target_class=p.target_class,
        posterior_threshold=p.posterior_threshold,
        max_iterations=p.max_iterations, step_size=p.step_size,
        init_mode=p.init_mode, clamp_range=p.clamp_range)
    result = miface_invert(GradientHandle(target), config, aux=aux,
                           seed=scenario.seed)
    pgm = save_pgm(result.reconstruction,
                   art_dir / f"reconstruction_c{p.target_class}.pgm")
    sample_dir = art_dir / f"reconstruction_c{p.target_class}"
    recon = Dataset(
        spec=bench.dataset_specs[scenario.target.dataset_id],
        inputs=result.reconstruction[None, ...],
        labels=np.array([p.target_class], dtype=np.int32), role="query")
    save_dataset(recon, sample_dir)
    metrics = {
        "success": float(result.success),
        "final_posterior": result.posterior_trace[-1],
        "iterations": float(result.iterations),
        "trace_length": float(len(result.posterior_trace)),
    }
    return metrics, [str(pgm), str(sample_dir)]


def _run_staged_inversion(scenario, bench, target, art_dir):
    p: StagedInversionParams = scenario.attack_params
    data = bench.dataset(scenario.target.dataset_id)
    queries, test = split(data, p.query_fraction,
                          _derived_seed(scenario, "split"))
    arch_id = p.surrogate_architecture or scenario.target.architecture_id
    spec = bench.architecture(arch_id, data.spec.input_shape, data.class_count)
    knock = KnockoffConfig(query_budget=max(p.budgets),
                           output_mode=p.output_mode, recreate=p.recreate,
                           surrogate_architecture=spec.id)
    inversion = InversionConfig(
        target_class=0, posterior_threshold=p.inversion.posterior_threshold,
        max_iterations=p.inversion.max_iterations,
        step_size=p.inversion.step_size, init_mode=p.inversion.init_mode,
        clamp_range=p.inversion.clamp_range)
    rows = staged_inversion_study(target, queries, test, list(p.budgets), spec,
                                  knock, inversion, seed=scenario.seed)
    metrics, artifacts = {}, []
    for row in rows:
        metrics[f"fidelity_b{row.budget}"] = row.fidelity
        metrics[f"pwcca_b{row.budget}"] = row.pwcca
        metrics[f"class_similarity_b{row.budget}"] = row.mean_class_similarity
        metrics[f"inversion_success_b{row.budget}"] = float(
            np.mean(list(row.inversion_success.values())))
    last = rows[-1]
    metrics["fidelity"] = last.fidelity
    metrics["pwcca"] = last.pwcca
    metrics["class_similarity"] = last.mean_class_similarity
    metrics["inversion_success"] = float(
        np.mean(list(last.inversion_success.values())))
    for cls, image in last.reconstructions.items():
        artifacts.append(str(save_pgm(
            image, art_dir / f"reconstruction_b{last.budget}_c{cls}.pgm")))
    return metrics, artifacts


def _run_deepsniffer(scenario, bench, target, art_dir):
    p: DeepSnifferParams = scenario.attack_params
    profile = BUILTIN_ENVIRONMENT_PROFILES[scenario.environment.environment_profile]
    if scenario.environment.verbose_runtime:
        profile = replace(profile, verbose_runtime=True)
    data_spec = bench.dataset_specs[scenario.target.dataset_id]
    shape, classes = data_spec.input_shape, data_spec.class_count
    train_profile = replace(profile, id="corpus", metric_jitter=p.train_jitter,
                            verbose_runtime=False)
    corpus = []
    for arch_id in p.corpus_architectures:
        spec = bench.architecture(arch_id, shape, classes)
        truth = ds_truth_sequence(spec)
        for i in range(p.traces_per_architecture):
            trace = simulate_kernel_trace(
                spec, train_profile, seed=_derived_seed(scenario, f"{arch_id}|{i}"))
            corpus.append((trace, truth))
    classifier = train_ds_model(
        corpus, window=p.window,
        config=TrainConfig(learning_rate=0.5, batch_size=16,
                           epochs=p.classifier_epochs, loss="cross_entropy",
                           seed=scenario.seed))
    target_spec = target.spec
    trace = simulate_kernel_trace(target_spec, profile,
                                  seed=_derived_seed(scenario, "victim"))
    predicted = ds_extract(trace, classifier)
    truth = ds_truth_sequence(target_spec)
    trace_path = write_trace_jsonl(trace, art_dir / "victim_trace.jsonl")
    metrics = {
        "sequence_fidelity": sequence_fidelity(predicted, truth),
        "predicted_length": float(len(predicted)),
        "true_length": float(len(truth)),
    }
    return metrics, [str(trace_path)]


def _run_deeprecon(scenario, bench, target, art_dir):
    p: DeepReconParams = scenario.attack_params
    profile = BUILTIN_MACHINE_PROFILES[scenario.environment.machine_profile]
    data_spec = bench.dataset_specs[scenario.target.dataset_id]
    shape, classes = data_spec.input_shape, data_spec.class_count
    corpus = []
    for arch_id in p.corpus_architectures:
        spec = bench.architecture(arch_id, shape, classes)
        for i in range(p.histograms_per_architecture):
            corpus.append(simulate_symbol_stream(
                spec, profile, seed=_derived_seed(scenario, f"{arch_id}|{i}")))
    model = fit_fingerprint_space(corpus, k=p.k_neighbors)
    target_spec = target.spec
    exact = family = 0
    for t in range(p.trials):
        hist = simulate_symbol_stream(
            target_spec, profile, seed=_derived_seed(scenario, f"victim|{t}"))
        pred = dr_classify(hist, model)
        exact += pred.architecture_id == target_spec.id
        family += pred.family == target_spec.family
    csv_path = write_histograms_csv(corpus, art_dir / "corpus_histograms.csv")
    metrics = {"exact_accuracy": exact / p.trials,
               "family_accuracy": family / p.trials}
    return metrics, [str(csv_path)]


def _run_equivalency(scenario, bench, target, art_dir):
    p: EquivalencyParams = scenario.attack_params
    data = bench.dataset(scenario.target.dataset_id)
    queries, test = split(data, p.query_fraction,
                          _derived_seed(scenario, "split"))
    arch_id = p.surrogate_architecture or scenario.target.architecture_id
    spec = bench.architecture(arch_id, data.spec.input_shape, data.class_count)
    config = KnockoffConfig(query_budget=p.query_budget,
                            output_mode=p.output_mode, recreate=p.recreate,
                            surrogate_architecture=spec.id)
    stolen, _ = knockoff_extract(QueryHandle(target), queries, spec, config,
                                 seed=scenario.seed)
    student = bench.architecture(p.student_architecture, data.spec.input_shape,
                                 data.class_count)
    distill_cfg = DistillConfig(student_spec=student, temperature=p.temperature,
                                hard_label_weight=p.hard_label_weight,
                                train=p.distill_train)
    report = equivalency_report(target, stolen, test, distill_cfg)
    metrics = dict(report.metrics())
    pwccas = [v for k, v in metrics.items() if k.startswith("pwcca_")]
    metrics["pwcca"] = float(np.mean(pwccas))
    report_path = art_dir / "equivalency.json"
    report_path.write_text(json.dumps(
        {"metrics": metrics, "distill_config": report.distill_config,
         "probe_points": report.similarity.probe_points}, indent=2))
    return metrics, [str(report_path)]


_DISPATCH = {
    "knockoff": _run_knockoff,
    "miface": _run_miface,
    "staged_inversion": _run_staged_inversion,
    "deepsniffer": _run_deepsniffer,
    "deeprecon": _run_deeprecon,
    "equivalency": _run_equivalency,
}


def execute(scenario: Scenario, bench: Workbench,
            persist: bool = True) -> RunRecord:
    """Run one validated scenario end to end.

    Threat gating happens first; the target resolve (disk load or
    train-on-miss) is kicked off before attack construction; any failure is
    captured into a failed record rather than raised past this boundary.
    """
    started = _utcnow()
    t0 = time.perf_counter()
    timings: dict[str, float] = {}
    from_cache = None
    art_dir = bench.artifacts_dir / scenario.id / started.replace(":", "")
    try:
        violations = validate_threat_model(scenario)
        if violations:
            raise PermissionError(
                "threat model violation: " + "; ".join(violations))
        target, from_cache, resolve_s = zoo_resolve(scenario.target, bench)
        timings["resolve_seconds"] = resolve_s
        art_dir.mkdir(parents=True, exist_ok=True)
        t1 = time.perf_counter()
        metrics, artifacts = _DISPATCH[scenario.attack_type](
            scenario, bench, target, art_dir)
        timings["attack_seconds"] = time.perf_counter() - t1
        missing = [m for m in scenario.evaluation if m not in metrics]
        if missing:
            raise RuntimeError(f"requested metric(s) {missing} not produced")
        timings["wall_seconds"] = time.perf_counter() - t0
        record = RunRecord(scenario=scenario.to_dict(), status="ok",
                           started=started, ended=_utcnow(), metrics=metrics,
                           artifacts=artifacts, timings=timings,
                           resolved_from_cache=from_cache)
    except Exception as exc:
        import shutil
        shutil.rmtree(art_dir, ignore_errors=True)
        timings["wall_seconds"] = time.perf_counter() - t0
        record = RunRecord(scenario=scenario.to_dict(), status="failed",
                           started=started, ended=_utcnow(), metrics={},
                           artifacts=[], timings=timings,
                           failure_reason=f"{type(exc).__name__}: {exc}",
                           resolved_from_cache=from_cache)
    if persist:
        persist_record(record, bench)
    return record


@dataclass
class BatchResult:
    plan: ResourcePlan
    records: list[RunRecord]
    wall_seconds: float

    def durations(self) -> dict[str, float]:
        return {r.scenario["id"]: r.timings.get("wall_seconds", 0.0)
                for r in self.records}

    def all_ok(self) -> bool:
        return all(r.status == "ok" for r in self.records)


def simulated_makespan(plan: ResourcePlan, durations: dict[str, float]) -> float:
    """Completion time of a plan given per-scenario compute durations: windows
    run back to back, scenarios inside a window run on their own slots."""
    return sum(max(durations[a.scenario_id] for a in window)
               for window in plan.windows())


def run_batch(scenarios: list[Scenario], bench: Workbench,
              slots: int = 1) -> BatchResult:
    """Execute a batch per its resource plan.

    Non-exclusive windows run their scenarios concurrently (each scenario
    owns its models and datasets; the record store stays single-writer in
    this thread). Exclusive windows run alone.
    """
    plan = schedule(scenarios, slots)
    by_id = {s.id: s for s in scenarios}
    if len(by_id) != len(scenarios):
        raise ValueError("duplicate scenario ids in batch")
    records: dict[str, RunRecord] = {}
    t0 = time.perf_counter()
    for window in plan.windows():
        if len(window) == 1:
            a = window[0]
            records[a.scenario_id] = execute(by_id[a.scenario_id], bench,
                                             persist=False)
        else:
            with ThreadPoolExecutor(max_workers=slots) as pool:
                futures = {a.scenario_id: pool.submit(
                    execute, by_id[a.scenario_id], bench, False)
                    for a in window}
                for sid, fut in futures.items():
                    records[sid] = fut.result()
    ordered = [records[s.id] for s in scenarios]
    for record in ordered:
        persist_record(record, bench)
    return BatchResult(plan=plan, records=ordered,
                       wall_seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def report(records: list[RunRecord], fmt: str, out_path) -> list[Path]:
    """Collate records: wide CSV (stable columns) plus a long-format CSV for
    sweep plotting, or verbatim JSON."""
    if not records:
        raise ValueError("no records to report")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        out_path.write_text(json.dumps([r.to_dict() for r in records], indent=2))
        return [out_path]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")

    import csv as _csv
    metric_names = sorted({m for r in records for m in r.metrics})
    with out_path.open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["scenario_id", "attack_type", "target"]
                        + metric_names + ["status"])
        for r in records:
            target = r.scenario.get("target", {})
            target_str = (f"{target.get('architecture_id')}@"
                          f"{target.get('dataset_id')}")
            row = [r.scenario.get("id"), r.scenario.get("attack", {}).get("type"),
                   target_str]
            row += [r.metrics.get(m, "") for m in metric_names]
            row.append(r.status)
            writer.writerow(row)
    long_path = out_path.with_name(out_path.stem + "_long.csv")
    with long_path.open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["scenario_id", "attack_type", "metric", "value"])
        for r in records:
            for m, v in sorted(r.metrics.items()):
                writer.writerow([r.scenario.get("id"),
                                 r.scenario.get("attack", {}).get("type"), m, v])
    return [out_path, long_path]
