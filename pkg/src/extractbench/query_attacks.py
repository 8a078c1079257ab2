"""Query-surface attacks: extraction by prediction queries and model inversion.

The attacks only ever touch a target through narrow handles. A
:class:`QueryHandle` exposes prediction alone (the hidden-model-knowledge
setting: the adversary sees an inference API and nothing else); a
:class:`GradientHandle` additionally serves input gradients, which inversion
needs once the adversary owns a stolen copy. Keeping parameter access out of
the handle types is what enforces the threat model by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .network import Network, TrainConfig, train
from .similarity import collect_activations, default_probe_point, fidelity, pwcca_distance
from .zoo import ArchitectureSpec, build_model

OUTPUT_MODES = ("confidence_vector", "top1_label")


@dataclass(frozen=True)
class ThreatModel:
    """Capability triple granted to (or required by) an attack."""

    model_knowledge: str = "hidden"    # observed | hidden
    system_knowledge: str = "none"     # partial | none
    aux_dataset: str = "none"          # partial | none

    def __post_init__(self):
        if self.model_knowledge not in ("observed", "hidden"):
            raise ValueError(f"bad model_knowledge {self.model_knowledge!r}")
        if self.system_knowledge not in ("partial", "none"):
            raise ValueError(f"bad system_knowledge {self.system_knowledge!r}")
        if self.aux_dataset not in ("partial", "none"):
            raise ValueError(f"bad aux_dataset {self.aux_dataset!r}")

    def dominates(self, required: "ThreatModel") -> list[str]:
        """Violations left when these grants are checked against a requirement.

        The strong value of each axis (observed / partial / partial) is a
        capability; a requirement of the weak value is satisfied by anything.
        """
        out = []
        if required.model_knowledge == "observed" and self.model_knowledge != "observed":
            out.append("requires observed model knowledge")
        if required.system_knowledge == "partial" and self.system_knowledge != "partial":
            out.append("requires partial system knowledge")
        if required.aux_dataset == "partial" and self.aux_dataset != "partial":
            out.append("requires a partial auxiliary dataset")
        return out

    def to_dict(self) -> dict:
        return {"model_knowledge": self.model_knowledge,
                "system_knowledge": self.system_knowledge,
                "aux_dataset": self.aux_dataset}


class QueryHandle:
    """Inference-only view of a model: predictions, nothing else."""

    def __init__(self, model: Network):
        self._model = model
        self.output_width = model.output_width

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return self._model.predict(np.asarray(inputs, dtype=np.float64))


class GradientHandle(QueryHandle):
    """Query handle plus input gradients of the log class posterior."""

    def __init__(self, model: Network):
        super().__init__(model)
        self.input_shape = model.input_shape

    def posterior_and_gradient(self, x: np.ndarray, target_class: int):
        batch = np.asarray(x, dtype=np.float64)[None, ...]
        probs = self._model.forward(batch)
        p = max(float(probs[0, target_class]), 1e-300)
        seed = np.zeros_like(probs)
        seed[0, target_class] = 1.0 / p
        grads = self._model.backward(seed)
        return p, grads.input[0]


# ---------------------------------------------------------------------------
# query-based extraction
# ---------------------------------------------------------------------------

@dataclass
class KnockoffConfig:
    query_budget: int
    output_mode: str = "confidence_vector"
    recreate: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=20, loss="soft_target_kl"))
    surrogate_architecture: str | None = None  # default: the target's own

    def __post_init__(self):
        if self.query_budget < 1:
            raise ValueError("query_budget must be >= 1")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output_mode {self.output_mode!r}")


@dataclass
class StolenDataset:
    inputs: np.ndarray
    targets: np.ndarray        # probability rows (confidence) or one-hot (label)
    query_ids: np.ndarray      # provenance into the query set
    output_mode: str

    def __len__(self):
        return int(self.inputs.shape[0])

    def hard_labels(self) -> np.ndarray:
        return self.targets.argmax(axis=1).astype(np.int32)


@dataclass
class AttackRecord:
    attack: str
    budget: int
    output_mode: str
    surrogate_architecture: str
    seed: int
    loss_history: list[float]
    elapsed_seconds: float
    queries_used: int


def build_stolen_dataset(target: QueryHandle, queries: Dataset, budget: int,
                         output_mode: str = "confidence_vector",
                         seed: int = 0) -> StolenDataset:
    """Query `budget` inputs sampled without replacement and pair them with
    the target's outputs (full confidence rows, or their one-hot argmax)."""
    if output_mode not in OUTPUT_MODES:
        raise ValueError(f"unknown output_mode {output_mode!r}")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if budget > len(queries):
        raise ValueError(
            f"budget {budget} exceeds query-set size {len(queries)}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(queries), size=budget, replace=False)
    inputs = queries.inputs[picked]
    probs = target.predict(inputs)
    if output_mode == "top1_label":
        targets = np.zeros_like(probs)
        targets[np.arange(budget), probs.argmax(axis=1)] = 1.0
    else:
        targets = probs
    return StolenDataset(inputs=inputs, targets=targets,
                         query_ids=queries.sample_ids[picked],
                         output_mode=output_mode)


def knockoff_extract(target: QueryHandle, queries: Dataset,
                     surrogate_spec: ArchitectureSpec, config: KnockoffConfig,
                     seed: int = 0):
    """Steal by querying: build the stolen dataset, then train a fresh
    surrogate on it (KL against confidences, cross-entropy against labels)."""
    started = time.perf_counter()
    stolen_data = build_stolen_dataset(target, queries, config.query_budget,
                                       config.output_mode, seed)
    surrogate = build_model(surrogate_spec, seed=seed)
    recreate = config.recreate
    if config.output_mode == "confidence_vector":
        cfg = TrainConfig(recreate.learning_rate, recreate.batch_size,
                          recreate.epochs, "soft_target_kl", recreate.seed)
        history = train(surrogate, stolen_data.inputs, stolen_data.targets, cfg)
    else:
        cfg = TrainConfig(recreate.learning_rate, recreate.batch_size,
                          recreate.epochs, "cross_entropy", recreate.seed)
        history = train(surrogate, stolen_data.inputs, stolen_data.hard_labels(), cfg)
    record = AttackRecord(
        attack="knockoff", budget=config.query_budget,
        output_mode=config.output_mode,
        surrogate_architecture=surrogate_spec.id, seed=seed,
        loss_history=history, elapsed_seconds=time.perf_counter() - started,
        queries_used=len(stolen_data))
    return surrogate, record


# ---------------------------------------------------------------------------
# model inversion
# ---------------------------------------------------------------------------

@dataclass
class InversionConfig:
    target_class: int
    posterior_threshold: float = 0.9
    max_iterations: int = 500
    step_size: float = 0.1
    init_mode: str = "random"          # random | auxiliary_sample
    clamp_range: tuple[float, float] = (-4.0, 4.0)

    def __post_init__(self):
        if not 0.0 < self.posterior_threshold <= 1.0:
            raise ValueError("posterior_threshold must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.init_mode not in ("random", "auxiliary_sample"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.clamp_range[0] >= self.clamp_range[1]:
            raise ValueError("clamp_range must be (lo, hi) with lo < hi")


@dataclass
class InversionResult:
    reconstruction: np.ndarray
    posterior_trace: list[float]
    success: bool
    iterations: int


def miface_invert(handle: GradientHandle, config: InversionConfig,
                  aux: Dataset | None = None, seed: int = 0) -> InversionResult:
    """Gradient-ascend the log posterior of the target class until it clears
    the threshold or the iteration cap; the trace is every posterior seen."""
    if config.target_class >= handle.output_width:
        raise ValueError(
            f"target_class {config.target_class} outside output width "
            f"{handle.output_width}")
    rng = np.random.default_rng(seed)
    lo, hi = config.clamp_range
    if config.init_mode == "auxiliary_sample":
        if aux is None:
            raise ValueError("auxiliary_sample init requires an aux dataset")
        members = np.flatnonzero(aux.labels == config.target_class)
        pool = members if members.size else np.arange(len(aux))
        x = aux.inputs[rng.choice(pool)].copy()
    else:
        # near-gray start: reconstructions are shaped by the ascent, not the init
        x = 0.05 * rng.standard_normal(handle.input_shape)
    x = np.clip(x, lo, hi)

    p, grad = handle.posterior_and_gradient(x, config.target_class)
    trace = [p]
    steps = 0
    while trace[-1] < config.posterior_threshold and steps < config.max_iterations:
        x = np.clip(x + config.step_size * grad, lo, hi)
        p, grad = handle.posterior_and_gradient(x, config.target_class)
        trace.append(p)
        steps += 1
    return InversionResult(reconstruction=x, posterior_trace=trace,
                           success=trace[-1] >= config.posterior_threshold,
                           iterations=steps)


# ---------------------------------------------------------------------------
# staging: invert models stolen at increasing budgets
# ---------------------------------------------------------------------------

@dataclass
class StagedBudgetResult:
    budget: int
    fidelity: float
    pwcca: float
    reconstructions: dict[int, np.ndarray]
    class_similarity: dict[int, float]
    inversion_success: dict[int, bool]

    @property
    def mean_class_similarity(self) -> float:
        return float(np.mean(list(self.class_similarity.values())))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    af, bf = a.reshape(-1), b.reshape(-1)
    denom = np.linalg.norm(af) * np.linalg.norm(bf)
    return float(af @ bf / denom) if denom > 0 else 0.0


def staged_inversion_study(target: Network, queries: Dataset, test: Dataset,
                           budgets: list[int], surrogate_spec: ArchitectureSpec,
                           knockoff_config: KnockoffConfig,
                           inversion_config: InversionConfig,
                           seed: int = 0) -> list[StagedBudgetResult]:
    """For each budget: steal, invert every class of the stolen model, and
    score reconstructions against the true class-mean images."""
    if any(b < 1 for b in budgets):
        raise ValueError("budgets must be positive")
    if sorted(budgets) != list(budgets):
        raise ValueError("budgets must be ascending")
    handle = QueryHandle(target)
    probe_t = default_probe_point(target)
    results = []
    for budget in budgets:
        cfg = KnockoffConfig(query_budget=budget,
                             output_mode=knockoff_config.output_mode,
                             recreate=knockoff_config.recreate,
                             surrogate_architecture=surrogate_spec.id)
        stolen, _ = knockoff_extract(handle, queries, surrogate_spec, cfg, seed)
        fid = fidelity(stolen, target, test)
        dist = pwcca_distance(
            collect_activations(target, probe_t, test.inputs),
            collect_activations(stolen, default_probe_point(stolen), test.inputs))
        recons, sims, succ = {}, {}, {}
        grad_handle = GradientHandle(stolen)
        for cls in range(target.output_width):
            inv_cfg = InversionConfig(
                target_class=cls,
                posterior_threshold=inversion_config.posterior_threshold,
                max_iterations=inversion_config.max_iterations,
                step_size=inversion_config.step_size,
                init_mode=inversion_config.init_mode,
                clamp_range=inversion_config.clamp_range)
            res = miface_invert(grad_handle, inv_cfg, aux=queries,
                                seed=np.random.default_rng([seed, budget, cls])
                                .integers(2 ** 31))
            recons[cls] = res.reconstruction
            succ[cls] = res.success
            sims[cls] = cosine_similarity(res.reconstruction, test.class_mean(cls))
        results.append(StagedBudgetResult(
            budget=budget, fidelity=fid, pwcca=dist, reconstructions=recons,
            class_similarity=sims, inversion_success=succ))
    return results


def save_pgm(image: np.ndarray, path) -> Path:
    """8-bit binary PGM dump of a (H, W) or (H, W, C) array, min-max scaled."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    pixels = (scaled * 255).astype(np.uint8)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())
    return path
