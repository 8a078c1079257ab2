"""Model-agreement measurements: fidelity, PWCCA, noise sensitivity, distillation.

Fidelity is plain top-1 agreement on a shared test set. PWCCA is a
projection-weighted canonical correlation distance between two activation
matrices and is invariant to invertible linear maps of either view, which is
exactly what makes it a sharper lens than fidelity: two models can agree on
every argmax yet organize their representations differently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Network, TrainConfig, cross_entropy_grad, sgd_run
from .tensor import OperatorKind
from .zoo import ArchitectureSpec, build_model


def _as_inputs(test_set) -> np.ndarray:
    return test_set.inputs if hasattr(test_set, "inputs") else np.asarray(test_set)


def fidelity(model_a, model_b, test_set) -> float:
    """Fraction of inputs on which the two models' top-1 labels agree."""
    inputs = _as_inputs(test_set)
    if inputs.shape[0] == 0:
        raise ValueError("empty test set")
    pa = model_a.predict(inputs)
    pb = model_b.predict(inputs)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(
            f"output widths differ: {pa.shape[1]} vs {pb.shape[1]}")
    return float(np.mean(pa.argmax(axis=1) == pb.argmax(axis=1)))


def accuracy(model, dataset) -> float:
    return float(np.mean(model.predict(dataset.inputs).argmax(axis=1)
                         == dataset.labels))


# ---------------------------------------------------------------------------
# PWCCA
# ---------------------------------------------------------------------------

def _inv_sqrt(cov: np.ndarray, ridge: float) -> np.ndarray:
    eig, vec = np.linalg.eigh(cov + ridge * np.eye(cov.shape[0]))
    if not np.all(np.isfinite(eig)) or eig.min() <= 0:
        raise np.linalg.LinAlgError(
            "covariance is singular beyond ridge rescue")
    return (vec / np.sqrt(eig)) @ vec.T


def pwcca_distance(acts_a: np.ndarray, acts_b: np.ndarray,
                   ridge: float = 1e-10) -> float:
    """Projection-weighted CCA distance between two (n, d) activation views.

    Canonical correlations come from the SVD of the whitened cross-covariance;
    each correlation is weighted by how much of view A's raw activation mass
    its canonical component explains. 0 means the views are related by an
    invertible linear map; values near 1 mean unrelated views.
    """
    a = np.asarray(acts_a, dtype=np.float64)
    b = np.asarray(acts_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError("activation views must be (n, d) with matching n")
    n = a.shape[0]
    if n <= max(a.shape[1], b.shape[1]):
        raise ValueError(
            f"need more samples ({n}) than features "
            f"({max(a.shape[1], b.shape[1])})")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("activations must be finite")

    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    caa = a.T @ a / (n - 1)
    cbb = b.T @ b / (n - 1)
    cab = a.T @ b / (n - 1)
    ia = _inv_sqrt(caa, ridge)
    ib = _inv_sqrt(cbb, ridge)
    u, rho, _ = np.linalg.svd(ia @ cab @ ib)
    rho = np.clip(rho, 0.0, 1.0)
    comps = a @ (ia @ u)                      # canonical components of view A
    weights = np.abs(comps.T @ a).sum(axis=1)  # projection mass per component
    total = weights.sum()
    if total <= 0:
        raise np.linalg.LinAlgError("degenerate view: no projection mass")
    weights = weights / total
    k = min(len(rho), len(weights))
    return float(1.0 - np.sum(weights[:k] * rho[:k]))


def default_probe_point(model: Network) -> str:
    """The final pre-softmax representation (or the output node itself)."""
    out = next(n for n in model.order if n.node_id == model.output_id)
    if out.kind is OperatorKind.SOFTMAX:
        return out.inputs[0]
    return out.node_id


def collect_activations(model: Network, probe_point: str, inputs) -> np.ndarray:
    """Row i is the flattened probe-layer activation on input i."""
    x = _as_inputs(inputs)
    if probe_point != "input" and probe_point not in model.shapes:
        raise KeyError(f"unknown probe point {probe_point!r}")
    model.forward(x)
    acts = model.activation(probe_point)
    return acts.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# layer noise sensitivity
# ---------------------------------------------------------------------------

@dataclass
class SensitivityCurves:
    layer_ids: list[str]
    magnitudes: list[float]
    accuracy: np.ndarray       # (layers, magnitudes) trial means
    trials: int

    def auc(self) -> dict[str, float]:
        return {lid: float(np.trapezoid(self.accuracy[i], self.magnitudes))
                for i, lid in enumerate(self.layer_ids)}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "magnitude", "mean_accuracy", "trials"])
            for i, lid in enumerate(self.layer_ids):
                for j, mag in enumerate(self.magnitudes):
                    writer.writerow([lid, mag, f"{self.accuracy[i, j]:.6f}",
                                     self.trials])
        return path


def layer_noise_sensitivity(model: Network, test_set, magnitudes,
                            trials: int = 3, seed: int = 0) -> SensitivityCurves:
    """Accuracy under per-layer weight noise, one layer perturbed at a time.

    Noise for layer l at magnitude m is Gaussian with std m * std(l's
    trainable weights), so curves are comparable across layers of different
    scales. Weights are restored bit-exactly after every trial.
    """
    magnitudes = [float(m) for m in magnitudes]
    if not magnitudes or magnitudes[0] != 0.0:
        raise ValueError("magnitudes must start at 0")
    if sorted(magnitudes) != magnitudes:
        raise ValueError("magnitudes must be ascending")
    layers = model.parameterized_nodes()
    baseline = accuracy(model, test_set)
    acc = np.empty((len(layers), len(magnitudes)))
    acc[:, 0] = baseline
    for i, lid in enumerate(layers):
        originals = {k: v.copy() for k, v in model.weights[lid].items()}
        scale = np.std(np.concatenate([v.reshape(-1) for v in originals.values()]))
        for j, mag in enumerate(magnitudes):
            if j == 0:
                continue
            vals = []
            for t in range(trials):
                rng = np.random.default_rng([seed, i, j, t])
                for name, orig in originals.items():
                    model.weights[lid][name] = orig + rng.normal(
                        0.0, mag * scale, size=orig.shape)
                vals.append(accuracy(model, test_set))
            acc[i, j] = float(np.mean(vals))
        for name, orig in originals.items():
            model.weights[lid][name] = orig
    return SensitivityCurves(layers, magnitudes, acc, trials)


# ---------------------------------------------------------------------------
# knowledge distillation
# ---------------------------------------------------------------------------

@dataclass
class DistillConfig:
    student_spec: ArchitectureSpec
    temperature: float = 4.0
    hard_label_weight: float = 0.1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.hard_label_weight <= 1.0:
            raise ValueError("hard_label_weight must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"student_spec": self.student_spec.id,
                "temperature": self.temperature,
                "hard_label_weight": self.hard_label_weight,
                "train": self.train.to_dict()}


def _soften(probs: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T) computed from the probability simplex."""
    p = np.maximum(probs, 1e-300) ** (1.0 / temperature)
    return p / p.sum(axis=1, keepdims=True)


def distill(teacher: Network, config: DistillConfig, transfer_set) -> Network:
    """Train a student on a blend of hard labels and the teacher's softened
    outputs; with hard_label_weight=1 this is exactly ordinary training."""
    if teacher.output_width != config.student_spec.class_count:
        raise ValueError(
            f"teacher width {teacher.output_width} != student class count "
            f"{config.student_spec.class_count}")
    inputs = transfer_set.inputs
    labels = transfer_set.labels
    student = build_model(config.student_spec, seed=config.train.seed)
    alpha = config.hard_label_weight
    tau = config.temperature
    soft_targets = None
    if alpha < 1.0:
        soft_targets = _soften(teacher.predict(inputs), tau)

    def grad_fn(probs, idx):
        loss = 0.0
        grad = None
        if alpha > 0.0:
            ce_loss, ce_grad = cross_entropy_grad(probs, labels[idx])
            loss += alpha * ce_loss
            grad = alpha * ce_grad
        if alpha < 1.0:
            t = soft_targets[idx]
            s = _soften(probs, tau)
            p = np.maximum(probs, 1e-12)
            tl = np.where(t > 0, np.log(np.maximum(t, 1e-300)), 0.0)
            kl = np.mean(np.sum(t * (tl - np.log(np.maximum(s, 1e-300))), axis=1))
            kl_grad = tau * (s - t) / p / probs.shape[0]
            loss += (1.0 - alpha) * tau ** 2 * kl
            kl_term = (1.0 - alpha) * tau ** 2 * kl_grad
            grad = kl_term if grad is None else grad + kl_term
        return loss, grad

    sgd_run(student, inputs, grad_fn, config.train)
    return student


# ---------------------------------------------------------------------------
# equivalency reporting
# ---------------------------------------------------------------------------

@dataclass
class SimilarityReport:
    fidelity: float
    pwcca_distance: dict[str, float]
    probe_points: list[tuple[str, str]]
    accuracy_target: float
    accuracy_stolen: float


@dataclass
class EquivalencyReport:
    similarity: SimilarityReport
    distilled_pwcca: float
    distill_config: dict
    baseline_pwcca: float | None = None

    def metrics(self) -> dict[str, float]:
        out = {"fidelity": self.similarity.fidelity,
               "accuracy_target": self.similarity.accuracy_target,
               "accuracy_stolen": self.similarity.accuracy_stolen,
               "distilled_pwcca": self.distilled_pwcca}
        for pair, value in self.similarity.pwcca_distance.items():
            out[f"pwcca_{pair}"] = value
        if self.baseline_pwcca is not None:
            out["baseline_pwcca"] = self.baseline_pwcca
        return out


def equivalency_report(target: Network, stolen: Network, test_set,
                       distill_config: DistillConfig,
                       probe_pairs: list[tuple[str, str]] | None = None,
                       baseline: Network | None = None) -> EquivalencyReport:
    """Fidelity + PWCCA between a target and its stolen copy, then the same
    PWCCA after both are distilled into one student spec (matched probes)."""
    if target.output_width != stolen.output_width:
        raise ValueError("models are not comparable: output widths differ")
    if probe_pairs is None:
        probe_pairs = [(default_probe_point(target), default_probe_point(stolen))]
    inputs = test_set.inputs

    fid = fidelity(target, stolen, test_set)
    distances = {}
    for pa, pb in probe_pairs:
        distances[f"{pa}:{pb}"] = pwcca_distance(
            collect_activations(target, pa, inputs),
            collect_activations(stolen, pb, inputs))

    st_target = distill(target, distill_config, test_set)
    st_stolen = distill(stolen, distill_config, test_set)
    probe = default_probe_point(st_target)
    distilled = pwcca_distance(
        collect_activations(st_target, probe, inputs),
        collect_activations(st_stolen, probe, inputs))

    baseline_d = None
    if baseline is not None:
        pa = default_probe_point(target)
        pb = default_probe_point(baseline)
        baseline_d = pwcca_distance(
            collect_activations(target, pa, inputs),
            collect_activations(baseline, pb, inputs))

    report = SimilarityReport(
        fidelity=fid, pwcca_distance=distances, probe_points=probe_pairs,
        accuracy_target=accuracy(target, test_set),
        accuracy_stolen=accuracy(stolen, test_set))
    return EquivalencyReport(similarity=report, distilled_pwcca=distilled,
                             distill_config=distill_config.to_dict(),
                             baseline_pwcca=baseline_d)
