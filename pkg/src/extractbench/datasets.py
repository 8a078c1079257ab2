"""Synthetic labeled image datasets with a tunable class-overlap knob.

Each class c gets a Gaussian prototype image; samples are the prototype plus
pixel noise. The `overlap` knob slides every prototype toward the common
mean: 0 keeps prototypes fully apart (a nearest-prototype classifier is
near-perfect), 1 collapses all classes onto one distribution. That single
knob stands in for the difficulty spread between easy and hard corpora and
is what the CSG complexity score is exercised against.

Cache layout per dataset: meta.json (spec echo) + samples.bin (little-endian
float64, samples row-major in index order) + labels.bin (little-endian int32).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class DatasetSpec:
    id: str
    class_count: int
    samples_per_class: int
    input_shape: tuple[int, ...]
    overlap: float
    seed: int
    noise: float = 0.6  # per-pixel sample noise around the class prototype

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (H, W, C)")

    def to_dict(self) -> dict:
        return {"id": self.id, "class_count": self.class_count,
                "samples_per_class": self.samples_per_class,
                "input_shape": list(self.input_shape), "overlap": self.overlap,
                "seed": self.seed, "noise": self.noise}

    @staticmethod
    def from_dict(doc: dict) -> "DatasetSpec":
        return DatasetSpec(doc["id"], int(doc["class_count"]),
                           int(doc["samples_per_class"]),
                           tuple(doc["input_shape"]), float(doc["overlap"]),
                           int(doc["seed"]), float(doc.get("noise", 0.6)))


@dataclass
class Dataset:
    """Immutable-by-convention sample store; splits/subsets create views."""

    spec: DatasetSpec
    inputs: np.ndarray          # (n,) + input_shape, float64
    labels: np.ndarray          # (n,), int32
    role: str = "train"         # train | query | test
    sample_ids: np.ndarray = field(default=None)  # provenance into the source set
    class_map: dict[int, int] | None = None       # original label -> re-indexed

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def sample(self, i: int):
        from .tensor import Tensor
        return Tensor.from_array(self.inputs[i])

    def flat_inputs(self) -> np.ndarray:
        return self.inputs.reshape(len(self), -1)

    def class_mean(self, label: int) -> np.ndarray:
        mask = self.labels == label
        if not mask.any():
            raise ValueError(f"no samples with label {label}")
        return self.inputs[mask].mean(axis=0)


def class_prototypes(spec: DatasetSpec) -> np.ndarray:
    """Prototype image per class after applying the overlap knob."""
    rng = np.random.default_rng(spec.seed)
    protos = rng.standard_normal((spec.class_count,) + tuple(spec.input_shape))
    common = protos.mean(axis=0)
    return (1.0 - spec.overlap) * protos + spec.overlap * common


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic sampling: same spec, same bytes."""
    rng = np.random.default_rng(spec.seed)
    protos = rng.standard_normal((spec.class_count,) + tuple(spec.input_shape))
    common = protos.mean(axis=0)
    protos = (1.0 - spec.overlap) * protos + spec.overlap * common

    n = spec.class_count * spec.samples_per_class
    labels = np.repeat(np.arange(spec.class_count), spec.samples_per_class)
    noise = rng.standard_normal((n,) + tuple(spec.input_shape))
    inputs = protos[labels] + spec.noise * noise
    perm = rng.permutation(n)
    return Dataset(spec=spec, inputs=inputs[perm],
                   labels=labels[perm].astype(np.int32), role="train")


def split(dataset: Dataset, query_fraction: float, seed: int):
    """Label-stratified disjoint partition into (query, test)."""
    if not 0.0 < query_fraction < 1.0:
        raise ValueError("query_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    query_idx, test_idx = [], []
    for label in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == label)
        idx = idx[rng.permutation(len(idx))]
        n_q = int(round(query_fraction * len(idx)))
        n_q = min(max(n_q, 1), len(idx) - 1) if len(idx) > 1 else n_q
        query_idx.append(idx[:n_q])
        test_idx.append(idx[n_q:])
    q = np.concatenate(query_idx)
    t = np.concatenate(test_idx)
    return (
        Dataset(dataset.spec, dataset.inputs[q], dataset.labels[q], "query",
                dataset.sample_ids[q], dataset.class_map),
        Dataset(dataset.spec, dataset.inputs[t], dataset.labels[t], "test",
                dataset.sample_ids[t], dataset.class_map),
    )


def subset_classes(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Random k-class restriction; labels re-indexed 0..k-1 in selection order."""
    if not 2 <= k <= dataset.class_count:
        raise ValueError(
            f"k must lie in [2, {dataset.class_count}], got {k}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(dataset.class_count, size=k, replace=False)
    class_map = {int(old): new for new, old in enumerate(chosen)}
    mask = np.isin(dataset.labels, chosen)
    labels = np.array([class_map[int(l)] for l in dataset.labels[mask]],
                      dtype=np.int32)
    spec = replace(dataset.spec, id=f"{dataset.spec.id}-sub{k}", class_count=k)
    return Dataset(spec, dataset.inputs[mask], labels, dataset.role,
                   dataset.sample_ids[mask], class_map)


def restrict_to_classes(dataset: Dataset, classes) -> Dataset:
    """Keep only the named classes, re-indexed by their position in `classes`."""
    classes = tuple(classes)
    bad = [c for c in classes if not 0 <= c < dataset.class_count]
    if bad or len(set(classes)) != len(classes):
        raise ValueError(f"invalid class selection {classes}")
    class_map = {int(old): new for new, old in enumerate(classes)}
    mask = np.isin(dataset.labels, classes)
    labels = np.array([class_map[int(l)] for l in dataset.labels[mask]],
                      dtype=np.int32)
    spec = replace(dataset.spec, id=f"{dataset.spec.id}-sub{len(classes)}",
                   class_count=len(classes))
    return Dataset(spec, dataset.inputs[mask], labels, dataset.role,
                   dataset.sample_ids[mask], class_map)


def chunked_iter(dataset: Dataset, chunk_size: int,
                 limit: int | None = None) -> Iterator[Dataset]:
    """Stable-order lazy chunks; `limit` caps the total samples served."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    n = len(dataset) if limit is None else min(limit, len(dataset))
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        yield Dataset(dataset.spec, dataset.inputs[start:stop],
                      dataset.labels[start:stop], dataset.role,
                      dataset.sample_ids[start:stop], dataset.class_map)


# ---------------------------------------------------------------------------
# complexity scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityReport:
    csg: float
    eigenvalues: tuple[float, ...]
    overlap_matrix: np.ndarray


def overlap_matrix(flat: np.ndarray, labels: np.ndarray, class_count: int,
                   monte_carlo_samples: int, k_neighbors: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo class-overlap estimate.

    Row i is the mean, over sampled points of class i, of the fraction of each
    point's k nearest pooled neighbors (self excluded) landing in class j.
    Rows are explicitly re-normalized to sum to one.
    """
    w = np.zeros((class_count, class_count))
    for c in range(class_count):
        members = np.flatnonzero(labels == c)
        take = min(monte_carlo_samples, len(members))
        picked = members[rng.choice(len(members), size=take, replace=False)]
        for p in picked:
            d2 = np.sum((flat - flat[p]) ** 2, axis=1)
            d2[p] = np.inf
            nearest = np.argpartition(d2, k_neighbors)[:k_neighbors]
            for lbl in labels[nearest]:
                w[c, lbl] += 1.0
        w[c] /= take * k_neighbors
    return w / w.sum(axis=1, keepdims=True)


def spectral_gradient(w: np.ndarray, class_count: int):
    """Eigen-spectrum of the symmetric normalized Laplacian of the overlap
    graph, and the class-count-scaled cumulative gap between neighbors."""
    s = 0.5 * (w + w.T)
    d = s.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(d, 1e-12))
    lap = np.eye(class_count) - inv_sqrt[:, None] * s * inv_sqrt[None, :]
    eig = np.linalg.eigvalsh(lap)
    csg = class_count * float(np.sum(np.maximum(0.0, np.diff(eig))))
    return eig, csg


def csg_complexity(dataset: Dataset, monte_carlo_samples: int = 100,
                   k_neighbors: int = 5, seed: int = 0) -> ComplexityReport:
    """Dataset separability score; higher means harder.

    Pipeline: flatten samples, Monte-Carlo estimate the class-overlap matrix
    from pooled k-NN memberships, form the symmetric normalized Laplacian,
    and accumulate the non-negative gaps of its sorted spectrum scaled by the
    class count. Deterministic under `seed`.
    """
    counts = np.bincount(dataset.labels, minlength=dataset.class_count)
    lacking = np.flatnonzero(counts < k_neighbors)
    if lacking.size:
        raise ValueError(
            f"class(es) {lacking.tolist()} have fewer than k_neighbors="
            f"{k_neighbors} samples")
    rng = np.random.default_rng(seed)
    w = overlap_matrix(dataset.flat_inputs(), dataset.labels,
                       dataset.class_count, monte_carlo_samples, k_neighbors, rng)
    eig, csg = spectral_gradient(w, dataset.class_count)
    return ComplexityReport(csg=csg, eigenvalues=tuple(float(e) for e in eig),
                            overlap_matrix=w)


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"spec": dataset.spec.to_dict(), "role": dataset.role,
            "count": len(dataset)}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    (directory / "samples.bin").write_bytes(
        np.ascontiguousarray(dataset.inputs, dtype="<f8").tobytes())
    (directory / "labels.bin").write_bytes(
        np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    spec = DatasetSpec.from_dict(meta["spec"])
    n = int(meta["count"])
    shape = (n,) + tuple(spec.input_shape)
    inputs = np.frombuffer((directory / "samples.bin").read_bytes(),
                           dtype="<f8")
    if inputs.size != int(np.prod(shape)):
        raise ValueError(f"corrupt dataset cache at {directory}: sample count "
                         f"mismatch")
    labels = np.frombuffer((directory / "labels.bin").read_bytes(), dtype="<i4")
    if labels.size != n:
        raise ValueError(f"corrupt dataset cache at {directory}: label count "
                         f"mismatch")
    return Dataset(spec, np.asarray(inputs, dtype=np.float64).reshape(shape),
                   np.asarray(labels, dtype=np.int32), meta.get("role", "train"))
