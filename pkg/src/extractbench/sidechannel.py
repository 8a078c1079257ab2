"""Simulated side channels and the two architecture-extraction pipelines.

Kernel traces: every operator node of a running model emits one event with
five metrics. The generative stand-in is fixed so results are reproducible:
  read_volume   = 8 * (elements of all inputs + elements of parameters) bytes
  write_volume  = 8 * elements of the output
  input_volume / output_volume = raw element counts
  exec_lat      = latency_scale * (node multiply count + output elements)
with every metric multiplied by an independent log-normal jitter of the
profile's relative std-dev. Verbose runtimes insert extra NOISE events.

Sequence inference works per event: windowed, log-scaled, standardized
metrics feed a softmax-regression labeler over the seven trace-recognizable
kinds {Conv, FC, ReLU, BN, Pool, Concat, Add}. MAXPOOL and AVGPOOL collapse
into Pool because their simulated metrics are identical; SOFTMAX, GELU and
FLATTEN are out of vocabulary and can only ever be mis-labeled, never
rejected.

Cache fingerprinting: each node increments mapped framework symbols
(CONV -> Conv+Bias, FC -> MatMul+Bias, RELU -> Relu, MAXPOOL -> MaxPool,
AVGPOOL -> AveragePool, ADD/CONCAT/BN -> Merge, SOFTMAX -> Softmax; GELU and
FLATTEN touch none of the eight watched symbols). True hits drop with the
machine's drop rate; spurious hits arrive Poisson per symbol and survive only
when their simulated reload time is under the profile threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Network, NodeSpec, TrainConfig, train, topological_order
from .tensor import OperatorKind
from .zoo import ArchitectureSpec, compute_madd

NOISE = "NOISE"

DS_VOCABULARY = ("Conv", "FC", "ReLU", "BN", "Pool", "Concat", "Add")

_DS_LABEL = {
    OperatorKind.CONV: "Conv",
    OperatorKind.FC: "FC",
    OperatorKind.RELU: "ReLU",
    OperatorKind.BN: "BN",
    OperatorKind.MAXPOOL: "Pool",
    OperatorKind.AVGPOOL: "Pool",
    OperatorKind.CONCAT: "Concat",
    OperatorKind.ADD: "Add",
    OperatorKind.GELU: "GELU",
    OperatorKind.SOFTMAX: "Softmax",
    OperatorKind.FLATTEN: "Flatten",
}

SYMBOLS = ("Conv", "MatMul", "Softmax", "Relu", "MaxPool", "AveragePool",
           "Merge", "Bias")

_SYMBOL_MAP: dict[OperatorKind, tuple[str, ...]] = {
    OperatorKind.CONV: ("Conv", "Bias"),
    OperatorKind.FC: ("MatMul", "Bias"),
    OperatorKind.RELU: ("Relu",),
    OperatorKind.MAXPOOL: ("MaxPool",),
    OperatorKind.AVGPOOL: ("AveragePool",),
    OperatorKind.ADD: ("Merge",),
    OperatorKind.CONCAT: ("Merge",),
    OperatorKind.BN: ("Merge",),
    OperatorKind.SOFTMAX: ("Softmax",),
    OperatorKind.GELU: (),
    OperatorKind.FLATTEN: (),
}


@dataclass(frozen=True)
class KernelTraceEvent:
    exec_lat: float
    read_volume: int
    write_volume: int
    input_volume: int
    output_volume: int
    true_kind: str  # OperatorKind value name, or NOISE

    def metrics(self) -> tuple[float, ...]:
        return (self.exec_lat, float(self.read_volume), float(self.write_volume),
                float(self.input_volume), float(self.output_volume))

    def to_dict(self) -> dict:
        return {"lat": self.exec_lat, "rv": self.read_volume,
                "wv": self.write_volume, "iv": self.input_volume,
                "ov": self.output_volume, "kind": self.true_kind}

    @staticmethod
    def from_dict(doc: dict) -> "KernelTraceEvent":
        return KernelTraceEvent(float(doc["lat"]), int(doc["rv"]), int(doc["wv"]),
                                int(doc["iv"]), int(doc["ov"]), doc["kind"])


@dataclass(frozen=True)
class EnvironmentProfile:
    """Accelerator-side observation conditions for trace capture."""

    id: str
    metric_jitter: float = 0.0       # relative std-dev per metric
    verbose_runtime: bool = False    # extra kernel calls appear in the trace
    latency_scale: float = 1.0

    def __post_init__(self):
        if self.metric_jitter < 0:
            raise ValueError("metric_jitter must be >= 0")
        if self.latency_scale <= 0:
            raise ValueError("latency_scale must be positive")


@dataclass(frozen=True)
class MachineProfile:
    """Cache-probing conditions on the CPU side."""

    id: str
    drop_rate: float = 0.0           # chance a true symbol hit is missed
    spurious_rate: float = 0.0       # expected spurious hits per symbol
    reload_threshold: int = 200      # cycles; spurious hits above are discarded
    matmul_visible: bool = True

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must lie in [0, 1]")
        if self.spurious_rate < 0:
            raise ValueError("spurious_rate must be >= 0")
        if self.reload_threshold <= 0:
            raise ValueError("reload_threshold must be positive")


@dataclass
class SymbolHistogram:
    counts: dict[str, int]
    machine_profile_id: str
    true_architecture_id: str
    true_family: str

    def vector(self) -> np.ndarray:
        return np.array([self.counts[s] for s in SYMBOLS], dtype=np.float64)


BUILTIN_ENVIRONMENT_PROFILES = {
    "gpu-quiet": EnvironmentProfile("gpu-quiet", metric_jitter=0.0),
    "gpu-low": EnvironmentProfile("gpu-low", metric_jitter=0.02),
    "gpu-noisy": EnvironmentProfile("gpu-noisy", metric_jitter=0.15),
    "gpu-verbose": EnvironmentProfile("gpu-verbose", metric_jitter=0.02,
                                      verbose_runtime=True),
}

BUILTIN_MACHINE_PROFILES = {
    "i7-6850k-like": MachineProfile("i7-6850k-like", drop_rate=0.02,
                                    spurious_rate=0.2),
    "i7-4770-like": MachineProfile("i7-4770-like", drop_rate=0.12,
                                   spurious_rate=1.0),
    "i5-3470-like": MachineProfile("i5-3470-like", drop_rate=0.35,
                                   spurious_rate=3.0),
    "tf2-like": MachineProfile("tf2-like", drop_rate=0.05, spurious_rate=0.3,
                               matmul_visible=False),
}


def ds_truth_sequence(spec: ArchitectureSpec) -> list[str]:
    """Trace-aligned ground-truth labels (one per node, execution order)."""
    return [_DS_LABEL[n.kind] for n in topological_order(list(spec.nodes))]


# ---------------------------------------------------------------------------
# kernel-trace simulation
# ---------------------------------------------------------------------------

def simulate_kernel_trace(spec: ArchitectureSpec, profile: EnvironmentProfile,
                          seed: int = 0) -> list[KernelTraceEvent]:
    """One event per operator node in execution order; deterministic under
    (spec, profile, seed) and stateless across calls."""
    rng = np.random.default_rng(seed)
    shapes = spec.derive_shapes()
    madd = compute_madd(spec).per_node
    order = topological_order(list(spec.nodes))

    def param_elements(node: NodeSpec) -> int:
        from .tensor import buffer_shapes, weight_shapes
        in_shapes = [shapes[d] for d in node.inputs]
        total = 0
        for s in weight_shapes(node.kind, node.params, in_shapes).values():
            total += int(np.prod(s))
        for s in buffer_shapes(node.kind, node.params, in_shapes).values():
            total += int(np.prod(s))
        return total

    def jitter() -> float:
        if profile.metric_jitter == 0:
            return 1.0
        return float(rng.lognormal(0.0, profile.metric_jitter))

    events = []
    for node in order:
        in_elems = sum(int(np.prod(shapes[d])) for d in node.inputs)
        out_elems = int(np.prod(shapes[node.node_id]))
        read = 8 * (in_elems + param_elements(node))
        write = 8 * out_elems
        lat = profile.latency_scale * (madd[node.node_id] + out_elems)
        events.append(KernelTraceEvent(
            exec_lat=lat * jitter(),
            read_volume=int(round(read * jitter())),
            write_volume=int(round(write * jitter())),
            input_volume=int(round(in_elems * jitter())),
            output_volume=int(round(out_elems * jitter())),
            true_kind=node.kind.name))

    if profile.verbose_runtime:
        extra = max(1, int(round(0.3 * len(events))))
        mats = np.array([e.metrics() for e in events])
        lo, hi = mats.min(axis=0), mats.max(axis=0)
        for _ in range(extra):
            vals = rng.uniform(lo, np.maximum(hi, lo + 1.0))
            noise = KernelTraceEvent(float(vals[0]), int(vals[1]), int(vals[2]),
                                     int(vals[3]), int(vals[4]), NOISE)
            events.insert(int(rng.integers(len(events) + 1)), noise)
    return events


def write_trace_jsonl(events: list[KernelTraceEvent], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for event in events:
            fh.write(json.dumps(event.to_dict()) + "\n")
    return path


def read_trace_jsonl(path) -> list[KernelTraceEvent]:
    return [KernelTraceEvent.from_dict(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# sequence inference (trace -> operator labels)
# ---------------------------------------------------------------------------

def _window_features(trace: list[KernelTraceEvent], window: int) -> np.ndarray:
    mats = np.log1p(np.array([e.metrics() for e in trace]))  # decades -> linear
    n, m = mats.shape
    feats = np.zeros((n, (2 * window + 1) * m))
    for off in range(-window, window + 1):
        col = (off + window) * m
        lo, hi = max(0, -off), min(n, n - off)
        if lo < hi:
            feats[lo:hi, col:col + m] = mats[lo + off:hi + off]
    return feats


@dataclass
class SequenceClassifier:
    """Per-event operator labeler: standardized windowed metrics into a
    softmax regression over the seven in-vocabulary kinds."""

    window: int
    mean: np.ndarray
    std: np.ndarray
    model: Network

    def features(self, trace: list[KernelTraceEvent]) -> np.ndarray:
        raw = _window_features(trace, self.window)
        return (raw - self.mean) / self.std

    def predict(self, trace: list[KernelTraceEvent]) -> list[str]:
        probs = self.model.predict(self.features(trace))
        return [DS_VOCABULARY[i] for i in probs.argmax(axis=1)]

    def event_accuracy(self, trace, truth: list[str]) -> float:
        """Accuracy over events whose truth is in vocabulary."""
        pred = self.predict(trace)
        pairs = [(p, t) for p, t in zip(pred, truth) if t in DS_VOCABULARY]
        if not pairs:
            raise ValueError("no in-vocabulary events to score")
        return float(np.mean([p == t for p, t in pairs]))


def train_ds_model(corpus: list[tuple[list[KernelTraceEvent], list[str]]],
                   window: int = 1,
                   config: TrainConfig | None = None) -> SequenceClassifier:
    """Fit the per-event labeler on (trace, truth) pairs.

    Only events with in-vocabulary truth contribute training rows; standardization
    statistics are stored for reuse at prediction time.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    rows, labels = [], []
    for trace, truth in corpus:
        if len(trace) != len(truth):
            raise ValueError("trace and truth lengths differ; train on "
                             "noise-free profiles")
        feats = _window_features(trace, window)
        for i, t in enumerate(truth):
            if t in DS_VOCABULARY:
                rows.append(feats[i])
                labels.append(DS_VOCABULARY.index(t))
    x = np.array(rows)
    y = np.array(labels)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std

    config = config or TrainConfig(learning_rate=0.5, batch_size=16, epochs=200,
                                   loss="cross_entropy", seed=0)
    dim = xs.shape[1]
    model = Network(
        [NodeSpec("logits", OperatorKind.FC, {"out_features": len(DS_VOCABULARY)},
                  ("input",)),
         NodeSpec("probs", OperatorKind.SOFTMAX, {}, ("logits",))],
        (dim,), seed=config.seed)
    train(model, xs, y, config)
    return SequenceClassifier(window=window, mean=mean, std=std, model=model)


def ds_extract(trace: list[KernelTraceEvent],
               classifier: SequenceClassifier) -> list[str]:
    """One predicted kind per event; pure."""
    return classifier.predict(trace)


def levenshtein(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, xa in enumerate(a, start=1):
        cur = [i]
        for j, xb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (xa != xb)))
        prev = cur
    return prev[len(b)]


def sequence_fidelity(predicted, truth) -> float:
    """1 - normalized edit distance; 1.0 iff the sequences are equal."""
    truth = list(truth)
    if not truth:
        raise ValueError("truth sequence is empty")
    predicted = list(predicted)
    denom = max(len(predicted), len(truth))
    return 1.0 - levenshtein(predicted, truth) / denom


# ---------------------------------------------------------------------------
# cache-symbol simulation and fingerprinting
# ---------------------------------------------------------------------------

def simulate_symbol_stream(spec: ArchitectureSpec, profile: MachineProfile,
                           seed: int = 0) -> SymbolHistogram:
    """Symbol counts observed during one inference under a machine profile."""
    rng = np.random.default_rng(seed)
    counts = {s: 0 for s in SYMBOLS}
    for node in topological_order(list(spec.nodes)):
        for sym in _SYMBOL_MAP[node.kind]:
            if rng.random() >= profile.drop_rate:
                counts[sym] += 1
    for sym in SYMBOLS:
        spurious = int(rng.poisson(profile.spurious_rate))
        # reload time gates spurious hits; almost all pass the default threshold
        reloads = rng.exponential(50.0, size=spurious)
        counts[sym] += int(np.sum(reloads <= profile.reload_threshold))
    if not profile.matmul_visible:
        counts["MatMul"] = 0
    return SymbolHistogram(counts=counts, machine_profile_id=profile.id,
                           true_architecture_id=spec.id, true_family=spec.family)


def write_histograms_csv(histograms: list[SymbolHistogram], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(SYMBOLS) + ["architecture", "family", "profile"])
        for h in histograms:
            writer.writerow([h.counts[s] for s in SYMBOLS]
                            + [h.true_architecture_id, h.true_family,
                               h.machine_profile_id])
    return path


def read_histograms_csv(path) -> list[SymbolHistogram]:
    out = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            counts = {s: int(row[s]) for s in SYMBOLS}
            out.append(SymbolHistogram(counts, row["profile"],
                                       row["architecture"], row["family"]))
    return out


@dataclass
class FingerprintModel:
    mean: np.ndarray
    components: np.ndarray            # (2, 8) rows = principal directions
    eigenvalues: np.ndarray
    explained_variance: float
    points: np.ndarray                # (m, 2) projected training corpus
    architecture_labels: list[str]
    family_labels: list[str]
    k: int

    def project(self, histogram: SymbolHistogram) -> np.ndarray:
        return (histogram.vector() - self.mean) @ self.components.T


@dataclass
class DrPrediction:
    architecture_id: str
    family: str
    exact_votes: dict[str, int]
    family_votes: dict[str, int]


def fit_fingerprint_space(corpus: list[SymbolHistogram], k: int = 5) -> FingerprintModel:
    """Mean-centered two-component PCA over 8-dim symbol counts, keeping
    labeled projections as the k-NN reference set."""
    if len({h.true_architecture_id for h in corpus}) < 2:
        raise ValueError("corpus must span at least two architectures")
    if not 1 <= k <= len(corpus):
        raise ValueError(f"k must lie in [1, {len(corpus)}]")
    x = np.array([h.vector() for h in corpus])
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(corpus) - 1, 1)
    eig, vec = np.linalg.eigh(cov)
    order = np.argsort(eig)[::-1]
    eig = np.maximum(eig[order], 0.0)
    total = eig.sum()
    if total <= 0:
        raise ValueError("degenerate corpus: symbol counts have zero variance")
    comps = vec[:, order[:2]].T
    for i in range(2):  # sign convention: dominant loading positive
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return FingerprintModel(
        mean=mean, components=comps, eigenvalues=eig,
        explained_variance=float(eig[:2].sum() / total),
        points=xc @ comps.T,
        architecture_labels=[h.true_architecture_id for h in corpus],
        family_labels=[h.true_family for h in corpus], k=k)


def _vote(labels: list[str], order: np.ndarray) -> tuple[str, dict[str, int]]:
    votes: dict[str, int] = {}
    for i in order:
        votes[labels[i]] = votes.get(labels[i], 0) + 1
    top = max(votes.values())
    tied = {lbl for lbl, v in votes.items() if v == top}
    for i in order:  # ties go to the nearest neighbor carrying a tied label
        if labels[i] in tied:
            return labels[i], votes
    raise AssertionError("unreachable")


def dr_classify(histogram: SymbolHistogram, model: FingerprintModel) -> DrPrediction:
    """Majority vote over the k nearest projected neighbors, taken
    independently for the exact architecture and for the family."""
    point = model.project(histogram)
    dist = np.linalg.norm(model.points - point, axis=1)
    order = np.argsort(dist, kind="stable")[:model.k]
    arch, arch_votes = _vote(model.architecture_labels, order)
    family, family_votes = _vote(model.family_labels, order)
    return DrPrediction(architecture_id=arch, family=family,
                        exact_votes=arch_votes, family_votes=family_votes)
