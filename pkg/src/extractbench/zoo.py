"""Architecture catalog: specs, model building, MAdd accounting, checkpoints.

An :class:`ArchitectureSpec` is the declarative form of a model (a typed
operator DAG plus input shape and class count) and is what side-channel
attacks treat as ground truth. Builders below ship several miniature
families at two depths each; FC nodes flatten their input internally, so the
specs skip explicit FLATTEN nodes.

Checkpoint format (one directory per (architecture, dataset, class subset,
tag) key):
  metadata.json  format_version, architecture id, full spec echo, dataset id,
                 class subset, epochs trained, seed
  params.bin     little-endian float64; nodes in spec order; per node the
                 declared tensor order (CONV/FC: weight, bias; BN: gamma,
                 beta, running_mean, running_var); row-major
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Network, NodeSpec, sink_node, topological_order
from .tensor import OperatorKind, ShapeError, infer_shape

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Missing or corrupt checkpoint data."""


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative model description; immutable and freely shareable."""

    id: str
    family: str
    nodes: tuple[NodeSpec, ...]
    input_shape: tuple[int, ...]
    class_count: int

    def __post_init__(self):
        if not self.family:
            raise ValueError("family must be non-empty")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        self.derive_shapes()  # rejects cycles and shape conflicts up front

    def derive_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"input": tuple(self.input_shape)}
        for node in topological_order(list(self.nodes)):
            in_shapes = [shapes[d] for d in node.inputs]
            try:
                shapes[node.node_id] = infer_shape(node.kind, node.params, in_shapes)
            except ShapeError as exc:
                raise ShapeError(f"node {node.node_id}: {exc}") from exc
        return shapes

    def to_dict(self) -> dict:
        return {"id": self.id, "family": self.family,
                "nodes": [n.to_dict() for n in self.nodes],
                "input_shape": list(self.input_shape),
                "class_count": self.class_count}

    @staticmethod
    def from_dict(doc: dict) -> "ArchitectureSpec":
        return ArchitectureSpec(
            doc["id"], doc["family"],
            tuple(NodeSpec.from_dict(n) for n in doc["nodes"]),
            tuple(doc["input_shape"]), int(doc["class_count"]))


@dataclass(frozen=True)
class ModelRef:
    """Key under which a trained model is cached and served."""

    architecture_id: str
    dataset_id: str
    class_subset: tuple[int, ...] | None = None
    checkpoint_tag: str = "default"

    def __post_init__(self):
        if self.class_subset is not None:
            subset = tuple(self.class_subset)
            if not subset or len(set(subset)) != len(subset):
                raise ValueError("class_subset must be non-empty with unique indices")
            object.__setattr__(self, "class_subset", tuple(sorted(subset)))

    def slug(self) -> str:
        subset = "all" if self.class_subset is None else \
            "c" + "-".join(str(i) for i in self.class_subset)
        return f"{self.architecture_id}__{self.dataset_id}__{subset}__{self.checkpoint_tag}"

    def to_dict(self) -> dict:
        return {"architecture_id": self.architecture_id,
                "dataset_id": self.dataset_id,
                "class_subset": list(self.class_subset) if self.class_subset else None,
                "checkpoint_tag": self.checkpoint_tag}

    @staticmethod
    def from_dict(doc: dict) -> "ModelRef":
        subset = doc.get("class_subset")
        return ModelRef(doc["architecture_id"], doc["dataset_id"],
                        tuple(subset) if subset else None,
                        doc.get("checkpoint_tag", "default"))


@dataclass(frozen=True)
class MAddReport:
    per_node: dict[str, int] = field(default_factory=dict)
    total: int = 0


def compute_madd(spec: ArchitectureSpec) -> MAddReport:
    """Multiply counts per node.

    Convention: CONV = H_out*W_out*C_out*K_h*K_w*C_in; FC = fan_in*fan_out;
    BN = one multiply per element; activations, pools, ADD, CONCAT and
    SOFTMAX count zero.
    """
    shapes = spec.derive_shapes()
    per_node: dict[str, int] = {}
    for node in spec.nodes:
        if node.kind is OperatorKind.CONV:
            oh, ow, cout = shapes[node.node_id]
            kh, kw = node.params["kernel"]
            cin = shapes[node.inputs[0]][2]
            per_node[node.node_id] = oh * ow * cout * kh * kw * cin
        elif node.kind is OperatorKind.FC:
            din = int(np.prod(shapes[node.inputs[0]]))
            per_node[node.node_id] = din * int(node.params["out_features"])
        elif node.kind is OperatorKind.BN:
            per_node[node.node_id] = int(np.prod(shapes[node.inputs[0]]))
        else:
            per_node[node.node_id] = 0
    return MAddReport(per_node=per_node, total=sum(per_node.values()))


def operator_sequence(spec: ArchitectureSpec) -> list[OperatorKind]:
    """Execution-order operator kinds (topological, declaration-order ties)."""
    return [n.kind for n in topological_order(list(spec.nodes))]


def build_model(spec: ArchitectureSpec, seed: int) -> Network:
    """Fresh parameters for a spec; bit-identical under equal seeds."""
    model = Network(spec.nodes, spec.input_shape, seed, spec=spec)
    if model.output_shape != (spec.class_count,):
        raise ShapeError(
            f"spec {spec.id}: output shape {model.output_shape} does not "
            f"produce {spec.class_count} classes")
    return model


def transfer_learn(base: Network, inputs: np.ndarray, labels: np.ndarray,
                   head_classes: int, config) -> Network:
    """Replace the final FC head and fine-tune every layer on the new task.

    The base model is left untouched; the returned model shares no arrays
    with it. The head is re-initialized from config.seed even when the class
    count is unchanged.
    """
    if head_classes < 2:
        raise ValueError("head_classes must be >= 2")
    labels = np.asarray(labels)
    if config.epochs > 0 and (labels.min() < 0 or labels.max() >= head_classes):
        raise ValueError(
            f"dataset labels [{labels.min()}, {labels.max()}] outside "
            f"[0, {head_classes})")
    if base.spec is None:
        raise ValueError("base model carries no architecture spec")

    fc_ids = [n.node_id for n in base.order if n.kind is OperatorKind.FC]
    if not fc_ids:
        raise ValueError("base model has no FC head to replace")
    head_id = fc_ids[-1]

    nodes = []
    for node in base.spec.nodes:
        if node.node_id == head_id:
            params = dict(node.params, out_features=int(head_classes))
            nodes.append(NodeSpec(node.node_id, node.kind, params, node.inputs))
        else:
            nodes.append(node)
    spec = ArchitectureSpec(
        id=f"{base.spec.id}-head{head_classes}", family=base.spec.family,
        nodes=tuple(nodes), input_shape=base.spec.input_shape,
        class_count=int(head_classes))

    model = build_model(spec, seed=config.seed)
    for node_id, weights in base.weights.items():
        if node_id == head_id:
            continue
        for name, value in weights.items():
            model.weights[node_id][name] = value.copy()
    for node_id, buffers in base.buffers.items():
        for name, value in buffers.items():
            model.buffers[node_id][name] = value.copy()
    model.bn_calibrated = base.bn_calibrated

    if config.epochs > 0:
        from .network import train
        train(model, inputs, labels, config)
    return model


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------

def checkpoint_path(root, ref: ModelRef) -> Path:
    return Path(root) / ref.slug()


def save_checkpoint(model: Network, ref: ModelRef, root) -> Path:
    """Write atomically: a temp directory is renamed into place."""
    if model.spec is None:
        raise ValueError("model carries no architecture spec")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    final = checkpoint_path(root, ref)
    tmp = Path(tempfile.mkdtemp(prefix=final.name + ".tmp", dir=root))
    try:
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "architecture_id": model.spec.id,
            "spec": model.spec.to_dict(),
            "dataset_id": ref.dataset_id,
            "class_subset": list(ref.class_subset) if ref.class_subset else None,
            "epochs_trained": model.meta.get("epochs_trained", 0),
            "seed": model.meta.get("seed"),
            "bn_calibrated": model.bn_calibrated,
        }
        (tmp / "metadata.json").write_text(json.dumps(meta, indent=2))
        flat = model.state_vector().astype("<f8")
        (tmp / "params.bin").write_bytes(flat.tobytes())
        if final.exists():
            shutil.rmtree(final)
        os.rename(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


def load_checkpoint(ref: ModelRef, root) -> Network:
    path = checkpoint_path(root, ref)
    meta_file = path / "metadata.json"
    params_file = path / "params.bin"
    if not meta_file.exists() or not params_file.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    meta = json.loads(meta_file.read_text())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {meta.get('format_version')}")
    spec = ArchitectureSpec.from_dict(meta["spec"])
    model = build_model(spec, seed=int(meta.get("seed") or 0))
    raw = np.frombuffer(params_file.read_bytes(), dtype="<f8")
    expected = model.state_vector().size
    if raw.size != expected:
        raise CheckpointError(
            f"corrupt checkpoint {path}: params.bin holds {raw.size} values, "
            f"architecture {spec.id} needs {expected}")
    model.load_state_vector(np.asarray(raw, dtype=np.float64))
    model.meta["epochs_trained"] = int(meta.get("epochs_trained", 0))
    model.meta["seed"] = meta.get("seed")
    model.bn_calibrated = bool(meta.get("bn_calibrated", True))
    return model


# ---------------------------------------------------------------------------
# builtin miniature families
# ---------------------------------------------------------------------------

def _conv(nid, src, channels, kernel=3, stride=1):
    return NodeSpec(nid, OperatorKind.CONV,
                    {"out_channels": channels, "kernel": [kernel, kernel],
                     "stride": stride, "padding": "same"}, (src,))


def _head(nodes, src, class_count):
    nodes.append(NodeSpec("head", OperatorKind.FC,
                          {"out_features": class_count}, (src,)))
    nodes.append(NodeSpec("probs", OperatorKind.SOFTMAX, {}, ("head",)))


def make_mini_mlp(weight_layers: int, input_shape, class_count, hidden=16) -> ArchitectureSpec:
    """FC/RELU stack: `weight_layers` counts FC nodes including the head."""
    nodes, src = [], "input"
    for i in range(weight_layers - 1):
        nodes.append(NodeSpec(f"fc{i + 1}", OperatorKind.FC,
                              {"out_features": hidden}, (src,)))
        nodes.append(NodeSpec(f"act{i + 1}", OperatorKind.RELU, {}, (f"fc{i + 1}",)))
        src = f"act{i + 1}"
    _head(nodes, src, class_count)
    return ArchitectureSpec(f"mini-mlp-{weight_layers}", "mini-mlp", tuple(nodes),
                            tuple(input_shape), class_count)


def _vgg_like(arch_id, family, activation, conv_blocks, input_shape, class_count):
    nodes, src = [], "input"
    idx = 0
    for block, (channels, convs) in enumerate(conv_blocks, start=1):
        for _ in range(convs):
            idx += 1
            nodes.append(_conv(f"conv{idx}", src, channels))
            nodes.append(NodeSpec(f"act{idx}", activation, {}, (f"conv{idx}",)))
            src = f"act{idx}"
        nodes.append(NodeSpec(f"pool{block}", OperatorKind.MAXPOOL,
                              {"kernel": [2, 2], "stride": 2}, (src,)))
        src = f"pool{block}"
    nodes.append(NodeSpec("fc1", OperatorKind.FC, {"out_features": 24}, (src,)))
    nodes.append(NodeSpec("factN", activation, {}, ("fc1",)))
    _head(nodes, "factN", class_count)
    return ArchitectureSpec(arch_id, family, tuple(nodes), tuple(input_shape),
                            class_count)


def make_mini_vgg(weight_layers: int, input_shape, class_count) -> ArchitectureSpec:
    blocks = {4: [(6, 1), (8, 1)], 6: [(6, 2), (8, 2)]}[weight_layers]
    return _vgg_like(f"mini-vgg-{weight_layers}", "mini-vgg", OperatorKind.RELU,
                     blocks, input_shape, class_count)


def make_mini_gelu(weight_layers: int, input_shape, class_count) -> ArchitectureSpec:
    """The mini-vgg topology with every ReLU swapped for GELU."""
    blocks = {4: [(6, 1), (8, 1)], 6: [(6, 2), (8, 2)]}[weight_layers]
    return _vgg_like(f"mini-gelu-{weight_layers}", "mini-gelu", OperatorKind.GELU,
                     blocks, input_shape, class_count)


def make_mini_resnet(weight_layers: int, input_shape, class_count) -> ArchitectureSpec:
    """Stem conv + residual blocks (CONV/BN pairs joined by ADD) + pooled head."""
    blocks = {4: 1, 6: 2}[weight_layers]
    channels = 8
    nodes = [
        _conv("stem", "input", channels),
        NodeSpec("stem_bn", OperatorKind.BN, {}, ("stem",)),
        NodeSpec("stem_act", OperatorKind.RELU, {}, ("stem_bn",)),
    ]
    src = "stem_act"
    for b in range(1, blocks + 1):
        nodes.extend([
            _conv(f"b{b}_conv1", src, channels),
            NodeSpec(f"b{b}_bn1", OperatorKind.BN, {}, (f"b{b}_conv1",)),
            NodeSpec(f"b{b}_act1", OperatorKind.RELU, {}, (f"b{b}_bn1",)),
            _conv(f"b{b}_conv2", f"b{b}_act1", channels),
            NodeSpec(f"b{b}_bn2", OperatorKind.BN, {}, (f"b{b}_conv2",)),
            NodeSpec(f"b{b}_add", OperatorKind.ADD, {}, (src, f"b{b}_bn2")),
            NodeSpec(f"b{b}_act2", OperatorKind.RELU, {}, (f"b{b}_add",)),
        ])
        src = f"b{b}_act2"
    nodes.append(NodeSpec("gap", OperatorKind.AVGPOOL,
                          {"kernel": [2, 2], "stride": 2}, (src,)))
    _head(nodes, "gap", class_count)
    return ArchitectureSpec(f"mini-resnet-{weight_layers}", "mini-resnet",
                            tuple(nodes), tuple(input_shape), class_count)


def make_mini_dense(weight_layers: int, input_shape, class_count) -> ArchitectureSpec:
    """Stem + densely concatenated conv growth, max-pooled head."""
    growth_convs = {3: 2, 4: 3}[weight_layers]
    nodes = [
        _conv("stem", "input", 6),
        NodeSpec("stem_act", OperatorKind.RELU, {}, ("stem",)),
        NodeSpec("stem_pool", OperatorKind.MAXPOOL,
                 {"kernel": [2, 2], "stride": 2}, ("stem_act",)),
    ]
    carried = ["stem_pool"]
    for g in range(1, growth_convs + 1):
        if len(carried) == 1:
            feed = carried[0]
        else:
            nodes.append(NodeSpec(f"cat{g}", OperatorKind.CONCAT, {}, tuple(carried)))
            feed = f"cat{g}"
        nodes.append(_conv(f"grow{g}", feed, 4))
        nodes.append(NodeSpec(f"gact{g}", OperatorKind.RELU, {}, (f"grow{g}",)))
        carried.append(f"gact{g}")
    nodes.append(NodeSpec("cat_out", OperatorKind.CONCAT, {}, tuple(carried)))
    nodes.append(NodeSpec("final_pool", OperatorKind.MAXPOOL,
                          {"kernel": [2, 2], "stride": 2}, ("cat_out",)))
    _head(nodes, "final_pool", class_count)
    return ArchitectureSpec(f"mini-dense-{weight_layers}", "mini-dense",
                            tuple(nodes), tuple(input_shape), class_count)


def make_mini_pyramid(weight_layers: int, input_shape, class_count) -> ArchitectureSpec:
    """Bottleneck-first CNN: a narrow stem conv feeding progressively wider
    layers, the width profile of full-scale convnets."""
    nodes = [
        _conv("conv1", "input", 2),
        NodeSpec("act1", OperatorKind.RELU, {}, ("conv1",)),
        NodeSpec("pool1", OperatorKind.MAXPOOL, {"kernel": [2, 2], "stride": 2},
                 ("act1",)),
    ]
    if weight_layers == 4:
        nodes.append(_conv("conv2", "pool1", 12))
        nodes.append(NodeSpec("act2", OperatorKind.RELU, {}, ("conv2",)))
        nodes.append(NodeSpec("pool2", OperatorKind.AVGPOOL,
                              {"kernel": [2, 2], "stride": 2}, ("act2",)))
    elif weight_layers == 5:
        nodes.append(_conv("conv2", "pool1", 8))
        nodes.append(NodeSpec("act2", OperatorKind.RELU, {}, ("conv2",)))
        nodes.append(_conv("conv3", "act2", 16))
        nodes.append(NodeSpec("act3", OperatorKind.RELU, {}, ("conv3",)))
        nodes.append(NodeSpec("pool2", OperatorKind.MAXPOOL,
                              {"kernel": [2, 2], "stride": 2}, ("act3",)))
    else:
        raise ValueError("mini-pyramid ships depths 4 and 5")
    nodes.append(NodeSpec("fc1", OperatorKind.FC, {"out_features": 24}, ("pool2",)))
    nodes.append(NodeSpec("factN", OperatorKind.RELU, {}, ("fc1",)))
    _head(nodes, "factN", class_count)
    return ArchitectureSpec(f"mini-pyramid-{weight_layers}", "mini-pyramid",
                            tuple(nodes), tuple(input_shape), class_count)


def make_student_cnn(input_shape, class_count) -> ArchitectureSpec:
    """Five-layer CNN used as the common distillation student."""
    nodes = [
        _conv("conv", "input", 4),
        NodeSpec("act", OperatorKind.RELU, {}, ("conv",)),
        NodeSpec("pool", OperatorKind.MAXPOOL, {"kernel": [2, 2], "stride": 2},
                 ("act",)),
    ]
    _head(nodes, "pool", class_count)
    return ArchitectureSpec("mini-student-cnn", "mini-student", tuple(nodes),
                            tuple(input_shape), class_count)


BUILTIN_ARCHITECTURES = {
    "mini-mlp-1": lambda shape, k: make_mini_mlp(1, shape, k),
    "mini-mlp-2": lambda shape, k: make_mini_mlp(2, shape, k),
    "mini-mlp-3": lambda shape, k: make_mini_mlp(3, shape, k),
    "mini-vgg-4": lambda shape, k: make_mini_vgg(4, shape, k),
    "mini-vgg-6": lambda shape, k: make_mini_vgg(6, shape, k),
    "mini-gelu-4": lambda shape, k: make_mini_gelu(4, shape, k),
    "mini-gelu-6": lambda shape, k: make_mini_gelu(6, shape, k),
    "mini-resnet-4": lambda shape, k: make_mini_resnet(4, shape, k),
    "mini-resnet-6": lambda shape, k: make_mini_resnet(6, shape, k),
    "mini-dense-3": lambda shape, k: make_mini_dense(3, shape, k),
    "mini-dense-4": lambda shape, k: make_mini_dense(4, shape, k),
    "mini-pyramid-4": lambda shape, k: make_mini_pyramid(4, shape, k),
    "mini-pyramid-5": lambda shape, k: make_mini_pyramid(5, shape, k),
    "mini-student-cnn": lambda shape, k: make_student_cnn(shape, k),
}


def builtin_spec(arch_id: str, input_shape, class_count: int) -> ArchitectureSpec:
    if arch_id not in BUILTIN_ARCHITECTURES:
        raise KeyError(f"unknown architecture id {arch_id!r}")
    return BUILTIN_ARCHITECTURES[arch_id](tuple(input_shape), int(class_count))
