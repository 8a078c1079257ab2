"""Operator-DAG models: compilation, forward/backward, and SGD training.

A model is a list of :class:`NodeSpec` entries wired by node id (the reserved
id ``"input"`` denotes the graph input). Execution order is topological with
ties broken by declaration order, so two builds of the same node list behave
identically. Forward passes cache per-node activations; backward consumes the
cache and returns gradients for every trainable tensor plus the graph input
(the latter is what inversion attacks climb).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    BUFFER_ORDER,
    OperatorKind,
    PARAM_ORDER,
    ShapeError,
    Tensor,
    infer_shape,
    init_weights,
    op_backward,
    op_forward,
)

INPUT_ID = "input"
_LOG_EPS = 1e-12


class GraphError(ValueError):
    """The node list does not describe a valid single-output DAG."""


@dataclass(frozen=True)
class NodeSpec:
    """One operator node: identity, kind, static params, and input wiring."""

    node_id: str
    kind: OperatorKind
    params: dict = field(default_factory=dict)
    inputs: tuple[str, ...] = (INPUT_ID,)

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "kind": self.kind.value,
                "params": dict(self.params), "inputs": list(self.inputs)}

    @staticmethod
    def from_dict(doc: dict) -> "NodeSpec":
        return NodeSpec(doc["node_id"], OperatorKind(doc["kind"]),
                        dict(doc["params"]), tuple(doc["inputs"]))


def topological_order(nodes: list[NodeSpec]) -> list[NodeSpec]:
    """Execution order: topological, ties resolved by declaration order."""
    by_id = {n.node_id: n for n in nodes}
    if len(by_id) != len(nodes):
        raise GraphError("duplicate node ids")
    done: set[str] = {INPUT_ID}
    order: list[NodeSpec] = []
    pending = list(nodes)
    while pending:
        for i, node in enumerate(pending):
            missing = [d for d in node.inputs if d not in by_id and d != INPUT_ID]
            if missing:
                raise GraphError(f"node {node.node_id}: unknown input(s) {missing}")
            if all(d in done for d in node.inputs):
                order.append(node)
                done.add(node.node_id)
                del pending[i]
                break
        else:
            raise GraphError(
                f"cycle involving node(s) {[n.node_id for n in pending]}")
    return order


def sink_node(nodes: list[NodeSpec]) -> NodeSpec:
    consumed = {d for n in nodes for d in n.inputs}
    sinks = [n for n in nodes if n.node_id not in consumed]
    if len(sinks) != 1:
        raise GraphError(
            f"graph must have exactly one output node, found {len(sinks)}: "
            f"{[n.node_id for n in sinks]}")
    return sinks[0]


@dataclass
class Gradients:
    """Per-node trainable-tensor gradients plus the graph-input gradient."""

    by_node: dict[str, dict[str, np.ndarray]]
    input: np.ndarray


class Network:
    """A compiled operator DAG with parameters and activation caches.

    One instance belongs to one pipeline at a time: forward/backward share a
    cache and train mutates weights in place. Distinct instances are fully
    independent.
    """

    def __init__(self, nodes, input_shape, seed: int, spec=None):
        self.nodes = [NodeSpec(n.node_id, n.kind, dict(n.params), tuple(n.inputs))
                      for n in nodes]
        self.input_shape = tuple(int(s) for s in input_shape)
        self.order = topological_order(self.nodes)
        self.output_id = sink_node(self.nodes).node_id
        self.spec = spec
        self.meta: dict = {"seed": int(seed), "epochs_trained": 0}

        self.shapes: dict[str, tuple[int, ...]] = {INPUT_ID: self.input_shape}
        for node in self.order:
            in_shapes = [self.shapes[d] for d in node.inputs]
            try:
                self.shapes[node.node_id] = infer_shape(node.kind, node.params, in_shapes)
            except ShapeError as exc:
                raise ShapeError(f"node {node.node_id}: {exc}") from exc

        rng = np.random.default_rng(seed)
        self.weights: dict[str, dict[str, np.ndarray]] = {}
        self.buffers: dict[str, dict[str, np.ndarray]] = {}
        for node in self.nodes:  # declaration order keeps init deterministic
            in_shapes = [self.shapes[d] for d in node.inputs]
            w, b = init_weights(node.kind, node.params, in_shapes, rng)
            self.weights[node.node_id] = w
            self.buffers[node.node_id] = b
        self.bn_calibrated = not any(n.kind is OperatorKind.BN for n in self.nodes)
        self._acts: dict[str, np.ndarray] | None = None

    # -- structure ----------------------------------------------------------

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[self.output_id]

    @property
    def output_width(self) -> int:
        return int(np.prod(self.output_shape))

    def parameterized_nodes(self) -> list[str]:
        return [n.node_id for n in self.order if self.weights[n.node_id]]

    def parameter_count(self) -> int:
        return sum(t.size for w in self.weights.values() for t in w.values())

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    # -- checkpoint support: flat parameter vector in declared order --------

    def _state_items(self):
        for node in self.nodes:
            for name in PARAM_ORDER.get(node.kind, ()):
                if name in self.weights[node.node_id]:
                    yield node.node_id, name, False
            for name in BUFFER_ORDER.get(node.kind, ()):
                yield node.node_id, name, True

    def state_vector(self) -> np.ndarray:
        parts = []
        for node_id, name, is_buffer in self._state_items():
            store = self.buffers if is_buffer else self.weights
            parts.append(store[node_id][name].reshape(-1))
        return np.concatenate(parts) if parts else np.empty(0)

    def load_state_vector(self, flat: np.ndarray) -> None:
        expected = self.state_vector().size
        if flat.size != expected:
            raise ValueError(
                f"parameter vector holds {flat.size} values, model needs {expected}")
        pos = 0
        for node_id, name, is_buffer in self._state_items():
            store = self.buffers if is_buffer else self.weights
            t = store[node_id][name]
            store[node_id][name] = flat[pos:pos + t.size].reshape(t.shape).copy()
            pos += t.size

    # -- execution -----------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass; caches activations for backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match model input "
                f"{self.input_shape}")
        acts: dict[str, np.ndarray] = {INPUT_ID: x}
        for node in self.order:
            ins = [acts[d] for d in node.inputs]
            acts[node.node_id] = op_forward(
                node.kind, node.params, self.weights[node.node_id],
                self.buffers[node.node_id], ins)
        self._acts = acts
        return acts[self.output_id]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def activation(self, node_id: str) -> np.ndarray:
        if self._acts is None:
            raise RuntimeError("no cached forward pass")
        if node_id not in self._acts:
            raise KeyError(f"unknown probe point {node_id!r}")
        return self._acts[node_id]

    def backward(self, output_gradient: np.ndarray) -> Gradients:
        """Backpropagate from the output; requires a cached forward pass."""
        if self._acts is None:
            raise RuntimeError("backward called before forward")
        grad = np.asarray(output_gradient, dtype=np.float64)
        out = self._acts[self.output_id]
        if grad.shape != out.shape:
            raise ShapeError(
                f"output gradient shape {grad.shape} does not match output "
                f"{out.shape}")
        grads_at: dict[str, np.ndarray] = {self.output_id: grad}
        by_node: dict[str, dict[str, np.ndarray]] = {}
        zero_in = np.zeros_like(self._acts[INPUT_ID])
        grads_at.setdefault(INPUT_ID, zero_in)
        for node in reversed(self.order):
            g = grads_at.get(node.node_id)
            if g is None:
                continue
            ins = [self._acts[d] for d in node.inputs]
            wgrads, igrads = op_backward(
                node.kind, node.params, self.weights[node.node_id],
                self.buffers[node.node_id], ins, self._acts[node.node_id], g)
            if wgrads:
                by_node[node.node_id] = wgrads
            for dep, ig in zip(node.inputs, igrads):
                if dep in grads_at:
                    grads_at[dep] = grads_at[dep] + ig
                else:
                    grads_at[dep] = ig
        for node in self.order:  # zero grads for nodes off the gradient path
            if node.node_id not in by_node and self.weights[node.node_id]:
                by_node[node.node_id] = {
                    k: np.zeros_like(v) for k, v in self.weights[node.node_id].items()}
        return Gradients(by_node=by_node, input=grads_at[INPUT_ID])

    def calibrate_bn(self, batch: np.ndarray) -> None:
        """Fix BN running statistics from one calibration batch (one-time)."""
        x = np.asarray(batch, dtype=np.float64)
        acts: dict[str, np.ndarray] = {INPUT_ID: x}
        for node in self.order:
            ins = [acts[d] for d in node.inputs]
            if node.kind is OperatorKind.BN:
                axes = tuple(range(ins[0].ndim - 1))
                self.buffers[node.node_id]["running_mean"] = ins[0].mean(axis=axes)
                self.buffers[node.node_id]["running_var"] = ins[0].var(axis=axes)
            acts[node.node_id] = op_forward(
                node.kind, node.params, self.weights[node.node_id],
                self.buffers[node.node_id], ins)
        self.bn_calibrated = True


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 10
    epochs: int = 10
    loss: str = "cross_entropy"  # or "soft_target_kl"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.loss not in ("cross_entropy", "soft_target_kl"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "batch_size": self.batch_size,
                "epochs": self.epochs, "loss": self.loss, "seed": self.seed}


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood over probability outputs, and its gradient."""
    n = probs.shape[0]
    rows = np.arange(n)
    p = np.maximum(probs[rows, labels], _LOG_EPS)
    loss = -np.mean(np.log(p))
    grad = np.zeros_like(probs)
    grad[rows, labels] = -1.0 / (p * n)
    return loss, grad


def soft_kl_grad(probs: np.ndarray, targets: np.ndarray):
    """Mean KL(target || output) over probability outputs, and its gradient."""
    n = probs.shape[0]
    p = np.maximum(probs, _LOG_EPS)
    t = targets
    tl = np.where(t > 0, np.log(np.maximum(t, _LOG_EPS)), 0.0)
    loss = np.mean(np.sum(t * (tl - np.log(p)), axis=1))
    grad = -(t / p) / n
    return loss, grad


def sgd_run(model: Network, inputs: np.ndarray, grad_fn,
            config: TrainConfig) -> list[float]:
    """Shared minibatch SGD loop.

    `grad_fn(probs, batch_indices)` returns (loss, gradient wrt model output).
    Shuffling consumes exactly one permutation per epoch from a generator
    seeded with `config.seed`, so two runs with equal configs are bit-equal.
    """
    n = inputs.shape[0]
    rng = np.random.default_rng(config.seed)
    history = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        if not model.bn_calibrated:
            model.calibrate_bn(inputs[perm[:config.batch_size]])
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            probs = model.forward(inputs[idx])
            loss, gout = grad_fn(probs, idx)
            grads = model.backward(gout)
            for node_id, wgrads in grads.by_node.items():
                store = model.weights[node_id]
                for name, g in wgrads.items():
                    store[name] -= config.learning_rate * g
            losses.append(loss)
        history.append(float(np.mean(losses)))
        model.meta["epochs_trained"] += 1
    return history


def train(model: Network, inputs: np.ndarray, targets: np.ndarray,
          config: TrainConfig) -> list[float]:
    """Mini-batch SGD on hard labels (cross_entropy) or probability targets
    (soft_target_kl). Updates the model in place; returns per-epoch mean loss.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise ValueError("training dataset is empty")
    width = model.output_width
    if config.loss == "cross_entropy":
        labels = np.asarray(targets)
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise ValueError("cross_entropy expects one integer label per sample")
        if labels.min() < 0 or labels.max() >= width:
            raise ValueError(
                f"label range [{labels.min()}, {labels.max()}] incompatible with "
                f"model output width {width}")

        def grad_fn(probs, idx):
            return cross_entropy_grad(probs, labels[idx])
    else:
        soft = np.asarray(targets, dtype=np.float64)
        if soft.ndim != 2 or soft.shape != (inputs.shape[0], width):
            raise ValueError(
                f"soft_target_kl expects ({inputs.shape[0]}, {width}) probability "
                f"targets, got {soft.shape}")

        def grad_fn(probs, idx):
            return soft_kl_grad(probs, soft[idx])

    return sgd_run(model, inputs, grad_fn, config)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    has_parameters: bool
    checked: int
    worst: tuple[str, str, int] | None = None

    def __float__(self):
        return self.max_rel_error


def finite_difference_check(model: Network, probe_input, step: float = 1e-5,
                            check_input: bool = False) -> GradCheckResult:
    """Compare analytic parameter gradients against central finite differences.

    The scalar objective is a fixed random projection of the model output, so
    every output component contributes. Returns the max relative error over
    all trainable parameter elements (and input elements when requested); a
    model with no parameters reports 0.0 with has_parameters=False.
    """
    x = probe_input.to_array() if isinstance(probe_input, Tensor) else np.asarray(probe_input)
    batch = np.asarray(x, dtype=np.float64)[None, ...]
    proj = np.random.default_rng(0).standard_normal((1,) + model.output_shape)

    def objective():
        return float((model.forward(batch) * proj).sum())

    objective()
    analytic = model.backward(proj)

    worst = None
    max_err = 0.0
    checked = 0

    def compare(store, node_id, name, a_grad):
        nonlocal worst, max_err, checked
        t = store[node_id][name]
        flat = t.reshape(-1)
        aflat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = objective()
            flat[i] = orig - step
            down = objective()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-12)
            checked += 1
            if err > max_err:
                max_err = err
                worst = (node_id, name, i)

    has_params = False
    for node_id in model.parameterized_nodes():
        for name in model.weights[node_id]:
            has_params = True
            compare(model.weights, node_id, name, analytic.by_node[node_id][name])

    if check_input:
        aflat = analytic.input.reshape(-1)
        flat = batch.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = objective()
            flat[i] = orig - step
            down = objective()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-12)
            checked += 1
            if err > max_err:
                max_err = err
                worst = (INPUT_ID, "input", i)

    objective()  # leave caches consistent with unperturbed weights
    if not has_params and not check_input:
        return GradCheckResult(0.0, False, 0)
    return GradCheckResult(max_err, has_params, checked, worst)
