"""Architecture specs, MAdd accounting, transfer learning, checkpoints."""

import numpy as np
import pytest

from extractbench.network import NodeSpec, TrainConfig
from extractbench.tensor import OperatorKind as K
from extractbench.tensor import ShapeError
from extractbench.zoo import (
    ArchitectureSpec,
    BUILTIN_ARCHITECTURES,
    CheckpointError,
    ModelRef,
    build_model,
    builtin_spec,
    checkpoint_path,
    compute_madd,
    load_checkpoint,
    operator_sequence,
    save_checkpoint,
    transfer_learn,
)

from conftest import make_blobs, trained_model

SHAPE = (8, 8, 1)


def conv_node(nid, src, channels, kernel=3, stride=1, padding="same"):
    return NodeSpec(nid, K.CONV, {"out_channels": channels,
                                  "kernel": [kernel, kernel], "stride": stride,
                                  "padding": padding}, (src,))


class TestBuildModel:
    def test_same_seed_bit_identical(self):
        spec = builtin_spec("mini-resnet-4", SHAPE, 4)
        a = build_model(spec, seed=3)
        b = build_model(spec, seed=3)
        assert np.array_equal(a.state_vector(), b.state_vector())
        c = build_model(spec, seed=4)
        assert not np.array_equal(a.state_vector(), c.state_vector())

    def test_shape_incompatible_add_names_both_shapes(self):
        nodes = (
            conv_node("a", "input", 2),
            conv_node("b", "input", 3),
            NodeSpec("sum", K.ADD, {}, ("a", "b")),
            NodeSpec("fc", K.FC, {"out_features": 2}, ("sum",)),
            NodeSpec("sm", K.SOFTMAX, {}, ("fc",)),
        )
        with pytest.raises(ShapeError) as err:
            ArchitectureSpec("bad", "test", nodes, SHAPE, 2)
        assert "(8, 8, 2)" in str(err.value) and "(8, 8, 3)" in str(err.value)

    def test_mini_vgg_output_width(self):
        spec = builtin_spec("mini-vgg-4", (16, 16, 1), 4)
        model = build_model(spec, seed=0)
        assert model.output_width == 4
        out = model.forward(np.zeros((2, 16, 16, 1)))
        assert out.shape == (2, 4)

    def test_every_builtin_compiles_and_runs(self):
        for arch_id in BUILTIN_ARCHITECTURES:
            spec = builtin_spec(arch_id, SHAPE, 3)
            model = build_model(spec, seed=1)
            out = model.forward(np.zeros((2,) + SHAPE))
            assert out.shape == (2, 3), arch_id


class TestMAdd:
    def test_single_fc(self):
        nodes = (NodeSpec("fc", K.FC, {"out_features": 5}, ("input",)),
                 NodeSpec("sm", K.SOFTMAX, {}, ("fc",)))
        spec = ArchitectureSpec("fc10x5", "test", nodes, (10,), 5)
        report = compute_madd(spec)
        assert report.per_node["fc"] == 50
        assert report.total == 50 + 0

    def test_conv_example_matches_nested_loop_oracle(self):
        nodes = (conv_node("c", "input", 4),
                 NodeSpec("fl", K.FLATTEN, {}, ("c",)),
                 NodeSpec("fc", K.FC, {"out_features": 2}, ("fl",)),
                 NodeSpec("sm", K.SOFTMAX, {}, ("fc",)))
        spec = ArchitectureSpec("c8", "test", nodes, (8, 8, 3), 2)
        report = compute_madd(spec)

        # oracle: walk the convolution loop nest, counting one multiply per
        # kernel tap (padded taps still multiply)
        count = 0
        for _oh in range(8):
            for _ow in range(8):
                for _co in range(4):
                    for _kh in range(3):
                        for _kw in range(3):
                            for _ci in range(3):
                                count += 1
        assert count == 8 * 8 * 4 * 3 * 3 * 3 == 6912
        assert report.per_node["c"] == count

    def test_pure_activation_chain_is_zero(self):
        nodes = (NodeSpec("r", K.RELU, {}, ("input",)),
                 NodeSpec("p", K.MAXPOOL, {"kernel": [2, 2], "stride": 2},
                          ("r",)))
        spec = ArchitectureSpec("act", "test", nodes, (4, 4, 2), 8)
        assert compute_madd(spec).total == 0

    def test_total_invariant_under_node_list_reordering(self):
        spec = builtin_spec("mini-resnet-4", SHAPE, 4)
        shuffled = list(spec.nodes)
        rng = np.random.default_rng(0)
        rng.shuffle(shuffled)
        reordered = ArchitectureSpec(spec.id, spec.family, tuple(shuffled),
                                     spec.input_shape, spec.class_count)
        assert compute_madd(reordered).total == compute_madd(spec).total
        assert compute_madd(reordered).per_node == compute_madd(spec).per_node

    def test_conv_counts_match_bruteforce_on_random_shapes(self):
        rng = np.random.default_rng(7)
        for _ in range(6):
            h = int(rng.integers(4, 16))
            w = int(rng.integers(4, 16))
            cin = int(rng.integers(1, 8))
            cout = int(rng.integers(1, 8))
            kern = int(rng.integers(1, min(4, h, w) + 1))
            stride = int(rng.integers(1, 3))
            nodes = (conv_node("c", "input", cout, kernel=kern, stride=stride,
                               padding="valid"),
                     NodeSpec("fl", K.FLATTEN, {}, ("c",)),
                     NodeSpec("fc", K.FC, {"out_features": 2}, ("fl",)),
                     NodeSpec("sm", K.SOFTMAX, {}, ("fc",)))
            spec = ArchitectureSpec("r", "test", nodes, (h, w, cin), 2)
            oh = (h - kern) // stride + 1
            ow = (w - kern) // stride + 1
            brute = sum(1 for _ in range(oh) for _ in range(ow)
                        for _ in range(cout) for _ in range(kern)
                        for _ in range(kern) for _ in range(cin))
            assert compute_madd(spec).per_node["c"] == brute

    def test_madd_total_is_per_node_sum(self):
        for arch_id in ("mini-vgg-6", "mini-dense-4", "mini-pyramid-5"):
            report = compute_madd(builtin_spec(arch_id, SHAPE, 4))
            assert report.total == sum(report.per_node.values())


class TestOperatorSequence:
    def test_three_node_chain(self):
        nodes = (conv_node("c", "input", 2),
                 NodeSpec("r", K.RELU, {}, ("c",)),
                 NodeSpec("f", K.FC, {"out_features": 3}, ("r",)),
                 NodeSpec("sm", K.SOFTMAX, {}, ("f",)))
        spec = ArchitectureSpec("chain", "test", nodes, (4, 4, 1), 3)
        assert operator_sequence(spec)[:3] == [K.CONV, K.RELU, K.FC]

    def test_diamond_branches_precede_join(self):
        nodes = (conv_node("l", "input", 2),
                 conv_node("r", "input", 2),
                 NodeSpec("join", K.ADD, {}, ("l", "r")),
                 NodeSpec("fc", K.FC, {"out_features": 2}, ("join",)),
                 NodeSpec("sm", K.SOFTMAX, {}, ("fc",)))
        spec = ArchitectureSpec("diamond", "test", nodes, (4, 4, 1), 2)
        seq = operator_sequence(spec)
        assert seq.index(K.ADD) > max(i for i, k in enumerate(seq)
                                      if k is K.CONV)

    def test_length_equals_node_count(self):
        for arch_id in BUILTIN_ARCHITECTURES:
            spec = builtin_spec(arch_id, SHAPE, 4)
            assert len(operator_sequence(spec)) == len(spec.nodes)

    def test_seven_kind_specs_contain_no_gelu(self):
        for arch_id in BUILTIN_ARCHITECTURES:
            if "gelu" in arch_id:
                continue
            assert K.GELU not in operator_sequence(builtin_spec(arch_id, SHAPE, 4))


class TestTransferLearn:
    def test_zero_epochs_replaces_only_head(self):
        data = make_blobs(classes=4, per_class=30, shape=(4, 4, 1), seed=3)
        base = trained_model("mini-mlp-2", data, epochs=2, seed=1)
        adapted = transfer_learn(base, data.inputs, data.labels, 4,
                                 TrainConfig(epochs=0, seed=9))
        assert np.array_equal(adapted.weights["fc1"]["weight"],
                              base.weights["fc1"]["weight"])
        assert not np.array_equal(adapted.weights["head"]["weight"],
                                  base.weights["head"]["weight"])
        assert adapted.spec.class_count == 4

    def test_adapts_to_disjoint_task(self):
        source = make_blobs(classes=4, per_class=150, shape=(4, 4, 1),
                            overlap=0.0, seed=21)
        target = make_blobs(classes=2, per_class=150, shape=(4, 4, 1),
                            overlap=0.0, seed=22)
        base = trained_model("mini-mlp-2", source, epochs=12, seed=2)
        adapted = transfer_learn(base, target.inputs, target.labels, 2,
                                 TrainConfig(epochs=20, seed=5))
        acc = np.mean(adapted.predict(target.inputs).argmax(1) == target.labels)
        assert acc >= 0.9
        # base untouched
        assert base.output_width == 4

    def test_source_task_regresses_after_adaptation(self):
        source = make_blobs(classes=4, per_class=150, shape=(4, 4, 1),
                            overlap=0.2, seed=31)
        other = make_blobs(classes=4, per_class=150, shape=(4, 4, 1),
                           overlap=0.2, seed=32)
        base = trained_model("mini-mlp-2", source, epochs=15, seed=3)
        base_acc = np.mean(base.predict(source.inputs).argmax(1) == source.labels)
        adapted = transfer_learn(base, other.inputs, other.labels, 4,
                                 TrainConfig(epochs=20, seed=6))
        adapted_acc = np.mean(adapted.predict(source.inputs).argmax(1)
                              == source.labels)
        assert adapted_acc <= base_acc

    def test_label_out_of_range_rejected(self):
        data = make_blobs(classes=4, per_class=20, shape=(4, 4, 1), seed=4)
        base = trained_model("mini-mlp-2", data, epochs=1, seed=1)
        with pytest.raises(ValueError, match="outside"):
            transfer_learn(base, data.inputs, data.labels, 2,
                           TrainConfig(epochs=1, seed=0))


class TestCheckpoints:
    def test_round_trip_bit_identical(self, tmp_path):
        data = make_blobs(classes=3, per_class=30, shape=(4, 4, 1), seed=5)
        model = trained_model("mini-resnet-4", data, epochs=2, seed=7)
        ref = ModelRef("mini-resnet-4", data.spec.id, None, "t1")
        save_checkpoint(model, ref, tmp_path)
        loaded = load_checkpoint(ref, tmp_path)
        assert np.array_equal(loaded.state_vector(), model.state_vector())
        assert loaded.meta["epochs_trained"] == model.meta["epochs_trained"]
        assert loaded.spec.to_dict() == model.spec.to_dict()

    def test_truncated_params_is_corruption(self, tmp_path):
        data = make_blobs(classes=3, per_class=20, shape=(4, 4, 1), seed=6)
        model = trained_model("mini-mlp-2", data, epochs=1, seed=7)
        ref = ModelRef("mini-mlp-2", data.spec.id, None, "t1")
        save_checkpoint(model, ref, tmp_path)
        params = checkpoint_path(tmp_path, ref) / "params.bin"
        params.write_bytes(params.read_bytes()[:-16])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(ref, tmp_path)

    def test_missing_checkpoint_errors(self, tmp_path):
        with pytest.raises(CheckpointError, match="no checkpoint"):
            load_checkpoint(ModelRef("mini-mlp-2", "nope", None, "x"), tmp_path)

    def test_two_tags_coexist(self, tmp_path):
        data = make_blobs(classes=3, per_class=20, shape=(4, 4, 1), seed=8)
        m1 = trained_model("mini-mlp-2", data, epochs=1, seed=1)
        m2 = trained_model("mini-mlp-2", data, epochs=2, seed=2)
        r1 = ModelRef("mini-mlp-2", data.spec.id, None, "early")
        r2 = ModelRef("mini-mlp-2", data.spec.id, None, "late")
        save_checkpoint(m1, r1, tmp_path)
        save_checkpoint(m2, r2, tmp_path)
        assert np.array_equal(load_checkpoint(r1, tmp_path).state_vector(),
                              m1.state_vector())
        assert np.array_equal(load_checkpoint(r2, tmp_path).state_vector(),
                              m2.state_vector())
