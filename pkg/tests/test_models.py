"""Dual-head network contracts: shapes, determinism, parameter counting,
checkpoint round trips."""

import hashlib

import numpy as np
import pytest

from mtdistill.errors import ConfigError, ContractError, ShapeError
from mtdistill.models import (
    MTLNet,
    MTLNetConfig,
    SingleHeadNet,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from mtdistill.training import seeded_rng


DEFAULT = MTLNetConfig(num_classes_task1=12, num_classes_task2=3)


def _param_hash(model):
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


class TestForwardShapes:
    def test_default_config_logit_shapes(self):
        model = MTLNet(DEFAULT, seeded_rng(0, 0))
        x = np.random.default_rng(0).standard_normal((4, 1, 3, 100)).astype(np.float32)
        out = model.forward(x)
        assert out.z1.shape == (4, 12)
        assert out.z2.shape == (4, 3)

    def test_eval_mode_bitwise_deterministic(self):
        model = MTLNet(DEFAULT, seeded_rng(1, 0))
        x = np.random.default_rng(1).standard_normal((3, 1, 3, 100)).astype(np.float32)
        a, b = model.forward(x), model.forward(x)
        assert a.z1.data.tobytes() == b.z1.data.tobytes()
        assert a.z2.data.tobytes() == b.z2.data.tobytes()

    def test_zero_input_zero_heads_gives_zero_logits(self):
        model = MTLNet(DEFAULT, seeded_rng(2, 0))
        model.head1.weight.data[...] = 0.0
        model.head1.bias.data[...] = 0.0
        model.head2.weight.data[...] = 0.0
        model.head2.bias.data[...] = 0.0
        out = model.forward(np.zeros((2, 1, 3, 100), np.float32))
        assert np.array_equal(out.z1.data, np.zeros((2, 12), np.float32))
        assert np.array_equal(out.z2.data, np.zeros((2, 3), np.float32))

    def test_input_shape_validation(self):
        model = MTLNet(DEFAULT, seeded_rng(3, 0))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((2, 1, 3, 64), np.float32))

    def test_batch_permutation_equivariance_in_eval(self):
        model = MTLNet(DEFAULT, seeded_rng(4, 0))
        x = np.random.default_rng(4).standard_normal((6, 1, 3, 100)).astype(np.float32)
        perm = np.random.default_rng(5).permutation(6)
        direct = model.forward(x[perm]).z1.data
        permuted = model.forward(x).z1.data[perm]
        assert np.allclose(direct, permuted, atol=1e-5)

    def test_head_independence(self):
        model = MTLNet(DEFAULT, seeded_rng(5, 0))
        x = np.random.default_rng(6).standard_normal((2, 1, 3, 100)).astype(np.float32)
        z1_before = model.forward(x).z1.data.copy()
        model.head2.weight.data[...] = 17.0
        assert np.array_equal(model.forward(x).z1.data, z1_before)


class TestFeatures:
    def test_feature_width_matches_config(self):
        model = MTLNet(DEFAULT, seeded_rng(6, 0))
        x = np.random.default_rng(7).standard_normal((5, 1, 3, 100)).astype(np.float32)
        assert model.features(x).shape == (5, DEFAULT.hidden)

    def test_eval_features_deterministic(self):
        model = MTLNet(DEFAULT, seeded_rng(7, 0))
        x = np.random.default_rng(8).standard_normal((2, 1, 3, 100)).astype(np.float32)
        assert model.features(x).data.tobytes() == model.features(x).data.tobytes()

    def test_train_forward_mutates_only_batchnorm_stats(self):
        model = MTLNet(DEFAULT, seeded_rng(8, 0))
        x = np.random.default_rng(9).standard_normal((4, 1, 3, 100)).astype(np.float32)
        before = _param_hash(model)
        stats_before = [b.copy() for _, b in model.named_buffers()]
        model.forward(x, train=True, rng=np.random.default_rng(0))
        assert _param_hash(model) == before
        changed = any(
            not np.array_equal(b, prev) for (_, b), prev in zip(model.named_buffers(), stats_before)
        )
        assert changed


class TestParamCount:
    def test_single_dense_layer(self):
        from mtdistill.layers import Linear

        layer = Linear(10, 5, rng=seeded_rng(9, 0))
        assert sum(p.size for _, p in layer.parameters()) == 55

    def test_dual_minus_single_equals_second_head(self):
        dual = param_count(DEFAULT, "dual")
        single = param_count(DEFAULT, "single", task_id=1)
        head2 = DEFAULT.hidden * DEFAULT.num_classes_task2 + DEFAULT.num_classes_task2
        assert dual - single == head2

    def test_default_config_hand_sum(self):
        # layer-by-layer arithmetic, independent of the model classes
        c = DEFAULT
        total = 0
        total += c.proj_channels * 1 * c.in_rows * 1 + c.proj_channels  # projection conv
        total += 2 * c.proj_channels  # its batch norm affine
        in_ch = c.proj_channels
        time = c.window_len
        for out_ch, k, pool in c.trunk:
            total += out_ch * in_ch * 1 * k + out_ch
            total += 2 * out_ch
            in_ch = out_ch
            time //= pool
        feat = in_ch * time
        total += feat * c.hidden + c.hidden
        total += c.hidden * c.num_classes_task1 + c.num_classes_task1
        total += c.hidden * c.num_classes_task2 + c.num_classes_task2
        assert param_count(c, "dual") == total

    def test_bad_heads_argument(self):
        with pytest.raises(ConfigError):
            param_count(DEFAULT, "triple")


class TestConfigValidation:
    def test_class_counts(self):
        with pytest.raises(ConfigError):
            MTLNetConfig(num_classes_task1=1, num_classes_task2=3)

    def test_pooling_collapse(self):
        with pytest.raises(ConfigError, match="collapses"):
            MTLNetConfig(num_classes_task1=3, num_classes_task2=3, window_len=4,
                         trunk=((8, 3, 2), (8, 3, 2), (8, 3, 2)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            MTLNetConfig(num_classes_task1=3, num_classes_task2=3, trunk=((8, 4, 2),))

    def test_single_head_task_id(self):
        with pytest.raises(ConfigError):
            SingleHeadNet(DEFAULT, 3, seeded_rng(0, 0))


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path, small_config):
        model = MTLNet(small_config, seeded_rng(10, 0))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, role="student")
        loaded, role = load_checkpoint(path)
        assert role == "student"
        for (name, p), (name2, q) in zip(model.named_parameters(), loaded.named_parameters()):
            assert name == name2
            assert p.data.tobytes() == q.data.tobytes()
        for (_, b), (_, c) in zip(model.named_buffers(), loaded.named_buffers()):
            assert b.tobytes() == c.tobytes()

    def test_teacher_role_header(self, tmp_path, small_config):
        model = MTLNet(small_config, seeded_rng(11, 0))
        path = tmp_path / "teacher.ckpt"
        save_checkpoint(model, path, role="teacher")
        _, role = load_checkpoint(path)
        assert role == "teacher"

    def test_single_head_round_trip(self, tmp_path, small_config):
        model = SingleHeadNet(small_config, 2, seeded_rng(12, 0))
        path = tmp_path / "single.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        assert isinstance(loaded, SingleHeadNet)
        assert loaded.task_id == 2

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ContractError, match="magic"):
            load_checkpoint(path)

    def test_payload_is_little_endian_float32(self, tmp_path, small_config):
        model = MTLNet(small_config, seeded_rng(13, 0))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        first = model.state_dict()[model.named_parameters()[0][0]]
        payload = np.frombuffer(blob, dtype="<f4", count=first.size,
                                offset=len(blob) - sum(a.size for a in model.state_dict().values()) * 4)
        assert np.allclose(payload.reshape(first.shape), first)

    def test_state_dict_shape_mismatch(self, small_config):
        model = MTLNet(small_config, seeded_rng(14, 0))
        state = model.state_dict()
        state["fc.bias"] = np.zeros(7, np.float32)
        with pytest.raises(ContractError, match="shape mismatch"):
            model.load_state_dict(state)

    def test_clone_is_deep(self, small_config):
        model = MTLNet(small_config, seeded_rng(15, 0))
        twin = model.clone()
        twin.head1.weight.data[...] = -1.0
        assert not np.array_equal(model.head1.weight.data, twin.head1.weight.data)
