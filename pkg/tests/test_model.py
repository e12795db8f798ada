import numpy as np
import pytest

import nightadapt.model as M
import nightadapt.tensor as T
from nightadapt.io import FormatError
from nightadapt.taxonomy import default_taxonomy
from nightadapt.tensor import Tape, Tensor

TAX = default_taxonomy()


class TestInit:
    def test_same_seed_identical(self):
        a = M.init(5, TAX)
        b = M.init(5, TAX)
        for name in a.names():
            np.testing.assert_array_equal(a.tensors[name].numpy(), b.tensors[name].numpy())

    def test_different_seeds_differ(self):
        a = M.init(5, TAX)
        b = M.init(6, TAX)
        assert any(
            not np.array_equal(a.tensors[n].numpy(), b.tensors[n].numpy()) for n in a.names()
        )

    def test_teacher_is_exact_copy_at_t0(self):
        student = M.init(1, TAX)
        teacher = M.init_teacher(student)
        assert teacher.names() == student.names()
        for n in student.names():
            np.testing.assert_array_equal(teacher.tensors[n].numpy(), student.tensors[n].numpy())
            assert not teacher.tensors[n].requires_grad

    def test_biases_start_zero(self):
        p = M.init(2, TAX)
        for n, t in p.tensors.items():
            if n.endswith(".bias"):
                assert not t.numpy().any()


class TestForward:
    def test_shape_contract(self):
        p = M.init(0, TAX)
        out = M.forward(p, np.zeros((3, 64, 64), dtype=np.float32))
        assert out.logits.shape == (10, 64, 64)
        assert out.features.shape == (16, 16, 16)

    def test_bit_identical_repeat_calls(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 32, 32)).astype(np.float32)
        p = M.init(3, TAX)
        a = M.forward(p, img)
        b = M.forward(p, img)
        assert a.logits.numpy().tobytes() == b.logits.numpy().tobytes()
        assert a.features.numpy().tobytes() == b.features.numpy().tobytes()

    def test_zero_image_uniform_softmax(self):
        p = M.init(9, TAX)
        out = M.forward(p, np.zeros((3, 32, 32), dtype=np.float32))
        probs = out.probs()
        np.testing.assert_allclose(probs, np.full_like(probs, 0.1), atol=1e-7)

    def test_non_divisible_size_errors(self):
        p = M.init(0, TAX)
        with pytest.raises(ValueError, match="divisible"):
            M.forward(p, np.zeros((3, 30, 32), dtype=np.float32))

    def test_forward_does_not_mutate_params(self):
        p = M.init(4, TAX)
        before = {n: t.numpy().copy() for n, t in p.tensors.items()}
        M.forward(p, np.random.default_rng(1).random((3, 32, 32)).astype(np.float32))
        for n in p.names():
            np.testing.assert_array_equal(p.tensors[n].numpy(), before[n])

    def test_gradients_reach_all_parameters(self):
        p = M.init(11, TAX)
        img = np.random.default_rng(2).random((3, 16, 16)).astype(np.float32)
        with Tape() as tape:
            out = M.forward(p, img)
            loss = T.mean(T.mul(out.logits, out.logits))
        tape.backward(loss)
        for n, t in p.tensors.items():
            assert t.grad is not None, n


class TestEmaUpdate:
    def test_direct_substitution(self):
        student = M.init(0, TAX)
        teacher = M.init_teacher(student)
        teacher.tensors["cls.bias"] = Tensor(np.ones(10, dtype=np.float32))
        student.tensors["cls.bias"] = Tensor(np.zeros(10, dtype=np.float32), requires_grad=True)
        out = M.ema_update(teacher, student, 0.999)
        np.testing.assert_allclose(out.tensors["cls.bias"].numpy(), np.full(10, 0.999), rtol=1e-6)

    def test_lambda_zero_copies_student(self):
        student = M.init(1, TAX)
        teacher = M.init(2, TAX).copy(trainable=False)
        out = M.ema_update(teacher, student, 0.0)
        for n in student.names():
            np.testing.assert_array_equal(out.tensors[n].numpy(), student.tensors[n].numpy())

    def test_geometric_decay_closed_form(self):
        student = M.init(3, TAX)
        teacher = M.init(4, TAX).copy(trainable=False)
        lam = 0.999
        diff0 = np.sqrt(
            sum(
                float(((teacher.tensors[n].numpy() - student.tensors[n].numpy()) ** 2).sum())
                for n in student.names()
            )
        )
        t = teacher
        steps = 50
        for _ in range(steps):
            t = M.ema_update(t, student, lam)
        diff_t = np.sqrt(
            sum(
                float(
                    ((t.tensors[n].numpy().astype(np.float64) - student.tensors[n].numpy()) ** 2).sum()
                )
                for n in student.names()
            )
        )
        expected = lam**steps * diff0
        assert abs(diff_t - expected) / expected <= 1e-5

    def test_monotone_contraction_toward_frozen_student(self):
        student = M.init(5, TAX)
        t = M.init(6, TAX).copy(trainable=False)
        prev = None
        for _ in range(20):
            t = M.ema_update(t, student, 0.9)
            d = sum(
                float(((t.tensors[n].numpy() - student.tensors[n].numpy()) ** 2).sum())
                for n in student.names()
            )
            if prev is not None:
                assert d < prev
            prev = d

    def test_name_mismatch_errors(self):
        student = M.init(0, TAX)
        teacher = M.init_teacher(student)
        del teacher.tensors["cls.bias"]
        with pytest.raises(ValueError, match="name sets"):
            M.ema_update(teacher, student, 0.5)

    def test_lambda_out_of_range(self):
        student = M.init(0, TAX)
        with pytest.raises(ValueError):
            M.ema_update(M.init_teacher(student), student, 1.5)

    def test_no_gradients_flow(self):
        student = M.init(7, TAX)
        out = M.ema_update(M.init_teacher(student), student, 0.5)
        assert all(not t.requires_grad for t in out.tensors.values())


class TestCheckpoint:
    def test_roundtrip_identical(self, tmp_path):
        p = M.init(21, TAX)
        path = tmp_path / "model.nckpt"
        M.save_checkpoint(p, path)
        q = M.load_checkpoint(path)
        assert q.seed == 21
        assert q.channels == p.channels and q.num_classes == p.num_classes
        for n in p.names():
            assert q.tensors[n].numpy().tobytes() == p.tensors[n].numpy().tobytes()

    def test_truncated_file_errors_no_partial_model(self, tmp_path):
        p = M.init(22, TAX)
        path = tmp_path / "model.nckpt"
        M.save_checkpoint(p, path)
        raw = path.read_bytes()
        bad = tmp_path / "trunc.nckpt"
        bad.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError, match="offset"):
            M.load_checkpoint(bad)

    def test_checkpoint_size_sane(self, tmp_path):
        p = M.init(23, TAX)
        path = tmp_path / "model.nckpt"
        M.save_checkpoint(p, path)
        size = path.stat().st_size
        assert 10_000 < size < 5_000_000  # tens of kilobytes for the default net
