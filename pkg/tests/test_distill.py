"""Distillation: soft labels, KD loss, student models, and training."""

import math

import numpy as np
import pytest

from graphkd.autodiff import (OptimizerState, Tape, Tensor, backward, cross_entropy,
                              optimizer_step)
from graphkd.distill import (DistillConfig, StudentParams, combined_loss,
                             compute_soft_labels, init_student, kd_loss,
                             load_predictor, load_student, save_student,
                             student_forward, student_logits, teacher_soft_labels,
                             train_student)
from graphkd.errors import ConfigError, DataError, ShapeError
from graphkd.graphs import CONTENT_KINDS, Node, Subgraph, normalize_adjacency
from graphkd.serialization import read_soft_labels, write_soft_labels
from graphkd.teacher import (TeacherConfig, TeacherParams, init_teacher, save_teacher,
                             teacher_logits, train_teacher)
from graphkd.verification import student_loss_error


def _subgraphs(count, dim=8, classes=3, seed=0, split="train"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        nodes = [Node(kind, kind, rng.normal(0, 1, dim)) for kind in CONTENT_KINDS]
        nodes.append(Node("commonsense", "t0", rng.normal(0, 1, dim)))
        n = len(nodes)
        upper = np.triu(rng.uniform(0, 1, (n, n)), 1)
        out.append(Subgraph(sample_id=f"s{i}", split=split, group=f"g{i % 3}",
                            label=int(rng.integers(classes)), nodes=nodes,
                            adjacency=upper + upper.T))
    return out


def _teacher(dim=8, classes=3, seed=2, bias_row=None):
    config = TeacherConfig(dim=dim, num_classes=classes, hidden=4, head_hidden=4,
                           seed=seed)
    params = init_teacher(config, np.random.Generator(np.random.PCG64(seed)))
    if bias_row is not None:
        # Zero the network so logits equal the output bias exactly.
        params = TeacherParams(
            w0=np.zeros_like(params.w0), w1=np.zeros_like(params.w1),
            head_w1=np.zeros_like(params.head_w1), head_b1=np.zeros_like(params.head_b1),
            head_w2=np.zeros_like(params.head_w2),
            head_b2=np.asarray(bias_row, dtype=np.float64).reshape(1, -1))
    return params


def _np_softmax(row):
    e = np.exp(row - row.max())
    return e / e.sum()


class TestSoftLabels:
    def test_single_teacher_is_softmax(self):
        sg = _subgraphs(1)[0]
        teacher = _teacher()
        got = teacher_soft_labels([teacher], sg)
        want = _np_softmax(teacher_logits(teacher, sg))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_opposed_teachers_average_to_half(self):
        sg = _subgraphs(1, classes=2)[0]
        t1 = _teacher(classes=2, bias_row=[4.0, -1.0])
        t2 = _teacher(classes=2, bias_row=[-1.0, 4.0])
        got = teacher_soft_labels([t1, t2], sg)
        np.testing.assert_allclose(got, [0.5, 0.5], atol=1e-12)

    def test_three_teacher_mean_matches_bruteforce(self):
        sg = _subgraphs(1)[0]
        teachers = [_teacher(seed=s) for s in (3, 4, 5)]
        got = teacher_soft_labels(teachers, sg)
        rows = [_np_softmax(teacher_logits(t, sg)) for t in teachers]
        want = (rows[0] + rows[1] + rows[2]) / 3.0
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rows_sum_to_one_for_all_ensemble_sizes(self):
        sg = _subgraphs(1)[0]
        for n in (1, 2, 3):
            row = teacher_soft_labels([_teacher(seed=s) for s in range(n)], sg)
            assert abs(row.sum() - 1.0) <= 1e-9

    def test_temperature_softens(self):
        sg = _subgraphs(1)[0]
        teacher = _teacher()
        sharp = teacher_soft_labels([teacher], sg, temperature=1.0)
        soft = teacher_soft_labels([teacher], sg, temperature=5.0)
        assert soft.max() < sharp.max()

    def test_requires_a_teacher(self):
        with pytest.raises(ConfigError):
            teacher_soft_labels([], _subgraphs(1)[0])

    def test_class_count_mismatch(self):
        sg = _subgraphs(1)[0]
        with pytest.raises(ConfigError):
            teacher_soft_labels([_teacher(classes=3), _teacher(classes=4)], sg)


class TestKdLoss:
    def test_zero_when_distributions_match(self):
        logits = np.array([[0.4, -1.2, 2.0]])
        p = _np_softmax(logits[0])
        loss = kd_loss(p, Tensor(logits))
        assert 0.0 <= loss.item() <= 1e-12

    def test_hand_value_ln2(self):
        loss = kd_loss(np.array([1.0, 0.0]), Tensor([[0.0, 0.0]]))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            c = int(rng.integers(2, 6))
            p = rng.dirichlet(np.ones(c))
            loss = kd_loss(p, Tensor(rng.normal(0, 3, (1, c))))
            assert loss.item() >= 0.0

    def test_zero_teacher_mass_contributes_nothing(self):
        p = np.array([0.5, 0.5, 0.0])
        loss = kd_loss(p, Tensor([[1.0, 1.0, -40.0]]))
        assert math.isfinite(loss.item())

    def test_temperature_scaling_matches_reference(self):
        rng = np.random.default_rng(9)
        p = rng.dirichlet(np.ones(4))
        logits = rng.normal(0, 2, (1, 4))
        tau = 2.5
        student = _np_softmax(logits[0] / tau)
        mask = p > 0
        want = tau * tau * float(np.sum(p[mask] * (np.log(p[mask]) - np.log(student[mask]))))
        got = kd_loss(p, Tensor(logits), temperature=tau)
        assert got.item() == pytest.approx(want, abs=1e-9)

    def test_rejects_unnormalized_teacher_row(self):
        with pytest.raises(DataError):
            kd_loss(np.array([0.7, 0.7]), Tensor([[0.0, 0.0]]))

    def test_rejects_width_mismatch(self):
        with pytest.raises(ShapeError):
            kd_loss(np.array([0.5, 0.5]), Tensor([[0.0, 0.0, 0.0]]))


class TestCombinedLoss:
    def test_weighted_sum(self):
        out = combined_loss(Tensor([[0.5]]), Tensor([[0.25]]), 1.0)
        assert out.item() == pytest.approx(0.75, abs=1e-12)

    def test_zero_weight_passes_supervised_loss_through(self):
        sce = Tensor([[0.5]])
        assert combined_loss(sce, Tensor([[0.25]]), 0.0) is sce

    def test_zero_kd_term(self):
        out = combined_loss(Tensor([[0.5]]), Tensor([[0.0]]), 1.0)
        assert out.item() == pytest.approx(0.5, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            combined_loss(Tensor([[0.5]]), Tensor([[0.25]]), -0.1)


class TestStudentForward:
    def test_mlp_zero_weights(self):
        params = [Tensor(np.zeros((8, 4))), Tensor(np.zeros((1, 4))),
                  Tensor(np.zeros((4, 3))), Tensor(np.zeros((1, 3)))]
        out = student_forward("mlp", params, Tensor(np.ones((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_mlp_hand_fixture(self):
        content = Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
        w1 = np.zeros((8, 2))
        w1[0, 0] = w1[4, 0] = 1.0
        w1[1, 1] = w1[5, 1] = 1.0
        params = [Tensor(w1), Tensor([[0.5, -0.5]]),
                  Tensor([[1.0, -1.0], [1.0, 1.0]]), Tensor([[0.0, 0.5]])]
        out = student_forward("mlp", params, content)
        np.testing.assert_allclose(out.data, [[3.0, -1.5]], atol=1e-12)

    def test_transformer_equal_rows_uniform_attention(self):
        rng = np.random.default_rng(3)
        config = DistillConfig(student="transformer", dim=6, num_classes=3, hidden=4)
        params = init_student(config, rng)
        row = rng.normal(0, 1, 6)
        internals = {}
        student_forward("transformer", [Tensor(a) for a in params.tensors],
                        Tensor(np.tile(row, (4, 1))), internals=internals)
        np.testing.assert_allclose(internals["attention"], np.full((4, 4), 0.25),
                                   atol=1e-12)

    def test_wrong_row_count(self):
        config = DistillConfig(student="mlp", dim=4, num_classes=2)
        params = init_student(config, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            student_forward("mlp", [Tensor(a) for a in params.tensors],
                            Tensor(np.ones((3, 4))))

    def test_transformer_output_width(self):
        config = DistillConfig(student="transformer", dim=5, num_classes=4, hidden=3)
        params = init_student(config, np.random.default_rng(1))
        out = student_forward("transformer", [Tensor(a) for a in params.tensors],
                              Tensor(np.random.default_rng(2).normal(0, 1, (4, 5))))
        assert out.data.shape == (1, 4)

    def test_gradcheck_both_kinds(self):
        assert student_loss_error("mlp", seed=0, eps=1e-5) <= 1e-4
        assert student_loss_error("transformer", seed=0, eps=1e-5) <= 1e-4


class TestTrainStudent:
    def _config(self, **kw):
        base = dict(student="mlp", dim=8, num_classes=3, hidden=4, epochs=2, seed=1)
        base.update(kw)
        return DistillConfig(**base)

    def test_zero_weight_matches_reference_supervised_loop(self):
        train = _subgraphs(12)
        config = self._config(kd_weight=0.0)
        got, _, _ = train_student(train, [], config, [])

        # Independent plain supervised trainer with the same seeding scheme.
        rng = np.random.Generator(np.random.PCG64(config.seed))
        params = init_student(config, rng)
        master = [Tensor(a) for a in params.tensors]
        state = OptimizerState(kind="adam", learning_rate=0.001)
        content = [sg.content_features() for sg in train]
        for _ in range(config.epochs):
            for idx in rng.permutation(len(train)):
                tape = Tape()
                tracked = [tape.watch(p) for p in master]
                logits = student_forward("mlp", tracked, Tensor(content[idx]))
                loss = cross_entropy(logits, train[idx].label)
                table = backward(tape, loss)
                master = optimizer_step(state, master,
                                        [table[t.node] for t in tracked])
        for a, b in zip(got.tensors, master):
            assert (a == b.data).all()

    def test_same_seed_bitwise(self, tmp_path):
        train = _subgraphs(10)
        teacher = _teacher()
        blobs = []
        for name in ("a", "b"):
            params, meta, _ = train_student(train, [], self._config(), [teacher])
            path = tmp_path / f"{name}.ckpt"
            save_student(path, params, meta)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_teacher_parameters_untouched(self):
        train = _subgraphs(8)
        teacher = _teacher()
        before = [a.tobytes() for a in teacher.as_list()]
        train_student(train, [], self._config(), [teacher])
        after = [a.tobytes() for a in teacher.as_list()]
        assert before == after

    def test_kd_needs_teachers(self):
        with pytest.raises(ConfigError):
            train_student(_subgraphs(4), [], self._config(kd_weight=1.0), [])

    def test_empty_train_rejected(self):
        with pytest.raises(ConfigError):
            train_student([], [], self._config(), [])

    def test_val_metrics(self):
        _, _, metrics = train_student(_subgraphs(8), _subgraphs(4, seed=9),
                                      self._config(kd_weight=0.0), [])
        assert all("val_micro_f1" in m for m in metrics)

    def test_transformer_trains(self):
        params, meta, _ = train_student(
            _subgraphs(6), [], self._config(student="transformer"), [_teacher()])
        assert meta["model"] == "student-transformer"
        assert params.kind == "transformer"

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            self._config(student="cnn").validate()
        with pytest.raises(ConfigError):
            self._config(temperature=0.0).validate()
        with pytest.raises(ConfigError):
            self._config(kd_weight=-1.0).validate()


class TestStudentCheckpoint:
    def test_round_trip(self, tmp_path):
        params, meta, _ = train_student(
            _subgraphs(5), [], DistillConfig(student="mlp", dim=8, num_classes=3,
                                             hidden=4, kd_weight=0.0, epochs=1,
                                             seed=0), [])
        path = tmp_path / "s.ckpt"
        save_student(path, params, meta)
        loaded, loaded_meta = load_student(path)
        assert loaded.kind == "mlp"
        for a, b in zip(loaded.tensors, params.tensors):
            assert (a == b).all()
        # write -> read -> write gives identical bytes
        path2 = tmp_path / "s2.ckpt"
        save_student(path2, loaded, loaded_meta)
        assert path.read_bytes() == path2.read_bytes()

    def test_load_rejects_teacher_checkpoint(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_teacher(path, _teacher(), {"model": "gcn-teacher", "config": {}})
        with pytest.raises(ConfigError):
            load_student(path)

    def test_predictor_dispatch(self, tmp_path):
        sg = _subgraphs(1)[0]
        t_path = tmp_path / "t.ckpt"
        save_teacher(t_path, _teacher(), {"model": "gcn-teacher", "config": {}})
        predict, meta = load_predictor(t_path)
        assert meta["model"] == "gcn-teacher"
        assert predict(sg).shape == (3,)

        params, smeta, _ = train_student(
            _subgraphs(5), [], DistillConfig(student="mlp", dim=8, num_classes=3,
                                             hidden=4, kd_weight=0.0, epochs=1,
                                             seed=0), [])
        s_path = tmp_path / "s.ckpt"
        save_student(s_path, params, smeta)
        predict, meta = load_predictor(s_path)
        assert meta["model"] == "student-mlp"
        np.testing.assert_array_equal(predict(sg), student_logits(params, sg))


class TestSoftLabelCache:
    def test_round_trip(self, tmp_path):
        graphs = _subgraphs(5)
        entries = compute_soft_labels([_teacher()], graphs)
        path = tmp_path / "c.gslb"
        write_soft_labels(path, entries, 3)
        loaded, classes = read_soft_labels(path)
        assert classes == 3
        assert [e[0] for e in loaded] == [e[0] for e in entries]
        for (_, got), (_, want) in zip(loaded, entries):
            assert (got == want).all()

    def test_write_read_write_identical(self, tmp_path):
        entries = compute_soft_labels([_teacher()], _subgraphs(3))
        p1, p2 = tmp_path / "a.gslb", tmp_path / "b.gslb"
        write_soft_labels(p1, entries, 3)
        loaded, classes = read_soft_labels(p1)
        write_soft_labels(p2, loaded, classes)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "bad.gslb"
        path.write_bytes(b"XXXX" + bytes(16))
        from graphkd.errors import FormatError
        with pytest.raises(FormatError, match="magic"):
            read_soft_labels(path)

    def test_truncation_reports_offset(self, tmp_path):
        entries = compute_soft_labels([_teacher()], _subgraphs(2))
        path = tmp_path / "t.gslb"
        write_soft_labels(path, entries, 3)
        path.write_bytes(path.read_bytes()[:-4])
        from graphkd.errors import FormatError
        with pytest.raises(FormatError, match="byte offset"):
            read_soft_labels(path)

    def test_cached_rows_match_direct_computation(self):
        graphs = _subgraphs(4)
        teacher = _teacher()
        entries = compute_soft_labels([teacher], graphs)
        for sg, (sample_id, row) in zip(graphs, entries):
            assert sample_id == sg.sample_id
            direct = teacher_soft_labels([teacher], sg,
                                         a_hat=normalize_adjacency(sg.adjacency))
            assert (row == direct).all()
