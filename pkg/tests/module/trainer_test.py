import json

import numpy as np
import pytest

from distillkit.augmentModule import AugmentConfig
from distillkit.config import LossKind
from distillkit.featuresModule import FeatureArchive, FeatureMatrix
from distillkit.lossesModule import ContrastiveConfig, EmbeddingBatch, mse_loss
from distillkit.statsModule import PipelineStats
from distillkit.studentNet import StudentConfig, StudentNet
from distillkit.teacherStore import TeacherStore
from distillkit.trainerModule import (DistillationHead, SgdMomentum, TrainConfig, check_labels, clip_gradient,
                                      dense_labels, epoch_order, finetune_supervised, lr_schedule, read_labels,
                                      train_distill)
from utils.exceptions import ConfigError, DataError, UsageError

EMBEDDING = 16
STUDENT = StudentConfig(conv_layers=((3, 1, 16), (1, 1, 16)), embedding_dim=EMBEDDING, seed=1)
SHORT_CROPS = AugmentConfig(crop_min_s=0.5, crop_max_s=0.8, max_time_mask_frames=5)


def _corpus(n_utterances=12, n_frames=100, seed=0):
    rng = np.random.default_rng(seed)
    corpus = FeatureArchive()
    teacher = TeacherStore(EMBEDDING)
    for i in range(n_utterances):
        utt_id = f"utt{i:03d}"
        corpus.add(utt_id, FeatureMatrix(rng.standard_normal((n_frames, 80)).astype(np.float32)))
        teacher.add(utt_id, rng.standard_normal(EMBEDDING).astype(np.float32))
    return corpus, teacher


def _config(**overrides):
    values = dict(loss=LossKind.CONTRASTIVE, batch_size=4, epochs=2, workers=1, augment=SHORT_CROPS)
    values.update(overrides)
    return TrainConfig(**values)


def test_lr_schedule():
    cfg = TrainConfig(epochs=15, lr_start=0.1, lr_end=0.01)
    rates = [lr_schedule(cfg, e) for e in range(15)]
    print(f"Learning rates: {rates}")
    assert rates[0] == 0.1
    assert rates[-1] == 0.01
    assert rates[7] == pytest.approx(0.0316228, abs=1e-7)
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert lr_schedule(TrainConfig(epochs=1), 0) == 0.1
    with pytest.raises(UsageError):
        lr_schedule(cfg, 15)
    with pytest.raises(UsageError):
        lr_schedule(cfg, -1)


def test_train_config_validation():
    assert TrainConfig(loss="MSE").loss == LossKind.MSE
    with pytest.raises(ConfigError) as error:
        TrainConfig(loss="bogus")
    assert "contrastive" in error.value.message
    for bad in (dict(batch_size=0), dict(epochs=0), dict(lr_start=0.01, lr_end=0.1), dict(momentum=1.0),
                dict(epoch_subset_fraction=0.0), dict(epoch_subset_fraction=1.5), dict(max_grad_norm=-1.0),
                dict(workers=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_sgd_momentum_step():
    params = np.array([1.0, 2.0])
    grad = np.array([0.5, -1.0])
    optimizer = SgdMomentum(0.9)
    optimizer.step(params, grad, 0.1)
    assert np.allclose(params, [0.95, 2.1], atol=1e-15)
    optimizer.step(params, grad, 0.1)
    assert np.allclose(params, [0.855, 2.29], atol=1e-15)


def test_clip_gradient():
    grad = np.array([3.0, 4.0])
    assert clip_gradient(grad, 1.0) == 5.0
    assert np.allclose(grad, [0.6, 0.8])
    grad = np.array([3.0, 4.0])
    clip_gradient(grad, 0.0)
    assert np.array_equal(grad, [3.0, 4.0])
    clip_gradient(grad, 10.0)
    assert np.array_equal(grad, [3.0, 4.0])


def test_epoch_order():
    cfg = TrainConfig(epoch_subset_fraction=0.5, seed=3)
    order = epoch_order(10, cfg, 0)
    assert len(order) == 5 and len(set(order.tolist())) == 5
    assert np.array_equal(order, epoch_order(10, cfg, 0))
    assert sorted(epoch_order(10, TrainConfig(seed=3), 1).tolist()) == list(range(10))


def test_zero_learning_rate_leaves_parameters_unchanged():
    corpus, teacher = _corpus()
    net = StudentNet(STUDENT)
    before = net.params.tobytes()
    report = train_distill(corpus, teacher, net, _config(lr_start=0.0, lr_end=0.0))
    assert net.params.tobytes() == before
    assert len(report.epochs) == 2
    assert all(record.lr == 0.0 for record in report.epochs)


@pytest.mark.parametrize("loss", ["mse", "cos", "contrastive"])
def test_training_is_deterministic_across_worker_counts(loss, tmp_path):
    corpus, teacher = _corpus()
    outputs = []
    for workers in (1, 3):
        out_dir = tmp_path / f"{loss}-{workers}"
        net = StudentNet(STUDENT)
        report = train_distill(corpus, teacher, net, _config(loss=loss, workers=workers), out_dir=out_dir)
        outputs.append(((out_dir / "report.jsonl").read_bytes(), (out_dir / "last.net1").read_bytes(),
                        report.mean_losses))
    assert outputs[0][0] == outputs[1][0], "report.jsonl differs between worker counts"
    assert outputs[0][1] == outputs[1][1], "checkpoint differs between worker counts"
    assert all(np.isfinite(outputs[0][2]))


def test_report_files(tmp_path):
    corpus, teacher = _corpus()
    report = train_distill(corpus, teacher, StudentNet(STUDENT), _config(epochs=3), out_dir=tmp_path)
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    assert len(lines) == 4
    header = json.loads(lines[0])
    assert header['record'] == 'header'
    assert header['loss'] == 'contrastive'
    assert header['batch_reduction'] == 'mean'
    assert header['param_count'] == StudentNet(STUDENT).param_count
    epochs = [json.loads(line) for line in lines[1:]]
    assert [record['epoch'] for record in epochs] == [0, 1, 2]
    assert all('wall_time_s' not in record for record in epochs)
    assert header['mse_per_element'] is True
    timing = [json.loads(line) for line in (tmp_path / "timing.jsonl").read_text().splitlines()]
    assert len(timing) == 3
    assert all(record['cpu_time_s'] >= 0.0 and record['wall_time_s'] > 0.0 for record in timing)
    assert report.resources['cpu_time_s'] >= 0.0
    assert report.resources['peak_rss_mb'] >= report.resources['rss_mb'] > 0.0
    assert (tmp_path / "last.net1").exists() and (tmp_path / "best.net1").exists()
    assert report.checkpoint_path == str(tmp_path / "last.net1")


def test_missing_teacher_embeddings_are_skipped_and_counted():
    corpus, teacher = _corpus(n_utterances=10)
    missing = ("utt002", "utt007")
    partial = TeacherStore(EMBEDDING, [(utt_id, v) for utt_id, v in teacher.items() if utt_id not in missing])
    stats = PipelineStats()
    report = train_distill(corpus, partial, StudentNet(STUDENT), _config(epochs=2), stats=stats)
    for record in report.epochs:
        assert record.processed == 8
        assert record.skipped == 2
    assert stats.skipped_missing_teacher == 4
    assert report.stats['processed'] == 16


def test_all_skipped_epoch_fails():
    corpus, _ = _corpus(n_utterances=5)
    with pytest.raises(DataError):
        train_distill(corpus, TeacherStore(EMBEDDING, {"other": np.ones(EMBEDDING)}), StudentNet(STUDENT), _config())


def test_distill_errors():
    corpus, teacher = _corpus(n_utterances=4)
    with pytest.raises(DataError):
        train_distill(FeatureArchive(), teacher, StudentNet(STUDENT), _config())
    with pytest.raises(ConfigError):
        train_distill(corpus, teacher, StudentNet(STUDENT), _config(loss="aam"))
    with pytest.raises(ConfigError):
        train_distill(corpus, TeacherStore(8), StudentNet(STUDENT), _config())
    with pytest.raises(ConfigError):
        finetune_supervised(corpus, {utt_id: 0 for utt_id in corpus.ids()}, StudentNet(STUDENT), _config())


def test_single_class_finetune_changes_nothing():
    corpus, _ = _corpus(n_utterances=6)
    net = StudentNet(STUDENT)
    before = net.params.tobytes()
    report = finetune_supervised(corpus, {utt_id: 0 for utt_id in corpus.ids()}, net, _config(loss="aam"))
    assert report.mean_losses == [0.0, 0.0]
    assert net.params.tobytes() == before
    assert report.class_weights.num_classes == 1


def test_finetune_updates_and_renormalizes_class_weights():
    corpus, _ = _corpus(n_utterances=8)
    labels = {utt_id: i % 2 for i, utt_id in enumerate(corpus.ids())}
    net = StudentNet(STUDENT)
    before = net.params.copy()
    report = finetune_supervised(corpus, labels, net, _config(loss="aam"))
    assert not np.array_equal(net.params, before)
    assert np.allclose(np.linalg.norm(report.class_weights.W, axis=1), 1.0, atol=1e-6)
    assert report.header['num_classes'] == 2


def test_label_checks():
    assert check_labels({"a": 0, "b": 1, "c": 1}) == 2
    with pytest.raises(DataError):
        check_labels({"a": 0, "b": 2})
    with pytest.raises(DataError):
        check_labels({"a": -1, "b": 0})
    with pytest.raises(DataError):
        check_labels({})
    with pytest.raises(DataError):
        check_labels({"a": "spk1"})


def test_read_and_densify_labels(tmp_path):
    path = tmp_path / "labels.tsv"
    path.write_text("u1\tspkB\nu2\tspkA\n\nu3\tspkB\n", encoding='utf-8')
    labels = read_labels(path)
    assert labels == {"u1": "spkB", "u2": "spkA", "u3": "spkB"}
    assert dense_labels(labels) == {"u1": 1, "u2": 0, "u3": 1}

    path.write_text("u1\tspkA\nu1\tspkB\n", encoding='utf-8')
    with pytest.raises(DataError):
        read_labels(path)
    path.write_text("u1 spkA\n", encoding='utf-8')
    with pytest.raises(DataError):
        read_labels(path)


def test_mse_head_averages_over_batch_and_dimensions():
    rng = np.random.default_rng(8)
    _, teacher = _corpus(n_utterances=4)
    targets = [rng.standard_normal(EMBEDDING) for _ in range(5)]
    students = rng.standard_normal((5, EMBEDDING))
    summed = mse_loss(EmbeddingBatch(np.stack(targets), students))

    per_element = DistillationHead(teacher, LossKind.MSE, ContrastiveConfig()).loss(targets, students, 0)
    per_sample = DistillationHead(teacher, LossKind.MSE, ContrastiveConfig(), mse_per_element=False).loss(
        targets, students, 0)
    print(f"Summed {summed.value}, per element {per_element.value}, per sample {per_sample.value}")
    assert per_element.value == pytest.approx(summed.value / (5 * EMBEDDING))
    assert np.allclose(per_element.grad_student, summed.grad_student / (5 * EMBEDDING))
    assert per_sample.value == pytest.approx(summed.value / 5)
    assert np.allclose(per_sample.grad_student, summed.grad_student / 5)

    # the dimension average applies to MSE only
    cos_head = DistillationHead(teacher, LossKind.COS, ContrastiveConfig())
    cos_plain = DistillationHead(teacher, LossKind.COS, ContrastiveConfig(), mse_per_element=False)
    assert cos_head.loss(targets, students, 0).value == cos_plain.loss(targets, students, 0).value
