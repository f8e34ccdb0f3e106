"""
Training loops: label-free distillation against a teacher store and supervised AAM fine-tuning.

Both loops share one epoch driver. Each epoch draws a seeded subset of the corpus, shuffles it and
walks it in batches. Samples are prepared (teacher lookup, crop, augmentation, student forward) by
worker threads and released in shuffled-index order through an OrderedBatchQueue, so results do not
depend on the worker count. Gradients are summed per sample in index order and the optimizer step
is sequential.
"""
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from distillkit.augmentModule import AugmentConfig, augment_for_student, random_crop, worker_rng
from distillkit.config import LossKind
from distillkit.data_structures.ordered_batch_queue import OrderedBatchQueue
from distillkit.featuresModule import FeatureArchive
from distillkit.lossesModule import (AamConfig, ClassWeights, ContrastiveConfig, EmbeddingBatch, LossOutput,
                                     aam_softmax_loss, distillation_loss)
from distillkit.statsModule import PipelineStats, ResourceMonitor
from distillkit.studentNet import StudentNet, save_checkpoint
from distillkit.teacherStore import TeacherStore
from utils.binary_io import atomic_write_bytes
from utils.exceptions import ConfigError, DataError, MissingIdError, TooShortError, UsageError
from utils.logger_config import logger

# SeedSequence key of the class-weight initialization, disjoint from epoch keys
CLASS_WEIGHT_STREAM = 2 ** 31 - 1


@dataclass(frozen=True)
class TrainConfig:
    """
    Attributes:
        loss (LossKind): mse, cos or contrastive for distillation; aam for fine-tuning.
        batch_size (int): samples per optimizer step.
        epochs (int): passes over the (subsetted) corpus.
        lr_start, lr_end (float): endpoints of the exponential learning-rate decay.
        momentum (float): SGD momentum.
        epoch_subset_fraction (float): share of the corpus drawn each epoch, in (0, 1].
        max_grad_norm (float): global gradient-norm clip before each step; 0 disables it.
        mse_per_element (bool): divide the MSE objective by the embedding dim as well as the batch size.
        seed (int): root of every random stream.
        workers (int): threads preparing samples.
        use_augment (bool): SpecAugment after cropping; off means crop only.
    """
    loss: LossKind = LossKind.CONTRASTIVE
    batch_size: int = 64
    epochs: int = 15
    lr_start: float = 0.1
    lr_end: float = 0.01
    momentum: float = 0.9
    epoch_subset_fraction: float = 1.0
    max_grad_norm: float = 5.0
    mse_per_element: bool = True
    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    use_augment: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    aam: AamConfig = field(default_factory=AamConfig)

    def __post_init__(self):
        if isinstance(self.loss, str):
            try:
                object.__setattr__(self, 'loss', LossKind.parse(self.loss))
            except ValueError as e:
                raise ConfigError(str(e))
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.lr_end <= self.lr_start:
            raise ConfigError(f"Need 0 <= lr_end <= lr_start, got lr_start={self.lr_start}, lr_end={self.lr_end}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.epoch_subset_fraction <= 1.0:
            raise ConfigError(f"epoch_subset_fraction must be in (0, 1], got {self.epoch_subset_fraction}")
        if self.max_grad_norm < 0:
            raise ConfigError(f"max_grad_norm must be >= 0 (0 disables clipping), got {self.max_grad_norm}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def header(self):
        return {
            'loss': self.loss.value,
            'batch_reduction': 'mean',
            'batch_size': self.batch_size,
            'epochs': self.epochs,
            'lr_start': self.lr_start,
            'lr_end': self.lr_end,
            'momentum': self.momentum,
            'epoch_subset_fraction': self.epoch_subset_fraction,
            'max_grad_norm': self.max_grad_norm,
            'mse_per_element': self.mse_per_element,
            'seed': self.seed,
            'use_augment': self.use_augment,
            'augment': asdict(self.augment),
            'contrastive': asdict(self.contrastive),
            'aam': asdict(self.aam),
        }


def lr_schedule(cfg: TrainConfig, epoch) -> float:
    """
    lr(e) = lr_start * (lr_end / lr_start) ** (e / (E - 1)); lr_start for a single epoch.
    The last epoch returns lr_end exactly.

    Raises:
        UsageError: if epoch is outside [0, E).
    """
    if not 0 <= epoch < cfg.epochs:
        raise UsageError(f"Epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1 or cfg.lr_start == 0.0:
        return cfg.lr_start
    if epoch == cfg.epochs - 1:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (epoch / (cfg.epochs - 1))


class SgdMomentum:
    """
    v <- momentum * v + g;  p <- p - lr * v. Updates the parameter array in place.
    """

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = None

    def step(self, params, grad, lr):
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity *= self.momentum
        self.velocity += grad
        params -= params.dtype.type(lr) * self.velocity


def clip_gradient(grad, max_norm):
    """
    Rescales grad in place so its L2 norm is at most max_norm (no-op for max_norm 0).

    Returns:
        float: the norm before clipping.
    """
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        grad *= max_norm / norm
    return norm


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    processed: int
    skipped: int
    wall_time_s: float = 0.0
    cpu_time_s: float = 0.0

    def report_fields(self):
        return {'record': 'epoch', 'epoch': self.epoch, 'mean_loss': self.mean_loss, 'lr': self.lr,
                'processed': self.processed, 'skipped': self.skipped}


@dataclass
class TrainReport:
    """
    One record per completed epoch. report.jsonl gets the deterministic fields, timing.jsonl the
    wall-clock and CPU times; `resources` holds the process usage of the whole run.
    """
    header: dict
    epochs: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    best_checkpoint_path: Optional[str] = None
    stats: dict = field(default_factory=dict)
    resources: dict = field(default_factory=dict)
    class_weights: Optional[ClassWeights] = None

    @property
    def mean_losses(self):
        return [record.mean_loss for record in self.epochs]

    def report_lines(self):
        lines = [json.dumps({'record': 'header', **self.header}, sort_keys=True)]
        lines += [json.dumps(record.report_fields(), sort_keys=True) for record in self.epochs]
        return lines

    def timing_lines(self):
        return [json.dumps({'epoch': r.epoch, 'wall_time_s': r.wall_time_s, 'cpu_time_s': r.cpu_time_s})
                for r in self.epochs]

    def write(self, out_dir):
        out_dir = Path(out_dir)
        atomic_write_bytes(out_dir / "report.jsonl", ("\n".join(self.report_lines()) + "\n").encode('utf-8'))
        atomic_write_bytes(out_dir / "timing.jsonl", ("\n".join(self.timing_lines()) + "\n").encode('utf-8'))


class DistillationHead:
    """
    Teacher embeddings as targets; MSE, COS or contrastive loss averaged over the batch.
    With `mse_per_element` the MSE is also averaged over embedding dimensions.
    """

    def __init__(self, teacher: TeacherStore, kind: LossKind, contrastive_cfg: ContrastiveConfig,
                 mse_per_element=True):
        self.teacher = teacher
        self.kind = kind
        self.contrastive_cfg = contrastive_cfg
        self.mse_per_element = mse_per_element

    def target(self, utt_id):
        return self.teacher.lookup(utt_id)

    def loss(self, targets, students, epoch) -> LossOutput:
        batch = EmbeddingBatch(np.stack(targets).astype(np.float64), students)
        output = distillation_loss(self.kind, batch, self.contrastive_cfg)
        scale = batch.size
        if self.kind == LossKind.MSE and self.mse_per_element:
            scale *= batch.teacher.shape[1]
        return LossOutput(output.value / scale, output.grad_student / scale)

    def update(self, output, lr):
        pass


class AamHead:
    """
    Speaker labels as targets; AAM-softmax with the epoch's margin and its own class-weight momentum.
    """

    def __init__(self, labels, weights: ClassWeights, cfg: AamConfig, momentum):
        self.labels = labels
        self.weights = weights
        self.cfg = cfg
        self.optimizer = SgdMomentum(momentum)

    def target(self, utt_id):
        try:
            return self.labels[utt_id]
        except KeyError:
            raise MissingIdError(utt_id) from None

    def loss(self, targets, students, epoch) -> LossOutput:
        return aam_softmax_loss(students, np.asarray(targets, dtype=np.int64), self.weights, self.cfg, epoch)

    def update(self, output, lr):
        self.optimizer.step(self.weights.W, output.grad_weights, lr)
        self.weights.renormalize()


def epoch_order(num_utterances, cfg: TrainConfig, epoch):
    """
    Seeded subset of ceil(fraction * n) corpus indices in shuffled order.
    """
    size = min(num_utterances, max(1, math.ceil(cfg.epoch_subset_fraction * num_utterances)))
    return worker_rng(cfg.seed, epoch).permutation(num_utterances)[:size]


def _prepare_sample(net: StudentNet, corpus: FeatureArchive, head, cfg: TrainConfig, utt_id, epoch, position, stats):
    """
    Worker task: target lookup, student-side crop/augment and forward. Returns None when skipped.
    """
    try:
        target = head.target(utt_id)
        rng = worker_rng(cfg.seed, epoch, position, cfg.augment.rng_seed)
        feats = corpus.get(utt_id)
        if cfg.use_augment:
            feats = augment_for_student(feats, cfg.augment, rng, stats)
        else:
            feats = random_crop(feats, cfg.augment, rng)
        embedding, tape = net.forward(feats)
    except (MissingIdError, TooShortError) as e:
        stats.record_skip(e)
        logger.debug(f"Skipping {utt_id}: {e}")
        return None
    return target, embedding, tape


def _prepare_batch(pool, net, corpus, head, cfg, ids, order, positions, epoch, stats):
    queue = OrderedBatchQueue(start_position=positions[0])
    futures = {
        pool.submit(_prepare_sample, net, corpus, head, cfg, ids[order[p]], epoch, p, stats): p
        for p in positions
    }
    ready = []
    for future in as_completed(futures):
        queue.push(futures[future], future.result())
        ready.extend(item for _, item in queue.pop_ready())
    return [item for item in ready if item is not None]


def _train(corpus: FeatureArchive, net: StudentNet, cfg: TrainConfig, head, header, out_dir, stats):
    ids = corpus.ids()
    if not ids:
        raise DataError("Training corpus is empty")
    stats = stats if stats is not None else PipelineStats()
    report = TrainReport(header={**header, 'param_count': net.param_count, 'student': net.config.to_dict()})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    optimizer = SgdMomentum(cfg.momentum)
    best_loss = math.inf
    monitor = ResourceMonitor()

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for epoch in range(cfg.epochs):
            start_time = time.perf_counter()
            start_cpu = monitor.cpu_seconds()
            lr = lr_schedule(cfg, epoch)
            order = epoch_order(len(ids), cfg, epoch)
            loss_sum, processed = 0.0, 0

            for batch_start in range(0, len(order), cfg.batch_size):
                positions = list(range(batch_start, min(batch_start + cfg.batch_size, len(order))))
                samples = _prepare_batch(pool, net, corpus, head, cfg, ids, order, positions, epoch, stats)
                if not samples:
                    continue
                targets = [target for target, _, _ in samples]
                students = np.stack([embedding for _, embedding, _ in samples]).astype(np.float64)
                output = head.loss(targets, students, epoch)

                grad = np.zeros(net.param_count, dtype=np.float64)
                for (_, _, tape), grad_row in zip(samples, output.grad_student):
                    grad += net.backward(tape, grad_row)
                clip_gradient(grad, cfg.max_grad_norm)
                optimizer.step(net.params, grad.astype(net.dtype), lr)
                head.update(output, lr)

                loss_sum += output.value * len(samples)
                processed += len(samples)
                stats.record_processed(len(samples))
                logger.debug(f"epoch {epoch} batch {batch_start // cfg.batch_size}: loss {output.value:.6f}")

            skipped = len(order) - processed
            if processed == 0:
                raise DataError(f"Every utterance of epoch {epoch} was skipped "
                                f"({stats.skipped_missing_teacher} without teacher embedding, "
                                f"{stats.skipped_too_short} too short)")
            record = EpochRecord(epoch, loss_sum / processed, lr, processed, skipped,
                                 time.perf_counter() - start_time, monitor.cpu_seconds() - start_cpu)
            monitor.sample()
            report.epochs.append(record)
            logger.info(f"Epoch {epoch}: mean loss {record.mean_loss:.6f}, lr {lr:.6f}, "
                        f"processed {processed}, skipped {skipped}")

            if out_dir is not None:
                last_path = Path(out_dir) / "last.net1"
                save_checkpoint(net, last_path)
                report.checkpoint_path = str(last_path)
                if record.mean_loss < best_loss:
                    best_loss = record.mean_loss
                    best_path = Path(out_dir) / "best.net1"
                    save_checkpoint(net, best_path)
                    report.best_checkpoint_path = str(best_path)
                report.write(out_dir)

    report.stats = stats.get_statistics_summary()
    stats.log_statistics()
    report.resources = monitor.log_statistics()
    logger.summary(f"Training finished: {len(report.epochs)} epochs, final mean loss {report.mean_losses[-1]:.6f}")
    return report


def train_distill(corpus: FeatureArchive, teacher: TeacherStore, net: StudentNet, cfg: TrainConfig,
                  out_dir=None, stats: PipelineStats = None) -> TrainReport:
    """
    Label-free distillation: the student learns to reproduce the teacher embedding of each
    utterance from a cropped, augmented view of its features.

    Args:
        corpus (FeatureArchive): training features.
        teacher (TeacherStore): teacher embeddings; utterances without one are skipped and counted.
        net (StudentNet): trained in place.
        cfg (TrainConfig): loss must be mse, cos or contrastive.
        out_dir (str | Path, optional): receives last.net1, best.net1, report.jsonl, timing.jsonl.
        stats (PipelineStats, optional): skip counters.

    Returns:
        TrainReport: per-epoch records.

    Raises:
        ConfigError: non-distillation loss or teacher dim != student embedding dim.
        DataError: empty corpus or an epoch where every utterance was skipped.
    """
    if not cfg.loss.is_distillation:
        raise ConfigError(f"Distillation needs one of mse, cos, contrastive; got {cfg.loss.value}")
    if teacher.dim != net.config.embedding_dim:
        raise ConfigError(f"Teacher dim {teacher.dim} != student embedding dim {net.config.embedding_dim}")
    logger.info("Distilling %s with %s loss on %d utterances", net.config.conv_layers, cfg.loss.value, len(corpus))
    head = DistillationHead(teacher, cfg.loss, cfg.contrastive, cfg.mse_per_element)
    return _train(corpus, net, cfg, head, cfg.header(), out_dir, stats)


def check_labels(labels):
    """
    Labels must be integers covering [0, C) without gaps.

    Returns:
        int: the number of classes C.
    """
    values = set(labels.values())
    if not values:
        raise DataError("No labels given")
    if not all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in values):
        raise DataError("Labels must be integers")
    num_classes = max(values) + 1
    if min(values) < 0 or len(values) != num_classes:
        missing = sorted(set(range(max(num_classes, 0))) - values)[:10]
        raise DataError(f"Labels must be dense in [0, {num_classes}); missing classes {missing}")
    return num_classes


def finetune_supervised(corpus: FeatureArchive, labels, net: StudentNet, cfg: TrainConfig,
                        out_dir=None, stats: PipelineStats = None,
                        weights: ClassWeights = None) -> TrainReport:
    """
    Supervised training with AAM-softmax. The net may come fresh or from a distillation checkpoint.
    Class weights are drawn from the seed unless given, and renormalized after every step.

    Args:
        labels (dict): utterance id -> class index, dense in [0, C).

    Raises:
        ConfigError: loss is not aam.
        DataError: label gaps, empty corpus, all-skipped epoch.
    """
    if cfg.loss != LossKind.AAM:
        raise ConfigError(f"Fine-tuning uses the aam loss, got {cfg.loss.value}")
    num_classes = check_labels(labels)
    if weights is None:
        weights = ClassWeights.random(num_classes, net.config.embedding_dim, worker_rng(cfg.seed, CLASS_WEIGHT_STREAM))
    elif weights.num_classes != num_classes:
        raise DataError(f"Class weights hold {weights.num_classes} classes, labels {num_classes}")
    logger.info("Fine-tuning with AAM-softmax over %d classes on %d utterances", num_classes, len(corpus))
    head = AamHead(labels, weights, cfg.aam, cfg.momentum)
    report = _train(corpus, net, cfg, head, {**cfg.header(), 'num_classes': num_classes}, out_dir, stats)
    report.class_weights = weights
    return report


def read_labels(path):
    """
    Reads `utt-id<TAB>speaker-id` lines.

    Returns:
        dict: utterance id -> speaker name.
    """
    labels = {}
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip('\r\n')
            if not line.strip():
                continue
            parts = line.split('\t')
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{line_number}: expected 'utt-id<TAB>speaker-id'")
            if parts[0] in labels:
                raise DataError(f"{path}:{line_number}: duplicate utterance id {parts[0]!r}")
            labels[parts[0]] = parts[1]
    return labels


def dense_labels(labels):
    """
    Maps speaker names to class indices in sorted-name order.
    """
    index = {name: i for i, name in enumerate(sorted(set(labels.values())))}
    return {utt_id: index[name] for utt_id, name in labels.items()}
