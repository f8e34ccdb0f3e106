"""
Distillation and classification losses with exact gradients.

MSE, cosine and contrastive losses compare each student embedding with the teacher embedding of the
same utterance (the teacher is a constant). AAM-softmax is the supervised loss over speaker classes.
Every loss returns its value together with the gradient w.r.t. the student embeddings.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import softmax

from distillkit.Constants import NORM_EPSILON
from distillkit.config import LossKind
from utils.exceptions import BatchError, ConfigError, DataError, DegenerateInputError


@dataclass(frozen=True)
class EmbeddingBatch:
    """
    N paired embeddings, row i of `teacher` belongs to the same utterance as row i of `student`.
    """
    teacher: np.ndarray
    student: np.ndarray

    def __post_init__(self):
        teacher = np.asarray(self.teacher)
        student = np.asarray(self.student)
        if teacher.ndim != 2 or teacher.shape != student.shape:
            raise BatchError(f"Teacher {teacher.shape} and student {student.shape} must be equal-shape N x D matrices")
        if teacher.shape[0] < 1:
            raise BatchError("Batch must hold at least one pair")
        for name, matrix in (("teacher", teacher), ("student", student)):
            if not np.all(np.isfinite(matrix)):
                raise BatchError(f"Non-finite values in {name} embeddings")
            zero_rows = np.flatnonzero(np.linalg.norm(matrix, axis=1) <= NORM_EPSILON)
            if zero_rows.size:
                raise DegenerateInputError(f"Zero-norm {name} embedding at rows {zero_rows[:10].tolist()}")
        object.__setattr__(self, 'teacher', teacher)
        object.__setattr__(self, 'student', student)

    @property
    def size(self):
        return self.teacher.shape[0]


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"Temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class AamConfig:
    """
    AAM-softmax: logits are scale * cos, the target class uses cos(theta + margin).
    The margin is held at 0 before `margin_warmup_epochs`.
    """
    scale: float = 30.0
    margin: float = 0.3
    margin_warmup_epochs: int = 30

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"AAM scale must be positive, got {self.scale}")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ConfigError(f"AAM margin must be in [0, pi/2), got {self.margin}")
        if self.margin_warmup_epochs < 0:
            raise ConfigError("margin_warmup_epochs must be >= 0")

    def effective_margin(self, epoch):
        return 0.0 if epoch < self.margin_warmup_epochs else self.margin


class ClassWeights:
    """
    Speaker lookup table of the supervised head: one unit-norm row per class.
    """

    def __init__(self, weights):
        self.W = np.array(weights, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] < 1:
            raise DataError(f"Class weights must be a non-empty C x D matrix, got {self.W.shape}")
        self.renormalize()

    @classmethod
    def random(cls, num_classes, dim, rng: np.random.Generator):
        return cls(rng.standard_normal((num_classes, dim)))

    @property
    def num_classes(self):
        return self.W.shape[0]

    def renormalize(self):
        norms = np.linalg.norm(self.W, axis=1, keepdims=True)
        if np.any(norms <= NORM_EPSILON):
            raise DegenerateInputError("Zero-norm class weight row")
        self.W /= norms


@dataclass
class LossOutput:
    value: float
    grad_student: np.ndarray
    grad_weights: Optional[np.ndarray] = None


def _softmax_cross_entropy(logits, targets):
    """
    Per-row -ln softmax(logits)[target], stabilized by subtracting the row maximum. When the target
    is the maximum the result goes through log1p so losses near 1e-13 keep their precision.
    """
    rows = np.arange(logits.shape[0])
    shifted = logits - logits[rows, targets][:, None]
    peak = np.max(shifted, axis=1)
    others = np.exp(shifted - peak[:, None])
    others[rows, targets] = 0.0
    rest = np.sum(others, axis=1)
    return np.where(peak > 0.0, peak + np.log(np.exp(-peak) + rest), np.log1p(rest))


def _unit_rows(matrix):
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / norms, norms


def _through_normalization(grad_unit, unit, norms):
    """
    Pulls a gradient w.r.t. x/|x| back to x: (g - (g . u) u) / |x|.
    """
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms


def mse_loss(batch: EmbeddingBatch) -> LossOutput:
    """
    sum_i ||t_i - s_i||^2.
    """
    diff = batch.student - batch.teacher
    return LossOutput(float(np.sum(diff * diff)), 2.0 * diff)


def cos_loss(batch: EmbeddingBatch) -> LossOutput:
    """
    -sum_i cos(t_i, s_i).
    """
    t_norm = np.linalg.norm(batch.teacher, axis=1, keepdims=True)
    s_norm = np.linalg.norm(batch.student, axis=1, keepdims=True)
    cos = np.sum(batch.teacher * batch.student, axis=1, keepdims=True) / (t_norm * s_norm)
    grad = -batch.teacher / (t_norm * s_norm) + cos * batch.student / (s_norm * s_norm)
    return LossOutput(float(-np.sum(cos)), grad)


def contrastive_loss(batch: EmbeddingBatch, cfg: ContrastiveConfig = ContrastiveConfig()) -> LossOutput:
    """
    -sum_i ln softmax_j(cos(t_i, s_j) / tau)[i]. Each teacher embedding is an anchor whose positive
    is the student embedding of the same utterance and whose negatives are all other students in
    the batch.
    """
    teacher_unit, _ = _unit_rows(batch.teacher)
    student_unit, student_norms = _unit_rows(batch.student)
    logits = (teacher_unit @ student_unit.T) / cfg.temperature
    value = float(np.sum(_softmax_cross_entropy(logits, np.arange(batch.size))))
    # d value / d logits = softmax rows minus identity
    grad_logits = softmax(logits, axis=1)
    grad_logits[np.diag_indices_from(grad_logits)] -= 1.0
    grad_student_unit = (grad_logits.T @ teacher_unit) / cfg.temperature
    return LossOutput(value, _through_normalization(grad_student_unit, student_unit, student_norms))


def _check_labels(labels, num_rows, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (num_rows,) or not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"Expected {num_rows} integer labels, got shape {labels.shape} dtype {labels.dtype}")
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise DataError(f"Labels out of range [0, {num_classes}): {labels[bad[:10]].tolist()}")
    return labels


def aam_softmax_loss(student, labels, weights: ClassWeights, cfg: AamConfig = AamConfig(), epoch=None) -> LossOutput:
    """
    Additive angular margin softmax cross-entropy, averaged over the batch.

    Args:
        student (np.ndarray): N x D student embeddings (not necessarily normalized).
        labels (array-like): N class ids in [0, C).
        weights (ClassWeights): C x D class rows.
        cfg (AamConfig): scale, margin and warmup.
        epoch (int, optional): current epoch; None applies the full margin.

    Returns:
        LossOutput: value, gradient w.r.t. student rows and w.r.t. class rows.
    """
    student = np.asarray(student)
    if student.ndim != 2 or student.shape[1] != weights.W.shape[1]:
        raise BatchError(f"Student {student.shape} does not match class weights {weights.W.shape}")
    n = student.shape[0]
    labels = _check_labels(labels, n, weights.num_classes)
    margin = cfg.margin if epoch is None else cfg.effective_margin(epoch)
    rows = np.arange(n)

    norms = np.linalg.norm(student, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPSILON):
        raise DegenerateInputError("Zero-norm student embedding in AAM batch")
    unit = student / norms
    cos = np.clip(unit @ weights.W.T, -1.0, 1.0)
    logits = cfg.scale * cos
    target_cos = cos[rows, labels]
    d_target = np.ones(n)
    if margin > 0.0:
        target_sin = np.sqrt(np.clip(1.0 - target_cos ** 2, 0.0, 1.0))
        logits[rows, labels] = cfg.scale * (target_cos * math.cos(margin) - target_sin * math.sin(margin))
        # d cos(theta + m) / d cos(theta); where sin(theta) underflows the computed logit is
        # cos(theta) * cos(m), so its derivative is cos(m)
        resolved = target_sin > NORM_EPSILON
        safe_sin = np.where(resolved, target_sin, 1.0)
        d_target = np.where(resolved, math.cos(margin) + math.sin(margin) * target_cos / safe_sin, math.cos(margin))

    value = float(np.mean(_softmax_cross_entropy(logits, labels)))
    grad_logits = softmax(logits, axis=1)
    grad_logits[rows, labels] -= 1.0
    grad_logits /= n
    grad_cos = cfg.scale * grad_logits
    grad_cos[rows, labels] *= d_target
    grad_weights = grad_cos.T @ unit
    grad_student = _through_normalization(grad_cos @ weights.W, unit, norms)
    return LossOutput(value, grad_student, grad_weights)


def distillation_loss(kind, batch: EmbeddingBatch, contrastive_cfg: ContrastiveConfig = ContrastiveConfig()):
    """
    Dispatches on a LossKind among the three label-free losses.
    """
    if kind == LossKind.MSE:
        return mse_loss(batch)
    if kind == LossKind.COS:
        return cos_loss(batch)
    if kind == LossKind.CONTRASTIVE:
        return contrastive_loss(batch, contrastive_cfg)
    raise ConfigError(f"{kind} is not a distillation loss")
