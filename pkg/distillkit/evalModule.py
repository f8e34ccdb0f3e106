"""
Speaker-verification evaluation: length normalization, cosine trial scoring and equal error rate.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from distillkit.Constants import NORM_EPSILON
from distillkit.config import TrialLabel
from distillkit.featuresModule import FeatureArchive
from distillkit.studentNet import StudentNet
from utils.binary_io import atomic_write_bytes
from utils.exceptions import DataError, DegenerateInputError
from utils.logger_config import logger


@dataclass(frozen=True)
class TrialPair:
    label: TrialLabel
    enroll_id: str
    test_id: str

    def __post_init__(self):
        if not self.enroll_id or not self.test_id:
            raise DataError("Trial ids must be non-empty")
        if not isinstance(self.label, TrialLabel):
            object.__setattr__(self, 'label', TrialLabel(int(self.label)))

    @property
    def is_target(self):
        return self.label == TrialLabel.TARGET


@dataclass(frozen=True)
class ScoredTrial:
    trial: TrialPair
    score: float


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float


@dataclass
class TrialsResult:
    eer: float
    threshold: float
    scored: list


def length_normalize(v):
    """
    v / |v|.

    Raises:
        DegenerateInputError: if |v| <= 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > NORM_EPSILON:
        raise DegenerateInputError(f"Cannot length-normalize a vector of norm {norm:.3g}")
    return v / norm


def cosine_score(a, b) -> float:
    """
    Inner product over the product of norms. Symmetric in its arguments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if not (norm_a > NORM_EPSILON and norm_b > NORM_EPSILON):
        raise DegenerateInputError("Cosine score of a zero vector")
    return float(np.dot(a, b) / (norm_a * norm_b))


def error_rates(target_scores, nontarget_scores):
    """
    FRR and FAR at every distinct score followed by +inf.

    Returns:
        tuple: (thresholds, frr, far) arrays. FRR(t) counts targets below t, FAR(t) nontargets at
        or above t.
    """
    targets = np.sort(np.asarray(target_scores, dtype=np.float64))
    nontargets = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    thresholds = np.append(np.unique(np.concatenate([targets, nontargets])), np.inf)
    frr = np.searchsorted(targets, thresholds, side='left') / targets.size
    far = (nontargets.size - np.searchsorted(nontargets, thresholds, side='left')) / nontargets.size
    return thresholds, frr, far


def eer_from_scores(target_scores, nontarget_scores) -> EerResult:
    """
    Equal error rate at the crossing of FAR and FRR.

    The sweep stops at the first threshold where FAR - FRR <= 0. An exact tie gives that point
    directly; otherwise EER and threshold are interpolated linearly between the two bracketing
    thresholds (the lower threshold is kept when the upper one is +inf).

    Raises:
        DataError: if either class is empty.
    """
    if len(target_scores) == 0 or len(nontarget_scores) == 0:
        raise DataError(f"EER needs target and nontarget trials, got {len(target_scores)} targets "
                        f"and {len(nontarget_scores)} nontargets")
    thresholds, frr, far = error_rates(target_scores, nontarget_scores)
    diff = far - frr
    k = int(np.argmax(diff <= 0.0))
    if diff[k] == 0.0 or k == 0:
        return EerResult(float(far[k]), float(thresholds[k]))
    alpha = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = frr[k - 1] + alpha * (frr[k] - frr[k - 1])
    if np.isfinite(thresholds[k]):
        threshold = thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1])
    else:
        threshold = thresholds[k - 1]
    return EerResult(float(eer), float(threshold))


def compute_eer(scores) -> EerResult:
    """
    Args:
        scores (list[ScoredTrial]): scored trials of both classes.

    Returns:
        EerResult: EER in [0, 1] and the crossing threshold.
    """
    targets = [s.score for s in scores if s.trial.is_target]
    nontargets = [s.score for s in scores if not s.trial.is_target]
    return eer_from_scores(targets, nontargets)


def read_trials(path):
    """
    Reads `<0|1> <enroll-id> <test-id>` lines (1 = target). Blank lines are ignored.

    Raises:
        DataError: naming the malformed line.
    """
    trials = []
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ('0', '1'):
                raise DataError(f"{path}:{line_number}: expected '<0|1> <enroll-id> <test-id>'")
            trials.append(TrialPair(TrialLabel(int(parts[0])), parts[1], parts[2]))
    return trials


def write_trials(trials, path):
    text = "".join(f"{t.label.value} {t.enroll_id} {t.test_id}\n" for t in trials)
    atomic_write_bytes(path, text.encode('utf-8'))


def write_scores(scored, path):
    """
    One `<enroll-id> <test-id> <score> <label>` line per trial.
    """
    text = "".join(f"{s.trial.enroll_id} {s.trial.test_id} {s.score!r} {s.trial.label.value}\n" for s in scored)
    atomic_write_bytes(path, text.encode('utf-8'))


def score_trials(embeddings, trials):
    """
    Cosine-scores every trial from a mapping id -> length-normalized embedding.
    """
    return [ScoredTrial(t, cosine_score(embeddings[t.enroll_id], embeddings[t.test_id])) for t in trials]


def missing_trial_ids(ids, trials):
    return sorted({i for t in trials for i in (t.enroll_id, t.test_id)} - set(ids))


def run_trials(net: StudentNet, archive: FeatureArchive, trials, workers=1, scores_out=None) -> TrialsResult:
    """
    Embeds every utterance referenced by the trials once (full length, no crop or augmentation),
    length-normalizes, scores the trials and computes the EER.

    Args:
        net (StudentNet): the extractor.
        archive (FeatureArchive): evaluation features.
        trials (list[TrialPair]): the trial list.
        workers (int): threads extracting embeddings; output does not depend on it.
        scores_out (str | Path, optional): destination of the per-trial score file.

    Raises:
        DataError: listing the trial ids absent from the archive.
    """
    missing = missing_trial_ids(archive.ids(), trials)
    if missing:
        raise DataError(f"{len(missing)} trial ids missing from the feature archive: {', '.join(missing[:10])}",
                        missing_ids=missing)
    unique_ids = sorted({i for t in trials for i in (t.enroll_id, t.test_id)})
    logger.info("Extracting %d embeddings for %d trials", len(unique_ids), len(trials))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        vectors = list(pool.map(lambda utt_id: length_normalize(net.embed(archive.get(utt_id))), unique_ids))
    embeddings = dict(zip(unique_ids, vectors))

    scored = score_trials(embeddings, trials)
    result = compute_eer(scored)
    if scores_out is not None:
        write_scores(scored, scores_out)
    logger.summary(f"EER {result.eer:.4f} at threshold {result.threshold:.4f} over {len(trials)} trials")
    return TrialsResult(result.eer, result.threshold, scored)
