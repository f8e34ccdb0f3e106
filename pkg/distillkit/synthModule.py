"""
Synthetic corpus with known speakers, known teacher embeddings and known separability.

Every speaker k gets a unit teacher centroid c_k and an 80-dim spectral template tau_k. An utterance
of speaker k has teacher embedding normalize(c_k + sigma_t * noise) and features
a(t) * tau_k + sigma_f * noise, where a(t) is a slow amplitude modulation, so the speaker is linearly
recoverable from time-pooled statistics. The last utterances of every speaker are held out for the
trial list.
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from distillkit.Constants import DEFAULT_FRAME_SHIFT_S, EMBEDDING_DIM, N_MELS
from distillkit.augmentModule import worker_rng
from distillkit.config import TrialLabel
from distillkit.evalModule import TrialPair, compute_eer, length_normalize, score_trials, write_trials
from distillkit.featuresModule import FeatureArchive, FeatureMatrix, write_archive
from distillkit.teacherStore import TeacherStore, write_store
from utils.binary_io import atomic_write_bytes
from utils.exceptions import ConfigError
from utils.logger_config import logger

# SeedSequence keys of the independent generation streams
SPEAKER_STREAM = 0
TRIAL_STREAM = 1
SHIFT_STREAM = 2
CHECK_STREAM = 3

CORPUS_FILES = ("feats.ftr1", "test.ftr1", "teacher.emb1", "labels.tsv", "trials.txt", "synth_summary.json")


@dataclass(frozen=True)
class SynthSpec:
    """
    Attributes:
        n_speakers (int): K >= 2.
        utts_per_speaker (int): U >= 2.
        teacher_dim (int): length of the teacher embeddings.
        sigma_t (float): within-speaker teacher noise.
        sigma_f (float): feature noise.
        min_utt_s, max_utt_s (float): utterance length range in seconds.
        modulation_depth (float): depth of the amplitude modulation a(t) = 1 + depth * sin(...).
        holdout_fraction (float): share of each speaker's utterances held out (at least 2).
        max_trials_per_class (int): cap on target and on nontarget trials.
        domain_shift (float): strength of a fixed spectral offset and tilt added to all features.
        seed (int): root of all generation streams.
    """
    n_speakers: int = 40
    utts_per_speaker: int = 50
    teacher_dim: int = EMBEDDING_DIM
    sigma_t: float = 0.05
    sigma_f: float = 1.0
    min_utt_s: float = 2.0
    max_utt_s: float = 4.0
    modulation_depth: float = 0.3
    holdout_fraction: float = 0.2
    max_trials_per_class: int = 1000
    domain_shift: float = 0.0
    frame_shift_s: float = DEFAULT_FRAME_SHIFT_S
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2 or self.utts_per_speaker < 2:
            raise ConfigError(f"Need at least 2 speakers and 2 utterances per speaker, got "
                              f"{self.n_speakers} x {self.utts_per_speaker}")
        if self.teacher_dim < 1:
            raise ConfigError("teacher_dim must be positive")
        if self.sigma_t < 0 or self.sigma_f < 0:
            raise ConfigError("Noise levels must be non-negative")
        if not 0 < self.min_utt_s <= self.max_utt_s:
            raise ConfigError(f"Need 0 < min_utt_s <= max_utt_s, got {self.min_utt_s}, {self.max_utt_s}")
        if not 0.0 <= self.modulation_depth < 1.0:
            raise ConfigError("modulation_depth must be in [0, 1)")
        if not 0.0 <= self.holdout_fraction <= 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1]")
        if self.max_trials_per_class < 1:
            raise ConfigError("max_trials_per_class must be >= 1")
        if self.domain_shift < 0:
            raise ConfigError("domain_shift must be non-negative")

    @property
    def holdout_per_speaker(self):
        return min(self.utts_per_speaker, max(2, int(round(self.holdout_fraction * self.utts_per_speaker))))


@dataclass
class SynthCorpus:
    train: FeatureArchive
    test: FeatureArchive
    teacher: TeacherStore
    labels: dict
    trials: list
    summary: dict = field(default_factory=dict)


def speaker_name(k):
    return f"spk{k:03d}"


def utterance_id(k, u):
    return f"{speaker_name(k)}-utt{u:03d}"


def _speaker_data(spec: SynthSpec, k, shift):
    """
    Centroid, template, teacher embeddings and features of one speaker, from its own stream.
    """
    rng = worker_rng(spec.seed, SPEAKER_STREAM, k)
    centroid = length_normalize(rng.standard_normal(spec.teacher_dim))
    template = rng.standard_normal(N_MELS)
    low = int(round(spec.min_utt_s / spec.frame_shift_s))
    high = int(round(spec.max_utt_s / spec.frame_shift_s))
    utterances = []
    for u in range(spec.utts_per_speaker):
        teacher = length_normalize(centroid + spec.sigma_t * rng.standard_normal(spec.teacher_dim))
        n_frames = int(rng.integers(low, high + 1))
        rate_hz = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        t = np.arange(n_frames) * spec.frame_shift_s
        amplitude = 1.0 + spec.modulation_depth * np.sin(2.0 * np.pi * rate_hz * t + phase)
        frames = amplitude[:, None] * template[None, :] + spec.sigma_f * rng.standard_normal((n_frames, N_MELS))
        frames = (frames + shift[None, :]).astype(np.float32)
        utterances.append((utterance_id(k, u), teacher, FeatureMatrix(frames, spec.frame_shift_s)))
    return utterances


def _domain_shift(spec: SynthSpec):
    if spec.domain_shift == 0.0:
        return np.zeros(N_MELS)
    rng = worker_rng(spec.seed, SHIFT_STREAM)
    return spec.domain_shift * (rng.standard_normal(N_MELS) + np.linspace(-1.0, 1.0, N_MELS))


def _balanced_trials(spec: SynthSpec, held_out):
    """
    Equal numbers of target and nontarget pairs drawn from the held-out utterances.
    """
    rng = worker_rng(spec.seed, TRIAL_STREAM)
    targets = [(a, b) for ids in held_out for a, b in combinations(ids, 2)]
    flat = [(k, utt_id) for k, ids in enumerate(held_out) for utt_id in ids]
    nontargets = [(a, b) for (ka, a), (kb, b) in combinations(flat, 2) if ka != kb]
    n = min(spec.max_trials_per_class, len(targets), len(nontargets))
    picked = ([TrialPair(TrialLabel.TARGET, *targets[i]) for i in np.sort(rng.choice(len(targets), n, replace=False))]
              + [TrialPair(TrialLabel.NONTARGET, *nontargets[i])
                 for i in np.sort(rng.choice(len(nontargets), n, replace=False))])
    return [picked[i] for i in rng.permutation(len(picked))]


def same_vs_cross_rate(spec: SynthSpec, teacher: TeacherStore, n_pairs=2000):
    """
    Monte-Carlo share of (anchor, same-speaker, other-speaker) triples where the same-speaker
    teacher cosine exceeds the cross-speaker one.
    """
    rng = worker_rng(spec.seed, CHECK_STREAM)
    wins = 0
    for _ in range(n_pairs):
        k, other = rng.choice(spec.n_speakers, 2, replace=False)
        u, v = rng.choice(spec.utts_per_speaker, 2, replace=False)
        w = rng.integers(spec.utts_per_speaker)
        anchor = teacher.lookup(utterance_id(k, u))
        same = float(np.dot(anchor, teacher.lookup(utterance_id(k, v))))
        cross = float(np.dot(anchor, teacher.lookup(utterance_id(other, w))))
        wins += same > cross
    return wins / n_pairs


def generate_corpus(spec: SynthSpec = SynthSpec(), workers=1) -> SynthCorpus:
    """
    Generates the corpus in memory. Speakers are generated in parallel from per-speaker streams,
    so the output does not depend on `workers`.

    Returns:
        SynthCorpus: training and held-out features, teacher embeddings of all utterances, speaker
        labels, the balanced trial list and a summary with the teacher-quality ceiling.
    """
    shift = _domain_shift(spec)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        speakers = list(pool.map(lambda k: _speaker_data(spec, k, shift), range(spec.n_speakers)))

    n_train = spec.utts_per_speaker - spec.holdout_per_speaker
    train, test = FeatureArchive(), FeatureArchive()
    teacher = TeacherStore(spec.teacher_dim)
    labels = {}
    held_out = []
    for k, utterances in enumerate(speakers):
        for u, (utt_id, embedding, feats) in enumerate(utterances):
            (train if u < n_train else test).add(utt_id, feats)
            teacher.add(utt_id, embedding.astype(np.float32))
            labels[utt_id] = speaker_name(k)
        held_out.append([utt_id for utt_id, _, _ in utterances[n_train:]])

    trials = _balanced_trials(spec, held_out)
    ceiling = compute_eer(score_trials({utt_id: teacher.lookup(utt_id) for utt_id in test.ids()}, trials))
    summary = {
        'spec': asdict(spec),
        'train_utterances': len(train),
        'test_utterances': len(test),
        'target_trials': sum(t.is_target for t in trials),
        'nontarget_trials': sum(not t.is_target for t in trials),
        'teacher_eer': ceiling.eer,
        'teacher_threshold': ceiling.threshold,
        'same_vs_cross_rate': same_vs_cross_rate(spec, teacher),
    }
    logger.summary(f"Synthetic corpus: {spec.n_speakers} speakers, {len(train)} train / {len(test)} held-out "
                   f"utterances, {len(trials)} trials, teacher EER {ceiling.eer:.4f}, "
                   f"same>cross {summary['same_vs_cross_rate']:.4f}")
    return SynthCorpus(train, test, teacher, labels, trials, summary)


def write_labels(labels, path):
    text = "".join(f"{utt_id}\t{speaker}\n" for utt_id, speaker in labels.items())
    atomic_write_bytes(path, text.encode('utf-8'))


def write_corpus(corpus: SynthCorpus, out_dir):
    """
    Writes feats.ftr1, test.ftr1, teacher.emb1, labels.tsv, trials.txt and synth_summary.json.

    Returns:
        dict: file name -> path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / name for name in CORPUS_FILES}
    write_archive(corpus.train, paths["feats.ftr1"])
    write_archive(corpus.test, paths["test.ftr1"])
    write_store(corpus.teacher, corpus.teacher.dim, paths["teacher.emb1"])
    write_labels(corpus.labels, paths["labels.tsv"])
    write_trials(corpus.trials, paths["trials.txt"])
    atomic_write_bytes(paths["synth_summary.json"],
                       (json.dumps(corpus.summary, indent=2, sort_keys=True) + "\n").encode('utf-8'))
    logger.info("Synthetic corpus written to %s", out_dir)
    return paths
