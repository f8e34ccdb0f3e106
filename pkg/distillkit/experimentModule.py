"""
Seed-swept comparison of training objectives on synthetic corpora.

For each seed a corpus is generated, then a fresh student is trained with every requested
distillation loss, optionally with supervised AAM-softmax from scratch and with AAM fine-tuning of
the contrastive student. Each model is scored on the held-out trial list.
"""
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from distillkit.config import LossKind
from distillkit.evalModule import run_trials
from distillkit.studentNet import StudentConfig, StudentNet
from distillkit.synthModule import SynthSpec, generate_corpus
from distillkit.trainerModule import TrainConfig, dense_labels, finetune_supervised, train_distill
from utils.binary_io import atomic_write_bytes
from utils.logger_config import logger

DISTILL_LOSSES = (LossKind.MSE, LossKind.COS, LossKind.CONTRASTIVE)
FINETUNE_METHOD = "contrastive+aam"


@dataclass
class ComparisonResult:
    """
    Attributes:
        eers (dict): method -> list of EERs, one per seed in `seeds` order.
        teacher_eers (list): teacher-ceiling EER per seed.
    """
    seeds: list
    eers: dict = field(default_factory=dict)
    teacher_eers: list = field(default_factory=list)

    def median_eers(self):
        return {method: float(np.median(values)) for method, values in self.eers.items()}

    def ordering_holds(self):
        """
        Median EER(contrastive) <= EER(cos) <= EER(mse).
        """
        medians = self.median_eers()
        return medians['contrastive'] <= medians['cos'] <= medians['mse']

    def to_dict(self):
        data = {'seeds': self.seeds, 'eers': self.eers, 'teacher_eers': self.teacher_eers,
                'median_eers': self.median_eers()}
        if all(kind.value in self.eers for kind in DISTILL_LOSSES):
            data['ordering_holds'] = self.ordering_holds()
        return data


def run_loss_comparison(spec: SynthSpec, student: StudentConfig, train_cfg: TrainConfig, seeds=(0, 1, 2),
                        losses=DISTILL_LOSSES, include_aam=True, include_finetune=False, finetune_epochs=None,
                        out_dir=None) -> ComparisonResult:
    """
    Runs the comparison.

    Args:
        spec (SynthSpec): corpus description; its seed is replaced by each sweep seed.
        student (StudentConfig): architecture; its seed is replaced by each sweep seed.
        train_cfg (TrainConfig): shared schedule; loss and seed are set per run.
        seeds (iterable): sweep seeds.
        losses (iterable): distillation losses to train.
        include_aam (bool): also train AAM-softmax from scratch on the speaker labels.
        include_finetune (bool): also fine-tune the contrastive student with AAM-softmax.
        finetune_epochs (int, optional): epochs of that fine-tuning; defaults to train_cfg.epochs.
        out_dir (str | Path, optional): receives comparison.json.

    Returns:
        ComparisonResult: EER per method and seed.
    """
    losses = [LossKind.parse(kind) for kind in losses]
    result = ComparisonResult(seeds=[int(s) for s in seeds])
    for seed in result.seeds:
        corpus = generate_corpus(replace(spec, seed=seed), workers=train_cfg.workers)
        result.teacher_eers.append(corpus.summary['teacher_eer'])
        init = replace(student, seed=seed)
        distilled = {}

        for kind in losses:
            net = StudentNet(init)
            train_distill(corpus.train, corpus.teacher, net, replace(train_cfg, loss=kind, seed=seed))
            distilled[kind] = net
            _record(result, kind.value, seed, net, corpus, train_cfg.workers)

        labels = dense_labels(corpus.labels)
        train_labels = {utt_id: labels[utt_id] for utt_id in corpus.train.ids()}
        if include_aam:
            net = StudentNet(init)
            finetune_supervised(corpus.train, train_labels, net, replace(train_cfg, loss=LossKind.AAM, seed=seed))
            _record(result, LossKind.AAM.value, seed, net, corpus, train_cfg.workers)

        if include_finetune and LossKind.CONTRASTIVE in distilled:
            net = distilled[LossKind.CONTRASTIVE].copy()
            epochs = finetune_epochs or train_cfg.epochs
            finetune_supervised(corpus.train, train_labels, net,
                                replace(train_cfg, loss=LossKind.AAM, seed=seed, epochs=epochs))
            _record(result, FINETUNE_METHOD, seed, net, corpus, train_cfg.workers)

    for method, median in result.median_eers().items():
        logger.summary(f"{method}: median EER {median:.4f} over seeds {result.seeds}")
    if out_dir is not None:
        path = Path(out_dir) / "comparison.json"
        atomic_write_bytes(path, (json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n").encode('utf-8'))
    return result


def _record(result: ComparisonResult, method, seed, net, corpus, workers):
    eer = run_trials(net, corpus.test, corpus.trials, workers=workers).eer
    result.eers.setdefault(method, []).append(eer)
    logger.info(f"seed {seed} {method}: EER {eer:.4f}")
