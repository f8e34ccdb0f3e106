import argparse
import sys
import time

from distillkit.config import LossKind, PoolingMode
from distillkit.evalModule import read_trials, run_trials
from distillkit.experimentModule import run_loss_comparison
from distillkit.featuresModule import extract_features_dir, read_archive, write_archive
from distillkit.runConfig import build_run_config, load_run_variables
from distillkit.statsModule import PipelineStats, ResourceMonitor
from distillkit.studentNet import STUDENT_PRESETS, StudentNet, load_checkpoint, measure_params_and_rtf
from distillkit.synthModule import generate_corpus, write_corpus
from distillkit.teacherStore import import_tsv, read_store, write_store
from distillkit.trainerModule import dense_labels, finetune_supervised, read_labels, train_distill
from utils.exceptions import ConfigError, DataError, FormatError, UsageError
from utils.logger_config import logger, loggerConfig

FORMATS = """file formats:
  FTR1 feature archive   magic "FTR1", u32 count, records (u16 id-len, id, u32 frames, u32 dim=80, float32 frames x dim)
  EMB1 teacher store     magic "EMB1", u32 dim, u32 count, records (u16 id-len, id, u32 dim, float32 x dim)
  NET1 checkpoint        magic "NET1", 32-byte config digest, u64 param count, float32 params; config in <ckpt>.json
  labels.tsv             utt-id<TAB>speaker-id per line
  trials.txt             <0|1> <enroll-id> <test-id> per line (1 = target)
  scores.tsv             <enroll-id> <test-id> <score> <label> per line
  report.jsonl           header record, then one record per epoch
environment:
  DISTILLKIT_LOG         console verbosity: DEBUG, INFO, SUMMARY, WARNING (default), ERROR
"""


class CliParser(argparse.ArgumentParser):
    """
    ArgumentParser that raises UsageError instead of exiting with status 2.
    """

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def _common_arguments():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="JSON run configuration (sections features, vad, augment, student, "
                                         "train, contrastive, aam, synth)")
    common.add_argument('--seed', type=int, help="single seed for every random stream")
    common.add_argument('--workers', type=int, help="worker threads (default: number of cores)")
    common.add_argument('--debug', action='store_true', help="print DEBUG records to stdout")
    common.add_argument('--log-file', help="also log to this file")
    common.add_argument('--logging', choices=['Short', 'Long'], default='Short',
                        help="log file detail: Short = summaries, Long = per-epoch events")
    return common


def _student_arguments(parser):
    parser.add_argument('--student', choices=list(STUDENT_PRESETS), help="student architecture preset")
    parser.add_argument('--pooling', choices=[mode.value for mode in PoolingMode], help="utterance pooling")


def _schedule_arguments(parser):
    parser.add_argument('--epochs', type=int, help="number of epochs (default 15)")
    parser.add_argument('--batch', dest='batch_size', type=int, help="batch size (default 64)")
    parser.add_argument('--lr-start', type=float, help="initial learning rate (default 0.1)")
    parser.add_argument('--lr-end', type=float, help="final learning rate (default 0.01)")
    parser.add_argument('--momentum', type=float, help="SGD momentum (default 0.9)")
    parser.add_argument('--subset-fraction', dest='epoch_subset_fraction', type=float,
                        help="share of the corpus drawn per epoch (default 1.0)")
    parser.add_argument('--max-grad-norm', type=float, help="gradient-norm clip per step, 0 disables (default 5.0)")
    parser.add_argument('--no-augment', action='store_true', help="crop only, no SpecAugment")


def _aam_arguments(parser):
    parser.add_argument('--aam-scale', dest='scale', type=float, help="AAM scale s (default 30)")
    parser.add_argument('--aam-margin', dest='margin', type=float, help="AAM margin m in radians (default 0.3)")
    parser.add_argument('--aam-warmup', dest='margin_warmup_epochs', type=int,
                        help="epochs trained with zero margin (default 30)")


def build_parser():
    parser = CliParser(prog='distillkit', description="Label-free knowledge distillation for speaker embeddings.",
                       epilog=FORMATS, formatter_class=argparse.RawDescriptionHelpFormatter)
    commands = parser.add_subparsers(dest='command', metavar='command')
    common = _common_arguments()

    def add(name, help_text):
        return commands.add_parser(name, help=help_text, description=help_text, parents=[common], epilog=FORMATS,
                                   formatter_class=argparse.RawDescriptionHelpFormatter)

    synth = add('synth', "Generate a synthetic corpus: feats.ftr1, test.ftr1, teacher.emb1, labels.tsv, "
                         "trials.txt, synth_summary.json.")
    synth.add_argument('--speakers', type=int, help="number of speakers K (default 40)")
    synth.add_argument('--utts', type=int, help="utterances per speaker U (default 50)")
    synth.add_argument('--teacher-dim', type=int, help="teacher embedding dim (default 256)")
    synth.add_argument('--sigma-t', type=float, help="within-speaker teacher noise (default 0.05)")
    synth.add_argument('--sigma-f', type=float, help="feature noise (default 1.0)")
    synth.add_argument('--domain-shift', type=float, help="spectral offset/tilt added to all features (default 0)")
    synth.add_argument('--out', required=True, help="output directory")

    features = add('features', "Extract fbank features (VAD + sliding CMN) from a directory of WAV files into FTR1.")
    features.add_argument('--wav-dir', required=True, help="directory searched recursively for *.wav")
    features.add_argument('--out', required=True, help="output FTR1 archive")
    features.add_argument('--window-ms', type=float, help="analysis window (default 25)")
    features.add_argument('--hop-ms', type=float, help="frame hop (default 10)")
    features.add_argument('--min-duration-s', type=float, help="skip shorter recordings (default 2.0)")
    features.add_argument('--cmn-window-s', type=float, help="sliding CMN window (default 3.0)")
    features.add_argument('--precision', choices=['float32', 'float64'], help="front-end precision")
    features.add_argument('--no-vad', action='store_true', help="keep every frame")

    importer = add('import-embeddings', "Convert id<TAB>v1,...,vD lines from an external extractor to EMB1.")
    importer.add_argument('--tsv', required=True, help="input TSV")
    importer.add_argument('--out', required=True, help="output EMB1 store")

    distill = add('distill', "Train a student on teacher embeddings without labels.")
    distill.add_argument('--features', required=True, help="training FTR1 archive")
    distill.add_argument('--teacher', required=True, help="teacher EMB1 store")
    distill.add_argument('--loss', choices=[k.value for k in LossKind if k.is_distillation],
                         help="distillation loss (default contrastive)")
    distill.add_argument('--temperature', type=float, help="contrastive temperature (default 0.1)")
    distill.add_argument('--init', help="start from this NET1 checkpoint")
    distill.add_argument('--out', required=True, help="output directory (last.net1, best.net1, report.jsonl)")
    _student_arguments(distill)
    _schedule_arguments(distill)

    finetune = add('finetune', "Supervised AAM-softmax training, from scratch or from a distilled checkpoint.")
    finetune.add_argument('--features', required=True, help="training FTR1 archive")
    finetune.add_argument('--labels', required=True, help="labels.tsv")
    finetune.add_argument('--init', help="start from this NET1 checkpoint")
    finetune.add_argument('--out', required=True, help="output directory")
    _student_arguments(finetune)
    _schedule_arguments(finetune)
    _aam_arguments(finetune)

    evaluate = add('evaluate', "Score a trial list with a student checkpoint and report the EER.")
    evaluate.add_argument('--ckpt', required=True, help="NET1 checkpoint")
    evaluate.add_argument('--features', required=True, help="evaluation FTR1 archive")
    evaluate.add_argument('--trials', required=True, help="trials.txt")
    evaluate.add_argument('--scores-out', help="per-trial scores.tsv")

    bench = add('bench', "Report parameter count and real-time factor of a student.")
    bench.add_argument('--ckpt', help="NET1 checkpoint (default: freshly initialized preset)")
    bench.add_argument('--seconds', type=float, default=10.0, help="input duration in seconds (default 10)")
    bench.add_argument('--runs', type=int, default=5, help="timed runs, median reported (default 5)")
    bench.add_argument('--warmups', type=int, default=2, help="untimed warmup runs (default 2)")
    _student_arguments(bench)

    compare = add('compare', "Seed-swept comparison of distillation losses and supervised AAM on synthetic data.")
    compare.add_argument('--speakers', type=int, help="number of speakers K (default 40)")
    compare.add_argument('--utts', type=int, help="utterances per speaker U (default 50)")
    compare.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help="sweep seeds")
    compare.add_argument('--no-aam', action='store_true', help="skip the supervised baseline")
    compare.add_argument('--finetune', action='store_true', help="also fine-tune the contrastive student with AAM")
    compare.add_argument('--out', help="directory for comparison.json")
    _student_arguments(compare)
    _schedule_arguments(compare)
    return parser


def _overrides(args):
    """
    Command-line values as config overrides; absent flags stay None and leave the config untouched.
    """
    def arg(name):
        return getattr(args, name, None)

    return {
        'seed': args.seed,
        'workers': args.workers,
        'synth': {'n_speakers': arg('speakers'), 'utts_per_speaker': arg('utts'), 'teacher_dim': arg('teacher_dim'),
                  'sigma_t': arg('sigma_t'), 'sigma_f': arg('sigma_f'), 'domain_shift': arg('domain_shift')},
        'features': {'window_ms': arg('window_ms'), 'hop_ms': arg('hop_ms'),
                     'min_duration_s': arg('min_duration_s'), 'cmn_window_s': arg('cmn_window_s'),
                     'precision': arg('precision'), 'use_vad': False if arg('no_vad') else None},
        'student': {'preset': arg('student'), 'pooling': arg('pooling')},
        'train': {'loss': arg('loss'), 'epochs': arg('epochs'), 'batch_size': arg('batch_size'),
                  'lr_start': arg('lr_start'), 'lr_end': arg('lr_end'), 'momentum': arg('momentum'),
                  'epoch_subset_fraction': arg('epoch_subset_fraction'),
                  'max_grad_norm': arg('max_grad_norm'),
                  'use_augment': False if arg('no_augment') else None},
        'contrastive': {'temperature': arg('temperature')},
        'aam': {'scale': arg('scale'), 'margin': arg('margin'), 'margin_warmup_epochs': arg('margin_warmup_epochs')},
    }


def _initial_net(args, run):
    if getattr(args, 'init', None):
        logger.info(f"Initializing from {args.init}")
        return load_checkpoint(args.init)
    return StudentNet(run.student)


def cmd_synth(args, run):
    corpus = generate_corpus(run.synth, workers=run.workers)
    write_corpus(corpus, args.out)
    summary = corpus.summary
    print(f"synthetic corpus: {summary['train_utterances']} train / {summary['test_utterances']} held-out utterances, "
          f"{len(corpus.trials)} trials")
    print(f"teacher EER: {summary['teacher_eer']:.6f}")


def cmd_features(args, run):
    stats = PipelineStats()
    archive = extract_features_dir(args.wav_dir, run.features, workers=run.workers, stats=stats)
    write_archive(archive, args.out)
    stats.log_statistics()
    print(f"features: {len(archive)} utterances written, {stats.skipped} skipped")


def cmd_import_embeddings(args, run):
    store = import_tsv(args.tsv)
    write_store(store, store.dim, args.out)
    print(f"embeddings: {len(store)} of dim {store.dim} written")


def cmd_distill(args, run):
    corpus = read_archive(args.features)
    teacher = read_store(args.teacher)
    net = _initial_net(args, run)
    report = train_distill(corpus, teacher, net, run.train, out_dir=args.out)
    print(f"distill ({run.train.loss.value}): final mean loss {report.mean_losses[-1]:.6f}, "
          f"checkpoint {report.checkpoint_path}")


def cmd_finetune(args, run):
    corpus = read_archive(args.features)
    names = read_labels(args.labels)
    missing = [utt_id for utt_id in corpus.ids() if utt_id not in names]
    if missing:
        raise DataError(f"{len(missing)} utterances have no label: {', '.join(missing[:10])}", missing_ids=missing)
    labels = dense_labels({utt_id: names[utt_id] for utt_id in corpus.ids()})
    net = _initial_net(args, run)
    report = finetune_supervised(corpus, labels, net, run.train, out_dir=args.out)
    print(f"finetune (aam): final mean loss {report.mean_losses[-1]:.6f}, checkpoint {report.checkpoint_path}")


def cmd_evaluate(args, run):
    net = load_checkpoint(args.ckpt)
    archive = read_archive(args.features)
    trials = read_trials(args.trials)
    result = run_trials(net, archive, trials, workers=run.workers, scores_out=args.scores_out)
    print(f"EER: {result.eer:.6f}")
    print(f"threshold: {result.threshold:.6f}")


def cmd_bench(args, run):
    net = load_checkpoint(args.ckpt) if args.ckpt else StudentNet(run.student)
    monitor = ResourceMonitor()
    result = measure_params_and_rtf(net, seconds=args.seconds, runs=args.runs, warmups=args.warmups)
    monitor.log_statistics()
    print(f"parameters: {result['param_count']}")
    print(f"RTF: {result['rtf']:.6f}")


def cmd_compare(args, run):
    result = run_loss_comparison(run.synth, run.student, run.train, seeds=args.seeds,
                                 include_aam=not args.no_aam, include_finetune=args.finetune, out_dir=args.out)
    for method, median in sorted(result.median_eers().items()):
        print(f"{method}: median EER {median:.6f}")
    if 'contrastive' in result.eers:
        print(f"ordering contrastive <= cos <= mse: {result.ordering_holds()}")


COMMANDS = {
    'synth': cmd_synth,
    'features': cmd_features,
    'import-embeddings': cmd_import_embeddings,
    'distill': cmd_distill,
    'finetune': cmd_finetune,
    'evaluate': cmd_evaluate,
    'bench': cmd_bench,
    'compare': cmd_compare,
}


def dispatch(argv=None):
    """
    Runs one command.

    Returns:
        int: 0 on success, 1 on usage or configuration errors, 2 on data, format or file system errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"no command given\n{parser.format_usage().rstrip()}")
        loggerConfig.output_console()
        if args.debug:
            loggerConfig.output_debug()
        if args.log_file:
            loggerConfig.output_to_file(args.log_file, args.logging)

        overrides = _overrides(args)
        if args.command == 'finetune':
            overrides['train']['loss'] = LossKind.AAM.value
        run = build_run_config(load_run_variables(args.config), overrides)
        start_time = time.time()
        COMMANDS[args.command](args, run)
        logger.summary("--- %s finished in %.2f seconds ---" % (args.command, time.time() - start_time))
        return 0
    except (UsageError, ConfigError) as e:
        print(f"error: {e.message}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"error: {e.message}", file=sys.stderr)
        if e.missing_ids:
            print(f"missing ids: {' '.join(e.missing_ids[:10])}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    finally:
        loggerConfig.release_run_handlers()


def main():
    """
    Entry point of the distillkit command.
    """
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
