import math

import numpy as np
import pytest

from distillkit.config import TrialLabel
from distillkit.evalModule import (TrialPair, compute_eer, cosine_score, eer_from_scores, length_normalize,
                                   read_trials, run_trials, score_trials, write_trials)
from distillkit.featuresModule import FeatureArchive, FeatureMatrix
from distillkit.studentNet import StudentConfig, StudentNet
from utils.exceptions import DataError, DegenerateInputError

NET = StudentConfig(conv_layers=((3, 1, 8), (1, 1, 8)), embedding_dim=16, seed=2)


def _brute_force_eer(targets, nontargets):
    """
    Explicit O(n^2) sweep: count errors at every candidate threshold, then interpolate at the first
    threshold where false accepts no longer exceed false rejects.
    """
    targets = np.asarray(targets, dtype=np.float64)
    nontargets = np.asarray(nontargets, dtype=np.float64)
    candidates = np.append(np.unique(np.concatenate([targets, nontargets])), np.inf)
    frr = (targets[None, :] < candidates[:, None]).sum(axis=1) / targets.size
    far = (nontargets[None, :] >= candidates[:, None]).sum(axis=1) / nontargets.size
    for k in range(candidates.size):
        if far[k] - frr[k] <= 0:
            if far[k] == frr[k] or k == 0:
                return far[k]
            before, after = far[k - 1] - frr[k - 1], far[k] - frr[k]
            alpha = before / (before - after)
            return frr[k - 1] + alpha * (frr[k] - frr[k - 1])
    raise AssertionError("FAR never reached FRR")


def _scored(targets, nontargets):
    trials = [TrialPair(TrialLabel.TARGET, f"e{i}", f"t{i}") for i in range(len(targets))]
    trials += [TrialPair(TrialLabel.NONTARGET, f"e{i}", f"n{i}") for i in range(len(nontargets))]
    embeddings = {}
    for trial, score in zip(trials, list(targets) + list(nontargets)):
        embeddings[trial.enroll_id] = np.array([1.0, 0.0])
        embeddings[trial.test_id] = np.array([score, math.sqrt(1.0 - score * score)])
    return score_trials(embeddings, trials)


def test_eer_examples():
    assert eer_from_scores([0.9, 0.8], [0.2, 0.1]).eer == 0.0
    result = eer_from_scores([0.9, 0.8, 0.4], [0.5, 0.2, 0.1])
    print(f"EER {result.eer}, threshold {result.threshold}")
    assert result.eer == pytest.approx(1 / 3, abs=1e-12)
    assert eer_from_scores([0.7], [0.3]).eer == 0.0
    for n in (4, 5, 101):
        scores = np.random.default_rng(n).standard_normal(n)
        assert abs(eer_from_scores(scores, scores.copy()).eer - 0.5) < 1e-9


def test_compute_eer_from_scored_trials():
    scored = _scored([0.9, 0.8, 0.4], [0.5, 0.2, 0.1])
    assert all(-1 - 1e-6 <= s.score <= 1 + 1e-6 for s in scored)
    assert compute_eer(scored).eer == pytest.approx(1 / 3, abs=1e-9)


def test_eer_needs_both_classes():
    with pytest.raises(DataError):
        eer_from_scores([0.1, 0.2], [])
    with pytest.raises(DataError):
        eer_from_scores([], [0.3])


def test_eer_matches_brute_force_sweep():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n_targets = int(rng.integers(1, 1000))
        n_nontargets = int(rng.integers(1, 1001 - n_targets))
        targets = rng.normal(1.0, 1.0, n_targets)
        nontargets = rng.normal(0.0, 1.0, n_nontargets)
        if trial % 2:
            # coarse scores produce ties across classes
            targets, nontargets = np.round(targets, 1), np.round(nontargets, 1)
        fast = eer_from_scores(targets, nontargets).eer
        oracle = _brute_force_eer(targets, nontargets)
        assert abs(fast - oracle) < 1e-9, f"Set {trial}: {fast} != {oracle}"
        assert 0.0 <= fast <= 1.0


def test_eer_is_invariant_under_monotone_transforms():
    rng = np.random.default_rng(1)
    for _ in range(50):
        targets = rng.normal(0.5, 1.0, 200)
        nontargets = rng.normal(0.0, 1.0, 300)
        base = eer_from_scores(targets, nontargets).eer
        assert abs(eer_from_scores(np.exp(targets), np.exp(nontargets)).eer - base) < 1e-9
        assert abs(eer_from_scores(3 * targets - 2, 3 * nontargets - 2).eer - base) < 1e-9


def test_length_normalize():
    assert np.allclose(length_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    unit = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(length_normalize(unit), unit)
    v = np.random.default_rng(2).standard_normal(256)
    assert abs(np.linalg.norm(length_normalize(v)) - 1.0) < 1e-6
    with pytest.raises(DegenerateInputError):
        length_normalize(np.zeros(4))


def test_cosine_score():
    a = np.array([0.3, -2.0, 1.1])
    assert cosine_score(a, a) == pytest.approx(1.0, abs=1e-12)
    assert cosine_score([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_score([1.0, 0.0], np.array([1.0, 1.0]) / math.sqrt(2)) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)
    rng = np.random.default_rng(3)
    for _ in range(100):
        x, y = rng.standard_normal(16), rng.standard_normal(16)
        assert cosine_score(x, y) == cosine_score(y, x)
        assert abs(cosine_score(x, y)) <= 1 + 1e-6
    with pytest.raises(DegenerateInputError):
        cosine_score(np.zeros(3), a)


def test_trial_file(tmp_path):
    trials = [TrialPair(TrialLabel.TARGET, "a", "b"), TrialPair(0, "a", "c")]
    path = tmp_path / "trials.txt"
    write_trials(trials, path)
    assert path.read_text() == "1 a b\n0 a c\n"
    assert read_trials(path) == trials

    path.write_text("1 a b\n2 a c\n")
    with pytest.raises(DataError) as error:
        read_trials(path)
    assert ":2:" in error.value.message
    path.write_text("1 a\n")
    with pytest.raises(DataError):
        read_trials(path)
    with pytest.raises(DataError):
        TrialPair(TrialLabel.TARGET, "", "b")


def _archive(n_utterances=6, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureArchive({f"u{i}": FeatureMatrix(rng.standard_normal((40 + 7 * i, 80)).astype(np.float32))
                           for i in range(n_utterances)})


def _trials():
    return [TrialPair(1, "u0", "u1"), TrialPair(0, "u0", "u2"), TrialPair(1, "u3", "u4"),
            TrialPair(0, "u1", "u5"), TrialPair(0, "u2", "u4")]


def test_run_trials_reports_missing_ids():
    trials = _trials() + [TrialPair(1, "u0", "ghost"), TrialPair(0, "phantom", "u1")]
    with pytest.raises(DataError) as error:
        run_trials(StudentNet(NET), _archive(), trials)
    print(f"Missing-id error: {error.value.message}")
    assert error.value.missing_ids == ["ghost", "phantom"]
    assert "ghost" in error.value.message


def test_run_trials_is_deterministic(tmp_path):
    net = StudentNet(NET)
    archive = _archive()
    first = run_trials(net, archive, _trials(), workers=1, scores_out=tmp_path / "first.tsv")
    second = run_trials(net, archive, _trials(), workers=3, scores_out=tmp_path / "second.tsv")
    assert (tmp_path / "first.tsv").read_bytes() == (tmp_path / "second.tsv").read_bytes()
    assert first.eer == second.eer
    lines = (tmp_path / "first.tsv").read_text().splitlines()
    assert len(lines) == 5
    enroll, test, score, label = lines[0].split()
    assert (enroll, test, label) == ("u0", "u1", "1")
    assert float(score) == first.scored[0].score


def test_duplicated_trial_list(tmp_path):
    net = StudentNet(NET)
    archive = _archive()
    single = run_trials(net, archive, _trials(), scores_out=tmp_path / "single.tsv")
    double = run_trials(net, archive, _trials() + _trials(), scores_out=tmp_path / "double.tsv")
    assert double.eer == pytest.approx(single.eer, abs=1e-12)
    single_text = (tmp_path / "single.tsv").read_text()
    assert (tmp_path / "double.tsv").read_text() == single_text + single_text
