"""Participant-holdout cross-validation, metric tables, and paired protocol.

Folds partition participants, never frames: a held-out participant's data is
absent from the training split, except that their earliest neutral frames
may be used to build that participant's own personalization profile
(enrollment).  Enrollment frames are excluded from accuracy denominators in
both personalization modes so paired accuracies cover identical frames.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import training
from .errors import InputError, LeakageError
from .manifest import Sample
from .stats import TTestResult, paired_one_tailed_ttest


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict  # participant_id -> fold index

    def fold_participants(self, fold: int) -> list[int]:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def participants(self) -> list[int]:
        return sorted(self.assignment)


def make_folds(participants, k: int, seed: int = 0) -> FoldPlan:
    """Deterministic participant partition; fold sizes differ by at most one."""
    participants = sorted(set(participants))
    if k < 1:
        raise InputError("k must be >= 1")
    if k > len(participants):
        raise InputError(f"k={k} exceeds the {len(participants)} participants")
    order = np.random.default_rng([seed, 31]).permutation(len(participants))
    assignment = {participants[int(p)]: i % k for i, p in enumerate(order)}
    return FoldPlan(k=k, assignment=assignment)


@dataclass(frozen=True)
class EvaluationReport:
    classes: tuple[str, ...]
    confusion: np.ndarray  # rows = true, columns = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    mean_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float

    @staticmethod
    def from_confusion(classes, confusion: np.ndarray) -> "EvaluationReport":
        confusion = np.asarray(confusion, dtype=np.int64)
        c = len(classes)
        if confusion.shape != (c, c):
            raise InputError(f"confusion must be {c}x{c}, got {confusion.shape}")
        total = confusion.sum()
        if total == 0:
            raise InputError("empty evaluation: confusion matrix has no samples")
        support = confusion.sum(axis=1)
        predicted = confusion.sum(axis=0)
        tp = np.diag(confusion).astype(np.float64)
        precision = np.divide(tp, predicted, out=np.zeros(c), where=predicted > 0)
        recall = np.divide(tp, support, out=np.zeros(c), where=support > 0)
        pr = precision + recall
        f1 = np.divide(2 * precision * recall, pr, out=np.zeros(c), where=pr > 0)
        weights = support / total
        return EvaluationReport(
            classes=tuple(classes),
            confusion=confusion,
            precision=precision,
            recall=recall,
            f1=f1,
            support=support,
            mean_accuracy=float(tp.sum() / total),
            macro_precision=float(precision.mean()),
            macro_recall=float(recall.mean()),
            macro_f1=float(f1.mean()),
            weighted_precision=float((precision * weights).sum()),
            weighted_recall=float((recall * weights).sum()),
            weighted_f1=float((f1 * weights).sum()),
        )

    def to_json_obj(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "confusion": self.confusion.tolist(),
        }

    def csv_rows(self) -> list[tuple]:
        rows = [(c, float(self.precision[i]), float(self.recall[i]), float(self.f1[i]),
                 int(self.support[i])) for i, c in enumerate(self.classes)]
        return rows


@dataclass(frozen=True)
class SampleOutcome:
    participant_id: int
    session_id: int
    label: str
    predicted: str
    correct: bool


def predict(network, inputs: np.ndarray, batch: int = 64) -> np.ndarray:
    """Argmax class indices; np.argmax breaks ties toward the lowest index."""
    preds = []
    for start in range(0, len(inputs), batch):
        probs = network.forward_probs(inputs[start : start + batch][..., None])
        preds.append(probs.argmax(axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.intp)


def evaluate(
    checkpoint: training.ModelCheckpoint,
    samples: list[Sample],
    data_root,
    personalize_mode: bool,
    frame_rate: float = 10.0,
    exclude_enrollment: bool | None = None,
    inputs: np.ndarray | None = None,
) -> tuple[EvaluationReport, list[SampleOutcome]]:
    """Score a manifest; profiles come from each participant's own neutral frames.

    `exclude_enrollment` defaults to the personalization mode; pass True to
    drop enrollment neutrals from the denominators in both modes (required
    for paired comparisons).
    """
    if not samples:
        raise InputError("evaluation manifest is empty")
    label_set = checkpoint.label_set
    for s in samples:
        if s.label not in label_set:
            raise InputError(f"sample label {s.label!r} not in model label set {label_set.name!r}")
    if exclude_enrollment is None:
        exclude_enrollment = personalize_mode
    if inputs is None:
        inputs = training.load_inputs(samples, data_root, checkpoint.input_size)

    profiles = {}
    excluded: set[int] = set()
    if personalize_mode or exclude_enrollment:
        profiles = training.build_profiles(samples, inputs, frame_rate,
                                           require_all=personalize_mode)
        excluded = training.enrollment_indices(samples, profiles)

    keep = [i for i in range(len(samples)) if i not in excluded]
    if not keep:
        raise InputError("no evaluation frames remain after enrollment exclusion")
    frames = inputs[keep].copy()
    if personalize_mode:
        for j, i in enumerate(keep):
            frames[j] -= profiles[samples[i].key()].mean_neutral

    network = checkpoint.to_network()
    preds = predict(network, frames)
    c = label_set.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    outcomes = []
    for j, i in enumerate(keep):
        s = samples[i]
        t = label_set.index(s.label)
        p = int(preds[j])
        confusion[t, p] += 1
        outcomes.append(SampleOutcome(s.participant_id, s.session_id, s.label,
                                      label_set.classes[p], p == t))
    return EvaluationReport.from_confusion(label_set.classes, confusion), outcomes


# Paired personalization protocol ---------------------------------------------


@dataclass(frozen=True)
class PairedSamples:
    """One (with, without) accuracy pair per subject, collapsed from triplets.

    Accuracies are first collapsed within each (subject, session, condition)
    triplet, then averaged per subject with equal weight per triplet
    (aggregate="triplet") or per frame (aggregate="frame").
    """

    participant_ids: tuple[int, ...]
    with_personalization: tuple[float, ...]
    without_personalization: tuple[float, ...]

    def ttest(self) -> TTestResult:
        return paired_one_tailed_ttest(self.with_personalization, self.without_personalization)


def collapse_pairs(outcomes_with: list[SampleOutcome], outcomes_without: list[SampleOutcome],
                   aggregate: str = "triplet") -> PairedSamples:
    if aggregate not in ("triplet", "frame"):
        raise InputError("aggregate must be 'triplet' or 'frame'")

    def triplet_stats(outcomes):
        by_triplet: dict[tuple, list[bool]] = {}
        for o in outcomes:
            by_triplet.setdefault((o.participant_id, o.session_id, o.label), []).append(o.correct)
        return by_triplet

    a = triplet_stats(outcomes_with)
    b = triplet_stats(outcomes_without)
    if set(a) != set(b):
        raise InputError("paired outcomes cover different (subject, session, condition) triplets")
    per_subject: dict[int, tuple[list, list]] = {}
    for key in a:
        per_subject.setdefault(key[0], ([], []))
        per_subject[key[0]][0].append(a[key])
        per_subject[key[0]][1].append(b[key])

    pids, with_acc, without_acc = [], [], []
    for pid in sorted(per_subject):
        groups_a, groups_b = per_subject[pid]
        if aggregate == "triplet":
            with_acc.append(float(np.mean([np.mean(g) for g in groups_a])))
            without_acc.append(float(np.mean([np.mean(g) for g in groups_b])))
        else:
            with_acc.append(float(np.mean(np.concatenate([np.asarray(g) for g in groups_a]))))
            without_acc.append(float(np.mean(np.concatenate([np.asarray(g) for g in groups_b]))))
        pids.append(pid)
    return PairedSamples(tuple(pids), tuple(with_acc), tuple(without_acc))


# Cross-validation -------------------------------------------------------------


@dataclass
class CrossvalResult:
    fold_plan: FoldPlan
    fold_reports: dict  # mode -> list[EvaluationReport]
    pooled: dict  # mode -> EvaluationReport
    paired: PairedSamples | None
    ttest: TTestResult | None


def split_fold(samples: list[Sample], plan: FoldPlan, fold: int) -> tuple[list[Sample], list[Sample]]:
    test_pids = set(plan.fold_participants(fold))
    train = [s for s in samples if s.participant_id not in test_pids]
    test = [s for s in samples if s.participant_id in test_pids]
    return train, test


def assert_no_leakage(train_samples: list[Sample], test_participants) -> None:
    """The leakage detector: no held-out participant's frame may be trained on."""
    test_set = set(test_participants)
    for s in train_samples:
        if s.participant_id in test_set:
            raise LeakageError(
                f"participant {s.participant_id} is held out but sample "
                f"(session {s.session_id}, {s.label}, frame {s.frame_index}) is in the training split"
            )


def crossval(
    samples: list[Sample],
    data_root,
    config: training.TrainConfig,
    plan: FoldPlan,
    modes: tuple[bool, ...] = (False, True),
    aggregate: str = "triplet",
) -> CrossvalResult:
    """Train and evaluate each fold in each personalization mode.

    Pooled reports aggregate fold confusion matrices by summation.  When both
    modes run, per-subject paired accuracies feed the one-tailed t-test.
    """
    manifest_pids = {s.participant_id for s in samples}
    missing = manifest_pids - set(plan.participants())
    if missing:
        raise InputError(f"fold plan does not cover participants {sorted(missing)}")

    inputs = training.load_inputs(samples, data_root, config.input_size)
    index_of = {id(s): i for i, s in enumerate(samples)}
    mode_names = {False: "off", True: "on"}
    fold_reports: dict[str, list[EvaluationReport]] = {mode_names[m]: [] for m in modes}
    outcomes: dict[str, list[SampleOutcome]] = {mode_names[m]: [] for m in modes}
    pooled_confusion: dict[str, np.ndarray] = {}

    for fold in range(plan.k):
        train_samples, test_samples = split_fold(samples, plan, fold)
        if not test_samples:
            continue
        assert_no_leakage(train_samples, plan.fold_participants(fold))
        train_inputs = inputs[[index_of[id(s)] for s in train_samples]]
        test_inputs = inputs[[index_of[id(s)] for s in test_samples]]
        for m in modes:
            name = mode_names[m]
            cfg = dataclasses.replace(config, personalization=m)
            ckpt, _ = training.train(train_samples, data_root, cfg, inputs=train_inputs)
            report, outc = evaluate(ckpt, test_samples, data_root, personalize_mode=m,
                                    frame_rate=config.frame_rate, exclude_enrollment=True,
                                    inputs=test_inputs)
            fold_reports[name].append(report)
            outcomes[name].extend(outc)
            if name not in pooled_confusion:
                pooled_confusion[name] = report.confusion.copy()
            else:
                pooled_confusion[name] = pooled_confusion[name] + report.confusion

    pooled = {
        name: EvaluationReport.from_confusion(config.label_set.classes, conf)
        for name, conf in pooled_confusion.items()
    }
    paired = None
    ttest = None
    if False in modes and True in modes:
        paired = collapse_pairs(outcomes["on"], outcomes["off"], aggregate=aggregate)
        ttest = paired.ttest()
    return CrossvalResult(plan, fold_reports, pooled, paired, ttest)
