"""Class-wise average and old/new harmonic accuracy, end-of-step evaluation, rotation aggregation."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyEvaluation, EmptyTestDomain, ShapeMismatch
from .net import forward_features, forward_logits

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("seed", "step", "test_domain", "avg_acc", "harm_acc", "n_classes",
                  "old_acc", "new_acc")


def average_accuracy(predictions, labels, class_universe, micro=False):
    """Macro accuracy: per-class accuracy averaged over classes with test samples."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyEvaluation("no samples to evaluate")
    if micro:
        return float(np.mean(predictions == labels))
    per_class = []
    for c in class_universe:
        mask = labels == c
        if not mask.any():
            log.info("class %s has no evaluation samples; excluded from the average", c)
            continue
        per_class.append(np.mean(predictions[mask] == c))
    if not per_class:
        raise EmptyEvaluation("no class in the universe has samples")
    return float(np.mean(per_class))


def harmonic_accuracy(old_acc, new_acc):
    if old_acc + new_acc == 0:
        return 0.0
    return 2.0 * old_acc * new_acc / (old_acc + new_acc)


@dataclass
class StepReport:
    step: int
    test_domain: str
    average_accuracy: float
    harmonic_accuracy: float = None
    old_accuracy: float = None
    new_accuracy: float = None
    per_class: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.per_class)


def predict(model, inputs, classes):
    feats = forward_features(model, inputs, "eval", update_stats=False)
    logits = forward_logits(model.head, feats, classes).data
    return np.asarray(classes)[logits.argmax(axis=1)]


def evaluate_indices(model, scenario, t, idx, domain_name, micro=False):
    ds = scenario.dataset
    classes = scenario.classes_up_to(t)
    preds = predict(model, ds.x[idx], classes)
    labels = ds.y[idx]
    per_class = {int(c): float(np.mean(preds[labels == c] == c))
                 for c in classes if (labels == c).any()}
    report = StepReport(t, domain_name, average_accuracy(preds, labels, classes, micro),
                        per_class=per_class)
    if t > 0:
        old, new = scenario.old_classes(t), scenario.steps[t]
        old_mask = np.isin(labels, old)
        new_mask = np.isin(labels, new)
        if old_mask.any() and new_mask.any():
            report.old_accuracy = average_accuracy(preds[old_mask], labels[old_mask], old, micro)
            report.new_accuracy = average_accuracy(preds[new_mask], labels[new_mask], new, micro)
            report.harmonic_accuracy = harmonic_accuracy(report.old_accuracy,
                                                         report.new_accuracy)
    return report


def evaluate_step(model, scenario, t, micro=False):
    """Score ``model`` on the held-out domain over every class learnt up to step ``t``."""
    idx = scenario.test_indices(t)
    if idx.size == 0:
        raise EmptyTestDomain("the test domain has no samples for the learnt classes")
    name = scenario.dataset.domain_names[scenario.test_domain]
    return evaluate_indices(model, scenario, t, idx, name, micro)


def subtask_average(reports):
    """Collapse sub-task reports of one step into a single report by averaging."""
    first = reports[0]
    harms = [r.harmonic_accuracy for r in reports if r.harmonic_accuracy is not None]
    olds = [r.old_accuracy for r in reports if r.old_accuracy is not None]
    news = [r.new_accuracy for r in reports if r.new_accuracy is not None]
    return StepReport(first.step, first.test_domain,
                      float(np.mean([r.average_accuracy for r in reports])),
                      float(np.mean(harms)) if harms else None,
                      float(np.mean(olds)) if olds else None,
                      float(np.mean(news)) if news else None,
                      dict(reports[-1].per_class))


@dataclass
class RotationReport:
    per_domain: dict
    step_average: list
    step_harmonic: list
    domain_average: dict
    domain_harmonic: dict

    def to_dict(self):
        return {
            "per_domain": {d: [asdict(r) for r in rs] for d, rs in self.per_domain.items()},
            "step_average": self.step_average,
            "step_harmonic": self.step_harmonic,
            "domain_average": self.domain_average,
            "domain_harmonic": self.domain_harmonic,
        }


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate_rotations(reports):
    """Cross-domain means per step and per-domain means over all steps.

    ``reports`` maps a test-domain name to its list of step reports.
    """
    lengths = {len(rs) for rs in reports.values()}
    if len(lengths) != 1:
        raise ShapeMismatch(f"rotations have different step counts: {sorted(lengths)}")
    n = lengths.pop()
    step_avg, step_harm = [], []
    for t in range(n):
        step_avg.append(_mean_or_none([rs[t].average_accuracy for rs in reports.values()]))
        step_harm.append(_mean_or_none([rs[t].harmonic_accuracy for rs in reports.values()]))
    dom_avg = {d: _mean_or_none([r.average_accuracy for r in rs]) for d, rs in reports.items()}
    dom_harm = {d: _mean_or_none([r.harmonic_accuracy for r in rs]) for d, rs in reports.items()}
    return RotationReport(dict(reports), step_avg, step_harm, dom_avg, dom_harm)


def _fmt(value):
    return "" if value is None else repr(float(value))


def metric_rows(seed, reports):
    for domain, steps in reports.items():
        for r in steps:
            yield {"seed": seed, "step": r.step, "test_domain": domain,
                   "avg_acc": _fmt(r.average_accuracy), "harm_acc": _fmt(r.harmonic_accuracy),
                   "n_classes": r.n_classes, "old_acc": _fmt(r.old_accuracy),
                   "new_acc": _fmt(r.new_accuracy)}


def write_metrics_csv(path, rows):
    rows = sorted(rows, key=lambda r: (r["seed"], r["test_domain"], r["step"]))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_metrics_csv(path):
    """Parse a metrics CSV back into ``{seed: {domain: [StepReport, ...]}}``."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                as_float = lambda k: float(row[k]) if row[k] else None  # noqa: E731
                report = StepReport(int(row["step"]), row["test_domain"], float(row["avg_acc"]),
                                    as_float("harm_acc"), as_float("old_acc"), as_float("new_acc"))
                int(row["n_classes"])
            except (TypeError, ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            out.setdefault(int(row["seed"]), {}).setdefault(row["test_domain"], []).append(report)
    for per_seed in out.values():
        for steps in per_seed.values():
            steps.sort(key=lambda r: r.step)
    return out


def write_summary(path, per_seed):
    """JSON summary: one RotationReport per seed plus the seed mean of the aggregates."""
    seeds = {str(s): aggregate_rotations(r).to_dict() for s, r in sorted(per_seed.items())}
    aggs = [aggregate_rotations(r) for _, r in sorted(per_seed.items())]
    mean = {
        "step_average": [_mean_or_none(v) for v in zip(*[a.step_average for a in aggs])],
        "step_harmonic": [_mean_or_none(v) for v in zip(*[a.step_harmonic for a in aggs])],
        "domain_average": {d: _mean_or_none([a.domain_average[d] for a in aggs])
                           for d in aggs[0].domain_average},
        "domain_harmonic": {d: _mean_or_none([a.domain_harmonic[d] for a in aggs])
                            for d in aggs[0].domain_harmonic},
    }
    with open(path, "w") as fh:
        json.dump({"seeds": seeds, "mean_over_seeds": mean}, fh, indent=2, sort_keys=True)
        fh.write("\n")
