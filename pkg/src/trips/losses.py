"""Training objectives: cross-entropy, distillation, domain-suppressing triplet losses.

All losses return scalar ``Tensor`` values so they can be combined and
differentiated. Class-id arguments are global ids; the head maps them to rows.
"""

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, concat, pairwise_sq_dist
from .errors import EmptyOldClassSet, EmptyPseudoBatch, MissingTerm
from .linalg import stable_softmax
from .net import forward_features, forward_logits


@dataclass
class LossConfig:
    margin: float = 0.0
    lambda_trips: float = 1.0
    lambda_dist: float = 30.0

    def __post_init__(self):
        if min(self.margin, self.lambda_trips, self.lambda_dist) < 0:
            raise ValueError("loss weights and margin must be non-negative")


@dataclass
class PseudoBatch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))


@dataclass
class PairMasks:
    positive: np.ndarray
    negative: np.ndarray


def _label_positions(class_set, labels):
    index = {c: i for i, c in enumerate(class_set)}
    return np.array([index[int(y)] for y in labels], dtype=np.intp)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of ``targets`` (column positions)."""
    logp = logits.log_softmax(axis=1)
    picked = logp[np.arange(len(targets)), targets]
    return -picked.mean()


def classification_loss(head, feats, labels, class_set, tape=None):
    """Softmax cross-entropy with the denominator over every class in ``class_set``."""
    class_set = list(class_set)
    logits = forward_logits(head, feats, class_set, tape)
    return cross_entropy(logits, _label_positions(class_set, labels))


def distillation_from_logits(teacher_logits, student_logits):
    teacher = stable_softmax(np.asarray(teacher_logits), axis=1)
    logq = student_logits.log_softmax(axis=1)
    return -(logq * teacher).sum(axis=1).mean()


def distillation_loss(snapshot, head, feats, inputs, old_classes, tape=None):
    """Cross-entropy from the frozen previous model to the live one over old classes.

    Both softmaxes are restricted to ``old_classes``. The snapshot runs in eval
    mode and contributes constants only.
    """
    old_classes = list(old_classes)
    if not old_classes:
        raise EmptyOldClassSet("distillation needs at least one old class")
    teacher = forward_logits(snapshot.head, forward_features(snapshot, inputs, "eval"),
                             old_classes).data
    student = forward_logits(head, feats, old_classes, tape)
    return distillation_from_logits(teacher, student)


def pair_masks(labels, domains):
    y = np.asarray(labels)
    z = np.asarray(domains)
    same_y = y[:, None] == y[None, :]
    same_z = z[:, None] == z[None, :]
    return PairMasks(positive=same_y & ~same_z, negative=~same_y & same_z)


def _hard_triplet(dist, pos_mask, neg_dist, neg_mask, margin):
    d = dist.data
    has_pos = pos_mask.any(axis=1)
    has_neg = neg_mask.any(axis=1)
    anchors = np.flatnonzero(has_pos & has_neg)
    if anchors.size == 0:
        return Tensor(0.0)
    hard_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)[anchors]
    hard_neg = np.where(neg_mask, neg_dist.data, np.inf).argmin(axis=1)[anchors]
    term = (dist[anchors, hard_pos] - neg_dist[anchors, hard_neg] + margin).relu()
    return term.sum() * (1.0 / anchors.size)


def trips_base(feats, masks, margin=0.0):
    """Batch-hard triplet loss over cross-domain positives and same-domain negatives.

    Anchors with no positive or no negative partner are skipped and do not
    count toward the mean.
    """
    dist = pairwise_sq_dist(feats, feats)
    return _hard_triplet(dist, masks.positive, dist, masks.negative, margin)


def trips_incr(feats, masks, pseudo, margin=0.0):
    """``trips_base`` with every pseudo-feature added as a negative for every anchor."""
    if pseudo is None or len(pseudo) == 0:
        return trips_base(feats, masks, margin)
    dist = pairwise_sq_dist(feats, feats)
    pseudo_dist = pairwise_sq_dist(feats, Tensor(pseudo.features))
    neg_dist = concat([dist, pseudo_dist], axis=1)
    neg_mask = np.hstack([masks.negative, np.ones(pseudo_dist.shape, dtype=bool)])
    return _hard_triplet(dist, masks.positive, neg_dist, neg_mask, margin)


def pseudo_classification_loss(head, pseudo, class_set, tape=None):
    """Cross-entropy of the head on pseudo-features; only head parameters get gradient."""
    if pseudo is None or len(pseudo) == 0:
        raise EmptyPseudoBatch("no pseudo-features to classify")
    return classification_loss(head, Tensor(pseudo.features), pseudo.labels, class_set, tape)


BASE_TERMS = ("class", "trips")
INCR_TERMS = ("class", "pseudo", "trips", "dist")


def total_loss(step, parts, cfg):
    """Combine loss terms for a session.

    Step 0 needs ``class`` and ``trips``; later steps need ``class``, ``pseudo``,
    ``trips`` and ``dist``. Terms may be tensors or plain floats.
    """
    required = BASE_TERMS if step == 0 else INCR_TERMS
    missing = [name for name in required if name not in parts]
    if missing:
        raise MissingTerm(f"missing loss terms for step {step}: {missing}")
    total = parts["class"] + cfg.lambda_trips * parts["trips"]
    if step > 0:
        total = total + parts["pseudo"] + cfg.lambda_dist * parts["dist"]
    return total
