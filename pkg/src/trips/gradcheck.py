"""Finite-difference verification of every training loss against reverse-mode gradients."""

import copy
from dataclasses import dataclass

import numpy as np

from .losses import (LossConfig, PseudoBatch, classification_loss, distillation_loss,
                     pair_masks, pseudo_classification_loss, total_loss, trips_base,
                     trips_incr)
from .net import ClassifierHead, Model, Tape, build_extractor, clone_freeze, expand_head, forward_features

LOSS_NAMES = ("classification", "distillation", "trips_base", "pseudo", "trips_incr", "total")
STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-5


@dataclass
class Instance:
    model: Model
    snapshot: object
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    old: list
    seen: list
    pseudo: PseudoBatch


def random_instance(rng, max_n=8, max_d=6, max_classes=5, in_dim=4, hidden=5):
    """Small random model, batch and pseudo set (tanh layers keep the loss smooth)."""
    d = int(rng.integers(3, max_d + 1))
    n_classes = int(rng.integers(3, max_classes + 1))
    n_old = int(rng.integers(1, n_classes - 1))
    seen = list(range(n_classes))
    old, new = seen[:n_old], seen[n_old:]
    extractor = build_extractor(in_dim, (hidden,), d, "tanh", True, rng=rng)
    extractor.norm.scale = rng.uniform(0.5, 1.5, d)
    extractor.norm.shift = rng.normal(0, 0.3, d)
    head = expand_head(ClassifierHead.empty(d), old, rng, init_std=0.5)
    head.bias = rng.normal(0, 0.3, n_old)
    model = Model(extractor, head, session=1)
    snapshot = clone_freeze(model)
    for p in model.parameters().values():
        p += rng.normal(0, 0.1, p.shape)
    expand_head(model.head, new, rng, init_std=0.5)
    model.head.bias[n_old:] = rng.normal(0, 0.3, len(new))
    n = int(rng.integers(4, max_n + 1))
    x = rng.normal(size=(n, in_dim))
    y = rng.choice(new, size=n)
    z = rng.integers(0, 3, size=n)
    pseudo = PseudoBatch(rng.normal(size=(n, d)) * 1.5, rng.choice(old, size=n))
    return Instance(model, snapshot, x, y, z, old, seen, pseudo)


def loss_value(name, inst, model, tape=None, cfg=None):
    cfg = cfg or LossConfig()
    feats = forward_features(model, inst.x, "train", tape, update_stats=False)
    masks = pair_masks(inst.y, inst.z)
    if name == "classification":
        return classification_loss(model.head, feats, inst.y, inst.seen, tape)
    if name == "distillation":
        return distillation_loss(inst.snapshot, model.head, feats, inst.x, inst.old, tape)
    if name == "trips_base":
        return trips_base(feats, masks)
    if name == "pseudo":
        return pseudo_classification_loss(model.head, inst.pseudo, inst.seen, tape)
    if name == "trips_incr":
        return trips_incr(feats, masks, inst.pseudo)
    if name == "total":
        parts = {
            "class": classification_loss(model.head, feats, inst.y, inst.seen, tape),
            "pseudo": pseudo_classification_loss(model.head, inst.pseudo, inst.seen, tape),
            "trips": trips_incr(feats, masks, inst.pseudo),
            "dist": distillation_loss(inst.snapshot, model.head, feats, inst.x, inst.old, tape),
        }
        return total_loss(1, parts, cfg)
    raise KeyError(name)


def analytic_gradients(name, inst):
    tape = Tape(inst.model)
    loss_value(name, inst, inst.model, tape).backward()
    return tape.gradients()


def numeric_gradients(name, inst, h=STEP):
    model = copy.deepcopy(inst.model)
    grads = {}
    for pname, param in model.parameters().items():
        g = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + h
            up = loss_value(name, inst, model).item()
            param[idx] = orig - h
            down = loss_value(name, inst, model).item()
            param[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads[pname] = g
    return grads


def relative_error(analytic, numeric, floor=FLOOR):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@dataclass
class CheckResult:
    loss: str
    max_error: float
    worst_param: str
    worst_index: tuple

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def check_loss(name, rng, instances=20, corrupt=False):
    worst = CheckResult(name, 0.0, "", ())
    for _ in range(instances):
        inst = random_instance(rng)
        analytic = analytic_gradients(name, inst)
        numeric = numeric_gradients(name, inst)
        for pname, a in analytic.items():
            if corrupt:
                a = a * 1.01 + 1e-3
            err = relative_error(a, numeric[pname])
            if err.size and err.max() > worst.max_error:
                idx = np.unravel_index(err.argmax(), err.shape)
                worst = CheckResult(name, float(err.max()), pname, tuple(int(i) for i in idx))
    return worst


def run_gradcheck(seed=0, instances=20, corrupt=None, losses=LOSS_NAMES):
    rng = np.random.default_rng(seed)
    return [check_loss(name, rng, instances, corrupt == name) for name in losses]
