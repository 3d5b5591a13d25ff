"""Base and incremental training sessions, optimizers and checkpoint selection."""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NoCheckpoints, ShapeError
from .evaluation import (average_accuracy, evaluate_indices, evaluate_step, predict,
                         subtask_average)
from .losses import (LossConfig, classification_loss, distillation_loss, pair_masks,
                     pseudo_classification_loss, total_loss, trips_base, trips_incr)
from .net import (ClassifierHead, Model, Tape, backward, build_extractor, clone_freeze,
                  expand_head, forward_features)
from .prototypes import (DriftAccumulator, DriftConfig, accumulate_batch_drift,
                         current_prototypes, init_prototypes, isotropic, sample_pseudo)
from .stream import assemble_batch

log = logging.getLogger(__name__)

REFERENCE_LR = 5e-5
REFERENCE_MAX_ITERS = 5000
REFERENCE_PER_DOMAIN_BATCH = 32


@dataclass
class TrainConfig:
    lr: float = 1.25e-2
    max_iters: int = 500
    per_domain_batch: int = 8
    optimizer: str = "adam"
    val_period: int = 50
    seed: int = 0
    hidden: tuple = (64, 64)
    feature_dim: int = 32
    activation: str = "relu"
    batch_norm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    head_init_std: float = 0.01
    val_ratio: float = 0.8
    replace_when_short: bool = True
    losses: LossConfig = field(default_factory=LossConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.max_iters < 1 or self.per_domain_batch < 1:
            raise ValueError("learning rate, iteration budget and batch size must be positive")
        if not 1 <= self.val_period <= self.max_iters:
            raise ValueError("val_period must lie in [1, max_iters]")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer rule {self.optimizer!r}")


OPTIMIZERS = ("sgd", "momentum", "adam")


class Optimizer:
    """Stateful step rule over a name -> array parameter mapping (updates in place)."""

    def __init__(self, rule="adam", lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, momentum=0.9):
        if rule not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer rule {rule!r}")
        self.rule, self.lr = rule, lr
        self.beta1, self.beta2, self.eps, self.momentum = beta1, beta2, eps, momentum
        self.state = {}
        self.steps = 0

    def step(self, params, grads):
        self.steps += 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if self.rule == "sgd":
                p -= self.lr * g
            elif self.rule == "momentum":
                v = self.state.setdefault(name, np.zeros_like(p))
                v *= self.momentum
                v += g
                p -= self.lr * v
            else:
                m, v = self.state.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                m_hat = m / (1 - self.beta1 ** self.steps)
                v_hat = v / (1 - self.beta2 ** self.steps)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def optimizer_step(params, grads, rule="sgd", lr=1e-3, optimizer=None):
    opt = optimizer or Optimizer(rule, lr)
    return opt.step(params, grads)


@dataclass
class Checkpoint:
    iteration: int
    score: float
    model: Model
    prototypes: dict = None


def select_model(checkpoints):
    """Highest validation score; the earliest iteration wins ties."""
    if not checkpoints:
        raise NoCheckpoints("no checkpoints to select from")
    best = checkpoints[0]
    for ckpt in checkpoints[1:]:
        if ckpt.score > best.score or (ckpt.score == best.score
                                       and ckpt.iteration < best.iteration):
            best = ckpt
    return best


@dataclass
class SessionResult:
    step: int
    model: Model
    prototypes: dict
    curve: list
    selected_iteration: int
    validation_score: float
    scores: list
    pseudo_sizes: list = field(default_factory=list)
    pseudo_label_violations: int = 0
    subtask_reports: list = field(default_factory=list)


def _session_rngs(seed, step):
    init, batch, pseudo = np.random.SeedSequence([seed, step]).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(batch), np.random.default_rng(pseudo)


def validation_score(model, split, classes):
    """Class-wise accuracy on the pooled training-domain validation set."""
    idx = split.validation_indices(classes)
    if idx.size == 0:
        return 0.0
    ds = split.scenario.dataset
    return average_accuracy(predict(model, ds.x[idx], classes), ds.y[idx], classes)


def step_prototypes(model, split, step, alpha):
    """Fresh prototypes for the classes of ``step`` from the model's eval-mode features."""
    scenario = split.scenario
    ds = scenario.dataset
    by_class = {}
    for c in scenario.steps[step]:
        idx = np.concatenate([split.train_indices(z, [c]) for z in scenario.train_domains])
        split.counter.record(step, ds.y[idx], ds.z[idx])
        by_class[c] = forward_features(model, ds.x[idx], "eval", update_stats=False).data
    return init_prototypes(by_class, alpha, session=step)


def _curve_row(it, parts, total):
    row = {"iteration": it}
    for name in ("class", "pseudo", "trips", "dist"):
        value = parts.get(name)
        row[name] = None if value is None else float(getattr(value, "data", value))
    row["total"] = float(total.data)
    row["val_score"] = None
    return row


def run_base_session(split, cfg):
    """Train from scratch on the base classes with cross-entropy plus the triplet term."""
    scenario = split.scenario
    classes = scenario.steps[0]
    rng_init, rng_batch, _ = _session_rngs(cfg.seed, 0)
    extractor = build_extractor(scenario.dataset.dim, cfg.hidden, cfg.feature_dim,
                                cfg.activation, cfg.batch_norm, cfg.bn_momentum, cfg.bn_eps,
                                rng_init)
    head = expand_head(ClassifierHead.empty(cfg.feature_dim), classes, rng_init,
                       cfg.head_init_std)
    model = Model(extractor, head, session=0)
    opt = Optimizer(cfg.optimizer, cfg.lr)
    curve, checkpoints = [], []
    for it in range(1, cfg.max_iters + 1):
        batch = assemble_batch(split, 0, cfg.per_domain_batch, rng_batch, cfg.replace_when_short)
        model.extractor.train()
        tape = Tape(model)
        feats = forward_features(model, batch.x, "train", tape)
        parts = {
            "class": classification_loss(model.head, feats, batch.y, classes, tape),
            "trips": trips_base(feats, pair_masks(batch.y, batch.z), cfg.losses.margin),
        }
        loss = total_loss(0, parts, cfg.losses)
        opt.step(model.parameters(), backward(loss, tape))
        curve.append(_curve_row(it, parts, loss))
        if it % cfg.val_period == 0 or it == cfg.max_iters:
            model.extractor.eval()
            score = validation_score(model, split, classes)
            curve[-1]["val_score"] = score
            checkpoints.append(Checkpoint(it, score, copy.deepcopy(model)))
    best = select_model(checkpoints)
    best.model.extractor.eval()
    protos = step_prototypes(best.model, split, 0, cfg.drift.alpha)
    return SessionResult(0, best.model, protos, curve, best.iteration, best.score,
                         [(c.iteration, c.score) for c in checkpoints])


def run_incremental_session(prev, split, step, cfg, subtasks=False, on_subtask_end=None):
    """One incremental step: distill from the frozen previous model, rehearse with pseudo-features.

    With ``subtasks=True`` the iteration budget is cut into one chunk per
    training domain, each drawing batches from that domain alone, and
    ``on_subtask_end(model)`` is called after every chunk.
    """
    scenario = split.scenario
    new_classes = scenario.steps[step]
    old_classes = scenario.old_classes(step)
    seen = scenario.classes_up_to(step)
    rng_init, rng_batch, rng_pseudo = _session_rngs(cfg.seed, step)
    drift = cfg.drift

    snapshot = clone_freeze(prev.model)
    model = copy.deepcopy(prev.model)
    model.session = step
    expand_head(model.head, new_classes, rng_init, cfg.head_init_std)
    opt = Optimizer(cfg.optimizer, cfg.lr)

    base = {c: prev.prototypes[c] for c in old_classes}
    acc = DriftAccumulator.start(base)
    curve, checkpoints, sizes = [], [], []
    violations = 0
    subtask_reports = []
    domains = scenario.train_domains
    chunk = max(1, cfg.max_iters // len(domains))

    for it in range(1, cfg.max_iters + 1):
        if subtasks:
            z = domains[min((it - 1) // chunk, len(domains) - 1)]
            batch = assemble_batch(split, step, cfg.per_domain_batch * len(domains), rng_batch,
                                   cfg.replace_when_short, domains=[z])
        else:
            batch = assemble_batch(split, step, cfg.per_domain_batch, rng_batch,
                                   cfg.replace_when_short)
        if drift.track_drift:
            model.extractor.eval()
            accumulate_batch_drift(acc, model, snapshot, batch.x, drift)
        pseudo = None
        if drift.sampling:
            protos_now = current_prototypes(acc)
            if drift.covariance == "isotropic":
                protos_now = isotropic(protos_now, drift.radius)
            pseudo = sample_pseudo(protos_now, len(batch), rng_pseudo)
            sizes.append((len(pseudo), len(batch)))
            violations += int(np.isin(pseudo.labels, new_classes).sum())

        model.extractor.train()
        tape = Tape(model)
        feats = forward_features(model, batch.x, "train", tape)
        parts = {
            "class": classification_loss(model.head, feats, batch.y, seen, tape),
            "pseudo": (pseudo_classification_loss(model.head, pseudo, seen, tape)
                       if pseudo is not None else 0.0),
            "trips": trips_incr(feats, pair_masks(batch.y, batch.z), pseudo, cfg.losses.margin),
            "dist": distillation_loss(snapshot, model.head, feats, batch.x, old_classes, tape),
        }
        loss = total_loss(step, parts, cfg.losses)
        opt.step(model.parameters(), backward(loss, tape))
        curve.append(_curve_row(it, parts, loss))

        if subtasks and on_subtask_end is not None and (
                it == cfg.max_iters or (it % chunk == 0 and it // chunk < len(domains))):
            model.extractor.eval()
            subtask_reports.append(on_subtask_end(model))
        if it % cfg.val_period == 0 or it == cfg.max_iters:
            model.extractor.eval()
            score = validation_score(model, split, seen)
            curve[-1]["val_score"] = score
            protos = current_prototypes(acc, session=step) if acc.count else dict(base)
            checkpoints.append(Checkpoint(it, score, copy.deepcopy(model), protos))

    best = select_model(checkpoints)
    best.model.extractor.eval()
    protos = dict(best.prototypes)
    protos.update(step_prototypes(best.model, split, step, drift.alpha))
    return SessionResult(step, best.model, protos, curve, best.iteration, best.score,
                         [(c.iteration, c.score) for c in checkpoints], sizes, violations,
                         subtask_reports)


@dataclass
class ScenarioResult:
    sessions: list
    reports: list


def run_scenario(split, cfg, protocol="end_of_step", micro=False, on_session=None):
    """Base session plus every incremental step, evaluated on the held-out domain after each."""
    scenario = split.scenario
    sessions, reports = [], []
    result = run_base_session(split, cfg)
    for t in range(scenario.n_steps + 1):
        if t > 0:
            hook = None
            if protocol == "subtask":
                idx = scenario.test_indices(t)
                name = scenario.dataset.domain_names[scenario.test_domain]
                hook = lambda m, t=t, idx=idx, name=name: evaluate_indices(  # noqa: E731
                    m, scenario, t, idx, name, micro)
            result = run_incremental_session(result, split, t, cfg,
                                             subtasks=protocol == "subtask",
                                             on_subtask_end=hook)
        sessions.append(result)
        if protocol == "subtask" and result.subtask_reports:
            reports.append(subtask_average(result.subtask_reports))
        else:
            reports.append(evaluate_step(result.model, scenario, t, micro))
        if on_session is not None:
            on_session(result)
    return ScenarioResult(sessions, reports)
