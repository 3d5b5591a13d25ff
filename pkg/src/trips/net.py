"""Feed-forward feature extractor with feature batch norm and a per-class linear head.

Parameters live as plain numpy arrays on the model objects. A ``Tape`` wraps
them as gradient-tracking leaves for one forward/backward pass; without a tape
the forward pass is gradient-free.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import DuplicateClass, ShapeError, UnknownClass

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class BatchNormState:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, dim, momentum=0.1, eps=1e-5):
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim), momentum, eps)


@dataclass
class FeatureExtractor:
    weights: list
    biases: list
    activations: list
    norm: BatchNormState = None
    training: bool = True

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameters(self):
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"layers.{i}.weight"] = w
            params[f"layers.{i}.bias"] = b
        if self.norm is not None:
            params["norm.scale"] = self.norm.scale
            params["norm.shift"] = self.norm.shift
        return params


@dataclass
class ClassifierHead:
    classes: list
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def empty(cls, dim):
        return cls([], np.zeros((0, dim)), np.zeros(0))

    @property
    def dim(self):
        return self.weight.shape[1]

    def rows(self, class_set):
        index = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([index[c] for c in class_set], dtype=np.intp)
        except KeyError as exc:
            raise UnknownClass(f"class {exc.args[0]} is not registered in the head") from None

    def parameters(self):
        return {"head.weight": self.weight, "head.bias": self.bias}


@dataclass
class Model:
    extractor: FeatureExtractor
    head: ClassifierHead
    session: int = 0

    def parameters(self):
        params = self.extractor.parameters()
        params.update(self.head.parameters())
        return params


@dataclass(frozen=True)
class ModelSnapshot:
    model: Model
    session: int
    frozen: bool = True

    @property
    def extractor(self):
        return self.model.extractor

    @property
    def head(self):
        return self.model.head


@dataclass
class Tape:
    """Gradient-tracking leaves for every trainable array of a model."""

    model: Model
    leaves: dict = field(default_factory=dict)

    def __post_init__(self):
        self.leaves = {name: Tensor(value, requires_grad=True)
                       for name, value in self.model.parameters().items()}

    def get(self, name, value):
        leaf = self.leaves.get(name)
        return leaf if leaf is not None and leaf.data is value else Tensor(value)

    def gradients(self):
        return {name: (np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad)
                for name, leaf in self.leaves.items()}


def _param(tape, name, value):
    return Tensor(value) if tape is None else tape.get(name, value)


def build_extractor(in_dim, hidden=(64, 64), out_dim=32, activation="relu",
                    batch_norm=True, momentum=0.1, eps=1e-5, rng=None):
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng() if rng is None else rng
    dims = [in_dim, *hidden, out_dim]
    weights, biases, acts = [], [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        act = "identity" if last else activation
        gain = 2.0 if act == "relu" else 1.0
        weights.append(rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        acts.append(act)
    norm = BatchNormState.fresh(out_dim, momentum, eps) if batch_norm else None
    return FeatureExtractor(weights, biases, acts, norm)


def _batch_norm(h, norm, mode, tape, update_stats):
    scale = _param(tape, "norm.scale", norm.scale)
    shift = _param(tape, "norm.shift", norm.shift)
    if mode == "train":
        n = h.shape[0]
        if n < 2:
            raise ShapeError("train-mode batch norm needs at least two samples")
        mean = h.mean(axis=0, keepdims=True)
        centered = h - mean
        var = (centered * centered).mean(axis=0, keepdims=True)
        if update_stats:
            m = norm.momentum
            norm.running_mean = (1 - m) * norm.running_mean + m * mean.data[0]
            norm.running_var = (1 - m) * norm.running_var + m * var.data[0] * n / (n - 1)
        normed = centered / (var + norm.eps).sqrt()
    else:
        normed = (h - norm.running_mean) * (1.0 / np.sqrt(norm.running_var + norm.eps))
    return normed * scale + shift


def _rowwise_matmul(a, w):
    # BLAS picks different kernels for different row counts, which changes the
    # last bits. einsum's plain loop reduces each row the same way every time.
    return np.einsum("ni,io->no", a, w, optimize=False)


def forward_features(model, batch, mode=None, tape=None, update_stats=True):
    """Map inputs ``(n, in_dim)`` to normalized features ``(n, d)``.

    ``mode`` defaults to the extractor's own ``training`` flag. Train mode uses
    batch statistics and refreshes the running estimates; eval mode only reads
    them.
    """
    if isinstance(model, ModelSnapshot):
        update_stats = False
    extractor = model.extractor if isinstance(model, (Model, ModelSnapshot)) else model
    mode = mode or ("train" if extractor.training else "eval")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != extractor.in_dim:
        raise ShapeError(f"expected inputs (n, {extractor.in_dim}), got {x.shape}")
    rowwise = mode == "eval" and tape is None
    h = x
    for i, (w, b, act) in enumerate(zip(extractor.weights, extractor.biases,
                                        extractor.activations)):
        if rowwise:
            h = Tensor(_rowwise_matmul(h.data, w) + b)
        else:
            h = h @ _param(tape, f"layers.{i}.weight", w) + _param(tape, f"layers.{i}.bias", b)
        if act == "relu":
            h = h.relu()
        elif act == "tanh":
            h = h.tanh()
    if extractor.norm is not None:
        h = _batch_norm(h, extractor.norm, mode, tape, update_stats)
    return h


def forward_logits(head, feats, class_set, tape=None):
    """Logits ``feats @ theta_c + b_c`` for each class id in ``class_set``."""
    rows = head.rows(class_set)
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    if feats.shape[-1] != head.dim:
        raise ShapeError(f"feature dim {feats.shape[-1]} != head dim {head.dim}")
    weight = _param(tape, "head.weight", head.weight)[rows]
    bias = _param(tape, "head.bias", head.bias)[rows]
    return feats @ weight.T + bias


def backward(loss, tape):
    """Run reverse mode from a scalar loss and return parameter-shaped gradients."""
    loss.backward()
    return tape.gradients()


def clone_freeze(model):
    snap = copy.deepcopy(model)
    snap.extractor.eval()
    for value in snap.parameters().values():
        value.flags.writeable = False
    return ModelSnapshot(snap, model.session)


def expand_head(head, new_classes, rng=None, init_std=0.01):
    """Register ``new_classes`` in place, leaving existing rows untouched.

    New rows are drawn from N(0, init_std^2); ``init_std=0`` gives zero rows.
    Biases of new rows start at zero.
    """
    new_classes = list(new_classes)
    clash = set(new_classes) & set(head.classes)
    if clash or len(set(new_classes)) != len(new_classes):
        raise DuplicateClass(f"classes already registered: {sorted(clash) or new_classes}")
    k = len(new_classes)
    if init_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        rows = rng.normal(0.0, init_std, size=(k, head.dim))
    else:
        rows = np.zeros((k, head.dim))
    head.weight = np.vstack([head.weight, rows])
    head.bias = np.concatenate([head.bias, np.zeros(k)])
    head.classes = head.classes + new_classes
    return head


def save_checkpoint(model, path):
    ext = model.extractor
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "session": np.array(model.session),
        "activations": np.array(ext.activations),
        "classes": np.array(model.head.classes, dtype=np.int64),
        "has_norm": np.array(ext.norm is not None),
    }
    arrays.update(model.parameters())
    if ext.norm is not None:
        arrays["norm.running_mean"] = ext.norm.running_mean
        arrays["norm.running_var"] = ext.norm.running_var
        arrays["norm.momentum"] = np.array(ext.norm.momentum)
        arrays["norm.eps"] = np.array(ext.norm.eps)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        acts = [str(a) for a in data["activations"]]
        weights = [data[f"layers.{i}.weight"] for i in range(len(acts))]
        biases = [data[f"layers.{i}.bias"] for i in range(len(acts))]
        norm = None
        if bool(data["has_norm"]):
            norm = BatchNormState(data["norm.scale"], data["norm.shift"],
                                  data["norm.running_mean"], data["norm.running_var"],
                                  float(data["norm.momentum"]), float(data["norm.eps"]))
        head = ClassifierHead([int(c) for c in data["classes"]],
                              data["head.weight"], data["head.bias"])
        return Model(FeatureExtractor(weights, biases, acts, norm, training=False),
                     head, int(data["session"]))
