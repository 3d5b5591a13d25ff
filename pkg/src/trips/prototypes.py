"""Per-class Gaussian prototypes, drift tracking across sessions, pseudo-feature sampling."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (DomainError, EmptyAccumulator, InsufficientSamples,
                     ModelModeError, NoOldClasses)
from .linalg import cholesky, shrink, symmetrize
from .losses import PseudoBatch
from .net import forward_features

log = logging.getLogger(__name__)

PROTO_VERSION = 1


@dataclass
class DriftConfig:
    sigma_bandwidth: float = 0.5
    eta: float = 0.1
    alpha: float = 0.05
    track_drift: bool = True
    sampling: bool = True
    covariance: str = "full"
    radius: float = 1.0

    def __post_init__(self):
        if self.sigma_bandwidth <= 0:
            raise DomainError("sigma_bandwidth must be positive")
        if not (0 <= self.eta <= 1 and 0 <= self.alpha <= 1):
            raise DomainError("eta and alpha must lie in [0, 1]")
        if self.covariance not in ("full", "isotropic"):
            raise DomainError(f"unknown covariance kind {self.covariance!r}")


class GaussianPrototype:
    """Mean and covariance of one class in feature space.

    The Cholesky factor is cached and dropped whenever ``sigma`` is reassigned.
    """

    def __init__(self, class_id, mu, sigma, session=0):
        self.class_id = int(class_id)
        self.mu = np.asarray(mu, dtype=np.float64)
        self.session = session
        self.sigma = sigma

    @property
    def sigma(self):
        return self._sigma

    @sigma.setter
    def sigma(self, value):
        self._sigma = np.asarray(value, dtype=np.float64)
        self._chol = None

    @property
    def chol(self):
        if self._chol is None:
            self._chol = cholesky(self._sigma)
        return self._chol

    @property
    def chol_cached(self):
        return self._chol is not None

    def __repr__(self):
        return f"GaussianPrototype(class_id={self.class_id}, d={self.mu.size}, session={self.session})"


def init_prototypes(features_by_class, alpha, session=0):
    """Empirical mean and shrunk 1/n covariance for each class."""
    protos = {}
    for c, feats in sorted(features_by_class.items()):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] < 2:
            raise InsufficientSamples(f"class {c} has {feats.shape[0]} feature vectors, need 2")
        mu = feats.mean(axis=0)
        centered = feats - mu
        cov = symmetrize(centered.T @ centered / feats.shape[0])
        proto = GaussianPrototype(c, mu, shrink(cov, alpha), session)
        proto.chol
        protos[c] = proto
    return protos


def drift_weight(old_feature, mu, sigma_bandwidth):
    diff = np.asarray(old_feature) - np.asarray(mu)
    return float(np.exp(-(diff @ diff) / (2.0 * sigma_bandwidth ** 2)))


def _normalized_weights(old_feats, mu, sigma_bandwidth):
    # log-domain normalisation: raw weights underflow for distant prototypes
    diff = old_feats - mu
    logw = -np.einsum("ij,ij->i", diff, diff) / (2.0 * sigma_bandwidth ** 2)
    w = np.exp(logw - logw.max())
    return w / w.sum()


@dataclass
class DriftAccumulator:
    """Running mean-drift and covariance estimates for the old classes of a session."""

    base: dict
    delta_mu: dict = field(default_factory=dict)
    sigma_ema: dict = field(default_factory=dict)
    count: int = 0

    @classmethod
    def start(cls, protos):
        return cls(base=protos,
                   delta_mu={c: np.zeros_like(p.mu) for c, p in protos.items()},
                   sigma_ema={c: p.sigma.copy() for c, p in protos.items()})


def accumulate_drift_features(acc, new_feats, old_feats, cfg):
    """One EMA update from a batch already mapped through both extractors."""
    new_feats = np.asarray(new_feats, dtype=np.float64)
    old_feats = np.asarray(old_feats, dtype=np.float64)
    delta_phi = new_feats - old_feats
    eta = cfg.eta
    for c, proto in acc.base.items():
        w = _normalized_weights(old_feats, proto.mu, cfg.sigma_bandwidth)
        batch_shift = w @ delta_phi
        acc.delta_mu[c] = eta * acc.delta_mu[c] + (1.0 - eta) * batch_shift
        centered = new_feats - (proto.mu + acc.delta_mu[c])
        cov = symmetrize((centered * w[:, None]).T @ centered)
        acc.sigma_ema[c] = eta * acc.sigma_ema[c] + (1.0 - eta) * shrink(cov, cfg.alpha)
    acc.count += 1
    return acc


def accumulate_batch_drift(acc, live, previous, inputs, cfg):
    """Update ``acc`` from a training batch passed through the live and previous models.

    Both extractors must be in eval mode so batch statistics do not leak into
    the drift estimate.
    """
    for name, model in (("live", live), ("previous", previous)):
        extractor = getattr(model, "extractor", model)
        if extractor.training:
            raise ModelModeError(f"{name} model is in train mode")
    new_feats = forward_features(live, inputs, "eval").data
    old_feats = forward_features(previous, inputs, "eval").data
    return accumulate_drift_features(acc, new_feats, old_feats, cfg)


def finalize_drift(acc, session=None):
    if acc.count < 1:
        raise EmptyAccumulator("no batches were accumulated")
    return current_prototypes(acc, session)


def current_prototypes(acc, session=None):
    """Prototypes implied by the accumulator state (the base set if it is empty)."""
    out = {}
    for c, proto in acc.base.items():
        sess = proto.session if session is None else session
        out[c] = GaussianPrototype(c, proto.mu + acc.delta_mu[c], acc.sigma_ema[c].copy(), sess)
    return out


def isotropic(protos, radius):
    """Replace every covariance by ``radius**2 * I`` (mean plus fixed radius)."""
    out = {}
    for c, p in protos.items():
        out[c] = GaussianPrototype(c, p.mu, radius ** 2 * np.eye(p.mu.size), p.session)
    return out


def sample_pseudo(protos, count, rng):
    """Draw ``count`` pseudo-features: class uniformly, then ``mu + L v`` with ``v ~ N(0, I)``."""
    classes = sorted(protos)
    if not classes:
        raise NoOldClasses("no old-class prototypes to sample from")
    if count < 1:
        raise DomainError("pseudo sample count must be >= 1")
    d = protos[classes[0]].mu.size
    picks = rng.integers(0, len(classes), size=count)
    noise = rng.standard_normal((count, d))
    feats = np.empty((count, d))
    for k, c in enumerate(classes):
        rows = picks == k
        feats[rows] = protos[c].mu + noise[rows] @ protos[c].chol.T
    labels = np.array(classes, dtype=np.int64)[picks]
    return PseudoBatch(feats, labels)


def save_prototypes(protos, path):
    classes = sorted(protos)
    arrays = {"format_version": np.array(PROTO_VERSION),
              "classes": np.array(classes, dtype=np.int64),
              "sessions": np.array([protos[c].session for c in classes], dtype=np.int64)}
    for c in classes:
        arrays[f"mu.{c}"] = protos[c].mu
        arrays[f"sigma.{c}"] = protos[c].sigma
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_prototypes(path):
    with np.load(path, allow_pickle=False) as data:
        if int(data["format_version"]) != PROTO_VERSION:
            raise ValueError("unsupported prototype store version")
        return {int(c): GaussianPrototype(int(c), data[f"mu.{c}"], data[f"sigma.{c}"], int(s))
                for c, s in zip(data["classes"], data["sessions"])}
