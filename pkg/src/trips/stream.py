"""Scenarios, synthetic multi-domain data, CSV ingestion, splits and batch assembly."""

import csv
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, EmptyDomain, ExhaustedDomain,
                     InsufficientClasses, ParseError, UnknownDomain)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    class_names: list
    domain_names: list
    latent: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    @property
    def dim(self):
        return self.x.shape[1]

    def domain_id(self, domain):
        if isinstance(domain, str):
            if domain not in self.domain_names:
                raise UnknownDomain(f"unknown domain {domain!r}")
            return self.domain_names.index(domain)
        if not 0 <= int(domain) < len(self.domain_names):
            raise UnknownDomain(f"unknown domain id {domain}")
        return int(domain)


@dataclass
class SyntheticConfig:
    n_classes: int = 8
    n_domains: int = 4
    input_dim: int = 16
    center_spread: float = 4.0
    transform_scale: float = 0.3
    noise_std: float = 1.0
    samples_per_cell: int = 60
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.n_domains, self.input_dim, self.samples_per_cell) < 1:
            raise ValueError("synthetic counts must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def _domain_transform(rng, dim, scale):
    while True:
        a = np.eye(dim) + scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        if np.linalg.cond(a) < 1e3:
            return a


def synth_generate(cfg):
    """Latent class centers pushed through a per-domain affine map plus noise.

    ``noise_std`` is the RMS norm of the latent noise vector (per-coordinate
    std ``noise_std / sqrt(input_dim)``). Centers are rescaled so the closest
    pair is at least ``4 * noise_std`` apart. Domain ``z`` maps a latent point
    ``u`` to ``A_z u + b_z``.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.input_dim
    centers = rng.standard_normal((cfg.n_classes, d)) * cfg.center_spread / np.sqrt(d)
    if cfg.n_classes > 1 and cfg.noise_std > 0:
        gaps = np.linalg.norm(centers[:, None] - centers[None], axis=2)
        closest = gaps[~np.eye(cfg.n_classes, dtype=bool)].min()
        if closest < 4.0 * cfg.noise_std:
            centers *= 4.0 * cfg.noise_std / closest
    maps = [_domain_transform(rng, d, cfg.transform_scale) for _ in range(cfg.n_domains)]
    offsets = [cfg.transform_scale * cfg.center_spread * rng.standard_normal(d) / np.sqrt(d)
               for _ in range(cfg.n_domains)]
    xs, ys, zs, latents = [], [], [], []
    per_coord = cfg.noise_std / np.sqrt(d)
    for z in range(cfg.n_domains):
        for c in range(cfg.n_classes):
            u = centers[c] + per_coord * rng.standard_normal((cfg.samples_per_cell, d))
            latents.append(u)
            xs.append(u @ maps[z].T + offsets[z])
            ys.append(np.full(cfg.samples_per_cell, c))
            zs.append(np.full(cfg.samples_per_cell, z))
    ds = Dataset(np.vstack(xs), np.concatenate(ys), np.concatenate(zs),
                 [f"c{c}" for c in range(cfg.n_classes)],
                 [f"d{z}" for z in range(cfg.n_domains)], np.vstack(latents))
    ds.meta.update(centers=centers, maps=maps, offsets=offsets)
    return ds


@dataclass
class Scenario:
    dataset: Dataset
    steps: list
    train_domains: list
    test_domain: int
    seed: int = 0

    @property
    def n_steps(self):
        return len(self.steps) - 1

    def classes_up_to(self, t):
        return [c for s in self.steps[:t + 1] for c in s]

    def old_classes(self, t):
        return self.classes_up_to(t - 1) if t > 0 else []

    def indices(self, domains, classes):
        ds = self.dataset
        keep = np.isin(ds.z, list(domains)) & np.isin(ds.y, list(classes))
        return np.flatnonzero(keep)

    def test_indices(self, t):
        return self.indices([self.test_domain], self.classes_up_to(t))

    def manifest(self):
        ds = self.dataset
        return {
            "seed": self.seed,
            "class_order": [c for s in self.steps for c in s],
            "steps": [[ds.class_names[c] for c in s] for s in self.steps],
            "step_ids": [list(map(int, s)) for s in self.steps],
            "train_domains": [ds.domain_names[z] for z in self.train_domains],
            "test_domain": ds.domain_names[self.test_domain],
        }


def build_scenario(dataset, n_steps, classes_per_step, test_domain, seed=0):
    """Partition classes into a base step and ``n_steps`` increments of equal size.

    Every class not consumed by the increments goes to the base step. Class order
    is a seeded permutation.
    """
    n_classes = len(dataset.class_names)
    base = n_classes - n_steps * classes_per_step
    if n_steps < 0 or classes_per_step < 1 or base < 1:
        raise InsufficientClasses(
            f"{n_classes} classes cannot fill {n_steps} steps of {classes_per_step} plus a base step")
    test = dataset.domain_id(test_domain)
    order = np.random.default_rng(seed).permutation(n_classes).tolist()
    steps = [order[:base]]
    for i in range(n_steps):
        start = base + i * classes_per_step
        steps.append(order[start:start + classes_per_step])
    train = [z for z in range(len(dataset.domain_names)) if z != test]
    return Scenario(dataset, steps, train, test, seed)


@dataclass
class AccessCounter:
    """Tally of training samples consumed, keyed by (step, class, domain)."""

    counts: Counter = field(default_factory=Counter)

    def record(self, step, ys, zs):
        for y, z in zip(ys.tolist(), zs.tolist()):
            self.counts[(step, y, z)] += 1

    def total(self):
        return sum(self.counts.values())

    def from_domain(self, domain):
        return sum(n for (_, _, z), n in self.counts.items() if z == domain)

    def off_step(self, scenario):
        """Samples drawn in a step whose class belongs to a different step."""
        return sum(n for (t, y, _), n in self.counts.items() if y not in scenario.steps[t])


@dataclass
class SplitPair:
    scenario: Scenario
    train: dict
    validation: dict
    seed: int = 0
    counter: AccessCounter = field(default_factory=AccessCounter)
    resampled: int = 0

    def validation_indices(self, classes=None):
        idx = np.concatenate([self.validation[z] for z in self.scenario.train_domains])
        if classes is not None:
            idx = idx[np.isin(self.scenario.dataset.y[idx], list(classes))]
        return np.sort(idx)

    def train_indices(self, domain, classes):
        idx = self.train[domain]
        return idx[np.isin(self.scenario.dataset.y[idx], list(classes))]


def _split_block(idx, ratio, rng):
    idx = rng.permutation(idx)
    n_val = 0 if idx.size < 2 else min(idx.size - 1, max(1, int(round(idx.size * (1 - ratio)))))
    return idx[n_val:], idx[:n_val]


def split_train_validation(scenario, ratio=0.8, seed=0):
    """Per-domain train/validation split, stratified by class where a cell has >= 2 samples."""
    ds = scenario.dataset
    rng = np.random.default_rng(seed)
    train, val = {}, {}
    for z in scenario.train_domains:
        in_domain = np.flatnonzero(ds.z == z)
        if in_domain.size == 0:
            raise EmptyDomain(f"training domain {ds.domain_names[z]!r} has no samples")
        tr, va, leftovers = [], [], []
        for c in np.unique(ds.y[in_domain]):
            cell = in_domain[ds.y[in_domain] == c]
            if cell.size < 2:
                leftovers.append(cell)
                continue
            a, b = _split_block(cell, ratio, rng)
            tr.append(a)
            va.append(b)
        if leftovers:
            a, b = _split_block(np.concatenate(leftovers), ratio, rng)
            tr.append(a)
            va.append(b)
        train[z] = np.sort(np.concatenate(tr))
        val[z] = np.sort(np.concatenate(va)) if va else np.zeros(0, dtype=np.intp)
    return SplitPair(scenario, train, val, seed)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.y)


def assemble_batch(split, step, per_domain_size, rng, replace_when_short=True,
                   domains=None):
    """Draw ``per_domain_size`` current-step samples from each training domain and concatenate."""
    scenario = split.scenario
    classes = scenario.steps[step]
    parts = []
    for z in domains if domains is not None else scenario.train_domains:
        pool = split.train_indices(z, classes)
        if pool.size == 0:
            raise ExhaustedDomain(f"domain {z} has no training data for step {step}")
        short = pool.size < per_domain_size
        if short and not replace_when_short:
            raise ExhaustedDomain(
                f"domain {z} has {pool.size} samples for step {step}, need {per_domain_size}")
        split.resampled += int(short)
        parts.append(rng.choice(pool, size=per_domain_size, replace=short))
    idx = np.concatenate(parts)
    ds = scenario.dataset
    batch = Batch(ds.x[idx], ds.y[idx], ds.z[idx], idx)
    split.counter.record(step, batch.y, batch.z)
    return batch


def import_csv(path):
    """Read ``f0,...,f{d-1},class,domain`` rows; ids follow lexicographic name order."""
    rows, ys, zs = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        d = len(header) - 2
        expected = [f"f{i}" for i in range(d)] + ["class", "domain"]
        if d < 1 or header != expected:
            raise DimensionMismatch(f"header must be f0..f{{d-1}},class,domain; got {header}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DimensionMismatch(f"expected {d + 2} fields, got {len(row)}", lineno)
            try:
                rows.append([float(v) for v in row[:d]])
            except ValueError as exc:
                raise ParseError(f"non-numeric feature ({exc})", lineno) from None
            ys.append(row[d])
            zs.append(row[d + 1])
    if not rows:
        raise ParseError("no data rows", 2)
    class_names = sorted(set(ys))
    domain_names = sorted(set(zs))
    cid = {n: i for i, n in enumerate(class_names)}
    zid = {n: i for i, n in enumerate(domain_names)}
    return Dataset(np.array(rows, dtype=np.float64), np.array([cid[v] for v in ys]),
                   np.array([zid[v] for v in zs]), class_names, domain_names)


def export_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.dim)] + ["class", "domain"])
        for x, y, z in zip(dataset.x, dataset.y, dataset.z):
            writer.writerow([repr(float(v)) for v in x]
                            + [dataset.class_names[y], dataset.domain_names[z]])


def write_manifest(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
