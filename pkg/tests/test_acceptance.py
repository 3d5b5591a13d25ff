"""End-to-end acceptance checks, one per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL ...`` line (visible with
``pytest -s`` or in the captured output of a failure) and then asserts.
"""

import csv
import math
import time

import numpy as np
import pytest

from trips.evaluation import (StepReport, aggregate_rotations, average_accuracy,
                              harmonic_accuracy, metric_rows, read_metrics_csv,
                              write_metrics_csv)
from trips.gradcheck import LOSS_NAMES, STEP, TOLERANCE, run_gradcheck
from trips.linalg import cholesky_jittered
from trips.losses import LossConfig, PseudoBatch, pair_masks, trips_base, trips_incr
from trips.autograd import Tensor
from trips.prototypes import (DriftAccumulator, DriftConfig,
                              accumulate_drift_features, drift_weight, finalize_drift,
                              init_prototypes)
from trips.cli import samplecheck
from trips.runner import run_rotation
from trips.config import load_config
from trips.stream import SyntheticConfig, build_scenario, split_train_validation, synth_generate
from trips.trainer import TrainConfig, run_scenario

SEEDS = (0, 1, 2)
N_DOMAINS = 4
VARIANTS = {
    "baseline": (LossConfig(lambda_trips=0.0, lambda_dist=0.0), DriftConfig(sampling=False)),
    "kd": (LossConfig(lambda_trips=0.0), DriftConfig(sampling=False)),
    "kd_triplet": (LossConfig(), DriftConfig(sampling=False)),
    "full": (LossConfig(), DriftConfig()),
}


def report(n, ok, detail):
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    results = run_gradcheck(seed=0, instances=20)
    elapsed = time.perf_counter() - start
    worst = max(r.max_error for r in results)
    ok = ({r.loss for r in results} == set(LOSS_NAMES) and all(r.passed for r in results)
          and STEP == 1e-5 and elapsed < 60)
    detail = ", ".join(f"{r.loss}={r.max_error:.2e}" for r in results)
    assert report(1, ok, f"max rel err {worst:.2e} < {TOLERANCE:g} ({detail}); {elapsed:.1f}s")


def test_criterion_2_sampler_fidelity():
    start = time.perf_counter()
    d, n = 4, 100_000
    mean_err, cov_err, counts, band = samplecheck(d, n, seed=0)
    elapsed = time.perf_counter() - start
    uniform = bool(np.all(np.abs(counts - n / 4) <= band))
    ok = mean_err < 0.02 * math.sqrt(d) and cov_err < 0.05 and uniform and elapsed < 30
    assert report(2, ok, f"mean err {mean_err:.4f}, cov err {cov_err:.4f}, "
                         f"counts {counts.tolist()} (band {band:.0f}); {elapsed:.1f}s")


def _closed_form(mu, sigma0, batches, eta, s, alpha):
    delta = np.zeros_like(mu)
    cov_ema = sigma0.copy()
    for new, old in batches:
        w = np.array([drift_weight(o, mu, s) for o in old])
        w = w / w.sum()
        shift = sum(wi * (n_ - o_) for wi, n_, o_ in zip(w, new, old))
        delta = eta * delta + (1 - eta) * shift
        centre = mu + delta
        local = sum(wi * np.outer(n_ - centre, n_ - centre) for wi, n_ in zip(w, new))
        shrunk = (1 - alpha) * local + alpha * np.eye(mu.size)
        cov_ema = eta * cov_ema + (1 - eta) * shrunk
    return delta, cov_ema


def test_criterion_3_drift_recurrence():
    rng = np.random.default_rng(3)
    d = 5
    protos = init_prototypes({c: rng.normal(size=(12, d)) + c for c in range(3)}, 0.05)
    cfg = DriftConfig(eta=0.1)
    acc = DriftAccumulator.start(protos)
    batches = []
    for _ in range(10):
        old = rng.normal(size=(9, d)) + rng.integers(0, 3)
        new = old + 0.3 * rng.normal(size=(9, d))
        batches.append((new, old))
        accumulate_drift_features(acc, new, old, cfg)
    err = 0.0
    for c, p in protos.items():
        delta, cov = _closed_form(p.mu, p.sigma, batches, 0.1, cfg.sigma_bandwidth, cfg.alpha)
        err = max(err, np.max(np.abs(acc.delta_mu[c] - delta)), np.max(np.abs(acc.sigma_ema[c] - cov)))

    acc0 = DriftAccumulator.start(protos)
    new, old = batches[0]
    accumulate_drift_features(acc0, new, old, DriftConfig(eta=0.0, alpha=0.0))
    final = finalize_drift(acc0, session=1)
    exact = True
    for c, p in protos.items():
        w = np.exp(-((old - p.mu) ** 2).sum(axis=1) / (2 * 0.5 ** 2))
        w = w / w.sum()
        shift = w @ (new - old)
        centred = new - (p.mu + shift)
        local = (centred * w[:, None]).T @ centred
        exact &= bool(np.allclose(final[c].mu, p.mu + shift, rtol=0, atol=1e-14))
        exact &= bool(np.allclose(final[c].sigma, 0.5 * (local + local.T), rtol=0, atol=1e-14))
    ok = err < 1e-10 and exact
    assert report(3, ok, f"10-batch max deviation {err:.2e}; eta=0 single batch exact={exact}")


def test_criterion_4_shrinkage_spd():
    rng = np.random.default_rng(4)
    failures, sessions = 0, 100
    for _ in range(sessions):
        d = int(rng.integers(1, 33))
        feats = {c: rng.normal(size=(int(rng.integers(2, 5)), d)) * rng.uniform(0.1, 10)
                 for c in range(3)}
        acc = DriftAccumulator.start(init_prototypes(feats, 0.05))
        for _ in range(int(rng.integers(1, 8))):
            old = rng.normal(size=(int(rng.integers(1, 10)), d))
            new = old + rng.normal(size=old.shape) * rng.uniform(0, 3)
            accumulate_drift_features(acc, new, old, DriftConfig(alpha=0.05))
        for p in finalize_drift(acc, 1).values():
            failures += cholesky_jittered(p.sigma)[1] != 0.0
    assert report(4, failures == 0, f"{failures} jittered factorizations over {sessions} sessions")


def _brute(f, y, z, pseudo=None):
    terms = []
    for i in range(len(y)):
        pos = [((f[i] - f[j]) ** 2).sum() for j in range(len(y))
               if j != i and y[j] == y[i] and z[j] != z[i]]
        neg = [((f[i] - f[j]) ** 2).sum() for j in range(len(y))
               if j != i and y[j] != y[i] and z[j] == z[i]]
        if pseudo is not None:
            neg += [((f[i] - p) ** 2).sum() for p in pseudo]
        if pos and neg:
            terms.append(max(0.0, max(pos) - min(neg)))
    return sum(terms) / len(terms) if terms else 0.0


def test_criterion_5_mask_and_loss_oracles():
    rng = np.random.default_rng(5)
    worst, masks_ok, bitwise = 0.0, True, True
    for _ in range(100):
        n = int(rng.integers(2, 13))
        y, z = rng.integers(0, 3, n), rng.integers(0, 3, n)
        f = rng.normal(size=(n, 4))
        m = pair_masks(y, z)
        for i in range(n):
            for j in range(n):
                masks_ok &= bool(m.positive[i, j] == (i != j and y[i] == y[j] and z[i] != z[j]))
                masks_ok &= bool(m.negative[i, j] == (i != j and y[i] != y[j] and z[i] == z[j]))
        pseudo = PseudoBatch(rng.normal(size=(n, 4)), rng.integers(3, 6, n))
        worst = max(worst, abs(trips_base(Tensor(f), m).item() - _brute(f, y, z)),
                    abs(trips_incr(Tensor(f), m, pseudo).item() - _brute(f, y, z, pseudo.features)))
        bitwise &= trips_incr(Tensor(f), m, PseudoBatch.empty(4)).item() == trips_base(Tensor(f), m).item()
    ok = masks_ok and worst < 1e-10 and bitwise
    assert report(5, ok, f"masks exact={masks_ok}, max loss deviation {worst:.2e}, "
                         f"empty-pseudo bitwise={bitwise}")


@pytest.fixture(scope="module")
def ablation_runs():
    """Final-step reports for every variant, seed and held-out domain, with wall time."""
    dataset = synth_generate(SyntheticConfig())
    out, times = {}, {}
    for name, (losses, drift) in VARIANTS.items():
        start = time.perf_counter()
        for seed in SEEDS:
            for domain in range(N_DOMAINS):
                split = split_train_validation(build_scenario(dataset, 2, 2, domain, seed), 0.8, seed)
                result = run_scenario(split, TrainConfig(seed=seed, losses=losses, drift=drift))
                out[name, seed, domain] = result.reports[-1]
        times[name] = time.perf_counter() - start
    return out, times


@pytest.mark.slow
def test_criterion_6_directional_reproduction(ablation_runs):
    runs, times = ablation_runs
    cells = [(s, z) for s in SEEDS for z in range(N_DOMAINS)]
    base = [runs["baseline", s, z] for s, z in cells]
    full = [runs["full", s, z] for s, z in cells]
    collapsed = all(r.harmonic_accuracy < 0.05 for r in base)
    strong = all(r.harmonic_accuracy >= 0.4 for r in full)
    beats = all(f.average_accuracy > b.average_accuracy and f.harmonic_accuracy > b.harmonic_accuracy
                for f, b in zip(full, base))
    elapsed = times["baseline"] + times["full"]
    ok = collapsed and strong and beats and elapsed < 15 * 60
    detail = (f"baseline harm max {max(r.harmonic_accuracy for r in base):.3f} (<0.05), "
              f"full harm min {min(r.harmonic_accuracy for r in full):.3f} (>=0.4), "
              f"full beats baseline everywhere={beats}; {elapsed:.0f}s")
    assert report(6, ok, detail)


@pytest.mark.slow
def test_criterion_7_ablation_ordering(ablation_runs):
    runs, _ = ablation_runs
    means = {name: float(np.mean([runs[name, s, z].average_accuracy
                                  for s in SEEDS for z in range(N_DOMAINS)]))
             for name in ("kd", "kd_triplet", "full")}
    ok = (means["kd"] <= means["kd_triplet"] <= means["full"]
          and means["full"] - means["kd"] >= 0.05)
    detail = ", ".join(f"{k}={v:.3f}" for k, v in means.items())
    assert report(7, ok, f"{detail}; total gap {means['full'] - means['kd']:.3f} (>=0.05)")


def test_criterion_8_protocol_conformance(tmp_path):
    cfg = load_config(overrides=["train.max_iters=150", "output.checkpoints=false"])
    first = run_rotation(cfg, 0, "d1")
    second = run_rotation(cfg, 0, "d1")
    audit = first["audit"]
    rows = []
    for res in (first, second):
        path = tmp_path / f"m{len(rows)}.csv"
        write_metrics_csv(path, metric_rows(0, {res["domain"]: res["reports"]}))
        rows.append(path.read_bytes())
    expected_batches = cfg.train.max_iters * cfg.scenario.n_steps
    ok = (audit["pseudo_batches"] == expected_batches and audit["pseudo_size_mismatches"] == 0
          and audit["pseudo_label_violations"] == 0 and audit["test_domain_samples"] == 0
          and audit["off_step_samples"] == 0 and rows[0] == rows[1])
    detail = (f"|S|=|B| in {audit['pseudo_batches'] - audit['pseudo_size_mismatches']}/"
              f"{expected_batches} iterations, test-domain samples {audit['test_domain_samples']}, "
              f"off-step samples {audit['off_step_samples']}, identical metrics={rows[0] == rows[1]}")
    assert report(8, ok, detail)


def test_criterion_9_metric_units(tmp_path):
    grid = np.linspace(0, 1, 101)
    harm_ok = all(abs(harmonic_accuracy(a, a) - a) <= 1e-15 for a in grid)

    rng = np.random.default_rng(9)
    labels = rng.integers(0, 4, 80)
    preds = np.where(rng.random(80) < 0.7, labels, rng.integers(0, 4, 80))
    base = average_accuracy(preds, labels, range(4))
    dup_ok = True
    for c in range(4):
        mask = labels == c
        l2 = np.concatenate([labels, labels[mask], labels[mask]])
        p2 = np.concatenate([preds, preds[mask], preds[mask]])
        dup_ok &= abs(average_accuracy(p2, l2, range(4)) - base) <= 1e-15

    per_domain = {d: [StepReport(t, d, float(rng.random()), None if t == 0 else float(rng.random()))
                      for t in range(3)] for d in ("d0", "d1", "d2", "d3")}
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, metric_rows(0, per_domain))
    agg = aggregate_rotations(read_metrics_csv(path)[0])
    with open(path) as fh:
        raw = list(csv.DictReader(fh))
    agg_ok = True
    for t in range(3):
        col = [r for r in raw if int(r["step"]) == t]
        avg = sum(float(r["avg_acc"]) for r in col) / len(col)
        agg_ok &= abs(agg.step_average[t] - avg) <= 1e-15
        harms = [float(r["harm_acc"]) for r in col if r["harm_acc"]]
        if harms:
            agg_ok &= abs(agg.step_harmonic[t] - sum(harms) / len(harms)) <= 1e-15
    for d in per_domain:
        col = [float(r["avg_acc"]) for r in raw if r["test_domain"] == d]
        agg_ok &= abs(agg.domain_average[d] - sum(col) / len(col)) <= 1e-15
    ok = harm_ok and dup_ok and agg_ok
    assert report(9, ok, f"harmonic fixed point={harm_ok}, duplication invariance={dup_ok}, "
                         f"CSV recomputation={agg_ok}")
