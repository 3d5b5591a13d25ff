"""Leave-one-domain-out experiment execution and run-directory layout.

Layout under the output directory::

    config.toml  manifest.json  metrics.csv  summary.json
    seed_<s>/<test-domain>/step_<t>/{checkpoint.npz, prototypes.npz, curve.csv}
"""

import csv
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .evaluation import metric_rows, write_metrics_csv, write_summary
from .net import save_checkpoint
from .prototypes import save_prototypes
from .stream import (build_scenario, import_csv, split_train_validation, synth_generate,
                     write_manifest)
from .trainer import run_scenario

CURVE_COLUMNS = ("iteration", "class", "pseudo", "trips", "dist", "total", "val_score")
OUTPUT_ROOT_ENV = "TRIPS_OUTPUT_ROOT"


def load_dataset(cfg):
    if cfg.scenario.data:
        return import_csv(cfg.scenario.data)
    return synth_generate(cfg.synthetic)


def resolve_output(cfg, override=None):
    path = override or cfg.output.dir
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    return path


def rotations(cfg, dataset):
    names = cfg.scenario.test_domains or dataset.domain_names
    return [dataset.domain_names[dataset.domain_id(n)] for n in names]


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in curve:
            writer.writerow({k: ("" if row[k] is None else repr(row[k])) for k in CURVE_COLUMNS})


def run_rotation(cfg, seed, domain, out_dir=None, dataset=None):
    """Train and evaluate one (seed, test-domain) pair; optionally persist its artifacts."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    scenario = build_scenario(dataset, cfg.scenario.n_steps, cfg.scenario.classes_per_step,
                              domain, seed)
    split = split_train_validation(scenario, cfg.train.val_ratio, seed)
    tcfg = cfg.train_config(seed)
    base = None if out_dir is None else os.path.join(out_dir, f"seed_{seed}", domain)

    def persist(session):
        if base is None:
            return
        step_dir = os.path.join(base, f"step_{session.step}")
        os.makedirs(step_dir, exist_ok=True)
        if cfg.output.checkpoints:
            save_checkpoint(session.model, os.path.join(step_dir, "checkpoint.npz"))
            save_prototypes(session.prototypes, os.path.join(step_dir, "prototypes.npz"))
        if cfg.output.curves:
            write_curve(os.path.join(step_dir, "curve.csv"), session.curve)

    result = run_scenario(split, tcfg, cfg.eval.protocol, cfg.eval.micro, on_session=persist)
    sizes = [s for sess in result.sessions for s in sess.pseudo_sizes]
    audit = {
        "train_samples": split.counter.total(),
        "test_domain_samples": split.counter.from_domain(scenario.test_domain),
        "off_step_samples": split.counter.off_step(scenario),
        "pseudo_batches": len(sizes),
        "pseudo_size_mismatches": sum(int(s != b) for s, b in sizes),
        "pseudo_label_violations": sum(s.pseudo_label_violations for s in result.sessions),
        "resampled_batches": split.resampled,
        "selected_iterations": [s.selected_iteration for s in result.sessions],
    }
    return {"seed": seed, "domain": domain, "reports": result.reports,
            "scenario": scenario.manifest(), "audit": audit}


def _job(args):
    return run_rotation(*args)


def run_experiment(cfg, out_dir, workers=None):
    """Every seed x test-domain rotation; writes metrics, summary and manifest to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.toml"), "w") as fh:
        fh.write(cfg.dumps())
    dataset = load_dataset(cfg)
    jobs = [(cfg, seed, domain, out_dir) for seed in cfg.scenario.seeds
            for domain in rotations(cfg, dataset)]
    workers = workers or cfg.output.workers or len(rotations(cfg, dataset))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [run_rotation(c, s, d, o, dataset) for c, s, d, o in jobs]

    per_seed, rows = {}, []
    for res in results:
        per_seed.setdefault(res["seed"], {})[res["domain"]] = res["reports"]
        rows.extend(metric_rows(res["seed"], {res["domain"]: res["reports"]}))
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    write_summary(os.path.join(out_dir, "summary.json"), per_seed)
    manifest = {
        "code_version": __version__,
        "numpy_version": np.__version__,
        "config": cfg.to_dict(),
        "seeds": list(cfg.scenario.seeds),
        "rotations": [{"seed": r["seed"], "test_domain": r["domain"],
                       "scenario": r["scenario"], "audit": r["audit"]} for r in results],
        "model_selection": "class-wise accuracy on pooled training-domain validation data "
                           "over all classes learnt so far",
    }
    write_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return results
