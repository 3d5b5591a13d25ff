"""Command-line entry point: ``trips run|gradcheck|samplecheck|report|synth``."""

import argparse
import logging
import math
import os
import sys

import numpy as np

from .config import load_config
from .errors import ConfigError
from .evaluation import aggregate_rotations, read_metrics_csv
from .gradcheck import LOSS_NAMES, TOLERANCE, run_gradcheck
from .prototypes import GaussianPrototype, sample_pseudo
from .runner import resolve_output, run_experiment
from .stream import export_csv, synth_generate

EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3
MIN_DRAWS = 10_000


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_run(args):
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    out = resolve_output(cfg, args.out)
    try:
        run_experiment(cfg, out, args.workers)
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    print(f"run written to {out}")
    return 0


def cmd_gradcheck(args):
    results = run_gradcheck(args.seed, args.instances, args.corrupt)
    status = 0
    for res in results:
        verdict = "ok" if res.passed else "FAIL"
        print(f"{res.loss:15s} max_rel_err={res.max_error:.3e} {verdict}")
        if not res.passed:
            print(f"FAIL {res.loss}: {res.worst_param}{list(res.worst_index)} "
                  f"relative error {res.max_error:.3e} >= {TOLERANCE:g}", file=sys.stderr)
            status = EXIT_CHECK
    return status


def random_spd(d, rng):
    m = rng.standard_normal((d, d))
    return m.T @ m / d + 0.5 * np.eye(d)


def samplecheck(d, n_draws, seed, n_classes=4):
    """Moment errors of the Cholesky sampler and its class-choice counts."""
    rng = np.random.default_rng(seed)
    sigma = random_spd(d, rng)
    mu = rng.standard_normal(d)
    draws = sample_pseudo({0: GaussianPrototype(0, mu, sigma)}, n_draws, rng).features
    mean_err = float(np.linalg.norm(draws.mean(axis=0) - mu))
    cov = np.cov(draws.T, bias=True).reshape(d, d)
    cov_err = float(np.linalg.norm(cov - sigma) / np.linalg.norm(sigma))
    protos = {c: GaussianPrototype(c, np.zeros(d), np.eye(d)) for c in range(n_classes)}
    labels = sample_pseudo(protos, n_draws, rng).labels
    counts = np.bincount(labels, minlength=n_classes)
    p = 1.0 / n_classes
    band = 3.0 * math.sqrt(n_draws * p * (1 - p))
    return mean_err, cov_err, counts, band


def cmd_samplecheck(args, parser):
    if args.draws < MIN_DRAWS:
        parser.error(f"--draws must be at least {MIN_DRAWS}")
    mean_err, cov_err, counts, band = samplecheck(args.dim, args.draws, args.seed)
    mean_tol = 0.02 * math.sqrt(args.dim)
    expected = args.draws / len(counts)
    uniform_ok = bool(np.all(np.abs(counts - expected) <= band))
    print(f"mean_error_norm={mean_err:.6f} (tol {mean_tol:.6f})")
    print(f"cov_frobenius_rel_error={cov_err:.6f} (tol 0.050000)")
    print(f"class_counts={counts.tolist()} (expected {expected:.0f} +/- {band:.1f})")
    if mean_err < mean_tol and cov_err < 0.05 and uniform_ok:
        return 0
    return _fail(EXIT_CHECK, "sampler moments outside tolerance")


def _cell(value):
    return "   -  " if value is None else f"{100 * value:6.2f}"


def format_tables(per_seed):
    aggs = [aggregate_rotations(r) for _, r in sorted(per_seed.items())]
    domains = list(aggs[0].domain_average)
    n_steps = len(aggs[0].step_average)

    def seed_mean(values):
        values = [v for v in values if v is not None]
        return sum(values) / len(values) if values else None

    lines = [f"seeds: {sorted(per_seed)}", "",
             "per test domain, averaged over all steps (%)",
             "metric    " + "".join(f"{d:>10s}" for d in domains)]
    for label, attr in (("average", "domain_average"), ("harmonic", "domain_harmonic")):
        cells = [seed_mean([getattr(a, attr)[d] for a in aggs]) for d in domains]
        lines.append(f"{label:10s}" + "".join(f"{_cell(c):>10s}" for c in cells))
    lines += ["", "per step, averaged over test domains (%)", "step      average  harmonic"]
    for t in range(n_steps):
        avg = seed_mean([a.step_average[t] for a in aggs])
        harm = seed_mean([a.step_harmonic[t] for a in aggs])
        lines.append(f"{t:<10d}{_cell(avg):>7s}  {_cell(harm):>8s}")
    return "\n".join(lines), aggs


def cmd_report(args):
    path = os.path.join(args.run_dir, "metrics.csv")
    try:
        per_seed = read_metrics_csv(path)
        if not per_seed:
            raise ValueError("no metric rows")
        text, aggs = format_tables(per_seed)
    except FileNotFoundError:
        return _fail(EXIT_CONFIG, f"missing run artifact {path}")
    except (ValueError, KeyError, TypeError) as exc:
        return _fail(EXIT_CONFIG, f"corrupt run artifact {path}: {exc}")
    print(text)
    if args.curves:
        out = os.path.join(args.run_dir, "plots")
        os.makedirs(out, exist_ok=True)
        for seed, agg in zip(sorted(per_seed), aggs):
            with open(os.path.join(out, f"steps_seed_{seed}.csv"), "w") as fh:
                fh.write("step,avg_acc,harm_acc\n")
                for t, (a, h) in enumerate(zip(agg.step_average, agg.step_harmonic)):
                    fh.write(f"{t},{a!r},{'' if h is None else repr(h)}\n")
        print(f"step curves written to {out}")
    return 0


def cmd_synth(args):
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    export_csv(synth_generate(cfg.synthetic), args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="trips", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate every seed and test-domain rotation")
    run.add_argument("--config", help="TOML experiment config (defaults apply if omitted)")
    run.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    run.add_argument("--out", help="output directory (overrides output.dir)")
    run.add_argument("--workers", type=int, help="parallel rotations (default: rotation count)")

    grad = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--instances", type=int, default=20)
    grad.add_argument("--corrupt", choices=LOSS_NAMES, help=argparse.SUPPRESS)

    samp = sub.add_parser("samplecheck", help="moment check of the Cholesky pseudo-sampler")
    samp.add_argument("--dim", type=int, default=4)
    samp.add_argument("--draws", type=int, default=100_000)
    samp.add_argument("--seed", type=int, default=0)

    rep = sub.add_parser("report", help="print result tables for a finished run")
    rep.add_argument("run_dir")
    rep.add_argument("--curves", action="store_true", help="also write per-step curve files")

    syn = sub.add_parser("synth", help="write the configured synthetic dataset as CSV")
    syn.add_argument("--config")
    syn.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    syn.add_argument("--out", required=True)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    if args.command == "samplecheck":
        return cmd_samplecheck(args, parser)
    if args.command == "report":
        return cmd_report(args)
    return cmd_synth(args)


if __name__ == "__main__":
    sys.exit(main())
