"""Command-line entry point: ``meibp {generate,fit,eval,bench-ls,bench-scale,bench-k}``."""

import argparse
import csv
import logging
import math
import os
import sys

from . import bench
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .engine import SWEEP_ORDERS, ConvergenceConfig, InitConfig, fit, init_state, substream
from .evaluate import predictive_log_likelihood
from .model import PREPROCESS_SCHEMES, GammaPriors, Hyperparams, load_dataset
from .rowopt import LsConfig
from .synth import (
    SynthSpec,
    gen_binary_images,
    gen_sparse_factor_data,
    make_holdout_mask,
    spec_provenance,
    write_generated,
)
from .variational import NumericalError

log = logging.getLogger("meibp")

EXIT_OK, EXIT_IO, EXIT_NUMERICAL, EXIT_CAP = 0, 1, 2, 3
METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = ("iter", "seconds", "elbo", "train_ll_mean", "test_ll_mean", "k_plus",
                   "rows_changed", "gain_evals", "schema_version")
OUTPUT_DIR_ENV = "MEIBP_OUTPUT_DIR"
SIGMA_AUTO_FACTOR = 0.75


class UsageError(Exception):
    pass


def output_path(path):
    """Resolve a relative output path against $MEIBP_OUTPUT_DIR (default: cwd)."""
    if path is None or os.path.isabs(path):
        return path
    return os.path.join(os.environ.get(OUTPUT_DIR_ENV, "."), path)


def _check_writable(*paths):
    for path in paths:
        if path is None:
            continue
        parent = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(parent):
            raise OSError(f"output directory does not exist: {parent}")
        if not os.access(parent, os.W_OK):
            raise OSError(f"output directory is not writable: {parent}")


def _check_readable(*paths):
    for path in paths:
        if path is not None and not os.path.isfile(path):
            raise OSError(f"input file not found: {path}")


def derived_seed(seed, name):
    return int(substream(seed, name).integers(2**63))


# --- generate ---------------------------------------------------------------

def cmd_generate(args):
    prefix = output_path(args.out)
    _check_writable(prefix)
    if args.protocol == "sparse":
        spec = SynthSpec(n=args.n, d=args.d, k=args.k, density=args.density,
                         sigma_noise=args.sigma, factor_density=args.factor_density,
                         seed=derived_seed(args.seed, "generator"))
        dataset, _, _ = gen_sparse_factor_data(spec)
        provenance = spec_provenance(spec, seed_flag=args.seed)
    else:
        gen_seed = derived_seed(args.seed, "generator")
        dataset, _, _ = gen_binary_images(args.n, args.sigma, seed=gen_seed,
                                          overlapping=args.overlapping)
        provenance = {"protocol": "images", "n": args.n, "sigma_noise": args.sigma,
                      "overlapping": args.overlapping, "seed": gen_seed, "seed_flag": args.seed}
    heldout = None
    if args.holdout_frac > 0:
        mask_seed = derived_seed(args.seed, "mask")
        heldout = make_holdout_mask(dataset.n_rows, dataset.n_cols, args.holdout_frac, mask_seed)
        provenance.update(holdout_frac=args.holdout_frac, mask_seed=mask_seed)
    paths = write_generated(prefix, dataset, heldout, provenance, binary=args.binary)
    for kind, path in sorted(paths.items()):
        print(f"{kind}: {path}")
    return EXIT_OK


# --- fit --------------------------------------------------------------------

def _hyperparams(args, dataset):
    explicit = args.sigma_x is not None or args.sigma_a is not None
    if args.sigma_auto and explicit:
        raise UsageError("--sigma-auto cannot be combined with --sigma-x/--sigma-a")
    if args.sigma_auto:
        scale = SIGMA_AUTO_FACTOR * dataset.pooled_std()
        if not scale > 0:
            raise UsageError("--sigma-auto needs data with non-zero spread")
        sigma_x = sigma_a = scale
    else:
        sigma_x = 1.0 if args.sigma_x is None else args.sigma_x
        sigma_a = 1.0 if args.sigma_a is None else args.sigma_a
    priors = None
    if args.hyper_inference:
        priors = GammaPriors(*args.gamma_priors) if args.gamma_priors else GammaPriors()
    elif args.gamma_priors:
        raise UsageError("--gamma-priors requires --hyper-inference")
    return Hyperparams(args.alpha, sigma_x, sigma_a, args.hyper_inference, priors)


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def cmd_fit(args):
    metrics_path = output_path(args.metrics)
    ckpt_path = output_path(args.checkpoint)
    eval_path = output_path(args.eval_json)
    _check_readable(args.data, args.mask)
    _check_writable(metrics_path, ckpt_path, eval_path)
    raw = load_dataset(args.data, args.mask)
    dataset = raw.preprocess(args.preprocess)
    hyper = _hyperparams(args, dataset)
    conv = ConvergenceConfig(args.tol, args.block, args.max_iters, args.max_seconds)
    ls_config = LsConfig(args.epsilon, args.scan_order)
    state = init_state(dataset, args.k_max, hyper, seed=args.seed,
                       init=InitConfig(init_prob=args.init_prob))
    has_heldout = bool(dataset.heldout.any())

    fh = open(metrics_path, "w", newline="", encoding="utf-8") if metrics_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(METRICS_COLUMNS)

    def on_sweep(st, report):
        if has_heldout:
            report.test_ll_mean = predictive_log_likelihood(st).test_ll_mean
        log.info("sweep %d  elbo %.6g  K+ %d  changed %d", report.iteration, report.elbo,
                 report.k_plus, report.rows_changed)
        if writer:
            writer.writerow([_fmt(v) for v in (
                report.iteration, report.seconds, report.elbo, report.train_ll_mean,
                report.test_ll_mean if has_heldout else None, report.k_plus,
                report.rows_changed, report.gain_evals, METRICS_SCHEMA_VERSION)])
            fh.flush()

    try:
        result = fit(state, conv, args.optimizer, ls_config, on_sweep, order=args.order)
    finally:
        if fh:
            fh.close()
    if ckpt_path:
        save_checkpoint(state, ckpt_path)
    report = predictive_log_likelihood(state)
    if eval_path:
        report.to_json(eval_path)
    print(f"stop: {result.stop_reason}  sweeps: {state.iteration}  K+: {state.k_plus}  "
          f"elbo: {result.reports[-1].elbo:.8g}  test_ll_mean: {report.test_ll_mean}")
    return EXIT_OK if result.converged else EXIT_CAP


# --- eval -------------------------------------------------------------------

def cmd_eval(args):
    out = output_path(args.out)
    _check_readable(args.checkpoint, args.data, args.mask)
    _check_writable(out)
    dataset = load_dataset(args.data, args.mask)
    state = load_checkpoint(args.checkpoint, dataset)
    report = predictive_log_likelihood(state, integrate=args.integrate)
    text = report.to_json(out)
    print(text)
    return EXIT_OK


# --- benchmarks -------------------------------------------------------------

def cmd_bench_ls(args):
    out = output_path(args.out)
    _check_writable(out)
    if args.k_max > bench.LS_BENCH_CAP:
        raise UsageError(f"--k-max above {bench.LS_BENCH_CAP} is not feasible for brute force")
    result = bench.bench_ls(range(args.k_min, args.k_max + 1), args.n, args.d, args.sigma,
                            args.datasets, args.opts, LsConfig(args.epsilon, args.scan_order),
                            args.seed)
    if out:
        result.write_csv(out)
    print("k  ls_optimal  ls_within95  random_within95  bound_violations")
    for r in result.rows:
        print(f"{r.k:2d}  {r.ls_optimal:10.3f}  {r.ls_within:11.3f}  {r.random_within:15.3f}  "
              f"{r.bound_violations:16d}")
    return EXIT_OK


def cmd_bench_scale(args):
    out = output_path(args.out)
    _check_writable(out)
    result = bench.bench_scale(args.ks, args.n, args.d, args.sigma, args.sweeps,
                               LsConfig(args.epsilon, args.scan_order), args.seed)
    if out:
        result.write_csv(out)
    for k, v in zip(result.ks, result.mean_gain_evals):
        print(f"K={k:<4d} mean gain evaluations per ls call: {v:.1f}")
    print(f"log-log slope: {result.slope:.3f}")
    return EXIT_OK


def cmd_bench_k(args):
    out, table = output_path(args.out), output_path(args.table)
    _check_writable(out, table)
    grid = [(s, args.seed + i) for i, (s, _) in
            enumerate(bench.k_recovery_grid(args.runs, args.sigma_lo, args.sigma_hi))]
    report = bench.run_k_recovery(grid, args.n, args.k_max, args.alpha)
    if out:
        report.write_csv(out, table)
    for k in sorted(report.histogram):
        print(f"K+={k}: {report.histogram[k]}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _ls_flags(p):
    p.add_argument("--epsilon", type=float, default=0.1, help="ls improvement threshold")
    p.add_argument("--scan-order", choices=("best-first", "ascending"), default="best-first")


def build_parser():
    parser = argparse.ArgumentParser(prog="meibp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every sweep")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset, mask and provenance JSON")
    g.add_argument("--protocol", choices=("sparse", "images"), default="sparse")
    g.add_argument("--n", type=_positive_int, default=500)
    g.add_argument("--d", type=_positive_int, default=500)
    g.add_argument("--k", type=_positive_int, default=20)
    g.add_argument("--density", type=float, default=0.4, help="Bernoulli rate of Z")
    g.add_argument("--factor-density", type=float, default=0.5, help="ones rate of factors")
    g.add_argument("--sigma", type=float, default=1.0, help="noise standard deviation")
    g.add_argument("--overlapping", action="store_true", help="4x4 corner blocks (images)")
    g.add_argument("--holdout-frac", type=float, default=0.2,
                   help="fraction of columns held out on the second half of rows (0: no mask)")
    g.add_argument("--binary", action="store_true", help="write the binary matrix format")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data", help="output prefix")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="run inference; exit 0 on convergence, 3 on a cap")
    f.add_argument("--data", required=True)
    f.add_argument("--mask", help="CSV of held-out (row, col) pairs")
    f.add_argument("--k-max", type=_positive_int, default=20)
    f.add_argument("--alpha", type=float, default=3.0)
    f.add_argument("--sigma-x", type=float)
    f.add_argument("--sigma-a", type=float)
    f.add_argument("--sigma-auto", action="store_true",
                   help="set both scales to 3/4 of the pooled data standard deviation")
    f.add_argument("--hyper-inference", action="store_true")
    f.add_argument("--gamma-priors", type=_float_list,
                   help="a_x,b_x,a_a,b_a,a_alpha,b_alpha (default all 1)")
    f.add_argument("--optimizer", choices=("ls", "double-greedy", "brute"), default="ls")
    _ls_flags(f)
    f.add_argument("--order", choices=SWEEP_ORDERS, default="rows-first")
    f.add_argument("--init-prob", type=float, default=1.0 / 3.0)
    f.add_argument("--preprocess", choices=PREPROCESS_SCHEMES, default="zero-min")
    f.add_argument("--tol", type=float, default=1e-4)
    f.add_argument("--block", type=_positive_int, default=5)
    f.add_argument("--max-iters", type=_positive_int, default=500)
    f.add_argument("--max-seconds", type=float, default=math.inf)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--metrics", default="metrics.csv")
    f.add_argument("--checkpoint", default="model.ckpt")
    f.add_argument("--eval-json", help="write the final held-out evaluation here")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="held-out predictive likelihood of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mask")
    e.add_argument("--integrate", action="store_true",
                   help="add the q(A) predictive variance to the noise variance")
    e.add_argument("--out", default="eval.json")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-ls", help="ls and random solutions against brute force")
    b.add_argument("--k-min", type=_positive_int, default=2)
    b.add_argument("--k-max", type=_positive_int, default=12)
    b.add_argument("--n", type=_positive_int, default=100)
    b.add_argument("--d", type=_positive_int, default=50)
    b.add_argument("--sigma", type=float, default=1.0)
    b.add_argument("--datasets", type=_positive_int, default=5)
    b.add_argument("--opts", type=_positive_int, default=200, help="optimizations per K")
    _ls_flags(b)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench_ls.csv")
    b.set_defaults(func=cmd_bench_ls)

    s = sub.add_parser("bench-scale", help="gain evaluations per ls call versus K")
    s.add_argument("--ks", type=_int_list, default=[10, 20, 40, 80])
    s.add_argument("--n", type=_positive_int, default=1000)
    s.add_argument("--d", type=_positive_int, default=200)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--sweeps", type=_positive_int, default=3)
    _ls_flags(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="bench_scale.csv")
    s.set_defaults(func=cmd_bench_scale)

    r = sub.add_parser("bench-k", help="final K+ histogram on binary-image data")
    r.add_argument("--runs", type=_positive_int, default=20)
    r.add_argument("--sigma-lo", type=float, default=0.1)
    r.add_argument("--sigma-hi", type=float, default=0.5)
    r.add_argument("--n", type=_positive_int, default=500)
    r.add_argument("--k-max", type=_positive_int, default=12)
    r.add_argument("--alpha", type=float, default=2.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="k_histogram.csv")
    r.add_argument("--table", default="k_table.csv")
    r.set_defaults(func=cmd_bench_k)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
