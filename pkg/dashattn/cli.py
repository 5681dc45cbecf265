"""
Command line interface of dashattn.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 verification failure.
"""
import argparse
import logging
import os
import sys
import time

import dashattn
from dashattn import bench, diagnostics, grad, utils
from dashattn import input_output as io
from dashattn import run
from dashattn.exceptions import DashAttnError, VerificationError
from dashattn.route import route_all
from dashattn.summarize import summarize_all

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_VERIFY_FAILED = 3

DEFAULT_N = 2048
DEFAULT_D_H = 64

# Flags that map one to one onto flat run configuration keys
RUN_FLAGS = ["n", "d_h", "h_q", "h_kv", "block_size", "alpha", "gamma",
             "sigma", "summary_mode", "seed", "mode", "k", "form"]


def _float_list(value):
    try:
        return [float(v) for v in value.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError("Expected comma separated floats, "
                                         "got %r" % value)


def _int_list(value):
    try:
        return [int(v) for v in value.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError("Expected comma separated integers, "
                                         "got %r" % value)


def _add_attention_flags(parser):
    parser.add_argument("--config",
                        action="store",
                        help="Flat JSON run configuration",
                        default=None)
    parser.add_argument("--seed",
                        action="store",
                        type=int,
                        help="Seed of the random inputs",
                        default=None)
    parser.add_argument("--n",
                        action="store",
                        type=int,
                        help="Sequence length",
                        default=None)
    parser.add_argument("--d-h",
                        action="store",
                        dest="d_h",
                        type=int,
                        help="Head dimension",
                        default=None)
    parser.add_argument("--h-q",
                        action="store",
                        dest="h_q",
                        type=int,
                        help="Query heads",
                        default=None)
    parser.add_argument("--h-kv",
                        action="store",
                        dest="h_kv",
                        type=int,
                        help="Key/value heads",
                        default=None)
    parser.add_argument("--block-size",
                        action="store",
                        dest="block_size",
                        type=int,
                        help="Chunk size B",
                        default=None)
    parser.add_argument("--alpha",
                        action="store",
                        type=float,
                        help="Entmax exponent of the routing",
                        default=None)
    parser.add_argument("--gamma",
                        action="store",
                        type=float,
                        help="Routing scale",
                        default=None)
    parser.add_argument("--sigma",
                        action="store",
                        type=float,
                        help="Prior strength",
                        default=None)
    parser.add_argument("--summary-mode",
                        action="store",
                        dest="summary_mode",
                        choices=["local", "mean"],
                        default=None)
    parser.add_argument("--q",
                        action="store",
                        dest="q_file",
                        help="Query tensor file",
                        default=None)
    parser.add_argument("--k-file",
                        action="store",
                        dest="k_file",
                        help="Key tensor file",
                        default=None)
    parser.add_argument("--v",
                        action="store",
                        dest="v_file",
                        help="Value tensor file",
                        default=None)
    parser.add_argument("--q-bar",
                        action="store",
                        dest="q_bar_file",
                        help="Summary query tensor file",
                        default=None)


def _add_common_flags(parser):
    parser.add_argument("--threads",
                        action="store",
                        dest="n_jobs",
                        type=int,
                        help="Number of joblib workers",
                        default=dashattn.config.n_jobs)
    parser.add_argument("--out",
                        action="store",
                        help="Output path",
                        default=None)
    parser.add_argument("-q", "--quiet",
                        action="store_true",
                        dest="quiet",
                        help="Only log warnings and errors",
                        default=False)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dashattn",
        description="Entmax-routed block-sparse attention: reference "
        "forward and backward passes, checks and benchmarks",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command")
    sub.required = True

    p = sub.add_parser("attend", help="Run one attention mode")
    _add_attention_flags(p)
    _add_common_flags(p)
    p.add_argument("--mode",
                   action="store",
                   choices=run.MODES,
                   default=None)
    p.add_argument("--k",
                   action="store",
                   type=int,
                   help="Chunk budget of the top-k mode",
                   default=None)
    p.add_argument("--form",
                   action="store",
                   choices=["bias", "prior", "uniform"],
                   help="Stage-2 form of the dash mode",
                   default=None)
    p.add_argument("--verify",
                   action="store_true",
                   help="Compare against the row-by-row oracle",
                   default=False)

    p = sub.add_parser("bench", help="Dense versus block-sparse timing")
    _add_common_flags(p)
    p.add_argument("--n",
                   action="store",
                   dest="ns",
                   type=_int_list,
                   help="Comma separated sequence lengths",
                   default=[2048, 8192])
    p.add_argument("--sparsity",
                   action="store",
                   type=_float_list,
                   help="Comma separated target sparsities",
                   default=list(dashattn.config.bench.sparsities))
    p.add_argument("--seed", action="store", type=int, default=0)
    p.add_argument("--d-h", action="store", dest="d_h", type=int,
                   default=DEFAULT_D_H)
    p.add_argument("--block-size", action="store", dest="block_size",
                   type=int, default=dashattn.config.attention.block_size)
    p.add_argument("--alpha", action="store", type=float,
                   default=dashattn.config.attention.alpha)
    p.add_argument("--gamma", action="store", type=float,
                   default=dashattn.config.attention.gamma)
    p.add_argument("--sigma", action="store", type=float,
                   default=dashattn.config.attention.sigma)
    p.add_argument("--repeats", action="store", type=int,
                   default=dashattn.config.bench.repeats)
    p.add_argument("--warmups", action="store", type=int,
                   default=dashattn.config.bench.warmups)
    p.add_argument("--dtype", action="store", choices=["float64", "float32"],
                   default=dashattn.config.bench.dtype)

    p = sub.add_parser("gradcheck", help="Analytic versus finite-difference "
                       "gradients")
    _add_common_flags(p)
    p.add_argument("--ops",
                   action="store",
                   help="Comma separated operators (default suite if "
                   "missing)",
                   default=None)
    p.add_argument("--seed", action="store", type=int, default=0)
    p.add_argument("--seeds",
                   action="store",
                   type=int,
                   help="Number of consecutive seeds",
                   default=1)
    p.add_argument("--trace",
                   action="store",
                   help="Check the pipeline at the inputs of a saved trace",
                   default=None)

    p = sub.add_parser("dispersion", help="Entropy ratio sweep")
    _add_common_flags(p)
    p.add_argument("--family", action="store", choices=diagnostics.FAMILIES,
                   default="uniform")
    p.add_argument("--mapping", action="store",
                   choices=diagnostics.MAPPINGS, default="softmax")
    p.add_argument("--ns", action="store", type=_int_list,
                   default=list(dashattn.config.dispersion.ns))
    p.add_argument("--seeds", action="store", type=int,
                   default=dashattn.config.dispersion.seeds)
    p.add_argument("--seed", action="store", type=int, default=0)
    p.add_argument("--alpha", action="store", type=float,
                   default=dashattn.config.attention.alpha)
    p.add_argument("--k", action="store", type=int, default=8)
    p.add_argument("--sigma", action="store", type=float, default=1.)
    p.add_argument("--heads", action="store", type=int, default=1)

    p = sub.add_parser("summarize", help="Dump the chunk summaries")
    _add_attention_flags(p)
    _add_common_flags(p)

    p = sub.add_parser("route", help="Dump the routed block mask and the "
                       "chunk biases")
    _add_attention_flags(p)
    _add_common_flags(p)
    return parser


def _read_inputs(args):
    """Tensors given on the command line (None where missing)."""
    files = [args.q_file, args.k_file, args.v_file, args.q_bar_file]
    return [None if f is None else io.read_tensor(f) for f in files]


def load_run_config(args, tensors=(None, None, None, None)):
    """Flat run configuration from --config, updated by explicit flags.

    Shapes missing from both are taken from the input tensors, then from
    the defaults.
    """
    params = {}
    if args.config is not None:
        params = run.RunConfig.from_json(args.config).to_dict()
    for key in RUN_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    Q, K = tensors[0], tensors[1]
    if Q is not None:
        params.setdefault("n", Q.shape[0])
        params.setdefault("h_q", Q.shape[1])
        params.setdefault("d_h", Q.shape[2])
    if K is not None:
        params.setdefault("h_kv", K.shape[1])
    params.setdefault("n", DEFAULT_N)
    params.setdefault("d_h", DEFAULT_D_H)
    if getattr(args, "verify", False):
        params["verify"] = True
    params["n_jobs"] = args.n_jobs
    if args.out is not None and args.command == "attend":
        params["out"] = args.out
    return run.RunConfig.from_dict(params)


def cmd_attend(args):
    tensors = _read_inputs(args)
    run_config = load_run_config(args, tensors)
    O, stats = run.process(run_config, *tensors)
    logging.info("Measured sparsity %.4f, %d blocks visited" %
                 (stats["measured_sparsity"], stats["blocks_visited"]))
    return EXIT_OK


def cmd_bench(args):
    table = bench.run_bench(args.ns, args.sparsity, d_h=args.d_h,
                            block_size=args.block_size, seed=args.seed,
                            alpha=args.alpha, gamma=args.gamma,
                            sigma=args.sigma, dtype=args.dtype,
                            warmups=args.warmups, repeats=args.repeats,
                            n_jobs=args.n_jobs)
    out = args.out or os.path.join(dashattn.config.results_dir, "bench.csv")
    io.write_csv(out, table)
    return EXIT_OK


def cmd_gradcheck(args):
    kwargs = dict(fd_step=dashattn.config.grad.fd_step,
                  rel_tol=dashattn.config.grad.rel_tol,
                  delta=dashattn.config.grad.boundary_delta,
                  max_coords=dashattn.config.grad.max_coords)
    if args.trace is not None:
        _, trace = io.load_trace(args.trace)
        report = grad.gradcheck_trace(trace, args.seed, **kwargs)
    else:
        ops = None if args.ops is None else \
            [op for op in args.ops.split(",") if op]
        seeds = range(args.seed, args.seed + args.seeds)
        report = grad.gradcheck_suite(ops, seeds, n_jobs=args.n_jobs,
                                      **kwargs)
    if args.out is not None and args.out.endswith(".csv"):
        io.write_csv(args.out, report)
    elif args.out is not None:
        # skipped rows carry no error: null in JSON, not NaN
        rows = report.astype(object).where(report.notnull(), None)
        io.write_json(args.out, rows.to_dict("records"))
    failed = int((report["status"] == grad.STATUS_FAIL).sum())
    skipped = int((report["status"] == grad.STATUS_SKIPPED).sum())
    logging.info("gradcheck: %d checks, %d failed, %d skipped" %
                 (len(report), failed, skipped))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_dispersion(args):
    curve = diagnostics.dispersion_sweep(args.family, args.ns, args.mapping,
                                         args.seeds, alpha=args.alpha,
                                         k=args.k, sigma=args.sigma,
                                         heads=args.heads, seed=args.seed,
                                         n_jobs=args.n_jobs)
    out = args.out or os.path.join(dashattn.config.results_dir,
                                   "dispersion_%s_%s.csv" %
                                   (args.family, args.mapping))
    io.write_csv(out, curve)
    return EXIT_OK


def _stage_inputs(args):
    tensors = _read_inputs(args)
    run_config = load_run_config(args, tensors)
    attn = run_config.attn
    drawn = utils.random_inputs(attn, int(run_config.seed))
    return attn, [d if t is None else t for t, d in zip(tensors, drawn)]


def cmd_summarize(args):
    attn, (Q, K, V, q_bar) = _stage_inputs(args)
    summaries = summarize_all(K, q_bar, attn)
    out = args.out or os.path.join(dashattn.config.results_dir,
                                   "summaries.tnsr")
    io.write_tensor(out, summaries.summaries)
    logging.info("Wrote %d chunk summaries in: %s" %
                 (summaries.n_chunks, out))
    return EXIT_OK


def cmd_route(args):
    attn, (Q, K, V, q_bar) = _stage_inputs(args)
    table = route_all(Q, summarize_all(K, q_bar, attn), attn)
    out = args.out or os.path.join(dashattn.config.results_dir, "mask.tnsr")
    io.write_mask(out, table.mask)
    io.write_tensor(out + ".bias", table.chunk_bias)
    io.write_tensor(out + ".lam", table.lam)
    logging.info("Wrote the routing of %d queries in: %s (density %.4f)" %
                 (attn.n, out, table.mask.density()))
    return EXIT_OK


COMMANDS = {"attend": cmd_attend,
            "bench": cmd_bench,
            "gradcheck": cmd_gradcheck,
            "dispersion": cmd_dispersion,
            "summarize": cmd_summarize,
            "route": cmd_route}


def main(argv=None):
    """Parses the arguments, runs the subcommand and maps errors onto the
    exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logging.basicConfig(format='%(asctime)s: %(message)s',
                        level=logging.WARNING if args.quiet
                        else logging.INFO)
    start_time = time.time()
    try:
        code = COMMANDS[args.command](args)
    except VerificationError as e:
        logging.error("Verification failed: %s" % e)
        return EXIT_VERIFY_FAILED
    except (DashAttnError, RuntimeError, OSError) as e:
        logging.error("%s: %s" % (type(e).__name__, e))
        return EXIT_USAGE
    logging.info("Done! Took %.2f seconds." % (time.time() - start_time))
    return code


if __name__ == "__main__":
    sys.exit(main())
