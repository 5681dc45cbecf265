"""Default configuration parameters for dashattn."""
import logging

from dashattn.configparser import \
    (AddConfigVar, BoolParam, EnumStr, FloatParam, IntParam, StrParam,
     ListParam, DashAttnConfigParser)


_logger = logging.getLogger('dashattn.configdefaults')

config = DashAttnConfigParser()


def _positive(x):
    return x > 0


# Globals
AddConfigVar('default_mode', "Default attention mode.",
             EnumStr("dash", "dense", "topk"))
AddConfigVar('n_jobs', "Number of joblib workers for row/cell parallel "
             "work (1 runs in process).", IntParam(1))
AddConfigVar('verify_tol', "Maximum absolute error accepted by --verify.",
             FloatParam(1e-8, _positive))
AddConfigVar('results_dir', "Default directory to store results.",
             StrParam("results"))

# Attention pipeline
AddConfigVar('attention.block_size', "Chunk size B in tokens.",
             IntParam(64, _positive))
AddConfigVar('attention.alpha', "Entmax exponent used for chunk routing.",
             FloatParam(1.5, lambda a: a > 1))
AddConfigVar('attention.gamma', "Scale applied to chunk logits before "
             "routing.", FloatParam(1.0, _positive))
AddConfigVar('attention.sigma', "Prior strength; larger values flatten the "
             "routing prior.", FloatParam(1e8, _positive))
AddConfigVar('attention.include_prev_chunk', "Whether the full chunk right "
             "before the query's own chunk joins the diagonal branch.",
             BoolParam(True))
AddConfigVar('attention.summary_mode', "How chunk summaries are built: "
             "learned local attention or plain mean pooling.",
             EnumStr("local", "mean"))
AddConfigVar('attention.topk', "Chunk budget of the top-k baseline.",
             IntParam(16, _positive))
AddConfigVar('attention.tile', "Query rows per tile in dense attention.",
             IntParam(512, _positive))

# Entmax solver
AddConfigVar('entmax.max_bisect_iter', "Maximum number of bisection "
             "halvings for the entmax threshold.", IntParam(100, _positive))
AddConfigVar('entmax.tol', "Tolerance on the normalization residual.",
             FloatParam(1e-12, _positive))

# Gradient checks
AddConfigVar('grad.boundary_delta', "Coordinates closer than this to the "
             "support boundary are skipped.", FloatParam(1e-3, _positive))
AddConfigVar('grad.fd_step', "Central finite-difference step.",
             FloatParam(1e-5, _positive))
AddConfigVar('grad.rel_tol', "Relative error accepted by gradcheck.",
             FloatParam(1e-3, _positive))
AddConfigVar('grad.max_coords', "Coordinates sampled per parameter by "
             "gradcheck.", IntParam(48, _positive))

# Benchmarks
AddConfigVar('bench.warmups', "Untimed runs before timing.", IntParam(2))
AddConfigVar('bench.repeats', "Timed runs; the median is reported.",
             IntParam(9, _positive))
AddConfigVar('bench.dtype', "Floating point type of the timing path.",
             EnumStr("float64", "float32"))
AddConfigVar('bench.sparsities', "Default sparsity grid.",
             ListParam([0.75, 0.875, 0.9375]))

# Dispersion sweeps
AddConfigVar('dispersion.ns', "Sequence lengths of the dispersion sweep.",
             ListParam([256, 1024, 4096, 16384, 65536]))
AddConfigVar('dispersion.seeds', "Number of seeds per sweep cell.",
             IntParam(32, _positive))
