"""Random parallel stochastic optimization (RAPSA) and its quasi-Newton and asynchronous variants."""
from .async_engine import DelayModel, resolve_conflict, run_async_threads, simulate_async
from .core import (BlockPartition, Constant, Diminishing, Hybrid, ParamVector, SelectionState,
                   make_partition, parse_schedule, sample_minibatch, select_blocks, step_size)
from .data_io import (SyntheticSpec, generate_linear_problem, ill_conditioned_problem, load_idx,
                      read_trace_csv, two_gaussians, write_trace_csv)
from .engine import RunTrace, SyncConfig, arapsa_iteration, average_traces, rapsa_iteration, run_sync
from .errors import (ConfigurationError, DivergenceError, EmptyDatasetError, IdxFormatError,
                     PreconditionError, RapsaError, RankDeficiencyError, StallError, TraceFormatError)
from .problems import (LeastSquaresProblem, LogisticProblem, block_minibatch_gradient, estimate_constants,
                       exact_optimum, full_objective)
from .quasi_newton import CurvatureMemory, admit_pair, two_loop_step
from .theory import (async_rate_constant, bound_report, fit_rate, min_iterations, neighborhood_bound,
                     sync_rate_constant)

__version__ = "0.1.0"
