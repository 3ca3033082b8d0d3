"""Equilibrium traffic assignment on disrupted road networks and a
meta-trained gated graph-convolutional surrogate for fast adaptation to
unseen closures and demand."""

from .assignment import (AssignmentResult, SolverOptions, all_or_nothing,
                         beckmann_objective, bpr_cost,
                         flow_conservation_residual, shortest_path_tree,
                         solve_ue)
from .config import ModelSettings, RunConfig, load_run_config
from .datasets import (ClosureTask, Dataset, Normalization, Sample, Split,
                       read_dataset, write_dataset)
from .errors import (AdaptationError, ConfigError, DatasetFormatError,
                     DatasetIntegrityError, GenerationError, GradientError,
                     MetassignError, NetworkParseError, NonFiniteError,
                     ScenarioInfeasibleError, ShapeError, UndefinedMetricError,
                     ValidationError)
from .evaluation import (MetaTestReport, TaskReport, meta_test, r_squared,
                         rerender_report, write_report)
from .meta import (HistoryEntry, MetaConfig, MetaTrainResult, MetaTrainState,
                   TaskData, inner_adapt, meta_gradient, meta_step, meta_train,
                   sample_task_batch)
from .model import (FlowSurrogate, GatedGCNParams, GNNHyper, GraphBatch,
                    decode, encode, forward, init_params, load_params,
                    mpnn_layer, save_params, task_loss)
from .network import (ODMatrix, RoadNetwork, parse_network, parse_node_coords,
                      parse_trips)
from .scenarios import (GenerationConfig, PerturbationParams,
                        build_edge_features, build_node_features,
                        compute_normalization, generate_dataset, perturb_od,
                        sample_closure)

__version__ = "0.1.0"
