"""KS-test benchmark for GNN explainers plus a batch mask explainer."""

from .batch_explainer import (BatchExplainConfig, BatchExplanation, ablate,
                              explain_batch, ks_per_graph, objective_eval,
                              pairwise_similarity, score_function_gradient)
from .bench import (EcdfPair, KsReport, RemovalSweep, augment_and_retrain,
                    ecdf_pair, fidelity, fidelity_curve, ks_report,
                    ks_two_sample, nuclei_f1, sweep_removal)
from .explainers import (MaskOptConfig, NodeImportanceMap,
                         explain_gnnexplainer, explain_gradcam,
                         explain_gradcampp, explain_graphlrp, explain_oracle,
                         explain_random, ranking_auc)
from .graphs import (CellGraph, Dataset, SyntheticConfig, generate_synthetic,
                     knn_build, load_graphs, remove_nodes, save_graphs,
                     top_fraction_nodes)
from .model import (GnnModel, TrainConfig, backward, forward, init_model,
                    load_model, predict, save_model, train)

__all__ = [name for name in dir() if not name.startswith("_")]
