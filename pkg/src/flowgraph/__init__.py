"""Flow-matching retrieval over text-attributed knowledge graphs.

A self-contained pipeline: JSONL graph/query ingestion, hashed-ngram text
features, a path-tree retrieval decision process, an MLP policy trained
with flow-matching or baseline objectives, frequency-ranked sampling,
retrieval metrics, an exact enumeration oracle for small graphs, and a
synthetic benchmark generator.
"""

from .kg import (Graph, GraphFormatError, NodeRecord, Query, QuerySet,
                 build_graph, load_graph, load_queries, neighbors,
                 save_graph, save_queries, validate_graph)
from .encoder import (EncoderConfig, cosine, dense_retrieve, derive_seed,
                      embed, featurize_action, featurize_state, seed_nodes,
                      tokenize)
from .mdp import (Action, RewardSpec, State, Trajectory, BINARY_REWARD,
                  apply_action, candidate_actions, initial_state,
                  trajectory_reward)
from .model import (HiddenSpec, Model, OptState, adam_step, grad_check,
                    init_model, load_checkpoint, policy_probs,
                    save_checkpoint)
from .objectives import (PreferencePair, TrajectoryFeatures, TransitionBatch,
                         dble_loss, prm_loss, sft_loss, subtb_loss, tb_loss)
from .trainer import (CollectionResult, TrainConfig, TrainResult,
                      TrainingLog, collect_trajectories,
                      expand_local_exploration, featurize_trajectory,
                      make_preference_pairs, train)
from .sampler import (RetrievalResult, load_results, rerank, retrieve,
                      sample_trajectory, save_results)
from .metrics import (MetricsReport, dedup_recall_at_k, evaluate, hit_at_k,
                      mrr, recall_at_k)
from .oracle import (FlowTable, distribution_distance,
                     enumerate_trajectories, exact_flows, exact_policy,
                     terminal_distribution)
from .synth import Fixture, SynthConfig, fixture_suite, generate
from .estimators import DenseRetriever, FlowRetriever

__version__ = "0.1.0"
