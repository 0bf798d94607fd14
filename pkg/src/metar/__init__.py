"""Few-shot link prediction in knowledge graphs via relation meta and gradient meta."""

from .episode import EpisodeTask, SamplerConfig, corrupt_tail, make_eval_episodes, sample_episode
from .evaluation import EvalReport, evaluate, rank_query, write_report
from .grad import GradMode, TaskGradients, backward_task, finite_diff_check
from .kg import (
    BackgroundMode,
    DatasetBundle,
    SynthConfig,
    TripleStore,
    Vocabulary,
    dataset_stats,
    generate_synthetic,
    load_benchmark,
)
from .model import (
    Hyperparams,
    ModelParams,
    aggregate_meta,
    entity_pair_meta,
    forward_task,
    gradient_meta,
    hinge_loss,
    rapid_update,
    score,
)
from .train import AdamState, Checkpoint, TrainConfig, adam_step, init_params, pretrain_transe, train_loop

__version__ = "0.1.0"
