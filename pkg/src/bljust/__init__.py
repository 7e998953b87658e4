"""Single-loop penalized bilevel training for joint supervised and contrastive learning."""

from .analytic import (
    BilevelProblem,
    ConvergenceReport,
    SolverConfig,
    check_penalty_threshold,
    estimate_pl_constant,
    make_affine_projection_problem,
    solve_penalized,
)
from .data import GeneratorSpec, SequencePool, generate, generate_eval, greedy_ctc_decode, token_error_rate
from .engine import (
    MetricRecord,
    PenaltySchedule,
    TrainConfig,
    TrainState,
    bljust_step,
    train_bljust,
    train_ptft,
    train_supervised,
)
from .estimators import SequenceRecognizer
from .losses import ContrastiveBatch, LabeledBatch, ctc_loss, infonce_loss
from .model import EncoderConfig, ParameterPartition, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
