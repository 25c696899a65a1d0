"""Speculative decoding with recurrent drafters, tree drafting and UCB tree search."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    InvalidArgumentError,
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    ModelFormatError,
    SpecDraftError,
)
from .models import (  # noqa: E402
    DrafterState,
    SsmDrafter,
    TabularModel,
    drafter_init,
    drafter_step,
    duplicate_state,
    load_model,
    constant_beta_pair,
    greedy_decode,
    mixed_drafter,
    save_model,
    target_score_parallel,
)
from .tree import TreeConfig, batch_sizes, build_cache_plan, draft_tree, flatten_for_scoring, verify_tree  # noqa: E402
from .verify import DraftSequence, Mode, VerifyOutcome, accept_token, residual_distribution, verify_sequential  # noqa: E402
from .engine import GenerationConfig, RunMetrics, Strategy, generate  # noqa: E402
from .bandit import UCBTreeSearch, compute_reward, estimate_lambda_gamma, select_arm, update  # noqa: E402
from .metrics import (  # noqa: E402
    acceptance_length_expectation,
    calibration_pairs,
    expected_calibration_error,
    speedup_estimate,
)
from .bench import ExperimentSpec, compare_fixed_vs_bandit, emit_report, run_experiment, sweep_tree_configs  # noqa: E402
