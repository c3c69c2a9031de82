"""Energy-based Glauber-dynamics discrete diffusion at desk scale.

A single-site heat-bath chain over token sequences serves as the forward
noising process, with a frozen copy of a dual-mode transformer as its
kernel. Training minimizes a score-entropy loss built from stored forward
conditionals; inference runs one causal pass followed by reverse-order
mask infilling. Exact oracles on enumerable spaces verify every piece.
"""

from .chain import (
    Trajectory,
    UpdateSchedule,
    Vocabulary,
    build_schedule,
    heat_bath_step,
    metropolis_step,
    run_forward,
)
from .energies import (
    CausalEnergy,
    PottsEnergy,
    TabularDistribution,
    causal_ppl,
    energy_delta,
    potts_conditional,
    tabular_conditional,
)
from .hmm import HmmCorpus, random_hmm
from .loss import (
    TargetMode,
    bregman_offset,
    bregman_term,
    path_ratio_targets,
    snapshot_batch_loss,
    snapshot_times,
    step_loss,
)
from .net import (
    DualModeTransformer,
    GradientTape,
    ModeFlag,
    ModelConfig,
    augment_time,
    backprop,
    causal_next_logits,
    infill_logits,
    init_base,
    param_counts,
)
from .oracle import (
    StateEnumeration,
    detailed_balance_residual,
    exact_marginals,
    exact_reverse_kernel,
    kl_divergence,
    optimal_reverse_infill,
    stationarity_residual,
    target_gap_report,
    tv_distance,
)
from .sampling import (
    GenerationReport,
    GenerationSpec,
    exact_reverse_generate,
    generate,
    generate_many,
    generate_with_prefix,
    refine_windowed,
)
from .training import (
    FrozenKernel,
    TrainConfig,
    TrainingDiverged,
    ema_refresh,
    lr_at,
    make_frozen,
    pretrain_base,
    train,
)

__version__ = "0.1.0"
