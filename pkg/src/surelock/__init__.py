"""Convergence-gated position locking for masked-diffusion sampling.

A desk-scale laboratory: a toy bidirectional masked-diffusion transformer
whose per-step compute shrinks as positions lock, exact GEMM-level FLOPs
accounting, and the machinery to verify the lock rule's terminal error
bound on measured and synthetic trajectories.
"""

from .analysis import (
    BoundReport,
    ConstantsReport,
    Trajectory,
    check_lock_bound,
    estimate_contraction,
    estimate_smoothness,
    lipschitz_constants,
    simulate_trajectory,
    stepwise_kl_curve,
    tail_gain,
)
from .flops import (
    FlopsReport,
    GemmCounter,
    active_step_flops,
    baseline_step_flops,
    micro_active_ratio,
)
from .lockctl import (
    LockEvent,
    LockPolicy,
    apply_locks,
    evaluate_locks,
    probe_unlock,
    threshold_for_deviation,
    uncertainty,
)
from .model import (
    ForwardResult,
    FrozenInputs,
    LayerKVCache,
    ModelConfig,
    Weights,
    forward_partial,
    init_weights,
    load_weights,
    save_weights,
)
from .numkit import (
    kl_from_logits,
    log_softmax,
    percentile_nearest_rank,
    spectral_norm,
)
from .sampler import (
    RunConfig,
    RunResult,
    SamplerState,
    StepRecord,
    run_sampler,
    select_compute_rows,
    step,
    unmask_schedule,
    update_mask,
)

__version__ = "0.1.0"

__all__ = [
    "BoundReport", "ConstantsReport", "Trajectory", "check_lock_bound",
    "estimate_contraction", "estimate_smoothness", "lipschitz_constants",
    "simulate_trajectory", "stepwise_kl_curve", "tail_gain",
    "FlopsReport", "GemmCounter", "active_step_flops", "baseline_step_flops",
    "micro_active_ratio",
    "LockEvent", "LockPolicy", "apply_locks", "evaluate_locks", "probe_unlock",
    "threshold_for_deviation", "uncertainty",
    "ForwardResult", "FrozenInputs", "LayerKVCache", "ModelConfig", "Weights",
    "forward_partial", "init_weights", "load_weights", "save_weights",
    "kl_from_logits", "log_softmax", "percentile_nearest_rank", "spectral_norm",
    "RunConfig", "RunResult", "SamplerState", "StepRecord", "run_sampler",
    "select_compute_rows", "step", "unmask_schedule", "update_mask",
    "__version__",
]
