"""Iterative masked-diffusion sampling with optional position locking.

Four modes share one step routine:

  baseline   every non-locked position is computed, nothing ever locks
  surelock   KL-gated permanent locking with per-layer K/V caching
  selection  only the most volatile fraction of active rows is computed
             each step; the rest reuse stale posteriors and K/V
  hybrid     selection restricted to non-locked rows, plus locking

Each step embeds the current token sequence, runs the row-partitioned
forward, commits the scheduled number of highest-confidence masked
positions, evaluates the lock rule on freshly computed unmasked rows, and
(optionally, every probe period) probes locked rows for unlocking. All
randomness flows from one splitmix64 stream per run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, InvalidInputError, InvalidStateError
from .flops import FlopsReport, GemmCounter, active_step_flops, baseline_step_flops
from .lockctl import LockEvent, LockPolicy, apply_locks, evaluate_locks, probe_unlock
from .model import FrozenInputs, LayerKVCache, Weights, forward_partial
from .numkit import kl_from_log_probs_rows, percentile_nearest_rank
from .prng import SplitMix64

MODES = ("baseline", "surelock", "selection", "hybrid")
LOCKING_MODES = ("surelock", "hybrid")
SELECTING_MODES = ("selection", "hybrid")


@dataclass(frozen=True)
class RunConfig:
    """Shape and policy of one sampling run."""

    n_prompt: int
    n_gen: int
    steps: int
    policy: LockPolicy = field(default_factory=LockPolicy)
    mode: str = "baseline"
    block_length: int | None = None
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode {self.mode!r} not one of {MODES}")
        if self.n_prompt < 0 or self.n_gen < 1:
            raise ConfigError("need n_prompt >= 0 and n_gen >= 1")
        if not 1 <= self.steps <= self.n_gen:
            raise ConfigError(f"steps={self.steps} must lie in [1, n_gen={self.n_gen}]")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        bl = self.block_length
        if bl is not None:
            if bl < 1 or self.n_gen % bl != 0:
                raise ConfigError(f"block_length={bl} must divide n_gen={self.n_gen}")
            n_blocks = self.n_gen // bl
            if self.steps % n_blocks != 0:
                raise ConfigError(f"steps={self.steps} must split evenly over {n_blocks} blocks")
            if self.steps // n_blocks > bl:
                raise ConfigError("more steps per block than positions to unmask")
        if self.mode in SELECTING_MODES and self.policy.hybrid_fraction is None:
            raise ConfigError(f"mode {self.mode!r} requires policy.hybrid_fraction")

    @property
    def n_positions(self) -> int:
        return self.n_prompt + self.n_gen


def unmask_schedule(n_gen: int, steps: int) -> list[int]:
    """Balanced per-step unmask counts: first n_gen % steps steps get the
    ceiling, the rest the floor; the counts sum to n_gen."""
    if not 1 <= steps <= n_gen:
        raise ConfigError(f"steps={steps} must lie in [1, n_gen={n_gen}]")
    base, rem = divmod(n_gen, steps)
    return [base + 1] * rem + [base] * (steps - rem)


def select_compute_rows(active: np.ndarray, last_step_kl: dict[int, float], fraction: float) -> np.ndarray:
    """The ceil(fraction * |active|) rows with the largest last observed
    step KL, ties to the lowest index; rows never scored rank first."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction={fraction} outside (0, 1]")
    active = np.asarray(active, dtype=np.intp)
    if active.size == 0:
        return active
    count = math.ceil(fraction * active.size)
    ranked = sorted(active, key=lambda i: (-last_step_kl.get(int(i), np.inf), i))
    return np.array(sorted(ranked[:count]), dtype=np.intp)


def update_mask(
    log_post: np.ndarray,
    log_post_valid: np.ndarray,
    mask_flags: np.ndarray,
    k_t: int,
    block: tuple[int, int],
    temperature: float,
    rng: SplitMix64,
    mask_id: int | None = None,
) -> tuple[list[int], dict[int, int]]:
    """Choose the k_t highest-confidence masked in-block positions and their
    committed tokens (argmax at temperature 0, tempered categorical draw
    otherwise). Ties break toward the lowest position index; draws happen in
    ascending position order. The mask id is an absorbing-state marker, not
    vocabulary, so it is never committed: confidence and draws range over the
    other ids. Does not mutate any input."""
    lo, hi = block
    in_block = [i for i in range(lo, hi) if mask_flags[i]]
    scorable = [i for i in in_block if log_post_valid[i]]
    if k_t > len(in_block):
        raise InvalidStateError(f"asked to unmask {k_t} of {len(in_block)} masked positions")
    if k_t > len(scorable):
        raise InvalidStateError(
            f"only {len(scorable)} of {len(in_block)} masked positions have posteriors; need {k_t}"
        )
    ids = np.arange(log_post.shape[1])
    if mask_id is not None:
        ids = ids[ids != mask_id]
    confidence = {i: float(np.exp(log_post[i, ids].max())) for i in scorable}
    chosen = sorted(scorable, key=lambda i: (-confidence[i], i))[:k_t]
    chosen.sort()

    committed: dict[int, int] = {}
    for i in chosen:
        restricted = log_post[i, ids]
        if temperature == 0.0:
            committed[i] = int(ids[np.argmax(restricted)])
        else:
            tempered = restricted / temperature
            probs = np.exp(tempered - tempered.max())
            probs /= probs.sum()
            committed[i] = int(ids[rng.categorical(probs)])
    return chosen, committed


@dataclass
class SamplerState:
    """Mutable per-run state; one writer at a time."""

    tokens: np.ndarray  # (N,) token ids; masked positions carry mask_id
    mask_flags: np.ndarray  # (N,) bool, True while masked
    lock: np.ndarray  # (N,) bool
    lock_step: np.ndarray  # (N,) int, -1 when not locked
    caches: list[LayerKVCache]  # locked rows only
    frozen: FrozenInputs
    stale_k: list[np.ndarray]  # last computed K per layer, any row
    stale_v: list[np.ndarray]
    stale_step: np.ndarray  # (N,) int, -1 = never computed
    log_post: np.ndarray  # (N, V) latest reported log-posteriors
    log_post_valid: np.ndarray  # (N,) bool
    last_step_kl: dict[int, float]
    last_uncertainty: dict[int, float]
    cooldown_until: dict[int, int]
    ever_unlocked: set[int]
    events: list[LockEvent]
    rng: SplitMix64
    t: int = 0
    probe_diagnostics: dict[int, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def fresh(cls, run: RunConfig, w: Weights, prompt: np.ndarray) -> "SamplerState":
        cfg = w.config
        n = run.n_positions
        if n > cfg.max_seq:
            raise ConfigError(f"{n} positions exceed max_seq={cfg.max_seq}")
        prompt = np.asarray(prompt, dtype=np.int64)
        if prompt.shape != (run.n_prompt,):
            raise InvalidInputError(f"prompt length {prompt.shape} != n_prompt={run.n_prompt}")
        if prompt.size and (prompt.min() < 0 or prompt.max() >= cfg.vocab_size):
            raise InvalidInputError("prompt token ids outside vocabulary")
        if np.any(prompt == cfg.mask_id):
            raise InvalidInputError("prompt may not contain the mask token")

        tokens = np.full(n, cfg.mask_id, dtype=np.int64)
        tokens[: run.n_prompt] = prompt
        mask_flags = np.zeros(n, dtype=bool)
        mask_flags[run.n_prompt :] = True
        return cls(
            tokens=tokens,
            mask_flags=mask_flags,
            lock=np.zeros(n, dtype=bool),
            lock_step=np.full(n, -1, dtype=np.int64),
            caches=[LayerKVCache.empty(n, cfg.kv_dim) for _ in range(cfg.n_layers)],
            frozen=FrozenInputs.empty(n, cfg.d_model),
            stale_k=[np.zeros((n, cfg.kv_dim)) for _ in range(cfg.n_layers)],
            stale_v=[np.zeros((n, cfg.kv_dim)) for _ in range(cfg.n_layers)],
            stale_step=np.full(n, -1, dtype=np.int64),
            log_post=np.full((n, cfg.vocab_size), np.nan),
            log_post_valid=np.zeros(n, dtype=bool),
            last_step_kl={},
            last_uncertainty={},
            cooldown_until={},
            ever_unlocked=set(),
            events=[],
            rng=SplitMix64(run.seed),
        )

    @property
    def n(self) -> int:
        return len(self.tokens)

    def stale_view(self, computed_rows: np.ndarray) -> tuple[list[LayerKVCache], FrozenInputs]:
        """Cache view backing a forward that computes only ``computed_rows``:
        every other row reads its most recent K/V (locked rows' entries are
        their lock-time values, which never change while locked)."""
        n = self.n
        valid = self.stale_step >= 0
        caches = []
        for layer_k, layer_v, cache in zip(self.stale_k, self.stale_v, self.caches):
            k = layer_k.copy()
            v = layer_v.copy()
            locked_rows = np.flatnonzero(cache.valid)
            k[locked_rows] = cache.k[locked_rows]
            v[locked_rows] = cache.v[locked_rows]
            caches.append(LayerKVCache(k=k, v=v, valid=valid | cache.valid))
        frozen = FrozenInputs(x_hat=np.zeros((n, self.frozen.x_hat.shape[1])), valid=np.ones(n, dtype=bool))
        return caches, frozen

    def release_locks(self, rows: list[int], policy: LockPolicy) -> None:
        """Clear lock state for ``rows``: caches and frozen inputs are
        invalidated, the cooldown timer starts, and future re-locks use the
        tightened threshold. The reported log-posterior stays frozen until
        the row is next computed."""
        for i in rows:
            if not self.lock[i]:
                raise InvalidStateError(f"cannot unlock position {i}: not locked")
            drift, proxy_u = self.probe_diagnostics.get(i, (float("nan"), float("nan")))
            self.lock[i] = False
            self.lock_step[i] = -1
            for cache in self.caches:
                cache.valid[i] = False
            self.frozen.valid[i] = False
            self.cooldown_until[i] = self.t + policy.relock_cooldown
            self.ever_unlocked.add(i)
            self.last_step_kl.pop(i, None)  # rank as unscored if selection resumes
            self.events.append(
                LockEvent(position=i, step=self.t, kind="unlock", step_kl=drift, uncertainty=proxy_u)
            )


@dataclass
class StepRecord:
    """Everything observed during one diffusion step."""

    t: int
    n_positions: int
    active_rows: int  # M_t: non-locked positions at step start
    computed_rows: int  # C_t: rows actually pushed through the model
    flops_base: int
    flops_actual: int
    flops_counted: int
    head_flops: int
    probe_flops: int
    newly_unmasked: list[int]
    committed: dict[int, int]
    newly_locked: list[int]
    newly_unlocked: list[int]
    step_kl: dict[int, float]
    uncert: dict[int, float]
    mean_step_kl: float | None
    wall_seconds: float

    @property
    def ratio(self) -> float:
        return self.flops_actual / self.flops_base


def step(
    state: SamplerState,
    run: RunConfig,
    w: Weights,
    k_t: int,
    block: tuple[int, int],
    counter: GemmCounter | None = None,
    probe_counter: GemmCounter | None = None,
) -> StepRecord:
    """Advance the sampler by one diffusion step, mutating ``state``."""
    t0 = time.perf_counter()
    counter = counter if counter is not None else GemmCounter()
    probe_counter = probe_counter if probe_counter is not None else GemmCounter()
    cfg = w.config
    policy = run.policy
    state.t += 1
    t = state.t
    n = state.n

    active = np.flatnonzero(~state.lock)
    m_t = int(active.size)
    if run.mode in SELECTING_MODES:
        selected = select_compute_rows(active, state.last_step_kl, policy.hybrid_fraction)
        # a row with no prior computation has nothing to reuse, so it is
        # always computed; after the first step the fraction rule is exact
        never_computed = active[state.stale_step[active] < 0]
        computed = np.union1d(selected, never_computed)
        caches, frozen = state.stale_view(computed)
    else:
        computed = active
        caches, frozen = state.caches, state.frozen

    flops_before, head_before = counter.snapshot()
    result = forward_partial(w, state.tokens, state.mask_flags, computed, caches, frozen, counter=counter)
    lp = kernels.log_softmax_rows(result.logits)

    # step KL against each row's previous reported posterior; infinity when
    # there is none (first step, or first time this row is computed)
    kl_vals = np.full(computed.size, np.inf)
    had_prev = state.log_post_valid[computed]
    if had_prev.any():
        idx = np.flatnonzero(had_prev)
        kl_vals[idx] = kl_from_log_probs_rows(lp[idx], state.log_post[computed[idx]])
    u_vals = 1.0 - np.exp(lp.max(axis=1))

    state.log_post[computed] = lp
    state.log_post_valid[computed] = True
    for layer_i in range(cfg.n_layers):
        state.stale_k[layer_i][computed] = result.fresh_k[layer_i]
        state.stale_v[layer_i][computed] = result.fresh_v[layer_i]
    state.stale_step[computed] = t

    step_kl = {int(i): float(v) for i, v in zip(computed, kl_vals)}
    uncert = {int(i): float(v) for i, v in zip(computed, u_vals)}
    state.last_step_kl.update(step_kl)
    state.last_uncertainty.update(uncert)

    newly_unmasked, committed = update_mask(
        state.log_post, state.log_post_valid, state.mask_flags, k_t, block,
        run.temperature, state.rng, mask_id=cfg.mask_id,
    )
    for pos, tok in committed.items():
        state.tokens[pos] = tok
        state.mask_flags[pos] = False

    newly_locked: list[int] = []
    if run.mode in LOCKING_MODES:
        candidates = [int(i) for i in computed if not state.mask_flags[i]]
        newly_locked = evaluate_locks(
            candidates, step_kl, uncert, policy,
            t=t, cooldown_until=state.cooldown_until, ever_unlocked=state.ever_unlocked,
        )
        apply_locks(state, newly_locked, result.fresh_k, result.fresh_v, computed, result.block_inputs)

    newly_unlocked: list[int] = []
    probe_before = probe_counter.flops
    if policy.unlock_enabled and t % policy.probe_period == 0 and state.lock.any():
        gate_threshold = percentile_nearest_rank(u_vals, policy.percentile)
        newly_unlocked = probe_unlock(state, w, policy, gate_threshold, counter=probe_counter)
        state.release_locks(newly_unlocked, policy)

    flops_after, head_after = counter.snapshot()
    f_base = baseline_step_flops(cfg, 1, n)
    f_actual = active_step_flops(cfg, 1, n, int(computed.size))

    finite_unmasked = [v for i, v in step_kl.items() if not state.mask_flags[i] and np.isfinite(v)]
    mean_kl = float(np.mean(finite_unmasked)) if finite_unmasked else None

    return StepRecord(
        t=t,
        n_positions=n,
        active_rows=m_t,
        computed_rows=int(computed.size),
        flops_base=f_base,
        flops_actual=f_actual,
        flops_counted=flops_after - flops_before,
        head_flops=head_after - head_before,
        probe_flops=probe_counter.flops - probe_before,
        newly_unmasked=newly_unmasked,
        committed=committed,
        newly_locked=[int(i) for i in newly_locked],
        newly_unlocked=[int(i) for i in newly_unlocked],
        step_kl=step_kl,
        uncert=uncert,
        mean_step_kl=mean_kl,
        wall_seconds=time.perf_counter() - t0,
    )


@dataclass
class RunResult:
    tokens: np.ndarray
    trace: list[StepRecord]
    events: list[LockEvent]
    flops: FlopsReport
    active_ratio: float  # micro-average of M_t / N over steps
    computed_ratio: float  # micro-average of C_t / N over steps
    total_flops_base: int
    total_flops_actual: int
    total_head_flops: int
    total_probe_flops: int
    wall_seconds: float
    history: np.ndarray | None = None  # (S, N, V) reported log-posteriors
    history_valid: np.ndarray | None = None  # (S, N)

    @property
    def e2e_tps(self) -> float:
        produced = sum(len(r.newly_unmasked) for r in self.trace)
        return produced / self.wall_seconds if self.wall_seconds > 0 else float("inf")

    def step_tps(self) -> list[float]:
        return [
            len(r.newly_unmasked) / r.wall_seconds if r.wall_seconds > 0 else float("inf")
            for r in self.trace
        ]


def run_sampler(
    run: RunConfig,
    w: Weights,
    prompt: np.ndarray,
    record_trajectories: bool = False,
) -> RunResult:
    """Run the configured sampler to completion.

    The generation region starts fully masked; prompt positions are
    unmasked from the start (and become lock candidates once step KL is
    defined). Blocks, when shorter than the generation region, are
    processed left to right with the step budget split evenly among them.
    """
    state = SamplerState.fresh(run, w, prompt)
    n = state.n
    block_len = run.block_length or run.n_gen
    n_blocks = run.n_gen // block_len
    steps_per_block = run.steps // n_blocks
    schedule = unmask_schedule(block_len, steps_per_block)

    counter = GemmCounter()
    probe_counter = GemmCounter()
    records: list[StepRecord] = []
    history = np.full((run.steps, n, w.config.vocab_size), np.nan) if record_trajectories else None
    history_valid = np.zeros((run.steps, n), dtype=bool) if record_trajectories else None

    t_start = time.perf_counter()
    for b in range(n_blocks):
        block = (run.n_prompt + b * block_len, run.n_prompt + (b + 1) * block_len)
        for k_t in schedule:
            records.append(step(state, run, w, k_t, block, counter, probe_counter))
            if record_trajectories:
                history[state.t - 1] = state.log_post
                history_valid[state.t - 1] = state.log_post_valid
    wall = time.perf_counter() - t_start

    if np.any(state.mask_flags):
        raise InvalidStateError("schedule finished with masked positions remaining")

    total_base = sum(r.flops_base for r in records)
    total_actual = sum(r.flops_actual for r in records)
    return RunResult(
        tokens=state.tokens.copy(),
        trace=records,
        events=list(state.events),
        flops=FlopsReport.from_trace(records),
        active_ratio=sum(r.active_rows for r in records) / (len(records) * n),
        computed_ratio=sum(r.computed_rows for r in records) / (len(records) * n),
        total_flops_base=total_base,
        total_flops_actual=total_actual,
        total_head_flops=sum(r.head_flops for r in records),
        total_probe_flops=probe_counter.flops,
        wall_seconds=wall,
        history=history,
        history_valid=history_valid,
    )
