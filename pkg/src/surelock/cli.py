"""Command-line front end: runs, sweeps, bound checks, and reports.

Subcommands:

  run          one sampling run; writes trace.jsonl, trace.csv, summary.json
               (byte-stable given config+seed) and timing.json (informational)
  sweep        cross-product of threshold/percentile/step/length/seed lists,
               one CSV row per point
  verify-bound lock-bound check over stored trajectories or a fresh run
  simulate     synthetic-trajectory bound battery
  constants    operator-norm / Lipschitz constants report
  flops-check  counter-vs-formula equality proof over built-in configs

Exit codes: 0 ok, 2 configuration error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .errors import ConfigError, InvalidInputError, InvalidStateError
from .flops import baseline_step_flops
from .lockctl import LockPolicy
from .model import ModelConfig, init_weights, load_weights
from .prng import uniforms
from .sampler import MODES, LOCKING_MODES, RunConfig, RunResult, run_sampler

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

DEFAULT_MODEL = {
    "vocab_size": 32,
    "d_model": 32,
    "n_layers": 2,
    "n_heads": 2,
    "d_ff": 64,
    "max_seq": 64,
}
DEFAULT_RUN = {"n_prompt": 16, "n_gen": 16, "steps": 16, "mode": "baseline", "seed": 0}


def random_prompt(cfg: ModelConfig, n_prompt: int, seed: int) -> np.ndarray:
    """Deterministic prompt ids avoiding the mask token."""
    u = uniforms(seed ^ 0x9C0FFEE, n_prompt)
    ids = (u * (cfg.vocab_size - 1)).astype(np.int64)
    ids[ids >= cfg.mask_id] += 1
    return ids


# ---------------------------------------------------------------------------
# config assembly


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    out.update({k: v for k, v in override.items() if v is not None})
    return out


def _build(args, overrides: dict | None = None):
    """Model, weights, run config, and prompt from config file plus flags."""
    doc = _load_config_file(getattr(args, "config", None))
    overrides = overrides or {}

    model_dict = _merge(DEFAULT_MODEL, doc.get("model", {}))
    try:
        cfg = ModelConfig.from_dict(model_dict)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc

    if doc.get("weights_path"):
        w = load_weights(doc["weights_path"])
        cfg = w.config
    else:
        w = init_weights(cfg, int(doc.get("weights_seed", 1234)))
    scale = overrides.get("weight_scale", None)
    if scale is None:
        scale = getattr(args, "weight_scale", None)
    if scale is None:
        scale = doc.get("weight_scale", 1.0)
    if scale != 1.0:
        w = w.scaled(float(scale))

    flag_run = {
        "n_prompt": getattr(args, "n_prompt", None),
        "n_gen": getattr(args, "n_gen", None),
        "steps": getattr(args, "steps", None),
        "mode": getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "block_length": getattr(args, "block_length", None),
        "temperature": getattr(args, "temperature", None),
    }
    run_dict = _merge(_merge(DEFAULT_RUN, doc.get("run", {})), flag_run)
    run_dict = _merge(run_dict, {k: v for k, v in overrides.items() if k in (
        "n_prompt", "n_gen", "steps", "mode", "seed", "block_length", "temperature")})

    flag_policy = {
        "epsilon": getattr(args, "eps", None),
        "percentile": getattr(args, "percentile", None),
        "hybrid_fraction": getattr(args, "fraction", None),
    }
    if getattr(args, "no_gate", False):
        flag_policy["gate_enabled"] = False
    if getattr(args, "unlock", False):
        flag_policy["unlock_enabled"] = True
    policy_dict = _merge(doc.get("policy", {}), flag_policy)
    policy_dict = _merge(policy_dict, {k: v for k, v in overrides.items() if k in (
        "epsilon", "percentile", "gate_enabled", "hybrid_fraction", "unlock_enabled")})
    try:
        policy = LockPolicy(**policy_dict)
        run = RunConfig(policy=policy, **run_dict)
    except TypeError as exc:
        raise ConfigError(f"bad run/policy config: {exc}") from exc

    if "prompt_tokens" in doc:
        prompt = np.asarray(doc["prompt_tokens"], dtype=np.int64)
    elif getattr(args, "prompt", None):
        prompt = np.asarray([int(x) for x in args.prompt.split(",")], dtype=np.int64)
    else:
        prompt = random_prompt(cfg, run.n_prompt, run.seed)

    echo = {"model": cfg.to_dict(), "run": run_dict, "policy": policy_dict or {},
            "weight_scale": scale, "prompt_tokens": prompt.tolist()}
    return w, run, prompt, echo


# ---------------------------------------------------------------------------
# serialization


def _float_or_none(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else ("inf" if x > 0 else "-inf")


def emit_trace(result: RunResult, out_dir: Path) -> None:
    """Write trace.jsonl and the plotting CSV; byte-stable across reruns."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "trace.jsonl", "w") as fh:
        for rec in result.trace:
            row = {
                "t": rec.t,
                "M_t": rec.active_rows,
                "C_t": rec.computed_rows,
                "F_base": rec.flops_base,
                "F_actual": rec.flops_actual,
                "F_counted": rec.flops_counted,
                "head_flops": rec.head_flops,
                "probe_flops": rec.probe_flops,
                "ratio": rec.ratio,
                "newly_unmasked": rec.newly_unmasked,
                "newly_locked": rec.newly_locked,
                "newly_unlocked": rec.newly_unlocked,
                "mean_D": _float_or_none(rec.mean_step_kl),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(out_dir / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "ratio", "M_t", "mean_D"])
        for rec in result.trace:
            writer.writerow([rec.t, repr(rec.ratio), rec.active_rows,
                             "" if rec.mean_step_kl is None else repr(rec.mean_step_kl)])


def write_summary(result: RunResult, echo: dict, out_dir: Path) -> None:
    summary = {
        "config": echo,
        "seed": echo["run"]["seed"],
        "tokens": result.tokens.tolist(),
        "totals": {
            "F_base": result.total_flops_base,
            "F_actual": result.total_flops_actual,
            "ratio": result.total_flops_actual / result.total_flops_base,
            "head_flops": result.total_head_flops,
            "probe_flops": result.total_probe_flops,
        },
        "active_ratio": result.active_ratio,
        "computed_ratio": result.computed_ratio,
        "steps": len(result.trace),
        "lock_events": [
            {"position": e.position, "step": e.step, "kind": e.kind,
             "step_kl": _float_or_none(e.step_kl), "uncertainty": _float_or_none(e.uncertainty)}
            for e in result.events
        ],
        "counter_matches": result.flops.counter_matches,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")


def write_timing(result: RunResult, out_dir: Path) -> None:
    timing = {
        "wall_seconds": result.wall_seconds,
        "e2e_tps": result.e2e_tps,
        "step_tps": result.step_tps(),
        "step_seconds": [rec.wall_seconds for rec in result.trace],
    }
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")


def check_run_invariants(result: RunResult, run: RunConfig) -> list[str]:
    """Accounting identities that must hold for every completed run."""
    problems = []
    if not result.flops.counter_matches:
        problems.append("instrumented GEMM counter disagrees with the closed-form step cost")
    for rec in result.trace:
        if rec.flops_actual > rec.flops_base:
            problems.append(f"step {rec.t}: actual FLOPs exceed baseline")
    if run.mode in LOCKING_MODES and not run.policy.unlock_enabled:
        m = [rec.active_rows for rec in result.trace]
        if any(b > a for a, b in zip(m, m[1:])):
            problems.append("active-row count increased despite locking being permanent")
    return problems


# ---------------------------------------------------------------------------
# subcommands


def _resolve_out(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    doc = _load_config_file(getattr(args, "config", None))
    return Path(doc.get("output_dir", "out"))


def cmd_run(args) -> int:
    w, run, prompt, echo = _build(args)
    result = run_sampler(run, w, prompt, record_trajectories=args.record_trajectories)
    out_dir = _resolve_out(args)
    emit_trace(result, out_dir)
    write_summary(result, echo, out_dir)
    write_timing(result, out_dir)
    if args.record_trajectories:
        doc = [
            {"position": traj.position, "log_probs": traj.logits.tolist()}
            for traj in analysis.trajectories_from_history(result.history, result.history_valid)
        ]
        (out_dir / "trajectories.json").write_text(json.dumps(doc))
    problems = check_run_invariants(result, run)
    for p in problems:
        print(f"INVARIANT VIOLATION: {p}", file=sys.stderr)
    print(f"run: mode={run.mode} steps={len(result.trace)} "
          f"F_actual/F_base={result.total_flops_actual / result.total_flops_base:.4f} "
          f"active_ratio={result.active_ratio:.4f} -> {out_dir}")
    return EXIT_INVARIANT if problems else EXIT_OK


def _parse_list(text: str, cast):
    return [cast(tok) for tok in text.split(",") if tok != ""]


def _sweep_axis(text: str | None, cast):
    if text is None:
        return [None]
    values = _parse_list(text, cast)
    if not values:
        raise ConfigError("a sweep list was given but is empty")
    return values


def cmd_sweep(args) -> int:
    eps_list = _sweep_axis(args.eps_list, float)
    m_list = _sweep_axis(args.m_list, float)
    steps_list = _sweep_axis(args.steps_list, int)
    ngen_list = _sweep_axis(args.ngen_list, int)
    seeds = _sweep_axis(args.seeds, int)
    grid = [(e, m, s, g, sd) for e in eps_list for m in m_list for s in steps_list
            for g in ngen_list for sd in seeds]

    out_dir = _resolve_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    bad = False
    for eps, m, steps, n_gen, seed in grid:
        overrides = {}
        if eps is not None:
            overrides["epsilon"] = eps
        if m is not None:
            overrides["percentile"] = m
        if steps is not None:
            overrides["steps"] = steps
        if n_gen is not None:
            overrides["n_gen"] = n_gen
            if steps is None:
                overrides["steps"] = n_gen
        if seed is not None:
            overrides["seed"] = seed
        w, run, prompt, _ = _build(args, overrides)
        result = run_sampler(run, w, prompt)
        bad |= bool(check_run_invariants(result, run))
        rows.append({
            "epsilon": run.policy.epsilon,
            "percentile": run.policy.percentile,
            "steps": run.steps,
            "n_gen": run.n_gen,
            "seed": run.seed,
            "F_base": result.total_flops_base,
            "F_actual": result.total_flops_actual,
            "ratio": result.total_flops_actual / result.total_flops_base,
            "active_ratio": result.active_ratio,
            "locks": sum(1 for e in result.events if e.kind in ("lock", "relock")),
            "unlocks": sum(1 for e in result.events if e.kind == "unlock"),
        })

    path = out_dir / "sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"sweep: {len(rows)} points -> {path}")
    return EXIT_INVARIANT if bad else EXIT_OK


def cmd_verify_bound(args) -> int:
    if args.trajectories:
        doc = json.loads(Path(args.trajectories).read_text())
        trajs = [
            analysis.Trajectory.from_logits(np.asarray(item["log_probs"]),
                                            position=item.get("position", -1), source="sampled")
            for item in doc
        ]
    else:
        w, run, prompt, _ = _build(args, {"mode": "baseline"})
        result = run_sampler(run, w, prompt, record_trajectories=True)
        trajs = analysis.trajectories_from_history(result.history, result.history_valid)

    eps = float("inf") if args.eps is None else args.eps
    reports = [analysis.check_lock_bound(t, eps) for t in trajs]
    applicable = [r for r in reports if r.status == "ok"]
    held = [r for r in applicable if r.holds]
    violated = [r for r in applicable if not r.holds]
    print(f"verify-bound: {len(trajs)} trajectories, {len(applicable)} applicable, "
          f"{len(held)} hold, {len(reports) - len(applicable)} not applicable")
    if args.out:
        Path(args.out).write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    if violated:
        for r in violated[:10]:
            print(f"VIOLATION at position {r.position}: lhs={r.lhs} > rhs={r.rhs}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_simulate(args) -> int:
    rho_targets = _parse_list(args.rho_targets, float)
    vocab_sizes = _parse_list(args.vocab_sizes, int)
    cells = [(r, v) for r in rho_targets for v in vocab_sizes]
    reports = []
    for i in range(args.count):
        rho, vocab = cells[i % len(cells)]
        steps = args.steps if args.steps is not None else analysis.battery_steps(rho)
        traj = analysis.simulate_trajectory(args.seed + i, vocab, steps, rho, args.magnitude)
        reports.append(analysis.check_lock_bound(traj, float("inf")))
    applicable = [r for r in reports if r.status == "ok"]
    held = sum(1 for r in applicable if r.holds)
    print(f"simulate: {held}/{args.count} bound holds "
          f"({len(applicable)} applicable of {args.count})")
    if args.out:
        Path(args.out).write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    if held != len(applicable):
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_constants(args) -> int:
    w, run, prompt, _ = _build(args)
    if args.radius is not None:
        radius = args.radius
    else:
        radius = analysis.calibrate_input_radius(w, run, prompt)
    report = analysis.lipschitz_constants(
        w, radius, tail_share=args.kappa, seq_len=run.n_positions, samples=args.samples,
    )
    doc = report.to_dict()
    doc["softmax_jacobian_sup"] = analysis.softmax_jacobian_sup(args.samples)
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


FLOPS_CHECK_CONFIGS = [
    # the hand-derived config: per-step baseline cost 11264 at N=4
    {"model": {"vocab_size": 8, "d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 16, "max_seq": 8},
     "run": {"n_prompt": 2, "n_gen": 2, "steps": 2}},
    {"model": DEFAULT_MODEL, "run": {"n_prompt": 16, "n_gen": 16, "steps": 16}},
    # grouped key/value sharing
    {"model": {"vocab_size": 16, "d_model": 24, "n_layers": 3, "n_heads": 4, "n_kv_heads": 2,
               "d_ff": 40, "max_seq": 32}, "run": {"n_prompt": 4, "n_gen": 8, "steps": 8}},
]


def cmd_flops_check(args) -> int:
    ok = True
    for spec_i, entry in enumerate(FLOPS_CHECK_CONFIGS):
        cfg = ModelConfig.from_dict(entry["model"])
        w = init_weights(cfg, 99 + spec_i)
        base_run = dict(entry["run"])
        n = base_run["n_prompt"] + base_run["n_gen"]
        print(f"config {spec_i}: baseline per-step FLOPs at N={n}: "
              f"{baseline_step_flops(cfg, 1, n)}")
        for mode in MODES:
            policy = LockPolicy(epsilon=5e-2, hybrid_fraction=0.8)
            run = RunConfig(policy=policy, mode=mode, seed=11, **base_run)
            result = run_sampler(run, w, random_prompt(cfg, run.n_prompt, run.seed))
            match = result.flops.counter_matches
            ok &= match
            status = "exact" if match else "MISMATCH"
            print(f"  mode={mode:9s} steps={len(result.trace)} counter vs formula: {status}")
    return EXIT_OK if ok else EXIT_INVARIANT


# ---------------------------------------------------------------------------


def _add_model_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--eps", type=float, help="KL lock threshold")
    p.add_argument("--percentile", type=float, help="confidence gate percentile")
    p.add_argument("--no-gate", action="store_true", help="disable the confidence gate")
    p.add_argument("--fraction", type=float, help="computed fraction for selection/hybrid")
    p.add_argument("--unlock", action="store_true", help="enable the unlock protocol")
    p.add_argument("--n-prompt", type=int, dest="n_prompt")
    p.add_argument("--n-gen", type=int, dest="n_gen")
    p.add_argument("--steps", type=int)
    p.add_argument("--block-length", type=int, dest="block_length")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--weight-scale", type=float, dest="weight_scale")
    p.add_argument("--prompt", help="comma-separated prompt token ids")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surelock")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one sampler configuration")
    _add_model_run_flags(p)
    p.add_argument("--out", help="output directory (default: config output_dir or ./out)")
    p.add_argument("--record-trajectories", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="grid of runs, one CSV row per point")
    _add_model_run_flags(p)
    p.add_argument("--eps-list", dest="eps_list")
    p.add_argument("--m-list", dest="m_list")
    p.add_argument("--steps-list", dest="steps_list")
    p.add_argument("--ngen-list", dest="ngen_list")
    p.add_argument("--seeds")
    p.add_argument("--out", help="output directory (default: config output_dir or ./out)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify-bound", help="lock-bound check on trajectories")
    _add_model_run_flags(p)
    p.add_argument("--trajectories", help="trajectories.json from a recorded run")
    p.add_argument("--out", help="write per-trajectory reports here")
    p.set_defaults(fn=cmd_verify_bound)

    p = sub.add_parser("simulate", help="synthetic-trajectory bound battery")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--rho-targets", dest="rho_targets", default="0.3,0.6,0.9")
    p.add_argument("--vocab-sizes", dest="vocab_sizes", default="8,64")
    p.add_argument("--steps", type=int, help="trajectory length; default fits the decay rate")
    p.add_argument("--magnitude", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("constants", help="model Lipschitz constants report")
    _add_model_run_flags(p)
    p.add_argument("--radius", type=float, help="input radius; default: calibrate")
    p.add_argument("--kappa", type=float, default=0.0, help="tail attribution share")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_constants)

    p = sub.add_parser("flops-check", help="prove counter == formula on builtin configs")
    p.set_defaults(fn=cmd_flops_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidStateError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
