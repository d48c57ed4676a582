"""Evaluation: threshold success metrics, the five-goal protocol, goal-area
coverage geometry, and the demonstration-count ablation driver.

Distance is always the table-plane Euclidean distance between the achieved
landing and the commanded goal. Episodes that never land (miss, net, out of
play) count as failures at every threshold; mean distance averages over landed
balls only and is absent when nothing landed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .config import EvalSettings, RunConfig
from .env import TableTennisEnv, run_episode
from .goals import GoalRegion, sample_goal, table_region
from .physics import TableGeometry
from .policy import PolicyAgent, PolicyParams, load_checkpoint

GOAL_LABELS = "ABCDE"


@dataclass
class Metrics:
    n_attempts: int
    n_landed: int
    mean_dist: Optional[float]
    pct_within: dict[float, float]  # threshold (m) -> % of attempts, inclusive


@dataclass
class EvalResult:
    goals: list[tuple[float, float]]
    per_goal: list[Metrics]
    aggregate: Metrics


class _Accumulator:
    def __init__(self, thresholds: Sequence[float]):
        self.thresholds = tuple(thresholds)
        self.n_attempts = 0
        self.n_landed = 0
        self.dist_sum = 0.0
        self.within = {t: 0 for t in self.thresholds}

    def add(self, landing: Optional[tuple[float, float]], goal: tuple[float, float]) -> None:
        self.n_attempts += 1
        if landing is None:
            return
        d = math.hypot(landing[0] - goal[0], landing[1] - goal[1])
        self.n_landed += 1
        self.dist_sum += d
        for t in self.thresholds:
            if d <= t:  # inclusive boundary
                self.within[t] += 1

    def merge(self, other: "_Accumulator") -> None:
        self.n_attempts += other.n_attempts
        self.n_landed += other.n_landed
        self.dist_sum += other.dist_sum
        for t in self.thresholds:
            self.within[t] += other.within[t]

    def metrics(self) -> Metrics:
        return Metrics(
            n_attempts=self.n_attempts,
            n_landed=self.n_landed,
            mean_dist=(self.dist_sum / self.n_landed) if self.n_landed else None,
            pct_within={
                t: 100.0 * c / self.n_attempts if self.n_attempts else 0.0
                for t, c in self.within.items()
            },
        )


def coverage_ratio(threshold: float, geom: TableGeometry = TableGeometry()) -> float:
    """Fraction of the goal area (one table half) covered by a threshold disc."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    half_area = (geom.length / 2) * geom.width
    return math.pi * threshold * threshold / half_area


def _check_layout(params: PolicyParams, env: TableTennisEnv) -> None:
    if params.obs_layout != env.cfg.obs_layout:
        raise ValueError(
            f"policy expects {params.obs_layout!r} observations, env builds {env.cfg.obs_layout!r}"
        )
    probe = env.cfg
    J = env.chain.joint_count
    expected = 8 * (J + 5) if probe.obs_layout == "stacked" else (
        3 + (3 if probe.include_ball_vel else 0) + J + 2
    )
    if params.input_dim != expected:
        raise ValueError(
            f"policy input dim {params.input_dim} does not match environment ({expected})"
        )


def _rollout_metric(
    params: PolicyParams,
    env: TableTennisEnv,
    goal: tuple[float, float],
    acc: _Accumulator,
    seed: int,
) -> None:
    agent = PolicyAgent(params)
    traj = run_episode(env, agent, goal=goal, noise_vector=None, seed=seed)
    acc.add(traj.landing, goal)


def evaluate_rollouts(
    params: PolicyParams,
    env: TableTennisEnv,
    region: GoalRegion,
    n_episodes: int,
    thresholds: Sequence[float],
    seed_entropy: Sequence[int],
) -> Metrics:
    """Uniform goals over a region, one noiseless episode each (the in-training
    progress metric)."""
    _check_layout(params, env)
    acc = _Accumulator(thresholds)
    for i in range(n_episodes):
        rng = np.random.default_rng([*seed_entropy, i])
        goal = sample_goal(region, rng)
        _rollout_metric(params, env, goal, acc, seed=int(rng.integers(2**62)))
    return acc.metrics()


def evaluate(
    policy: Union[PolicyParams, str, Path],
    cfg: RunConfig,
    eval_cfg: Optional[EvalSettings] = None,
) -> EvalResult:
    """Run the configured evaluation protocol on a checkpoint or parameters.

    goals="five": each fixed goal attempted episodes_per_goal times.
    goals="uniform": episodes_per_goal goals sampled on the table, one episode
    each. Evaluation goals always stay on the physical table.
    """
    if eval_cfg is None:
        eval_cfg = cfg.eval
    params = policy if isinstance(policy, PolicyParams) else load_checkpoint(policy)
    env = cfg.make_env()
    _check_layout(params, env)
    thresholds = eval_cfg.thresholds
    seed = eval_cfg.seed

    per_goal: list[Metrics] = []
    goals: list[tuple[float, float]] = []
    total = _Accumulator(thresholds)
    if eval_cfg.goals == "five":
        for gi, goal in enumerate(eval_cfg.five_goals):
            acc = _Accumulator(thresholds)
            for rep in range(eval_cfg.episodes_per_goal):
                rng = np.random.default_rng([seed, 0xF1E, gi, rep])
                _rollout_metric(params, env, goal, acc, seed=int(rng.integers(2**62)))
            goals.append(tuple(goal))
            per_goal.append(acc.metrics())
            total.merge(acc)
    else:
        region = table_region(cfg.geom)
        for i in range(eval_cfg.episodes_per_goal):
            rng = np.random.default_rng([seed, 0xF1E, i])
            goal = sample_goal(region, rng)
            acc = _Accumulator(thresholds)
            _rollout_metric(params, env, goal, acc, seed=int(rng.integers(2**62)))
            goals.append(goal)
            per_goal.append(acc.metrics())
            total.merge(acc)
    return EvalResult(goals=goals, per_goal=per_goal, aggregate=total.metrics())


def five_goal_eval(
    policy: Union[PolicyParams, str, Path],
    cfg: RunConfig,
    n_per_goal: int = 5,
) -> tuple[EvalResult, str]:
    """The five-fixed-goal protocol; returns metrics and a 'pct30 | pct20'
    table with one row per goal plus the average."""
    settings = EvalSettings(
        goals="five",
        episodes_per_goal=n_per_goal,
        thresholds=cfg.eval.thresholds,
        seed=cfg.eval.seed,
        five_goals=cfg.eval.five_goals,
    )
    result = evaluate(policy, cfg, settings)
    t_hi, t_lo = settings.thresholds[0], settings.thresholds[1]
    lines = ["Goal  <=%.0fcm | <=%.0fcm" % (t_hi * 100, t_lo * 100)]
    for label, m in zip(GOAL_LABELS, result.per_goal):
        lines.append(f"{label}     {m.pct_within[t_hi]:5.1f} | {m.pct_within[t_lo]:5.1f}")
    agg = result.aggregate
    lines.append(f"Avg   {agg.pct_within[t_hi]:5.1f} | {agg.pct_within[t_lo]:5.1f}")
    return result, "\n".join(lines)


def result_to_jsonable(result: EvalResult) -> dict:
    def m2d(m: Metrics) -> dict:
        return {
            "n_attempts": m.n_attempts,
            "n_landed": m.n_landed,
            "mean_dist": m.mean_dist,
            "pct_within": {f"{t:g}": v for t, v in m.pct_within.items()},
        }

    return {
        "goals": [list(g) for g in result.goals],
        "per_goal": [m2d(m) for m in result.per_goal],
        "aggregate": m2d(result.aggregate),
    }


# ---------------------------------------------------------------------------
# Demonstration-count ablation
# ---------------------------------------------------------------------------


def ablate_demos(
    cfg: RunConfig,
    demo_counts: Sequence[int],
    out_dir: str | Path,
    seeds: Sequence[int] = (0, 1, 2),
    demo_seed: int = 9000,
) -> dict:
    """Run the full pipeline once per (demo count, seed) with shared seeds and
    a shared budget; emits overlaid learning curves, the stored/attempted
    efficiency curves, and a report of final efficiencies."""
    from . import bootstrap as bs, plots, ssp
    from dataclasses import replace as dc_replace

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"demo_counts": list(demo_counts), "seeds": list(seeds), "runs": {}}

    for count in demo_counts:
        demos = None
        if count > 0:
            demos, _ = bs.generate_bootstrap("scripted", count, cfg, seed=demo_seed + count)
        for s in seeds:
            run_cfg = RunConfig(
                geom=cfg.geom, drag=cfg.drag, contact=cfg.contact,
                throw_presets=cfg.throw_presets, chain=cfg.chain,
                episode=cfg.episode,
                train=dc_replace(cfg.train, seed=s),
                ssp=cfg.ssp, eval=cfg.eval, raw=cfg.raw,
            )
            mode = "goalseye" if count > 0 else "gcsl"
            run_dir = out / f"count_{count}" / f"seed_{s}"
            ssp.run_training(run_cfg, demos=demos, out_dir=run_dir, mode=mode)
            manifest = json.loads((run_dir / "manifest.json").read_text())
            attempted = manifest["ssp_attempted"]
            stored = manifest["ssp_stored"]
            report["runs"][f"count_{count}_seed_{s}"] = {
                "demos": count,
                "seed": s,
                "ssp_attempted": attempted,
                "ssp_stored": stored,
                "efficiency": stored / attempted if attempted else None,
            }

    # Median final efficiency per count, in the order given.
    medians = {}
    for count in demo_counts:
        effs = [
            r["efficiency"]
            for r in report["runs"].values()
            if r["demos"] == count and r["efficiency"] is not None
        ]
        medians[str(count)] = float(np.median(effs)) if effs else None
    report["median_efficiency"] = medians

    from .plots import emit_ablation_curves

    emit_ablation_curves(out, demo_counts, seeds)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    return report
