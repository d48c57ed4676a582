"""The outer training loop: alternate imitation training steps with
self-supervised practice iterations (sample a goal, roll out with per-episode
action noise, relabel, filter, append to the shared cache).

Modes:
  goalseye  train + practice until the trajectory budget is spent
  lfp       train only, on the initial demonstrations (no practice)
  gcsl      practice from zero demonstrations

The iteration count is ceil(max(0, budget - demos)/num_ssp_per_iter) in every
mode (minimum 1), so lfp runs are compute-matched to the goalseye runs they
are compared against.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, dataset, evaluation
from .config import RunConfig, SspSettings
from .dataset import Cache, SSP_SOURCE
from .env import TableTennisEnv, run_episode
from .goals import GoalRegion, extended_region, sample_goal, table_region
from .policy import (
    ARCH_LSTM,
    ARCH_STACKED_FF,
    Ensemble,
    PolicyAgent,
    ensemble_rollout_assignment,
    make_ensemble,
    save_checkpoint,
    train_step,
)

MODES = ("goalseye", "lfp", "gcsl")

# Stream tags for seed derivation (domain separation).
_TAG_SSP = 0x55B
_TAG_TRAIN = 0x7A1
_TAG_EVAL = 0xE7A

PROGRESS_COLUMNS = (
    "iter", "attempted", "stored", "cache_size", "train_loss",
    "eval_pct_30cm", "eval_pct_20cm", "mean_dist",
)


def compute_action_std(demos: Cache) -> np.ndarray:
    """Per-dimension population std over every action vector of every episode."""
    if len(demos) == 0:
        raise ValueError("cannot compute an action std from an empty demo set")
    acts = np.concatenate([np.stack([a for _, a in t.steps]) for t in demos.episodes])
    return acts.std(axis=0)


def sample_noise_vector(a_std: np.ndarray, b: float, rng) -> np.ndarray:
    """z_j ~ Uniform(-b*std_j, b*std_j), held constant for a whole episode."""
    if b < 0:
        raise ValueError("noise scale b must be >= 0")
    bound = b * np.asarray(a_std, dtype=np.float64)
    if not np.all(bound >= 0):
        raise ValueError("action std must be >= 0 componentwise")
    z = np.empty_like(bound)
    for j in range(bound.size):
        z[j] = rng.uniform(-bound[j], bound[j]) if bound[j] > 0 else 0.0
    return z


@dataclass
class SspReport:
    iteration: int
    attempted: int
    stored: int
    per_model_attempted: list[int]
    per_model_stored: list[int]
    mean_dist: Optional[float]  # stored episodes: landing vs commanded goal

    @property
    def stored_ratio(self) -> Optional[float]:
        return self.stored / self.attempted if self.attempted else None


def ssp_iteration(
    ens: Ensemble,
    cfg: RunConfig,
    cache: Cache,
    env: TableTennisEnv,
    region: GoalRegion,
    action_std: np.ndarray,
    iter_index: int,
    n_rollouts: int,
    master_seed: int,
) -> SspReport:
    """Exactly n_rollouts practice episodes, round-robin over ensemble members,
    each with a fresh goal and a fresh constant noise vector; good episodes are
    relabeled and appended."""
    assignment = ensemble_rollout_assignment(ens, iter_index, n_rollouts)
    per_att = [0] * ens.n
    per_sto = [0] * ens.n
    dists: list[float] = []
    b = cfg.ssp.noise_scale
    for j, model_id in enumerate(assignment):
        ep_index = cache.seen_count  # global episode counter, demos included
        ep_rng = np.random.default_rng([master_seed, _TAG_SSP, ep_index, model_id])
        goal = sample_goal(region, ep_rng)
        z = sample_noise_vector(action_std, b, ep_rng)
        env_seed = int(ep_rng.integers(2**62))
        agent = PolicyAgent(ens.models[model_id])
        traj = run_episode(
            env, agent, goal=goal, noise_vector=z, seed=env_seed,
            meta={"episode_id": f"ssp-{ep_index}", "model_id": model_id, "source": SSP_SOURCE},
        )
        cache.record_attempt()
        per_att[model_id] += 1
        if dataset.filter_good(traj, region):
            cache.append(dataset.relabel(traj), SSP_SOURCE)
            per_sto[model_id] += 1
            dists.append(math.hypot(traj.landing[0] - goal[0], traj.landing[1] - goal[1]))
    return SspReport(
        iteration=iter_index,
        attempted=n_rollouts,
        stored=sum(per_sto),
        per_model_attempted=per_att,
        per_model_stored=per_sto,
        mean_dist=(sum(dists) / len(dists)) if dists else None,
    )


def _planned_iterations(ssp: SspSettings, demos_count: int) -> int:
    remaining = max(0, ssp.total_trajectory_budget - demos_count)
    return max(1, math.ceil(remaining / ssp.num_ssp_per_iter))


def run_training(
    cfg: RunConfig,
    demos: Optional[Cache] = None,
    out_dir: str | os.PathLike = "run",
    mode: str = "goalseye",
    ensemble_n: int = 1,
) -> Path:
    """Full training run; writes progress.csv, checkpoints, manifest.json and
    metrics.json into out_dir and returns it."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if ensemble_n < 1:
        raise ValueError("ensemble size must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    master_seed = cfg.train.seed
    J = cfg.chain.joint_count
    layout = cfg.episode.obs_layout
    if layout == "flat":
        arch = ARCH_LSTM
        input_dim = 3 + (3 if cfg.episode.include_ball_vel else 0) + J + 2
    else:
        arch = ARCH_STACKED_FF
        input_dim = 8 * (J + 5)
    ens = make_ensemble(ensemble_n, arch, input_dim, cfg.train.hidden, J, master_seed, layout)

    region = extended_region(cfg.geom, cfg.ssp.goal_margin)
    eval_region = table_region(cfg.geom)
    cache = Cache(obs_layout=layout, joint_count=J)

    if mode == "gcsl":
        demos = None  # the zero-demonstration configuration
    demos_count = len(demos) if demos is not None else 0
    if demos_count == 0 and (mode == "lfp" or cfg.ssp.total_trajectory_budget <= 0):
        raise ValueError("nothing to train on: no demos and no practice budget")
    if demos is not None:
        for traj in demos.episodes:
            cache.record_attempt()
            cache.append(traj, dataset.DEMO_SOURCE)
        cache.demos_count = demos_count  # loaded episodes count as demos
        cache.ssp_count = 0

    if demos_count > 0:
        action_std = compute_action_std(cache)
    else:
        action_std = np.zeros(J)

    env = cfg.make_env(goal_margin=cfg.ssp.goal_margin)
    iterations = _planned_iterations(cfg.ssp, demos_count)
    remaining = max(0, cfg.ssp.total_trajectory_budget - demos_count)
    train_rngs = [np.random.default_rng([master_seed, _TAG_TRAIN, m]) for m in range(ens.n)]

    rows: list[dict] = []
    with open(out / "progress.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROGRESS_COLUMNS)
        for it in range(iterations):
            # Train phase (skipped while the cache is empty, e.g. early gcsl).
            losses: list[float] = []
            if len(cache) > 0:
                for _ in range(cfg.ssp.steps_between_ssp):
                    for m in range(ens.n):
                        batch = cache.sample_batch(cfg.train.batch_size, cfg.train.k, train_rngs[m])
                        ens.models[m], ens.opt_states[m], lv = train_step(
                            ens.models[m], ens.opt_states[m], batch, cfg.train
                        )
                        losses.append(lv)

            # Practice phase.
            if mode != "lfp" and remaining > 0:
                n_roll = min(cfg.ssp.num_ssp_per_iter, remaining)
                report = ssp_iteration(
                    ens, cfg, cache, env, region, action_std, it, n_roll, master_seed
                )
                remaining -= n_roll
            else:
                report = SspReport(it, 0, 0, [0] * ens.n, [0] * ens.n, None)

            # Progress evaluation (model 0, noiseless, on-table goals).
            ev: dict[str, str] = {"pct30": "", "pct20": "", "dist": ""}
            if cfg.ssp.eval_every > 0 and (it % cfg.ssp.eval_every == 0 or it == iterations - 1):
                res = evaluation.evaluate_rollouts(
                    ens.models[0], env, eval_region,
                    n_episodes=cfg.ssp.eval_episodes,
                    thresholds=cfg.eval.thresholds,
                    seed_entropy=[master_seed, _TAG_EVAL, it],
                )
                ev["pct30"] = _fmt(res.pct_within[cfg.eval.thresholds[0]])
                ev["pct20"] = _fmt(res.pct_within[cfg.eval.thresholds[1]])
                ev["dist"] = _fmt(res.mean_dist) if res.mean_dist is not None else ""

            writer.writerow([
                it,
                report.attempted,
                report.stored,
                len(cache),
                _fmt(sum(losses) / len(losses)) if losses else "",
                ev["pct30"],
                ev["pct20"],
                ev["dist"],
            ])
            rows.append({
                "iter": it,
                "attempted": report.attempted,
                "stored": report.stored,
                "cache_size": len(cache),
                "stored_ratio": cache.stored_ratio(),
            })
            for m, params in enumerate(ens.models):
                save_checkpoint(params, out / f"model_{m:02d}.ckpt")

    # Final metrics on the configured evaluation protocol.
    final = evaluation.evaluate(ens.models[0], cfg, cfg.eval)
    with open(out / "metrics.json", "w") as fh:
        json.dump(evaluation.result_to_jsonable(final), fh, indent=1)

    manifest = {
        "version": __version__,
        "mode": mode,
        "ensemble_n": ensemble_n,
        "seed": master_seed,
        "demos_count": demos_count,
        "config": cfg.raw,
        "iterations": iterations,
        "cache_size": len(cache),
        "ssp_attempted": cache.seen_count - demos_count,
        "ssp_stored": cache.ssp_count,
        "progress": rows,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def load_demos_file(path) -> Cache:
    return dataset.load_jsonl(path)
