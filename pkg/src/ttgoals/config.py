"""Run configuration: one JSON document with sections physics, robot, env,
train, ssp, eval. Unknown keys anywhere are errors. TTGOALS_SEED overrides the
configured seeds."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from . import physics, robot
from .env import ContactParams, EpisodeConfig
from .physics import DragModel, TableGeometry, ThrowPreset, Vec3
from .policy import TrainConfig
from .robot import RobotChain

SEED_ENV_VAR = "TTGOALS_SEED"

# Fixed eval goal coordinates A-E: deep corners, mid table, near-net corners.
# These are project defaults, not measured values; override via eval.five_goals.
DEFAULT_FIVE_GOALS = (
    (-1.10, -0.55),
    (-1.10, 0.55),
    (-0.70, 0.0),
    (-0.30, -0.55),
    (-0.30, 0.55),
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SspSettings:
    steps_between_ssp: int = 100
    num_ssp_per_iter: int = 20
    noise_scale: float = 0.5
    goal_margin: float = 0.2
    total_trajectory_budget: int = 3000
    eval_every: int = 1
    eval_episodes: int = 20

    def __post_init__(self):
        if self.steps_between_ssp <= 0:
            raise ConfigError("steps_between_ssp must be > 0")
        if self.num_ssp_per_iter <= 0:
            raise ConfigError("num_ssp_per_iter must be > 0")
        if self.noise_scale < 0 or self.goal_margin < 0:
            raise ConfigError("noise_scale and goal_margin must be >= 0")


@dataclass(frozen=True)
class EvalSettings:
    goals: str = "uniform"  # "five" | "uniform"
    episodes_per_goal: int = 5
    thresholds: tuple[float, ...] = (0.30, 0.20)
    seed: int = 0
    five_goals: tuple[tuple[float, float], ...] = DEFAULT_FIVE_GOALS

    def __post_init__(self):
        if self.goals not in ("five", "uniform"):
            raise ConfigError(f"unknown goal set {self.goals!r}")
        if self.episodes_per_goal < 1:
            raise ConfigError("episodes_per_goal must be >= 1")
        if any(t <= 0 for t in self.thresholds):
            raise ConfigError("thresholds must be positive")


@dataclass
class RunConfig:
    geom: TableGeometry
    drag: DragModel
    contact: ContactParams
    throw_presets: dict[str, ThrowPreset]
    chain: RobotChain
    episode: EpisodeConfig
    train: TrainConfig
    ssp: SspSettings
    eval: EvalSettings
    raw: dict = field(default_factory=dict)

    def make_env(self, goal_margin: Optional[float] = None):
        from .env import TableTennisEnv

        return TableTennisEnv(
            cfg=self.episode,
            chain=self.chain,
            geom=self.geom,
            drag=self.drag,
            contact=self.contact,
            throw_presets=self.throw_presets,
            goal_margin=self.goal_margin if goal_margin is None else goal_margin,
        )

    @property
    def goal_margin(self) -> float:
        return self.ssp.goal_margin


def _check_keys(section: str, data: dict, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")


def _physics_from(data: dict) -> tuple[TableGeometry, DragModel, dict]:
    _check_keys("physics", data, {
        "k_d", "gravity", "table_length", "table_width", "net_height", "throw_presets",
    })
    geom = TableGeometry(
        length=float(data.get("table_length", 2.74)),
        width=float(data.get("table_width", 1.525)),
        net_height=float(data.get("net_height", 0.1525)),
    )
    drag = DragModel(k_d=float(data.get("k_d", 0.1)), gravity=float(data.get("gravity", 9.81)))
    presets = dict(physics.DEFAULT_THROW_PRESETS)
    for name, p in data.get("throw_presets", {}).items():
        _check_keys(f"physics.throw_presets.{name}", p, {
            "launch_lo", "launch_hi", "target_lo", "target_hi", "speed_lo", "speed_hi",
        })
        presets[name] = ThrowPreset(
            launch_lo=Vec3(*p["launch_lo"]),
            launch_hi=Vec3(*p["launch_hi"]),
            target_lo=tuple(p["target_lo"]),
            target_hi=tuple(p["target_hi"]),
            speed_lo=float(p["speed_lo"]),
            speed_hi=float(p["speed_hi"]),
        )
    return geom, drag, presets


def _contact_from(data: dict, robot_data: dict) -> ContactParams:
    return ContactParams(
        e_table=float(data.get("e_table", 0.88)),
        mu_t=float(data.get("mu_t", 0.96)),
        e_paddle=float(robot_data.get("e_paddle", 0.8)),
        ball_radius=float(data.get("ball_radius", 0.02)),
        slab_tol=float(data.get("slab_tol", 0.01)),
    )


_ROBOT_KEYS = {
    "preset", "edge_forward", "e_paddle", "joints", "base_pos",
    "paddle_offset", "paddle_normal", "paddle_radius", "home_q",
}
_ENV_KEYS = {
    "control_hz", "max_steps", "init_perturb", "throw_preset", "obs_layout",
    "include_ball_vel", "sim_dt", "throw_solve_dt", "e_table", "mu_t",
    "ball_radius", "slab_tol",
}
_TRAIN_KEYS = {
    "learning_rate", "batch_size", "k", "beta1", "beta2", "eps",
    "clip_norm", "hidden", "seed",
}
_SSP_KEYS = {
    "steps_between_ssp", "num_ssp_per_iter", "noise_scale", "goal_margin",
    "total_trajectory_budget", "eval_every", "eval_episodes",
}
_EVAL_KEYS = {"goals", "episodes_per_goal", "thresholds", "seed", "five_goals"}


def config_from_dict(data: dict) -> RunConfig:
    _check_keys("<top level>", data, {"physics", "robot", "env", "train", "ssp", "eval"})
    phys = data.get("physics", {})
    rob = data.get("robot", {})
    envd = data.get("env", {})
    trn = data.get("train", {})
    sspd = data.get("ssp", {})
    evd = data.get("eval", {})
    for name, section, allowed in (
        ("robot", rob, _ROBOT_KEYS),
        ("env", envd, _ENV_KEYS),
        ("train", trn, _TRAIN_KEYS),
        ("ssp", sspd, _SSP_KEYS),
        ("eval", evd, _EVAL_KEYS),
    ):
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        _check_keys(name, section, allowed)
    if "joints" in rob:
        for j in rob["joints"]:
            _check_keys("robot.joints[]", j, {"kind", "axis", "offset", "limits", "max_vel"})

    geom, drag, presets = _physics_from(phys)
    chain = robot.chain_from_config(rob)
    contact = _contact_from(envd, rob)
    episode = EpisodeConfig(
        control_hz=int(envd.get("control_hz", 100)),
        max_steps=int(envd.get("max_steps", 200)),
        init_perturb=float(envd.get("init_perturb", 0.05)),
        throw_preset=str(envd.get("throw_preset", "narrow")),
        obs_layout=str(envd.get("obs_layout", "flat")),
        include_ball_vel=bool(envd.get("include_ball_vel", True)),
        sim_dt=float(envd.get("sim_dt", 1e-3)),
        throw_solve_dt=float(envd.get("throw_solve_dt", 2e-3)),
    )
    train = TrainConfig(
        learning_rate=float(trn.get("learning_rate", 1e-3)),
        batch_size=int(trn.get("batch_size", 32)),
        k=int(trn.get("k", 16)),
        beta1=float(trn.get("beta1", 0.9)),
        beta2=float(trn.get("beta2", 0.999)),
        eps=float(trn.get("eps", 1e-8)),
        clip_norm=float(trn.get("clip_norm", 5.0)),
        hidden=int(trn.get("hidden", 64)),
        seed=int(trn.get("seed", 0)),
    )
    ssp = SspSettings(
        steps_between_ssp=int(sspd.get("steps_between_ssp", 100)),
        num_ssp_per_iter=int(sspd.get("num_ssp_per_iter", 20)),
        noise_scale=float(sspd.get("noise_scale", 0.5)),
        goal_margin=float(sspd.get("goal_margin", 0.2)),
        total_trajectory_budget=int(sspd.get("total_trajectory_budget", 3000)),
        eval_every=int(sspd.get("eval_every", 1)),
        eval_episodes=int(sspd.get("eval_episodes", 20)),
    )
    ev = EvalSettings(
        goals=str(evd.get("goals", "uniform")),
        episodes_per_goal=int(evd.get("episodes_per_goal", 5)),
        thresholds=tuple(float(t) for t in evd.get("thresholds", (0.30, 0.20))),
        seed=int(evd.get("seed", 0)),
        five_goals=tuple(tuple(g) for g in evd.get("five_goals", DEFAULT_FIVE_GOALS)),
    )

    seed_override = os.environ.get(SEED_ENV_VAR)
    if seed_override is not None:
        train = TrainConfig(**{**_as_dict(train), "seed": int(seed_override)})
        ev = EvalSettings(**{**_as_dict(ev), "seed": int(seed_override)})

    return RunConfig(
        geom=geom, drag=drag, contact=contact, throw_presets=presets, chain=chain,
        episode=episode, train=train, ssp=ssp, eval=ev, raw=data,
    )


def _as_dict(obj: Any) -> dict:
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


def load_config(path: Optional[str]) -> RunConfig:
    """Load a JSON run config; a missing path gives all defaults."""
    if path is None:
        return config_from_dict({})
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    return config_from_dict(data)
