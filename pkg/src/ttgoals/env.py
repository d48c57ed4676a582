"""Episode orchestration: perturbed reset, throw sampling, control-rate stepping
with physics substeps, event detection, and observation construction.

Episode anatomy: a ball is launched from the opponent side toward the robot
side, may bounce once on the robot's table half, and the robot tries to strike
it back. A landing is recorded only after the paddle hit; its (x, y) is the
episode's achieved outcome. Terminal causes: landed (in the extended goal
region), net, out, timeout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import physics, robot
from .physics import BallState, DragModel, TableGeometry, ThrowSpec, Vec3
from .robot import RobotChain, RobotState

STACK_DEPTH = 8

EVENT_HIT = "hit"
EVENT_BOUNCE = "bounce"
EVENT_LANDED = "landed"
EVENT_NET = "net"
EVENT_OUT = "out"
EVENT_TIMEOUT = "timeout"
TERMINAL_EVENTS = (EVENT_LANDED, EVENT_NET, EVENT_OUT, EVENT_TIMEOUT)
# Values allowed in Trajectory.events (tick-level bounce reports stay transient).
TRAJECTORY_EVENTS = frozenset({EVENT_HIT, EVENT_LANDED, EVENT_NET, EVENT_OUT, EVENT_TIMEOUT})


@dataclass(frozen=True)
class ContactParams:
    e_table: float = 0.88
    mu_t: float = 0.96
    e_paddle: float = 0.8
    ball_radius: float = 0.02
    slab_tol: float = 0.01


@dataclass(frozen=True)
class EpisodeConfig:
    control_hz: int = 100
    max_steps: int = 200
    init_perturb: float = 0.05
    throw_preset: str = "narrow"
    obs_layout: str = "flat"  # "flat" | "stacked"
    include_ball_vel: bool = True
    sim_dt: float = 1e-3
    throw_solve_dt: float = 2e-3
    # Leaving this volume ends the episode as "out".
    out_x: float = 3.0
    out_y: float = 2.0
    out_z: float = 3.0

    def __post_init__(self):
        if self.control_hz <= 0 or self.max_steps <= 0:
            raise ValueError("control_hz and max_steps must be positive")
        if self.obs_layout not in ("flat", "stacked"):
            raise ValueError(f"unknown observation layout {self.obs_layout!r}")
        n_sub = (1.0 / self.control_hz) / self.sim_dt
        if abs(n_sub - round(n_sub)) > 1e-9:
            raise ValueError("1/control_hz must be an integer multiple of sim_dt")


@dataclass
class Trajectory:
    """One episode: per-tick (observation, action) pairs plus outcome fields."""

    steps: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    hit_index: Optional[int] = None
    landing: Optional[tuple[float, float]] = None
    goal: Optional[tuple[float, float]] = None
    events: set[str] = field(default_factory=set)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.steps)

    def validate(self) -> None:
        if self.hit_index is not None and not 0 <= self.hit_index < len(self.steps):
            raise ValueError("hit_index out of range")
        if self.landing is not None and self.hit_index is None:
            raise ValueError("landing recorded without a hit")
        bad = self.events - TRAJECTORY_EVENTS
        if bad:
            raise ValueError(f"unknown events {sorted(bad)}")


def flat_obs_dim(joint_count: int, include_ball_vel: bool) -> int:
    return 3 + (3 if include_ball_vel else 0) + joint_count + 2


class EpisodeTerminal(RuntimeError):
    pass


class ThrowSetupError(RuntimeError):
    pass


class TableTennisEnv:
    """Single-episode environment; one instance is single-threaded."""

    def __init__(
        self,
        cfg: EpisodeConfig = EpisodeConfig(),
        chain: RobotChain | None = None,
        geom: TableGeometry = TableGeometry(),
        drag: DragModel = DragModel(),
        contact: ContactParams = ContactParams(),
        throw_presets: dict[str, physics.ThrowPreset] | None = None,
        goal_margin: float = 0.2,
    ):
        self.cfg = cfg
        self.chain = chain if chain is not None else robot.gantry_arm_chain()
        self.geom = geom
        self.drag = drag
        self.contact = contact
        self.presets = throw_presets if throw_presets is not None else dict(physics.DEFAULT_THROW_PRESETS)
        if cfg.throw_preset not in self.presets:
            raise ValueError(f"unknown throw preset {cfg.throw_preset!r}")
        self.substeps_per_tick = round((1.0 / cfg.control_hz) / cfg.sim_dt)
        self.goal_margin = goal_margin
        self._contact_gate = 0.5 + self.chain.paddle_radius
        self._reset_done = False

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, seed: int, goal: Optional[tuple[float, float]] = None) -> np.ndarray:
        """Start an episode: perturbed home pose, sampled and solved throw."""
        rng = np.random.default_rng([int(seed) & 0x7FFFFFFFFFFFFFFF, 0x7E11])
        cfg = self.cfg
        chain = self.chain

        delta = cfg.init_perturb
        home = chain.home_q
        q = []
        for spec, h in zip(chain.joints, home):
            qi = h + float(rng.uniform(-delta, delta)) if delta > 0 else h
            lo, hi = spec.limits
            q.append(min(max(qi, lo), hi))
        self.robot_state = RobotState(tuple(q), (0.0,) * chain.joint_count, 0.0)

        preset = self.presets[cfg.throw_preset]
        throw, vel = self._sample_solvable_throw(preset, rng)
        self.throw = throw
        self.ball = BallState(throw.launch_pos, vel, 0.0)

        self.goal = (float(goal[0]), float(goal[1])) if goal is not None else None
        self.step_index = 0
        self.hit = False
        self.hit_index: Optional[int] = None
        self.bounces = 0
        self.clamped_steps = 0
        self.terminal = False
        self.terminal_cause: Optional[str] = None
        self.landing: Optional[tuple[float, float]] = None
        self.events: set[str] = set()
        self._history: list[np.ndarray] = []
        self._paddle = robot.forward_kinematics(chain, self.robot_state.q)
        self._paddle_t = 0.0
        self._reset_done = True
        self._push_history()
        return self.build_observation()

    def _sample_solvable_throw(self, preset, rng) -> tuple[ThrowSpec, Vec3]:
        last_err: Exception | None = None
        for _ in range(10):
            spec = physics.sample_throw(preset, rng)
            try:
                vel = physics.solve_throw(spec, self.drag, sim_dt=self.cfg.throw_solve_dt)
                return spec, vel
            except physics.ThrowSolveError as err:
                last_err = err
        raise ThrowSetupError(f"no solvable throw in 10 draws: {last_err}")

    def step(self, cmd) -> tuple[np.ndarray, list[str], bool]:
        """Advance one control tick; returns (obs, tick events, terminal)."""
        if not self._reset_done:
            raise EpisodeTerminal("reset() must be called before step()")
        if self.terminal:
            raise EpisodeTerminal(f"episode already terminal ({self.terminal_cause})")

        cfg = self.cfg
        chain = self.chain
        contact = self.contact
        dt = cfg.sim_dt
        tick_events: list[str] = []
        gate = self._contact_gate

        # Refresh the contact-gate reference once per tick; inside the gate the
        # pose is recomputed every substep (with finite-differenced velocity).
        if not self.hit:
            self._refresh_paddle(self.robot_state.t)

        for _ in range(self.substeps_per_tick):
            self.robot_state, clamped = robot.track_targets(self.robot_state, cmd, chain, dt)
            if clamped:
                self.clamped_steps += 1
            prev_ball = self.ball
            ball = physics.step_ball(prev_ball, dt, self.drag)
            self.ball = ball

            # Paddle contact (honored at most once per episode).
            if not self.hit and (ball.pos - self._paddle.center).norm() < gate:
                self._refresh_paddle(self.robot_state.t)
                bounced = robot.paddle_contact(
                    ball, self._paddle, chain.paddle_radius, contact.e_paddle,
                    ball_radius=contact.ball_radius, slab_tol=contact.slab_tol,
                )
                if bounced is not None:
                    self.ball = ball = bounced
                    self.hit = True
                    self.hit_index = self.step_index
                    self.events.add(EVENT_HIT)
                    tick_events.append(EVENT_HIT)

            if physics.check_net(prev_ball, ball, self.geom):
                self._finish(EVENT_NET, tick_events)
                break

            if prev_ball.pos.z > 0.0 >= ball.pos.z and ball.vel.z < 0.0:
                ev = physics.detect_landing([prev_ball, ball])
                if self.hit:
                    self.landing = (ev.x, ev.y)
                    cause = EVENT_LANDED if self._in_extended_region(ev.x, ev.y) else EVENT_OUT
                    self._finish(cause, tick_events)
                    break
                if self.bounces == 0 and self.geom.on_robot_side(ev.x, ev.y):
                    self.ball = physics.bounce_table(ball, contact.e_table, contact.mu_t)
                    self.bounces += 1
                    tick_events.append(EVENT_BOUNCE)
                else:
                    # Dead ball: second own-side bounce, or floor before the hit.
                    self._finish(EVENT_OUT, tick_events)
                    break

            p = self.ball.pos
            if abs(p.x) > cfg.out_x or abs(p.y) > cfg.out_y or p.z > cfg.out_z:
                self._finish(EVENT_OUT, tick_events)
                break

        self.step_index += 1
        if not self.terminal and self.step_index >= cfg.max_steps:
            self._finish(EVENT_TIMEOUT, tick_events)
        self._push_history()
        return self.build_observation(), tick_events, self.terminal

    def _finish(self, cause: str, tick_events: list[str]) -> None:
        self.terminal = True
        self.terminal_cause = cause
        self.events.add(cause)
        tick_events.append(cause)

    def _refresh_paddle(self, now: float) -> None:
        pose = robot.forward_kinematics(self.chain, self.robot_state.q)
        gap = now - self._paddle_t
        if gap > 0.0:
            vel = (pose.center - self._paddle.center).scale(1.0 / gap)
        else:
            vel = self._paddle.vel
        self._paddle = robot.PaddlePose(pose.center, pose.normal, vel)
        self._paddle_t = now

    def _in_extended_region(self, x: float, y: float) -> bool:
        """Landings here are in play: the opponent half widened by the margin."""
        m = self.goal_margin
        g = self.geom
        return (-g.length / 2 - m) <= x <= 0.0 and abs(y) <= g.width / 2 + m

    # -- observations ----------------------------------------------------------

    def build_observation(self, layout: Optional[str] = None) -> np.ndarray:
        layout = layout or self.cfg.obs_layout
        if layout == "flat":
            return self._flat_obs()
        if layout == "stacked":
            rows = self._history[-STACK_DEPTH:]
            pad = STACK_DEPTH - len(rows)
            if pad > 0:
                rows = [rows[0]] * pad + rows
            return np.stack(rows)
        raise ValueError(f"unknown observation layout {layout!r}")

    def _flat_obs(self) -> np.ndarray:
        b = self.ball
        gx, gy = self.goal if self.goal is not None else (0.0, 0.0)
        if self.cfg.include_ball_vel:
            parts = [b.pos.x, b.pos.y, b.pos.z, b.vel.x, b.vel.y, b.vel.z]
        else:
            parts = [b.pos.x, b.pos.y, b.pos.z]
        parts.extend(self.robot_state.q)
        parts.append(gx)
        parts.append(gy)
        return np.array(parts, dtype=np.float64)

    def _stacked_row(self) -> np.ndarray:
        b = self.ball
        gx, gy = self.goal if self.goal is not None else (0.0, 0.0)
        parts = list(self.robot_state.q)
        parts.extend((b.pos.x, b.pos.y, b.pos.z, gx, gy))
        return np.array(parts, dtype=np.float64)

    def _push_history(self) -> None:
        self._history.append(self._stacked_row())
        if len(self._history) > STACK_DEPTH:
            del self._history[0]


def run_episode(
    env: TableTennisEnv,
    policy: Callable[[np.ndarray], np.ndarray],
    goal: Optional[tuple[float, float]],
    noise_vector: Optional[np.ndarray] = None,
    seed: int = 0,
    meta: Optional[dict] = None,
) -> Trajectory:
    """Roll one episode: act -> (+ noise) -> step until terminal, recording
    every (observation, command) pair. The noise vector, when given, is added
    unchanged to every action of the episode."""
    obs = env.reset(seed, goal=goal)
    if hasattr(policy, "start_episode"):
        policy.start_episode(env)

    traj = Trajectory()
    traj.goal = env.goal
    z = None
    if noise_vector is not None:
        z = np.asarray(noise_vector, dtype=np.float64)
        if z.shape != (env.chain.joint_count,):
            raise ValueError("noise vector length must equal joint count")

    while not env.terminal:
        action = np.asarray(policy(obs), dtype=np.float64)
        if z is not None:
            action = action + z
        traj.steps.append((obs, action))
        obs, _, _ = env.step(action)

    traj.hit_index = env.hit_index
    traj.landing = env.landing
    traj.events = set(env.events)
    traj.meta = {
        "seed": int(seed),
        "commanded_goal": list(env.goal) if env.goal is not None else None,
        "throw": {
            "launch": [env.throw.launch_pos.x, env.throw.launch_pos.y, env.throw.launch_pos.z],
            "target": [env.throw.target_landing[0], env.throw.target_landing[1]],
            "speed": env.throw.speed,
        },
        "noise": z.tolist() if z is not None else None,
        "clamped_steps": int(env.clamped_steps),
        "bounces": int(env.bounces),
    }
    if meta:
        traj.meta.update(meta)
    traj.validate()
    return traj
