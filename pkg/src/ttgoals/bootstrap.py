"""Initial demonstration generation: a scripted interception demonstrator (fast
default) and a vanilla evolution-strategies trainer (slower alternative), plus
joint-perturbation diversification of the landings.

The scripted demonstrator is deliberately non-goal-directed: it predicts where
the incoming ball will cross the paddle's home plane, solves joint targets that
put the paddle there with a randomized tilt, and holds that command through
contact. Orientation-joint perturbations (delta_b) spread the landings over the
opponent half without hurting the hit rate, since the position solve runs after
the perturbations are applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import dataset, physics, robot
from .config import RunConfig
from .dataset import Cache, DEMO_SOURCE
from .env import TableTennisEnv, Trajectory, run_episode
from .goals import extended_region
from .physics import BallState


@dataclass(frozen=True)
class EsConfig:
    population: int = 16
    sigma: float = 0.1
    alpha: float = 0.05
    iterations: int = 200

    def __post_init__(self):
        if self.population < 2 or self.population % 2 != 0:
            raise ValueError("population must be even and >= 2 (antithetic pairs)")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class FitnessSpec:
    """Weights for contact, opponent-side landing, and landing proximity to the
    center of the opponent half."""

    w_hit: float = 1.0
    w_landed: float = 2.0
    w_center: float = 0.5

    def __post_init__(self):
        if self.w_hit < 0 or self.w_landed < 0 or self.w_center < 0:
            raise ValueError("fitness weights must be >= 0")
        if self.w_hit == 0 and self.w_landed == 0 and self.w_center == 0:
            raise ValueError("at least one fitness weight must be positive")


def episode_fitness(traj: Trajectory, spec: FitnessSpec, geom) -> float:
    f = 0.0
    if traj.hit_index is not None:
        f += spec.w_hit
    if traj.landing is not None:
        x, y = traj.landing
        if geom.on_opponent_side(x, y):
            f += spec.w_landed
        f -= spec.w_center * math.hypot(x + geom.length / 4, y)
    return f


# ---------------------------------------------------------------------------
# Scripted demonstrator
# ---------------------------------------------------------------------------


def _orientation_roles(chain: robot.RobotChain) -> dict:
    """Infer which joints position the paddle and which tilt it."""
    pos, pitch, shoulder_yaw, wrist_yaw = [], None, None, None
    for i, j in enumerate(chain.joints):
        if j.kind == robot.PRISMATIC:
            pos.append(i)
        elif abs(j.axis[2]) > 0.9:  # revolute about z
            if shoulder_yaw is None:
                shoulder_yaw = i
                pos.append(i)
            wrist_yaw = i
        elif abs(j.axis[1]) > 0.9 and pitch is None:  # revolute about y
            pitch = i
    if wrist_yaw == shoulder_yaw:
        wrist_yaw = None
    return {"pos": pos[:3], "pitch": pitch, "shoulder_yaw": shoulder_yaw, "wrist_yaw": wrist_yaw}


def default_perturb_joints(chain: robot.RobotChain) -> tuple[int, ...]:
    """Half of the joints, orientation-side first (they vary the landing
    without costing interception accuracy)."""
    roles = _orientation_roles(chain)
    pos = set(roles["pos"])
    orientation = [i for i in range(chain.joint_count) if i not in pos]
    want = chain.joint_count // 2
    chosen = orientation[:want]
    for i in range(chain.joint_count):
        if len(chosen) >= want:
            break
        if i not in chosen:
            chosen.append(i)
    return tuple(sorted(chosen[:want]))


class ScriptedDemonstrator:
    """Predicts the intercept, drives the joints there, holds through contact."""

    def __init__(
        self,
        rng,
        perturb_joints: Optional[tuple[int, ...]] = None,
        delta_b: float = 0.25,
        base_pitch: float = 0.24,
        pitch_jitter: float = 0.06,
        yaw_jitter: float = 0.06,
    ):
        self.rng = rng
        self.perturb_joints = perturb_joints
        self.delta_b = delta_b
        self.base_pitch = base_pitch
        self.pitch_jitter = pitch_jitter
        self.yaw_jitter = yaw_jitter
        self._target: Optional[np.ndarray] = None

    def start_episode(self, env: TableTennisEnv) -> None:
        chain = env.chain
        roles = _orientation_roles(chain)
        home = np.array(chain.home_q)
        home_pose = robot.forward_kinematics(chain, home)
        plane_x = home_pose.center.x

        hit_point = self._predict_crossing(env, plane_x)
        q = home.copy()

        rng = self.rng
        tilt_pitch = self.base_pitch + float(rng.uniform(-self.pitch_jitter, self.pitch_jitter))
        tilt_yaw = float(rng.uniform(-self.yaw_jitter, self.yaw_jitter))
        perturb = self.perturb_joints
        if perturb is None:
            perturb = default_perturb_joints(chain)
        offsets = rng.uniform(-self.delta_b, self.delta_b, size=len(perturb))

        if roles["pitch"] is not None:
            q[roles["pitch"]] = tilt_pitch
        for j, off in zip(perturb, offsets):
            q[j] += off

        if hit_point is not None:
            target = np.array([plane_x, hit_point[0], hit_point[1]])
            q = _solve_position(chain, q, roles["pos"], target)
            if roles["wrist_yaw"] is not None and roles["shoulder_yaw"] is not None:
                # Re-face the paddle after the shoulder swing.
                if roles["wrist_yaw"] not in perturb:
                    q[roles["wrist_yaw"]] = -q[roles["shoulder_yaw"]] + tilt_yaw
                else:
                    q[roles["wrist_yaw"]] += -q[roles["shoulder_yaw"]] + tilt_yaw

        for i, spec in enumerate(chain.joints):
            q[i] = min(max(q[i], spec.limits[0]), spec.limits[1])
        self._target = q

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        if self._target is None:
            raise RuntimeError("start_episode must run before the first action")
        return self._target

    def _predict_crossing(self, env: TableTennisEnv, plane_x: float):
        """Forward-simulate the throw (with its own-side bounce) to the paddle
        plane; returns (y, z) there or None if it never arrives."""
        ball = env.ball
        drag = env.drag
        geom = env.geom
        contact = env.contact
        dt = 2e-3
        bounced = False
        for _ in range(int(2.0 / dt)):
            prev = ball
            ball = physics.step_ball(ball, dt, drag)
            if prev.pos.z > 0.0 >= ball.pos.z and ball.vel.z < 0.0:
                ev = physics.detect_landing([prev, ball])
                if not bounced and geom.on_robot_side(ev.x, ev.y):
                    ball = physics.bounce_table(ball, contact.e_table, contact.mu_t)
                    bounced = True
                else:
                    return None
            if prev.pos.x < plane_x <= ball.pos.x:
                s = (plane_x - prev.pos.x) / (ball.pos.x - prev.pos.x)
                y = prev.pos.y + s * (ball.pos.y - prev.pos.y)
                z = prev.pos.z + s * (ball.pos.z - prev.pos.z)
                return (y, z)
        return None


def _solve_position(
    chain: robot.RobotChain,
    q0: np.ndarray,
    pos_joints: list[int],
    target: np.ndarray,
    iters: int = 8,
) -> np.ndarray:
    """Damped Gauss-Newton on the listed joints so the paddle center reaches
    the target point; other joints stay fixed."""
    q = q0.copy()
    eps = 1e-5
    for _ in range(iters):
        center = robot.forward_kinematics(chain, q).center
        r = np.array([center.x, center.y, center.z]) - target
        if float(np.dot(r, r)) < 1e-8:
            break
        J = np.empty((3, len(pos_joints)))
        for col, ji in enumerate(pos_joints):
            qp = q.copy()
            qp[ji] += eps
            cp = robot.forward_kinematics(chain, qp).center
            J[:, col] = (np.array([cp.x, cp.y, cp.z]) - np.array([center.x, center.y, center.z])) / eps
        dq, *_ = np.linalg.lstsq(J.T @ J + 1e-6 * np.eye(len(pos_joints)), -J.T @ r, rcond=None)
        for col, ji in enumerate(pos_joints):
            lo, hi = chain.joints[ji].limits
            q[ji] = min(max(q[ji] + dq[col], lo), hi)
    return q


# ---------------------------------------------------------------------------
# Evolution strategies
# ---------------------------------------------------------------------------


def _centered_ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (ties share) scaled to [-1, 1]; constant input maps to 0."""
    n = values.size
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n, dtype=np.float64)
    # Average the ranks of exactly tied values.
    for v in np.unique(values):
        idx = values == v
        ranks[idx] = ranks[idx].mean()
    if n == 1:
        return np.zeros(1)
    return 2.0 * (ranks / (n - 1) - 0.5)


def es_train(
    fitness: Callable[[np.ndarray], float],
    x0: np.ndarray,
    cfg: EsConfig,
    rng,
    callback: Optional[Callable[[int, np.ndarray, float], None]] = None,
) -> np.ndarray:
    """Vanilla antithetic ES ascent with rank-normalized fitness.

    theta <- theta + alpha/(n*sigma) * sum_i f~_i * eps_i over all n signed
    perturbations (eps_j and -eps_j share one draw). Returns the best-fitness
    parameters seen, including the per-iteration center evaluations.
    """
    theta = np.array(x0, dtype=np.float64)
    best = theta.copy()
    best_f = fitness(theta)
    half = cfg.population // 2
    for it in range(cfg.iterations):
        eps = rng.normal(scale=cfg.sigma, size=(half, theta.size))
        values = np.empty(cfg.population)
        for j in range(half):
            values[2 * j] = fitness(theta + eps[j])
            values[2 * j + 1] = fitness(theta - eps[j])
        ranked = _centered_ranks(values)
        signed = ranked[0::2] - ranked[1::2]  # pair weight for +eps_j
        update = (cfg.alpha / (cfg.population * cfg.sigma)) * (signed @ eps)
        theta = theta + update
        f_center = fitness(theta)
        if f_center > best_f:
            best_f = f_center
            best = theta.copy()
        if callback is not None:
            callback(it, theta, f_center)
    return best


def es_policy_fitness(
    template, cfg: RunConfig, spec: FitnessSpec, episodes: int = 4, seed: int = 0
) -> Callable[[np.ndarray], float]:
    """Mean episode fitness of a policy parameter vector (for es_train)."""
    from .policy import PolicyAgent

    env = cfg.make_env()

    def fitness(vec: np.ndarray) -> float:
        params = template.with_flat(vec)
        agent = PolicyAgent(params)
        total = 0.0
        for ep in range(episodes):
            traj = run_episode(env, agent, goal=None, seed=seed * 100003 + ep)
            total += episode_fitness(traj, spec, cfg.geom)
        return total / episodes

    return fitness


# ---------------------------------------------------------------------------
# Demo dataset generation
# ---------------------------------------------------------------------------


class BootstrapError(RuntimeError):
    pass


@dataclass
class ScatterSummary:
    landings: list[tuple[float, float]]
    grid_occupancy: float  # fraction of occupied cells in an 8x8 opponent-half grid
    bbox: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max
    attempts: int
    hits: int


def landing_grid_occupancy(
    landings: list[tuple[float, float]], geom, nx: int = 8, ny: int = 8
) -> float:
    """Fraction of cells of an nx-by-ny grid over the opponent half that
    contain at least one landing."""
    if not landings:
        return 0.0
    occupied = set()
    for x, y in landings:
        if not geom.on_opponent_side(x, y):
            continue
        cx = min(int((x + geom.length / 2) / (geom.length / 2) * nx), nx - 1)
        cy = min(int((y + geom.width / 2) / geom.width * ny), ny - 1)
        occupied.add((cx, cy))
    return len(occupied) / (nx * ny)


def generate_bootstrap(
    source,
    n_demos: int,
    cfg: RunConfig,
    seed: int = 0,
    out_path=None,
    max_attempts: Optional[int] = None,
    delta_b: float = 0.25,
    perturb_joints: Optional[tuple[int, ...]] = None,
) -> tuple[Cache, ScatterSummary]:
    """Roll the demonstrator until n_demos episodes pass the good filter,
    relabel them, and optionally write the JSONL demo file.

    `source` is "scripted", or a PolicyParams to roll out (e.g. ES-trained).
    Aborts when the hit rate over the first 500 attempts is below 5%.
    """
    if n_demos < 0:
        raise ValueError("n_demos must be >= 0")
    env = cfg.make_env()
    region = extended_region(cfg.geom, cfg.ssp.goal_margin)
    cache = Cache(obs_layout=cfg.episode.obs_layout, joint_count=cfg.chain.joint_count)
    landings: list[tuple[float, float]] = []
    hits = 0
    attempts = 0
    if max_attempts is None:
        max_attempts = max(1000, 50 * n_demos)

    if source == "scripted":
        def make_agent(ep_rng):
            return ScriptedDemonstrator(
                ep_rng, delta_b=delta_b, perturb_joints=perturb_joints
            )
    else:
        from .policy import PolicyAgent

        def make_agent(ep_rng):
            return PolicyAgent(source)

    while len(cache) < n_demos:
        if attempts >= max_attempts:
            raise BootstrapError(
                f"only {len(cache)}/{n_demos} demos after {attempts} attempts"
            )
        ep_rng = np.random.default_rng([seed, 0xB007, attempts])
        agent = make_agent(ep_rng)
        env_seed = int(ep_rng.integers(2**62))
        traj = run_episode(
            env, agent, goal=None, seed=env_seed,
            meta={"episode_id": f"demo-{seed}-{attempts}", "source": DEMO_SOURCE},
        )
        attempts += 1
        cache.record_attempt()
        if traj.hit_index is not None:
            hits += 1
        if traj.landing is not None:
            landings.append(traj.landing)
        if dataset.filter_good(traj, region):
            cache.append(dataset.relabel(traj), DEMO_SOURCE)
        if attempts == 500 and hits < 25 and len(cache) < n_demos:
            raise BootstrapError(
                f"hit rate {hits}/500 below 5%; demonstrator cannot bootstrap this task"
            )

    summary = ScatterSummary(
        landings=landings,
        grid_occupancy=landing_grid_occupancy(
            [t.landing for t in cache.episodes], cfg.geom
        ),
        bbox=_bbox(landings),
        attempts=attempts,
        hits=hits,
    )
    if out_path is not None:
        dataset.save_jsonl(cache, out_path)
    return cache, summary


def _bbox(points: list[tuple[float, float]]) -> tuple[float, float, float, float]:
    if not points:
        return (0.0, 0.0, 0.0, 0.0)
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    return (min(xs), max(xs), min(ys), max(ys))
