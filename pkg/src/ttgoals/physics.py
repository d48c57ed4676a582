"""Ball flight with quadratic drag, table geometry, landing/net events, throw solving.

All positions are in a table frame: origin at table center on the playing
surface (z = 0), +x toward the robot side, +z up. Everything here is a pure
function over immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

GRAVITY = 9.81  # m/s^2


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    def __add__(self, other):  # type: ignore[override]
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other):
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def scale(self, s: float) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    def dot(self, other: "Vec3") -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)


@dataclass(frozen=True)
class TableGeometry:
    """ITTF-standard table, origin at center of the surface plane."""

    length: float = 2.74
    width: float = 1.525
    net_height: float = 0.1525

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0 or self.net_height <= 0:
            raise ValueError("table dimensions must be positive")

    def on_table(self, x: float, y: float) -> bool:
        return abs(x) <= self.length / 2 and abs(y) <= self.width / 2

    def on_robot_side(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.length / 2 and abs(y) <= self.width / 2

    def on_opponent_side(self, x: float, y: float) -> bool:
        return -self.length / 2 <= x <= 0.0 and abs(y) <= self.width / 2


@dataclass(frozen=True)
class DragModel:
    """Quadratic drag: dv/dt = g_vec - k_d * |v| * v, gravity along -z."""

    k_d: float = 0.1  # 1/m
    gravity: float = GRAVITY

    def __post_init__(self):
        if self.k_d < 0:
            raise ValueError("k_d must be >= 0")


class BallState(NamedTuple):
    pos: Vec3
    vel: Vec3
    t: float = 0.0


class LandingEvent(NamedTuple):
    x: float
    y: float
    t: float


@dataclass(frozen=True)
class ThrowSpec:
    launch_pos: Vec3
    target_landing: tuple[float, float]
    speed: float

    def __post_init__(self):
        if self.launch_pos.x >= 0:
            raise ValueError("launch position must be on the opponent side (x < 0)")
        if self.target_landing[0] <= 0:
            raise ValueError("target landing must be on the robot side (x > 0)")
        if self.speed <= 0:
            raise ValueError("throw speed must be positive")


class IntegrationError(RuntimeError):
    pass


class ThrowSolveError(RuntimeError):
    def __init__(self, message: str, max_range: float | None = None):
        if max_range is not None:
            message = f"{message} (drag-free max range at this speed: {max_range:.3f} m)"
        super().__init__(message)
        self.max_range = max_range


def step_ball(state: BallState, dt: float, drag: DragModel) -> BallState:
    """Advance one RK4 step of dv/dt = g - k_d|v|v, dx/dt = v."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not (state.pos.is_finite() and state.vel.is_finite()):
        raise IntegrationError(f"non-finite ball state at t={state.t}")

    k = drag.k_d
    g = drag.gravity
    px, py, pz = state.pos
    vx, vy, vz = state.vel

    # k1
    a1x, a1y, a1z = _accel(vx, vy, vz, k, g)
    # k2 at midpoint
    w2x = vx + 0.5 * dt * a1x
    w2y = vy + 0.5 * dt * a1y
    w2z = vz + 0.5 * dt * a1z
    a2x, a2y, a2z = _accel(w2x, w2y, w2z, k, g)
    # k3 at midpoint
    w3x = vx + 0.5 * dt * a2x
    w3y = vy + 0.5 * dt * a2y
    w3z = vz + 0.5 * dt * a2z
    a3x, a3y, a3z = _accel(w3x, w3y, w3z, k, g)
    # k4 at endpoint
    w4x = vx + dt * a3x
    w4y = vy + dt * a3y
    w4z = vz + dt * a3z
    a4x, a4y, a4z = _accel(w4x, w4y, w4z, k, g)

    sixth = dt / 6.0
    npx = px + sixth * (vx + 2.0 * (w2x + w3x) + w4x)
    npy = py + sixth * (vy + 2.0 * (w2y + w3y) + w4y)
    npz = pz + sixth * (vz + 2.0 * (w2z + w3z) + w4z)
    nvx = vx + sixth * (a1x + 2.0 * (a2x + a3x) + a4x)
    nvy = vy + sixth * (a1y + 2.0 * (a2y + a3y) + a4y)
    nvz = vz + sixth * (a1z + 2.0 * (a2z + a3z) + a4z)

    return BallState(Vec3(npx, npy, npz), Vec3(nvx, nvy, nvz), state.t + dt)


def _accel(vx: float, vy: float, vz: float, k: float, g: float):
    s = math.sqrt(vx * vx + vy * vy + vz * vz)
    ks = k * s
    return (-ks * vx, -ks * vy, -g - ks * vz)


def detect_landing(path: Sequence[BallState]) -> Optional[LandingEvent]:
    """First downward z=0 crossing of a time-ordered path, linearly interpolated."""
    if len(path) == 0:
        raise ValueError("empty ball path")
    prev = path[0]
    for cur in path[1:]:
        if prev.pos.z > 0.0 >= cur.pos.z and cur.vel.z < 0.0:
            return _interp_crossing(prev, cur)
        prev = cur
    return None


def _interp_crossing(prev: BallState, cur: BallState) -> LandingEvent:
    dz = prev.pos.z - cur.pos.z
    s = prev.pos.z / dz if dz != 0.0 else 0.0
    x = prev.pos.x + s * (cur.pos.x - prev.pos.x)
    y = prev.pos.y + s * (cur.pos.y - prev.pos.y)
    t = prev.t + s * (cur.t - prev.t)
    return LandingEvent(x, y, t)


def bounce_table(state: BallState, e_table: float, mu_t: float) -> BallState:
    """Reflect a downward table crossing: v_z flips scaled by e_table, tangent by mu_t."""
    if not 0.0 <= e_table <= 1.0:
        raise ValueError("e_table must be in [0, 1]")
    if not 0.0 <= mu_t <= 1.0:
        raise ValueError("mu_t must be in [0, 1]")
    pos = state.pos
    if pos.z < 0.0:
        pos = Vec3(pos.x, pos.y, -pos.z)
    vel = Vec3(state.vel.x * mu_t, state.vel.y * mu_t, -e_table * state.vel.z)
    return BallState(pos, vel, state.t)


def check_net(prev: BallState, next_: BallState, geom: TableGeometry) -> bool:
    """True iff the segment crosses x=0 below the net top within the net's span."""
    if prev.pos.x * next_.pos.x >= 0.0:
        return False
    s = prev.pos.x / (prev.pos.x - next_.pos.x)
    z = prev.pos.z + s * (next_.pos.z - prev.pos.z)
    y = prev.pos.y + s * (next_.pos.y - prev.pos.y)
    return z < geom.net_height and abs(y) <= geom.width / 2


def simulate_flight(
    state: BallState,
    drag: DragModel,
    dt: float = 1e-3,
    max_time: float = 5.0,
) -> LandingEvent:
    """Integrate until the first downward z=0 crossing; no table contacts."""
    t_end = state.t + max_time
    prev = state
    while prev.t < t_end:
        cur = step_ball(prev, dt, drag)
        if prev.pos.z > 0.0 >= cur.pos.z and cur.vel.z < 0.0:
            return _interp_crossing(prev, cur)
        prev = cur
    raise IntegrationError(f"no landing within {max_time} s of flight")


def max_dragfree_range(speed: float, launch_height: float, gravity: float = GRAVITY) -> float:
    """Largest horizontal range reachable at fixed speed from the given height."""
    v2 = speed * speed
    return (v2 / gravity) * math.sqrt(max(0.0, 1.0 + 2.0 * gravity * launch_height / v2))


def solve_dragfree_velocity(spec: ThrowSpec, gravity: float = GRAVITY) -> Vec3:
    """Closed-form launch velocity (low-elevation root) ignoring drag."""
    dx = spec.target_landing[0] - spec.launch_pos.x
    dy = spec.target_landing[1] - spec.launch_pos.y
    rng = math.hypot(dx, dy)
    z0 = spec.launch_pos.z
    v = spec.speed
    a = gravity / (2.0 * v * v)
    disc = 1.0 - 4.0 * a * (a * rng * rng - z0)
    if disc < 0.0:
        raise ThrowSolveError(
            f"target at range {rng:.3f} m unreachable at {v} m/s",
            max_range=max_dragfree_range(v, z0, gravity),
        )
    tan_theta = (1.0 - math.sqrt(disc)) / (2.0 * a * rng)  # low root
    theta = math.atan(tan_theta)
    phi = math.atan2(dy, dx)
    return _velocity_from_angles(v, theta, phi)


def _velocity_from_angles(speed: float, elevation: float, azimuth: float) -> Vec3:
    h = speed * math.cos(elevation)
    return Vec3(h * math.cos(azimuth), h * math.sin(azimuth), speed * math.sin(elevation))


def solve_throw(
    spec: ThrowSpec,
    drag: DragModel,
    tol: float = 1e-3,
    sim_dt: float = 1e-3,
    max_iters: int = 30,
) -> Vec3:
    """Initial velocity of magnitude spec.speed whose flight lands on the target.

    Starts from the drag-free closed form, then refines elevation and azimuth
    by secant shooting against the simulated (dragged) landing point.
    """
    v0 = solve_dragfree_velocity(spec, drag.gravity)
    if drag.k_d == 0.0:
        return v0

    tx, ty = spec.target_landing
    dx = tx - spec.launch_pos.x
    dy = ty - spec.launch_pos.y
    target_range = math.hypot(dx, dy)
    ux, uy = dx / target_range, dy / target_range  # downrange unit vector

    speed = spec.speed
    elevation = math.asin(max(-1.0, min(1.0, v0.z / speed)))
    azimuth = math.atan2(v0.y, v0.x)

    def land(elev: float, azim: float) -> LandingEvent:
        vel = _velocity_from_angles(speed, elev, azim)
        return simulate_flight(BallState(spec.launch_pos, vel, 0.0), drag, dt=sim_dt)

    def range_err(ev: LandingEvent) -> float:
        return (ev.x - spec.launch_pos.x) * ux + (ev.y - spec.launch_pos.y) * uy - target_range

    def lateral_err(ev: LandingEvent) -> float:
        return -(ev.x - spec.launch_pos.x) * uy + (ev.y - spec.launch_pos.y) * ux

    ev = land(elevation, azimuth)
    # Secant in elevation against range error, refreshing azimuth against the
    # (weakly coupled) lateral error each round.
    e_prev, r_prev = elevation, range_err(ev)
    elevation = min(elevation + 0.05, math.pi / 2 - 1e-3)
    for _ in range(max_iters):
        ev = land(elevation, azimuth)
        err_r = range_err(ev)
        err_l = lateral_err(ev)
        if abs(err_r) < tol and abs(err_l) < tol:
            break
        if err_r != r_prev:
            e_next = elevation - err_r * (elevation - e_prev) / (err_r - r_prev)
            e_prev, r_prev = elevation, err_r
            elevation = max(-0.5, min(math.pi / 2 - 1e-3, e_next))
        if abs(err_l) >= tol:
            # Small-angle: lateral error responds ~linearly to azimuth.
            azimuth -= math.atan2(err_l, target_range)
    else:
        raise ThrowSolveError(
            f"shooting failed to converge for target {spec.target_landing}",
            max_range=max_dragfree_range(speed, spec.launch_pos.z, drag.gravity),
        )
    return _velocity_from_angles(speed, elevation, azimuth)


# ---------------------------------------------------------------------------
# Throw presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThrowPreset:
    """Sampling ranges for episode throws; 'narrow' pins the launch position."""

    launch_lo: Vec3
    launch_hi: Vec3
    target_lo: tuple[float, float]
    target_hi: tuple[float, float]
    speed_lo: float
    speed_hi: float


DEFAULT_THROW_PRESETS: dict[str, ThrowPreset] = {
    # Fixed launch, modest speed/target spread: one forehand ball machine.
    "narrow": ThrowPreset(
        launch_lo=Vec3(-2.0, 0.0, 0.35),
        launch_hi=Vec3(-2.0, 0.0, 0.35),
        target_lo=(0.35, -0.20),
        target_hi=(0.65, 0.20),
        speed_lo=6.8,
        speed_hi=7.2,
    ),
    # Wide distribution of launch positions and velocities.
    "varied": ThrowPreset(
        launch_lo=Vec3(-2.3, -0.5, 0.25),
        launch_hi=Vec3(-1.7, 0.5, 0.45),
        target_lo=(0.25, -0.45),
        target_hi=(1.00, 0.45),
        speed_lo=6.5,
        speed_hi=7.5,
    ),
}


def sample_throw(preset: ThrowPreset, rng) -> ThrowSpec:
    """Uniform throw draw from a preset's boxes; rng is a numpy Generator."""
    lp = Vec3(
        float(rng.uniform(preset.launch_lo.x, preset.launch_hi.x)),
        float(rng.uniform(preset.launch_lo.y, preset.launch_hi.y)),
        float(rng.uniform(preset.launch_lo.z, preset.launch_hi.z)),
    )
    tgt = (
        float(rng.uniform(preset.target_lo[0], preset.target_hi[0])),
        float(rng.uniform(preset.target_lo[1], preset.target_hi[1])),
    )
    speed = float(rng.uniform(preset.speed_lo, preset.speed_hi))
    return ThrowSpec(launch_pos=lp, target_landing=tgt, speed=speed)
