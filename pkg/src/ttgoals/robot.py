"""Configurable prismatic/revolute joint chain: forward kinematics, rate-limited
target tracking, and paddle-ball contact resolution.

The chain composes per-joint rigid transforms in order. Each joint contributes
a fixed translation (its mounting offset) followed by its own motion: a
translation along the joint axis for prismatic joints, a rotation about it for
revolute joints. Rotations are kept as row-major 3x3 tuples so the per-substep
hot path stays in scalar math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

from .physics import BallState, Vec3

PRISMATIC = "prismatic"
REVOLUTE = "revolute"

_IDENTITY = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class JointSpec:
    kind: str
    axis: tuple[float, float, float]
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    limits: tuple[float, float] = (-1.0, 1.0)
    max_vel: float = 1.0

    def __post_init__(self):
        if self.kind not in (PRISMATIC, REVOLUTE):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        ax, ay, az = self.axis
        n = math.sqrt(ax * ax + ay * ay + az * az)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"joint axis must be unit length, got |axis|={n}")
        if self.limits[0] >= self.limits[1]:
            raise ValueError("joint limits must satisfy lo < hi")
        if self.max_vel <= 0:
            raise ValueError("max_vel must be positive")


@dataclass(frozen=True)
class RobotChain:
    """A joint chain plus the paddle mount at its tip."""

    joints: tuple[JointSpec, ...]
    base_pos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    paddle_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    paddle_normal: tuple[float, float, float] = (-1.0, 0.0, 0.0)
    paddle_radius: float = 0.10
    home_q: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.joints:
            raise ValueError("chain needs at least one joint")
        home = self.home_q if self.home_q else (0.0,) * len(self.joints)
        if len(home) != len(self.joints):
            raise ValueError("home_q length must equal joint count")
        object.__setattr__(self, "home_q", tuple(float(v) for v in home))

    @property
    def joint_count(self) -> int:
        return len(self.joints)


class RobotState(NamedTuple):
    q: tuple[float, ...]
    qd: tuple[float, ...]
    t: float = 0.0


class PaddlePose(NamedTuple):
    center: Vec3
    normal: Vec3
    vel: Vec3


def _rot_axis(axis: tuple[float, float, float], angle: float):
    """Row-major rotation about a unit axis (Rodrigues)."""
    x, y, z = axis
    c = math.cos(angle)
    s = math.sin(angle)
    t = 1.0 - c
    return (
        t * x * x + c, t * x * y - s * z, t * x * z + s * y,
        t * x * y + s * z, t * y * y + c, t * y * z - s * x,
        t * x * z - s * y, t * y * z + s * x, t * z * z + c,
    )


def _mat_mul(a, b):
    return (
        a[0] * b[0] + a[1] * b[3] + a[2] * b[6],
        a[0] * b[1] + a[1] * b[4] + a[2] * b[7],
        a[0] * b[2] + a[1] * b[5] + a[2] * b[8],
        a[3] * b[0] + a[4] * b[3] + a[5] * b[6],
        a[3] * b[1] + a[4] * b[4] + a[5] * b[7],
        a[3] * b[2] + a[4] * b[5] + a[5] * b[8],
        a[6] * b[0] + a[7] * b[3] + a[8] * b[6],
        a[6] * b[1] + a[7] * b[4] + a[8] * b[7],
        a[6] * b[2] + a[7] * b[5] + a[8] * b[8],
    )


def _mat_apply(a, v):
    return (
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    )


def forward_kinematics(chain: RobotChain, q: Sequence[float]) -> PaddlePose:
    """Paddle pose from joint positions; the velocity field is zeroed here and
    filled by callers that finite-difference consecutive poses."""
    if len(q) != chain.joint_count:
        raise ValueError(f"expected {chain.joint_count} joint values, got {len(q)}")
    px, py, pz = chain.base_pos
    rot = _IDENTITY
    for spec, qi in zip(chain.joints, q):
        ox, oy, oz = spec.offset
        px += rot[0] * ox + rot[1] * oy + rot[2] * oz
        py += rot[3] * ox + rot[4] * oy + rot[5] * oz
        pz += rot[6] * ox + rot[7] * oy + rot[8] * oz
        if spec.kind == PRISMATIC:
            ax, ay, az = spec.axis
            px += (rot[0] * ax + rot[1] * ay + rot[2] * az) * qi
            py += (rot[3] * ax + rot[4] * ay + rot[5] * az) * qi
            pz += (rot[6] * ax + rot[7] * ay + rot[8] * az) * qi
        else:
            rot = _mat_mul(rot, _rot_axis(spec.axis, qi))
    cx, cy, cz = _mat_apply(rot, chain.paddle_offset)
    nx, ny, nz = _mat_apply(rot, chain.paddle_normal)
    return PaddlePose(
        center=Vec3(px + cx, py + cy, pz + cz),
        normal=Vec3(nx, ny, nz),
        vel=Vec3(0.0, 0.0, 0.0),
    )


def track_targets(
    state: RobotState,
    cmd: Sequence[float],
    chain: RobotChain,
    dt: float,
) -> tuple[RobotState, bool]:
    """Move each joint toward its commanded target at most max_vel*dt, clamped
    to limits. Returns the new state and whether any target needed clamping."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if len(cmd) != chain.joint_count:
        raise ValueError(f"expected {chain.joint_count} targets, got {len(cmd)}")
    q_new = []
    qd_new = []
    clamped = False
    for spec, qi, target in zip(chain.joints, state.q, cmd):
        lo, hi = spec.limits
        tgt = float(target)
        if tgt < lo or tgt > hi:
            clamped = True
            tgt = lo if tgt < lo else hi
        step = spec.max_vel * dt
        delta = tgt - qi
        if delta > step:
            delta = step
        elif delta < -step:
            delta = -step
        q_new.append(qi + delta)
        qd_new.append(delta / dt)
    return RobotState(tuple(q_new), tuple(qd_new), state.t + dt), clamped


def paddle_contact(
    ball: BallState,
    paddle: PaddlePose,
    radius: float,
    e_p: float,
    ball_radius: float = 0.02,
    slab_tol: float = 0.01,
) -> Optional[BallState]:
    """Reflect the ball off the paddle disc if it is inside the contact slab,
    projects onto the disc, and approaches the paddle plane; None otherwise.

    v' = v_p + (v - v_p) - (1 + e_p) * ((v - v_p) . n) * n
    """
    if radius <= 0:
        raise ValueError("paddle radius must be positive")
    if not 0.0 <= e_p <= 1.0:
        raise ValueError("paddle restitution must be in [0, 1]")
    n = paddle.normal
    d = ball.pos - paddle.center
    dn = d.dot(n)
    if abs(dn) > ball_radius + slab_tol:
        return None
    # In-disc projection of the ball center.
    tangential = d - n.scale(dn)
    if tangential.norm() > radius:
        return None
    rel = ball.vel - paddle.vel
    vn = rel.dot(n)
    if dn * vn >= 0.0:  # receding or sliding along the plane
        return None
    new_vel = ball.vel - n.scale((1.0 + e_p) * vn)
    return BallState(ball.pos, new_vel, ball.t)


# ---------------------------------------------------------------------------
# Chain presets
# ---------------------------------------------------------------------------

# Desk-scale default: x/z gantry carrying a 4R arm that reaches over the table
# end toward the net. Home paddle pose (all joints at 0), which the FK test
# derives independently:
#   center = (0.84, 0.0, 0.33), normal = (-1, 0, 0)
GANTRY6_HOME_CENTER = (0.84, 0.0, 0.33)


def gantry_arm_chain(edge_forward: bool = False) -> RobotChain:
    """Default 6-joint chain: prismatic x, prismatic z, then yaw/pitch/roll/yaw.

    With edge_forward the home pose rotates the final wrist 90 degrees so the
    paddle edge, not its face, points at the incoming ball.
    """
    joints = (
        JointSpec(PRISMATIC, (1.0, 0.0, 0.0), (0.0, 0.0, 0.0), (-0.45, 0.15), 3.0),
        JointSpec(PRISMATIC, (0.0, 0.0, 1.0), (0.0, 0.0, 0.0), (-0.25, 0.55), 3.0),
        JointSpec(REVOLUTE, (0.0, 0.0, 1.0), (-0.18, 0.0, 0.18), (-1.5, 1.5), 10.0),
        JointSpec(REVOLUTE, (0.0, 1.0, 0.0), (-0.22, 0.0, 0.0), (-1.5, 1.5), 10.0),
        JointSpec(REVOLUTE, (1.0, 0.0, 0.0), (-0.16, 0.0, 0.0), (-2.8, 2.8), 12.0),
        JointSpec(REVOLUTE, (0.0, 0.0, 1.0), (-0.06, 0.0, 0.0), (-1.5, 1.5), 12.0),
    )
    home = [0.0] * 6
    if edge_forward:
        home[5] = 1.5
    return RobotChain(
        joints=joints,
        base_pos=(1.55, 0.0, 0.15),
        paddle_offset=(-0.09, 0.0, 0.0),
        paddle_normal=(-1.0, 0.0, 0.0),
        paddle_radius=0.10,
        home_q=tuple(home),
    )


def full_arm_chain(edge_forward: bool = False) -> RobotChain:
    """8-joint variant: the gantry pair plus a 6R arm (mirrors an 8-DOF system)."""
    joints = (
        JointSpec(PRISMATIC, (1.0, 0.0, 0.0), (0.0, 0.0, 0.0), (-0.45, 0.15), 3.0),
        JointSpec(PRISMATIC, (0.0, 0.0, 1.0), (0.0, 0.0, 0.0), (-0.25, 0.55), 3.0),
        JointSpec(REVOLUTE, (0.0, 0.0, 1.0), (-0.15, 0.0, 0.18), (-1.5, 1.5), 10.0),
        JointSpec(REVOLUTE, (0.0, 1.0, 0.0), (-0.15, 0.0, 0.0), (-1.5, 1.5), 10.0),
        JointSpec(REVOLUTE, (1.0, 0.0, 0.0), (-0.12, 0.0, 0.0), (-2.8, 2.8), 12.0),
        JointSpec(REVOLUTE, (0.0, 1.0, 0.0), (-0.10, 0.0, 0.0), (-1.5, 1.5), 12.0),
        JointSpec(REVOLUTE, (1.0, 0.0, 0.0), (-0.06, 0.0, 0.0), (-2.8, 2.8), 12.0),
        JointSpec(REVOLUTE, (0.0, 0.0, 1.0), (-0.04, 0.0, 0.0), (-1.5, 1.5), 12.0),
    )
    home = [0.0] * 8
    if edge_forward:
        home[7] = 1.5
    return RobotChain(
        joints=joints,
        base_pos=(1.55, 0.0, 0.15),
        paddle_offset=(-0.09, 0.0, 0.0),
        paddle_normal=(-1.0, 0.0, 0.0),
        paddle_radius=0.10,
        home_q=tuple(home),
    )


CHAIN_PRESETS = {
    "gantry6": gantry_arm_chain,
    "arm8": full_arm_chain,
}


def chain_from_config(cfg: dict) -> RobotChain:
    """Build a chain from the `robot` config section (preset or explicit joints)."""
    if "joints" in cfg:
        joints = tuple(
            JointSpec(
                kind=j["kind"],
                axis=tuple(j["axis"]),
                offset=tuple(j.get("offset", (0.0, 0.0, 0.0))),
                limits=tuple(j.get("limits", (-1.0, 1.0))),
                max_vel=float(j.get("max_vel", 1.0)),
            )
            for j in cfg["joints"]
        )
        return RobotChain(
            joints=joints,
            base_pos=tuple(cfg.get("base_pos", (0.0, 0.0, 0.0))),
            paddle_offset=tuple(cfg.get("paddle_offset", (0.0, 0.0, 0.0))),
            paddle_normal=tuple(cfg.get("paddle_normal", (-1.0, 0.0, 0.0))),
            paddle_radius=float(cfg.get("paddle_radius", 0.10)),
            home_q=tuple(cfg.get("home_q", ())),
        )
    preset = cfg.get("preset", "gantry6")
    if preset not in CHAIN_PRESETS:
        raise ValueError(f"unknown robot preset {preset!r}")
    return CHAIN_PRESETS[preset](edge_forward=bool(cfg.get("edge_forward", False)))
