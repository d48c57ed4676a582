"""The training cache: hindsight relabeling, good-episode filtering, hit-inclusive
window sampling, batch assembly, and JSONL persistence.

Only relabeled episodes that were hit AND landed inside the extended goal
region are stored. The cache also counts every attempted rollout so the
stored/attempted data-efficiency ratio can be reported per practice iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import Trajectory
from .goals import GoalRegion, extended_region

DEMO_SOURCE = "demo"
SSP_SOURCE = "ssp"

JSONL_VERSION = 1


class NotRelabelable(ValueError):
    """Episode has no landing, so there is no achieved goal to relabel with."""


class CacheError(RuntimeError):
    pass


def relabel(traj: Trajectory) -> Trajectory:
    """Return a copy whose goal, and every observation's goal slots, are the
    achieved landing point. The commanded goal survives in meta."""
    if traj.landing is None:
        raise NotRelabelable("cannot relabel an episode without a landing")
    gx, gy = float(traj.landing[0]), float(traj.landing[1])
    steps = []
    for obs, act in traj.steps:
        new_obs = obs.copy()
        if new_obs.ndim == 1:
            new_obs[-2] = gx
            new_obs[-1] = gy
        else:
            new_obs[:, -2] = gx
            new_obs[:, -1] = gy
        steps.append((new_obs, act.copy()))
    meta = dict(traj.meta)
    meta.setdefault("commanded_goal", list(traj.goal) if traj.goal is not None else None)
    return Trajectory(
        steps=steps,
        hit_index=traj.hit_index,
        landing=(gx, gy),
        goal=(gx, gy),
        events=set(traj.events),
        meta=meta,
    )


def is_relabeled(traj: Trajectory) -> bool:
    return (
        traj.landing is not None
        and traj.goal is not None
        and traj.goal[0] == traj.landing[0]
        and traj.goal[1] == traj.landing[1]
    )


def filter_good(traj: Trajectory, region: Optional[GoalRegion] = None) -> bool:
    """Good = the ball was hit, it landed, and the landing is in the region."""
    if region is None:
        region = extended_region()
    return (
        traj.hit_index is not None
        and traj.landing is not None
        and region.contains(traj.landing[0], traj.landing[1])
    )


@dataclass
class WindowSample:
    obs: np.ndarray  # (len, ...) observation slice
    acts: np.ndarray  # (len, J)
    goal: tuple[float, float]
    episode_id: str
    start: int


def sample_window(traj: Trajectory, k: int, rng) -> WindowSample:
    """A subsequence of length min(k, len) guaranteed to contain the hit tick.

    For len >= k the start index is uniform over
    {s : max(0, hit-k+1) <= s <= min(hit, len-k)}; shorter episodes are
    returned whole.
    """
    if k < 1:
        raise ValueError("window length k must be >= 1")
    if traj.hit_index is None:
        raise ValueError("window sampling requires a stored (hit) episode")
    n = len(traj.steps)
    if n < k:
        start, length = 0, n
    else:
        lo = max(0, traj.hit_index - k + 1)
        hi = min(traj.hit_index, n - k)
        start = int(rng.integers(lo, hi + 1))
        length = k
    obs = np.stack([traj.steps[i][0] for i in range(start, start + length)])
    acts = np.stack([traj.steps[i][1] for i in range(start, start + length)])
    return WindowSample(
        obs=obs,
        acts=acts,
        goal=traj.goal if traj.goal is not None else (0.0, 0.0),
        episode_id=str(traj.meta.get("episode_id", "")),
        start=start,
    )


class Cache:
    """Append-only store of relabeled, filtered episodes plus attempt counters."""

    def __init__(self, obs_layout: str = "flat", joint_count: Optional[int] = None):
        if obs_layout not in ("flat", "stacked"):
            raise ValueError(f"unknown observation layout {obs_layout!r}")
        self.obs_layout = obs_layout
        self.joint_count = joint_count
        self.episodes: list[Trajectory] = []
        self.demos_count = 0
        self.ssp_count = 0
        self.seen_count = 0
        self._ids: set[str] = set()

    def __len__(self) -> int:
        return len(self.episodes)

    def record_attempt(self, n: int = 1) -> None:
        """Count rollout attempts, stored or filtered out."""
        if n < 0:
            raise ValueError("attempt count must be >= 0")
        self.seen_count += n

    def append(self, traj: Trajectory, source: str) -> None:
        if source not in (DEMO_SOURCE, SSP_SOURCE):
            raise ValueError(f"source must be {DEMO_SOURCE!r} or {SSP_SOURCE!r}")
        if not filter_good(traj):
            raise CacheError("episode does not pass the good-episode filter")
        if not is_relabeled(traj):
            raise CacheError("episode must be relabeled before it is cached")
        ep_id = traj.meta.get("episode_id")
        if ep_id is not None:
            if ep_id in self._ids:
                raise CacheError(f"duplicate episode id {ep_id!r}")
            self._ids.add(ep_id)
        if self.joint_count is None:
            self.joint_count = int(traj.steps[0][1].shape[0])
        elif traj.steps and traj.steps[0][1].shape[0] != self.joint_count:
            raise CacheError(
                f"episode has {traj.steps[0][1].shape[0]} joints, cache expects {self.joint_count}"
            )
        self.episodes.append(traj)
        if source == DEMO_SOURCE:
            self.demos_count += 1
        else:
            self.ssp_count += 1

    def sample_batch(self, batch_size: int, k: int, rng) -> list[WindowSample]:
        """batch_size episodes uniform with replacement, one window each."""
        if not self.episodes:
            raise CacheError("cannot sample from an empty cache")
        if batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        idx = rng.integers(0, len(self.episodes), size=batch_size)
        return [sample_window(self.episodes[int(i)], k, rng) for i in idx]

    def stored_ratio(self) -> Optional[float]:
        """Stored SSP episodes per attempted SSP rollout (the data-efficiency
        accounting quantity); None before any practice attempt."""
        attempted = self.seen_count - self.demos_count
        if attempted <= 0:
            return None
        return self.ssp_count / attempted


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------


class JsonlParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


def _obs_to_jsonable(obs: np.ndarray):
    return obs.tolist()


def _episode_record(traj: Trajectory) -> dict:
    return {
        "steps": [{"obs": _obs_to_jsonable(o), "act": a.tolist()} for o, a in traj.steps],
        "hit_index": traj.hit_index,
        "landing": [traj.landing[0], traj.landing[1]] if traj.landing is not None else None,
        "goal": [traj.goal[0], traj.goal[1]] if traj.goal is not None else None,
        "events": sorted(traj.events),
        "meta": traj.meta,
    }


def save_jsonl(cache: Cache, path) -> None:
    manifest = {
        "version": JSONL_VERSION,
        "joint_count": cache.joint_count,
        "obs_layout": cache.obs_layout,
        "episodes": len(cache.episodes),
        "demos_count": cache.demos_count,
        "ssp_count": cache.ssp_count,
        "seen_count": cache.seen_count,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(manifest) + "\n")
        for traj in cache.episodes:
            fh.write(json.dumps(_episode_record(traj)) + "\n")


def load_jsonl(path) -> Cache:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise JsonlParseError(path, 1, "missing manifest line")
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise JsonlParseError(path, 1, f"bad manifest: {err}") from err
    if manifest.get("version") != JSONL_VERSION:
        raise JsonlParseError(path, 1, f"unsupported version {manifest.get('version')!r}")

    cache = Cache(
        obs_layout=manifest.get("obs_layout", "flat"),
        joint_count=manifest.get("joint_count"),
    )
    expected = manifest.get("episodes")
    records = lines[1:]
    if expected is not None and len(records) != expected:
        raise JsonlParseError(
            path, len(lines) + 1, f"expected {expected} episode lines, found {len(records)}"
        )
    for i, line in enumerate(records, start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise JsonlParseError(path, i, f"bad episode record: {err}") from err
        try:
            traj = _record_to_trajectory(rec)
        except (KeyError, TypeError, ValueError) as err:
            raise JsonlParseError(path, i, f"malformed episode: {err}") from err
        # Filtering happened at append time, possibly under a different goal
        # region; a stored file is trusted rather than re-filtered.
        ep_id = traj.meta.get("episode_id")
        if ep_id is not None:
            if ep_id in cache._ids:
                raise JsonlParseError(path, i, f"duplicate episode id {ep_id!r}")
            cache._ids.add(ep_id)
        cache.episodes.append(traj)
    cache.demos_count = int(manifest.get("demos_count", len(cache.episodes)))
    cache.ssp_count = int(manifest.get("ssp_count", 0))
    cache.seen_count = int(manifest.get("seen_count", cache.demos_count + cache.ssp_count))
    if cache.demos_count + cache.ssp_count != len(cache.episodes):
        raise JsonlParseError(path, 1, "manifest counters inconsistent with episode count")
    return cache


def _record_to_trajectory(rec: dict) -> Trajectory:
    steps = [
        (np.array(s["obs"], dtype=np.float64), np.array(s["act"], dtype=np.float64))
        for s in rec["steps"]
    ]
    landing = tuple(rec["landing"]) if rec["landing"] is not None else None
    goal = tuple(rec["goal"]) if rec["goal"] is not None else None
    traj = Trajectory(
        steps=steps,
        hit_index=rec["hit_index"],
        landing=landing,
        goal=goal,
        events=set(rec["events"]),
        meta=rec["meta"],
    )
    traj.validate()
    return traj


def trajectories_equal(a: Trajectory, b: Trajectory) -> bool:
    """Field-for-field equality, used by round-trip checks."""
    if len(a.steps) != len(b.steps):
        return False
    for (ao, aa), (bo, ba) in zip(a.steps, b.steps):
        if not (np.array_equal(ao, bo) and np.array_equal(aa, ba)):
            return False
    return (
        a.hit_index == b.hit_index
        and a.landing == b.landing
        and a.goal == b.goal
        and a.events == b.events
        and a.meta == b.meta
    )


def caches_equal(a: Cache, b: Cache) -> bool:
    return (
        a.obs_layout == b.obs_layout
        and a.joint_count == b.joint_count
        and a.demos_count == b.demos_count
        and a.ssp_count == b.ssp_count
        and a.seen_count == b.seen_count
        and len(a.episodes) == len(b.episodes)
        and all(trajectories_equal(x, y) for x, y in zip(a.episodes, b.episodes))
    )
