"""Goal regions on the opponent half, optionally extended past the table edges."""

from __future__ import annotations

from dataclasses import dataclass

from .physics import TableGeometry


@dataclass(frozen=True)
class GoalRegion:
    """Axis-aligned goal rectangle: x in [x_min, x_max], y in [y_min, y_max]."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError("goal region must have positive area")

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def extended_region(geom: TableGeometry = TableGeometry(), margin: float = 0.2) -> GoalRegion:
    """Opponent half extended outward by the margin on the back and side edges.

    The net edge (x = 0) is never extended: goals stay on the opponent side.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    return GoalRegion(
        x_min=-geom.length / 2 - margin,
        x_max=0.0,
        y_min=-geom.width / 2 - margin,
        y_max=geom.width / 2 + margin,
    )


def table_region(geom: TableGeometry = TableGeometry()) -> GoalRegion:
    """The physical opponent half (evaluation goals stay on the table)."""
    return extended_region(geom, margin=0.0)


def sample_goal(region: GoalRegion, rng) -> tuple[float, float]:
    """Uniform draw over the rectangle; rng is a numpy Generator."""
    x = float(rng.uniform(region.x_min, region.x_max))
    y = float(rng.uniform(region.y_min, region.y_max))
    return (x, y)
