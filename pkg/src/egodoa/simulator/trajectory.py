"""Random-walk trajectories for the wearer and the speaker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose, wrap_deg


class ConfigError(ValueError):
    """Invalid simulation configuration."""


@dataclass(frozen=True)
class TrajectoryParams:
    room: tuple[float, float, float, float] = (0.0, 8.0, 0.0, 8.0)  # xmin, xmax, zmin, zmax
    speed_range: tuple[float, float] = (0.5, 1.5)
    period_range: tuple[float, float] = (2.0, 4.0)
    stop_prob: float = 0.5
    duration: float = 10.0
    tick_rate: float = 100.0
    height: float = 1.65
    turn_rate: float = 360.0  # deg/s cap on yaw changes
    margin: float = 0.3

    def validate(self) -> None:
        xmin, xmax, zmin, zmax = self.room
        if not (xmax - xmin > 2 * self.margin and zmax - zmin > 2 * self.margin):
            raise ConfigError(f"degenerate room bounds {self.room}")
        lo, hi = self.speed_range
        if not (0.0 < lo <= hi <= 10.0):
            raise ConfigError(f"speed range {self.speed_range} outside (0, 10]")
        plo, phi = self.period_range
        if not (0.0 < plo <= phi):
            raise ConfigError(f"bad period range {self.period_range}")
        if not 0.0 <= self.stop_prob <= 1.0:
            raise ConfigError("stop probability must lie in [0, 1]")
        if self.duration <= 0 or self.tick_rate <= 0:
            raise ConfigError("duration and tick rate must be positive")


@dataclass
class Trajectory:
    """Poses sampled on a uniform time grid."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    yaw: np.ndarray
    moving: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.moving is None:
            self.moving = np.zeros(len(self.t), dtype=bool)

    def __len__(self) -> int:
        return len(self.t)

    def pose(self, k: int) -> Pose:
        return Pose(float(self.x[k]), float(self.y[k]), float(self.z[k]), float(self.yaw[k]))

    def positions_at(self, times) -> np.ndarray:
        """Linearly interpolated (x, y, z) at arbitrary times, shape (3, n)."""
        times = np.asarray(times, dtype=float)
        return np.stack([np.interp(times, self.t, self.x),
                         np.interp(times, self.t, self.y),
                         np.interp(times, self.t, self.z)])

    def yaw_at(self, times) -> np.ndarray:
        """Yaw interpolated along the shorter arc, degrees."""
        unwrapped = np.degrees(np.unwrap(np.radians(self.yaw)))
        return wrap_deg(np.interp(np.asarray(times, dtype=float), self.t, unwrapped))

    def pose_at(self, time: float) -> Pose:
        x, y, z = self.positions_at([time])[:, 0]
        return Pose(float(x), float(y), float(z), float(self.yaw_at([time])[0]))

    @classmethod
    def linear(cls, start: Pose, velocity: tuple[float, float], duration: float,
               tick_rate: float = 100.0, t0: float = 0.0) -> "Trajectory":
        """Constant-velocity walk in the (x, z) plane with fixed yaw."""
        n = int(round(duration * tick_rate)) + 1
        t = t0 + np.arange(n) / tick_rate
        vx, vz = velocity
        return cls(t=t,
                   x=start.x + vx * (t - t0),
                   y=np.full(n, start.y),
                   z=start.z + vz * (t - t0),
                   yaw=np.full(n, start.yaw),
                   moving=np.full(n, bool(vx or vz)))

    @classmethod
    def static(cls, pose: Pose, duration: float, tick_rate: float = 100.0) -> "Trajectory":
        return cls.linear(pose, (0.0, 0.0), duration, tick_rate)


def _heading_yaw(hx: float, hz: float) -> float:
    return math.degrees(math.atan2(hx, hz))


def _turn_toward(current: float, target: float, max_step: float) -> float:
    delta = (target - current + 180.0) % 360.0 - 180.0
    if abs(delta) <= max_step:
        return target % 360.0
    return (current + math.copysign(max_step, delta)) % 360.0


def gen_trajectory(seed: int, params: TrajectoryParams, look_at: Trajectory | None = None,
                   start: Pose | None = None) -> Trajectory:
    """Seeded random walk inside the room.

    At every period boundary the walker stands still with probability
    ``stop_prob`` or picks a fresh uniform heading and speed. Headings are
    mirrored off the walls. Yaw turns toward the heading while moving and
    is held while standing; when ``look_at`` is given, a standing walker
    turns toward that trajectory instead (used for the wearer, who tends
    to face the person talking).
    """
    params.validate()
    rng = np.random.default_rng(seed)
    xmin, xmax, zmin, zmax = params.room
    m = params.margin
    dt = 1.0 / params.tick_rate
    n = int(round(params.duration * params.tick_rate)) + 1
    t = np.arange(n) * dt

    if start is None:
        px = rng.uniform(xmin + m, xmax - m)
        pz = rng.uniform(zmin + m, zmax - m)
        yaw = rng.uniform(0.0, 360.0)
    else:
        px, pz, yaw = start.x, start.z, start.yaw
    xs = np.empty(n)
    zs = np.empty(n)
    yaws = np.empty(n)
    moving = np.zeros(n, dtype=bool)
    max_turn = params.turn_rate * dt

    next_switch = 0.0
    walking = False
    hx = hz = 0.0
    speed = 0.0
    for k in range(n):
        if t[k] >= next_switch - 1e-12:
            walking = rng.uniform() >= params.stop_prob
            heading = rng.uniform(0.0, 2 * math.pi)
            speed = rng.uniform(*params.speed_range)
            hx, hz = math.sin(heading), math.cos(heading)
            next_switch = t[k] + rng.uniform(*params.period_range)
        if k > 0 and walking:
            step = speed * dt
            if not xmin + m <= px + hx * step <= xmax - m:
                hx = -hx
            if not zmin + m <= pz + hz * step <= zmax - m:
                hz = -hz
            px += hx * step
            pz += hz * step
        if walking:
            yaw = _turn_toward(yaw, _heading_yaw(hx, hz), max_turn)
        elif look_at is not None:
            dx = look_at.x[min(k, len(look_at) - 1)] - px
            dz = look_at.z[min(k, len(look_at) - 1)] - pz
            if math.hypot(dx, dz) > 1e-6:
                yaw = _turn_toward(yaw, _heading_yaw(dx, dz), max_turn)
        xs[k], zs[k], yaws[k] = px, pz, yaw
        moving[k] = walking and k > 0
    return Trajectory(t=t, x=xs, y=np.full(n, params.height), z=zs, yaw=yaws, moving=moving)
