"""Wearer-relative geometry.

World frame: x east, y up, z north. A yaw of 0 faces +z and yaw grows
clockwise seen from above, so the wearer's facing vector is
``(sin yaw, cos yaw)`` in the (x, z) plane and the right-hand vector is
``(cos yaw, -sin yaw)``.

Wearer-relative azimuth: 0 deg = right, 90 deg = straight ahead,
180 deg = left, 270 deg = behind. The camera sees azimuths in [60, 120].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FOV_LOW = 60.0
FOV_HIGH = 120.0
NEAR_EPS = 1e-9


class GeometryError(ValueError):
    """Raised for degenerate geometric configurations."""


def wrap_deg(angle):
    """Wrap an angle (scalar or array) into [0, 360)."""
    out = np.mod(angle, 360.0)
    # np.mod(-1e-17, 360) rounds to 360.0
    out = np.where(out >= 360.0, 0.0, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "yaw"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"pose field {name} is not finite")
        object.__setattr__(self, "yaw", wrap_deg(self.yaw))

    @property
    def facing(self) -> np.ndarray:
        r = math.radians(self.yaw)
        return np.array([math.sin(r), math.cos(r)])

    @property
    def right(self) -> np.ndarray:
        r = math.radians(self.yaw)
        return np.array([math.cos(r), -math.sin(r)])

    def as_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "z": self.z, "yaw": self.yaw}


@dataclass(frozen=True)
class CameraIntrinsics:
    horizontal_fov: float = 60.0
    image_width: int = 224
    image_height: int = 224

    def __post_init__(self):
        if not 0.0 < self.horizontal_fov < 180.0:
            raise GeometryError("horizontal_fov must lie in (0, 180)")
        if self.image_width <= 0 or self.image_height <= 0:
            raise GeometryError("image dimensions must be positive")

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels)."""
        return 0.5 * self.image_width / math.tan(math.radians(self.horizontal_fov) / 2)

    @property
    def center(self) -> tuple[float, float]:
        return self.image_width / 2.0, self.image_height / 2.0


@dataclass(frozen=True)
class SpherePoint:
    azimuth: float
    elevation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "azimuth", wrap_deg(self.azimuth))
        if not -90.0 <= self.elevation <= 90.0:
            raise GeometryError(f"elevation {self.elevation} outside [-90, 90]")

    def unit(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def to_wearer_frame(wearer: Pose, speaker: Pose) -> tuple[float, float, float]:
    """Speaker displacement as (right, forward, up) components in meters."""
    dx = speaker.x - wearer.x
    dz = speaker.z - wearer.z
    r = math.radians(wearer.yaw)
    right = dx * math.cos(r) - dz * math.sin(r)
    forward = dx * math.sin(r) + dz * math.cos(r)
    return right, forward, speaker.y - wearer.y


def relative_doa(wearer: Pose, speaker: Pose) -> float:
    """Azimuth of ``speaker`` seen from ``wearer`` in degrees, [0, 360).

    The displacement is taken speaker-minus-wearer and resolved with a
    full-quadrant arctangent so that a speaker dead ahead reads 90 deg.
    Height is ignored.
    """
    right, forward, _ = to_wearer_frame(wearer, speaker)
    if math.hypot(right, forward) < NEAR_EPS:
        raise GeometryError("wearer and speaker share the same horizontal position")
    return wrap_deg(math.degrees(math.atan2(forward, right)))


def relative_doa_array(wx, wz, wyaw, sx, sz) -> np.ndarray:
    """Vectorised :func:`relative_doa` over arrays of positions (degrees)."""
    dx = np.asarray(sx) - np.asarray(wx)
    dz = np.asarray(sz) - np.asarray(wz)
    r = np.radians(wyaw)
    right = dx * np.cos(r) - dz * np.sin(r)
    forward = dx * np.sin(r) + dz * np.cos(r)
    return wrap_deg(np.degrees(np.arctan2(forward, right)))


def cyclic_abs_error(theta, theta_hat):
    """Absolute angular error on the circle, in [0, 180]."""
    # abs before the modulo keeps the result exactly symmetric in its arguments
    d = np.abs(np.asarray(theta, dtype=float) - np.asarray(theta_hat, dtype=float)) % 360.0
    out = np.minimum(d, 360.0 - d)
    if np.ndim(out) == 0:
        return float(out)
    return out


def in_fov(az) -> bool | np.ndarray:
    """True when the azimuth lies inside the camera cone (bounds inclusive)."""
    a = np.asarray(az, dtype=float)
    out = (a >= FOV_LOW) & (a <= FOV_HIGH)
    if out.ndim == 0:
        return bool(out)
    return out


def project_pinhole(wearer: Pose, speaker: Pose, cam: CameraIntrinsics,
                    camera_height: float | None = None):
    """Project the speaker's head center into the wearer's camera.

    The camera sits at the wearer's position (height ``wearer.y`` unless
    ``camera_height`` is given) looking along the facing vector. Returns
    ``(u, v)`` in pixels, or ``None`` when the speaker is behind the camera
    or outside the horizontal field of view. Azimuth 60 lands on the right
    image edge (u = width) and azimuth 120 on the left edge (u = 0).
    """
    right, forward, _ = to_wearer_frame(wearer, speaker)
    if forward <= NEAR_EPS:
        return None
    az = math.degrees(math.atan2(forward, right))
    half = cam.horizontal_fov / 2.0
    if abs(az - 90.0) > half + 1e-9:
        return None
    cam_y = wearer.y if camera_height is None else camera_height
    f = cam.focal
    cx, cy = cam.center
    u = cx + f * right / forward
    v = cy - f * (speaker.y - cam_y) / forward
    return u, v


def doppler_shift(f: float, v_r: float, v_s: float, c: float = 343.0) -> float:
    """Received frequency for receiver speed ``v_r`` and source speed ``v_s``.

    Both speeds are positive when closing the distance.
    """
    if v_s >= c:
        raise ValueError(f"source speed {v_s} must stay below the sound speed {c}")
    # ratio first so equal numerator and denominator give f exactly
    return f * ((c + v_r) / (c - v_s))


def great_circle_deg(a: SpherePoint, b: SpherePoint) -> float:
    """Central angle between two directions, in degrees."""
    cosang = float(np.clip(np.dot(a.unit(), b.unit()), -1.0, 1.0))
    # atan2 form keeps precision near 0 and 180
    cross = np.linalg.norm(np.cross(a.unit(), b.unit()))
    return math.degrees(math.atan2(cross, cosang))
