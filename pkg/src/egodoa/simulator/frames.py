"""Synthetic egocentric camera frames."""

from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics, Pose, project_pinhole, to_wearer_frame

HEAD_RADIUS = 0.11
TORSO_HALF_WIDTH = 0.22
TORSO_HALF_HEIGHT = 0.34
NECK_DROP = 0.47  # head centre to torso centre, metres
SKIN = (222, 184, 150)
SHIRT = (196, 36, 40)


def _background(cam: CameraIntrinsics, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    h, w = cam.image_height, cam.image_width
    rows = np.linspace(0.0, 1.0, h)[:, None, None]
    sky = np.array([150.0, 170.0, 190.0])
    floor = np.array([110.0, 95.0, 80.0])
    horizon = 0.5 + 0.04 * rng.standard_normal()
    blend = 1.0 / (1.0 + np.exp(-(rows - horizon) * 25.0))
    img = sky * (1.0 - blend) + floor * blend
    img = np.broadcast_to(img, (h, w, 3)).copy()
    # coarse texture, bilinearly upsampled so it compresses well
    coarse = rng.standard_normal((h // 16 + 2, w // 16 + 2, 3)) * 12.0
    yi = np.linspace(0, coarse.shape[0] - 1.001, h)
    xi = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = yi.astype(int), xi.astype(int)
    fy, fx = (yi - y0)[:, None, None], (xi - x0)[None, :, None]
    tex = (coarse[y0][:, x0] * (1 - fy) * (1 - fx) + coarse[y0 + 1][:, x0] * fy * (1 - fx)
           + coarse[y0][:, x0 + 1] * (1 - fy) * fx + coarse[y0 + 1][:, x0 + 1] * fy * fx)
    return img + tex


def render_frame(wearer: Pose, speaker: Pose, cam: CameraIntrinsics | None = None,
                 seed: int = 0) -> np.ndarray:
    """Render an (H, W, 3) uint8 frame from the wearer's camera.

    The speaker is drawn as a head disc over a torso ellipse centred on the
    projected head position, scaled by 1 / depth. Speakers outside the
    field of view leave only the background.
    """
    cam = cam or CameraIntrinsics()
    img = _background(cam, seed)
    uv = project_pinhole(wearer, speaker, cam)
    if uv is not None:
        u, v = uv
        _, depth, _ = to_wearer_frame(wearer, speaker)
        scale = cam.focal / depth
        yy, xx = np.mgrid[0:cam.image_height, 0:cam.image_width]
        xx = xx + 0.5
        yy = yy + 0.5
        tv = v + NECK_DROP * scale
        torso = (((xx - u) / (TORSO_HALF_WIDTH * scale)) ** 2
                 + ((yy - tv) / (TORSO_HALF_HEIGHT * scale)) ** 2) <= 1.0
        head = (xx - u) ** 2 + (yy - v) ** 2 <= (HEAD_RADIUS * scale) ** 2
        img[torso] = SHIRT
        img[head] = SKIN
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def silhouette_mask(img: np.ndarray) -> np.ndarray:
    """Pixels painted with the speaker's colours."""
    return np.all(img == SHIRT, axis=-1) | np.all(img == SKIN, axis=-1)
