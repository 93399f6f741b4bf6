"""Single-viewpoint range-image rendering of a scene by ray casting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cloud import PointCloud, RangeImageLayout
from ..errors import NoVisibleGeometry
from .scene import SceneSpec

__all__ = ["Rendering", "render_range_image", "camera_rays"]


@dataclass(frozen=True, eq=False)
class Rendering:
    """Rendered cloud (sensor frame) with per-point and per-pixel primitive labels.

    ``pixel_label[v, u]`` is the primitive index hit at that pixel, or -1.
    ``ray_depth`` is the noiseless hit depth per pixel (inf when nothing is hit).
    """

    cloud: PointCloud
    point_label: np.ndarray
    pixel_label: np.ndarray
    ray_depth: np.ndarray
    spec: SceneSpec


def camera_rays(cam):
    """Per-pixel ray directions in the camera frame, scaled to unit depth."""
    u, v = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    return np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)


def render_range_image(spec: SceneSpec, rng=None) -> Rendering:
    """Ray-cast every pixel; the nearest hit wins, producing occlusion shadows.

    Gaussian noise of ``spec.noise`` is added along each ray. ``rng`` defaults
    to a generator seeded with ``spec.seed``.

    Raises:
        NoVisibleGeometry: no pixel hits any primitive.
    """
    cam = spec.camera
    rng = np.random.default_rng(spec.seed) if rng is None else (
        rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng))
    d_cam = camera_rays(cam).reshape(-1, 3)
    d_world = d_cam @ cam.rotation.T
    origin = np.broadcast_to(cam.position, d_world.shape)
    best = np.full(len(d_cam), np.inf)
    label = np.full(len(d_cam), -1, dtype=np.int64)
    for k, prim in enumerate(spec.primitives):
        t = prim.intersect(origin, d_world)
        closer = t < best
        best[closer] = t[closer]
        label[closer] = k
    hit = np.isfinite(best)
    if not hit.any():
        raise NoVisibleGeometry("no primitive is visible from the camera")
    depth = best.copy()
    if spec.noise > 0:
        depth[hit] += rng.normal(0.0, spec.noise, int(hit.sum()))
    # noise may push a return behind the camera
    hit &= depth > 0
    pix = np.full(len(d_cam), -1, dtype=np.int64)
    pix[hit] = np.arange(int(hit.sum()))
    points = d_cam[hit] * depth[hit, None]
    shape = (cam.height, cam.width)
    layout = RangeImageLayout(cam.width, cam.height, pix.reshape(shape), cam.fx, cam.fy,
                              cam.cx, cam.cy)
    cloud = PointCloud(points, layout)
    pixel_label = np.where(hit, label, -1).reshape(shape)
    return Rendering(cloud, label[hit], pixel_label, best.reshape(shape), spec)
