"""Programmatic ground-truth labeling of graspable scene geometry.

A cylinder or torus tube is graspable along the stretches of its center
line where its radius fits the hand, and every point of the scene other
than the primitive itself stays at least ``radius + gap`` away from the
center line. A stretch counts when it is at least ``min_length`` long and
visible in the rendering. Boxes, planes and spheres are never graspable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..shell import CylindricalShell, HandParams
from .render import Rendering
from .scene import Cylinder, SceneSpec, TorusArc

__all__ = ["TruthAffordance", "label_scene", "truth_shell"]

SAMPLE_SPACING = 0.001


@dataclass(frozen=True, eq=False)
class TruthAffordance:
    """Graspable stretch of a primitive; ``polyline`` is in the sensor frame."""

    name: str
    primitive: str
    kind: str
    radius: float
    polyline: np.ndarray
    visible_points: int

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.polyline, axis=0), axis=1)))

    def to_dict(self):
        return {"name": self.name, "primitive": self.primitive, "kind": self.kind,
                "radius": self.radius, "length": self.length,
                "visible_points": self.visible_points,
                "polyline": self.polyline.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["name"]), str(d["primitive"]), str(d["kind"]), float(d["radius"]),
                   np.asarray(d["polyline"], dtype=float).reshape(-1, 3),
                   int(d["visible_points"]))


def _center_line(prim):
    if isinstance(prim, Cylinder):
        n = max(2, int(np.ceil(prim.length / SAMPLE_SPACING)) + 1)
        s = np.linspace(-0.5 * prim.length, 0.5 * prim.length, n)
        return prim.center + s[:, None] * prim.axis, s, prim.radius
    arc = np.radians(prim.arc[1] - prim.arc[0]) * prim.ring_radius
    n = max(2, int(np.ceil(arc / SAMPLE_SPACING)) + 1)
    P, _, th = prim.arc_points(n)
    return P, th, prim.tube_radius


def _coordinate(prim, X):
    """Center-line parameter of world points (axial offset or arc angle)."""
    U = prim.local(X)
    if isinstance(prim, Cylinder):
        return U[:, 2]
    a0 = np.radians(prim.arc[0])
    return a0 + np.mod(np.arctan2(U[:, 1], U[:, 0]) - a0, 2 * np.pi)


def _runs(ok):
    edges = np.diff(np.r_[0, ok.astype(np.int8), 0])
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def label_scene(spec: SceneSpec, rendering: Rendering | None = None,
                hand: HandParams | None = None, gap: float | None = None,
                min_length: float = 0.03, min_visible: int = 100) -> list:
    """Ground-truth affordances of ``spec``.

    ``gap`` defaults to the hand's finger thickness. Without a rendering the
    visibility requirement is skipped.
    """
    hand = hand or HandParams()
    gap = hand.finger_thickness if gap is None else gap
    cam = spec.camera
    if rendering is not None:
        world_pts = cam.to_world(rendering.cloud.points)
    out = []
    for k, prim in enumerate(spec.primitives):
        if not prim.label or not isinstance(prim, (Cylinder, TorusArc)):
            continue
        line, param, radius = _center_line(prim)
        if radius > hand.capture_radius:
            continue
        others = [q for q in spec.primitives if q is not prim]
        clear = np.full(len(line), np.inf)
        for q in others:
            clear = np.minimum(clear, q.sdf(line))
        ok = clear - radius >= gap
        if rendering is not None:
            mine = rendering.point_label == k
            coord = _coordinate(prim, world_pts[mine])
        for j, (a, b) in enumerate(_runs(ok)):
            seg = line[a:b]
            if len(seg) < 2 or np.sum(np.linalg.norm(np.diff(seg, axis=0), axis=1)) < min_length:
                continue
            visible = -1
            if rendering is not None:
                visible = int(np.count_nonzero((coord >= param[a]) & (coord <= param[b - 1])))
                if visible < min_visible:
                    continue
            out.append(TruthAffordance(f"{prim.name}#{j}", prim.name, prim.kind, float(radius),
                                       cam.to_camera(seg), visible))
    return out


def truth_shell(t: TruthAffordance, hand: HandParams | None = None,
                margin: float = 1e-6) -> CylindricalShell:
    """Straight shell along a cylinder affordance, for self-consistency audits."""
    hand = hand or HandParams()
    a, b = t.polyline[0], t.polyline[-1]
    axis = (b - a) / np.linalg.norm(b - a)
    return CylindricalShell(0.5 * (a + b), axis, t.radius + margin,
                            hand.finger_thickness - 2 * margin,
                            float(np.linalg.norm(b - a)), 0, 0)
