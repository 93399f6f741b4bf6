"""Scene description: primitives, camera, and the plain-text scene file format.

A scene file is INI-style. ``[scene]`` and ``[camera]`` are special
sections; every other section is one primitive, named ``[<kind> <name>]``::

    [scene]
    noise = 0.0005          ; Gaussian depth sigma, meters
    seed = 1                ; render seed

    [camera]
    position = 0 -0.7 0.5   ; meters, world frame (z up)
    target = 0 0 0.05
    up = 0 0 1
    width = 640
    height = 480
    fx = 525                ; fy, cx, cy optional

    [cylinder handle]
    center = 0 0 0.1
    rotation = 90 0 0       ; extrinsic x-y-z Euler angles, degrees
    radius = 0.012
    length = 0.12

Kinds and their fields (besides ``center`` and ``rotation``):
``cylinder`` (radius, length; local axis z), ``box`` (size = dx dy dz),
``plane`` (size = sx sy; a rectangle in local xy), ``sphere`` (radius) and
``torus`` (ring_radius, tube_radius, arc = start end in degrees, measured in
local xy from +x; ends are rounded). ``label = never`` excludes a primitive
from the ground truth. All lengths are meters, all angles degrees.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import ConfigError

__all__ = [
    "Camera",
    "Primitive",
    "Cylinder",
    "Box",
    "Plane",
    "Sphere",
    "TorusArc",
    "SceneSpec",
    "load_scene",
    "parse_scene",
]


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera looking along its local +z, image y pointing down."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0, 0.0]))
    width: int = 640
    height: int = 480
    fx: float = 525.0
    fy: float = 525.0
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        for name in ("position", "target", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if self.cx is None:
            object.__setattr__(self, "cx", (self.width - 1) / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", (self.height - 1) / 2.0)
        if self.width < 1 or self.height < 1 or not (self.fx > 0 and self.fy > 0):
            raise ConfigError("camera needs positive resolution and focal lengths")
        z = self.target - self.position
        if np.linalg.norm(z) == 0:
            raise ConfigError("camera target coincides with its position")
        z = z / np.linalg.norm(z)
        y = -(self.up - (self.up @ z) * z)
        if np.linalg.norm(y) < 1e-9:
            raise ConfigError("camera up vector is parallel to the viewing direction")
        y /= np.linalg.norm(y)
        # columns are the camera axes expressed in world coordinates
        object.__setattr__(self, "rotation", np.column_stack([np.cross(y, z), y, z]))

    def to_camera(self, X):
        return (np.asarray(X, dtype=float) - self.position) @ self.rotation

    def dir_to_camera(self, v):
        return np.asarray(v, dtype=float) @ self.rotation

    def to_world(self, X):
        return np.asarray(X, dtype=float) @ self.rotation.T + self.position


def _rot(deg):
    return Rotation.from_euler("xyz", np.asarray(deg, dtype=float), degrees=True).as_matrix()


@dataclass(frozen=True, eq=False)
class Primitive:
    """Rigidly posed shape; ``rotation`` maps local to world coordinates."""

    name: str
    center: np.ndarray
    rotation: np.ndarray
    label: bool = True

    kind = "primitive"

    def local(self, X):
        return (np.asarray(X, dtype=float) - self.center) @ self.rotation

    def local_dir(self, d):
        return np.asarray(d, dtype=float) @ self.rotation

    def sdf(self, X) -> np.ndarray:
        return self._sdf(self.local(X))

    def intersect(self, o, d) -> np.ndarray:
        """Smallest positive ray parameter ``t`` with ``o + t d`` on the surface, else inf."""
        return self._intersect(self.local(o), self.local_dir(d))

    def bounding_radius(self) -> float:
        raise NotImplementedError


def _smallest_positive(*ts):
    out = np.full(np.shape(ts[0]), np.inf)
    for t in ts:
        t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
        out = np.minimum(out, t)
    return out


@dataclass(frozen=True, eq=False)
class Cylinder(Primitive):
    radius: float = 0.01
    length: float = 0.1

    kind = "cylinder"

    @property
    def axis(self):
        return self.rotation[:, 2]

    def endpoints(self):
        h = 0.5 * self.length * self.axis
        return self.center - h, self.center + h

    def _sdf(self, U):
        dr = np.hypot(U[:, 0], U[:, 1]) - self.radius
        dz = np.abs(U[:, 2]) - 0.5 * self.length
        outside = np.hypot(np.maximum(dr, 0), np.maximum(dz, 0))
        return outside + np.minimum(np.maximum(dr, dz), 0)

    def _intersect(self, o, d):
        r, h = self.radius, 0.5 * self.length
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
        c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore", divide="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            t1 = (-b - sq) / (2 * a)
            t2 = (-b + sq) / (2 * a)
            side = []
            for t in (t1, t2):
                z = o[:, 2] + t * d[:, 2]
                side.append(np.where(np.abs(z) <= h, t, np.inf))
            caps = []
            for zc in (-h, h):
                t = (zc - o[:, 2]) / d[:, 2]
                x = o[:, 0] + t * d[:, 0]
                y = o[:, 1] + t * d[:, 1]
                caps.append(np.where(x * x + y * y <= r * r, t, np.inf))
        return _smallest_positive(*side, *caps)

    def bounding_radius(self):
        return float(np.hypot(self.radius, 0.5 * self.length))


@dataclass(frozen=True, eq=False)
class Box(Primitive):
    size: np.ndarray = field(default_factory=lambda: np.full(3, 0.1))

    kind = "box"

    def _sdf(self, U):
        q = np.abs(U) - 0.5 * np.asarray(self.size)
        return (np.linalg.norm(np.maximum(q, 0), axis=1)
                + np.minimum(np.max(q, axis=1), 0))

    def _intersect(self, o, d):
        h = 0.5 * np.asarray(self.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = tmax >= np.maximum(tmin, 0)
        return np.where(hit, _smallest_positive(tmin, tmax), np.inf)

    def bounding_radius(self):
        return float(0.5 * np.linalg.norm(self.size))


@dataclass(frozen=True, eq=False)
class Plane(Primitive):
    size: np.ndarray = field(default_factory=lambda: np.ones(2))

    kind = "plane"

    def _sdf(self, U):
        hx, hy = 0.5 * np.asarray(self.size)
        qx = np.maximum(np.abs(U[:, 0]) - hx, 0)
        qy = np.maximum(np.abs(U[:, 1]) - hy, 0)
        return np.sqrt(qx * qx + qy * qy + U[:, 2] ** 2)

    def _intersect(self, o, d):
        hx, hy = 0.5 * np.asarray(self.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[:, 2] / d[:, 2]
        x = o[:, 0] + t * d[:, 0]
        y = o[:, 1] + t * d[:, 1]
        return _smallest_positive(np.where((np.abs(x) <= hx) & (np.abs(y) <= hy), t, np.inf))

    def bounding_radius(self):
        return float(0.5 * np.linalg.norm(self.size))


@dataclass(frozen=True, eq=False)
class Sphere(Primitive):
    radius: float = 0.05

    kind = "sphere"

    def _sdf(self, U):
        return np.linalg.norm(U, axis=1) - self.radius

    def _intersect(self, o, d):
        return _sphere_hits(o, d, self.radius)

    def bounding_radius(self):
        return float(self.radius)


def _sphere_hits(o, d, r):
    a = np.sum(d * d, axis=1)
    b = 2 * np.sum(o * d, axis=1)
    c = np.sum(o * o, axis=1) - r * r
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
    return _smallest_positive((-b - sq) / (2 * a), (-b + sq) / (2 * a))


@dataclass(frozen=True, eq=False)
class TorusArc(Primitive):
    """Tube of radius ``tube_radius`` around a circular arc in local xy."""

    ring_radius: float = 0.03
    tube_radius: float = 0.006
    arc: tuple = (0.0, 180.0)

    kind = "torus"

    def _arc_angles(self):
        a0, a1 = np.radians(self.arc)
        return a0, a1

    def arc_points(self, n):
        a0, a1 = self._arc_angles()
        th = np.linspace(a0, a1, n)
        P = np.column_stack([self.ring_radius * np.cos(th), self.ring_radius * np.sin(th),
                             np.zeros(n)])
        T = np.column_stack([-np.sin(th), np.cos(th), np.zeros(n)])
        return P @ self.rotation.T + self.center, T @ self.rotation.T, th

    def _sdf(self, U):
        a0, a1 = self._arc_angles()
        R, r = self.ring_radius, self.tube_radius
        phi = np.arctan2(U[:, 1], U[:, 0])
        rel = np.mod(phi - a0, 2 * np.pi)
        inside = rel <= (a1 - a0)
        d_ring = np.hypot(np.hypot(U[:, 0], U[:, 1]) - R, U[:, 2])
        ends = [np.array([R * np.cos(a), R * np.sin(a), 0.0]) for a in (a0, a1)]
        d_end = np.minimum(np.linalg.norm(U - ends[0], axis=1), np.linalg.norm(U - ends[1], axis=1))
        return np.where(inside, d_ring, d_end) - r

    def _intersect(self, o, d):
        # sphere tracing inside the bounding sphere
        dn = np.linalg.norm(d, axis=1)
        u = d / dn[:, None]
        t = np.full(len(o), np.inf)
        bound = self.bounding_radius() + 1e-6
        b = np.sum(o * u, axis=1)
        c = np.sum(o * o, axis=1) - bound * bound
        disc = b * b - c
        cand = np.flatnonzero(disc >= 0)
        if len(cand) == 0:
            return t
        sq = np.sqrt(disc[cand])
        s = np.maximum(-b[cand] - sq, 0.0)
        s_end = -b[cand] + sq
        oc, uc = o[cand], u[cand]
        # a floor on the step keeps grazing rays from stalling; a chord shorter
        # than the floor dips at most ~floor^2 / (8 r) into the tube
        floor = 1e-4 * self.tube_radius
        alive = np.ones(len(cand), dtype=bool)
        hit = np.zeros(len(cand), dtype=bool)
        prev = s.copy()
        last = np.zeros(len(cand))
        for _ in range(int(np.ceil(2 * bound / floor)) + 2):
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            dist = self._sdf(oc[idx] + s[idx, None] * uc[idx])
            done = dist < 1e-9
            hit[idx[done]] = True
            alive[idx[done]] = False
            last[idx[done]] = dist[done]
            go = idx[~done]
            prev[go] = s[go]
            s[go] += np.maximum(dist[~done], floor)
            alive[go[s[go] > s_end[go]]] = False
        # a floor step may overshoot the entry; bisect back onto the first crossing
        over = np.flatnonzero(hit & (last < 0))
        if len(over):
            lo, hi = prev[over].copy(), s[over].copy()
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                inside = self._sdf(oc[over] + mid[:, None] * uc[over]) < 1e-9
                hi = np.where(inside, mid, hi)
                lo = np.where(inside, lo, mid)
            s[over] = hi
        t[cand[hit]] = s[hit] / dn[cand[hit]]
        return t

    def bounding_radius(self):
        return float(self.ring_radius + self.tube_radius)


_KINDS = {"cylinder": Cylinder, "box": Box, "plane": Plane, "sphere": Sphere, "torus": TorusArc}


@dataclass(frozen=True, eq=False)
class SceneSpec:
    primitives: tuple
    camera: Camera = field(default_factory=Camera)
    noise: float = 0.0
    seed: int = 0
    name: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        names = [p.name for p in self.primitives]
        if len(set(names)) != len(names):
            raise ConfigError("primitive names must be unique")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    def primitive(self, name):
        for p in self.primitives:
            if p.name == name:
                return p
        raise KeyError(name)


def _vec(sec, key, n, default=None):
    if key not in sec:
        if default is None:
            raise ConfigError(f"[{sec.name}] missing '{key}'")
        return np.asarray(default, dtype=float)
    try:
        v = np.array([float(x) for x in sec[key].replace(",", " ").split()])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] '{key}': {exc}") from None
    if v.shape != (n,):
        raise ConfigError(f"[{sec.name}] '{key}' needs {n} numbers, got {len(v)}")
    return v


def _num(sec, key, default=None, cast=float):
    if key not in sec:
        if default is None:
            raise ConfigError(f"[{sec.name}] missing '{key}'")
        return default
    try:
        return cast(sec[key])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] '{key}': {exc}") from None


def _positive(sec, key, default=None):
    v = _num(sec, key, default)
    if not v > 0:
        raise ConfigError(f"[{sec.name}] '{key}' must be positive")
    return v


_FIELDS = {
    "cylinder": {"radius", "length"},
    "box": {"size"},
    "plane": {"size"},
    "sphere": {"radius"},
    "torus": {"ring_radius", "tube_radius", "arc"},
}


def _primitive(kind, name, sec):
    allowed = _FIELDS[kind] | {"center", "rotation", "label"}
    extra = set(sec.keys()) - allowed
    if extra:
        raise ConfigError(f"[{sec.name}] unknown field(s): {', '.join(sorted(extra))}")
    center = _vec(sec, "center", 3)
    R = _rot(_vec(sec, "rotation", 3, default=(0, 0, 0)))
    label = sec.get("label", "auto").strip().lower()
    if label not in ("auto", "never"):
        raise ConfigError(f"[{sec.name}] label must be 'auto' or 'never'")
    base = dict(name=name, center=center, rotation=R, label=label == "auto")
    if kind == "cylinder":
        return Cylinder(**base, radius=_positive(sec, "radius"), length=_positive(sec, "length"))
    if kind in ("box", "plane"):
        size = _vec(sec, "size", 3 if kind == "box" else 2)
        if np.any(size <= 0):
            raise ConfigError(f"[{sec.name}] 'size' must be positive")
        return _KINDS[kind](**base, size=size)
    if kind == "sphere":
        return Sphere(**base, radius=_positive(sec, "radius"))
    arc = _vec(sec, "arc", 2)
    if not (0 < arc[1] - arc[0] <= 360):
        raise ConfigError(f"[{sec.name}] 'arc' must satisfy 0 < end - start <= 360")
    tube, ring = _positive(sec, "tube_radius"), _positive(sec, "ring_radius")
    if tube >= ring:
        raise ConfigError(f"[{sec.name}] tube_radius must be below ring_radius")
    return TorusArc(**base, ring_radius=ring, tube_radius=tube, arc=(float(arc[0]), float(arc[1])))


def parse_scene(text: str, name: str = "scene") -> SceneSpec:
    """Parse scene-file text.

    Raises:
        ConfigError: malformed or incomplete description.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable scene file: {exc}") from None
    prims = []
    camera = Camera()
    noise, seed = 0.0, 0
    for sname in cp.sections():
        sec = cp[sname]
        if sname == "scene":
            noise = _num(sec, "noise", 0.0)
            seed = _num(sec, "seed", 0, int)
            name = sec.get("name", name)
            continue
        if sname == "camera":
            cam = {k: _vec(sec, k, 3) for k in ("position", "target", "up") if k in sec}
            for k in ("width", "height"):
                if k in sec:
                    cam[k] = _num(sec, k, cast=int)
            for k in ("fx", "fy", "cx", "cy"):
                if k in sec:
                    cam[k] = _num(sec, k)
            if "fx" in cam and "fy" not in cam:
                cam["fy"] = cam["fx"]
            camera = Camera(**cam)
            continue
        parts = sname.split(None, 1)
        if len(parts) != 2 or parts[0] not in _KINDS:
            raise ConfigError(f"section [{sname}] is not '<kind> <name>' with kind in "
                              f"{sorted(_KINDS)}")
        prims.append(_primitive(parts[0], parts[1].strip(), sec))
    if not prims:
        raise ConfigError("scene has no primitives")
    return SceneSpec(tuple(prims), camera, float(noise), int(seed), name)


def load_scene(path) -> SceneSpec:
    from pathlib import Path

    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scene file {p}: {exc}") from None
    return parse_scene(text, name=p.stem)
