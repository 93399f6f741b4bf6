"""File formats: PCD point clouds, JSON detection and truth documents, PLY visualization."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from importlib import resources
from pathlib import Path

import numpy as np

from .cloud import PointCloud, RangeImageLayout
from .errors import InputFormatError
from .pipeline import Detection, Variant
from .shell import CylindricalShell

__all__ = [
    "read_pcd",
    "write_pcd",
    "parse_pcd",
    "format_pcd",
    "estimate_intrinsics",
    "detection_record",
    "record_to_detection",
    "detections_document",
    "dump_json",
    "load_json",
    "load_schema",
    "write_ply",
    "file_sha256",
]

logger = logging.getLogger(__name__)

_HEADER_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT",
                "VIEWPOINT", "POINTS", "DATA")
_NUMPY_TYPES = {("F", 4): "f4", ("F", 8): "f8", ("I", 1): "i1", ("I", 2): "i2",
                ("I", 4): "i4", ("I", 8): "i8", ("U", 1): "u1", ("U", 2): "u2",
                ("U", 4): "u4", ("U", 8): "u8"}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- PCD


def estimate_intrinsics(points, pixel_index):
    """Least-squares pinhole ``(fx, fy, cx, cy)`` from points and their pixels.

    Returns ``None`` when the points do not determine both axes.
    """
    v, u = np.nonzero(pixel_index >= 0)
    P = points[pixel_index[v, u]]
    if len(P) < 2 or np.any(P[:, 2] <= 0):
        return None
    out = []
    for coord, pix in ((P[:, 0] / P[:, 2], u), (P[:, 1] / P[:, 2], v)):
        A = np.column_stack([coord, np.ones_like(coord)])
        if np.linalg.matrix_rank(A) < 2:
            return None
        (f, c), *_ = np.linalg.lstsq(A, pix.astype(float), rcond=None)
        out.append((f, c))
    (fx, cx), (fy, cy) = out
    if not (fx > 0 and fy > 0):
        return None
    return float(fx), float(fy), float(cx), float(cy)


def _header(lines):
    """Parse header lines into a dict; returns ``(fields, intrinsics, data_line_no)``."""
    fields: dict = {}
    intrinsics = None
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tok = line[1:].split()
            if tok and tok[0].lower() == "intrinsics":
                try:
                    intrinsics = tuple(float(x) for x in tok[1:5])
                except ValueError:
                    raise InputFormatError(f"malformed intrinsics comment: {line!r}", no) from None
                if len(intrinsics) != 4:
                    raise InputFormatError("intrinsics comment needs fx fy cx cy", no)
            continue
        key, *vals = line.split()
        if key not in _HEADER_KEYS:
            raise InputFormatError(f"unknown header field {key!r}", no)
        fields[key] = (vals, no)
        if key == "DATA":
            return fields, intrinsics, no
    raise InputFormatError("header has no DATA line", len(lines))


def _int_field(fields, key, default=None):
    if key not in fields:
        if default is None:
            raise InputFormatError(f"header is missing {key}")
        return default
    vals, no = fields[key]
    try:
        (v,) = vals
        v = int(v)
    except ValueError:
        raise InputFormatError(f"{key} must be a single integer", no) from None
    if v < 0:
        raise InputFormatError(f"{key} must be non-negative", no)
    return v


def _layout_fields(fields):
    if "FIELDS" not in fields:
        raise InputFormatError("header is missing FIELDS")
    names, no = fields["FIELDS"]
    for axis in "xyz":
        if axis not in names:
            raise InputFormatError(f"FIELDS lacks {axis!r}", no)
    count = [1] * len(names)
    if "COUNT" in fields:
        vals, cno = fields["COUNT"]
        try:
            count = [int(c) for c in vals]
        except ValueError:
            raise InputFormatError("COUNT entries must be integers", cno) from None
        if len(count) != len(names) or min(count) < 1:
            raise InputFormatError("COUNT must give a positive count per field", cno)
    cols, c = {}, 0
    for name, k in zip(names, count):
        cols.setdefault(name, c)
        c += k
    return names, count, cols, c


def _numpy_dtype(fields, names, count):
    try:
        sizes = [int(s) for s in fields["SIZE"][0]]
        types = fields["TYPE"][0]
    except (KeyError, ValueError):
        raise InputFormatError("binary data needs SIZE and TYPE") from None
    if len(sizes) != len(names) or len(types) != len(names):
        raise InputFormatError("SIZE and TYPE must list one entry per field", fields["SIZE"][1])
    dt = []
    for i, (name, k, t, s) in enumerate(zip(names, count, types, sizes)):
        code = _NUMPY_TYPES.get((t, s))
        if code is None:
            raise InputFormatError(f"unsupported TYPE/SIZE {t}{s}", fields["TYPE"][1])
        dt.append((f"{name}_{i}", "<" + code, (k,)) if k > 1 else (f"{name}_{i}", "<" + code))
    return np.dtype(dt)


def _ascii_rows(text, first_line, ncols, npoints):
    if not text.strip():
        rows = np.zeros((0, ncols))
    else:
        try:
            rows = np.loadtxt(io.StringIO(text), dtype=float, ndmin=2, comments=None)
        except ValueError:
            rows = None
    if rows is None or rows.shape[1] != ncols:
        for off, raw in enumerate(text.splitlines()):
            tok = raw.split()
            if not tok:
                continue
            if len(tok) != ncols:
                raise InputFormatError(f"expected {ncols} values, got {len(tok)}",
                                       first_line + off)
            try:
                [float(x) for x in tok]
            except ValueError:
                raise InputFormatError(f"non-numeric value in {raw.strip()!r}",
                                       first_line + off) from None
        raise InputFormatError("malformed point data", first_line)
    if len(rows) != npoints:
        raise InputFormatError(f"POINTS says {npoints} but {len(rows)} rows follow",
                               first_line + len(rows))
    return rows


def parse_pcd(data: bytes | str) -> PointCloud:
    """Parse PCD content (ASCII; binary also accepted) into a cloud.

    Clouds with ``HEIGHT > 1`` are organized: rows are pixels in row-major
    order and a non-finite coordinate marks an invalid pixel. Intrinsics come
    from a ``# intrinsics fx fy cx cy`` comment or, absent that, a least-squares
    fit of the pixel grid. The ``VIEWPOINT`` translation becomes the viewpoint.

    Raises:
        InputFormatError: malformed header or data (with the 1-based line number).
    """
    raw = data.encode() if isinstance(data, str) else bytes(data)
    head_end, pos, lines = None, 0, []
    while pos < len(raw):
        nl = raw.find(b"\n", pos)
        nl = len(raw) if nl < 0 else nl
        try:
            line = raw[pos:nl].decode("ascii")
        except UnicodeDecodeError:
            raise InputFormatError("header is not ASCII", len(lines) + 1) from None
        lines.append(line)
        pos = nl + 1
        if line.strip().startswith("DATA"):
            head_end = pos
            break
    if head_end is None:
        raise InputFormatError("header has no DATA line", max(len(lines), 1))
    fields, intrinsics, data_no = _header(lines)
    names, count, cols, ncols = _layout_fields(fields)
    width = _int_field(fields, "WIDTH")
    height = _int_field(fields, "HEIGHT", 1)
    npoints = _int_field(fields, "POINTS", width * height)
    if npoints != width * height:
        raise InputFormatError(f"POINTS {npoints} != WIDTH*HEIGHT {width * height}",
                               fields["POINTS"][1] if "POINTS" in fields else data_no)
    mode = fields["DATA"][0][0] if fields["DATA"][0] else ""
    if mode == "ascii":
        rows = _ascii_rows(raw[head_end:].decode("ascii", errors="replace"), data_no + 1,
                           ncols, npoints)
        xyz = rows[:, [cols["x"], cols["y"], cols["z"]]]
    elif mode == "binary":
        dt = _numpy_dtype(fields, names, count)
        body = raw[head_end:]
        if len(body) < dt.itemsize * npoints:
            raise InputFormatError(f"binary payload holds {len(body) // dt.itemsize} of "
                                   f"{npoints} points", data_no)
        rec = np.frombuffer(body, dtype=dt, count=npoints)
        xyz = np.column_stack([rec[f"{a}_{names.index(a)}"].astype(float) for a in "xyz"])
    else:
        raise InputFormatError(f"unsupported DATA mode {mode!r}", data_no)
    viewpoint = np.zeros(3)
    if "VIEWPOINT" in fields:
        vals, vno = fields["VIEWPOINT"]
        try:
            vp = [float(v) for v in vals]
        except ValueError:
            raise InputFormatError("VIEWPOINT must be numeric", vno) from None
        if len(vp) != 7:
            raise InputFormatError("VIEWPOINT needs 7 values", vno)
        viewpoint = np.array(vp[:3])
    finite = np.all(np.isfinite(xyz), axis=1)
    points = xyz[finite]
    if height <= 1:
        return PointCloud(points, None, viewpoint)
    pix = np.full(width * height, -1, dtype=np.int64)
    pix[finite] = np.arange(int(finite.sum()))
    pix = pix.reshape(height, width)
    if intrinsics is None:
        intrinsics = estimate_intrinsics(points, pix)
        if intrinsics is None:
            logger.warning("cannot determine intrinsics; reading the cloud as unorganized")
            return PointCloud(points, None, viewpoint)
    return PointCloud(points, RangeImageLayout(width, height, pix, *intrinsics), viewpoint)


def read_pcd(path) -> PointCloud:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc.strerror}") from None
    return parse_pcd(data)


def format_pcd(cloud: PointCloud) -> str:
    """ASCII PCD text; organized clouds keep their grid with ``nan`` at invalid pixels."""
    lay = cloud.organized
    if lay is not None:
        pix = lay.pixel_index.ravel()
        rows = np.full((len(pix), 3), np.nan)
        rows[pix >= 0] = cloud.points[pix[pix >= 0]]
        width, height = lay.width, lay.height
    else:
        rows = cloud.points
        width, height = len(rows), 1
    vp = " ".join(repr(float(v)) for v in cloud.viewpoint)
    head = ["# .PCD v0.7 - Point Cloud Data file format"]
    if lay is not None:
        head.append(f"# intrinsics {lay.fx!r} {lay.fy!r} {lay.cx!r} {lay.cy!r}")
    head += ["VERSION 0.7", "FIELDS x y z", "SIZE 8 8 8", "TYPE F F F", "COUNT 1 1 1",
             f"WIDTH {width}", f"HEIGHT {height}", f"VIEWPOINT {vp} 1 0 0 0",
             f"POINTS {len(rows)}", "DATA ascii"]
    buf = io.StringIO()
    buf.write("\n".join(head) + "\n")
    # repr-precision floats round-trip exactly
    np.savetxt(buf, rows, fmt="%.17g")
    return buf.getvalue()


def write_pcd(path, cloud: PointCloud):
    Path(path).write_text(format_pcd(cloud))


# ---------------------------------------------------------------- JSON


def detection_record(d: Detection) -> dict:
    s = d.shell
    return {"centroid": [float(v) for v in s.centroid], "axis": [float(v) for v in s.axis],
            "inner_radius": float(s.inner_radius), "thickness": float(s.thickness),
            "extent": float(s.extent), "support": int(s.support),
            "max_gap_points": int(s.max_gap_points), "variant": d.variant.value,
            "ordinal": int(d.ordinal), "seed_index": int(d.seed_index)}


def record_to_detection(r: dict) -> Detection:
    shell = CylindricalShell(np.array(r["centroid"], dtype=float), np.array(r["axis"], dtype=float),
                             float(r["inner_radius"]), float(r["thickness"]), float(r["extent"]),
                             int(r["support"]), int(r["max_gap_points"]))
    return Detection(shell, int(r["seed_index"]), Variant(r["variant"]), int(r["ordinal"]))


def detections_document(dets, params: dict, source: dict | None = None,
                        timing: dict | None = None) -> dict:
    doc = {"format": "shellgrasp/detections", "version": 1, "source": source or {},
           "params": params, "detections": [detection_record(d) for d in dets]}
    if timing is not None:
        doc["timing"] = {k: float(v) for k, v in sorted(timing.items())}
    return doc


def dump_json(doc, path=None) -> str:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"invalid JSON: {exc.msg}", exc.lineno) from None


def load_schema(name: str) -> dict:
    """A shipped JSON schema by name (``detections``, ``truth`` or ``report``)."""
    ref = resources.files("shellgrasp") / "schemas" / f"{name}.schema.json"
    return json.loads(ref.read_text())


# ---------------------------------------------------------------- PLY

_PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                     [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
                     [210, 245, 60], [0, 128, 128]], dtype=np.int64)


def _wireframe(shell: CylindricalShell, segments: int = 24):
    """Vertices and edges of the inner and outer rims at both shell ends plus four rails."""
    from .geometry import plane_basis

    w1, w2 = plane_basis(np.asarray(shell.axis, dtype=float))
    th = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.outer(np.cos(th), w1) + np.outer(np.sin(th), w2)
    V, E = [], []
    for r in (shell.inner_radius, shell.outer_radius):
        for s in (-0.5, 0.5):
            base = len(V) * segments
            V.append(shell.centroid + s * shell.extent * shell.axis + r * ring)
            E += [(base + i, base + (i + 1) % segments) for i in range(segments)]
    for ring_lo, ring_hi in ((0, 1), (2, 3)):
        for i in range(0, segments, segments // 4):
            E.append((ring_lo * segments + i, ring_hi * segments + i))
    return np.vstack(V), np.array(E, dtype=np.int64)


def write_ply(path, cloud: PointCloud, dets):
    """ASCII PLY with the cloud in gray, each detection's support colored and its wireframe."""
    P = cloud.points
    colors = np.full((len(P), 3), 128, dtype=np.int64)
    verts, vcols, edges, ecols = [P], [colors], [], []
    offset = len(P)
    for i, d in enumerate(dets):
        c = _PALETTE[i % len(_PALETTE)]
        if d.support_indices is not None:
            colors[d.support_indices] = c
        V, E = _wireframe(d.shell)
        verts.append(V)
        vcols.append(np.tile(c, (len(V), 1)))
        edges.append(E + offset)
        ecols.append(np.tile(c, (len(E), 1)))
        offset += len(V)
    V = np.vstack(verts)
    C = np.vstack(vcols)
    E = np.vstack(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    EC = np.vstack(ecols) if ecols else np.zeros((0, 3), dtype=np.int64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n"
                f"element vertex {len(V)}\n"
                "property double x\nproperty double y\nproperty double z\n"
                "property uchar red\nproperty uchar green\nproperty uchar blue\n"
                f"element edge {len(E)}\n"
                "property int vertex1\nproperty int vertex2\n"
                "property uchar red\nproperty uchar green\nproperty uchar blue\n"
                "end_header\n")
        np.savetxt(f, np.column_stack([V, C]), fmt="%.9g %.9g %.9g %d %d %d")
        if len(E):
            np.savetxt(f, np.column_stack([E, EC]), fmt="%d")
