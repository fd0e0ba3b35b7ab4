"""Image export, field re-sampling at higher resolutions, and colored-mesh
extraction (marching squares plus straight extrusion) written as binary PLY."""

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import field as field_mod

DEFAULT_ISO = 0.5
DEFAULT_DEPTH = 10.0


class EmptyStructureError(RuntimeError):
    """No part of the density field reaches the iso level."""


# ---------------------------------------------------------------- images

def export_png(structure: np.ndarray, path) -> None:
    """Write the structure as 8-bit RGBA: color channels plus alpha = density."""
    structure = np.asarray(structure, dtype=np.float64)
    if structure.ndim != 3 or structure.shape[2] != 4:
        raise ValueError(f"structure must be (h, w, 4), got {structure.shape}")
    rgba = np.empty(structure.shape[:2] + (4,), dtype=np.uint8)
    quant = np.round(np.clip(structure, 0.0, 1.0) * 255.0).astype(np.uint8)
    rgba[:, :, 0:3] = quant[:, :, 1:4]
    rgba[:, :, 3] = quant[:, :, 0]
    try:
        Image.fromarray(rgba, mode="RGBA").save(path)
    except OSError as exc:
        raise OSError(f"could not write PNG {path}: {exc}") from exc


def export_upsampled(fld: field_mod.HashField, resolution: int, factor: int, path):
    """Sample the field at factor x the base resolution and write that PNG.

    The field itself is re-evaluated on the finer grid; nothing is interpolated
    from low-resolution pixels. Returns the sampled structure.
    """
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    structure = field_mod.sample_structure(fld, resolution * factor, resolution * factor)
    export_png(structure, path)
    return structure


# ---------------------------------------------------------------- meshing

@dataclass
class ColoredMesh:
    vertices: np.ndarray  # (n, 3) float64
    colors: np.ndarray  # (n, 3) float64 in [0, 1]
    triangles: np.ndarray  # (m, 3) int32


class _MeshBuilder:
    """Accumulates 2D points (with colors) and top-face triangles, deduplicated."""

    def __init__(self):
        self.points = []
        self.colors = []
        self._ids = {}
        self.triangles = []

    def point_id(self, xy, color):
        key = (float(xy[0]), float(xy[1]))
        pid = self._ids.get(key)
        if pid is None:
            pid = len(self.points)
            self._ids[key] = pid
            self.points.append(key)
            self.colors.append(color)
        return pid

    def add_polygon(self, pts):
        # pts: list of ((x, y), color); drop consecutive duplicates, orient CCW, fan
        clean = []
        for xy, color in pts:
            if not clean or (clean[-1][0] != xy):
                clean.append((xy, color))
        if len(clean) > 1 and clean[0][0] == clean[-1][0]:
            clean.pop()
        if len(clean) < 3:
            return
        area = 0.0
        for k in range(len(clean)):
            (x0, y0), _ = clean[k]
            (x1, y1), _ = clean[(k + 1) % len(clean)]
            area += x0 * y1 - x1 * y0
        if area < 0:
            clean.reverse()
        ids = [self.point_id(xy, color) for xy, color in clean]
        for k in range(1, len(ids) - 1):
            self.triangles.append((ids[0], ids[k], ids[k + 1]))


def _cell_walk(corners, inside, iso):
    """Perimeter walk of one cell: inside corners plus iso crossings, in order.

    Returns (points, corner_slots) where each point is ((x, y), color) and
    corner_slots marks which walk entries are cell corners.
    """
    walk = []
    slots = []
    for k in range(4):
        (pos0, val0, col0) = corners[k]
        (pos1, val1, col1) = corners[(k + 1) % 4]
        if inside[k]:
            walk.append((pos0, col0))
            slots.append(True)
        if inside[k] != inside[(k + 1) % 4]:
            # canonical endpoint order keeps the crossing bitwise identical
            # when the neighboring cell computes it on the shared edge
            if pos0 <= pos1:
                a_pos, a_val, a_col, b_pos, b_val, b_col = pos0, val0, col0, pos1, val1, col1
            else:
                a_pos, a_val, a_col, b_pos, b_val, b_col = pos1, val1, col1, pos0, val0, col0
            t = (iso - a_val) / (b_val - a_val)
            xy = (a_pos[0] + t * (b_pos[0] - a_pos[0]),
                  a_pos[1] + t * (b_pos[1] - a_pos[1]))
            color = tuple(a + t * (b - a) for a, b in zip(a_col, b_col))
            walk.append((xy, color))
            slots.append(False)
    return walk, slots


def extract_mesh(structure: np.ndarray, iso: float = DEFAULT_ISO,
                 depth: float = DEFAULT_DEPTH) -> ColoredMesh:
    """Marching-squares contour of the density at the iso level, extruded to a
    watertight solid with vertex colors taken from the color channels.

    x runs along columns, y upward along rows, z through the extrusion.
    """
    structure = np.asarray(structure, dtype=np.float64)
    if structure.ndim != 3 or structure.shape[2] != 4:
        raise ValueError(f"structure must be (h, w, 4), got {structure.shape}")
    if not 0.0 < iso < 1.0:
        raise ValueError(f"iso level must lie in (0, 1), got {iso}")
    if depth <= 0:
        raise ValueError(f"extrusion depth must be positive, got {depth}")
    h, w = structure.shape[:2]
    rho = structure[:, :, 0]
    col = structure[:, :, 1:4]

    def sample(i, j):
        return ((float(j), float(h - 1 - i)), rho[i, j], tuple(col[i, j]))

    builder = _MeshBuilder()
    for i in range(h - 1):
        for j in range(w - 1):
            corners = [sample(i, j), sample(i, j + 1),
                       sample(i + 1, j + 1), sample(i + 1, j)]
            inside = [c[1] >= iso for c in corners]
            n_in = sum(inside)
            if n_in == 0:
                continue
            walk, slots = _cell_walk(corners, inside, iso)
            if n_in == 2 and inside[0] == inside[2]:
                # saddle: opposite corners; the cell-center average decides
                # whether the two lobes join into a band
                center = (corners[0][1] + corners[1][1] + corners[2][1] + corners[3][1]) / 4.0
                if center >= iso:
                    builder.add_polygon(walk)
                else:
                    m = len(walk)
                    for c in (k for k, is_corner in enumerate(slots) if is_corner):
                        builder.add_polygon([walk[(c - 1) % m], walk[c], walk[(c + 1) % m]])
            else:
                builder.add_polygon(walk)

    if not builder.triangles:
        raise EmptyStructureError(f"no region reaches the iso level {iso}")

    # edges used by exactly one top triangle bound the region; wall quads close them
    edge_count = {}
    for a, b, c in builder.triangles:
        for e in ((a, b), (b, c), (c, a)):
            edge_count[frozenset(e)] = edge_count.get(frozenset(e), 0) + 1
    boundary = []
    for a, b, c in builder.triangles:
        for e in ((a, b), (b, c), (c, a)):
            if edge_count[frozenset(e)] == 1:
                boundary.append(e)

    n2 = len(builder.points)
    pts = np.asarray(builder.points)
    cols2 = np.asarray(builder.colors)
    vertices = np.empty((2 * n2, 3))
    vertices[:n2, 0:2] = pts
    vertices[:n2, 2] = depth  # top copy
    vertices[n2:, 0:2] = pts
    vertices[n2:, 2] = 0.0  # bottom copy
    colors = np.vstack([cols2, cols2])

    tris = []
    for a, b, c in builder.triangles:
        tris.append((a, b, c))  # top, CCW seen from +z
        tris.append((c + n2, b + n2, a + n2))  # bottom, flipped
    for a, b in boundary:
        tris.append((a, b, b + n2))
        tris.append((a, b + n2, a + n2))
    return ColoredMesh(vertices=vertices, colors=np.clip(colors, 0.0, 1.0),
                       triangles=np.asarray(tris, dtype=np.int32))


def extract_mesh_from_field(fld: field_mod.HashField, resolution: int,
                            iso: float = DEFAULT_ISO, depth: float = DEFAULT_DEPTH):
    return extract_mesh(field_mod.sample_structure(fld, resolution, resolution),
                        iso=iso, depth=depth)


# ---------------------------------------------------------------- PLY I/O

_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
element face {nf}
property list uchar int vertex_indices
end_header
"""


def write_ply(mesh: ColoredMesh, path) -> None:
    """Binary little-endian PLY with float32 positions and uchar vertex colors."""
    nv = len(mesh.vertices)
    nf = len(mesh.triangles)
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= nv):
        raise ValueError("triangle index out of range")
    verts = np.ascontiguousarray(mesh.vertices, dtype="<f4")
    cols = np.round(np.clip(mesh.colors, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_PLY_HEADER.format(nv=nv, nf=nf).encode("ascii"))
        for k in range(nv):
            fh.write(verts[k].tobytes())
            fh.write(cols[k].tobytes())
        for tri in mesh.triangles:
            fh.write(struct.pack("<B3i", 3, int(tri[0]), int(tri[1]), int(tri[2])))


def read_ply(path) -> ColoredMesh:
    """Read a mesh written by write_ply (same fixed property layout)."""
    with open(path, "rb") as fh:
        data = fh.read()
    marker = b"end_header\n"
    split = data.find(marker)
    if not data.startswith(b"ply\n") or split < 0:
        raise ValueError(f"not a PLY file: {path}")
    header = data[:split].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
    body = data[split + len(marker):]
    stride = 12 + 3
    vertices = np.empty((nv, 3))
    colors = np.empty((nv, 3))
    for k in range(nv):
        chunk = body[k * stride:(k + 1) * stride]
        vertices[k] = np.frombuffer(chunk[:12], dtype="<f4")
        colors[k] = np.frombuffer(chunk[12:15], dtype=np.uint8) / 255.0
    offset = nv * stride
    triangles = np.empty((nf, 3), dtype=np.int32)
    for k in range(nf):
        chunk = body[offset + k * 13:offset + (k + 1) * 13]
        count = chunk[0]
        if count != 3:
            raise ValueError(f"face {k} has {count} vertices; only triangles supported")
        triangles[k] = np.frombuffer(chunk[1:13], dtype="<i4")
    return ColoredMesh(vertices=vertices, colors=colors, triangles=triangles)
