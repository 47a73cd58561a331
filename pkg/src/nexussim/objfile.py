"""
Wavefront OBJ with per-vertex colours (``v x y z r g b``).

Only ``v`` and ``f`` records are interpreted; other keywords and ``#``
comments are skipped. Output is LF-terminated with 6 digits after the
decimal point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError
from .mesh import TriangleMesh


@dataclass(eq=False)
class ColoredObjDocument:
    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray  # (m, 3), 0-based
    colors: np.ndarray | None = None  # (n, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh) -> ColoredObjDocument:
        return cls(mesh.vertices.copy(), mesh.triangles.copy(),
                   None if mesh.colors is None else mesh.colors.copy())

    def to_mesh(self, chunk_id: int = 0) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.faces, self.colors, chunk_id)


def _fmt(x: float) -> str:
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_obj(doc: ColoredObjDocument) -> bytes:
    if len(doc.faces) and (doc.faces.min() < 0 or doc.faces.max() >= len(doc.vertices)):
        raise ValueError("face index out of range")
    lines = []
    if doc.colors is None:
        for x, y, z in doc.vertices:
            lines.append(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}")
    else:
        for (x, y, z), (r, g, b) in zip(doc.vertices, doc.colors):
            lines.append(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)} {_fmt(r)} {_fmt(g)} {_fmt(b)}")
    for i, j, k in doc.faces + 1:
        lines.append(f"f {i} {j} {k}")
    return ("\n".join(lines) + "\n").encode("ascii") if lines else b""


def _face_index(token: str, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ParseError(f"bad face index {token!r}", lineno) from None
    if idx < 1:
        raise ParseError(f"face index {idx} is not a 1-based vertex reference", lineno)
    return idx - 1


def parse_obj(data: bytes | str) -> ColoredObjDocument:
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc}") from None
    else:
        text = data

    verts: list[tuple[float, float, float]] = []
    cols: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_lines: list[int] = []
    colored: bool | None = None

    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        key = parts[0]
        if key == "v":
            if len(parts) not in (4, 7):
                raise ParseError("vertex needs 3 coordinates and optionally 3 colour channels", lineno)
            try:
                values = [float(p) for p in parts[1:]]
            except ValueError:
                raise ParseError("non-numeric vertex field", lineno) from None
            if not all(np.isfinite(values)):
                raise ParseError("non-finite vertex field", lineno)
            has_color = len(values) == 6
            if colored is None:
                colored = has_color
            elif colored != has_color:
                raise ParseError("mixed coloured and uncoloured vertices", lineno)
            verts.append(tuple(values[:3]))
            if has_color:
                cols.append(tuple(values[3:]))
        elif key == "f":
            if len(parts) < 4:
                raise ParseError("face needs at least 3 vertices", lineno)
            idx = [_face_index(p, lineno) for p in parts[1:]]
            for a in range(1, len(idx) - 1):
                faces.append((idx[0], idx[a], idx[a + 1]))
                face_lines.append(lineno)

    n = len(verts)
    for (i, j, k), lineno in zip(faces, face_lines):
        if max(i, j, k) >= n:
            raise ParseError(f"face references vertex {max(i, j, k) + 1} of {n}", lineno)
    return ColoredObjDocument(
        np.array(verts, dtype=float).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(cols, dtype=float).reshape(-1, 3) if colored else None,
    )
