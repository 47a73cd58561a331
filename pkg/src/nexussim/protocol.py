"""
Byte layouts for the two channels.

Unreliable (pointer) frames are a fixed 32 bytes. Reliable frames are
``[len u32][version u8][tag u8][payload]`` where ``len`` counts the bytes
after the length field. All integers and floats are little-endian; reals
are IEEE-754 f32. PROTOCOL.md at the repository root has the full tables.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, fields
from functools import reduce
from operator import xor
from typing import ClassVar

import numpy as np

from .errors import (
    BadChecksum,
    BadField,
    BadLength,
    FrameTooLarge,
    LengthMismatch,
    NonUnitDirection,
    Truncated,
    UnknownTag,
    UnsupportedVersion,
)
from .geometry import SimTransform
from .mesh import TriangleMesh

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024

# ---------------------------------------------------------------------------
# Unreliable channel

_POINTER = struct.Struct("<BH3f3fBBH")
POINTER_FRAME_SIZE = _POINTER.size + 1  # trailing XOR checksum
DIRECTION_KEEP_TOL = 1e-6
DIRECTION_RENORM_TOL = 1e-3


def f32(x: float) -> float:
    return float(np.float32(x))


def _f32_vec(v) -> tuple[float, float, float]:
    a, b, c = (f32(x) for x in v)
    return (a, b, c)


@dataclass(frozen=True)
class PointerDatagram:
    peer_id: int = 0
    send_seq: int = 0
    ray_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ray_direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    drawing_flag: int = 0
    annotation_count: int = 0
    active_cutout_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ray_origin", tuple(float(c) for c in self.ray_origin))
        object.__setattr__(self, "ray_direction", tuple(float(c) for c in self.ray_direction))

    def quantized(self) -> PointerDatagram:
        return decode_pointer(encode_pointer(self))


def encode_pointer(d: PointerDatagram) -> bytes:
    if d.drawing_flag not in (0, 1):
        raise ValueError("drawing_flag must be 0 or 1")
    try:
        body = _POINTER.pack(d.peer_id, d.send_seq, *d.ray_origin, *d.ray_direction,
                             d.drawing_flag, d.annotation_count, d.active_cutout_id)
    except struct.error as exc:
        raise ValueError(f"pointer field out of range: {exc}") from None
    return body + bytes([reduce(xor, body, 0)])


def decode_pointer(data: bytes) -> PointerDatagram:
    if len(data) != POINTER_FRAME_SIZE:
        raise BadLength(f"pointer frame is {len(data)} bytes, expected {POINTER_FRAME_SIZE}")
    body = bytes(data[:-1])
    if reduce(xor, body, 0) != data[-1]:
        raise BadChecksum("pointer frame checksum mismatch")
    peer, seq, ox, oy, oz, dx, dy, dz, flag, count, cutout = _POINTER.unpack(body)
    if flag not in (0, 1):
        raise BadField(f"drawing flag {flag}")
    if not all(math.isfinite(c) for c in (ox, oy, oz, dx, dy, dz)):
        raise BadField("non-finite ray")
    norm = math.sqrt(dx * dx + dy * dy + dz * dz)
    if abs(norm - 1.0) > DIRECTION_RENORM_TOL:
        raise NonUnitDirection(f"ray direction norm {norm}")
    if abs(norm - 1.0) > DIRECTION_KEEP_TOL:
        dx, dy, dz = dx / norm, dy / norm, dz / norm
    return PointerDatagram(peer, seq, (ox, oy, oz), (dx, dy, dz), flag, count, cutout)


# ---------------------------------------------------------------------------
# Reliable channel

_HEADER = struct.Struct("<IBB")
_TRANSFORM = struct.Struct("<4f3ff")
_PROPS = struct.Struct("<B3ff")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_VEC = struct.Struct("<3f")


class Primitive(enum.IntEnum):
    CUBE = 0
    SPHERE = 1
    CYLINDER = 2
    CAPSULE = 3
    PLANE = 4
    PIN = 5
    BALL = 6


@dataclass(frozen=True)
class ObjectProperties:
    gravity_enabled: bool = False
    material_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    uniform_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "gravity_enabled", bool(self.gravity_enabled))
        object.__setattr__(self, "material_color", tuple(float(c) for c in self.material_color))
        object.__setattr__(self, "uniform_scale", float(self.uniform_scale))


class _Reader:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0

    def take(self, st: struct.Struct) -> tuple:
        if self.pos + st.size > len(self.data):
            raise LengthMismatch("payload shorter than its fields")
        out = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LengthMismatch("payload shorter than its fields")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def done(self) -> None:
        if self.pos != len(self.data):
            raise LengthMismatch(f"{len(self.data) - self.pos} trailing payload bytes")


def _pack_transform(t: SimTransform) -> bytes:
    q = t.rotation
    norm = math.sqrt(sum(c * c for c in q))
    if abs(norm - 1.0) > 5e-7:
        q = tuple(c / norm for c in q)
    return _TRANSFORM.pack(*q, *t.translation, t.scale)


def _read_transform(r: _Reader) -> SimTransform:
    vals = r.take(_TRANSFORM)
    if not all(math.isfinite(v) for v in vals):
        raise BadField("non-finite transform")
    norm = math.sqrt(sum(v * v for v in vals[:4]))
    if abs(norm - 1.0) > 1e-6:
        raise BadField(f"rotation norm {norm}")
    if not vals[7] > 0:
        raise BadField("non-positive scale")
    return SimTransform(vals[:4], vals[4:7], vals[7])


def _quantize_transform(t: SimTransform) -> SimTransform:
    return _read_transform(_Reader(_pack_transform(t)))


def _pack_props(p: ObjectProperties) -> bytes:
    return _PROPS.pack(int(p.gravity_enabled), *p.material_color, p.uniform_scale)


def _read_props(r: _Reader) -> ObjectProperties:
    g, cr, cg, cb, s = r.take(_PROPS)
    if g not in (0, 1):
        raise BadField("gravity flag must be 0 or 1")
    if not all(math.isfinite(v) for v in (cr, cg, cb, s)):
        raise BadField("non-finite property")
    return ObjectProperties(bool(g), (cr, cg, cb), s)


def _read_vec(r: _Reader) -> tuple[float, float, float]:
    v = r.take(_VEC)
    if not all(math.isfinite(c) for c in v):
        raise BadField("non-finite vector")
    return v


def _values_equal(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        if a is None or b is None:
            return False
        return a.shape == b.shape and bool(np.array_equal(a, b))
    return a == b


class Message:
    TAG: ClassVar[int]

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(_values_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    def __hash__(self):
        return hash((type(self), self.TAG))

    def payload(self) -> bytes:
        raise NotImplementedError

    @classmethod
    def read(cls, r: _Reader) -> Message:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class MeshChunkUpsert(Message):
    """Positions travel as f32, colours as u8."""

    TAG: ClassVar[int] = 1
    chunk_id: int
    vertices: np.ndarray  # (n, 3) float64 holding f32 values
    triangles: np.ndarray  # (m, 3) int64
    colors: np.ndarray | None = None  # (n, 3) uint8

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float32).astype(np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.colors is not None:
            object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3))

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, chunk_id: int | None = None) -> MeshChunkUpsert:
        colors = None
        if mesh.colors is not None:
            colors = np.clip(np.rint(mesh.colors * 255.0), 0, 255).astype(np.uint8)
        return cls(mesh.chunk_id if chunk_id is None else chunk_id, mesh.vertices, mesh.triangles, colors)

    def to_mesh(self) -> TriangleMesh:
        colors = None if self.colors is None else self.colors.astype(float) / 255.0
        return TriangleMesh(self.vertices, self.triangles, colors, self.chunk_id)

    def payload(self) -> bytes:
        n, m = len(self.vertices), len(self.triangles)
        head = struct.pack("<IIIB", self.chunk_id, n, m, int(self.colors is not None))
        body = [head, self.vertices.astype("<f4").tobytes()]
        if self.colors is not None:
            body.append(self.colors.astype(np.uint8).tobytes())
        body.append(self.triangles.astype("<u4").tobytes())
        return b"".join(body)

    @classmethod
    def read(cls, r: _Reader) -> MeshChunkUpsert:
        chunk_id, n, m, has_color = r.take(struct.Struct("<IIIB"))
        if has_color not in (0, 1):
            raise BadField("colour flag must be 0 or 1")
        need = 12 * n + (3 * n if has_color else 0) + 12 * m
        if need != r.remaining:
            raise LengthMismatch(f"mesh payload needs {need} bytes, frame has {r.remaining}")
        verts = np.frombuffer(r.raw(12 * n), dtype="<f4").reshape(-1, 3)
        if not np.all(np.isfinite(verts)):
            raise BadField("non-finite vertex")
        colors = np.frombuffer(r.raw(3 * n), dtype=np.uint8).reshape(-1, 3) if has_color else None
        tris = np.frombuffer(r.raw(12 * m), dtype="<u4").reshape(-1, 3).astype(np.int64)
        if m and tris.max() >= n:
            raise BadField("triangle index out of range")
        return cls(chunk_id, verts, tris, colors)


@dataclass(frozen=True, eq=False)
class MeshChunkRemove(Message):
    TAG: ClassVar[int] = 2
    chunk_id: int

    def payload(self) -> bytes:
        return _U32.pack(self.chunk_id)

    @classmethod
    def read(cls, r):
        return cls(*r.take(_U32))


@dataclass(frozen=True, eq=False)
class ObjectSpawn(Message):
    TAG: ClassVar[int] = 3
    object_id: int
    transform: SimTransform
    properties: ObjectProperties = ObjectProperties()
    primitive: Primitive | None = Primitive.CUBE
    replica_id: int | None = None

    def __post_init__(self):
        if (self.primitive is None) == (self.replica_id is None):
            raise ValueError("exactly one of primitive / replica_id must be set")
        if self.primitive is not None:
            object.__setattr__(self, "primitive", Primitive(self.primitive))

    def payload(self) -> bytes:
        if self.primitive is not None:
            kind = struct.pack("<BI", 0, int(self.primitive))
        else:
            kind = struct.pack("<BI", 1, self.replica_id)
        return _U32.pack(self.object_id) + kind + _pack_transform(self.transform) + _pack_props(self.properties)

    @classmethod
    def read(cls, r):
        (oid,) = r.take(_U32)
        kind, value = r.take(struct.Struct("<BI"))
        transform = _read_transform(r)
        props = _read_props(r)
        if kind == 0:
            try:
                return cls(oid, transform, props, Primitive(value), None)
            except ValueError:
                raise BadField(f"unknown primitive {value}") from None
        if kind == 1:
            return cls(oid, transform, props, None, value)
        raise BadField(f"unknown object kind {kind}")


@dataclass(frozen=True, eq=False)
class ObjectTransform(Message):
    TAG: ClassVar[int] = 4
    object_id: int
    object_seq: int
    transform: SimTransform

    def payload(self) -> bytes:
        return struct.pack("<II", self.object_id, self.object_seq) + _pack_transform(self.transform)

    @classmethod
    def read(cls, r):
        oid, seq = r.take(struct.Struct("<II"))
        return cls(oid, seq, _read_transform(r))


@dataclass(frozen=True, eq=False)
class ObjectPropertyEdit(Message):
    TAG: ClassVar[int] = 5
    object_id: int
    object_seq: int
    properties: ObjectProperties

    def payload(self) -> bytes:
        return struct.pack("<II", self.object_id, self.object_seq) + _pack_props(self.properties)

    @classmethod
    def read(cls, r):
        oid, seq = r.take(struct.Struct("<II"))
        return cls(oid, seq, _read_props(r))


@dataclass(frozen=True, eq=False)
class ObjectGrab(Message):
    TAG: ClassVar[int] = 6
    object_id: int
    peer_id: int

    def payload(self) -> bytes:
        return struct.pack("<IB", self.object_id, self.peer_id)

    @classmethod
    def read(cls, r):
        return cls(*r.take(struct.Struct("<IB")))


@dataclass(frozen=True, eq=False)
class ObjectRelease(ObjectGrab):
    TAG: ClassVar[int] = 7


@dataclass(frozen=True, eq=False)
class ObjectDespawn(Message):
    TAG: ClassVar[int] = 8
    object_id: int

    def payload(self) -> bytes:
        return _U32.pack(self.object_id)

    @classmethod
    def read(cls, r):
        return cls(*r.take(_U32))


def _read_cutout_id(r: _Reader) -> int:
    (cid,) = r.take(_U16)
    if cid == 0:
        raise BadField("cutout id 0 is reserved")
    return cid


@dataclass(frozen=True, eq=False)
class CutoutCreate(Message):
    TAG: ClassVar[int] = 9
    cutout_id: int
    apex: tuple[float, float, float]
    points: tuple[tuple[float, float, float], ...]
    source_frame: SimTransform

    def __post_init__(self):
        object.__setattr__(self, "apex", tuple(float(c) for c in self.apex))
        pts = tuple(tuple(float(c) for c in p) for p in self.points)
        if len(pts) != 4:
            raise ValueError("cutouts are defined by four points")
        object.__setattr__(self, "points", pts)

    def payload(self) -> bytes:
        out = [_U16.pack(self.cutout_id), _VEC.pack(*self.apex)]
        out += [_VEC.pack(*p) for p in self.points]
        out.append(_pack_transform(self.source_frame))
        return b"".join(out)

    @classmethod
    def read(cls, r):
        cid = _read_cutout_id(r)
        apex = _read_vec(r)
        pts = tuple(_read_vec(r) for _ in range(4))
        return cls(cid, apex, pts, _read_transform(r))


@dataclass(frozen=True, eq=False)
class CutoutTransform(Message):
    TAG: ClassVar[int] = 10
    cutout_id: int
    copy_frame: SimTransform

    def payload(self) -> bytes:
        return _U16.pack(self.cutout_id) + _pack_transform(self.copy_frame)

    @classmethod
    def read(cls, r):
        cid = _read_cutout_id(r)
        return cls(cid, _read_transform(r))


@dataclass(frozen=True, eq=False)
class CutoutActivate(Message):
    TAG: ClassVar[int] = 11
    cutout_id: int

    def payload(self) -> bytes:
        return _U16.pack(self.cutout_id)

    @classmethod
    def read(cls, r):
        return cls(_read_cutout_id(r))


@dataclass(frozen=True, eq=False)
class CutoutDeactivate(CutoutActivate):
    TAG: ClassVar[int] = 12


@dataclass(frozen=True, eq=False)
class ReplicaMeshAnnounce(Message):
    """Frame carries (replica_id, byte length); the OBJ bytes follow the frame raw."""

    TAG: ClassVar[int] = 13
    replica_id: int
    obj_bytes: bytes

    def payload(self) -> bytes:
        return struct.pack("<II", self.replica_id, len(self.obj_bytes))

    @classmethod
    def read(cls, r):
        raise NotImplementedError("announce frames are decoded by decode_reliable")


@dataclass(frozen=True, eq=False)
class HeadPose(Message):
    TAG: ClassVar[int] = 14
    peer_id: int
    pose: SimTransform

    def payload(self) -> bytes:
        return _U8.pack(self.peer_id) + _pack_transform(self.pose)

    @classmethod
    def read(cls, r):
        (pid,) = r.take(_U8)
        return cls(pid, _read_transform(r))


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TAG: cls
    for cls in (MeshChunkUpsert, MeshChunkRemove, ObjectSpawn, ObjectTransform, ObjectPropertyEdit,
                ObjectGrab, ObjectRelease, ObjectDespawn, CutoutCreate, CutoutTransform,
                CutoutActivate, CutoutDeactivate, ReplicaMeshAnnounce, HeadPose)
}


def encode_reliable(msg: Message) -> bytes:
    try:
        payload = msg.payload()
    except struct.error as exc:
        raise ValueError(f"{type(msg).__name__} field out of range: {exc}") from None
    frame = _HEADER.pack(len(payload) + 2, PROTOCOL_VERSION, msg.TAG) + payload
    if isinstance(msg, ReplicaMeshAnnounce):
        frame += msg.obj_bytes
    return frame


def decode_reliable(buf, offset: int = 0) -> tuple[Message, int]:
    """Decode one message starting at `offset`; returns (message, bytes consumed).

    Raises Truncated when `buf` does not yet hold the whole message.
    """
    avail = len(buf) - offset
    if avail < 4:
        raise Truncated("need a length prefix")
    (length,) = _U32.unpack_from(buf, offset)
    if length < 2:
        raise LengthMismatch(f"frame length {length} cannot hold a header")
    if length > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"frame length {length}")
    if avail >= 6:
        version, tag = buf[offset + 4], buf[offset + 5]
        if version != PROTOCOL_VERSION:
            raise UnsupportedVersion(f"protocol version {version}")
        if tag not in MESSAGE_TYPES:
            raise UnknownTag(f"tag {tag}")
    if avail < 4 + length:
        raise Truncated(f"need {4 + length - avail} more bytes")
    cls = MESSAGE_TYPES[buf[offset + 5]]
    reader = _Reader(buf[offset + 6:offset + 4 + length])
    consumed = 4 + length
    if cls is ReplicaMeshAnnounce:
        replica_id, size = reader.take(struct.Struct("<II"))
        reader.done()
        if size > MAX_FRAME_BYTES:
            raise FrameTooLarge(f"replica payload {size}")
        if avail < consumed + size:
            raise Truncated(f"need {consumed + size - avail} more replica bytes")
        start = offset + consumed
        return ReplicaMeshAnnounce(replica_id, bytes(buf[start:start + size])), consumed + size
    msg = cls.read(reader)
    reader.done()
    return msg, consumed


def quantize(msg: Message) -> Message:
    """The message exactly as a receiver will see it."""
    out, _ = decode_reliable(encode_reliable(msg))
    return out


class StreamDecoder:
    """Incremental decoder for a reliable byte stream (single owner)."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def poll(self) -> Message | None:
        try:
            msg, used = decode_reliable(self._buf)
        except Truncated:
            return None
        del self._buf[:used]
        return msg

    def drain(self) -> list[Message]:
        out = []
        while (msg := self.poll()) is not None:
            out.append(msg)
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def decode_stream(data: bytes) -> list[Message]:
    """Decode a complete stream of frames; trailing partial frames raise Truncated."""
    out, pos = [], 0
    while pos < len(data):
        msg, used = decode_reliable(data, pos)
        out.append(msg)
        pos += used
    return out


# ---------------------------------------------------------------------------
# JSON views (CLI and debugging)


def _to_jsonable(value):
    if isinstance(value, SimTransform):
        return {"rotation": list(value.rotation), "translation": list(value.translation), "scale": value.scale}
    if isinstance(value, ObjectProperties):
        return {"gravity_enabled": value.gravity_enabled, "material_color": list(value.material_color),
                "uniform_scale": value.uniform_scale}
    if isinstance(value, Primitive):
        return value.name.lower()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, tuple):
        return [_to_jsonable(v) for v in value]
    return value


def message_to_dict(msg: Message | PointerDatagram) -> dict:
    name = "PointerDatagram" if isinstance(msg, PointerDatagram) else type(msg).__name__
    out = {"type": name}
    for f in fields(msg):
        out[f.name] = _to_jsonable(getattr(msg, f.name))
    return out


def _transform_from(d) -> SimTransform:
    return SimTransform(tuple(d["rotation"]), tuple(d["translation"]), d.get("scale", 1.0))


_CONVERTERS = {
    "transform": _transform_from,
    "source_frame": _transform_from,
    "copy_frame": _transform_from,
    "pose": _transform_from,
    "properties": lambda d: ObjectProperties(**d),
    "primitive": lambda v: None if v is None else (Primitive[v.upper()] if isinstance(v, str) else Primitive(v)),
    "obj_bytes": bytes.fromhex,
    "colors": lambda v: None if v is None else np.asarray(v, dtype=np.uint8),
    "ray_origin": tuple,
    "ray_direction": tuple,
}


def message_from_dict(d: dict) -> Message | PointerDatagram:
    d = dict(d)
    name = d.pop("type", None)
    if name == "PointerDatagram":
        cls = PointerDatagram
    else:
        by_name = {c.__name__: c for c in MESSAGE_TYPES.values()}
        if name not in by_name:
            raise ValueError(f"unknown message type {name!r}")
        cls = by_name[name]
    kwargs = {k: _CONVERTERS[k](v) if k in _CONVERTERS else v for k, v in d.items()}
    return cls(**kwargs)
