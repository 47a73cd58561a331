"""
Per-peer replicated state machine.

A `Peer` owns its view of the shared session: the streamed spatial mesh,
annotations, shared objects, environment cutouts and replicas. Local user
actions produce encoded frames in `outbox`; frames from the other peer go
through `receive_datagram` / `receive_stream`. Every outgoing message is
applied locally in its decoded (f32-quantised) form, so both peers fold
bit-identical inputs.

The AR peer is the authority for shared objects (even ids for AR spawns,
odd for VR spawns).
"""

from __future__ import annotations

import enum
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import (
    GrabConflict,
    NexusError,
    ProtocolError,
    RoleViolation,
    StaleSeq,
    UnknownCutout,
    UnknownObject,
)
from .geometry import SimTransform
from .mesh import Selection, TriangleMesh, build_frustum, raycast, select_triangles
from .objfile import parse_obj
from .protocol import (
    CutoutActivate,
    CutoutCreate,
    CutoutDeactivate,
    CutoutTransform,
    HeadPose,
    MeshChunkRemove,
    MeshChunkUpsert,
    Message,
    ObjectDespawn,
    ObjectGrab,
    ObjectProperties,
    ObjectPropertyEdit,
    ObjectRelease,
    ObjectSpawn,
    ObjectTransform,
    PointerDatagram,
    Primitive,
    ReplicaMeshAnnounce,
    StreamDecoder,
    decode_pointer,
    decode_reliable,
    encode_pointer,
    encode_reliable,
)

AR_PEER_ID = 0
VR_PEER_ID = 1
COUNT_WINDOW = 32
SEQ_WINDOW = 1024
FLOATING_POINT_DISTANCE = 0.3

UNRELIABLE = "unreliable"
RELIABLE = "reliable"


class Role(str, enum.Enum):
    AR = "AR"
    VR = "VR"


class CountChange(enum.Enum):
    NOOP = "noop"
    NEW = "new"
    DELETE = "delete"


def count_delta(old: int, new: int) -> int:
    """Signed difference of two annotation-count bytes, in [-128, 127]."""
    return ((new - old + 128) % 256) - 128


def classify_count_change(old_count: int, new_count: int, old_flag: int, new_flag: int) -> CountChange:
    delta = count_delta(old_count, new_count)
    if abs(delta) > COUNT_WINDOW:
        return CountChange.NOOP
    if delta > 0:
        return CountChange.NEW if new_flag else CountChange.NOOP
    if delta == 0:
        return CountChange.NEW if new_flag and not old_flag else CountChange.NOOP
    return CountChange.NEW if new_flag else CountChange.DELETE


def seq_is_newer(last: int, new: int) -> bool:
    diff = (new - last) % 65536
    if diff == 0:
        return False
    if diff >= 65536 - SEQ_WINDOW:
        return False
    return True


@dataclass
class Annotation:
    owner: int
    ordinal: int
    attachment: str  # "floating" | "mesh" | "cutout"
    cutout_id: int = 0
    points: list[tuple[float, float, float]] = field(default_factory=list)
    mesh_versions: list[int] = field(default_factory=list)


@dataclass
class SharedObject:
    object_id: int
    transform: SimTransform
    properties: ObjectProperties
    primitive: Primitive | None = None
    replica_id: int | None = None
    object_seq: int = 0
    grabbed_by: int | None = None


@dataclass
class Cutout:
    cutout_id: int
    apex: tuple[float, float, float]
    points: tuple
    source_frame: SimTransform
    copy_frame: SimTransform
    active: bool = False
    selection: Selection | None = None
    _copy_cache: tuple | None = field(default=None, repr=False)

    def copy_mesh(self) -> TriangleMesh | None:
        """Selected triangles placed at the copy frame."""
        if self.selection is None:
            return None
        if self._copy_cache is None or self._copy_cache[0] != self.copy_frame:
            to_copy = self.copy_frame.compose(self.source_frame.inverse())
            self._copy_cache = (self.copy_frame, self.selection.mesh.transformed(to_copy))
        return self._copy_cache[1]


@dataclass
class Replica:
    replica_id: int
    obj_bytes: bytes
    n_vertices: int = 0
    n_faces: int = 0


def map_cutout_to_world(cutout: Cutout, pose: SimTransform) -> SimTransform:
    """Pose relative to the copy -> pose of the original in the world."""
    return cutout.source_frame.compose(cutout.copy_frame.inverse()).compose(pose)


def map_world_to_cutout(cutout: Cutout, pose: SimTransform) -> SimTransform:
    return cutout.copy_frame.compose(cutout.source_frame.inverse()).compose(pose)


def centroid_frame(mesh: TriangleMesh) -> SimTransform:
    """Area-weighted centroid of a mesh, identity rotation."""
    areas = mesh.areas()
    centers = mesh.corners.mean(axis=1)
    c = (areas[:, None] * centers).sum(axis=0) / areas.sum()
    return SimTransform(translation=c)


@dataclass
class _StrokeTracker:
    count: int = 0  # unwrapped
    flag: int = 0


def _mesh_digest(mesh: TriangleMesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.triangles, dtype="<i8").tobytes())
    if mesh.colors is not None:
        h.update(np.ascontiguousarray(mesh.colors, dtype="<f8").tobytes())
    return h.hexdigest()


def _transform_dict(t: SimTransform | None):
    if t is None:
        return None
    return {"rotation": list(t.rotation), "translation": list(t.translation), "scale": t.scale}


class Peer:
    def __init__(self, role: Role | str, *, alignment: SimTransform | None = None,
                 camera_frame: SimTransform | None = None):
        self.role = Role(role)
        self.peer_id = AR_PEER_ID if self.role is Role.AR else VR_PEER_ID
        self.other_id = VR_PEER_ID if self.role is Role.AR else AR_PEER_ID
        self.alignment = alignment or SimTransform()
        self.camera_frame = camera_frame or SimTransform()

        self.meshes: dict[int, TriangleMesh] = {}
        self.mesh_version = 0
        self.annotations: dict[tuple[int, int], Annotation] = {}
        self.objects: dict[int, SharedObject] = {}
        self.cutouts: dict[int, Cutout] = {}
        self.replicas: dict[int, Replica] = {}
        self.head_pose: SimTransform | None = None
        self.remote_pointer: PointerDatagram | None = None
        self.last_sent_pointer: PointerDatagram | None = None
        self.counters: Counter[str] = Counter()
        self.outbox: list[tuple[str, bytes]] = []

        self._trackers: dict[int, _StrokeTracker] = {}
        self._decoder = StreamDecoder()
        self._ray = (np.zeros(3), np.array([0.0, 0.0, 1.0]))
        self._drawing = False
        self._count = 0
        self._send_seq = 0
        self._next_object_id = 2 if self.role is Role.AR else 1
        self._next_cutout_id = 1
        self._next_replica_id = 1

    @property
    def is_authority(self) -> bool:
        return self.role is Role.AR

    def take_outbox(self) -> list[tuple[str, bytes]]:
        out, self.outbox = self.outbox, []
        return out

    # -- plumbing --------------------------------------------------------

    def _emit(self, msg: Message) -> Message:
        frame = encode_reliable(msg)
        self.outbox.append((RELIABLE, frame))
        quantized, _ = decode_reliable(frame)
        return quantized

    def _send(self, msg: Message) -> Message:
        quantized = self._emit(msg)
        self._apply(quantized, self.peer_id)
        return quantized

    def _require(self, role: Role, what: str) -> None:
        if self.role is not role:
            raise RoleViolation(f"{what} is a {role.value}-only action")

    def _world_meshes(self) -> list[TriangleMesh]:
        return [self.meshes[k] for k in sorted(self.meshes)]

    def _object(self, object_id: int) -> SharedObject:
        try:
            return self.objects[object_id]
        except KeyError:
            raise UnknownObject(f"object {object_id}") from None

    def _cutout(self, cutout_id: int) -> Cutout:
        try:
            return self.cutouts[cutout_id]
        except KeyError:
            raise UnknownCutout(f"cutout {cutout_id}") from None

    def active_cutout(self) -> Cutout | None:
        for cid in sorted(self.cutouts):
            if self.cutouts[cid].active:
                return self.cutouts[cid]
        return None

    def _to_world(self, pose: SimTransform, cutout_id: int | None = None) -> SimTransform:
        if cutout_id:
            return map_cutout_to_world(self._cutout(cutout_id), pose)
        return self.alignment.compose(pose)

    # -- pointer and annotations -----------------------------------------

    def pointer_move(self, origin, direction) -> None:
        o = self.alignment.apply(origin)
        d = self.alignment.apply_vector(direction)
        self._ray = (o, d / np.linalg.norm(d))
        self.send_pointer()

    def draw_start(self) -> None:
        if self._drawing:
            return
        self._count += 1
        self._drawing = True
        self.send_pointer()

    def draw_stop(self) -> None:
        if not self._drawing:
            return
        self._drawing = False
        self.send_pointer()

    def undo_annotation(self) -> None:
        if self._drawing or self._count == 0:
            return
        self._count -= 1
        self.send_pointer()

    def send_pointer(self) -> PointerDatagram:
        """Emit the current pointer state (also used as a heartbeat)."""
        active = self.active_cutout() if self.role is Role.VR else None
        d = PointerDatagram(self.peer_id, self._send_seq, tuple(self._ray[0]), tuple(self._ray[1]),
                            int(self._drawing), self._count % 256, active.cutout_id if active else 0)
        self._send_seq = (self._send_seq + 1) % 65536
        frame = encode_pointer(d)
        self.outbox.append((UNRELIABLE, frame))
        sent = decode_pointer(frame)
        self.last_sent_pointer = sent
        self._apply_pointer(sent)
        return sent

    def receive_datagram(self, data: bytes) -> bool:
        try:
            d = decode_pointer(data)
        except ProtocolError:
            self.counters["bad_datagrams"] += 1
            return False
        if d.peer_id != self.other_id:
            self.counters["bad_datagrams"] += 1
            return False
        return self.ingest_pointer(d)

    def ingest_pointer(self, d: PointerDatagram) -> bool:
        """Accept a remote datagram if it is fresher than the last one."""
        last = self.remote_pointer
        if last is not None and not seq_is_newer(last.send_seq, d.send_seq):
            self.counters["stale_datagrams"] += 1
            return False
        self.remote_pointer = d
        self._apply_pointer(d)
        return True

    def _apply_pointer(self, d: PointerDatagram) -> None:
        owner = d.peer_id
        tracker = self._trackers.setdefault(owner, _StrokeTracker())
        old_byte = tracker.count % 256
        change = classify_count_change(old_byte, d.annotation_count, tracker.flag, d.drawing_flag)
        delta = count_delta(old_byte, d.annotation_count)
        if abs(delta) > COUNT_WINDOW:
            self.counters["count_resyncs"] += 1
        count = tracker.count + delta

        if change is CountChange.DELETE:
            self._prune(owner, lambda o: o > count)
        elif change is CountChange.NEW:
            self._prune(owner, lambda o: o >= count)
            point, attachment, cutout_id = self._resolve_point(d)
            self.annotations[(owner, count)] = Annotation(owner, count, attachment, cutout_id,
                                                          [point], [self.mesh_version])
        elif d.drawing_flag:
            ann = self.annotations.get((owner, count))
            if ann is not None:
                point, _, _ = self._resolve_point(d)
                if point != ann.points[-1]:
                    ann.points.append(point)
                    ann.mesh_versions.append(self.mesh_version)
        tracker.count = count
        tracker.flag = d.drawing_flag

    def _prune(self, owner: int, doomed) -> None:
        for key in [k for k in self.annotations if k[0] == owner and doomed(k[1])]:
            del self.annotations[key]

    def _resolve_point(self, d: PointerDatagram) -> tuple[tuple[float, float, float], str, int]:
        origin = np.array(d.ray_origin)
        direction = np.array(d.ray_direction)
        if d.active_cutout_id:
            cut = self.cutouts.get(d.active_cutout_id)
            if cut is not None and cut.active:
                back = cut.source_frame.compose(cut.copy_frame.inverse())
                copy = cut.copy_mesh()
                hit = raycast([copy], origin, direction) if copy is not None else None
                if hit is not None:
                    return _tuple3(back.apply(hit.point)), "cutout", cut.cutout_id
                return _tuple3(back.apply(origin + FLOATING_POINT_DISTANCE * direction)), "floating", 0
        hit = raycast(self._world_meshes(), origin, direction)
        if hit is not None:
            return hit.point, "mesh", 0
        return _tuple3(origin + FLOATING_POINT_DISTANCE * direction), "floating", 0

    def display_class(self, annotation: Annotation) -> str:
        return "own" if annotation.owner == self.peer_id else "other"

    # -- mesh streaming --------------------------------------------------

    def upsert_mesh(self, mesh: TriangleMesh, chunk_id: int | None = None) -> None:
        """Stream a spatial-mesh chunk given in this peer's tracking space."""
        self._require(Role.AR, "mesh streaming")
        self._send(MeshChunkUpsert.from_mesh(mesh.transformed(self.alignment), chunk_id))

    def remove_mesh(self, chunk_id: int) -> None:
        self._require(Role.AR, "mesh streaming")
        self._send(MeshChunkRemove(chunk_id))

    # -- shared objects --------------------------------------------------

    def spawn_object(self, pose: SimTransform, properties: ObjectProperties | None = None, *,
                     primitive: Primitive | None = Primitive.CUBE, replica_id: int | None = None,
                     cutout_id: int | None = None) -> int:
        oid = self._next_object_id
        self._next_object_id += 2
        if replica_id is not None:
            primitive = None
        self._send(ObjectSpawn(oid, self._to_world(pose, cutout_id), properties or ObjectProperties(),
                               primitive, replica_id))
        return oid

    def move_object(self, object_id: int, pose: SimTransform, cutout_id: int | None = None) -> None:
        """Move an object; with `cutout_id` the pose is relative to that cutout's copy."""
        obj = self._object(object_id)
        if obj.grabbed_by not in (None, self.peer_id):
            raise GrabConflict(f"object {object_id} is held by peer {obj.grabbed_by}")
        self._send(ObjectTransform(object_id, obj.object_seq + 1, self._to_world(pose, cutout_id)))

    def edit_object(self, object_id: int, properties: ObjectProperties) -> None:
        obj = self._object(object_id)
        if obj.grabbed_by not in (None, self.peer_id):
            raise GrabConflict(f"object {object_id} is held by peer {obj.grabbed_by}")
        self._send(ObjectPropertyEdit(object_id, obj.object_seq + 1, properties))

    def grab(self, object_id: int) -> None:
        obj = self._object(object_id)
        if obj.grabbed_by not in (None, self.peer_id):
            raise GrabConflict(f"object {object_id} is held by peer {obj.grabbed_by}")
        self._send(ObjectGrab(object_id, self.peer_id))

    def release(self, object_id: int) -> None:
        if self._object(object_id).grabbed_by == self.peer_id:
            self._send(ObjectRelease(object_id, self.peer_id))

    def despawn(self, object_id: int) -> None:
        self._object(object_id)
        self._send(ObjectDespawn(object_id))

    def copy_pose(self, object_id: int, cutout_id: int) -> SimTransform:
        """Derived pose of an object's copy inside a cutout."""
        return map_world_to_cutout(self._cutout(cutout_id), self._object(object_id).transform)

    def apply_object_update(self, msg: ObjectTransform | ObjectPropertyEdit, origin: int) -> None:
        """Last-writer-wins on object_seq, gated by the grab lock.

        Raises UnknownObject, StaleSeq or GrabConflict without touching state.
        """
        obj = self._object(msg.object_id)
        if origin == self.peer_id or self.is_authority:
            if obj.grabbed_by is not None and obj.grabbed_by != origin:
                raise GrabConflict(f"object {msg.object_id} is held by peer {obj.grabbed_by}")
            if msg.object_seq <= obj.object_seq:
                raise StaleSeq(f"seq {msg.object_seq} <= {obj.object_seq}")
        elif msg.object_seq < obj.object_seq:
            raise StaleSeq(f"seq {msg.object_seq} < {obj.object_seq}")
        if isinstance(msg, ObjectTransform):
            obj.transform = msg.transform
        else:
            obj.properties = msg.properties
        obj.object_seq = msg.object_seq

    def _apply_grab(self, msg: ObjectGrab, origin: int) -> None:
        obj = self._object(msg.object_id)
        if origin != self.peer_id and self.is_authority:
            if obj.grabbed_by not in (None, origin) or msg.peer_id != origin:
                raise GrabConflict(f"object {msg.object_id} is held by peer {obj.grabbed_by}")
        obj.grabbed_by = msg.peer_id

    def _apply_release(self, msg: ObjectRelease) -> None:
        obj = self._object(msg.object_id)
        if obj.grabbed_by == msg.peer_id:
            obj.grabbed_by = None

    def _correct(self, msg: Message) -> None:
        """Authority answer to a rejected remote object message."""
        obj = self.objects.get(getattr(msg, "object_id", -1))
        if obj is None:
            return
        self.counters["corrections"] += 1
        if isinstance(msg, ObjectGrab) and not isinstance(msg, ObjectRelease):
            if obj.grabbed_by is not None:
                self._emit(ObjectGrab(obj.object_id, obj.grabbed_by))
            return
        obj.object_seq = max(obj.object_seq, getattr(msg, "object_seq", 0))
        self._emit(ObjectTransform(obj.object_id, obj.object_seq, obj.transform))
        self._emit(ObjectPropertyEdit(obj.object_id, obj.object_seq, obj.properties))

    # -- cutouts ---------------------------------------------------------

    def create_cutout(self, apex, points) -> int:
        """Cut the world mesh with the frustum from `apex` through four hit points."""
        self._require(Role.VR, "creating cutouts")
        cid = self._next_cutout_id
        selection = select_triangles(self._world_meshes(), build_frustum(apex, points), chunk_id=cid)
        self._next_cutout_id += 1
        self._send(CutoutCreate(cid, tuple(apex), tuple(tuple(p) for p in points), centroid_frame(selection.mesh)))
        return cid

    def transform_cutout(self, cutout_id: int, copy_frame: SimTransform) -> None:
        self._require(Role.VR, "moving cutouts")
        self._cutout(cutout_id)
        self._send(CutoutTransform(cutout_id, copy_frame))

    def activate_cutout(self, cutout_id: int) -> None:
        self._require(Role.VR, "activating cutouts")
        self._cutout(cutout_id)
        self._send(CutoutActivate(cutout_id))

    def deactivate_cutout(self, cutout_id: int) -> None:
        self._require(Role.VR, "deactivating cutouts")
        self._cutout(cutout_id)
        self._send(CutoutDeactivate(cutout_id))

    def _install_cutout(self, msg: CutoutCreate) -> None:
        try:
            frustum = build_frustum(msg.apex, msg.points)
            selection = select_triangles(self._world_meshes(), frustum, chunk_id=msg.cutout_id)
        except NexusError:
            self.counters["cutout_selection_failures"] += 1
            selection = None
        self.cutouts[msg.cutout_id] = Cutout(msg.cutout_id, msg.apex, msg.points, msg.source_frame,
                                             msg.source_frame, False, selection)

    # -- avatar and replicas ---------------------------------------------

    def set_head_pose(self, pose: SimTransform) -> None:
        self._require(Role.VR, "head tracking")
        self._send(HeadPose(self.peer_id, pose))

    def avatar_pose(self) -> SimTransform | None:
        """Where the AR side draws the VR user's avatar."""
        if self.head_pose is None:
            return None
        cut = self.active_cutout()
        if cut is None:
            return SimTransform(self.head_pose.rotation, self.camera_frame.translation, 1.0)
        return map_cutout_to_world(cut, self.head_pose).with_scale(1.0)

    def share_replica(self, obj_bytes: bytes) -> int:
        self._require(Role.AR, "scanning replicas")
        rid = self._next_replica_id
        self._next_replica_id += 1
        self._send(ReplicaMeshAnnounce(rid, obj_bytes))
        return rid

    # -- inbound ---------------------------------------------------------

    def receive_stream(self, data: bytes) -> None:
        self._decoder.feed(data)
        try:
            messages = self._decoder.drain()
        except ProtocolError:
            # a corrupt reliable stream cannot be resynchronised
            self.counters["bad_stream"] += 1
            self._decoder = StreamDecoder()
            return
        for msg in messages:
            try:
                self._apply(msg, self.other_id)
            except (StaleSeq, GrabConflict) as exc:
                self.counters[type(exc).__name__] += 1
                if self.is_authority:
                    self._correct(msg)
            except (UnknownObject, UnknownCutout) as exc:
                self.counters[type(exc).__name__] += 1

    def _apply(self, msg: Message, origin: int) -> None:
        if isinstance(msg, MeshChunkUpsert):
            self.meshes[msg.chunk_id] = msg.to_mesh()
            self.mesh_version += 1
        elif isinstance(msg, MeshChunkRemove):
            self.meshes.pop(msg.chunk_id, None)
            self.mesh_version += 1
        elif isinstance(msg, ObjectSpawn):
            if msg.object_id not in self.objects:
                self.objects[msg.object_id] = SharedObject(msg.object_id, msg.transform, msg.properties,
                                                           msg.primitive, msg.replica_id)
        elif isinstance(msg, (ObjectTransform, ObjectPropertyEdit)):
            self.apply_object_update(msg, origin)
        elif isinstance(msg, ObjectRelease):
            self._apply_release(msg)
        elif isinstance(msg, ObjectGrab):
            self._apply_grab(msg, origin)
        elif isinstance(msg, ObjectDespawn):
            self.objects.pop(msg.object_id, None)
        elif isinstance(msg, CutoutCreate):
            self._install_cutout(msg)
        elif isinstance(msg, CutoutTransform):
            self._cutout(msg.cutout_id).copy_frame = msg.copy_frame
        elif isinstance(msg, CutoutDeactivate):
            self._cutout(msg.cutout_id).active = False
        elif isinstance(msg, CutoutActivate):
            target = self._cutout(msg.cutout_id)
            for cut in self.cutouts.values():
                cut.active = False
            target.active = True
        elif isinstance(msg, ReplicaMeshAnnounce):
            self._install_replica(msg)
        elif isinstance(msg, HeadPose):
            if msg.peer_id == VR_PEER_ID:
                self.head_pose = msg.pose

    def _install_replica(self, msg: ReplicaMeshAnnounce) -> None:
        rep = Replica(msg.replica_id, msg.obj_bytes)
        try:
            doc = parse_obj(msg.obj_bytes)
            rep.n_vertices, rep.n_faces = len(doc.vertices), len(doc.faces)
        except NexusError:
            self.counters["bad_replicas"] += 1
        self.replicas[msg.replica_id] = rep

    # -- dumps -----------------------------------------------------------

    def annotation_set(self) -> list[tuple[int, int, str, int]]:
        return sorted((a.owner, a.ordinal, a.attachment, a.cutout_id) for a in self.annotations.values())

    def shared_state(self) -> dict:
        anns = [
            {"owner": a.owner, "ordinal": a.ordinal, "attachment": a.attachment, "cutout_id": a.cutout_id,
             "points": [list(p) for p in a.points]}
            for _, a in sorted(self.annotations.items())
        ]
        objects = {
            str(oid): {
                "kind": o.primitive.name.lower() if o.primitive is not None else f"replica:{o.replica_id}",
                "transform": _transform_dict(o.transform),
                "properties": {"gravity_enabled": o.properties.gravity_enabled,
                               "material_color": list(o.properties.material_color),
                               "uniform_scale": o.properties.uniform_scale},
                "object_seq": o.object_seq,
                "grabbed_by": o.grabbed_by,
            }
            for oid, o in sorted(self.objects.items())
        }
        cutouts = {
            str(cid): {
                "apex": list(c.apex),
                "points": [list(p) for p in c.points],
                "source_frame": _transform_dict(c.source_frame),
                "copy_frame": _transform_dict(c.copy_frame),
                "active": c.active,
                "triangles": 0 if c.selection is None else len(c.selection.sources),
            }
            for cid, c in sorted(self.cutouts.items())
        }
        replicas = {
            str(rid): {"bytes": len(r.obj_bytes), "sha256": hashlib.sha256(r.obj_bytes).hexdigest(),
                       "vertices": r.n_vertices, "faces": r.n_faces}
            for rid, r in sorted(self.replicas.items())
        }
        chunks = {
            str(k): {"vertices": len(m.vertices), "triangles": len(m.triangles), "sha256": _mesh_digest(m)}
            for k, m in sorted(self.meshes.items())
        }
        return {
            "mesh": {"version": self.mesh_version, "chunks": chunks},
            "annotations": anns,
            "objects": objects,
            "cutouts": cutouts,
            "replicas": replicas,
            "head_pose": _transform_dict(self.head_pose),
            "avatar": _transform_dict(self.avatar_pose()),
        }

    def local_state(self) -> dict:
        rp = self.remote_pointer
        return {
            "role": self.role.value,
            "peer_id": self.peer_id,
            "pointer": {"annotation_count": self._count, "drawing": self._drawing, "send_seq": self._send_seq},
            "remote_pointer": None if rp is None else {
                "peer_id": rp.peer_id, "send_seq": rp.send_seq, "ray_origin": list(rp.ray_origin),
                "ray_direction": list(rp.ray_direction), "drawing_flag": rp.drawing_flag,
                "annotation_count": rp.annotation_count, "active_cutout_id": rp.active_cutout_id,
            },
            "annotation_display": {f"{a.owner}:{a.ordinal}": self.display_class(a)
                                   for _, a in sorted(self.annotations.items())},
            "annotation_mesh_versions": {f"{a.owner}:{a.ordinal}": list(a.mesh_versions)
                                         for _, a in sorted(self.annotations.items())},
            "counters": dict(sorted(self.counters.items())),
        }

    def dump_state(self) -> dict:
        return {"shared": self.shared_state(), "local": self.local_state()}


def _tuple3(p: Iterable[float]) -> tuple[float, float, float]:
    x, y, z = (float(c) for c in p)
    return (x, y, z)
