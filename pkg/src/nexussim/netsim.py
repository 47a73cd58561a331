"""
Deterministic two-peer discrete-event network harness.

Peers exchange only encoded bytes. Each direction has an unreliable
channel (pointer datagrams: may drop and reorder) and a reliable channel
(FIFO, exactly once). Time is virtual milliseconds.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import os
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .canonical import diff_values
from .errors import AssertionFailure, NexusError, ScenarioError
from .geometry import AnchorObservation, SimTransform, align_spaces, quat_from_axis_angle
from .mesh import TriangleMesh, grid_mesh, raycast
from .objfile import ColoredObjDocument, write_obj
from .protocol import ObjectProperties, Primitive
from .session import RELIABLE, UNRELIABLE, Peer, Role, map_cutout_to_world

SCENARIO_DIR = Path(__file__).with_name("scenarios")
CONVERGENCE_TOL = 1e-5


@dataclass(frozen=True)
class ChannelConfig:
    latency_mean: float = 20.0  # ms
    latency_jitter: float = 0.0  # ms
    loss_rate: float = 0.0  # unreliable channel only
    reorder_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.latency_mean < 0 or self.latency_jitter < 0 or self.latency_jitter > self.latency_mean:
            raise ScenarioError("need 0 <= latency_jitter <= latency_mean")
        if not (0.0 <= self.loss_rate <= 1.0 and 0.0 <= self.reorder_rate <= 1.0):
            raise ScenarioError("loss_rate and reorder_rate must lie in [0, 1]")


class Channel:
    """One direction of one transport."""

    def __init__(self, name: str, config: ChannelConfig, reliable: bool):
        self.name = name
        self.config = config
        self.reliable = reliable
        self.rng = random.Random(f"{config.rng_seed}:{name}")
        self.sent = 0
        self.drop_indices: set[int] = set()
        self.drop_predicate: Callable[[int, bytes], bool] | None = None
        self._last_delivery = -math.inf

    def schedule(self, now: float, frame: bytes) -> float | None:
        """Delivery time for `frame`, or None if it is dropped."""
        index = self.sent
        self.sent += 1
        cfg = self.config
        lost = self.rng.random() < cfg.loss_rate
        latency = cfg.latency_mean + self.rng.uniform(-cfg.latency_jitter, cfg.latency_jitter)
        if self.rng.random() < cfg.reorder_rate:
            latency = cfg.latency_mean + cfg.latency_jitter
        if self.reliable:
            t = max(now + latency, self._last_delivery)
            self._last_delivery = t
            return t
        if lost or index in self.drop_indices or (self.drop_predicate and self.drop_predicate(index, frame)):
            return None
        return now + latency


def inject_loss_pattern(channel: Channel, drops: Iterable[int] | Callable[[int, bytes], bool]) -> Channel:
    """Deterministic drops on an unreliable channel: frame indices or a predicate(index, frame)."""
    if channel.reliable:
        raise ScenarioError("the reliable channel never drops")
    if callable(drops):
        channel.drop_predicate = drops
    else:
        channel.drop_indices = set(int(i) for i in drops)
    return channel


# ---------------------------------------------------------------------------
# Scenario parsing


@dataclass
class Scenario:
    name: str
    seed: int = 0
    ar_to_vr: ChannelConfig = field(default_factory=ChannelConfig)
    vr_to_ar: ChannelConfig = field(default_factory=ChannelConfig)
    ar_alignment: SimTransform = field(default_factory=SimTransform)
    actions: list[dict] = field(default_factory=list)
    assertions: list[dict] = field(default_factory=list)
    heartbeat_ms: float = 100.0
    tail_ms: float = 1000.0

    def with_overrides(self, *, loss: float | None = None, latency: float | None = None,
                       jitter: float | None = None, seed: int | None = None) -> Scenario:
        out = replace(self)
        for attr in ("ar_to_vr", "vr_to_ar"):
            cfg = getattr(out, attr)
            if loss is not None:
                cfg = replace(cfg, loss_rate=loss)
            if latency is not None:
                cfg = replace(cfg, latency_mean=latency, latency_jitter=min(cfg.latency_jitter, latency))
            if jitter is not None:
                cfg = replace(cfg, latency_jitter=jitter)
            if seed is not None:
                cfg = replace(cfg, rng_seed=seed)
            setattr(out, attr, cfg)
        if seed is not None:
            out.seed = seed
        return out


def parse_pose(d) -> SimTransform:
    """{"position", "rotation" [w,x,y,z] | "axis_angle" [ax,ay,az,deg], "scale"}."""
    if not isinstance(d, dict):
        raise ScenarioError(f"pose must be an object, got {d!r}")
    try:
        if "axis_angle" in d:
            *axis, deg = d["axis_angle"]
            q = quat_from_axis_angle(axis, math.radians(deg))
        else:
            q = tuple(d.get("rotation", (1.0, 0.0, 0.0, 0.0)))
        return SimTransform(q, tuple(d.get("position", d.get("translation", (0.0, 0.0, 0.0)))),
                            d.get("scale", 1.0))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"bad pose {d!r}: {exc}") from None


def _channel(d: dict | None, seed: int, direction: str) -> ChannelConfig:
    d = dict(d or {})
    d.setdefault("rng_seed", seed)
    try:
        return ChannelConfig(**d)
    except TypeError as exc:
        raise ScenarioError(f"bad {direction} channel: {exc}") from None


def parse_scenario(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    seed = int(data.get("seed", 0))
    env_seed = os.environ.get("NEXUS_SEED")
    if env_seed:
        seed = int(env_seed)
    chans = data.get("channels", {})
    both = chans.get("both")
    sc = Scenario(
        name=str(data.get("name", "unnamed")),
        seed=seed,
        ar_to_vr=_channel(chans.get("ar_to_vr", both), seed, "ar_to_vr"),
        vr_to_ar=_channel(chans.get("vr_to_ar", both), seed + 1, "vr_to_ar"),
        heartbeat_ms=float(data.get("heartbeat_ms", 100.0)),
        tail_ms=float(data.get("tail_ms", 1000.0)),
    )
    align = data.get("ar_alignment")
    if align is not None:
        if "anchors" in align:
            try:
                obs = [AnchorObservation(a["id"], parse_pose(a["observed"]), parse_pose(a["canonical"]))
                       for a in align["anchors"]]
                sc.ar_alignment = align_spaces(obs)
            except (KeyError, ValueError, NexusError) as exc:
                raise ScenarioError(f"bad ar_alignment anchors: {exc}") from None
        else:
            sc.ar_alignment = parse_pose(align)
    actions = data.get("actions", [])
    if not isinstance(actions, list):
        raise ScenarioError("actions must be a list")
    last_t = -math.inf
    for i, a in enumerate(actions):
        if not isinstance(a, dict) or "action" not in a or "t" not in a:
            raise ScenarioError(f"action {i} needs 't' and 'action'")
        if a["action"] not in ACTIONS:
            raise ScenarioError(f"action {i}: unknown action {a['action']!r}")
        if a.get("peer", "AR") not in ("AR", "VR"):
            raise ScenarioError(f"action {i}: peer must be AR or VR")
        if a["t"] < last_t:
            raise ScenarioError(f"action {i}: actions must be sorted by t")
        last_t = a["t"]
    sc.actions = actions
    sc.assertions = list(data.get("assertions", []))
    for i, a in enumerate(sc.assertions):
        if not isinstance(a, dict) or a.get("type") not in ASSERTIONS:
            raise ScenarioError(f"assertion {i}: unknown type {a.get('type') if isinstance(a, dict) else a!r}")
    return sc


def load_scenario(path_or_name: str | os.PathLike) -> Scenario:
    """Read a scenario file; bare names fall back to the bundled scenarios."""
    path = Path(path_or_name)
    if not path.exists():
        bundled = SCENARIO_DIR / (path.name if path.suffix == ".json" else f"{path.name}.json")
        if not bundled.exists():
            raise FileNotFoundError(str(path_or_name))
        path = bundled
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return parse_scenario(data)


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class SimResult:
    scenario: Scenario
    ar: Peer
    vr: Peer
    log: list[dict]
    labels: dict[str, int]
    failures: list[tuple[str, list[str]]] = field(default_factory=list)

    def log_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.log)

    def check(self) -> None:
        if self.failures:
            message, diff = self.failures[0]
            raise AssertionFailure(message, "\n".join(diff))


class Simulation:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.peers = {"AR": Peer(Role.AR, alignment=scenario.ar_alignment), "VR": Peer(Role.VR)}
        self.channels = {
            ("AR", UNRELIABLE): Channel("AR>VR:unreliable", scenario.ar_to_vr, False),
            ("AR", RELIABLE): Channel("AR>VR:reliable", scenario.ar_to_vr, True),
            ("VR", UNRELIABLE): Channel("VR>AR:unreliable", scenario.vr_to_ar, False),
            ("VR", RELIABLE): Channel("VR>AR:reliable", scenario.vr_to_ar, True),
        }
        self.log: list[dict] = []
        self.labels: dict[str, int] = {}
        self.now = 0.0
        self._queue: list = []
        self._order = 0

    def channel(self, src: str, kind: str) -> Channel:
        return self.channels[(src, kind)]

    def _push(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self._queue, (t, self._order, kind, payload))
        self._order += 1

    def _record(self, event: str, **fields) -> None:
        self.log.append({"t": round(self.now, 6), "event": event, **fields})

    def _flush(self, name: str) -> None:
        dst = "VR" if name == "AR" else "AR"
        for kind, frame in self.peers[name].take_outbox():
            t = self.channel(name, kind).schedule(self.now, frame)
            digest = hashlib.sha256(frame).hexdigest()[:16]
            if t is None:
                self._record("drop", src=name, dst=dst, channel=kind, bytes=len(frame), digest=digest)
            else:
                self._record("send", src=name, dst=dst, channel=kind, bytes=len(frame), digest=digest)
                self._push(t, "deliver", (dst, kind, frame, digest))

    def run(self) -> SimResult:
        sc = self.scenario
        for a in sc.actions:
            self._push(float(a["t"]), "action", a)
        end = (float(sc.actions[-1]["t"]) if sc.actions else 0.0) + sc.tail_ms
        if sc.actions and sc.heartbeat_ms > 0:
            n = int(math.floor(end / sc.heartbeat_ms))
            for i in range(1, n + 1):
                for name in ("AR", "VR"):
                    self._push(i * sc.heartbeat_ms, "heartbeat", name)

        while self._queue:
            self.now, _, kind, payload = heapq.heappop(self._queue)
            if kind == "action":
                name = payload.get("peer", "AR")
                self._do_action(name, payload)
                self._flush(name)
            elif kind == "heartbeat":
                self.peers[payload].send_pointer()
                self._flush(payload)
            else:
                dst, chan, frame, digest = payload
                peer = self.peers[dst]
                if chan == UNRELIABLE:
                    peer.receive_datagram(frame)
                else:
                    peer.receive_stream(frame)
                self._record("deliver", src="VR" if dst == "AR" else "AR", dst=dst, channel=chan,
                             bytes=len(frame), digest=digest)
                self._flush(dst)

        result = SimResult(sc, self.peers["AR"], self.peers["VR"], self.log, self.labels)
        for i, spec in enumerate(sc.assertions):
            diff = check_assertion(self, spec)
            if diff:
                result.failures.append((f"assertion {i} ({spec['type']}) failed", diff))
        return result

    # -- actions ---------------------------------------------------------

    def _label(self, key: str, kind: str) -> int:
        if isinstance(key, int):
            return key
        try:
            return self.labels[f"{kind}:{key}"]
        except KeyError:
            raise ScenarioError(f"unknown {kind} label {key!r}") from None

    def _do_action(self, name: str, a: dict) -> None:
        peer = self.peers[name]
        handler = ACTIONS[a["action"]]
        try:
            handler(self, peer, a)
        except ScenarioError:
            raise
        except KeyError as exc:
            raise ScenarioError(f"action {a['action']!r} at t={a['t']} is missing {exc}") from None
        except NexusError as exc:
            self._record("action-error", peer=name, action=a["action"], error=type(exc).__name__)
            peer.counters["action_errors"] += 1
        else:
            self._record("action", peer=name, action=a["action"])


def _properties(d: dict | None) -> ObjectProperties:
    d = d or {}
    return ObjectProperties(bool(d.get("gravity_enabled", False)),
                            tuple(d.get("material_color", (1.0, 1.0, 1.0))),
                            float(d.get("uniform_scale", 1.0)))


def _mesh_from_action(a: dict) -> TriangleMesh:
    chunk_id = int(a["chunk_id"])
    if "grid" in a:
        g = a["grid"]
        su, sv = g["size"]
        nu, nv = g.get("cells", (1, 1))
        return grid_mesh(g["center"], g.get("u_axis", (1, 0, 0)), g.get("v_axis", (0, 1, 0)),
                         su, sv, nu, nv, chunk_id, g.get("color"))
    return TriangleMesh(np.array(a["vertices"], dtype=float), np.array(a["triangles"]),
                        None if a.get("colors") is None else np.array(a["colors"], dtype=float), chunk_id)


def uv_sphere(radius: float = 0.08, center=(0.0, 0.0, 0.0), rings: int = 12, segments: int = 24,
              color=(0.8, 0.3, 0.2)) -> TriangleMesh:
    """Closed latitude/longitude sphere mesh."""
    verts = [(0.0, radius, 0.0)]
    for i in range(1, rings):
        theta = math.pi * i / rings
        for j in range(segments):
            phi = 2 * math.pi * j / segments
            verts.append((radius * math.sin(theta) * math.cos(phi), radius * math.cos(theta),
                          radius * math.sin(theta) * math.sin(phi)))
    verts.append((0.0, -radius, 0.0))
    bottom = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * segments + (j % segments)

    tris = []
    for j in range(segments):
        tris.append((0, ring(1, j + 1), ring(1, j)))
        tris.append((bottom, ring(rings - 1, j), ring(rings - 1, j + 1)))
    for i in range(1, rings - 1):
        for j in range(segments):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)
            tris.extend([(a, b, c), (a, c, d)])
    v = np.array(verts) + np.asarray(center, dtype=float)
    return TriangleMesh(v, np.array(tris), np.tile(np.asarray(color, dtype=float), (len(v), 1)))


def _act_pointer_move(sim, peer, a):
    peer.pointer_move(a["origin"], a["direction"])


def _act_draw_start(sim, peer, a):
    peer.draw_start()


def _act_draw_stop(sim, peer, a):
    peer.draw_stop()


def _act_undo(sim, peer, a):
    peer.undo_annotation()


def _act_mesh_upsert(sim, peer, a):
    peer.upsert_mesh(_mesh_from_action(a))


def _act_mesh_remove(sim, peer, a):
    peer.remove_mesh(int(a["chunk_id"]))


def _act_spawn(sim, peer, a):
    replica = a.get("replica")
    primitive = Primitive[a.get("primitive", "cube").upper()]
    oid = peer.spawn_object(parse_pose(a["pose"]), _properties(a.get("properties")), primitive=primitive,
                            replica_id=None if replica is None else sim._label(replica, "replica"),
                            cutout_id=sim._label(a["cutout"], "cutout") if a.get("cutout") else None)
    if "as" in a:
        sim.labels[f"object:{a['as']}"] = oid


def _act_grab(sim, peer, a):
    peer.grab(sim._label(a["object"], "object"))


def _act_release(sim, peer, a):
    peer.release(sim._label(a["object"], "object"))


def _act_move(sim, peer, a):
    cutout = sim._label(a["cutout"], "cutout") if a.get("cutout") else None
    peer.move_object(sim._label(a["object"], "object"), parse_pose(a["pose"]), cutout)


def _act_edit(sim, peer, a):
    peer.edit_object(sim._label(a["object"], "object"), _properties(a["properties"]))


def _act_despawn(sim, peer, a):
    peer.despawn(sim._label(a["object"], "object"))


def _act_create_cutout(sim, peer, a):
    apex = np.asarray(a["apex"], dtype=float)
    if "points" in a:
        points = a["points"]
    else:
        points = []
        for d in a["directions"]:
            d = np.asarray(d, dtype=float)
            hit = raycast(peer._world_meshes(), apex, d / np.linalg.norm(d))
            if hit is None:
                raise ScenarioError(f"cutout ray {list(d)} hits no mesh")
            points.append(hit.point)
    cid = peer.create_cutout(tuple(apex), points)
    if "as" in a:
        sim.labels[f"cutout:{a['as']}"] = cid


def _act_transform_cutout(sim, peer, a):
    cid = sim._label(a["cutout"], "cutout")
    if "frame" in a:
        frame = parse_pose(a["frame"])
    else:
        src = peer._cutout(cid).source_frame
        rel = parse_pose({"position": a.get("offset", (0, 0, 0)), **{k: a[k] for k in ("rotation", "axis_angle", "scale") if k in a}})
        frame = SimTransform(rel.rotation, src.position + rel.position, rel.scale)
    peer.transform_cutout(cid, frame)


def _act_activate(sim, peer, a):
    peer.activate_cutout(sim._label(a["cutout"], "cutout"))


def _act_deactivate(sim, peer, a):
    peer.deactivate_cutout(sim._label(a["cutout"], "cutout"))


def _act_head_pose(sim, peer, a):
    peer.set_head_pose(parse_pose(a["pose"]))


def _act_scan_replica(sim, peer, a):
    if "obj" in a:
        data = a["obj"].encode("utf-8")
    else:
        s = a.get("sphere", {})
        mesh = uv_sphere(s.get("radius", 0.08), s.get("center", (0, 0, 0)), s.get("rings", 12),
                         s.get("segments", 24), s.get("color", (0.8, 0.3, 0.2)))
        data = write_obj(ColoredObjDocument.from_mesh(mesh))
    rid = peer.share_replica(data)
    if "as" in a:
        sim.labels[f"replica:{a['as']}"] = rid


ACTIONS: dict[str, Callable] = {
    "pointer-move": _act_pointer_move,
    "draw-start": _act_draw_start,
    "draw-stop": _act_draw_stop,
    "undo-annotation": _act_undo,
    "mesh-upsert": _act_mesh_upsert,
    "mesh-remove": _act_mesh_remove,
    "spawn": _act_spawn,
    "grab": _act_grab,
    "release": _act_release,
    "move-object": _act_move,
    "edit-object": _act_edit,
    "despawn": _act_despawn,
    "create-cutout": _act_create_cutout,
    "transform-cutout": _act_transform_cutout,
    "activate-cutout": _act_activate,
    "deactivate-cutout": _act_deactivate,
    "head-pose": _act_head_pose,
    "scan-replica": _act_scan_replica,
}


# ---------------------------------------------------------------------------
# Assertions (each returns a list of difference lines, empty when it holds)


def _peers_for(sim: Simulation, spec: dict) -> list[tuple[str, Peer]]:
    which = spec.get("peer", "both")
    if which == "both":
        return [("AR", sim.peers["AR"]), ("VR", sim.peers["VR"])]
    return [(which, sim.peers[which])]


def _assert_converged(sim, spec):
    return diff_values(sim.peers["AR"].shared_state(), sim.peers["VR"].shared_state(),
                       spec.get("tol", CONVERGENCE_TOL))


def _assert_annotation_count(sim, spec):
    out = []
    for name, peer in _peers_for(sim, spec):
        anns = [a for a in peer.annotations.values()
                if "owner" not in spec or a.owner == (0 if spec["owner"] == "AR" else 1)]
        if len(anns) != spec["count"]:
            out.append(f"{name}: {len(anns)} annotations, expected {spec['count']}")
        if "points" in spec:
            for ann in anns:
                if len(ann.points) != spec["points"]:
                    out.append(f"{name}: annotation {ann.owner}:{ann.ordinal} has {len(ann.points)} points, "
                               f"expected {spec['points']}")
    return out


def _assert_object_pose(sim, spec):
    out = []
    tol = spec.get("tol", CONVERGENCE_TOL)
    oid = sim._label(spec["object"], "object")
    for name, peer in _peers_for(sim, spec):
        obj = peer.objects.get(oid)
        if obj is None:
            out.append(f"{name}: object {spec['object']} missing")
            continue
        expected = parse_pose(spec["pose"])
        if spec.get("cutout"):
            expected = map_cutout_to_world(peer._cutout(sim._label(spec["cutout"], "cutout")), expected)
        if not obj.transform.is_close(expected, tol):
            out.append(f"{name}: object {spec['object']} at {obj.transform}, expected {expected}")
    return out


def _assert_object_properties(sim, spec):
    out = []
    oid = sim._label(spec["object"], "object")
    want = _properties(spec["properties"])
    for name, peer in _peers_for(sim, spec):
        obj = peer.objects.get(oid)
        got = None if obj is None else obj.properties
        if got is None or diff_values(
                [got.gravity_enabled, list(got.material_color), got.uniform_scale],
                [want.gravity_enabled, list(want.material_color), want.uniform_scale], CONVERGENCE_TOL):
            out.append(f"{name}: object {spec['object']} properties {got}, expected {want}")
    return out


def _assert_avatar_near(sim, spec):
    out = []
    for name, peer in _peers_for(sim, spec):
        pose = peer.avatar_pose()
        if pose is None:
            out.append(f"{name}: no avatar pose")
            continue
        dist = float(np.linalg.norm(pose.position - np.asarray(spec["position"], dtype=float)))
        if dist > spec.get("tol", 0.5):
            out.append(f"{name}: avatar at {list(pose.translation)}, {dist:.3f} m from {spec['position']}")
    return out


def _assert_cutout_active(sim, spec):
    out = []
    cid = sim._label(spec["cutout"], "cutout")
    for name, peer in _peers_for(sim, spec):
        cut = peer.cutouts.get(cid)
        if cut is None or cut.active != spec.get("active", True):
            out.append(f"{name}: cutout {spec['cutout']} active={None if cut is None else cut.active}")
    return out


def _assert_replica_present(sim, spec):
    out = []
    rid = sim._label(spec["replica"], "replica")
    for name, peer in _peers_for(sim, spec):
        rep = peer.replicas.get(rid)
        if rep is None or rep.n_faces == 0:
            out.append(f"{name}: replica {spec['replica']} missing or empty")
    return out


def _assert_grabbed_by(sim, spec):
    out = []
    oid = sim._label(spec["object"], "object")
    want = {"AR": 0, "VR": 1, None: None}[spec.get("holder")]
    for name, peer in _peers_for(sim, spec):
        obj = peer.objects.get(oid)
        if obj is None or obj.grabbed_by != want:
            out.append(f"{name}: object {spec['object']} held by {None if obj is None else obj.grabbed_by}")
    return out


ASSERTIONS: dict[str, Callable] = {
    "converged": _assert_converged,
    "annotation-count": _assert_annotation_count,
    "object-pose": _assert_object_pose,
    "object-properties": _assert_object_properties,
    "avatar-near": _assert_avatar_near,
    "cutout-active": _assert_cutout_active,
    "replica-present": _assert_replica_present,
    "grabbed-by": _assert_grabbed_by,
}


def check_assertion(sim: Simulation, spec: dict) -> list[str]:
    try:
        return ASSERTIONS[spec["type"]](sim, spec)
    except KeyError as exc:
        raise ScenarioError(f"assertion {spec.get('type')!r} is missing {exc}") from None


def run(scenario: Scenario, setup: Callable[[Simulation], None] | None = None) -> SimResult:
    """Run a scenario to quiescence. `setup` can tweak channels before the first event."""
    sim = Simulation(scenario)
    if setup is not None:
        setup(sim)
    return sim.run()
