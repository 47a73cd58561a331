"""Command-line entry point. Exit codes: 0 ok, 1 domain error, 2 usage error."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .canonical import canonical_json
from .errors import AssertionFailure, NexusError, ProtocolError
from .mesh import build_frustum, select_triangles
from .netsim import load_scenario, run
from .objfile import ColoredObjDocument, parse_obj, write_obj
from .protocol import (
    POINTER_FRAME_SIZE,
    PointerDatagram,
    decode_pointer,
    decode_stream,
    encode_pointer,
    encode_reliable,
    message_from_dict,
    message_to_dict,
)


class UsageError(Exception):
    pass


def _cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError:
        raise UsageError(f"scenario not found: {args.scenario}") from None
    scenario = scenario.with_overrides(loss=args.loss, latency=args.latency, jitter=args.jitter, seed=args.seed)
    result = run(scenario)
    if args.dump_state:
        out = Path(args.dump_state)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ar_state.json").write_text(canonical_json(result.ar.dump_state()))
        (out / "vr_state.json").write_text(canonical_json(result.vr.dump_state()))
        (out / "events.jsonl").write_text(result.log_lines())
    print(f"{scenario.name}: {len(result.log)} events, {len(scenario.assertions)} assertions, "
          f"{len(result.failures)} failed")
    result.check()
    return 0


def _parse_stage(values: list[str]) -> dict[str, str]:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise UsageError(f"--stage expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _cmd_replica_run(args) -> int:
    from .replica.pipeline import StageConfig, run_cached, run_pipeline

    try:
        cfg = StageConfig.from_overrides(_parse_stage(args.stage), voxel_size=args.voxel_mm / 1000.0,
                                         workers=args.workers)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    result = run_pipeline(args.capture_dir, cfg) if args.no_cache else run_cached(args.capture_dir, cfg)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(result.obj_bytes)
    (out.parent / "timings.json").write_text(json.dumps(result.timings, indent=1, sort_keys=True) + "\n")
    status = "cache hit" if result.cached else f"{result.timings['total']:.2f} s"
    print(f"{out}: {len(result.document.vertices)} vertices, {len(result.document.faces)} faces ({status})")
    return 0


def _cmd_proto_encode(args) -> int:
    text = sys.stdin.read() if args.message == "-" else (
        Path(args.message).read_text() if Path(args.message).is_file() else args.message)
    try:
        msg = message_from_dict(json.loads(text))
    except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
        raise UsageError(f"bad message JSON: {exc}") from None
    frame = encode_pointer(msg) if isinstance(msg, PointerDatagram) else encode_reliable(msg)
    print(frame.hex())
    return 0


def _cmd_proto_decode(args) -> int:
    try:
        data = bytes.fromhex("".join(args.hex.split()))
    except ValueError:
        raise UsageError("argument is not a hex string") from None
    if args.pointer:
        msgs = [decode_pointer(data)]
    elif args.reliable or len(data) != POINTER_FRAME_SIZE:
        msgs = decode_stream(data)
    else:
        try:
            msgs = [decode_pointer(data)]
        except ProtocolError:
            msgs = decode_stream(data)
    for msg in msgs:
        print(json.dumps(message_to_dict(msg), sort_keys=True))
    return 0


def _cmd_mesh_cutout(args) -> int:
    try:
        doc = parse_obj(Path(args.mesh).read_bytes())
    except OSError as exc:
        raise UsageError(str(exc)) from None
    if len(args.points) != 12:
        raise UsageError("--points needs 12 numbers (four x y z triples)")
    frustum = build_frustum(args.apex, np.array(args.points).reshape(4, 3))
    sel = select_triangles([doc.to_mesh()], frustum)
    Path(args.output).write_bytes(write_obj(ColoredObjDocument.from_mesh(sel.mesh)))
    print(f"{args.output}: {len(sel.sources)} of {len(doc.faces)} triangles selected")
    return 0


def _cmd_capture_synth(args) -> int:
    from .replica.capture import synth_capture

    manifest = synth_capture(args.directory, args.shape, n_frames=args.frames, seed=args.seed)
    print(f"{args.directory}: {len(manifest.frames)} frames of a synthetic {args.shape}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nexussim", description="AR/VR telepresence session simulator and tools")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario through the network simulator")
    s.add_argument("scenario", help="scenario JSON file or bundled scenario name")
    s.add_argument("--loss", type=float, help="unreliable-channel loss rate in [0, 1]")
    s.add_argument("--latency", type=float, help="mean one-way latency (ms)")
    s.add_argument("--jitter", type=float, help="latency jitter (ms)")
    s.add_argument("--seed", type=int, help="channel RNG seed")
    s.add_argument("--dump-state", metavar="DIR", help="write ar_state.json, vr_state.json, events.jsonl")
    s.set_defaults(fn=_cmd_simulate)

    r = sub.add_parser("replica", help="replica pipeline")
    rsub = r.add_subparsers(dest="replica_command", required=True)
    rr = rsub.add_parser("run", help="capture directory -> coloured OBJ")
    rr.add_argument("capture_dir")
    rr.add_argument("-o", "--output", required=True)
    rr.add_argument("--voxel-mm", type=float, default=5.0)
    rr.add_argument("--stage", action="append", metavar="KEY=VALUE", help="e.g. reconstruct=tsdf, refine=identity")
    rr.add_argument("--workers", type=int, default=1)
    rr.add_argument("--no-cache", action="store_true")
    rr.set_defaults(fn=_cmd_replica_run)

    pr = sub.add_parser("proto", help="wire-format encode/decode")
    psub = pr.add_subparsers(dest="proto_command", required=True)
    pe = psub.add_parser("encode", help="JSON message -> hex frame")
    pe.add_argument("message", help="JSON text, a JSON file, or - for stdin")
    pe.set_defaults(fn=_cmd_proto_encode)
    pd = psub.add_parser("decode", help="hex frame(s) -> JSON lines")
    pd.add_argument("hex")
    group = pd.add_mutually_exclusive_group()
    group.add_argument("--pointer", action="store_true", help="force the 32-byte pointer layout")
    group.add_argument("--reliable", action="store_true", help="force the reliable-stream layout")
    pd.set_defaults(fn=_cmd_proto_decode)

    m = sub.add_parser("mesh", help="mesh tools")
    msub = m.add_subparsers(dest="mesh_command", required=True)
    mc = msub.add_parser("cutout", help="select triangles inside a 4-point frustum")
    mc.add_argument("mesh")
    mc.add_argument("--apex", type=float, nargs=3, required=True)
    mc.add_argument("--points", type=float, nargs="+", required=True)
    mc.add_argument("-o", "--output", required=True)
    mc.set_defaults(fn=_cmd_mesh_cutout)

    c = sub.add_parser("capture", help="capture tools")
    csub = c.add_subparsers(dest="capture_command", required=True)
    cs = csub.add_parser("synth", help="write a synthetic RGBD capture")
    cs.add_argument("shape", choices=["sphere", "box"])
    cs.add_argument("directory")
    cs.add_argument("--frames", type=int, default=None, help="default: 5 fps x 15 s")
    cs.add_argument("--seed", type=int, default=0)
    cs.set_defaults(fn=_cmd_capture_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AssertionFailure as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return 1
    except NexusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
