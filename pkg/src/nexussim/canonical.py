"""Canonical JSON (sorted keys, 6-decimal floats) and tolerant state diffs."""

from __future__ import annotations

import json
import math


def _round(value):
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return round(value, 6) + 0.0
    if isinstance(value, dict):
        return {str(k): _round(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round(v) for v in value]
    return value


def canonical_json(obj) -> str:
    return json.dumps(_round(obj), sort_keys=True, indent=1) + "\n"


def diff_values(a, b, tol: float = 1e-5, path: str = "") -> list[str]:
    """Human-readable differences; floats compare within `tol`."""
    if isinstance(a, bool) or isinstance(b, bool):
        return [] if a == b else [f"{path or '.'}: {a!r} != {b!r}"]
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return [] if abs(a - b) <= tol else [f"{path or '.'}: {a!r} != {b!r}"]
    if isinstance(a, dict) and isinstance(b, dict):
        out = []
        for k in sorted(set(a) | set(b), key=str):
            if k not in a or k not in b:
                out.append(f"{path}/{k}: only in {'first' if k in a else 'second'}")
            else:
                out.extend(diff_values(a[k], b[k], tol, f"{path}/{k}"))
        return out
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return [f"{path or '.'}: length {len(a)} != {len(b)}"]
        out = []
        for i, (x, y) in enumerate(zip(a, b)):
            out.extend(diff_values(x, y, tol, f"{path}[{i}]"))
        return out
    return [] if a == b else [f"{path or '.'}: {a!r} != {b!r}"]
