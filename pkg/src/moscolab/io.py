"""Output writers: CSV, JSON, flat binary, PGM masks, SVG plots and the run manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

# Column order of the CSV files written by the CLI.
STATE_COLUMNS = ["x", "y", "value"]
STUDY_COLUMNS = ["eps", "value", "cold_value", "value_gap", "relative_gap", "hc", "ekeland",
                 "state_gap", "z_gap", "kkt_residual", "contains_limit"]
ITERATE_COLUMNS = ["iteration", "value"]


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
    return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: list[str], rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            vals = [row.get(c) for c in columns] if isinstance(row, dict) else list(row)
            w.writerow([_fmt(v) for v in vals])
    return path


def write_field_csv(path, grid, values: np.ndarray) -> Path:
    X, Y = grid.coords()
    rows = zip(X.ravel().tolist(), Y.ravel().tolist(), np.asarray(values, float).ravel().tolist())
    return write_csv(path, STATE_COLUMNS, rows)


def write_binary(path, values: np.ndarray) -> Path:
    """Row-major little-endian float64."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return path


def write_pgm(path, mask: np.ndarray) -> Path:
    """Binary PGM (P5); image row r shows nodes with x2 index ny-1-r, white = inside."""
    m = np.asarray(mask, bool)
    img = (np.flipud(m.T) * 255).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    img = np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)
    return np.flipud(img).T > 127


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def svg_loglog(path, x, series: dict[str, list[float]], title: str = "", xlabel: str = "eps") -> Path:
    """Minimal log-log line plot; non-positive values are dropped from their series."""
    W, H, m = 480, 360, 60
    x = np.asarray(x, float)
    pts = {k: [(a, b) for a, b in zip(x, v) if a > 0 and b is not None and b > 0] for k, v in series.items()}
    allx = [a for p in pts.values() for a, _ in p] or [1.0]
    ally = [b for p in pts.values() for _, b in p] or [1.0]
    lx0, lx1 = math.log10(min(allx)), math.log10(max(allx))
    ly0, ly1 = math.log10(min(ally)), math.log10(max(ally))
    lx1, ly1 = (lx1 if lx1 > lx0 else lx0 + 1), (ly1 if ly1 > ly0 else ly0 + 1)
    sx = lambda v: m + (math.log10(v) - lx0) / (lx1 - lx0) * (W - 2 * m)
    sy = lambda v: H - m - (math.log10(v) - ly0) / (ly1 - ly0) * (H - 2 * m)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
           f'<text x="{W / 2}" y="{m / 2}" text-anchor="middle" font-size="14">{title}</text>',
           f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle" font-size="12">{xlabel} (log)</text>',
           f'<text x="{m}" y="{H - m + 15}" font-size="10">{10 ** lx0:.3g}</text>',
           f'<text x="{W - m}" y="{H - m + 15}" font-size="10" text-anchor="end">{10 ** lx1:.3g}</text>',
           f'<text x="{m - 5}" y="{H - m}" font-size="10" text-anchor="end">{10 ** ly0:.3g}</text>',
           f'<text x="{m - 5}" y="{m + 10}" font-size="10" text-anchor="end">{10 ** ly1:.3g}</text>']
    for k, (name, p) in enumerate(pts.items()):
        c = _COLORS[k % len(_COLORS)]
        if p:
            coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in p)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{c}" stroke-width="2"/>')
            out.extend(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="3" fill="{c}"/>' for a, b in p)
        out.append(f'<text x="{W - m + 5}" y="{m + 15 * k}" font-size="11" fill="{c}">{name}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, command: str, config_hash: str, started: str, files: list[Path],
                   status: str = "ok", extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    inventory = [{"file": str(Path(f).relative_to(out_dir)), "sha256": sha256_file(f)} for f in sorted(files)]
    return write_json(out_dir / "manifest.json", {
        "command": command,
        "config_sha256": config_hash,
        "version": __version__,
        "started": started,
        "finished": now_iso(),
        "status": status,
        "files": inventory,
        **(extra or {}),
    })
