"""Readers and writers for XYZ molecules, whitespace point rows and ASCII PLY."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .geometry import MarkedPointSet


class DataError(ValueError):
    pass


CLOUD_SUFFIXES = (".txt", ".pts", ".xyzrows")
SUFFIXES = (".xyz", ".ply") + CLOUD_SUFFIXES


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# XYZ


def _parse_xyz_block(lines: List[str], start: int, name: str):
    """Parse one frame starting at ``lines[start]``; returns (symbols, coords, comment, next_line)."""
    try:
        n = int(lines[start].split()[0])
    except (IndexError, ValueError):
        raise DataError(f"{name}:{start + 1}: expected an atom count") from None
    if n < 1:
        raise DataError(f"{name}:{start + 1}: atom count must be positive")
    if start + 2 + n > len(lines):
        raise DataError(f"{name}: truncated frame, expected {n} atoms after line {start + 2}")
    comment = lines[start + 1].rstrip("\n")
    syms, coords = [], []
    for ln in range(start + 2, start + 2 + n):
        parts = lines[ln].split()
        if len(parts) < 4:
            raise DataError(f"{name}:{ln + 1}: expected 'symbol x y z'")
        try:
            xyz = [float(p) for p in parts[1:4]]
        except ValueError:
            raise DataError(f"{name}:{ln + 1}: bad coordinate") from None
        if not np.all(np.isfinite(xyz)):
            raise DataError(f"{name}:{ln + 1}: non-finite coordinate")
        syms.append(parts[0])
        coords.append(xyz)
    return syms, np.array(coords), comment, start + 2 + n


def _one_hot(symbols: Sequence[str], type_names: Sequence[str], name: str) -> np.ndarray:
    lookup = {s: i for i, s in enumerate(type_names)}
    out = np.zeros((len(symbols), len(type_names)))
    for a, s in enumerate(symbols):
        if s not in lookup:
            raise DataError(f"{name}: atom type {s!r} is not among {list(type_names)}")
        out[a, lookup[s]] = 1.0
    return out


def read_xyz(path, type_names: Optional[Sequence[str]] = None) -> MarkedPointSet:
    """First frame of an XYZ file; without ``type_names`` the result is untyped."""
    return read_xyz_frames(path, type_names)[0]


def read_xyz_frames(path, type_names: Optional[Sequence[str]] = None) -> List[MarkedPointSet]:
    name = str(path)
    with open(path) as fh:
        lines = fh.readlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise DataError(f"{name}: empty file")
    frames, pos = [], 0
    while pos < len(lines):
        syms, coords, _, pos = _parse_xyz_block(lines, pos, name)
        if type_names:
            frames.append(MarkedPointSet(coords, _one_hot(syms, type_names, name), tuple(type_names)))
        else:
            frames.append(MarkedPointSet(coords))
    return frames


def xyz_text(item: MarkedPointSet, comment: str = "") -> str:
    lines = [str(item.m), comment.replace("\n", " ")]
    for s, c in zip(item.symbols(), item.coords):
        lines.append(f"{s} {_fmt(c[0])} {_fmt(c[1])} {_fmt(c[2])}")
    return "\n".join(lines) + "\n"


def write_xyz(item: MarkedPointSet, path, comment: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(xyz_text(item, comment))


def write_xyz_frames(frames: Iterable[MarkedPointSet], path, times: Optional[Sequence[float]] = None) -> None:
    """Multi-frame XYZ, one frame per step, for trajectory viewers."""
    with open(path, "w") as fh:
        for k, fr in enumerate(frames):
            fh.write(xyz_text(fr, f"step={k}" + (f" t={_fmt(times[k])}" if times is not None else "")))


# ---------------------------------------------------------------------------
# clouds


def read_cloud_rows(path) -> MarkedPointSet:
    """One point per line, three whitespace-separated numbers; '#' starts a comment."""
    name = str(path)
    pts = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].split()
            if not body:
                continue
            if len(body) != 3:
                raise DataError(f"{name}:{ln}: expected 3 numbers, got {len(body)}")
            try:
                pts.append([float(v) for v in body])
            except ValueError:
                raise DataError(f"{name}:{ln}: bad number") from None
    if not pts:
        raise DataError(f"{name}: no points")
    arr = np.array(pts)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: non-finite coordinate")
    return MarkedPointSet(arr)


def write_cloud_rows(item: MarkedPointSet, path) -> None:
    with open(path, "w") as fh:
        for c in item.coords:
            fh.write(f"{_fmt(c[0])} {_fmt(c[1])} {_fmt(c[2])}\n")


def read_ply(path) -> MarkedPointSet:
    """ASCII PLY vertices (x, y, z must be the first three vertex properties)."""
    name = str(path)
    with open(path) as fh:
        lines = fh.readlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{name}:1: missing 'ply' magic")
    n_vert, end, fmt_ok = None, None, False
    for ln, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["format", "ascii"]:
            fmt_ok = True
        elif parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts == ["end_header"]:
            end = ln
            break
    if not fmt_ok:
        raise DataError(f"{name}: only ascii PLY is supported")
    if n_vert is None or end is None:
        raise DataError(f"{name}: malformed header")
    if end + 1 + n_vert > len(lines):
        raise DataError(f"{name}: expected {n_vert} vertices")
    pts = []
    for ln in range(end + 1, end + 1 + n_vert):
        try:
            pts.append([float(v) for v in lines[ln].split()[:3]])
        except ValueError:
            raise DataError(f"{name}:{ln + 1}: bad vertex") from None
        if len(pts[-1]) != 3:
            raise DataError(f"{name}:{ln + 1}: vertex needs 3 coordinates")
    return MarkedPointSet(np.array(pts))


def write_ply(item: MarkedPointSet, path) -> None:
    head = ["ply", "format ascii 1.0", f"element vertex {item.m}",
            "property double x", "property double y", "property double z", "end_header"]
    with open(path, "w") as fh:
        fh.write("\n".join(head) + "\n")
        for c in item.coords:
            fh.write(f"{_fmt(c[0])} {_fmt(c[1])} {_fmt(c[2])}\n")


# ---------------------------------------------------------------------------
# directories


def read_item(path, type_names: Optional[Sequence[str]] = None) -> MarkedPointSet:
    suffix = Path(path).suffix.lower()
    if suffix == ".xyz":
        return read_xyz(path, type_names)
    if suffix == ".ply":
        return read_ply(path)
    if suffix in CLOUD_SUFFIXES:
        return read_cloud_rows(path)
    raise DataError(f"{path}: unknown file type {suffix!r}")


def list_items(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in SUFFIXES)
    if not files:
        raise DataError(f"{directory}: no .xyz, .ply or point-row files")
    return files


def read_dataset(directory, type_names: Optional[Sequence[str]] = None) -> List[MarkedPointSet]:
    """Every supported file in ``directory``, in sorted file-name order."""
    return [read_item(p, type_names) for p in list_items(directory)]


def write_item(item: MarkedPointSet, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".xyz":
        write_xyz(item, path)
    elif suffix == ".ply":
        write_ply(item, path)
    else:
        write_cloud_rows(item, path)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
