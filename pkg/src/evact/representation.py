"""Adaptive fine-grained slicing of event streams, fixed-stack baselines and frame rendering.

The adaptive slicer bisects a stream by event index and keeps splitting a
node while the count images of its two halves disagree strongly, i.e. while
the *difference rate*

    R = sum(|I_left - I_right|) / (n_node / 2)

stays at or above ``delta``. Splitting stops below ``delta``, when a child
would hold fewer than ``n_min`` events, or at ``max_depth``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DegenerateSplit, FormatError, IoError, ShapeError, ValidationError
from .events import ON, EventStream, StreamSlice

RATE_BELOW_DELTA = "rate-below-delta"
BELOW_N_MIN = "below-n-min"
DEPTH_CAP = "depth-cap"

Boundaries = list[tuple[int, int]]


@dataclass(frozen=True)
class CountImage:
    counts: np.ndarray  # H x W, int64, polarities pooled
    width: int
    height: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def count_image(sl: StreamSlice, width: int | None = None, height: int | None = None) -> CountImage:
    """Per-pixel event tally of a slice, both polarities summed."""
    width = sl.parent.width if width is None else width
    height = sl.parent.height if height is None else height
    flat = sl.y.astype(np.int64) * width + sl.x
    counts = np.bincount(flat, minlength=width * height).reshape(height, width)
    return CountImage(counts, width, height)


def difference_rate(first_half: CountImage, second_half: CountImage, parent_count: int) -> float:
    """Normalised L1 distance between the count images of two halves, in [0, 2]."""
    if first_half.counts.shape != second_half.counts.shape:
        raise ShapeError(
            f"count images differ in shape: {first_half.counts.shape} vs {second_half.counts.shape}")
    if parent_count <= 0:
        raise DegenerateSplit("cannot compute a difference rate for an empty stream")
    if first_half.total + second_half.total != parent_count:
        raise ValidationError(
            f"parent_count {parent_count} != {first_half.total} + {second_half.total}")
    diff = int(np.abs(first_half.counts - second_half.counts).sum())
    return diff / (parent_count / 2)


@dataclass(frozen=True)
class AfeConfig:
    delta: float
    n_min: int
    max_depth: int = 12

    def __post_init__(self):
        if not 0 < self.delta <= 2:
            raise ValidationError(f"delta must lie in (0, 2], got {self.delta}")
        if self.n_min < 1:
            raise ValidationError(f"n_min must be >= 1, got {self.n_min}")
        if self.max_depth < 1:
            raise ValidationError(f"max_depth must be >= 1, got {self.max_depth}")


PRESETS = {
    "paf": AfeConfig(delta=0.50, n_min=100_000),
    "hardvs": AfeConfig(delta=0.40, n_min=150_000),
    "seact": AfeConfig(delta=0.40, n_min=100_000),
}


@dataclass
class AfeNode:
    start: int
    end: int
    depth: int
    rate: float | None = None
    reason: str | None = None  # set on leaves only
    children: tuple[int, int] | None = None

    @property
    def count(self) -> int:
        return self.end - self.start

    @property
    def is_leaf(self) -> bool:
        return self.children is None


@dataclass
class AfeTree:
    stream: EventStream
    config: AfeConfig
    nodes: list[AfeNode] = field(default_factory=list)  # preorder, root first

    @property
    def root(self) -> AfeNode:
        return self.nodes[0]

    @property
    def leaves(self) -> list[AfeNode]:
        # preorder with left child first visits leaves in temporal order
        return [n for n in self.nodes if n.is_leaf]

    @property
    def boundaries(self) -> Boundaries:
        return [(n.start, n.end) for n in self.leaves]

    def slice_of(self, node: AfeNode) -> StreamSlice:
        return StreamSlice(self.stream, node.start, node.end)

    def count_image(self, node: AfeNode) -> CountImage:
        return count_image(self.slice_of(node))

    def reason_tally(self) -> dict[str, int]:
        tally = {RATE_BELOW_DELTA: 0, BELOW_N_MIN: 0, DEPTH_CAP: 0}
        for leaf in self.leaves:
            tally[leaf.reason] += 1
        return tally


def _half_abs_diff(pix: np.ndarray, start: int, mid: int, end: int, npix: int) -> int:
    """sum |count_left - count_right| over pixels without materialising both images."""
    if (end - start) * 8 >= npix:
        left = np.bincount(pix[start:mid], minlength=npix)
        right = np.bincount(pix[mid:end], minlength=npix)
        return int(np.abs(left - right).sum())
    # sparse node: tally only the pixels that occur
    _, inv = np.unique(pix[start:end], return_inverse=True)
    signed = np.where(np.arange(end - start) < mid - start, 1, -1)
    return int(np.abs(np.bincount(inv, weights=signed)).sum())


def afe_slice(stream: EventStream, config: AfeConfig) -> AfeTree:
    """Adaptively bisect ``stream`` into leaves; see the module docstring."""
    if len(stream) == 0:
        raise ValidationError("cannot slice an empty stream")
    pix = stream.y.astype(np.int64) * stream.width + stream.x
    npix = stream.width * stream.height
    tree = AfeTree(stream, config)

    def visit(start: int, end: int, depth: int) -> int:
        idx = len(tree.nodes)
        node = AfeNode(start, end, depth)
        tree.nodes.append(node)
        n = end - start
        if depth >= config.max_depth:
            node.reason = DEPTH_CAP
            return idx
        if n // 2 < config.n_min:
            node.reason = BELOW_N_MIN
            return idx
        mid = start + (n + 1) // 2
        node.rate = _half_abs_diff(pix, start, mid, end, npix) / (n / 2)
        if node.rate < config.delta:
            node.reason = RATE_BELOW_DELTA
            return idx
        left = visit(start, mid, depth + 1)
        right = visit(mid, end, depth + 1)
        node.children = (left, right)
        return idx

    visit(0, len(stream), 0)
    return tree


def manifest_records(tree: AfeTree) -> list[dict]:
    t = tree.stream.t
    return [
        {
            "index": i,
            "start": leaf.start,
            "end": leaf.end,
            "t_start": int(t[leaf.start]),
            "t_end": int(t[leaf.end - 1]),
            "rate": leaf.rate,
            "depth": leaf.depth,
            "reason": leaf.reason,
        }
        for i, leaf in enumerate(tree.leaves)
    ]


def manifest_jsonl(tree: AfeTree) -> str:
    """Leaf manifest as JSON lines (one leaf per line, temporal order)."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in manifest_records(tree))


def fixed_count_slice(stream: EventStream, count_per_frame: int) -> Boundaries:
    """Consecutive windows of ``count_per_frame`` events.

    A trailing partial window survives if at least half full, otherwise it is
    merged into the preceding window.
    """
    if count_per_frame < 1:
        raise ValidationError(f"count_per_frame must be >= 1, got {count_per_frame}")
    n = len(stream)
    if n == 0:
        return []
    if n <= count_per_frame:
        return [(0, n)]
    full, rem = divmod(n, count_per_frame)
    bounds = [(k * count_per_frame, (k + 1) * count_per_frame) for k in range(full)]
    if rem:
        if 2 * rem >= count_per_frame:
            bounds.append((n - rem, n))
        else:
            bounds[-1] = (bounds[-1][0], n)
    return bounds


def fixed_duration_slice(stream: EventStream, window: int) -> Boundaries:
    """Windows ``[t0 + k*window, t0 + (k+1)*window)``; empty windows are dropped."""
    if window < 1:
        raise ValidationError(f"window must be >= 1 us, got {window}")
    n = len(stream)
    if n == 0:
        return []
    k = (stream.t - stream.t[0]) // np.uint64(window)
    cuts = np.flatnonzero(k[1:] != k[:-1]) + 1
    edges = [0, *cuts.tolist(), n]
    return list(zip(edges[:-1], edges[1:]))


@dataclass
class FrameStack:
    """T rendered frames with their source ranges.

    ``frames`` is T x H x W x 2 with channel 0 = ON and channel 1 = OFF.
    ``time_ranges`` holds the first/last timestamp per frame and ``span`` the
    (first, last) timestamp of the whole source stream.
    """

    frames: np.ndarray
    boundaries: Boundaries
    method: str
    time_ranges: list[tuple[int, int]] = field(default_factory=list)
    span: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if len(self.frames) != len(self.boundaries):
            raise ValidationError(
                f"{len(self.frames)} frames but {len(self.boundaries)} boundaries")

    def __len__(self) -> int:
        return len(self.frames)

    def positions(self) -> np.ndarray:
        """Centre time of each frame normalised to [0, 1] over the source span."""
        t0, t1 = self.span
        if not self.time_ranges:
            return np.zeros(len(self))
        centres = np.array([(a + b) / 2 for a, b in self.time_ranges], dtype=np.float64)
        return (centres - t0) / max(t1 - t0, 1)

    def export(self) -> np.ndarray:
        """3-channel uint8 view: ON -> red, OFF -> green, blue zero, per-frame max scaling."""
        return export_rgb(self.frames)


def export_rgb(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    out = np.zeros(frames.shape[:-1] + (3,), dtype=np.uint8)
    peak = frames.reshape(len(frames), -1).max(axis=1) if len(frames) else np.zeros(0)
    for i, m in enumerate(peak):
        if m > 0:
            out[i, ..., :2] = np.floor(frames[i] * (255.0 / m) + 0.5).astype(np.uint8)
    return out


def _as_boundaries(source) -> tuple[Boundaries, str]:
    if isinstance(source, AfeTree):
        return source.boundaries, "AFE"
    return [(int(a), int(b)) for a, b in source], "fixed"


def _check_boundaries(bounds: Boundaries, n: int) -> None:
    prev = 0
    for a, b in bounds:
        if not (prev <= a < b <= n):
            raise ValidationError(f"boundary ({a}, {b}) invalid for stream of length {n}")
        prev = b


def render_frames(source: Union[AfeTree, Sequence[tuple[int, int]]], stream: EventStream | None = None,
                  method: str | None = None) -> FrameStack:
    """Render per-slice ON/OFF count frames for a tree or explicit index boundaries."""
    if isinstance(source, AfeTree):
        stream = source.stream if stream is None else stream
    if stream is None:
        raise ValidationError("a stream is required when rendering from boundaries")
    bounds, default_method = _as_boundaries(source)
    _check_boundaries(bounds, len(stream))
    h, w = stream.height, stream.width
    frames = np.zeros((len(bounds), h, w, 2), dtype=np.float64)
    if bounds:
        lens = np.array([b - a for a, b in bounds])
        fid = np.repeat(np.arange(len(bounds)), lens)
        sel = np.concatenate([np.arange(a, b) for a, b in bounds])
        ch = np.where(stream.p[sel] == ON, 0, 1)
        flat = ((fid * h + stream.y[sel].astype(np.int64)) * w + stream.x[sel]) * 2 + ch
        frames = np.bincount(flat, minlength=frames.size).astype(np.float64).reshape(frames.shape)
    t = stream.t
    times = [(int(t[a]), int(t[b - 1])) for a, b in bounds]
    span = (int(t[0]), int(t[-1])) if len(stream) else (0, 0)
    return FrameStack(frames, bounds, method or default_method, times, span)


def voxel_slice(stream: EventStream, bins: int, t_range: tuple[int, int] | None = None) -> FrameStack:
    """Bilinear-in-time voxel grid with per-polarity channels.

    Each event's timestamp is mapped to ``t* in [0, bins-1]`` over ``t_range``
    (default: the stream's own first/last timestamps) and contributes
    ``max(0, 1 - |t* - b|)`` to bin ``b``.
    """
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    h, w = stream.height, stream.width
    n = len(stream)
    if n == 0:
        return FrameStack(np.zeros((0, h, w, 2)), [], "voxel")
    t = stream.t.astype(np.float64)
    t0, t1 = (float(t[0]), float(t[-1])) if t_range is None else map(float, t_range)
    span = t1 - t0
    ts = (t - t0) / span * (bins - 1) if span > 0 else np.zeros(n)
    ts = np.clip(ts, 0, bins - 1)
    grid = np.zeros((bins, h, w, 2), dtype=np.float64)
    lo = np.floor(ts).astype(np.int64)
    frac = ts - lo
    ch = np.where(stream.p == ON, 0, 1)
    pix = (stream.y.astype(np.int64) * w + stream.x) * 2 + ch
    flat = grid.reshape(bins, -1)
    np.add.at(flat, (lo, pix), 1.0 - frac)
    hi_ok = lo + 1 < bins
    np.add.at(flat, (lo[hi_ok] + 1, pix[hi_ok]), frac[hi_ok])
    # disjoint index ranges by nearest bin, for bookkeeping
    nearest = np.floor(ts + 0.5).astype(np.int64)
    edges = np.searchsorted(nearest, np.arange(bins + 1), side="left")
    bounds = [(int(edges[b]), int(edges[b + 1])) for b in range(bins)]
    times = [(int(stream.t[a]), int(stream.t[b - 1])) if b > a else (int(t0), int(t0))
             for a, b in bounds]
    return FrameStack(grid, bounds, "voxel", times, (int(t0), int(t1)))


# ---------------------------------------------------------------------------
# frame containers

FRS1_MAGIC = b"FRS1"


def encode_frs1(images: Iterable[np.ndarray]) -> bytes:
    """Pack H x W x C uint8 frames: magic, u32 count, then (H u16, W u16, C u8, data) per frame."""
    images = [np.ascontiguousarray(im, dtype=np.uint8) for im in images]
    parts = [FRS1_MAGIC, struct.pack("<I", len(images))]
    for im in images:
        if im.ndim == 2:
            im = im[..., None]
        h, w, c = im.shape
        parts.append(struct.pack("<HHB", h, w, c))
        parts.append(im.tobytes())
    return b"".join(parts)


def decode_frs1(raw: bytes) -> list[np.ndarray]:
    if raw[:4] != FRS1_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {FRS1_MAGIC!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    out = []
    for _ in range(count):
        if off + 5 > len(raw):
            raise FormatError("truncated FRS1 frame header")
        h, w, c = struct.unpack_from("<HHB", raw, off)
        off += 5
        size = h * w * c
        if off + size > len(raw):
            raise FormatError("truncated FRS1 frame data")
        out.append(np.frombuffer(raw, np.uint8, size, off).reshape(h, w, c).copy())
        off += size
    if off != len(raw):
        raise FormatError("trailing bytes after last FRS1 frame")
    return out


def write_frs1(path, images) -> None:
    try:
        Path(path).write_bytes(encode_frs1(images))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_frs1(path) -> list[np.ndarray]:
    try:
        return decode_frs1(Path(path).read_bytes())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def encode_pgm(channel: np.ndarray) -> bytes:
    channel = np.ascontiguousarray(channel, dtype=np.uint8)
    h, w = channel.shape
    return f"P5\n{w} {h}\n255\n".encode() + channel.tobytes()


def write_pgm(path, channel: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_pgm(channel))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
