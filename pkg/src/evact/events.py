"""Event-stream data model, EVT1/CSV I/O and a synthetic scene generator.

Events are held column-wise in a numpy structured array whose memory layout
is exactly the EVT1 record layout, so binary I/O is a single buffer copy.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import FormatError, IoError, ValidationError

EVT1_MAGIC = b"EVT1"
EVT1_HEADER = struct.Struct("<4sHHQ")
# t u64 | x u16 | y u16 | p u8 | 3 pad bytes -> 16-byte stride
EVENT_DTYPE = np.dtype(
    {
        "names": ["t", "x", "y", "p"],
        "formats": ["<u8", "<u2", "<u2", "u1"],
        "offsets": [0, 8, 10, 12],
        "itemsize": 16,
    }
)

OFF, ON = 0, 1


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: int


def _empty_events(n: int) -> np.ndarray:
    # np.zeros so the pad bytes are always zero on disk
    return np.zeros(n, dtype=EVENT_DTYPE)


def _count_descents(t: np.ndarray) -> int:
    if len(t) < 2:
        return 0
    return int(np.count_nonzero(t[1:] < t[:-1]))


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events plus sensor geometry.

    ``metadata`` carries non-semantic information such as ``reorders`` (the
    number of out-of-order records repaired while reading).
    """

    events: np.ndarray
    width: int
    height: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"geometry must be at least 1x1, got {self.width}x{self.height}")
        ev = self.events
        if ev.dtype != EVENT_DTYPE:
            raise ValidationError(f"events must use EVENT_DTYPE, got {ev.dtype}")
        _check_records(ev, self.width, self.height)
        if _count_descents(ev["t"]):
            raise ValidationError("events are not sorted by timestamp")
        ev.flags.writeable = False

    @classmethod
    def from_arrays(cls, t, x, y, p, width: int, height: int, metadata=None) -> "EventStream":
        t = np.asarray(t)
        n = len(t)
        ev = _empty_events(n)
        if n:
            for name, col in (("t", t), ("x", x), ("y", y), ("p", p)):
                col = np.asarray(col)
                if len(col) != n:
                    raise ValidationError(f"column {name!r} has length {len(col)}, expected {n}")
                if col.size and np.issubdtype(col.dtype, np.signedinteger) and col.min() < 0:
                    raise ValidationError(f"column {name!r} has negative values",
                                          index=int(np.argmax(col < 0)))
                ev[name] = col
        return cls(ev, int(width), int(height), dict(metadata or {}))

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int) -> "EventStream":
        cols = list(zip(*events)) if events else ([], [], [], [])
        return cls.from_arrays(*cols, width=width, height=height)

    def __len__(self) -> int:
        return len(self.events)

    def __getitem__(self, i: int) -> Event:
        r = self.events[i]
        return Event(int(r["t"]), int(r["x"]), int(r["y"]), int(r["p"]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and len(self) == len(other)
            and all(np.array_equal(self.events[k], other.events[k]) for k in "txyp")
        )

    __hash__ = None

    @property
    def t(self) -> np.ndarray:
        return self.events["t"]

    @property
    def x(self) -> np.ndarray:
        return self.events["x"]

    @property
    def y(self) -> np.ndarray:
        return self.events["y"]

    @property
    def p(self) -> np.ndarray:
        return self.events["p"]

    @property
    def duration(self) -> int:
        if len(self) == 0:
            return 0
        return int(self.t[-1] - self.t[0])

    def slice(self, start: int = 0, end: int | None = None) -> "StreamSlice":
        return StreamSlice(self, start, len(self) if end is None else end)

    def whole(self) -> "StreamSlice":
        return StreamSlice(self, 0, len(self))


@dataclass(frozen=True)
class StreamSlice:
    """Zero-copy half-open index window ``[start, end)`` into a parent stream."""

    parent: EventStream
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end <= len(self.parent):
            raise ValidationError(
                f"slice [{self.start}, {self.end}) outside stream of length {len(self.parent)}")

    @property
    def count(self) -> int:
        return self.end - self.start

    def __len__(self) -> int:
        return self.count

    @property
    def events(self) -> np.ndarray:
        return self.parent.events[self.start:self.end]

    @property
    def t(self) -> np.ndarray:
        return self.parent.t[self.start:self.end]

    @property
    def x(self) -> np.ndarray:
        return self.parent.x[self.start:self.end]

    @property
    def y(self) -> np.ndarray:
        return self.parent.y[self.start:self.end]

    @property
    def p(self) -> np.ndarray:
        return self.parent.p[self.start:self.end]

    def split(self) -> tuple["StreamSlice", "StreamSlice"]:
        """Two equal-count halves; the left one takes the odd event."""
        mid = self.start + (self.count + 1) // 2
        return StreamSlice(self.parent, self.start, mid), StreamSlice(self.parent, mid, self.end)


def _check_records(ev: np.ndarray, width: int, height: int) -> None:
    if len(ev) == 0:
        return
    bad = (ev["x"] >= width) | (ev["y"] >= height)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(
            f"record {i}: coordinate ({ev['x'][i]}, {ev['y'][i]}) outside {width}x{height}", index=i)
    bad = ev["p"] > 1
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(f"record {i}: polarity {ev['p'][i]} is not 0 or 1", index=i)


def _finalize(ev: np.ndarray, width: int, height: int, strict: bool) -> EventStream:
    _check_records(ev, width, height)
    reorders = _count_descents(ev["t"])
    if reorders:
        if strict:
            raise ValidationError(f"{reorders} out-of-order records (strict mode)")
        ev = ev[np.argsort(ev["t"], kind="stable")]
    return EventStream(np.ascontiguousarray(ev), width, height, {"reorders": reorders})


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        fmt = fmt.lower()
    elif path.suffix.lower() == ".csv":
        fmt = "csv"
    else:
        fmt = "evt1"
    if fmt not in ("evt1", "csv"):
        raise ValidationError(f"unknown event format {fmt!r}")
    return fmt


def read_stream(path, format: str | None = None, width: int | None = None,
                height: int | None = None, strict: bool = False) -> EventStream:
    """Read an EVT1 or CSV event file.

    Out-of-order records are repaired with a stable sort and counted in
    ``metadata["reorders"]``; with ``strict=True`` they raise instead. For CSV
    input the geometry comes from the arguments, then from a
    ``# width=W height=H`` comment line, and is otherwise inferred as
    ``max + 1`` of the coordinates.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if fmt == "evt1":
        return _parse_evt1(raw, strict)
    return _parse_csv(raw.decode("utf-8", errors="replace"), width, height, strict)


def _parse_evt1(raw: bytes, strict: bool) -> EventStream:
    if len(raw) < EVT1_HEADER.size:
        raise FormatError("file shorter than the EVT1 header")
    magic, width, height, count = EVT1_HEADER.unpack_from(raw)
    if magic != EVT1_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {EVT1_MAGIC!r}")
    expected = EVT1_HEADER.size + count * EVENT_DTYPE.itemsize
    if len(raw) != expected:
        raise FormatError(f"header declares {count} records ({expected} bytes) but file has {len(raw)} bytes")
    if width < 1 or height < 1:
        raise FormatError(f"header declares zero-area geometry {width}x{height}")
    ev = np.frombuffer(raw, dtype=EVENT_DTYPE, count=count, offset=EVT1_HEADER.size).copy()
    return _finalize(ev, width, height, strict)


def _parse_csv(text: str, width, height, strict: bool) -> EventStream:
    rows = []
    geom = {}
    for line in text.splitlines():
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            for tok in s[1:].split():
                k, _, v = tok.partition("=")
                if k in ("width", "height") and v.isdigit():
                    geom[k] = int(v)
            continue
        if not rows and s[0].isalpha():
            if [c.strip() for c in s.split(",")] not in (["t", "x", "y", "p"], ["t", "x", "y", "polarity"]):
                raise FormatError(f"unrecognised CSV header {s!r}")
            continue
        rows.append(s)
    if rows:
        try:
            data = np.loadtxt(rows, delimiter=",", dtype=np.int64, ndmin=2)
        except ValueError as exc:
            raise FormatError(f"malformed CSV row: {exc}") from exc
        if data.shape[1] != 4:
            raise FormatError(f"expected 4 columns t,x,y,p, got {data.shape[1]}")
        neg = (data < 0).any(axis=1)
        if neg.any():
            i = int(np.argmax(neg))
            raise ValidationError(f"record {i}: negative field", index=i)
    else:
        data = np.zeros((0, 4), dtype=np.int64)
    width = width or geom.get("width") or (int(data[:, 1].max()) + 1 if len(data) else 1)
    height = height or geom.get("height") or (int(data[:, 2].max()) + 1 if len(data) else 1)
    # range checks before the narrowing casts below
    for col, lim, name in ((1, width, "x"), (2, height, "y")):
        bad = data[:, col] >= lim
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(f"record {i}: {name}={data[i, col]} outside {width}x{height}", index=i)
    bad = data[:, 3] > 1
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(f"record {i}: polarity {data[i, 3]} is not 0 or 1", index=i)
    ev = _empty_events(len(data))
    ev["t"], ev["x"], ev["y"], ev["p"] = data[:, 0], data[:, 1], data[:, 2], data[:, 3]
    return _finalize(ev, int(width), int(height), strict)


def encode_evt1(stream: EventStream) -> bytes:
    ev = _empty_events(len(stream))
    for k in "txyp":
        ev[k] = stream.events[k]
    return EVT1_HEADER.pack(EVT1_MAGIC, stream.width, stream.height, len(stream)) + ev.tobytes()


def encode_csv(stream: EventStream) -> str:
    buf = io.StringIO()
    buf.write(f"# width={stream.width} height={stream.height}\n")
    buf.write("t,x,y,p\n")
    if len(stream):
        cols = np.column_stack([stream.t.astype(np.uint64), stream.x, stream.y, stream.p])
        np.savetxt(buf, cols, fmt="%d", delimiter=",")
    return buf.getvalue()


def write_stream(stream: EventStream, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, format)
    payload = encode_evt1(stream) if fmt == "evt1" else encode_csv(stream).encode()
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic scenes

KINDS = ("bar", "texture", "square", "dot")


@dataclass(frozen=True)
class Segment:
    """One motion segment of a synthetic scene.

    ``direction`` is right/left/up/down for bars, out/in for squares and
    horizontal/vertical for the oscillating dot; textures ignore it.
    ``center`` defaults to the sensor centre. A segment with its own ``seed``
    draws from ``default_rng([scene.seed, seed])`` so the same segment renders
    identically wherever it sits in a scene.
    """

    duration: int
    kind: str
    direction: str = "right"
    rate: float = 1.0
    center: tuple[int, int] | None = None
    pattern_seed: int = 0
    seed: int | None = None  # own RNG stream, independent of segment order


@dataclass(frozen=True)
class SyntheticScene:
    segments: tuple[Segment, ...]
    width: int = 32
    height: int = 32
    noise_rate: float = 0.0
    seed: int = 0

    @property
    def total_duration(self) -> int:
        return sum(s.duration for s in self.segments)


def texture_mask(width: int, height: int, pattern_seed: int, density: float = 0.12) -> np.ndarray:
    """Boolean H x W mask of the pixels a static texture fires on."""
    rng = np.random.default_rng([0x7E57, pattern_seed])
    mask = rng.random((height, width)) < density
    if not mask.any():
        mask[height // 2, width // 2] = True
    return mask


def _segment_events(seg: Segment, t_start: int, width: int, height: int, rng):
    n = int(round(seg.rate * seg.duration))
    t = t_start + np.sort(rng.integers(0, seg.duration, n, dtype=np.int64))
    u = (t - t_start) / seg.duration
    cx, cy = seg.center if seg.center is not None else (width // 2, height // 2)

    if seg.kind == "bar":
        horizontal = seg.direction in ("right", "left")
        span = width if horizontal else height
        other = height if horizontal else width
        bw = max(1, span // 16)
        forward = seg.direction in ("right", "down")
        pos = np.floor((u if forward else 1.0 - u) * (span - bw)).astype(np.int64)
        off = rng.integers(0, bw, n)
        along = pos + off
        across = rng.integers(0, other, n)
        # leading edge fires ON, trailing edge OFF
        lead = off >= bw / 2 if forward else off < bw / 2
        p = np.where(lead | (bw == 1), ON, OFF)
        x, y = (along, across) if horizontal else (across, along)
    elif seg.kind == "texture":
        ys, xs = np.nonzero(texture_mask(width, height, seg.pattern_seed))
        pick = rng.integers(0, len(xs), n)
        x, y = xs[pick], ys[pick]
        p = rng.integers(0, 2, n)
    elif seg.kind == "square":
        smax = max(1, min(cx, cy, width - 1 - cx, height - 1 - cy))
        grow = u if seg.direction != "in" else 1.0 - u
        half = np.maximum(1, np.rint(1 + grow * (smax - 1))).astype(np.int64)
        side = rng.integers(0, 4, n)
        along = np.rint((rng.random(n) * 2 - 1) * half).astype(np.int64)
        x = np.where(side < 2, cx + along, np.where(side == 2, cx - half, cx + half))
        y = np.where(side < 2, np.where(side == 0, cy - half, cy + half), cy + along)
        p = np.full(n, ON if seg.direction != "in" else OFF)
    elif seg.kind == "dot":
        amp = (width if seg.direction != "vertical" else height) / 4
        phase = np.sin(2 * np.pi * 2 * u)
        vel = np.cos(2 * np.pi * 2 * u)
        jx, jy = rng.integers(-1, 2, n), rng.integers(-1, 2, n)
        if seg.direction == "vertical":
            x, y = cx + jx, np.rint(cy + amp * phase).astype(np.int64) + jy
        else:
            x, y = np.rint(cx + amp * phase).astype(np.int64) + jx, cy + jy
        p = np.where(vel >= 0, ON, OFF)
    else:
        raise ValidationError(f"unknown segment kind {seg.kind!r}; expected one of {KINDS}")
    x = np.clip(x, 0, width - 1)
    y = np.clip(y, 0, height - 1)
    return t, x, y, p


def generate_scene(scene: SyntheticScene) -> EventStream:
    """Render a scene to events; identical scenes give identical streams."""
    if scene.width < 1 or scene.height < 1:
        raise ValidationError(f"zero-area geometry {scene.width}x{scene.height}")
    if not scene.segments:
        raise ValidationError("scene has no segments")
    for i, seg in enumerate(scene.segments):
        if seg.duration <= 0 or seg.rate <= 0:
            raise ValidationError(f"segment {i}: duration and rate must be positive", index=i)
    if scene.noise_rate < 0:
        raise ValidationError("noise rate must be non-negative")

    rng = np.random.default_rng(scene.seed)
    parts = []
    t0 = 0
    for seg in scene.segments:
        seg_rng = rng if seg.seed is None else np.random.default_rng([scene.seed, seg.seed])
        parts.append(_segment_events(seg, t0, scene.width, scene.height, seg_rng))
        t0 += seg.duration
    n_noise = int(rng.poisson(scene.noise_rate * t0)) if scene.noise_rate > 0 else 0
    if n_noise:
        parts.append((
            rng.integers(0, t0, n_noise, dtype=np.int64),
            rng.integers(0, scene.width, n_noise),
            rng.integers(0, scene.height, n_noise),
            rng.integers(0, 2, n_noise),
        ))
    t, x, y, p = (np.concatenate([part[k] for part in parts]) for k in range(4))
    order = np.argsort(t, kind="stable")
    return EventStream.from_arrays(t[order], x[order], y[order], p[order], scene.width, scene.height)
