"""Event streams, fixed-duration cells, groups, and tensor representations.

An event is (t_us, x, y, p) with polarity p in {-1, +1}. A stream is a
time-sorted batch of events on a fixed sensor geometry. Streams are tiled
into half-open fixed-duration windows ("cells"); contiguous runs of cells
form groups ("slices"), which render to dense tensors for downstream
consumers. Polarity channel order everywhere: channel 0 = +1, channel 1 = -1.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

EVENT_MAGIC = b"SSEV"
EVENT_VERSION = 1

CSV_HEADER = "t_us,x,y,p"

_EVENT_STRUCT = struct.Struct("<QHHb")
_EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class EventFormatError(ValueError):
    """Raised for malformed event files or out-of-range event fields."""


@dataclass
class EventStream:
    """Time-sorted events on a W x H sensor; t0/span define the covered window."""

    width: int
    height: int
    t: np.ndarray          # uint64 microseconds, non-decreasing
    x: np.ndarray          # uint16
    y: np.ndarray          # uint16
    p: np.ndarray          # int8, values in {-1, +1}
    t0: int = 0
    span_us: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.uint64)
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.uint16)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise EventFormatError("event field arrays differ in length")
        if n:
            if self.t.size > 1 and np.any(np.diff(self.t.astype(np.int64)) < 0):
                order = np.argsort(self.t, kind="stable")
                self.t, self.x, self.y, self.p = self.t[order], self.x[order], self.y[order], self.p[order]
            if int(self.x.max()) >= self.width or int(self.y.max()) >= self.height:
                raise EventFormatError(
                    f"event coordinates exceed geometry {self.width}x{self.height}"
                )
            bad = np.setdiff1d(np.unique(self.p), np.array([-1, 1], dtype=np.int8))
            if bad.size:
                raise EventFormatError(f"polarity values outside {{-1,1}}: {bad.tolist()}")
            lo, hi = int(self.t.min()), int(self.t.max())
            if self.span_us == 0 and self.t0 == 0:
                self.t0, self.span_us = lo, hi - lo
            if lo < self.t0 or hi > self.t0 + self.span_us:
                raise EventFormatError("event timestamps fall outside [t0, t0 + span]")

    def __len__(self):
        return int(self.t.size)

    @property
    def t_end(self):
        return self.t0 + self.span_us


@dataclass
class RawEventGroup:
    """Events of one slice plus the half-open interval it covers."""

    stream: EventStream
    t_start_us: int
    t_end_us: int
    indices: slice

    def __len__(self):
        return self.indices.stop - self.indices.start

    @property
    def t(self):
        return self.stream.t[self.indices]

    @property
    def x(self):
        return self.stream.x[self.indices]

    @property
    def y(self):
        return self.stream.y[self.indices]

    @property
    def p(self):
        return self.stream.p[self.indices]


@dataclass
class Representation:
    """Dense tensor view of a group: 'frame', 'voxel', or 'time_surface'."""

    kind: str
    tensor: np.ndarray
    t_start_us: int
    t_end_us: int
    n_events: int


@dataclass
class CellSequence:
    """Per-polarity count grids for N half-open windows of dt_us each."""

    grids: np.ndarray      # (N, 2, H, W) float64 counts
    t0: int
    dt_us: int
    dropped_tail_events: int = 0

    def __len__(self):
        return int(self.grids.shape[0])

    def interval(self, n):
        return cell_interval(n, self.t0, self.dt_us)

    def counts(self):
        """Total event count per cell, shape (N,)."""
        return self.grids.sum(axis=(1, 2, 3))


def cell_interval(n, t0, dt_us):
    """Half-open time window [t0 + n*dt, t0 + (n+1)*dt) of cell n."""
    if n < 0:
        raise ValueError(f"cell index must be non-negative, got {n}")
    start = t0 + n * dt_us
    return start, start + dt_us


def build_cells(stream, dt_us, n_cells=None):
    """Tile a stream into N = span // dt half-open count grids.

    A trailing partial window (and any event landing exactly on the final
    boundary) is dropped; the number of dropped events is recorded.
    """
    if dt_us <= 0:
        raise ValueError(f"dt_us must be positive, got {dt_us}")
    n = stream.span_us // dt_us if n_cells is None else n_cells
    n = int(n)
    if n <= 0:
        raise ValueError(
            f"stream span {stream.span_us}us shorter than one {dt_us}us cell"
        )
    grids = np.zeros((n, 2, stream.height, stream.width), dtype=np.float64)
    rel = stream.t.astype(np.int64) - stream.t0
    idx = rel // dt_us
    keep = idx < n
    dropped = int(len(stream) - keep.sum())
    ci = idx[keep].astype(np.intp)
    pi = (stream.p[keep] < 0).astype(np.intp)   # channel 0 = +1, channel 1 = -1
    np.add.at(grids, (ci, pi, stream.y[keep].astype(np.intp), stream.x[keep].astype(np.intp)), 1.0)
    return CellSequence(grids=grids, t0=stream.t0, dt_us=int(dt_us), dropped_tail_events=dropped)


def event_group(stream, t_start_us, t_end_us):
    """Events with t in the half-open interval [t_start, t_end)."""
    if t_end_us < t_start_us:
        raise ValueError(f"empty-ordered interval [{t_start_us}, {t_end_us})")
    lo = int(np.searchsorted(stream.t, t_start_us, side="left"))
    hi = int(np.searchsorted(stream.t, t_end_us, side="left"))
    return RawEventGroup(stream=stream, t_start_us=int(t_start_us), t_end_us=int(t_end_us),
                         indices=slice(lo, hi))


def render(group, kind="frame", n_bins=2, tau_us=None):
    """Render a group to a dense tensor representation.

    frame:        (2, H, W) per-polarity event counts.
    voxel:        (n_bins, 2, H, W) counts spread bilinearly across the time
                  axis of the group's own interval; total mass = event count.
    time_surface: (2, H, W) exp(-(t_end - t_last)/tau) of the most recent
                  event per pixel/polarity; tau defaults to 4x the interval
                  can't know the cell size, so callers pass tau for cells.
    """
    stream = group.stream
    h, w = stream.height, stream.width
    xs = group.x.astype(np.intp)
    ys = group.y.astype(np.intp)
    ps = (group.p < 0).astype(np.intp)
    ts = group.t.astype(np.float64)
    n_ev = len(group)

    if kind == "frame":
        tensor = np.zeros((2, h, w), dtype=np.float64)
        np.add.at(tensor, (ps, ys, xs), 1.0)
    elif kind == "voxel":
        if n_bins < 1:
            raise ValueError(f"voxel needs n_bins >= 1, got {n_bins}")
        tensor = np.zeros((n_bins, 2, h, w), dtype=np.float64)
        if n_ev:
            span = max(group.t_end_us - group.t_start_us, 1)
            scaled = (n_bins - 1) * (ts - group.t_start_us) / span
            lo = np.floor(scaled).astype(np.intp)
            frac = scaled - lo
            np.add.at(tensor, (lo, ps, ys, xs), 1.0 - frac)
            hi_mask = frac > 0
            np.add.at(tensor, (lo[hi_mask] + 1, ps[hi_mask], ys[hi_mask], xs[hi_mask]), frac[hi_mask])
    elif kind == "time_surface":
        if tau_us is None:
            tau_us = max(group.t_end_us - group.t_start_us, 1) * 4.0
        tensor = np.zeros((2, h, w), dtype=np.float64)
        last = np.full((2, h, w), -1.0)
        # events are time-sorted, so plain assignment keeps the latest stamp
        last[ps, ys, xs] = ts
        seen = last >= 0
        tensor[seen] = np.exp(-(group.t_end_us - last[seen]) / float(tau_us))
    else:
        raise ValueError(f"unknown representation kind {kind!r}")
    return Representation(kind=kind, tensor=tensor, t_start_us=group.t_start_us,
                          t_end_us=group.t_end_us, n_events=n_ev)


def event_density(stream, t_us, dt_us):
    """Events per microsecond in the half-open window [t, t + dt)."""
    if dt_us <= 0:
        raise ValueError(f"dt_us must be positive, got {dt_us}")
    return len(event_group(stream, t_us, t_us + dt_us)) / float(dt_us)


def density_profile(stream, dt_us):
    """(window start times, events-per-us) tiled over the stream's span."""
    n = stream.span_us // dt_us
    starts = stream.t0 + np.arange(n, dtype=np.int64) * dt_us
    counts = np.array([len(event_group(stream, int(s), int(s) + dt_us)) for s in starts], dtype=np.float64)
    return starts, counts / float(dt_us)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def serialize_events_csv(stream):
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
        buf.write(f"{int(t)},{int(x)},{int(y)},{int(p)}\n")
    return buf.getvalue().encode("utf-8")


def parse_events_csv(data, width, height, t0=None, span_us=None):
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        got = lines[0].strip() if lines else "<empty>"
        raise EventFormatError(f"line 1: expected header {CSV_HEADER!r}, got {got!r}")
    ts, xs, ys, ps = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            t, x, y, p = int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError as err:
            raise EventFormatError(f"line {lineno}: {err}") from None
        if p not in (-1, 1):
            raise EventFormatError(f"line {lineno}: polarity must be -1 or 1, got {p}")
        if t < 0:
            raise EventFormatError(f"line {lineno}: negative timestamp {t}")
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
    kwargs = {}
    if t0 is not None:
        kwargs = {"t0": int(t0), "span_us": int(span_us)}
    return EventStream(width=width, height=height,
                       t=np.array(ts, dtype=np.uint64), x=np.array(xs, dtype=np.uint16),
                       y=np.array(ys, dtype=np.uint16), p=np.array(ps, dtype=np.int8), **kwargs)


def serialize_events_binary(stream):
    """Binary layout: magic "SSEV", version u32, width u16, height u16,
    count u64, then packed little-endian (t u64, x u16, y u16, p i8) records."""
    out = io.BytesIO()
    out.write(EVENT_MAGIC)
    out.write(struct.pack("<IHHQ", EVENT_VERSION, stream.width, stream.height, len(stream)))
    records = np.empty(len(stream), dtype=_EVENT_DTYPE)
    records["t"], records["x"], records["y"], records["p"] = stream.t, stream.x, stream.y, stream.p
    out.write(records.tobytes())
    return out.getvalue()


def parse_events_binary(data, t0=None, span_us=None):
    if len(data) < 20 or data[:4] != EVENT_MAGIC:
        raise EventFormatError(f"bad magic {data[:4]!r}, expected {EVENT_MAGIC!r}")
    version, width, height, count = struct.unpack_from("<IHHQ", data, 4)
    if version != EVENT_VERSION:
        raise EventFormatError(f"unsupported event container version {version}")
    need = 20 + count * _EVENT_STRUCT.size
    if len(data) < need:
        raise EventFormatError(f"truncated event file: need {need} bytes, have {len(data)}")
    records = np.frombuffer(data, dtype=_EVENT_DTYPE, count=count, offset=20)
    ts = records["t"].astype(np.uint64)
    xs = records["x"].astype(np.uint16)
    ys = records["y"].astype(np.uint16)
    ps = records["p"].astype(np.int8)
    kwargs = {}
    if t0 is not None:
        kwargs = {"t0": int(t0), "span_us": int(span_us)}
    return EventStream(width=width, height=height, t=ts, x=xs, y=ys, p=ps, **kwargs)


def parse_events(data, fmt, width=None, height=None, t0=None, span_us=None):
    if fmt == "csv":
        if width is None or height is None:
            raise EventFormatError("csv events need an explicit geometry (width/height)")
        return parse_events_csv(data, width, height, t0=t0, span_us=span_us)
    if fmt == "binary":
        return parse_events_binary(data, t0=t0, span_us=span_us)
    raise EventFormatError(f"unknown event format {fmt!r}")


# ---------------------------------------------------------------------------
# synthetic streams
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """Script for a synthetic recording: a full-height bright bar translating
    horizontally (wrapping), emitting +1 events at its leading edge and -1 at
    its trailing edge, with piecewise-constant event rate and speed schedules.
    """

    width: int = 32
    height: int = 32
    duration_ms: int = 1000
    # segments are [start_ms, end_ms, value]; gaps contribute nothing
    rate_per_ms: list = field(default_factory=lambda: [[0, 1000, 20.0]])
    speed_px_per_ms: list = field(default_factory=lambda: [[0, 1000, 0.05]])
    bar_width_px: int = 4
    start_x_px: float = 0.0
    jitter_px: float = 1.0
    noise_rate_per_ms: float = 0.0

    @staticmethod
    def from_json(text):
        raw = json.loads(text)
        known = {f for f in Scenario.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise EventFormatError(f"unknown scenario fields: {sorted(unknown)}")
        return Scenario(**raw)

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def value_at(self, schedule, t_ms):
        for start, end, value in schedule:
            if start <= t_ms < end:
                return float(value)
        return 0.0


def synth_stream(scenario, seed=0):
    """Generate the scripted stream; byte-deterministic for a given seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    sc = scenario
    ts, xs, ys, ps = [], [], [], []
    position = float(sc.start_x_px)
    half = sc.bar_width_px / 2.0
    for tick in range(int(sc.duration_ms)):
        speed = sc.value_at(sc.speed_px_per_ms, tick)
        rate = sc.value_at(sc.rate_per_ms, tick)
        direction = 1.0 if speed >= 0 else -1.0
        n_edge = int(rng.poisson(rate))
        n_noise = int(rng.poisson(sc.noise_rate_per_ms))
        if n_edge:
            offsets = rng.integers(0, 1000, size=n_edge)
            leading = rng.random(n_edge) < 0.5
            edge_x = np.where(leading, position + direction * half, position - direction * half)
            jitter = rng.normal(0.0, sc.jitter_px, size=n_edge) if sc.jitter_px > 0 else 0.0
            ex = np.mod(np.rint(edge_x + jitter), sc.width).astype(np.int64)
            ey = rng.integers(0, sc.height, size=n_edge)
            ts.append(tick * 1000 + offsets)
            xs.append(ex)
            ys.append(ey)
            ps.append(np.where(leading, 1, -1).astype(np.int8))
        if n_noise:
            ts.append(tick * 1000 + rng.integers(0, 1000, size=n_noise))
            xs.append(rng.integers(0, sc.width, size=n_noise))
            ys.append(rng.integers(0, sc.height, size=n_noise))
            ps.append(rng.choice(np.array([-1, 1], dtype=np.int8), size=n_noise))
        position += speed
    if ts:
        t = np.concatenate(ts).astype(np.uint64)
        x = np.concatenate(xs).astype(np.uint16)
        y = np.concatenate(ys).astype(np.uint16)
        p = np.concatenate(ps).astype(np.int8)
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    else:
        t = np.array([], dtype=np.uint64)
        x = np.array([], dtype=np.uint16)
        y = np.array([], dtype=np.uint16)
        p = np.array([], dtype=np.int8)
    return EventStream(width=sc.width, height=sc.height, t=t, x=x, y=y, p=p,
                       t0=0, span_us=int(sc.duration_ms) * 1000)
