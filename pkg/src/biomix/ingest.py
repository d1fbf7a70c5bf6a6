"""Framed acquisition of EEG, ECG and audio sample streams.

Sources are CSV files (EEG/ECG), RIFF-wave files (audio, one file per mix
channel), seeded synthetic generators, or a TCP socket speaking the binary
frame format below. Every source delivers gapless :class:`SampleBlock` objects
of 50 ms each, followed by :data:`END_OF_STREAM`.

Socket frame (little-endian)::

    u32 magic | u8 kind | u64 start_tick | u16 channel_count | u32 block_len
    float32 samples[channel_count * block_len]   (channel-major)
"""
from __future__ import annotations

import collections
import csv
import enum
import math
import queue
import re
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import signal
from scipy.io import wavfile


class StreamKind(enum.IntEnum):
    EEG = 0
    ECG = 1
    AUDIO = 2


DEFAULT_RATES = {StreamKind.EEG: 250, StreamKind.ECG: 1000, StreamKind.AUDIO: 30000}
EEG_ELECTRODES = ("O1", "O2", "T3", "T4")
AUDIO_RATE = 30000
BLOCKS_PER_SECOND = 20

FRAME_MAGIC = 0x31584D42  # b"BMX1" on the wire
_FRAME_HEADER = struct.Struct("<IBQHI")


class IngestError(Exception):
    """Raised when a source is unreachable, malformed or violates its descriptor."""


class _EndOfStream:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "END_OF_STREAM"


END_OF_STREAM = _EndOfStream()


@dataclass(frozen=True)
class StreamDescriptor:
    kind: StreamKind
    source: str | tuple[str, ...]
    source_type: str = "file"  # file | synthetic | socket
    channel_count: int | None = None
    sample_rate_hz: int | None = None
    duration_s: float = 60.0
    seed: int = 0
    block_len: int | None = None  # fixed block length; None = 50 ms cadence

    @property
    def rate(self) -> int:
        return self.sample_rate_hz or DEFAULT_RATES[self.kind]

    @classmethod
    def parse(cls, kind: StreamKind, source, **kw) -> "StreamDescriptor":
        """Build a descriptor from a config-style source string.

        ``synthetic:<spec>`` selects the generator, ``tcp://host:port`` the
        socket client, anything else is a file path. Audio takes a list with
        one entry per mix channel (dry first).
        """
        if isinstance(source, (list, tuple)):
            items = tuple(str(s) for s in source)
            if not items:
                raise IngestError("empty source list")
            kinds = {_source_type(s) for s in items}
            if len(kinds) != 1:
                raise IngestError("audio channels must share one source type")
            stype = kinds.pop()
            if stype == "synthetic":
                items = tuple(s[len("synthetic:"):] for s in items)
            kw.setdefault("channel_count", len(items))
            return cls(kind=kind, source=items, source_type=stype, **kw)
        text = str(source)
        stype = _source_type(text)
        if stype == "synthetic":
            text = text[len("synthetic:"):]
        return cls(kind=kind, source=text, source_type=stype, **kw)


def _source_type(text: str) -> str:
    if text.startswith("synthetic:"):
        return "synthetic"
    if text.startswith("tcp://"):
        return "socket"
    return "file"


@dataclass
class SampleBlock:
    stream_id: str
    start_tick: int
    samples: np.ndarray  # (channel_count, block_len)

    @property
    def block_len(self) -> int:
        return self.samples.shape[1]

    @property
    def end_tick(self) -> int:
        return self.start_tick + self.block_len


def _check_channels(kind: StreamKind, n: int) -> None:
    if n < 1:
        raise IngestError("channel_count must be >= 1")
    if kind == StreamKind.EEG and n != len(EEG_ELECTRODES):
        raise IngestError(f"EEG requires {len(EEG_ELECTRODES)} channels, got {n}")
    if kind == StreamKind.ECG and n != 1:
        raise IngestError(f"ECG requires 1 channel, got {n}")
    if kind == StreamKind.AUDIO and n < 2:
        raise IngestError("AUDIO requires the dry channel plus at least one FX channel")


class StreamSource:
    """Base stream handle: ``read()`` returns a block or END_OF_STREAM."""

    def __init__(self, desc: StreamDescriptor, stream_id: str | None = None):
        self.desc = desc
        self.stream_id = stream_id or desc.kind.name.lower()
        self.rate = desc.rate
        self._tick = 0
        self._index = 0

    def _next_len(self) -> int:
        if self.desc.block_len:
            return self.desc.block_len
        k = self._index
        return (k + 1) * self.rate // BLOCKS_PER_SECOND - k * self.rate // BLOCKS_PER_SECOND

    def read(self):
        raise NotImplementedError

    def __iter__(self) -> Iterator[SampleBlock]:
        while True:
            block = self.read()
            if block is END_OF_STREAM:
                return
            yield block

    def close(self) -> None:
        pass


class ArraySource(StreamSource):
    """Serves a preloaded (channels, samples) array in blocks."""

    def __init__(self, desc: StreamDescriptor, data: np.ndarray, stream_id: str | None = None):
        super().__init__(desc, stream_id)
        self.data = np.ascontiguousarray(data, dtype=np.float64)

    def read(self):
        total = self.data.shape[1]
        if self._tick >= total:
            return END_OF_STREAM
        n = min(self._next_len(), total - self._tick)
        block = SampleBlock(self.stream_id, self._tick, self.data[:, self._tick:self._tick + n].copy())
        self._tick += n
        self._index += 1
        return block


# --------------------------------------------------------------------- files

def read_csv_stream(path: Path) -> tuple[int, np.ndarray]:
    """Parse a biosignal CSV: ``# sample_rate_hz=<r>`` line, ``tick,ch0,...`` header."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot open {path}: {exc}") from exc
    with fh:
        first = fh.readline()
        m = re.search(r"sample_rate_hz\s*=\s*(\d+)", first)
        if not first.startswith("#") or not m:
            raise IngestError(f"{path}: first line must declare '# sample_rate_hz=<rate>'")
        rate = int(m.group(1))
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "tick" or len(header) < 2:
            raise IngestError(f"{path}: header must be 'tick,ch0[,ch1,...]'")
        rows = []
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                tick = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from exc
            if tick != len(rows):
                raise IngestError(f"{path}:{lineno}: non-contiguous tick {tick}")
            rows.append(values)
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header) - 1).T
    return rate, data


def write_csv_stream(path: Path, data: np.ndarray, rate: int) -> None:
    data = np.atleast_2d(data)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# sample_rate_hz={rate}\n")
        w = csv.writer(fh)
        w.writerow(["tick"] + [f"ch{i}" for i in range(data.shape[0])])
        for i in range(data.shape[1]):
            w.writerow([i] + [repr(float(v)) for v in data[:, i]])


def read_wav_channel(path: Path) -> tuple[int, np.ndarray]:
    try:
        rate, raw = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read wave file {path}: {exc}") from exc
    if raw.ndim != 1:
        raise IngestError(f"{path}: expected a mono wave file")
    if raw.dtype.kind == "i":
        x = raw.astype(np.float64) / float(2 ** (8 * raw.dtype.itemsize - 1))
    elif raw.dtype.kind == "u":
        x = (raw.astype(np.float64) - 128.0) / 128.0
    else:
        x = raw.astype(np.float64)
    return int(rate), x


def write_wav_channel(path: Path, x: np.ndarray, rate: int = AUDIO_RATE) -> None:
    wavfile.write(path, rate, np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------- resampling

def _resample_filter(up: int, down: int) -> np.ndarray:
    # 64 taps per polyphase branch, Kaiser beta 8, cutoff just below the output Nyquist
    taps = 64 * up
    cutoff = 0.9 / max(up, down)
    return signal.firwin(taps + 1, cutoff, window=("kaiser", 8.0))  # resample_poly applies the up gain


def resample_audio(block: SampleBlock, in_rate: int) -> SampleBlock:
    """Downsample an audio block to 30 kHz with a windowed-sinc polyphase filter."""
    if in_rate < AUDIO_RATE:
        raise IngestError(f"upsampling unsupported ({in_rate} Hz < {AUDIO_RATE} Hz)")
    if in_rate == AUDIO_RATE:
        return SampleBlock(block.stream_id, block.start_tick, block.samples.copy())
    g = math.gcd(AUDIO_RATE, in_rate)
    up, down = AUDIO_RATE // g, in_rate // g
    out_len = round(block.block_len * AUDIO_RATE / in_rate)
    y = signal.resample_poly(block.samples, up, down, axis=1, window=_resample_filter(up, down))
    if y.shape[1] < out_len:
        y = np.pad(y, ((0, 0), (0, out_len - y.shape[1])))
    start = round(block.start_tick * AUDIO_RATE / in_rate)
    return SampleBlock(block.stream_id, start, y[:, :out_len])


# ----------------------------------------------------------------- synthetic

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_UNITS = {"hz": "hz", "ms": "ms", "s": "s", "uv": "uv", "µv": "uv", "μv": "uv"}


@dataclass
class _Component:
    kind: str  # sine | pulse
    freq_hz: float = 0.0
    period_s: float = 0.0
    amp: float = 0.0
    am_hz: float | None = None
    jitter_s: float = 0.0


@dataclass
class SyntheticChannel:
    components: list[_Component] = field(default_factory=list)
    noise: float = 0.0
    off: list[tuple[float, float]] = field(default_factory=list)


def _qty(token: str, allowed: tuple[str, ...], what: str) -> float:
    m = re.fullmatch(rf"({_NUM})\s*([a-zA-Zµμ]*)", token)
    if not m:
        raise IngestError(f"bad {what} value {token!r}")
    unit = _UNITS.get(m.group(2).lower(), m.group(2).lower())
    if unit not in allowed:
        raise IngestError(f"bad unit for {what}: {token!r} (expected {'/'.join(allowed) or 'none'})")
    value = float(m.group(1))
    return value / 1000.0 if unit == "ms" else value


def parse_synthetic(spec: str) -> SyntheticChannel:
    """Parse one channel of the synthetic mini-grammar (see README)."""
    text = re.sub(rf"({_NUM})\s+(Hz|hz|ms|s|uV|µV|μV)\b", r"\1\2", spec.strip())
    chan = SyntheticChannel()
    for part in text.split("+"):
        tokens = part.split()
        if not tokens:
            raise IngestError(f"empty component in {spec!r}")
        i = 0
        comp: _Component | None = None
        while i < len(tokens):
            tok = tokens[i].lower()
            arg = tokens[i + 1] if i + 1 < len(tokens) else None
            if tok in ("sine", "pulse", "amp", "am", "jitter", "noise", "off") and arg is None:
                raise IngestError(f"{tok!r} needs a value in {spec!r}")
            if tok == "sine" and comp is None:
                comp = _Component("sine", freq_hz=_qty(arg, ("hz",), "frequency"))
            elif tok == "pulse" and comp is None:
                comp = _Component("pulse", period_s=_qty(arg, ("ms", "s"), "period"))
                if comp.period_s <= 0:
                    raise IngestError("pulse period must be positive")
            elif tok == "amp" and comp is not None:
                comp.amp = _qty(arg, ("", "uv"), "amplitude")
            elif tok == "am" and comp is not None and comp.kind == "sine":
                comp.am_hz = _qty(arg, ("hz",), "modulation")
            elif tok == "jitter" and comp is not None and comp.kind == "pulse":
                comp.jitter_s = _qty(arg, ("ms", "s"), "jitter")
            elif tok == "noise":
                chan.noise = _qty(arg, ("", "uv"), "noise")
            elif tok == "off":
                m = re.fullmatch(rf"({_NUM})s?-({_NUM})s", arg)
                if not m:
                    raise IngestError(f"bad off range {arg!r} (expected <t0>s-<t1>s)")
                chan.off.append((float(m.group(1)), float(m.group(2))))
            else:
                raise IngestError(f"unexpected token {tokens[i]!r} in {spec!r}")
            i += 2
        if comp is not None:
            chan.components.append(comp)
    return chan


class SyntheticSource(StreamSource):
    """Seeded generator; identical seeds give bit-identical blocks."""

    def __init__(self, desc: StreamDescriptor, stream_id: str | None = None):
        super().__init__(desc, stream_id)
        specs = desc.source if isinstance(desc.source, tuple) else tuple(desc.source.split(";"))
        n = desc.channel_count or (len(EEG_ELECTRODES) if desc.kind == StreamKind.EEG else len(specs))
        if len(specs) == 1:
            specs = specs * n
        if len(specs) != n:
            raise IngestError(f"{len(specs)} channel specs for {n} channels")
        _check_channels(desc.kind, n)
        self.channels = [parse_synthetic(s) for s in specs]
        self.total = int(round(desc.duration_s * self.rate))
        seeds = np.random.SeedSequence([desc.seed, int(desc.kind)]).spawn(2 * n)
        self._noise_rngs = [np.random.default_rng(s) for s in seeds[:n]]
        self._beats = [self._beat_schedule(ch, np.random.default_rng(s)) for ch, s in zip(self.channels, seeds[n:])]

    def _beat_schedule(self, chan: SyntheticChannel, rng) -> list[np.ndarray]:
        out = []
        for comp in chan.components:
            if comp.kind != "pulse":
                out.append(np.empty(0))
                continue
            count = int(self.desc.duration_s / comp.period_s) + 2
            t = np.arange(1, count + 1) * comp.period_s
            if comp.jitter_s:
                t = t + rng.uniform(-comp.jitter_s, comp.jitter_s, size=count)
            out.append(np.round(t * self.rate))
        return out

    def _render(self, c: int, start: int, n: int) -> np.ndarray:
        chan = self.channels[c]
        ticks = np.arange(start, start + n)
        t = ticks / self.rate
        x = np.zeros(n)
        for comp, beats in zip(chan.components, self._beats[c]):
            if comp.kind == "sine":
                wave = comp.amp * np.sin(2 * np.pi * comp.freq_hz * t)
                if comp.am_hz is not None:
                    wave *= 0.5 * (1.0 + np.sin(2 * np.pi * comp.am_hz * t))
                x += wave
            else:
                width = 0.004 * self.rate
                reach = 6 * width
                near = beats[(beats > start - reach) & (beats < start + n + reach)]
                for b in near:
                    x += comp.amp * np.exp(-0.5 * ((ticks - b) / width) ** 2)
        if chan.noise:
            x += chan.noise * self._noise_rngs[c].standard_normal(n)
        for t0, t1 in chan.off:
            x[(t >= t0) & (t < t1)] = 0.0
        return x

    def read(self):
        if self._tick >= self.total:
            return END_OF_STREAM
        n = min(self._next_len(), self.total - self._tick)
        data = np.vstack([self._render(c, self._tick, n) for c in range(len(self.channels))])
        block = SampleBlock(self.stream_id, self._tick, data)
        self._tick += n
        self._index += 1
        return block


# -------------------------------------------------------------------- socket

def encode_frame(kind: StreamKind, start_tick: int, samples: np.ndarray) -> bytes:
    samples = np.atleast_2d(np.asarray(samples, dtype="<f4"))
    ch, n = samples.shape
    return _FRAME_HEADER.pack(FRAME_MAGIC, int(kind), start_tick, ch, n) + samples.tobytes(order="C")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise IngestError("connection closed mid-frame")
            return b""
        buf.extend(chunk)
    return bytes(buf)


def decode_frame(header: bytes, payload: bytes) -> tuple[StreamKind, int, np.ndarray]:
    magic, kind, start, ch, n = _FRAME_HEADER.unpack(header)
    if magic != FRAME_MAGIC:
        raise IngestError(f"bad frame magic 0x{magic:08x}")
    if len(payload) != 4 * ch * n:
        raise IngestError("frame payload length mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(ch, n).astype(np.float64)
    return StreamKind(kind), start, data


class SocketSource(StreamSource):
    """TCP client reading binary frames; EOF when the peer closes."""

    def __init__(self, desc: StreamDescriptor, stream_id: str | None = None, timeout: float = 5.0):
        super().__init__(desc, stream_id)
        m = re.fullmatch(r"tcp://([^:]+):(\d+)", str(desc.source))
        if not m:
            raise IngestError(f"bad socket endpoint {desc.source!r}")
        try:
            self.sock = socket.create_connection((m.group(1), int(m.group(2))), timeout=timeout)
        except OSError as exc:
            raise IngestError(f"cannot reach {desc.source}: {exc}") from exc
        self.sock.settimeout(None)

    def read(self):
        header = _recv_exact(self.sock, _FRAME_HEADER.size)
        if not header:
            return END_OF_STREAM
        ch, n = _FRAME_HEADER.unpack(header)[3:5]
        kind, start, data = decode_frame(header, _recv_exact(self.sock, 4 * ch * n))
        if kind != self.desc.kind:
            raise IngestError(f"frame kind {kind.name} on a {self.desc.kind.name} stream")
        if self.desc.channel_count and ch != self.desc.channel_count:
            raise IngestError(f"frame has {ch} channels, expected {self.desc.channel_count}")
        self._tick = start + n
        return SampleBlock(self.stream_id, start, data)

    def close(self) -> None:
        self.sock.close()


# ---------------------------------------------------------------------------

def open_stream(desc: StreamDescriptor, stream_id: str | None = None) -> StreamSource:
    """Open a stream handle for the descriptor; raises IngestError on bad sources."""
    if desc.source_type == "synthetic":
        return SyntheticSource(desc, stream_id)
    if desc.source_type == "socket":
        if desc.channel_count:
            _check_channels(desc.kind, desc.channel_count)
        return SocketSource(desc, stream_id)
    if desc.kind == StreamKind.AUDIO:
        paths = desc.source if isinstance(desc.source, tuple) else (desc.source,)
        chans = []
        for p in paths:
            rate, x = read_wav_channel(Path(p))
            if desc.sample_rate_hz and desc.sample_rate_hz != rate:
                raise IngestError(f"{p}: declared {rate} Hz, descriptor expects {desc.sample_rate_hz} Hz")
            if rate != AUDIO_RATE:
                x = resample_audio(SampleBlock("tmp", 0, x[None, :]), rate).samples[0]
            chans.append(x)
        _check_channels(desc.kind, len(chans))
        n = min(len(c) for c in chans)
        data = np.vstack([c[:n] for c in chans])
        return ArraySource(
            StreamDescriptor(desc.kind, desc.source, "file", len(chans), AUDIO_RATE, block_len=desc.block_len),
            data, stream_id,
        )
    rate, data = read_csv_stream(Path(desc.source))
    expected = desc.sample_rate_hz or DEFAULT_RATES[desc.kind]
    if rate != expected:
        raise IngestError(f"{desc.source}: declared {rate} Hz, expected {expected} Hz")
    _check_channels(desc.kind, data.shape[0])
    if desc.channel_count and desc.channel_count != data.shape[0]:
        raise IngestError(f"{desc.source}: {data.shape[0]} channels, descriptor says {desc.channel_count}")
    return ArraySource(
        StreamDescriptor(desc.kind, desc.source, "file", data.shape[0], rate, block_len=desc.block_len),
        data, stream_id,
    )


class StreamPump:
    """Producer thread moving blocks from a source into a bounded queue.

    File and synthetic sources block when the queue is full; socket sources
    drop the oldest queued block and count the drop.
    """

    def __init__(self, source: StreamSource, maxsize: int = 64):
        self.source = source
        self.drop_oldest = source.desc.source_type == "socket"
        self.dropped = 0
        self.error: Exception | None = None
        self._q: queue.Queue = queue.Queue(maxsize=maxsize)
        self._dq: collections.deque = collections.deque(maxlen=maxsize)
        self._cv = threading.Condition()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"pump-{source.stream_id}", daemon=True)

    def start(self) -> "StreamPump":
        self._thread.start()
        return self

    def _put(self, item) -> None:
        if self.drop_oldest:
            with self._cv:
                if len(self._dq) == self._dq.maxlen and item is not END_OF_STREAM:
                    self.dropped += 1
                self._dq.append(item)
                self._cv.notify()
            return
        while not self._stop.is_set():
            try:
                self._q.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def _run(self) -> None:
        try:
            for block in self.source:
                if self._stop.is_set():
                    break
                self._put(block)
        except Exception as exc:  # surfaced to the consumer on get()
            self.error = exc
        finally:
            self._put(END_OF_STREAM)

    def get(self):
        if self.drop_oldest:
            with self._cv:
                while not self._dq:
                    self._cv.wait()
                item = self._dq.popleft()
        else:
            item = self._q.get()
        if item is END_OF_STREAM and self.error is not None:
            raise IngestError(f"{self.source.stream_id}: {self.error}") from self.error
        return item

    def stop(self) -> None:
        self._stop.set()
        # drain so a blocked producer can observe the stop flag
        try:
            while True:
                self._q.get_nowait()
        except queue.Empty:
            pass
        self._thread.join(timeout=2.0)
        self.source.close()
