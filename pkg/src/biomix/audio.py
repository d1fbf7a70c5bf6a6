"""Valence-arousal estimation over 5 s audio windows at 30 kHz.

Two estimators share one contract: the builtin spectral heuristic and an
external model served over a local stream socket.

External request (little-endian)::

    u32 magic | u8 channel_id | u32 sample_count | float32 samples[sample_count]

Response: ``float32 valence, float32 arousal``.
"""
from __future__ import annotations

import math
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .ingest import AUDIO_RATE, SampleBlock

WINDOW_SECONDS = 5
WINDOW_SAMPLES = WINDOW_SECONDS * AUDIO_RATE

VA_MAGIC = 0x31415642  # b"BVA1" on the wire
_REQ_HEADER = struct.Struct("<IBI")
_RESPONSE = struct.Struct("<ff")

# builtin heuristic constants (documented in the README)
FRAME = 2048
FRAME_HOP = 1024
SILENCE_RMS = 1e-5
ENERGY_FLOOR_DB = -60.0
FLUX_REF = 1.0
AROUSAL_ENERGY_WEIGHT = 0.75
AROUSAL_FLUX_WEIGHT = 0.25
CENTROID_LO_HZ = 100.0
CENTROID_HI_HZ = 15000.0
VALENCE_CENTROID_WEIGHT = 1.5
VALENCE_FLATNESS_WEIGHT = 0.5
VALENCE_BIAS = -0.5


def _clamp(x: float) -> float:
    return min(1.0, max(-1.0, float(x)))


@dataclass(frozen=True)
class VAPoint:
    valence: float
    arousal: float
    channel_id: int = 0
    end_tick: int = 0
    warmup: bool = False
    imputed: bool = False

    def clamped(self) -> "VAPoint":
        return replace(self, valence=_clamp(self.valence), arousal=_clamp(self.arousal))

    def as_array(self) -> np.ndarray:
        return np.array([self.valence, self.arousal])


@dataclass
class AudioWindow:
    samples: np.ndarray
    channel_id: int = 0
    end_tick: int = 0
    warmup: bool = False

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64).ravel()
        if x.size > WINDOW_SAMPLES:
            raise ValueError(f"audio window longer than {WINDOW_SAMPLES} samples")
        if x.size < WINDOW_SAMPLES:
            x = np.concatenate([np.zeros(WINDOW_SAMPLES - x.size), x])
            self.warmup = True
        self.samples = x


@dataclass(frozen=True)
class HeuristicFeatures:
    rms: float
    flux: float
    centroid_hz: float
    flatness: float


def heuristic_features(x: np.ndarray, rate: int = AUDIO_RATE) -> HeuristicFeatures:
    x = np.asarray(x, dtype=np.float64)
    rms = float(np.sqrt(np.mean(x * x)))
    n_frames = 1 + (len(x) - FRAME) // FRAME_HOP
    w = np.hanning(FRAME)
    idx = np.arange(FRAME)[None, :] + FRAME_HOP * np.arange(n_frames)[:, None]
    mag = np.abs(np.fft.rfft(x[idx] * w, axis=1)) / w.sum()
    flux = float(np.mean(np.sum(np.maximum(mag[1:] - mag[:-1], 0.0), axis=1))) if n_frames > 1 else 0.0
    mean_mag = mag.mean(axis=0)
    freqs = np.fft.rfftfreq(FRAME, 1.0 / rate)
    total = mean_mag.sum()
    centroid = float(np.sum(freqs * mean_mag) / total) if total > 0 else 0.0
    power = (mag ** 2).mean(axis=0)[1:]
    if power.max() > 0:
        flatness = float(np.exp(np.mean(np.log(power + 1e-20))) / np.mean(power + 1e-20))
    else:
        flatness = 0.0
    return HeuristicFeatures(rms, flux, centroid, flatness)


def heuristic_va(f: HeuristicFeatures) -> tuple[float, float]:
    """Affine maps from the four sub-features to (valence, arousal)."""
    if f.rms <= SILENCE_RMS:
        return 0.0, -1.0
    db = 20.0 * math.log10(f.rms)
    energy = min(1.0, max(0.0, (db - ENERGY_FLOOR_DB) / -ENERGY_FLOOR_DB))
    flux = 1.0 - math.exp(-f.flux / FLUX_REF)
    arousal = -1.0 + 2.0 * (AROUSAL_ENERGY_WEIGHT * energy + AROUSAL_FLUX_WEIGHT * flux)
    c = max(f.centroid_hz, CENTROID_LO_HZ)
    brightness = min(1.0, math.log(c / CENTROID_LO_HZ) / math.log(CENTROID_HI_HZ / CENTROID_LO_HZ))
    valence = VALENCE_CENTROID_WEIGHT * brightness - VALENCE_FLATNESS_WEIGHT * f.flatness + VALENCE_BIAS
    return _clamp(valence), _clamp(arousal)


def builtin_heuristic(window: AudioWindow) -> VAPoint:
    v, a = heuristic_va(heuristic_features(window.samples))
    return VAPoint(v, a, window.channel_id, window.end_tick, window.warmup)


# ------------------------------------------------------------ wire protocol

def encode_request(channel_id: int, samples: np.ndarray) -> bytes:
    data = np.asarray(samples, dtype="<f4").ravel()
    return _REQ_HEADER.pack(VA_MAGIC, channel_id, data.size) + data.tobytes()


def decode_request(header: bytes) -> tuple[int, int]:
    magic, channel_id, count = _REQ_HEADER.unpack(header)
    if magic != VA_MAGIC:
        raise ValueError(f"bad request magic 0x{magic:08x}")
    return channel_id, count


def encode_response(valence: float, arousal: float) -> bytes:
    return _RESPONSE.pack(valence, arousal)


def decode_response(payload: bytes) -> tuple[float, float]:
    if len(payload) != _RESPONSE.size:
        raise ValueError(f"response must be {_RESPONSE.size} bytes, got {len(payload)}")
    v, a = _RESPONSE.unpack(payload)
    if not (math.isfinite(v) and math.isfinite(a)):
        raise ValueError("non-finite VA response")
    return v, a


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf.extend(chunk)
    return bytes(buf)


def _connect(endpoint: str, timeout: float) -> socket.socket:
    if endpoint.startswith("unix:"):
        s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        s.settimeout(timeout)
        s.connect(endpoint[len("unix:"):])
        return s
    host, _, port = endpoint.rpartition(":")
    return socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)


class ExternalEstimator:
    """Client for an external VA model; one request in flight per connection."""

    def __init__(self, endpoint: str, timeout: float = 0.2):
        self.endpoint = endpoint
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _request(self, channel_id: int, samples: np.ndarray) -> tuple[float, float]:
        if self._sock is None:
            self._sock = _connect(self.endpoint, self.timeout)
        self._sock.settimeout(self.timeout)
        self._sock.sendall(encode_request(channel_id, samples))
        return decode_response(_recv_exact(self._sock, _RESPONSE.size))

    def estimate(self, window: AudioWindow, previous: VAPoint | None = None) -> VAPoint:
        with self._lock:
            try:
                v, a = self._request(window.channel_id, window.samples)
            except socket.timeout:
                self._drop()
                if previous is not None:
                    return replace(previous, end_tick=window.end_tick, warmup=window.warmup, imputed=True)
                return replace(builtin_heuristic(window), imputed=True)
            except (OSError, ValueError, struct.error):
                self._drop()
                return builtin_heuristic(window)
        return VAPoint(v, a, window.channel_id, window.end_tick, window.warmup).clamped()

    def _drop(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def close(self) -> None:
        self._drop()


def estimate_va(window: AudioWindow, estimator: str | ExternalEstimator = "builtin",
                previous: VAPoint | None = None) -> VAPoint:
    if len(window.samples) != WINDOW_SAMPLES:
        raise ValueError(f"audio window must hold {WINDOW_SAMPLES} samples")
    if isinstance(estimator, ExternalEstimator):
        return estimator.estimate(window, previous)
    if estimator != "builtin":
        raise ValueError(f"unknown estimator {estimator!r}")
    return builtin_heuristic(window).clamped()


class _VAHandler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            header = _recv_exact(self.request, _REQ_HEADER.size)
            if len(header) < _REQ_HEADER.size:
                return
            channel_id, count = decode_request(header)
            data = np.frombuffer(_recv_exact(self.request, 4 * count), dtype="<f4").astype(np.float64)
            v, a = self.server.model(channel_id, data)
            self.request.sendall(encode_response(v, a))


class VAServer(socketserver.ThreadingTCPServer):
    """Reference server for the external protocol; ``model(channel_id, samples)``."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: Callable[[int, np.ndarray], tuple[float, float]] | None = None,
                 address=("127.0.0.1", 0)):
        super().__init__(address, _VAHandler)
        self.model = model or (lambda cid, x: heuristic_va(heuristic_features(x)))

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "VAServer":
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self


# -------------------------------------------------------------- stream stage

@dataclass
class AudioPipeline:
    """Per-channel 5 s ring buffers with one VAPoint per channel per hop."""

    n_channels: int
    hop_s: float = 1.0
    estimator: str | ExternalEstimator = "builtin"
    static_va: dict[int, tuple[float, float]] = field(default_factory=dict)
    rate: int = AUDIO_RATE
    latest: list[VAPoint | None] = field(default_factory=list)
    _buf: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    _tick: int = 0

    def __post_init__(self):
        self.hop_samples = int(round(self.hop_s * self.rate))
        self._buf = np.zeros((self.n_channels, WINDOW_SAMPLES))
        self.latest = [None] * self.n_channels

    def feed(self, block: SampleBlock) -> list[list[VAPoint]]:
        if block.start_tick != self._tick:
            raise ValueError(f"audio gap: block at {block.start_tick}, expected {self._tick}")
        x = block.samples
        out = []
        pos = 0
        while pos < x.shape[1]:
            boundary = (self._tick // self.hop_samples + 1) * self.hop_samples
            take = min(boundary - self._tick, x.shape[1] - pos)
            self._buf = np.concatenate([self._buf[:, take:], x[:, pos:pos + take]], axis=1)
            self._tick += take
            pos += take
            if self._tick == boundary:
                out.append(self._estimate_all())
        return out

    def _estimate_all(self) -> list[VAPoint]:
        warm = self._tick < WINDOW_SAMPLES
        points = []
        for c in range(self.n_channels):
            if c in self.static_va:
                v, a = self.static_va[c]
                p = VAPoint(v, a, c, self._tick).clamped()
            else:
                win = AudioWindow(self._buf[c], c, self._tick)
                win.warmup = warm
                p = estimate_va(win, self.estimator, self.latest[c])
            points.append(p)
        self.latest = points
        return points
