"""R-peak detection, RR-interval history and the Baevsky stress index."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.ndimage import maximum_filter1d

from .ingest import SampleBlock

ECG_RATE = 1000
RR_MIN_MS = 300.0
RR_MAX_MS = 2000.0
BIN_ORIGIN_MS = 300.0

DEFAULT_MEDIAN = 150.0
DEFAULT_SPREAD = 1.0
NEUTRAL_SI_NORM = 0.25


class InsufficientIntervals(ValueError):
    pass


def gate_intervals(rr_ms) -> np.ndarray:
    rr = np.asarray(rr_ms, dtype=np.float64)
    return rr[(rr >= RR_MIN_MS) & (rr <= RR_MAX_MS)]


def baevsky_si(rr_ms, bin_ms: float = 50.0, mxdmn_floor_s: float = 0.016, min_intervals: int = 5) -> float:
    """Baevsky stress index AMo / (2 * Mo * MxDMn).

    AMo is the percentage of intervals in the modal bin, Mo the modal bin
    centre and MxDMn the interval range, both in seconds. Bins are
    ``bin_ms`` wide starting at 300 ms; ties go to the lowest bin.
    """
    rr = gate_intervals(rr_ms)
    if rr.size < min_intervals:
        raise InsufficientIntervals(f"{rr.size} plausible intervals, need {min_intervals}")
    idx = np.floor((rr - BIN_ORIGIN_MS) / bin_ms).astype(np.int64)
    counts = np.bincount(idx - idx.min())
    mode_bin = int(np.argmax(counts)) + int(idx.min())
    amo = 100.0 * counts.max() / rr.size
    mo_s = (BIN_ORIGIN_MS + (mode_bin + 0.5) * bin_ms) / 1000.0
    mxdmn_s = max((rr.max() - rr.min()) / 1000.0, mxdmn_floor_s)
    return amo / (2.0 * mo_s * mxdmn_s)


def normalize_si(si_raw: float, median: float = DEFAULT_MEDIAN, spread: float = DEFAULT_SPREAD) -> float:
    z = (math.log(si_raw) - math.log(median)) / spread
    if z < -700:
        return 0.0
    return 1.0 / (1.0 + math.exp(-z))


def denormalize_si(si_norm: float, median: float = DEFAULT_MEDIAN, spread: float = DEFAULT_SPREAD) -> float:
    return median * math.exp(spread * math.log(si_norm / (1.0 - si_norm)))


@dataclass(frozen=True)
class StressIndex:
    end_tick: int
    si_raw: float
    si_norm: float
    valid: bool
    imputed: bool


class RRSeries:
    """Plausibility-gated RR intervals keyed by end tick, trimmed to a horizon."""

    def __init__(self, horizon_ms: float = 15000.0):
        self.horizon_ms = horizon_ms
        self._items: deque[tuple[int, float]] = deque()

    def append(self, end_tick: int, rr_ms: float) -> bool:
        if not (RR_MIN_MS <= rr_ms <= RR_MAX_MS):
            return False
        if self._items and end_tick < self._items[-1][0]:
            raise ValueError("RR intervals must arrive in end-tick order")
        self._items.append((end_tick, rr_ms))
        return True

    def trailing(self, now_tick: int, rate: int = ECG_RATE) -> list[float]:
        cutoff = now_tick - self.horizon_ms * rate / 1000.0
        while self._items and self._items[0][0] <= cutoff:
            self._items.popleft()
        return [rr for t, rr in self._items if t <= now_tick]

    def __len__(self) -> int:
        return len(self._items)


class RPeakDetector:
    """Streaming Pan-Tompkins style detector.

    Band-pass 5-15 Hz, five-point derivative, squaring, 150 ms moving-window
    integration, then local maxima of the integrated signal are classified
    against an adaptive threshold. The largest band-passed excursion in the
    150 ms before the integrated peak locates the beat; the R tick is then the
    largest raw deviation from the local median in the preceding 100 ms,
    which undoes the band-pass group delay. Output ticks are delayed by the
    200 ms look-ahead.
    """

    def __init__(self, rate: int = ECG_RATE, refractory_s: float = 0.25, learn_s: float = 2.0):
        self.rate = rate
        self.refractory = int(round(refractory_s * rate))
        self.learn = int(round(learn_s * rate))
        self.win = int(round(0.15 * rate))
        self.look = int(round(0.2 * rate))
        self.delay = int(round(0.1 * rate))  # bounds the band-pass group delay
        self._sos = signal.butter(2, [5.0, 15.0], btype="bandpass", fs=rate, output="sos")
        self._zi_bp = np.zeros((self._sos.shape[0], 2))
        self._deriv = np.array([2.0, 1.0, 0.0, -1.0, -2.0]) * (rate / 8.0)
        self._zi_d = np.zeros(len(self._deriv) - 1)
        self._mwi_b = np.ones(self.win) / self.win
        self._zi_m = np.zeros(self.win - 1)
        self._raw = np.zeros(0)
        self._bp = np.zeros(0)
        self._mwi = np.zeros(0)
        self._start = 0  # global tick of _bp[0]
        self._scan_from = 0  # next global tick to examine as a candidate
        self.spki: float | None = None
        self.npki = 0.0
        self.last_peak: int | None = None

    @property
    def threshold(self) -> float:
        if self.spki is None:
            return math.inf
        return self.npki + 0.25 * (self.spki - self.npki)

    def process(self, samples: np.ndarray) -> list[int]:
        x = np.asarray(samples, dtype=np.float64).ravel()
        bp, self._zi_bp = signal.sosfilt(self._sos, x, zi=self._zi_bp)
        d, self._zi_d = signal.lfilter(self._deriv, [1.0], bp, zi=self._zi_d)
        m, self._zi_m = signal.lfilter(self._mwi_b, [1.0], d * d, zi=self._zi_m)
        self._raw = np.concatenate([self._raw, x])
        self._bp = np.concatenate([self._bp, bp])
        self._mwi = np.concatenate([self._mwi, m])
        end = self._start + len(self._mwi)
        if self.spki is None:
            if end < self.learn:
                return []
            head = self._mwi[: self.learn - self._start]
            self.spki = float(head.max()) / 3.0
            self.npki = float(head.mean()) / 2.0
        peaks = self._scan(end - self.look)
        self._trim()
        return peaks

    def _scan(self, stop: int) -> list[int]:
        lo = max(self._scan_from, self._start + 1)
        if stop <= lo:
            return []
        # local maxima over +-look samples, first sample of any plateau
        a = lo - self._start
        b = stop - self._start
        seg_lo = max(a - self.look, 0)
        seg = self._mwi[seg_lo: b + self.look]
        local_max = maximum_filter1d(seg, size=2 * self.look + 1, mode="nearest")
        off = a - seg_lo
        mw = self._mwi[a:b]
        prev = self._mwi[a - 1:b - 1]
        cand = np.nonzero((mw >= local_max[off:off + (b - a)]) & (mw > prev) & (mw > 0.0))[0]
        peaks = []
        for c in cand:
            i = int(c) + a
            value = float(self._mwi[i])
            if value > self.threshold:
                r_lo = max(i - self.win, 0)
                r = r_lo + int(np.argmax(np.abs(self._bp[r_lo:i + 1])))
                seg = self._raw[max(r - self.delay, 0):r + 1]
                r = r - len(seg) + 1 + int(np.argmax(np.abs(seg - np.median(seg))))
                r_tick = r + self._start
                if self.last_peak is not None and r_tick - self.last_peak < self.refractory:
                    continue
                self.spki = 0.125 * value + 0.875 * self.spki
                self.last_peak = r_tick
                peaks.append(r_tick)
            else:
                self.npki = 0.125 * value + 0.875 * self.npki
        self._scan_from = stop
        return peaks

    def _trim(self) -> None:
        keep = self._scan_from - self._start - self.win - self.look - self.delay - 1
        if keep > 0:
            self._raw = self._raw[keep:]
            self._bp = self._bp[keep:]
            self._mwi = self._mwi[keep:]
            self._start += keep


def detect_r_peaks(samples: np.ndarray, detector: RPeakDetector | None = None) -> list[int]:
    """Peak ticks for a one-shot signal (or one more block for an existing detector)."""
    det = detector or RPeakDetector()
    peaks = det.process(samples)
    if detector is None:
        # flush look-ahead for a finite signal
        peaks += det.process(np.zeros(det.look + det.win))
    return peaks


@dataclass
class StressFeatures:
    value: StressIndex
    device_active: bool
    device_changed: bool = False


@dataclass
class EcgPipeline:
    """Emits one StressIndex per ``update_samples`` of ECG input."""

    bin_ms: float = 50.0
    mxdmn_floor_s: float = 0.016
    min_intervals: int = 5
    median: float = DEFAULT_MEDIAN
    spread: float = DEFAULT_SPREAD
    theta_flat_uv: float = 1.0
    t_dead_updates: int = 6
    update_samples: int = 500
    horizon_s: float = 15.0
    rate: int = ECG_RATE
    detector: RPeakDetector = field(default_factory=RPeakDetector)
    last: StressIndex | None = None
    device_active: bool = True
    peaks: list[int] = field(default_factory=list)
    _tick: int = 0
    _seg_min: float = math.inf
    _seg_max: float = -math.inf
    _flat_run: int = 0

    def __post_init__(self):
        self.rr = RRSeries(self.horizon_s * 1000.0)

    def feed(self, block: SampleBlock) -> list[StressFeatures]:
        if block.start_tick != self._tick:
            raise ValueError(f"ECG gap: block at {block.start_tick}, expected {self._tick}")
        x = block.samples[0]
        out = []
        pos = 0
        while pos < len(x):
            boundary = (self._tick // self.update_samples + 1) * self.update_samples
            take = min(boundary - self._tick, len(x) - pos)
            chunk = x[pos:pos + take]
            self._ingest(chunk)
            self._tick += take
            pos += take
            if self._tick == boundary:
                out.append(self._emit())
        return out

    def _ingest(self, chunk: np.ndarray) -> None:
        self._seg_min = min(self._seg_min, float(chunk.min()))
        self._seg_max = max(self._seg_max, float(chunk.max()))
        for p in self.detector.process(chunk):
            if self.peaks:
                self.rr.append(p, (p - self.peaks[-1]) * 1000.0 / self.rate)
            self.peaks.append(p)
        if len(self.peaks) > 2:
            del self.peaks[:-2]

    def _emit(self) -> StressFeatures:
        flat = self._seg_max - self._seg_min < self.theta_flat_uv
        self._seg_min, self._seg_max = math.inf, -math.inf
        self._flat_run = self._flat_run + 1 if flat else 0
        was_active = self.device_active
        self.device_active = self._flat_run < self.t_dead_updates
        value = None
        if self.device_active:
            try:
                si = baevsky_si(self.rr.trailing(self._tick, self.rate), self.bin_ms, self.mxdmn_floor_s,
                                self.min_intervals)
                value = StressIndex(self._tick, si, normalize_si(si, self.median, self.spread), True, False)
            except InsufficientIntervals:
                pass
        if value is None:
            value = self._impute()
        self.last = value
        return StressFeatures(value, self.device_active, was_active != self.device_active)

    def current(self) -> StressIndex:
        """Last emission, or the imputed neutral value before the first one."""
        return self.last if self.last is not None else self._impute()

    def _impute(self) -> StressIndex:
        if self.last is None:
            raw = denormalize_si(NEUTRAL_SI_NORM, self.median, self.spread)
            return StressIndex(self._tick, raw, NEUTRAL_SI_NORM, False, True)
        return StressIndex(self._tick, self.last.si_raw, self.last.si_norm, False, True)
