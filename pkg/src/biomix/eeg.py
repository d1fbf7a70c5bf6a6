"""EEG band powers, attention/relaxation and electrode artifact tracking."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .ingest import EEG_ELECTRODES, SampleBlock

EEG_RATE = 250
WINDOW_SAMPLES = 1000
ALPHA_BAND = (8.0, 13.0)
BETA_BAND = (13.0, 30.0)


class ElectrodeFlag(str, enum.Enum):
    OK = "OK"
    TRANSIENT_ARTIFACT = "TRANSIENT_ARTIFACT"
    DEAD = "DEAD"


class DeviceFlag(str, enum.Enum):
    ACTIVE = "ACTIVE"
    DEACTIVATED = "DEACTIVATED"


@dataclass(frozen=True)
class EegWindow:
    samples: np.ndarray  # (4, 1000) microvolts
    end_tick: int

    def __post_init__(self):
        if self.samples.shape != (len(EEG_ELECTRODES), WINDOW_SAMPLES):
            raise ValueError(f"EEG window must be {len(EEG_ELECTRODES)}x{WINDOW_SAMPLES}, got {self.samples.shape}")


@dataclass(frozen=True)
class BandPowers:
    alpha: float
    beta: float


@dataclass(frozen=True)
class AttentionRelaxation:
    attention: float
    relaxation: float
    valid: bool
    imputed: bool

    @classmethod
    def from_attention(cls, attention: float, valid: bool = True, imputed: bool = False):
        return cls(attention, 1.0 - attention, valid, imputed)


NEUTRAL = AttentionRelaxation(0.5, 0.5, valid=False, imputed=True)


@dataclass(frozen=True)
class ElectrodeStatus:
    flags: tuple[ElectrodeFlag, ...] = (ElectrodeFlag.OK,) * len(EEG_ELECTRODES)
    device: DeviceFlag = DeviceFlag.ACTIVE
    flat_run: tuple[int, ...] = (0,) * len(EEG_ELECTRODES)

    def ok_mask(self) -> np.ndarray:
        return np.array([f == ElectrodeFlag.OK for f in self.flags])


def _spectrum(x: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Hann periodogram of the mean-removed rows of ``x``, per bin."""
    x = np.atleast_2d(x)
    n = x.shape[-1]
    w = np.hanning(n)
    X = np.fft.rfft((x - x.mean(axis=-1, keepdims=True)) * w, axis=-1)
    p = np.abs(X) ** 2 / (fs * np.sum(w * w)) * (fs / n)
    p[..., 1:(n + 1) // 2] *= 2.0  # fold negative frequencies; DC and Nyquist stay single
    return np.fft.rfftfreq(n, 1.0 / fs), p


def _check_band(band, fs: float) -> None:
    lo, hi = band
    if not (0 <= lo < hi <= fs / 2):
        raise ValueError(f"band [{lo}, {hi}) outside [0, {fs / 2}] Hz")


def band_power(window: EegWindow, electrode: int, band: tuple[float, float], fs: float = EEG_RATE) -> float:
    """Summed periodogram power over bins with centre frequency in [lo, hi)."""
    _check_band(band, fs)
    freqs, p = _spectrum(window.samples[electrode], fs)
    sel = (freqs >= band[0]) & (freqs < band[1])
    return float(p[0, sel].sum())


def window_band_powers(window: EegWindow, fs: float = EEG_RATE) -> list[BandPowers]:
    freqs, p = _spectrum(window.samples, fs)
    a = (freqs >= ALPHA_BAND[0]) & (freqs < ALPHA_BAND[1])
    b = (freqs >= BETA_BAND[0]) & (freqs < BETA_BAND[1])
    return [BandPowers(float(row[a].sum()), float(row[b].sum())) for row in p]


def impute_previous(history: AttentionRelaxation | None) -> AttentionRelaxation:
    if history is None:
        return NEUTRAL
    return replace(history, imputed=True)


def attention_relaxation(powers, history: AttentionRelaxation | None = None) -> AttentionRelaxation:
    """Ratio of summed beta to summed alpha+beta over the given (OK) electrodes.

    Falls back to :func:`impute_previous` when no electrode is usable or the
    band powers vanish.
    """
    alpha = sum(p.alpha for p in powers)
    beta = sum(p.beta for p in powers)
    if not powers or alpha + beta <= 0.0:
        return impute_previous(history)
    return AttentionRelaxation.from_attention(beta / (alpha + beta))


def detect_eeg_artifact(window: EegWindow, state: ElectrodeStatus, theta_flat_uv: float = 1.0,
                        t_dead_windows: int = 3) -> ElectrodeStatus:
    """Flat-signal classification per electrode.

    An electrode below ``theta_flat_uv`` peak-to-peak is a transient artifact;
    ``t_dead_windows`` consecutive flat windows make it DEAD. The device is
    DEACTIVATED while every electrode is DEAD and reactivates as soon as any
    electrode recovers.
    """
    ptp = np.ptp(window.samples, axis=1)
    flags, runs = [], []
    for amp, run in zip(ptp, state.flat_run):
        if amp < theta_flat_uv:
            run += 1
            flags.append(ElectrodeFlag.DEAD if run >= t_dead_windows else ElectrodeFlag.TRANSIENT_ARTIFACT)
        else:
            run = 0
            flags.append(ElectrodeFlag.OK)
        runs.append(run)
    device = DeviceFlag.DEACTIVATED if all(f == ElectrodeFlag.DEAD for f in flags) else DeviceFlag.ACTIVE
    return ElectrodeStatus(tuple(flags), device, tuple(runs))


@dataclass
class EegFeatures:
    end_tick: int
    value: AttentionRelaxation
    status: ElectrodeStatus
    device_changed: bool = False


@dataclass
class EegPipeline:
    """Sliding-window stage: 1000-sample windows every ``hop_samples`` samples."""

    hop_samples: int = 500
    theta_flat_uv: float = 1.0
    t_dead_windows: int = 3
    status: ElectrodeStatus = field(default_factory=ElectrodeStatus)
    last: AttentionRelaxation | None = None
    _buf: np.ndarray = field(default_factory=lambda: np.zeros((len(EEG_ELECTRODES), 0)))
    _buf_start: int = 0
    _next_end: int = WINDOW_SAMPLES

    def feed(self, block: SampleBlock) -> list[EegFeatures]:
        if block.start_tick != self._buf_start + self._buf.shape[1]:
            raise ValueError(f"EEG gap: block at {block.start_tick}, expected {self._buf_start + self._buf.shape[1]}")
        self._buf = np.concatenate([self._buf, block.samples], axis=1)
        out = []
        while self._buf_start + self._buf.shape[1] >= self._next_end:
            lo = self._next_end - WINDOW_SAMPLES - self._buf_start
            out.append(self.process(EegWindow(self._buf[:, lo:lo + WINDOW_SAMPLES].copy(), self._next_end)))
            self._next_end += self.hop_samples
        keep_from = self._next_end - WINDOW_SAMPLES - self._buf_start
        if keep_from > 0:
            self._buf = self._buf[:, keep_from:]
            self._buf_start += keep_from
        return out

    def process(self, window: EegWindow) -> EegFeatures:
        prev_device = self.status.device
        self.status = detect_eeg_artifact(window, self.status, self.theta_flat_uv, self.t_dead_windows)
        powers = window_band_powers(window)
        usable = [p for p, ok in zip(powers, self.status.ok_mask()) if ok]
        value = attention_relaxation(usable, self.last)
        self.last = value
        return EegFeatures(window.end_tick, value, self.status, self.status.device != prev_device)
