"""Session orchestration: live/replayed runs, calibration and replay.

Each source has its own producer thread feeding a bounded queue. The single
decision loop advances in virtual time: before tick ``k`` it pulls blocks
from every stream until that stream has delivered ``k * tick_s`` seconds of
samples, so results never depend on thread scheduling.
"""
from __future__ import annotations

import csv
import json
import logging
import signal
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioPipeline, ExternalEstimator, VAPoint
from .config import EngineConfig
from .ecg import DEFAULT_MEDIAN, EcgPipeline
from .eeg import NEUTRAL, EegPipeline, ElectrodeStatus
from .events import EmotionalState, EventWriter, SessionEvent, read_events
from .ingest import EEG_ELECTRODES, END_OF_STREAM, StreamDescriptor, StreamKind, StreamPump, open_stream
from .mixer import DecisionEngine, FeatureSnapshot, MidiEmitter, MidiMap, OscMirror, StrengthControl, \
    open_strength_input
from .rules import Ruleset, load_validated

log = logging.getLogger(__name__)

MIN_SPREAD = 0.1


class SessionError(RuntimeError):
    pass


def load_rulesets(cfg: EngineConfig, refs: list[str] | None = None) -> list[Ruleset]:
    return [load_validated(cfg.resolve(r)) for r in (refs or cfg.session.rulesets)]


def load_calibration(cfg: EngineConfig) -> tuple[float, float]:
    if not cfg.session.calibration_file:
        return cfg.ecg.calibration.median, cfg.ecg.calibration.spread
    path = Path(cfg.resolve(cfg.session.calibration_file))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return float(data["ecg"]["median"]), float(data["ecg"]["spread"])
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise SessionError(f"bad calibration file {path}: {exc}") from exc


@dataclass
class _Stream:
    kind: StreamKind
    pump: StreamPump
    rate: int
    consumed: int = 0
    done: bool = False


def _open(cfg: EngineConfig, kind: StreamKind, source, seed_offset: int, seed: int) -> _Stream:
    if isinstance(source, list):
        source = [cfg.resolve(s) for s in source]
    else:
        source = cfg.resolve(source)
    desc = StreamDescriptor.parse(kind, source, duration_s=cfg.streams.duration_s, seed=seed + seed_offset)
    handle = open_stream(desc)
    return _Stream(kind, StreamPump(handle).start(), handle.rate)


@dataclass
class Session:
    cfg: EngineConfig
    headless: bool = False
    seed: int | None = None
    rulesets: list[Ruleset] | None = None
    max_ticks: int | None = None
    streams: dict[StreamKind, _Stream] = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.cfg
        self.seed = cfg.session.seed if self.seed is None else self.seed
        if self.rulesets is None:
            self.rulesets = load_rulesets(cfg)
        if not cfg.streams.audio:
            raise SessionError("streams.audio is required (dry channel plus FX channels)")
        median, spread = load_calibration(cfg)
        self.eeg = EegPipeline(cfg.eeg.hop_samples, cfg.eeg.theta_flat_uv, cfg.eeg.t_dead_windows)
        self.ecg = EcgPipeline(cfg.ecg.bin_ms, cfg.ecg.mxdmn_floor_s, cfg.ecg.min_intervals, median, spread,
                               cfg.ecg.theta_flat_uv, cfg.ecg.t_dead_updates)
        estimator = "builtin"
        if cfg.audio.estimator == "external":
            estimator = ExternalEstimator(cfg.audio.external_endpoint, cfg.audio.timeout_s)
        static = {int(k): (float(v[0]), float(v[1])) for k, v in cfg.audio.static_va.items()}
        self.audio = AudioPipeline(cfg.session.n_fx + 1, cfg.audio.hop_s, estimator, static)
        mmap = MidiMap(cfg.midi.channel, cfg.midi.dry_cc, tuple(cfg.cc_per_fx()), cfg.midi.strength_cc)
        port = None if self.headless else (cfg.midi.port or None)
        osc = OscMirror(cfg.osc.host, cfg.osc.port, cfg.osc.address) if cfg.osc.enabled else None
        self.strength = StrengthControl(cfg.midi.strength)
        self.engine = DecisionEngine(self.rulesets, cfg.session.n_fx, mmap, cfg.mix.tau, cfg.mix.g_floor,
                                     cfg.mix.smoothing_tau_s, cfg.mix.tick_s, MidiEmitter(mmap, port), osc,
                                     self.strength)
        self._midi_in = None
        if not self.headless and cfg.midi.input_port:
            self._midi_in = open_strength_input(cfg.midi.input_port, cfg.midi.strength_cc, self.strength,
                                                cfg.midi.channel)
        self._stop = threading.Event()
        self._pending: dict[StreamKind, list] = {StreamKind.EEG: [], StreamKind.ECG: [], StreamKind.AUDIO: []}
        self._eeg_latest = None
        self._ecg_latest = None
        self._va_latest: list[VAPoint] | None = None

    def stop(self) -> None:
        self._stop.set()

    def _open_streams(self) -> None:
        cfg = self.cfg
        if cfg.streams.eeg:
            self.streams[StreamKind.EEG] = _open(cfg, StreamKind.EEG, cfg.streams.eeg, 1, self.seed)
        if cfg.streams.ecg:
            self.streams[StreamKind.ECG] = _open(cfg, StreamKind.ECG, cfg.streams.ecg, 2, self.seed)
        self.streams[StreamKind.AUDIO] = _open(cfg, StreamKind.AUDIO, list(cfg.streams.audio), 3, self.seed)

    def _advance(self, st: _Stream, target: int) -> bool:
        while st.consumed < target:
            block = st.pump.get()
            if block is END_OF_STREAM:
                st.done = True
                return False
            st.consumed = block.end_tick
            if st.kind == StreamKind.EEG:
                self._pending[st.kind].extend(self.eeg.feed(block))
            elif st.kind == StreamKind.ECG:
                self._pending[st.kind].extend(self.ecg.feed(block))
            else:
                self._pending[st.kind].extend(self.audio.feed(block))
        return True

    def _take_latest(self, kind: StreamKind, target: int, end_tick) -> None:
        pend = self._pending[kind]
        keep = []
        for item in pend:
            if end_tick(item) <= target:
                if kind == StreamKind.EEG:
                    self._eeg_latest = item
                elif kind == StreamKind.ECG:
                    self._ecg_latest = item
                else:
                    self._va_latest = item
            else:
                keep.append(item)
        self._pending[kind] = keep

    def snapshot(self) -> FeatureSnapshot:
        n = self.cfg.session.n_fx
        status = {"eeg": "ABSENT", "ecg": "ABSENT", "audio": "ACTIVE"}
        eeg_value, electrodes = NEUTRAL, None
        if StreamKind.EEG in self.streams:
            status["eeg"] = "ACTIVE"
            electrodes = ElectrodeStatus()
            if self._eeg_latest is not None:
                eeg_value = self._eeg_latest.value
                electrodes = self._eeg_latest.status
                status["eeg"] = electrodes.device.value
        if electrodes is not None:
            status["electrodes"] = {name: f.value for name, f in zip(EEG_ELECTRODES, electrodes.flags)}
        if StreamKind.ECG in self.streams:
            if self._ecg_latest is not None:
                si = self._ecg_latest.value
                status["ecg"] = "ACTIVE" if self._ecg_latest.device_active else "DEACTIVATED"
                stress = (si.si_norm, si.si_raw, si.valid, si.imputed)
            else:
                status["ecg"] = "ACTIVE"
                si = self.ecg.current()
                stress = (si.si_norm, si.si_raw, False, True)
        else:
            stress = (0.25, DEFAULT_MEDIAN / 3.0, False, True)
        state = EmotionalState(eeg_value.attention, eeg_value.relaxation, stress[0], stress[1],
                               eeg_value.valid, eeg_value.imputed, stress[2], stress[3])
        va = self._va_latest or [VAPoint(0.0, 0.0, c, 0, warmup=True, imputed=True) for c in range(n + 1)]
        return FeatureSnapshot(state, va[0], list(va[1:]), status)

    def run(self, log_path: str | Path | None = None) -> int:
        """Run until any stream ends (or stop()); returns the number of ticks."""
        self._open_streams()
        tick_s = self.cfg.mix.tick_s
        ticks = 0
        t0 = time.monotonic()
        try:
            with EventWriter(log_path) as writer:
                k = 0
                while not self._stop.is_set():
                    if self.max_ticks is not None and k >= self.max_ticks:
                        break
                    k += 1
                    t = k * tick_s
                    alive = True
                    for kind, st in self.streams.items():
                        target = int(round(t * st.rate))
                        if not self._advance(st, target):
                            alive = False
                            break
                        if kind == StreamKind.AUDIO:
                            self._take_latest(kind, target, lambda pts: pts[0].end_tick)
                        elif kind == StreamKind.EEG:
                            self._take_latest(kind, target, lambda f: f.end_tick)
                        else:
                            self._take_latest(kind, target, lambda f: f.value.end_tick)
                    if not alive:
                        break
                    if self.cfg.session.realtime:
                        delay = t0 + t - time.monotonic()
                        if delay > 0:
                            time.sleep(delay)
                    _, event = self.engine.tick(k, self.snapshot())
                    writer.write(event)
                    ticks += 1
        finally:
            for st in self.streams.values():
                st.pump.stop()
            if self._midi_in is not None:
                self._midi_in.close()
            est = self.audio.estimator
            if isinstance(est, ExternalEstimator):
                est.close()
        return ticks


def run_session(cfg: EngineConfig, log_path=None, headless: bool = False, seed: int | None = None,
                rulesets: list[Ruleset] | None = None) -> int:
    session = Session(cfg, headless=headless, seed=seed, rulesets=rulesets)
    if threading.current_thread() is threading.main_thread():
        previous = signal.signal(signal.SIGTERM, lambda *_: session.stop())
    else:
        previous = None
    try:
        return session.run(log_path)
    except KeyboardInterrupt:
        session.stop()
        return 0
    finally:
        if previous is not None:
            signal.signal(signal.SIGTERM, previous)


# ---------------------------------------------------------------- calibrate

@dataclass
class CalibrationResult:
    duration_s: float
    median: float | None
    spread: float | None
    si_count: int
    electrodes: dict[str, dict]

    def to_dict(self) -> dict:
        out = {"duration_s": self.duration_s, "eeg": {"electrodes": self.electrodes}}
        if self.median is not None:
            out["ecg"] = {"median": self.median, "spread": self.spread, "si_count": self.si_count}
        return out


class CalibrationError(SessionError):
    pass


def calibrate(cfg: EngineConfig, duration_s: float | None = None, seed: int | None = None) -> CalibrationResult:
    """Record ``duration_s`` of resting data: SI baseline and electrode sanity report."""
    duration = cfg.session.calibration_s if duration_s is None else duration_s
    seed = cfg.session.seed if seed is None else seed
    if duration <= 0:
        raise CalibrationError("insufficient data: calibration duration must be positive")
    if not cfg.streams.eeg and not cfg.streams.ecg:
        raise CalibrationError("no biosignal streams configured")

    median = spread = None
    si_values: list[float] = []
    if cfg.streams.ecg:
        st = _open(cfg, StreamKind.ECG, cfg.streams.ecg, 2, seed)
        pipe = EcgPipeline(cfg.ecg.bin_ms, cfg.ecg.mxdmn_floor_s, cfg.ecg.min_intervals,
                           theta_flat_uv=cfg.ecg.theta_flat_uv, t_dead_updates=cfg.ecg.t_dead_updates)
        target = int(round(duration * st.rate))
        try:
            while st.consumed < target:
                block = st.pump.get()
                if block is END_OF_STREAM:
                    break
                keep = min(block.block_len, target - st.consumed)
                block.samples = block.samples[:, :keep]
                st.consumed = block.end_tick
                si_values += [f.value.si_raw for f in pipe.feed(block) if f.value.valid]
        finally:
            st.pump.stop()
        if not si_values:
            raise CalibrationError("insufficient data: no valid stress index during calibration")
        median = float(np.median(si_values))
        spread = max(float(np.std(np.log(si_values))), MIN_SPREAD)

    electrodes = {}
    if cfg.streams.eeg:
        st = _open(cfg, StreamKind.EEG, cfg.streams.eeg, 1, seed)
        target = int(round(duration * st.rate))
        chunks = []
        try:
            while st.consumed < target:
                block = st.pump.get()
                if block is END_OF_STREAM:
                    break
                chunks.append(block.samples[:, :target - st.consumed])
                st.consumed = block.end_tick
        finally:
            st.pump.stop()
        data = np.concatenate(chunks, axis=1) if chunks else np.zeros((len(EEG_ELECTRODES), 0))
        win = 1000
        if data.shape[1] < win:
            raise CalibrationError("insufficient data: calibration shorter than one EEG window")
        n_win = data.shape[1] // win
        ptp = np.ptp(data[:, :n_win * win].reshape(len(EEG_ELECTRODES), n_win, win), axis=2)
        for name, row in zip(EEG_ELECTRODES, ptp):
            med = float(np.median(row))
            electrodes[name] = {"ptp_uv": med, "status": "PASS" if med >= cfg.eeg.theta_flat_uv else "FAIL"}
    return CalibrationResult(duration, median, spread, len(si_values), electrodes)


# ------------------------------------------------------------------- replay

CSV_FIELDS = ("tick", "t_s", "attention", "relaxation", "stress_norm", "stress_raw", "valence_dry",
              "arousal_dry", "active_ruleset", "fired_rule_index", "strength")


def snapshot_from_event(ev: SessionEvent) -> FeatureSnapshot:
    return FeatureSnapshot(ev.emotional_state, ev.va_dry, list(ev.va_fx), dict(ev.sensor_status))


def replay(log_path: str | Path, rulesets: list[Ruleset], cfg: EngineConfig, out_log: str | Path | None = None,
           csv_path: str | Path | None = None, strength: float | None = None) -> list[SessionEvent]:
    """Re-run rule selection and mixing over recorded features."""
    events = list(read_events(log_path))
    if not events:
        raise SessionError(f"{log_path}: empty session log")
    n_fx = len(events[0].va_fx)
    ccs = cfg.cc_per_fx() if len(cfg.cc_per_fx()) == n_fx else [cfg.midi.dry_cc + 1 + i for i in range(n_fx)]
    mmap = MidiMap(cfg.midi.channel, cfg.midi.dry_cc, tuple(ccs), cfg.midi.strength_cc)
    engine = DecisionEngine(rulesets, n_fx, mmap, cfg.mix.tau, cfg.mix.g_floor, cfg.mix.smoothing_tau_s,
                            cfg.mix.tick_s)
    out = []
    for ev in events:
        _, new = engine.tick(ev.tick, snapshot_from_event(ev), ev.strength if strength is None else strength)
        out.append(new)
    if out_log is not None:
        with EventWriter(out_log) as w:
            for ev in out:
                w.write(ev)
    if csv_path is not None:
        export_csv(out, csv_path)
    return out


def export_csv(events: list[SessionEvent], path: str | Path) -> None:
    n = len(events[0].smoothed_gains) if events else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(CSV_FIELDS) + [f"raw_gain_{i}" for i in range(n)] + [f"gain_{i}" for i in range(n)])
        for ev in events:
            es = ev.emotional_state
            w.writerow([ev.tick, repr(ev.t_s), repr(es.attention), repr(es.relaxation), repr(es.stress_norm),
                        repr(es.stress_raw), repr(ev.va_dry.valence), repr(ev.va_dry.arousal), ev.active_ruleset,
                        ev.fired_rule_index, repr(ev.strength)]
                       + [repr(g) for g in ev.raw_gains] + [repr(g) for g in ev.smoothed_gains])

