"""Decision tick: ruleset choice, gain function, smoothing and MIDI CC output."""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import mido
import numpy as np

from .audio import VAPoint
from .events import EmotionalState, SessionEvent
from .gains import DEFAULT_G_FLOOR, DEFAULT_TAU
from .rules import RuleInput, Ruleset, apply_gain_function, select_rule

log = logging.getLogger(__name__)

DEVICES = ("eeg", "ecg", "audio")


@dataclass
class GainVector:
    gains: np.ndarray  # index 0 = dry
    tick: int = 0


@dataclass(frozen=True)
class MidiMap:
    channel: int
    dry_cc: int
    cc_per_fx: tuple[int, ...]
    strength_cc: int

    def __post_init__(self):
        if not 0 <= self.channel <= 15:
            raise ValueError(f"MIDI channel {self.channel} outside 0..15")
        ccs = (self.dry_cc, *self.cc_per_fx, self.strength_cc)
        if any(not 0 <= c <= 127 for c in ccs):
            raise ValueError("CC numbers must lie in 0..127")
        if len(set(ccs)) != len(ccs):
            raise ValueError(f"CC numbers must be unique, got {ccs}")

    @classmethod
    def default(cls, n_fx: int, channel: int = 0, first_cc: int = 20, strength_cc: int = 11) -> "MidiMap":
        return cls(channel, first_cc, tuple(range(first_cc + 1, first_cc + 1 + n_fx)), strength_cc)

    @property
    def channel_ccs(self) -> tuple[int, ...]:
        return (self.dry_cc, *self.cc_per_fx)


def smooth(prev: np.ndarray, target: np.ndarray, dt: float, tau_g: float = 0.25) -> np.ndarray:
    """One-pole step toward ``target``; never overshoots."""
    prev = np.asarray(prev, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prev.shape != target.shape:
        raise ValueError("gain vectors differ in length")
    alpha = 1.0 - math.exp(-dt / tau_g) if tau_g > 0 else 1.0
    if alpha >= 1.0:
        return target.copy()
    out = prev + alpha * (target - prev)
    return np.clip(out, np.minimum(prev, target), np.maximum(prev, target))


def quantize(gain: float) -> int:
    """0..1 gain to a 7-bit CC value, rounding halves up."""
    return min(127, max(0, int(math.floor(gain * 127.0 + 0.5))))


def on_strength_cc(cc_value: int) -> float:
    return min(1.0, max(-1.0, (cc_value - 64) / 63.0))


class StrengthControl:
    """Performer rule strength, written by the MIDI I/O thread, read per tick."""

    def __init__(self, value: float = 1.0):
        self._value = value
        self._lock = threading.Lock()

    @property
    def value(self) -> float:
        with self._lock:
            return self._value

    def set(self, value: float) -> None:
        with self._lock:
            self._value = min(1.0, max(-1.0, float(value)))

    def on_cc(self, cc_value: int) -> None:
        self.set(on_strength_cc(cc_value))


class MidiEmitter:
    """Delta-suppressed CC output; runs headless when no port is available."""

    def __init__(self, midi_map: MidiMap, port_name: str | None = None, port=None):
        self.map = midi_map
        self.port = port
        self._last: dict[int, int] = {}
        if port is None and port_name:
            try:
                self.port = mido.open_output(port_name)
            except (OSError, IOError, ImportError) as exc:
                log.warning("MIDI output %r unavailable (%s); running headless", port_name, exc)

    def emit(self, gv: GainVector) -> list[mido.Message]:
        ccs = self.map.channel_ccs
        if len(gv.gains) != len(ccs):
            raise ValueError(f"{len(gv.gains)} gains but MIDI map covers {len(ccs)} channels")
        msgs = []
        for cc, g in zip(ccs, gv.gains):
            value = quantize(float(g))
            if self._last.get(cc) == value:
                continue
            self._last[cc] = value
            msgs.append(mido.Message("control_change", channel=self.map.channel, control=cc, value=value))
        if self.port is not None:
            for m in msgs:
                try:
                    self.port.send(m)
                except (OSError, IOError) as exc:
                    log.warning("MIDI send failed (%s); continuing headless", exc)
                    self.port = None
                    break
        return msgs


def emit_midi(gv: GainVector, midi_map: MidiMap, emitter: MidiEmitter | None = None) -> list[mido.Message]:
    """CC messages for channels whose quantized value changed since the last call on ``emitter``."""
    emitter = emitter or MidiEmitter(midi_map)
    return emitter.emit(gv)


def open_strength_input(port_name: str, strength_cc: int, control: StrengthControl, channel: int | None = None):
    def _cb(msg):
        if msg.type == "control_change" and msg.control == strength_cc and (channel is None or msg.channel == channel):
            control.on_cc(msg.value)

    try:
        return mido.open_input(port_name, callback=_cb)
    except (OSError, IOError, ImportError) as exc:
        log.warning("MIDI input %r unavailable (%s); strength fixed", port_name, exc)
        return None


class OscMirror:
    """Mirrors gains as ``<address>/<i> float`` over UDP."""

    def __init__(self, host: str, port: int, address: str = "/witheflow/gain"):
        from pythonosc.udp_client import SimpleUDPClient

        self.client = SimpleUDPClient(host, port)
        self.address = address.rstrip("/")

    def send(self, gv: GainVector) -> None:
        for i, g in enumerate(gv.gains):
            self.client.send_message(f"{self.address}/{i}", float(g))


def select_ruleset(rulesets: Sequence[Ruleset], available: frozenset[str]) -> Ruleset:
    """Most demanding ruleset whose required devices are all available; first listed wins ties."""
    best = None
    for rs in rulesets:
        if rs.requires <= available and (best is None or len(rs.requires) > len(best.requires)):
            best = rs
    return best if best is not None else rulesets[0]


@dataclass
class FeatureSnapshot:
    state: EmotionalState
    va_dry: VAPoint
    va_fx: list[VAPoint]
    sensor_status: dict = field(default_factory=lambda: {d: "ACTIVE" for d in DEVICES})

    def available(self) -> frozenset[str]:
        return frozenset(d for d in DEVICES if self.sensor_status.get(d) == "ACTIVE")


class DecisionEngine:
    """Owns all mutable mixing state; one call to :meth:`tick` per decision period."""

    def __init__(self, rulesets: Sequence[Ruleset], n_fx: int, midi_map: MidiMap | None = None,
                 tau: float = DEFAULT_TAU, g_floor: float = DEFAULT_G_FLOOR, smoothing_tau_s: float = 0.25,
                 tick_s: float = 0.1, emitter: MidiEmitter | None = None, osc: OscMirror | None = None,
                 strength: StrengthControl | None = None):
        if not rulesets:
            raise ValueError("at least one ruleset is required")
        self.rulesets = list(rulesets)
        self.n_fx = n_fx
        self.midi_map = midi_map or MidiMap.default(n_fx)
        self.tau = tau
        self.g_floor = g_floor
        self.smoothing_tau_s = smoothing_tau_s
        self.tick_s = tick_s
        self.emitter = emitter or MidiEmitter(self.midi_map)
        self.osc = osc
        self.strength = strength or StrengthControl()
        self.gains = np.zeros(n_fx + 1)  # monitor channels start muted
        self.active: Ruleset | None = None

    def compute(self, snap: FeatureSnapshot, strength: float) -> tuple[Ruleset, int, np.ndarray]:
        rs = select_ruleset(self.rulesets, snap.available())
        inp = RuleInput(snap.state.stress_norm, snap.state.attention, snap.va_dry, snap.va_fx, snap.available())
        idx, rule = select_rule(rs, inp)
        return rs, idx, apply_gain_function(rule, inp, strength, self.tau, self.g_floor)

    def tick(self, tick: int, snap: FeatureSnapshot, strength: float | None = None) -> tuple[GainVector, SessionEvent]:
        if len(snap.va_fx) != self.n_fx:
            raise ValueError(f"expected {self.n_fx} FX channels, got {len(snap.va_fx)}")
        s = self.strength.value if strength is None else strength
        rs, idx, raw = self.compute(snap, s)
        switched = self.active is not None and rs.name != self.active.name
        if switched:
            log.info("tick %d: ruleset %s -> %s (sensors %s)", tick, self.active.name, rs.name, snap.sensor_status)
        self.active = rs
        self.gains = smooth(self.gains, raw, self.tick_s, self.smoothing_tau_s)
        gv = GainVector(self.gains.copy(), tick)
        msgs = self.emitter.emit(gv)
        if self.osc is not None:
            self.osc.send(gv)
        event = SessionEvent(
            tick=tick,
            t_s=tick * self.tick_s,
            emotional_state=snap.state,
            va_dry=snap.va_dry,
            va_fx=list(snap.va_fx),
            sensor_status=dict(snap.sensor_status),
            active_ruleset=rs.name,
            fired_rule_index=idx,
            fired_rule_description=rs.rules[idx].description,
            strength=s,
            raw_gains=[float(g) for g in raw],
            smoothed_gains=[float(g) for g in gv.gains],
            ruleset_switched=switched,
            midi=[[m.channel, m.control, m.value] for m in msgs],
        )
        return gv, event
