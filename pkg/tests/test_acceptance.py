"""Acceptance criteria, one test each; conftest prints a PASS/FAIL line per criterion."""
import time

import numpy as np
import pytest

from biomix.audio import VAPoint
from biomix.cli import main
from biomix.config import config_from_dict, fixture_config
from biomix.ecg import EcgPipeline, baevsky_si
from biomix.eeg import EegPipeline, ElectrodeFlag, attention_relaxation, window_band_powers, EegWindow
from biomix.events import EmotionalState, read_events
from biomix.gains import DEFAULT_G_FLOOR, GAIN_FUNCTIONS, fx_gains
from biomix.ingest import SampleBlock, StreamDescriptor, StreamKind, open_stream
from biomix.mixer import (
    DecisionEngine, FeatureSnapshot, GainVector, MidiEmitter, MidiMap, quantize,
)
from biomix.rules import (
    BUILTIN_RULESETS, DOMAIN, RuleInput, apply_gain_function, load_validated, parse_ruleset, select_rule,
    validate_partition,
)
from biomix.session import Session, load_rulesets, replay

from oracles import baevsky_oracle, dft_attention

QUADRANT_FX = [(0.8, 0.8), (-0.8, 0.8), (0.8, -0.8), (-0.8, -0.8)]


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f} s, budget {self.seconds} s"


def random_eeg_windows(n, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(1000) / 250
    out = []
    for _ in range(n):
        x = rng.normal(scale=rng.uniform(1, 20), size=(4, 1000))
        for f, amp in zip(rng.uniform(1, 60, size=3), rng.uniform(0, 40, size=3)):
            x += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        out.append(x)
    return out


@pytest.mark.criterion(1, "EEG formula fidelity")
def test_eeg_formula_fidelity():
    windows = random_eeg_windows(100, seed=1)
    with Budget(5.0):
        pipe = EegPipeline(hop_samples=1000)
        data = np.concatenate(windows, axis=1)
        feats = []
        for s in range(0, data.shape[1], 13):
            feats += pipe.feed(SampleBlock("eeg", s, data[:, s:s + 13]))
        assert len(feats) == 100
        for x, f in zip(windows, feats):
            assert f.value.attention == pytest.approx(dft_attention(x), rel=1e-6)
            assert f.value.attention + f.value.relaxation == 1.0


@pytest.mark.criterion(2, "Band selectivity")
def test_band_selectivity():
    t = np.arange(1000) / 250
    alpha = np.tile(10.0 * np.sin(2 * np.pi * 10 * t), (4, 1))
    beta = np.tile(10.0 * np.sin(2 * np.pi * 20 * t), (4, 1))
    with Budget(1.0):
        relax = attention_relaxation(window_band_powers(EegWindow(alpha, 1000))).relaxation
        att = attention_relaxation(window_band_powers(EegWindow(beta, 1000))).attention
    oracle_relax, oracle_att = 1 - dft_attention(alpha), dft_attention(beta)
    assert oracle_relax >= 0.95 and oracle_att >= 0.95
    assert relax == pytest.approx(oracle_relax, rel=1e-9) and relax >= 0.95
    assert att == pytest.approx(oracle_att, rel=1e-9) and att >= 0.95


@pytest.mark.criterion(3, "Baevsky SI oracle equivalence")
def test_baevsky_oracle_equivalence():
    rng = np.random.default_rng(3)
    series = []
    for _ in range(200):
        n = int(rng.integers(5, 120))
        series.append(rng.normal(rng.uniform(400, 1500), rng.uniform(2, 150), size=n).clip(300, 2000))
    with Budget(1.0):
        for rr in series:
            si, ref = baevsky_si(rr), baevsky_oracle(rr)
            assert abs(si - ref) <= 1e-9 * abs(ref)
        constant = baevsky_si([812.0] * 30)
    assert np.isfinite(constant) and constant == pytest.approx(baevsky_oracle([812.0] * 30), rel=1e-12)


@pytest.mark.criterion(4, "Cadence contract")
def test_cadence_contract():
    shapes = []

    class RecordingEeg(EegPipeline):
        def process(self, window):
            shapes.append(window.samples.shape)
            return super().process(window)

    with Budget(5.0):
        ecg = EcgPipeline()
        h = open_stream(StreamDescriptor.parse(StreamKind.ECG, "synthetic:pulse 800ms amp 1000 jitter 25ms noise 5",
                                               duration_s=60.0, seed=1))
        si = [f for b in h for f in ecg.feed(b)]
        eeg = RecordingEeg()
        h = open_stream(StreamDescriptor.parse(StreamKind.EEG, "synthetic:sine 10Hz amp 20 noise 2",
                                               duration_s=60.0, seed=1))
        windows = [f for b in h for f in eeg.feed(b)]
    assert len(si) == 120
    assert np.allclose(np.diff([f.value.end_tick for f in si]), 500)
    assert len(windows) == 29 and shapes == [(4, 1000)] * 29


@pytest.mark.criterion(5, "Partition validation")
def test_partition_validation():
    header = "name: t\nrequires: [ecg]\nrules:\n"
    rule = "  - {{description: r, conditions: {{stress: {{lo: {}, hi: {}}}}}, function: boost_nearest}}\n"
    rng = np.random.default_rng(5)
    with Budget(2.0):
        rulesets = [load_validated(f"builtin:{n}") for n in BUILTIN_RULESETS]
        assert all(validate_partition(rs).ok for rs in rulesets)

        overlap = validate_partition(parse_ruleset(header + rule.format(0.0, 0.6) + rule.format(0.4, 1.0)))
        assert [(o.rules, o.witness) for o in overlap.overlaps] == [((0, 1), {"stress": 0.5})]
        gap = validate_partition(parse_ruleset(header + rule.format(0.0, 0.25) + rule.format(0.5, 1.0)))
        assert not gap.overlaps and [g.witness for g in gap.gaps] == [{"stress": 0.375}]

        for rs in rulesets:
            pts = np.column_stack([rng.uniform(*DOMAIN[v], size=10_000) for v in DOMAIN])
            for row in pts:
                p = dict(zip(DOMAIN, row))
                assert sum(r.contains(p) for r in rs.rules) == 1


def quadrant_gains(stress, attention, dry=(0.0, 0.0), fx=QUADRANT_FX, strength=1.0):
    rs = load_validated("builtin:full")
    inp = RuleInput(stress, attention, VAPoint(*dry), [VAPoint(v, a, i + 1) for i, (v, a) in enumerate(fx)])
    _, rule = select_rule(rs, inp)
    return rule.function, apply_gain_function(rule, inp, strength)[1:]


@pytest.mark.criterion(6, "Behavioural quadrants")
def test_behavioural_quadrants():
    high_arousal, low_arousal = [0, 1], [2, 3]
    with Budget(1.0):
        fn, g = quadrant_gains(0.9, 0.9)  # High stress, high attention
        assert fn == "boost_far_higher_arousal"
        assert np.all(g[high_arousal] == 1.0) and np.all(g[low_arousal] == DEFAULT_G_FLOOR)
        fn, g = quadrant_gains(0.1, 0.1)  # Low stress, low attention
        assert fn == "boost_near_lower_arousal"
        assert np.all(g[low_arousal] == 1.0) and np.all(g[high_arousal] == DEFAULT_G_FLOOR)
        fn, g = quadrant_gains(0.9, 0.1)  # High stress, low attention
        assert fn == "boost_far_any" and np.all(g == 1.0)  # equidistant: no direction preferred
        fn, g = quadrant_gains(0.1, 0.9)  # Low stress, high attention
        assert fn == "boost_near_any" and np.all(g == 1.0)

        # dry nudged toward positive valence: the distance ordering becomes visible
        dry = (0.2, 0.0)
        near, far = [0, 2], [1, 3]  # +0.8 valence is nearer to the dry signal
        _, g = quadrant_gains(0.9, 0.9, dry)
        assert g[1] == 1.0 and g[1] > g[0] > DEFAULT_G_FLOOR and np.all(g[low_arousal] == DEFAULT_G_FLOOR)
        _, g = quadrant_gains(0.9, 0.1, dry)
        assert min(g[far]) > max(g[near])
        _, g = quadrant_gains(0.1, 0.9, dry)
        assert min(g[near]) > max(g[far])
        _, g = quadrant_gains(0.1, 0.1, dry)
        assert g[2] == 1.0 and g[2] > g[3] > DEFAULT_G_FLOOR and np.all(g[high_arousal] == DEFAULT_G_FLOOR)


@pytest.mark.criterion(7, "Strength and reversal")
def test_strength_and_reversal():
    rng = np.random.default_rng(7)
    with Budget(1.0):
        for _ in range(200):
            dry = rng.uniform(-1, 1, 2)
            fx = rng.uniform(-1, 1, size=(6, 2))
            for fn in GAIN_FUNCTIONS.values():
                g0 = fx_gains(fn, dry, fx, 0.0)
                d = np.linalg.norm(fx - dry, axis=1)
                passing = np.ones(6, bool) if fn.predicate is None else fn.predicate(dry, fx, d)
                assert np.all(g0[passing] == 1.0) and np.all(g0[~passing] == DEFAULT_G_FLOOR)
            for name in ("boost_nearest", "boost_furthest"):
                plus = fx_gains(GAIN_FUNCTIONS[name], dry, fx, 1.0)
                minus = fx_gains(GAIN_FUNCTIONS[name], dry, fx, -1.0)
                order = np.argsort(plus, kind="stable")
                assert np.all(np.diff(minus[order]) <= 0)
                assert np.argmax(plus) == np.argmin(minus) and np.argmin(plus) == np.argmax(minus)


def cascade_config(eeg_off, duration=40.0, electrodes=None):
    base = "sine 10Hz amp 20 + sine 20Hz amp 10 noise 2"
    chans = [base + (f" off {eeg_off}" if electrodes is None or i in electrodes else "") for i in range(4)]
    return config_from_dict({
        "session": {"n_fx": 2, "seed": 8},
        "streams": {"duration_s": duration, "eeg": "synthetic:" + ";".join(chans),
                    "ecg": "synthetic:pulse 800ms amp 1000 jitter 20ms noise 5",
                    "audio": ["synthetic:sine 220Hz amp 0.2", "synthetic:sine 880Hz amp 0.2",
                              "synthetic:sine 440Hz amp 0.1 noise 0.01"]},
    })


@pytest.mark.criterion(8, "Artifact cascade")
def test_artifact_cascade(tmp_path):
    with Budget(5.0):
        log = tmp_path / "cascade.jsonl"
        Session(cascade_config("10s-30s"), headless=True).run(log)
        events = list(read_events(log))
        # windows ending at 14, 16 and 18 s are fully flat; the third makes every electrode dead
        dead = [e for e in events if e.sensor_status["eeg"] == "DEACTIVATED"]
        assert dead[0].tick == 180 and dead[0].ruleset_switched and dead[0].active_ruleset == "ecg_only"
        assert events[dead[0].tick - 2].active_ruleset == "full"
        back = next(e for e in events[dead[0].tick:] if e.sensor_status["eeg"] == "ACTIVE")
        assert back.ruleset_switched and back.active_ruleset == "full"

        # one electrode flat for a single window: excluded, nothing else changes
        pipe = EegPipeline()
        h = open_stream(StreamDescriptor.parse(StreamKind.EEG, "synthetic:" + ";".join(
            ["sine 10Hz amp 20 + sine 20Hz amp 10 noise 2"] * 3
            + ["sine 10Hz amp 20 + sine 20Hz amp 10 noise 2 off 10s-14.5s"]), duration_s=30.0, seed=2))
        blocks = list(h)
        data = np.concatenate([b.samples for b in blocks], axis=1)
        feats = [f for b in blocks for f in pipe.feed(b)]
        flagged = [f for f in feats if f.status.flags[3] != ElectrodeFlag.OK]
        assert [f.end_tick for f in flagged] == [3500]
        assert flagged[0].status.flags[3] == ElectrodeFlag.TRANSIENT_ARTIFACT
        assert all(f.status.device.value == "ACTIVE" and not f.device_changed for f in feats)
        for f in feats:
            ok = [i for i, flag in enumerate(f.status.flags) if flag == ElectrodeFlag.OK]
            ref = dft_attention(data[:, f.end_tick - 1000:f.end_tick], electrodes=ok)
            assert f.value.attention == pytest.approx(ref, rel=1e-9)


@pytest.mark.criterion(9, "End-to-end determinism and replay")
def test_determinism_and_replay(tmp_path):
    with Budget(30.0):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert main(["simulate", "--headless", "--log", str(a)]) == 0
        assert main(["simulate", "--headless", "--log", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        original = list(read_events(a))
        assert len(original) == 600
        assert {e.active_ruleset for e in original} >= {"full", "ecg_only"}
        out = tmp_path / "replayed.jsonl"
        assert main(["replay", str(a), "--log", str(out)]) == 0
        replayed = list(read_events(out))
        assert [e.smoothed_gains for e in replayed] == [e.smoothed_gains for e in original]
        assert [e.raw_gains for e in replayed] == [e.raw_gains for e in original]
        cfg = fixture_config()
        again = replay(a, load_rulesets(cfg), cfg)
        assert [e.smoothed_gains for e in again] == [e.smoothed_gains for e in original]


class SerializingPort:
    def __init__(self):
        self.wire = bytearray()

    def send(self, msg):
        self.wire += bytes(msg.bytes())


@pytest.mark.criterion(10, "Real-time budget")
def test_realtime_budget():
    n_fx = 8
    rulesets = [load_validated(f"builtin:{n}") for n in BUILTIN_RULESETS]
    mmap = MidiMap.default(n_fx)
    port = SerializingPort()
    engine = DecisionEngine(rulesets, n_fx, mmap, emitter=MidiEmitter(mmap, port=port))
    rng = np.random.default_rng(10)
    statuses = [{"eeg": "ACTIVE", "ecg": "ACTIVE", "audio": "ACTIVE"},
                {"eeg": "DEACTIVATED", "ecg": "ACTIVE", "audio": "ACTIVE"}]
    snaps = []
    for k in range(1000):
        att, stress = rng.uniform(size=2)
        fx = [VAPoint(*rng.uniform(-1, 1, 2), i + 1) for i in range(n_fx)]
        snaps.append(FeatureSnapshot(EmotionalState(att, 1 - att, stress, 200.0), VAPoint(*rng.uniform(-1, 1, 2)),
                                     fx, statuses[(k // 200) % 2]))
    times = []
    for k, snap in enumerate(snaps):
        t0 = time.perf_counter()
        engine.tick(k, snap)
        times.append(time.perf_counter() - t0)
    p99 = float(np.percentile(times, 99))
    print(f"decision tick p99 {p99 * 1e3:.3f} ms over {len(times)} ticks")
    assert p99 < 0.005
    assert len(port.wire) > 0


@pytest.mark.criterion(11, "MIDI quantization")
def test_midi_quantization():
    assert quantize(1.0) == 127 and quantize(0.0) == 0
    port = SerializingPort()
    em = MidiEmitter(MidiMap.default(2), port=port)
    first = em.emit(GainVector(np.array([1.0, 0.0, 0.5])))
    assert [m.value for m in first] == [127, 0, 64]
    sent = len(port.wire)
    for _ in range(50):
        assert em.emit(GainVector(np.array([1.0, 0.0, 0.5]))) == []
        assert em.emit(GainVector(np.array([0.999, 0.003, 0.502]))) == []  # same quantized values
    assert len(port.wire) == sent
    assert [m.value for m in em.emit(GainVector(np.array([1.0, 0.0, 0.6])))] == [76]
