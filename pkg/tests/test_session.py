import json
import socket

import numpy as np
import pytest

from biomix.config import ConfigError, config_from_dict, fixture_config, load_config
from biomix.events import SessionEvent, read_events
from biomix.mixer import GainVector, OscMirror
from biomix.rules import PartitionError
from biomix.session import CalibrationError, Session, calibrate, replay, run_session, load_rulesets

TONES = ";".join(["sine 10Hz amp 20 + sine 20Hz amp 10 noise 2"] * 4)
AUDIO = [f"synthetic:sine {f}Hz amp 0.2 noise 0.01" for f in (220, 440, 880)]


def small_config(**over):
    data = {
        "session": {"n_fx": 2, "seed": 3},
        "streams": {"duration_s": 12.0, "eeg": "synthetic:" + TONES,
                    "ecg": "synthetic:pulse 800ms amp 1000 jitter 20ms noise 5", "audio": AUDIO},
    }
    for section, values in over.items():
        data.setdefault(section, {}).update(values)
    return config_from_dict(data)


def test_session_runs_expected_ticks(tmp_path):
    log = tmp_path / "s.jsonl"
    n = Session(small_config(), headless=True).run(log)
    assert n == 120
    events = list(read_events(log))
    assert [e.tick for e in events] == list(range(1, 121))
    assert events[0].emotional_state.eeg_imputed and events[-1].emotional_state.ecg_valid
    assert all(len(e.smoothed_gains) == 3 for e in events)


def test_session_log_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    Session(small_config(), headless=True, max_ticks=60).run(a)
    Session(small_config(), headless=True, max_ticks=60).run(b)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.jsonl"
    Session(small_config(), headless=True, max_ticks=60, seed=4).run(c)
    assert a.read_bytes() != c.read_bytes()


def test_replay_reproduces_gains(tmp_path):
    cfg = small_config()
    log = tmp_path / "s.jsonl"
    Session(cfg, headless=True).run(log)
    original = list(read_events(log))
    out_csv = tmp_path / "s.csv"
    again = replay(log, load_rulesets(cfg), cfg, tmp_path / "r.jsonl", out_csv)
    assert [e.smoothed_gains for e in again] == [e.smoothed_gains for e in original]
    assert [e.midi for e in again] == [e.midi for e in original]
    header = out_csv.read_text().splitlines()[0].split(",")
    assert header[:3] == ["tick", "t_s", "attention"] and header[-1] == "gain_2"
    flipped = replay(log, load_rulesets(cfg), cfg, strength=-1.0)
    assert flipped[-1].raw_gains != original[-1].raw_gains


def test_event_roundtrip_and_schema_version(tmp_path):
    log = tmp_path / "s.jsonl"
    Session(small_config(), headless=True, max_ticks=5).run(log)
    line = log.read_text().splitlines()[-1]
    ev = SessionEvent.from_dict(json.loads(line))
    assert ev.to_json() == line
    bad = json.loads(line)
    bad["schema_version"] = 99
    with pytest.raises(ValueError, match="schema_version"):
        SessionEvent.from_dict(bad)


def test_audio_only_session_uses_audio_ruleset(tmp_path):
    cfg = small_config(streams={"eeg": "", "ecg": ""})
    log = tmp_path / "s.jsonl"
    Session(cfg, headless=True, max_ticks=20).run(log)
    events = list(read_events(log))
    assert {e.active_ruleset for e in events} == {"audio_only"}
    assert events[-1].sensor_status["eeg"] == "ABSENT"


def test_overlapping_ruleset_refuses_to_start(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: bad\nrequires: [audio]\nrules:\n"
                   "  - {description: a, conditions: {arousal: {lo: -1.0, hi: 0.5}}, function: boost_nearest}\n"
                   "  - {description: b, conditions: {arousal: {lo: 0.0, hi: 1.0}}, function: boost_nearest}\n")
    with pytest.raises(PartitionError, match="overlap between rules 0 and 1"):
        Session(small_config(session={"rulesets": [str(bad)]}), headless=True)


def test_run_session_wrapper(tmp_path):
    assert run_session(small_config(streams={"duration_s": 2.0}), tmp_path / "s.jsonl", headless=True) == 20


# --- config

def test_config_rejects_unknown_and_mistyped_keys(tmp_path):
    with pytest.raises(ConfigError, match="session.colour"):
        config_from_dict({"session": {"colour": "red"}})
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict({"mixer": {}})
    with pytest.raises(ConfigError, match="mix.tau: expected a number"):
        config_from_dict({"mix": {"tau": "fast"}})
    with pytest.raises(ConfigError, match="streams.audio needs 3"):
        config_from_dict({"session": {"n_fx": 2}, "streams": {"audio": ["a.wav"]}})
    p = tmp_path / "c.toml"
    p.write_text("[session\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_resolves_paths_relative_to_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[streams]\necg = "ecg.csv"\n')
    cfg = load_config(p)
    assert cfg.resolve(cfg.streams.ecg) == str(tmp_path / "ecg.csv")
    assert cfg.resolve("builtin:full") == "builtin:full"


def test_fixture_config_loads():
    cfg = fixture_config()
    assert cfg.session.n_fx == 4 and len(cfg.streams.audio) == 5 and cfg.streams.duration_s == 60.0


# --- calibration

def test_calibrate_constant_rhythm():
    cfg = small_config(streams={"ecg": "synthetic:pulse 800ms amp 1000", "duration_s": 30.0})
    res = calibrate(cfg, 20.0)
    assert res.median == pytest.approx(100.0 / (2 * 0.825 * 0.016), rel=1e-12)
    assert res.spread == 0.1
    assert res.si_count > 0
    assert {e["status"] for e in res.electrodes.values()} == {"PASS"}


def test_calibrate_flags_flat_electrode():
    cfg = small_config(streams={"eeg": "synthetic:" + ";".join(["sine 10Hz amp 20"] * 3 + ["sine 10Hz amp 0.2"])})
    res = calibrate(cfg, 10.0)
    assert res.electrodes["T4"]["status"] == "FAIL"
    assert res.electrodes["O1"]["status"] == "PASS"


def test_calibrate_rejects_no_data():
    with pytest.raises(CalibrationError, match="insufficient data"):
        calibrate(small_config(), 0.0)
    with pytest.raises(CalibrationError, match="insufficient data"):
        calibrate(small_config(streams={"ecg": "synthetic:sine 1Hz amp 0.1"}), 10.0)


def test_calibration_file_feeds_normalization(tmp_path):
    cal = tmp_path / "cal.json"
    cal.write_text(json.dumps({"ecg": {"median": 3787.878787878788, "spread": 0.1}}))
    cfg = small_config(session={"calibration_file": str(cal)},
                       streams={"ecg": "synthetic:pulse 800ms amp 1000"})
    log = tmp_path / "s.jsonl"
    Session(cfg, headless=True).run(log)
    last = list(read_events(log))[-1].emotional_state
    assert last.ecg_valid and last.stress_norm == pytest.approx(0.5, abs=1e-9)


# --- OSC

def test_osc_mirror_sends_one_message_per_channel():
    rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rx.bind(("127.0.0.1", 0))
    rx.settimeout(2.0)
    try:
        OscMirror("127.0.0.1", rx.getsockname()[1]).send(GainVector(np.array([1.0, 0.25])))
        packets = [rx.recv(1024), rx.recv(1024)]
    finally:
        rx.close()
    assert packets[0].startswith(b"/witheflow/gain/0\x00")
    assert packets[1].startswith(b"/witheflow/gain/1\x00")
    assert packets[1].endswith(np.array([0.25], dtype=">f4").tobytes())
