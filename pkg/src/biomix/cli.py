"""``biomix`` command line: run, simulate, calibrate, validate, replay."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, fixture_config, load_config
from .ingest import IngestError
from .rules import RulesetError, load_ruleset, validate_partition
from . import session as sess

log = logging.getLogger("biomix")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="engine config (TOML)")
    p.add_argument("--rules", nargs="+", metavar="PATH", help="ruleset YAML files or builtin:<name>")
    p.add_argument("--seed", type=int, help="seed for synthetic sources")
    p.add_argument("--headless", action="store_true", help="do not open MIDI ports")
    p.add_argument("--log", help="session log output (JSONL)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="biomix", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run the engine over the configured sources")
    _common(p)
    p = sub.add_parser("simulate", help="run the bundled synthetic 60 s session")
    _common(p)
    p = sub.add_parser("calibrate", help="record a resting baseline and electrode sanity report")
    _common(p)
    p.add_argument("--duration", type=float, help="seconds to record (default session.calibration_s)")
    p.add_argument("--out", default="calibration.json", help="calibration file to write")
    p = sub.add_parser("validate", help="check that rulesets partition their input domain")
    p.add_argument("paths", nargs="+")
    p = sub.add_parser("replay", help="re-run mixing over a recorded session log")
    _common(p)
    p.add_argument("session_log")
    p.add_argument("--csv", help="CSV export for plotting")
    p.add_argument("--strength", type=float, help="force rule strength in [-1, 1]")
    return ap


def _config(args):
    cfg = fixture_config() if args.cmd == "simulate" and not args.config else load_config(args.config)
    if args.rules:
        cfg.session.rulesets = [str(Path(r).resolve()) if not r.startswith("builtin:") else r for r in args.rules]
    return cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    n = sess.run_session(cfg, args.log, headless=args.headless, seed=args.seed)
    print(f"{n} decision ticks" + (f", log written to {args.log}" if args.log else ""))
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    result = sess.calibrate(cfg, args.duration, args.seed)
    Path(args.out).write_text(json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
    if result.median is not None:
        print(f"SI baseline: median {result.median:.6g}, spread {result.spread:.4g} ({result.si_count} values)")
    for name, info in result.electrodes.items():
        print(f"{name}: {info['status']} (median peak-to-peak {info['ptp_uv']:.3g} uV)")
    print(f"calibration written to {args.out}")
    return 0


def cmd_validate(args) -> int:
    status = 0
    for path in args.paths:
        try:
            rs = load_ruleset(path)
        except RulesetError as exc:
            print(f"{path}: ERROR {exc}")
            status = 1
            continue
        report = validate_partition(rs)
        if report.ok:
            print(f"{path}: ok ({rs.name}, {len(rs.rules)} rules)")
        else:
            status = 1
            print(f"{path}: INVALID ({rs.name})")
            for line in report.describe():
                print(f"  {line}")
    return status


def cmd_replay(args) -> int:
    cfg = _config(args)
    rulesets = sess.load_rulesets(cfg)
    events = sess.replay(args.session_log, rulesets, cfg, args.log, args.csv, args.strength)
    print(f"replayed {len(events)} ticks")
    return 0


COMMANDS = {"run": cmd_run, "simulate": cmd_run, "calibrate": cmd_calibrate, "validate": cmd_validate,
            "replay": cmd_replay}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (ConfigError, RulesetError, IngestError, sess.SessionError, ValueError, OSError) as exc:
        print(f"biomix {args.cmd}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
