"""YAML rulesets: parsing, exact partition validation, rule selection.

A ruleset is a piecewise function over the (stress, attention, valence,
arousal) domain. Conditions are half-open intervals ``lo <= x < hi``; an
interval whose ``hi`` equals the domain maximum also contains that maximum,
so a finite list of rules can partition the closed domain exactly.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np
import yaml

from .audio import VAPoint
from .gains import DEFAULT_G_FLOOR, DEFAULT_TAU, GAIN_FUNCTIONS, GainFunction, fx_gains

DOMAIN = {
    "stress": (0.0, 1.0),
    "attention": (0.0, 1.0),
    "valence": (-1.0, 1.0),
    "arousal": (-1.0, 1.0),
}
VARIABLE_DEVICE = {"stress": "ecg", "attention": "eeg", "valence": "audio", "arousal": "audio"}
VARIABLES = tuple(DOMAIN)
BUILTIN_RULESETS = ("full", "eeg_only", "ecg_only", "audio_only")


class RulesetError(ValueError):
    """Parse or validation failure, located by line/column and field path."""

    def __init__(self, message: str, path: Sequence = (), line: int | None = None, column: int | None = None,
                 source: str | None = None):
        self.message = message
        self.path = tuple(path)
        self.line = line
        self.column = column
        self.source = source
        where = f"{source}:" if source else ""
        if line is not None:
            where += f"{line}:{column}: "
        elif where:
            where += " "
        loc = "/".join(str(p) for p in self.path)
        super().__init__(f"{where}{message}" + (f" (at {loc})" if loc else ""))


@dataclass(frozen=True)
class Condition:
    variable: str
    lo: float
    hi: float

    def contains(self, x: float) -> bool:
        return self.lo <= x < self.hi or (x == self.hi == DOMAIN[self.variable][1])


@dataclass(frozen=True)
class Rule:
    conditions: tuple[Condition, ...]
    function: str
    params: Mapping[str, float] = field(default_factory=dict)
    description: str = ""

    def bounds(self, variable: str) -> tuple[float, float]:
        for c in self.conditions:
            if c.variable == variable:
                return c.lo, c.hi
        return DOMAIN[variable]

    def contains(self, point: Mapping[str, float]) -> bool:
        return all(c.contains(point[c.variable]) for c in self.conditions)


@dataclass(frozen=True)
class Ruleset:
    name: str
    requires: frozenset[str]
    rules: tuple[Rule, ...]

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(v for v in VARIABLES if VARIABLE_DEVICE[v] in self.requires)


@dataclass
class RuleInput:
    stress: float
    attention: float
    va_dry: VAPoint
    va_fx: list[VAPoint]
    sensor_status: frozenset[str] = frozenset({"eeg", "ecg", "audio"})

    def point(self) -> dict[str, float]:
        return {"stress": self.stress, "attention": self.attention,
                "valence": self.va_dry.valence, "arousal": self.va_dry.arousal}


# ------------------------------------------------------------------ parsing

def _schema() -> dict:
    return json.loads(resources.files("biomix.data").joinpath("ruleset.schema.json").read_text())


def _node_at(node: yaml.Node | None, path: Sequence) -> yaml.Node | None:
    for key in path:
        if isinstance(node, yaml.MappingNode):
            node = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            return node
        if node is None:
            return None
    return node


def _error(msg: str, root: yaml.Node | None, path: Sequence, source: str | None) -> RulesetError:
    node = _node_at(root, path)
    if node is None:
        node = root
    line = node.start_mark.line + 1 if node is not None else None
    col = node.start_mark.column + 1 if node is not None else None
    return RulesetError(msg, path, line, col, source)


def _check_duplicate_keys(node: yaml.Node, path: list, source: str | None) -> None:
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            if k.value in seen:
                where = path[-1] if path else "document"
                kind = "duplicate variable condition" if where == "conditions" else "duplicate key"
                raise RulesetError(f"{kind} {k.value!r}", path + [k.value], k.start_mark.line + 1,
                                   k.start_mark.column + 1, source)
            seen.add(k.value)
            _check_duplicate_keys(v, path + [k.value], source)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _check_duplicate_keys(v, path + [i], source)


def parse_ruleset(text: str, source: str | None = None,
                  registry: Mapping[str, GainFunction] | None = None) -> Ruleset:
    """Parse and structurally validate a YAML ruleset."""
    registry = GAIN_FUNCTIONS if registry is None else registry
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise RulesetError(f"malformed YAML: {getattr(exc, 'problem', exc)}", (),
                           mark.line + 1 if mark else None, mark.column + 1 if mark else None, source) from exc
    if root is None:
        raise RulesetError("empty document", source=source)
    _check_duplicate_keys(root, [], source)
    errors = sorted(jsonschema.Draft202012Validator(_schema()).iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise _error(e.message, root, list(e.absolute_path), source)

    requires = frozenset(data["requires"])
    rules = []
    for i, r in enumerate(data["rules"]):
        if r["function"] not in registry:
            raise _error(f"unknown function {r['function']!r}", root, ["rules", i, "function"], source)
        conds = []
        for var, iv in r["conditions"].items():
            path = ["rules", i, "conditions", var]
            if VARIABLE_DEVICE[var] not in requires:
                raise _error(f"variable {var!r} needs {VARIABLE_DEVICE[var]!r} in requires", root, path, source)
            lo, hi = float(iv["lo"]), float(iv["hi"])
            dlo, dhi = DOMAIN[var]
            if not lo < hi:
                raise _error(f"empty interval [{lo}, {hi})", root, path, source)
            if lo < dlo or hi > dhi:
                raise _error(f"interval [{lo}, {hi}) outside {var} domain [{dlo}, {dhi}]", root, path, source)
            conds.append(Condition(var, lo, hi))
        params = {k: float(v) for k, v in (r.get("params") or {}).items()}
        _check_params(params, root, ["rules", i, "params"], source)
        conds.sort(key=lambda c: VARIABLES.index(c.variable))
        rules.append(Rule(tuple(conds), r["function"], params, r["description"]))
    return Ruleset(data["name"], requires, tuple(rules))


def _check_params(params: dict, root, path, source) -> None:
    if "tau" in params and params["tau"] <= 0:
        raise _error("tau must be positive", root, path + ["tau"], source)
    if "g_floor" in params and not 0.0 <= params["g_floor"] < 1.0:
        raise _error("g_floor must lie in [0, 1)", root, path + ["g_floor"], source)
    if "dry_gain" in params and not 0.0 <= params["dry_gain"] <= 1.0:
        raise _error("dry_gain must lie in [0, 1]", root, path + ["dry_gain"], source)


def load_ruleset(ref: str | Path, base: Path | None = None) -> Ruleset:
    """Load ``builtin:<name>`` or a YAML file path."""
    ref = str(ref)
    if ref.startswith("builtin:"):
        name = ref[len("builtin:"):]
        if name not in BUILTIN_RULESETS:
            raise RulesetError(f"no builtin ruleset {name!r}")
        text = resources.files("biomix.data").joinpath("rulesets", f"{name}.yaml").read_text()
        return parse_ruleset(text, source=ref)
    path = Path(ref)
    if base is not None and not path.is_absolute():
        path = base / path
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RulesetError(f"cannot read ruleset: {exc}", source=str(path)) from exc
    return parse_ruleset(text, source=str(path))


# --------------------------------------------------------------- validation

@dataclass(frozen=True)
class Overlap:
    rules: tuple[int, int]
    witness: dict[str, float]


@dataclass(frozen=True)
class Gap:
    witness: dict[str, float]


@dataclass
class PartitionReport:
    ruleset: str
    overlaps: list[Overlap] = field(default_factory=list)
    gaps: list[Gap] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.overlaps and not self.gaps

    def describe(self) -> list[str]:
        lines = []
        for o in self.overlaps:
            lines.append(f"overlap between rules {o.rules[0]} and {o.rules[1]} at {_fmt(o.witness)}")
        for g in self.gaps:
            lines.append(f"gap (no rule fires) at {_fmt(g.witness)}")
        return lines


def _fmt(point: Mapping[str, float]) -> str:
    return ", ".join(f"{k}={v:g}" for k, v in point.items())


def validate_partition(rs: Ruleset) -> PartitionReport:
    """Report pairwise overlaps and coverage gaps over the required-variable domain.

    Exact: every rule is a box over the breakpoint grid, so checking one
    representative point per grid cell decides coverage for the whole cell.
    """
    report = PartitionReport(rs.name)
    variables = rs.variables
    boxes = [{v: r.bounds(v) for v in variables} for r in rs.rules]

    for i, j in itertools.combinations(range(len(boxes)), 2):
        inter = {}
        for v in variables:
            lo = max(boxes[i][v][0], boxes[j][v][0])
            hi = min(boxes[i][v][1], boxes[j][v][1])
            if lo >= hi:
                break
            inter[v] = (lo + hi) / 2.0
        else:
            report.overlaps.append(Overlap((i, j), inter))

    cuts = {}
    for v in variables:
        pts = {DOMAIN[v][0], DOMAIN[v][1]}
        for b in boxes:
            pts.update(b[v])
        cuts[v] = sorted(pts)
    for cell in itertools.product(*(zip(cuts[v][:-1], cuts[v][1:]) for v in variables)):
        covered = any(
            all(b[v][0] <= lo and hi <= b[v][1] for v, (lo, hi) in zip(variables, cell)) for b in boxes
        )
        if not covered:
            report.gaps.append(Gap({v: (lo + hi) / 2.0 for v, (lo, hi) in zip(variables, cell)}))
    return report


class PartitionError(RulesetError):
    def __init__(self, report: PartitionReport):
        self.report = report
        super().__init__(f"ruleset {report.ruleset!r} is not a partition: " + "; ".join(report.describe()))


def load_validated(ref: str | Path, base: Path | None = None) -> Ruleset:
    rs = load_ruleset(ref, base)
    report = validate_partition(rs)
    if not report.ok:
        raise PartitionError(report)
    return rs


# --------------------------------------------------------------- evaluation

def select_rule(rs: Ruleset, inp: RuleInput) -> tuple[int, Rule]:
    point = inp.point()
    for i, rule in enumerate(rs.rules):
        if rule.contains(point):
            return i, rule
    raise RuntimeError(f"no rule of {rs.name!r} fires for {_fmt(point)}; ruleset was not validated")


def apply_gain_function(rule: Rule, inp: RuleInput, strength: float, tau: float = DEFAULT_TAU,
                        g_floor: float = DEFAULT_G_FLOOR,
                        registry: Mapping[str, GainFunction] | None = None) -> np.ndarray:
    """Gains for [dry, fx_1..fx_n]; strength in [-1, 1] scales and may reverse score contrast."""
    fn = (GAIN_FUNCTIONS if registry is None else registry)[rule.function]
    tau = rule.params.get("tau", tau)
    g_floor = rule.params.get("g_floor", g_floor)
    dry = inp.va_dry.as_array()
    fx = np.array([p.as_array() for p in inp.va_fx])
    out = np.empty(len(fx) + 1)
    out[0] = rule.params.get("dry_gain", 1.0)
    out[1:] = fx_gains(fn, dry, fx, strength, tau, g_floor)
    return out
