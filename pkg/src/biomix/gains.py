"""Registered gain sub-functions.

Each function scores every FX channel from its VA geometry relative to the
dry signal; an optional directional predicate suppresses channels to the
gain floor. Scores become gains through a temperature softmax rescaled so the
best channel sits at 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_TAU = 0.3
DEFAULT_G_FLOOR = 0.05

# (dry (2,), fx (n, 2), dist (n,)) -> per-channel array
Geometry = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GainFunction:
    name: str
    score: Geometry
    predicate: Geometry | None = None
    doc: str = ""


GAIN_FUNCTIONS: dict[str, GainFunction] = {}


def register_gain_function(name: str, score: Geometry, predicate: Geometry | None = None, doc: str = ""):
    if name in GAIN_FUNCTIONS:
        raise ValueError(f"gain function {name!r} already registered")
    GAIN_FUNCTIONS[name] = GainFunction(name, score, predicate, doc)
    return GAIN_FUNCTIONS[name]


def _near(dry, fx, d):
    return -d


def _far(dry, fx, d):
    return d


def _higher_arousal(dry, fx, d):
    return fx[:, 1] > dry[1]


def _lower_arousal(dry, fx, d):
    return fx[:, 1] < dry[1]


register_gain_function("boost_nearest", _near, doc="closest FX channel in VA space")
register_gain_function("boost_furthest", _far, doc="furthest FX channel in VA space")
register_gain_function("boost_lowest_arousal", lambda dry, fx, d: -fx[:, 1], doc="lowest-arousal FX channel")
register_gain_function("boost_far_higher_arousal", _far, _higher_arousal,
                       doc="far FX with higher arousal than dry; others suppressed")
register_gain_function("boost_far_any", _far, doc="far FX regardless of direction")
register_gain_function("boost_near_any", _near, doc="near FX regardless of direction")
register_gain_function("boost_near_lower_arousal", _near, _lower_arousal,
                       doc="near FX with lower arousal than dry; others suppressed")


def fx_gains(fn: GainFunction, dry: np.ndarray, fx: np.ndarray, strength: float,
             tau: float = DEFAULT_TAU, g_floor: float = DEFAULT_G_FLOOR) -> np.ndarray:
    dry = np.asarray(dry, dtype=np.float64)
    fx = np.atleast_2d(np.asarray(fx, dtype=np.float64))
    dist = np.linalg.norm(fx - dry, axis=1)
    passing = np.ones(len(fx), dtype=bool) if fn.predicate is None else np.asarray(fn.predicate(dry, fx, dist))
    gains = np.full(len(fx), g_floor)
    if passing.any():
        z = strength * np.asarray(fn.score(dry, fx, dist), dtype=np.float64)[passing] / tau
        gains[passing] = g_floor + (1.0 - g_floor) * np.exp(z - z.max())
    return gains
