"""Versioned JSON run configuration.

Layout::

    {
      "schema_version": 1,
      "method": "klgame",
      "methods": ["ilqgames", "maxent", "klgame"],
      "emit": {"trajectories": true, "stats": true, "solver_trace": true},
      "scenario": {
        "lambda": [1.0, 0.0],
        ... any other ScenarioSpec field ...,
        "cost": {... TollboothCost fields ...},
        "reference": {... ReferenceConfig fields ...}
      }
    }

Only ``schema_version``, ``scenario`` and ``scenario.lambda`` are required.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .cost import TollboothCost
from .sim import METHODS, ReferenceConfig, ScenarioSpec

SCHEMA_VERSION = 1
EMIT_KEYS = ("trajectories", "stats", "solver_trace")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = path
        self.line = line
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{path}: {message}" if path else f"{where}{message}")


@dataclass
class RunConfig:
    scenario: ScenarioSpec
    method: str = "klgame"
    methods: tuple[str, ...] = ("ilqgames", "maxent", "klgame")
    emit: dict = field(default_factory=lambda: {k: True for k in EMIT_KEYS})


def _locate(text: str, path: list[str]) -> int | None:
    """Best-effort line number of the key at ``path`` (or of its deepest
    existing ancestor)."""
    pos, line = 0, None
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls) if f.init}


_SCENARIO_SKIP = {"cost", "reference", "lam"}


def _check_type(value, default, path: str, text: str, keys: list[str]):
    def fail(msg):
        raise ConfigError(path, msg, _locate(text, keys))

    if isinstance(default, bool):
        if not isinstance(value, bool):
            fail("expected a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            fail("expected an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail("expected a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            fail("expected a string")
    elif isinstance(default, tuple):
        if not isinstance(value, list):
            fail("expected a list")
        value = tuple(value)
    return value


def _build(cls, data: dict, prefix: str, text: str, keys: list[str], skip=()):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected an object", _locate(text, keys))
    known = _fields(cls)
    defaults = cls()
    kwargs = {}
    for k, v in data.items():
        if k in skip:
            continue
        if k not in known:
            raise ConfigError(f"{prefix}.{k}", "unknown field", _locate(text, keys + [k]))
        kwargs[k] = _check_type(v, getattr(defaults, k), f"{prefix}.{k}", text, keys + [k])
    return kwargs


def parse_config(data: dict, text: str = "") -> RunConfig:
    """Validate a decoded config; ``text`` (the raw file) anchors messages."""
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be an object", 1)
    for key in ("schema_version", "scenario"):
        if key not in data:
            raise ConfigError(key, "missing required field", 1)
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {data['schema_version']!r}; expected {SCHEMA_VERSION}",
                          _locate(text, ["schema_version"]))
    extra = set(data) - {"schema_version", "scenario", "method", "methods", "emit"}
    if extra:
        k = sorted(extra)[0]
        raise ConfigError(k, "unknown field", _locate(text, [k]))

    sc = data["scenario"]
    if not isinstance(sc, dict):
        raise ConfigError("scenario", "expected an object", _locate(text, ["scenario"]))
    if "lambda" not in sc:
        raise ConfigError("scenario.lambda", "missing required field", _locate(text, ["scenario"]))
    lam = sc["lambda"]
    if not isinstance(lam, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in lam):
        raise ConfigError("scenario.lambda", "expected a list of numbers", _locate(text, ["scenario", "lambda"]))
    if any(v < 0 for v in lam):
        raise ConfigError("scenario.lambda", "KL weights must be nonnegative", _locate(text, ["scenario", "lambda"]))

    cost_kwargs = _build(TollboothCost, sc.get("cost", {}), "scenario.cost", text, ["scenario", "cost"],
                         skip=("lane_preference",))
    if "lane_preference" in sc.get("cost", {}):
        pref = sc["cost"]["lane_preference"]
        try:
            cost_kwargs["lane_preference"] = {int(k): (int(v[0]), float(v[1])) for k, v in pref.items()}
        except (AttributeError, TypeError, ValueError, IndexError):
            raise ConfigError("scenario.cost.lane_preference", "expected {player: [lane, weight]}",
                              _locate(text, ["scenario", "cost", "lane_preference"])) from None
    cw = cost_kwargs.get("control_weight", TollboothCost().control_weight)
    if len(cw) != 2 or any(not isinstance(w, (int, float)) or w <= 0 for w in cw):
        raise ConfigError("scenario.cost.control_weight",
                          "control weights must be two positive numbers (each player's own control cost must be positive definite)",
                          _locate(text, ["scenario", "cost", "control_weight"]))
    ref_kwargs = _build(ReferenceConfig, sc.get("reference", {}), "scenario.reference", text,
                        ["scenario", "reference"])
    sc_kwargs = _build(ScenarioSpec, sc, "scenario", text, ["scenario"], skip=_SCENARIO_SKIP | {"lambda"})
    try:
        cost = TollboothCost(**cost_kwargs)
        reference = ReferenceConfig(**ref_kwargs)
        spec = ScenarioSpec(cost=cost, reference=reference, lam=tuple(float(v) for v in lam), **sc_kwargs)
        spec.initial_state()
    except (ValueError, IndexError) as exc:
        raise ConfigError("scenario", str(exc), _locate(text, ["scenario"])) from None

    method = data.get("method", "klgame")
    if method not in METHODS:
        raise ConfigError("method", f"unknown method {method!r}; expected one of {list(METHODS)}",
                          _locate(text, ["method"]))
    methods = data.get("methods", ["ilqgames", "maxent", "klgame"])
    if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
        raise ConfigError("methods", f"expected a nonempty list drawn from {list(METHODS)}", _locate(text, ["methods"]))
    emit = {k: True for k in EMIT_KEYS}
    for k, v in data.get("emit", {}).items():
        if k not in EMIT_KEYS or not isinstance(v, bool):
            raise ConfigError(f"emit.{k}", "unknown flag or non-boolean value", _locate(text, ["emit", k]))
        emit[k] = v
    return RunConfig(spec, method, tuple(methods), emit)


def load_config(path) -> RunConfig:
    """Read and validate a config file. ``OSError`` propagates for I/O problems."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc.msg}", exc.lineno) from None
    return parse_config(data, text)


def config_to_dict(cfg: RunConfig) -> dict:
    spec = cfg.scenario
    sc = {}
    for f in dataclasses.fields(ScenarioSpec):
        if f.name in _SCENARIO_SKIP:
            continue
        sc[f.name] = getattr(spec, f.name)
    sc["lambda"] = list(spec.lam)
    cost = dataclasses.asdict(spec.cost)
    cost["lane_preference"] = {str(k): list(v) for k, v in spec.cost.lane_preference.items()}
    sc["cost"] = {k: list(v) if isinstance(v, tuple) else v for k, v in cost.items()}
    ref = dataclasses.asdict(spec.reference)
    sc["reference"] = {k: list(v) if isinstance(v, tuple) else v for k, v in ref.items()}
    return {
        "schema_version": SCHEMA_VERSION,
        "method": cfg.method,
        "methods": list(cfg.methods),
        "emit": dict(cfg.emit),
        "scenario": sc,
    }


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
