"""Flat ``key = value`` experiment configuration.

One setting per line, dotted keys, ``#`` starts a comment. Values are JSON
literals (``1``, ``0.5``, ``true``, ``null``, ``[1, 2]``, ``"text"``); a
bare word that is not valid JSON is read as a string. Every key has a
default except ``run.n``. Violations are collected and reported together.

Example::

    model.kind = quadratic
    schedule.exponent = 0.7
    run.n = 1024
    run.horizon_tau = 20
"""

from __future__ import annotations

import difflib
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

__all__ = ["ConfigError", "ExperimentConfig", "SCHEMA", "parse_config", "render", "default_text"]

_MISSING = object()
DEFAULT_HORIZON = 20.0

MODEL_KINDS = ("quadratic", "double_well", "gaussian_kernel")
SCHEDULE_KINDS = ("power_law", "constant", "table")
INIT_KINDS = ("gaussian", "uniform", "point")
ZETA_KINDS = ("zero", "vanishing_bias")
INSTRUMENTS = ("w2_ref", "wp_erg", "helmholtz", "residual", "g_value")
REFERENCES = ("auto", "closed_form", "branches")


class ConfigError(ValueError):
    """All problems found in one configuration text."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class _Key:
    kind: str  # "int", "float", "bool", "str", "list", "pair", "floatlist", "ladder"
    default: Any
    check: Callable[[Any], str | None] | None = None
    nullable: bool = False


def _choice(options):
    def check(v):
        return None if v in options else f"must be one of {', '.join(options)}"
    return check


def _positive(v):
    return None if v > 0 else "must be positive"


def _nonneg(v):
    return None if v >= 0 else "must be non-negative"


def _at_least_one(v):
    return None if v >= 1 else "must be >= 1"


def _exponent(v):
    if 0 < v <= 1:
        return None
    return ("must lie in (0, 1]: the steps must tend to zero while their sum diverges "
            "(sum gamma_k = inf), otherwise the interpolated time stays bounded")


def _seed(v):
    return None if 0 <= v < 2**64 else "must be an unsigned 64-bit integer"


def _instruments(v):
    bad = [x for x in v if x not in INSTRUMENTS]
    return None if not bad else f"unknown instruments {bad}; known: {', '.join(INSTRUMENTS)}"


SCHEMA: dict[str, _Key] = {
    "model.kind": _Key("str", "quadratic", _choice(MODEL_KINDS)),
    "model.lambda": _Key("float", 1.0, _nonneg),
    "model.alpha": _Key("float", 1.0),
    "model.kernel_width": _Key("float", 1.0, _positive),
    "model.sigma": _Key("float", 1.0, _positive),
    "model.exact_pairwise": _Key("bool", False),
    "schedule.kind": _Key("str", "power_law", _choice(SCHEDULE_KINDS)),
    "schedule.gamma0": _Key("float", 0.5, _positive),
    "schedule.exponent": _Key("float", 0.7, _exponent),
    "schedule.table": _Key("floatlist", None, nullable=True),
    "run.n": _Key("int", _MISSING, _at_least_one),
    "run.d": _Key("int", 1, _at_least_one),
    "run.horizon_tau": _Key("float", None, _positive, nullable=True),
    "run.steps": _Key("int", None, _nonneg, nullable=True),
    "run.replicas": _Key("int", 1, _at_least_one),
    "run.seed": _Key("int", 0, _seed),
    "run.threads": _Key("int", 1, _at_least_one),
    "run.init.kind": _Key("str", "gaussian", _choice(INIT_KINDS)),
    "run.init.scale": _Key("float", 1.0, _nonneg),
    "run.init.center": _Key("float", 0.0),
    "run.init.low": _Key("float", -1.0),
    "run.init.high": _Key("float", 1.0),
    "run.record.stride": _Key("int", 10, _at_least_one),
    "run.record.window": _Key("pair", None, nullable=True),
    "noise.zeta": _Key("str", "zero", _choice(ZETA_KINDS)),
    "noise.zeta_scale": _Key("float", 0.0),
    "noise.zeta_exponent": _Key("float", 1.0, _positive),
    "diagnostics.enabled": _Key("list", [], _instruments),
    "diagnostics.reference": _Key("str", "auto", _choice(REFERENCES)),
    "diagnostics.reference_samples": _Key("int", 1024, _at_least_one),
    "diagnostics.p": _Key("int", 2, _at_least_one),
    "diagnostics.every": _Key("int", 1, _at_least_one),
    "diagnostics.g.radius": _Key("float", 3.0, _positive),
    "diagnostics.g.window": _Key("float", 1.0, _positive),
    "diagnostics.g.grid_step": _Key("float", 0.01, _positive),
    "diagnostics.g.ladder": _Key("ladder", []),
    "diagnostics.g.ladder_schedule_exponent": _Key("float", 0.5, _exponent),
    "diagnostics.grid.half_width": _Key("float", 10.0, _positive),
    "diagnostics.grid.h": _Key("float", 0.02, _positive),
    "diagnostics.thresholds.final_w2_ref": _Key("float", None, nullable=True),
    "diagnostics.thresholds.final_wp_erg": _Key("float", None, nullable=True),
    "diagnostics.thresholds.max_m2": _Key("float", None, nullable=True),
    "diagnostics.thresholds.final_helmholtz_gap": _Key("float", None, nullable=True),
    "diagnostics.thresholds.g_ratio": _Key("float", None, nullable=True),
    "stationary.enabled": _Key("bool", False),
    "stationary.inits": _Key("floatlist", [-1.0, 0.0, 1.0]),
    "stationary.init_variance": _Key("float", 0.1, _positive),
    "stationary.damping": _Key("float", 0.5, lambda v: None if 0 < v <= 1 else "must lie in (0, 1]"),
    "stationary.tol": _Key("float", 1e-10, _positive),
    "stationary.max_iter": _Key("int", 20000, _at_least_one),
    "stationary.grid.half_width": _Key("float", 4.0, _positive),
    "stationary.grid.h": _Key("float", 0.01, _positive),
    "output.dir": _Key("str", "runs"),
    "output.id": _Key("str", None, nullable=True),
}


def _coerce(key: str, spec: _Key, raw: Any) -> tuple[Any, str | None]:
    if raw is None:
        return (None, None) if spec.nullable else (None, f"{key}: may not be null")
    kind = spec.kind
    try:
        if kind == "int":
            if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw:
                return None, f"{key}: expected an integer, got {raw!r}"
            return int(raw), None
        if kind == "float":
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                return None, f"{key}: expected a number, got {raw!r}"
            val = float(raw)
            if not math.isfinite(val):
                return None, f"{key}: must be finite"
            return val, None
        if kind == "bool":
            if not isinstance(raw, bool):
                return None, f"{key}: expected true or false, got {raw!r}"
            return raw, None
        if kind == "str":
            if not isinstance(raw, str):
                return None, f"{key}: expected a string, got {raw!r}"
            return raw, None
        if kind == "list":
            if not isinstance(raw, list) or not all(isinstance(x, str) for x in raw):
                return None, f"{key}: expected a list of strings, got {raw!r}"
            return list(raw), None
        if kind == "floatlist":
            if not isinstance(raw, list) or not raw or any(
                    isinstance(x, bool) or not isinstance(x, (int, float)) for x in raw):
                return None, f"{key}: expected a non-empty list of numbers, got {raw!r}"
            return [float(x) for x in raw], None
        if kind == "pair":
            if (not isinstance(raw, list) or len(raw) != 2
                    or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in raw)
                    or raw[0] > raw[1]):
                return None, f"{key}: expected [lo, hi] with lo <= hi, got {raw!r}"
            return [float(raw[0]), float(raw[1])], None
        if kind == "ladder":
            if not isinstance(raw, list):
                return None, f"{key}: expected a list of [t, n] pairs, got {raw!r}"
            out = []
            for item in raw:
                if (not isinstance(item, list) or len(item) != 2
                        or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in item)
                        or item[0] < 0 or int(item[1]) != item[1] or item[1] < 1):
                    return None, f"{key}: entries must be [t, n] with t >= 0 and integer n >= 1"
                out.append([float(item[0]), int(item[1])])
            return out, None
    except (TypeError, ValueError) as err:  # pragma: no cover - defensive
        return None, f"{key}: {err}"
    raise AssertionError(kind)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated settings; index with the dotted key, e.g. ``cfg["run.n"]``."""

    values: dict

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with keys overridden; use ``__`` for dots (``run__seed=3``)."""
        vals = dict(self.values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return parse_config(render(ExperimentConfig(vals)))

    def digest(self) -> str:
        return hashlib.sha256(render(self).encode()).hexdigest()

    def run_id(self) -> str:
        return self["output.id"] or self.digest()[:12]

    # --- object construction -------------------------------------------------

    def model(self):
        from .fields import GranularMediaModel

        kind = self["model.kind"]
        kw = {"exact_pairwise": self["model.exact_pairwise"]}
        if kind == "quadratic":
            return GranularMediaModel.quadratic(self["model.lambda"], self["model.alpha"],
                                                self["model.sigma"], **kw)
        if kind == "double_well":
            return GranularMediaModel.double_well(self["model.alpha"], self["model.sigma"], **kw)
        return GranularMediaModel.gaussian(self["model.lambda"], self["model.alpha"],
                                           self["model.kernel_width"], self["model.sigma"], **kw)

    def schedule(self):
        from .core import StepSchedule

        table = self["schedule.table"]
        return StepSchedule(self["schedule.kind"], self["schedule.gamma0"], self["schedule.exponent"],
                            tuple(table) if table is not None else None)

    def noise(self):
        from .dynamics import NoiseModel

        return NoiseModel(zeta_kind=self["noise.zeta"], zeta_scale=self["noise.zeta_scale"],
                          zeta_exponent=self["noise.zeta_exponent"])

    def run_config(self, replica: int = 0, *, threads: int = 1):
        from .dynamics import RunConfig

        win = self["run.record.window"]
        return RunConfig(
            model=self.model(), schedule=self.schedule(), n=self["run.n"], d=self["run.d"],
            steps=self["run.steps"], horizon_tau=self["run.horizon_tau"],
            seed=self["run.seed"], replica=replica,
            init_kind=self["run.init.kind"], init_scale=self["run.init.scale"],
            init_center=self["run.init.center"], init_low=self["run.init.low"],
            init_high=self["run.init.high"], record_stride=self["run.record.stride"],
            record_window=tuple(win) if win is not None else None,
            noise=self.noise(), threads=threads,
        )

    def needs_branches(self) -> bool:
        ref = self["diagnostics.reference"]
        if ref == "auto":
            ref = "closed_form" if self["model.kind"] == "quadratic" else "branches"
        wants_ref = any(x in self["diagnostics.enabled"] for x in ("w2_ref", "wp_erg"))
        return self["stationary.enabled"] or (wants_ref and ref == "branches")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate configuration text; raises :class:`ConfigError` listing every problem."""
    errors: list[str] = []
    given: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = _strip_comment(line).strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"line {lineno}: expected 'key = value', got {body!r}")
            continue
        key, _, val = body.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            near = difflib.get_close_matches(key, SCHEMA.keys(), n=1, cutoff=0.6)
            hint = f" (did you mean {near[0]!r}?)" if near else ""
            errors.append(f"line {lineno}: unknown key {key!r}{hint}")
            continue
        if key in given:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        given[key] = _parse_value(val)

    values: dict[str, Any] = {}
    for key, spec in SCHEMA.items():
        if key not in given:
            if spec.default is _MISSING:
                errors.append(f"{key}: required")
            else:
                values[key] = json.loads(json.dumps(spec.default))
            continue
        val, err = _coerce(key, spec, given[key])
        if err is None and val is not None and spec.check is not None:
            msg = spec.check(val)
            if msg:
                err = f"{key}: {msg}"
        if err:
            errors.append(err)
        else:
            values[key] = val

    horizon, steps = values.get("run.horizon_tau"), values.get("run.steps")
    if horizon is not None and steps is not None:
        errors.append("run.horizon_tau and run.steps are both set; give exactly one")
    elif horizon is None and steps is None:
        if "run.horizon_tau" in given or "run.steps" in given:
            if not any(e.startswith(("run.steps", "run.horizon_tau")) for e in errors):
                errors.append("one of run.horizon_tau and run.steps must be set")
        else:
            values["run.horizon_tau"] = DEFAULT_HORIZON
    if values.get("schedule.kind") == "table" and values.get("schedule.table") is None:
        errors.append("schedule.table is required when schedule.kind = table")
    init = values.get("run.init.kind")
    if init == "uniform" and values.get("run.init.low", 0) >= values.get("run.init.high", 1):
        errors.append("run.init.low must be below run.init.high")
    if values.get("model.kind") == "quadratic" and values.get("model.lambda", 1) + values.get(
            "model.alpha", 1) <= 0:
        errors.append("model.lambda + model.alpha must be positive for the quadratic model")
    if errors:
        raise ConfigError(errors)
    cfg = ExperimentConfig(values)
    if cfg["schedule.kind"] != "table":
        try:
            cfg.schedule()
        except ValueError as err:
            raise ConfigError([f"schedule: {err}"]) from None
    return cfg


def _strip_comment(line: str) -> str:
    out, in_str, esc = [], False, False
    for ch in line:
        if in_str:
            out.append(ch)
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
            out.append(ch)
        elif ch == "#":
            break
        else:
            out.append(ch)
    return "".join(out)


def _literal(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.integer, np.floating)):
        return _literal(v.item())
    return json.dumps(v)


def render(config: ExperimentConfig) -> str:
    """Canonical text for ``config``; ``parse_config(render(c)) == c``."""
    return "".join(f"{key} = {_literal(config.values[key])}\n" for key in SCHEMA)


def default_text(n: int = 64) -> str:
    """Full default configuration with ``run.n = n``."""
    return render(parse_config(f"run.n = {n}\n"))
