"""Plain ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Every key maps onto a field of
:class:`~fsisim.driver.SchemeParams` or one of the run options below; unknown
keys, malformed lines and invalid values are all collected and reported
together with their line and column.
"""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

from .driver import PRESET_DEFAULTS, SchemeParams

RUN_OPTIONS = {"output_dir": str, "snapshot_every": int}


class ConfigError(ValueError):
    """Carries every problem found in a configuration document."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class RunConfig:
    params: SchemeParams = field(default_factory=SchemeParams)
    output_dir: str = "out"
    snapshot_every: int = 1
    warnings: list = field(default_factory=list)

    @property
    def preset(self):
        return self.params.preset

    @property
    def seed(self):
        return self.params.seed


def _field_types():
    return {f.name: f.type for f in dataclasses.fields(SchemeParams)}


def _convert(text, kind):
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    if kind in ("str", str):
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
            return text[1:-1]
        return text
    raise TypeError(kind)


def parse_config(text):
    """Parse and validate a configuration document; raises :class:`ConfigError`."""
    types = _field_types()
    values, errors, seen = {}, [], {}
    run = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if "=" not in line:
            col = len(raw) - len(raw.lstrip()) + 1
            errors.append(f"line {lineno}, column {col}: expected 'key = value'")
            continue
        key_part, val_part = line.split("=", 1)
        key = key_part.strip()
        key_col = len(key_part) - len(key_part.lstrip()) + 1
        val = val_part.strip()
        val_col = len(key_part) + 1 + (len(val_part) - len(val_part.lstrip())) + 1
        if not key:
            errors.append(f"line {lineno}, column {key_col}: missing key")
            continue
        if key in seen:
            errors.append(f"line {lineno}, column {key_col}: duplicate key '{key}' (first set on line {seen[key]})")
            continue
        seen[key] = lineno
        if key not in types and key not in RUN_OPTIONS:
            errors.append(f"line {lineno}, column {key_col}: unknown key '{key}'")
            continue
        if not val:
            errors.append(f"line {lineno}, column {val_col}: missing value for '{key}'")
            continue
        kind = RUN_OPTIONS.get(key, types.get(key))
        try:
            parsed = _convert(val, kind)
        except ValueError:
            errors.append(f"line {lineno}, column {val_col}: cannot read '{val}' as {getattr(kind, '__name__', kind)} for '{key}'")
            continue
        if key in RUN_OPTIONS:
            run[key] = (parsed, lineno)
        else:
            values[key] = (parsed, lineno)

    preset = values.get("preset", ("quiescent", 0))[0]
    kwargs = dict(PRESET_DEFAULTS.get(preset, {}))
    kwargs.update({k: v for k, (v, _) in values.items()})
    kwargs["preset"] = preset
    params = SchemeParams(**kwargs)
    notes = []
    if not errors:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                notes = params.validate()
            except ValueError as exc:
                errors.extend(_locate(str(exc), values))
    snap = run.get("snapshot_every", (1, 0))
    if snap[0] < 0:
        errors.append(f"line {snap[1]}: snapshot_every must be >= 0, got {snap[0]}")
    if errors:
        raise ConfigError(errors)
    for n in notes:
        warnings.warn(n, stacklevel=2)
    return RunConfig(params, run.get("output_dir", ("out", 0))[0], snap[0], notes)


def _locate(message, values):
    """Attach a line number to each semantic error that names a configured key."""
    out = []
    for part in message.split("; "):
        key = part.split(" ", 1)[0]
        if key in values:
            out.append(f"line {values[key][1]}: {part}")
        else:
            out.append(part)
    return out


def format_config(cfg):
    """Render a :class:`RunConfig` so that ``parse_config(format_config(c))`` reproduces it."""
    lines = [f"preset = {cfg.params.preset}"]
    for f in dataclasses.fields(SchemeParams):
        if f.name == "preset":
            continue
        v = getattr(cfg.params, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    lines.append(f"output_dir = {cfg.output_dir}")
    lines.append(f"snapshot_every = {cfg.snapshot_every}")
    return "\n".join(lines) + "\n"
