"""Flat ``section.key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Every key must be known to the
schema it is loaded against; values are converted with the schema's type.
"""

from __future__ import annotations

import math


class ConfigError(ValueError):
    pass


def parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_float(text):
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def parse_points(text):
    """``x y z psi; x y z psi; ...`` -> list of 4-tuples."""
    pts = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        vals = [float(v) for v in chunk.replace(",", " ").split()]
        if len(vals) == 3:
            vals.append(0.0)
        if len(vals) != 4:
            raise ConfigError(f"waypoint needs 3 or 4 numbers: {chunk!r}")
        pts.append(tuple(vals))
    if not pts:
        raise ConfigError("empty waypoint list")
    return pts


def parse_text(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load(text_or_dict, schema):
    """Typed values for every schema key, defaults filled in.

    ``schema`` maps ``section.key`` to ``(converter, default)``.
    """
    raw = parse_text(text_or_dict) if isinstance(text_or_dict, str) else dict(text_or_dict)
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                values[key] = conv(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
            if isinstance(values[key], float) and not math.isfinite(values[key]):
                raise ConfigError(f"{key}: value must be finite")
        else:
            values[key] = default
    return values


def load_file(path, schema):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return load(text, schema)


DOWNWASH_SCHEMA = {
    "downwash.A": (parse_float, 4.0),
    "downwash.sigma_r": (parse_float, 0.2),
    "downwash.z0": (parse_float, 0.6),
    "downwash.z_cut": (parse_float, 2.0),
    "downwash.v_adv": (parse_float, 0.05),
}


def downwash_from(values):
    from .downwash import DownwashParams
    try:
        return DownwashParams(*(values[f"downwash.{k}"] for k in ("A", "sigma_r", "z0", "z_cut", "v_adv")))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
