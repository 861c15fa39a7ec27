"""INI experiment configuration: schema, defaults, validation and content hash.

Keys are addressed as ``section.key``. Every problem found is reported
together as ``(key, reason)`` pairs in a :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ConfigError

KINDS = ("trajectory", "martingale-check", "clt-fluctuations", "drift-load", "operator-tests")
STOCHASTIC_KINDS = ("trajectory", "martingale-check", "clt-fluctuations", "drift-load")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return t

    return parse


_NO_DEFAULT = object()

#: section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "experiment": {
        "kind": (_choice(*KINDS), _NO_DEFAULT),
        "seed": (int, None),
        "output": (str, "slfv-out"),
        "threads": (int, 1),
    },
    "grid": {
        "d": (int, 1),
        "length": (float, 40.0),
        "cells_per_radius": (float, 8.5),
    },
    "model": {
        "type": (_choice("genic", "general", "overdominance"), "genic"),
        "s": (float, 0.0),
        "m": (int, 2),
        "p": (_floats, ()),
        "s1": (float, 0.0),
        "s2": (float, 0.0),
        "nu1": (float, 0.0),
        "nu2": (float, 0.0),
    },
    "events": {
        "u": (float, 0.5),
        "radius_law": (_choice("fixed", "stable"), "fixed"),
        "R": (float, 1.0),
        "alpha": (float, 0.5),
        "r_max": (float, 10.0),
    },
    "initial": {
        "profile": (_choice("constant", "sine", "gaussian"), "constant"),
        "w": (float, 0.5),
        "amplitude": (float, 0.3),
        "width": (float, 4.0),
    },
    "run": {
        "horizon": (float, 1.0),
        "n_samples": (int, 11),
        "log_events": (_bool, False),
        "snapshots": (_bool, True),
        "replicates": (int, 100),
        "phi_width": (float, 4.0),
    },
    "scaling": {
        "eps": (float, 0.0016),
        "delta": (float, 0.2),
        "s": (float, 1.0),
        "domain": (float, 8.0),
    },
    "driftload": {
        "deltas": (_floats, (0.2, 0.14, 0.1, 0.07)),
        "eps_rule": (_choice("power", "linear", "explicit"), "power"),
        "eps_power": (float, 5.0),
        "eps_scale": (float, 1.0),
        "eps": (_floats, ()),
        "domain": (float, 20.0),
        "horizon_factor": (float, 10.0),
        "replicates": (int, 8),
        "n_probes": (int, 8),
        "n_samples": (int, 40),
    },
    "operators": {
        "alpha": (float, 0.5),
        "halvings": (int, 3),
    },
}

#: keys excluded from the content hash (they do not change results)
_UNHASHED = {("experiment", "output"), ("experiment", "threads"), ("experiment", "seed")}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]\s*$")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration with every default filled in."""

    values: dict[str, dict[str, Any]]
    source: str = ""
    overrides: tuple[str, ...] = field(default=())

    @property
    def kind(self) -> str:
        return self.values["experiment"]["kind"]

    @property
    def seed(self) -> int | None:
        return self.values["experiment"]["seed"]

    def get(self, dotted: str) -> Any:
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]

    def canonical_text(self) -> str:
        """Sorted ``section.key = value`` lines; floats in 17 significant digits."""
        lines = []
        for sec in sorted(self.values):
            for key in sorted(self.values[sec]):
                if (sec, key) in _UNHASHED:
                    continue
                lines.append(f"{sec}.{key} = {format_value(self.values[sec][key])}")
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def to_ini(self) -> str:
        """INI text that parses back to this configuration (seed included)."""
        out = []
        for sec in SCHEMA:
            out.append(f"[{sec}]")
            for key in SCHEMA[sec]:
                v = self.values[sec][key]
                if v is None:
                    continue
                out.append(f"{key} = {format_value(v)}")
            out.append("")
        return "\n".join(out)


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def _scan_duplicates(text: str) -> list[tuple[str, str]]:
    seen: dict[tuple[str, str], int] = {}
    sections: dict[str, int] = {}
    problems = []
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip()[0] in "#;":
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            if section in sections:
                problems.append((section, f"duplicate section (lines {sections[section]} and {lineno})"))
            else:
                sections[section] = lineno
            continue
        if line[:1].isspace():
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            key = m.group(1).strip()
            if (section, key) in seen:
                problems.append((f"{section}.{key}", f"duplicate key (lines {seen[(section, key)]} and {lineno})"))
            else:
                seen[(section, key)] = lineno
    return problems


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse and validate an INI document.

    ``overrides`` maps ``section.key`` to raw string values and takes
    precedence over the document.
    """
    problems = _scan_duplicates(text)
    if problems:
        raise ConfigError(problems)
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([("<document>", str(exc).splitlines()[0])]) from exc

    raw: dict[str, dict[str, str]] = {sec: dict(parser[sec]) for sec in parser.sections()}
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            problems.append((dotted, "override keys must look like section.key"))
            continue
        sec, key = dotted.split(".", 1)
        raw.setdefault(sec, {})[key] = value

    values: dict[str, dict[str, Any]] = {}
    for sec in raw:
        if sec not in SCHEMA:
            problems.append((sec, "unknown section"))
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        given = raw.get(sec, {})
        for key in given:
            if key not in keys:
                problems.append((f"{sec}.{key}", "unknown key"))
        for key, (parse, default) in keys.items():
            if key in given:
                try:
                    values[sec][key] = parse(given[key])
                except ValueError as exc:
                    problems.append((f"{sec}.{key}", str(exc)))
            elif default is _NO_DEFAULT:
                problems.append((f"{sec}.{key}", "required"))
            else:
                values[sec][key] = default
    if problems:
        raise ConfigError(problems)
    problems = validate(values)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(values, text, tuple(sorted((overrides or {}).items())))


def validate(v: dict[str, dict[str, Any]]) -> list[tuple[str, str]]:
    """Cross-key checks against the preconditions of the owning modules."""
    from .models import GeneralF, Overdominance

    p: list[tuple[str, str]] = []
    kind = v["experiment"]["kind"]
    d = v["grid"]["d"]
    if d not in (1, 2, 3):
        p.append(("grid.d", "must be 1, 2 or 3"))
    if v["experiment"]["threads"] < 1:
        p.append(("experiment.threads", "must be positive"))
    if v["grid"]["length"] <= 0:
        p.append(("grid.length", "must be positive"))
    if v["grid"]["cells_per_radius"] < 8:
        p.append(("grid.cells_per_radius", "must be at least 8"))

    ev = v["events"]
    if not 0 <= ev["u"] <= 1:
        p.append(("events.u", "must lie in [0, 1]"))
    if ev["R"] <= 0:
        p.append(("events.R", "must be positive"))
    if ev["radius_law"] == "stable":
        if not 0 < ev["alpha"] < min(2, d):
            p.append(("events.alpha", "α must lie in (0, min(2,d))"))
        if ev["r_max"] <= 1:
            p.append(("events.r_max", "must exceed 1"))
    max_radius = ev["r_max"] if ev["radius_law"] == "stable" else ev["R"]
    if kind not in ("drift-load", "operator-tests") and 2 * max_radius >= v["grid"]["length"]:
        p.append(("grid.length", "must exceed twice the largest radius"))

    mo = v["model"]
    if mo["type"] == "overdominance":
        try:
            Overdominance(mo["s1"], mo["s2"], mo["nu1"], mo["nu2"])
        except ValueError as exc:
            p.append(("model.s1", str(exc)))
        if mo["s"] != 0:
            p.append(("model.s", "diploid weights come from s1, s2, nu1, nu2"))
    else:
        if not 0 <= mo["s"] < 1:
            p.append(("model.s", "must lie in [0, 1)"))
        if mo["type"] == "general":
            try:
                GeneralF(mo["m"], mo["p"])
            except ValueError as exc:
                p.append(("model.p", str(exc)))

    ini = v["initial"]
    if not 0 <= ini["w"] <= 1:
        p.append(("initial.w", "must lie in [0, 1]"))
    if ini["profile"] != "constant" and not (0 <= ini["w"] - abs(ini["amplitude"]) and ini["w"] + abs(ini["amplitude"]) <= 1):
        p.append(("initial.amplitude", "profile must stay within [0, 1]"))
    if ini["width"] <= 0:
        p.append(("initial.width", "must be positive"))

    run = v["run"]
    if run["horizon"] <= 0:
        p.append(("run.horizon", "must be positive"))
    if run["n_samples"] < 2:
        p.append(("run.n_samples", "need at least 2 samples"))
    if kind == "martingale-check" and run["replicates"] < 100:
        p.append(("run.replicates", "martingale checks need at least 100 replicates"))
    if kind == "clt-fluctuations":
        if run["replicates"] < 2:
            p.append(("run.replicates", "need at least 2 replicates"))
        if ev["radius_law"] != "fixed":
            p.append(("events.radius_law", "fluctuation runs support the fixed-radius regime"))
        sc = v["scaling"]
        for key in ("eps", "delta"):
            if not 0 < sc[key] <= 1:
                p.append((f"scaling.{key}", "must lie in (0, 1]"))
        if mo["type"] == "overdominance":
            p.append(("model.type", "fluctuation runs use a haploid model"))

    if kind == "drift-load":
        if mo["type"] != "overdominance":
            p.append(("model.type", "drift-load runs need the overdominance model"))
        dl = v["driftload"]
        if not dl["deltas"] or any(not 0 < x <= 1 for x in dl["deltas"]):
            p.append(("driftload.deltas", "each delta must lie in (0, 1]"))
        if dl["eps_rule"] == "power" and dl["eps_power"] <= 4:
            p.append(("driftload.eps_power", "must exceed 4"))
        if dl["eps_rule"] == "explicit" and len(dl["eps"]) != len(dl["deltas"]):
            p.append(("driftload.eps", "need one eps per delta"))
        if ev["radius_law"] != "fixed":
            p.append(("events.radius_law", "drift-load runs use fixed radii"))

    if kind == "operator-tests":
        op = v["operators"]
        if not 0 < op["alpha"] < min(2, d):
            p.append(("operators.alpha", "α must lie in (0, min(2,d))"))
        if op["halvings"] < 2:
            p.append(("operators.halvings", "need at least 2 halvings for an order estimate"))
    return p
