"""Experiment configuration: strict TOML-style key-value format.

The format supports [section] headers and `key = value` lines where a value
is an integer, float, boolean, double-quoted string, or a flat bracketed
list of those.  Unknown sections or keys are rejected, every error carries
its line number, and parsing an empty file yields the fully documented
defaults (k=1, alpha=0.5, N=96, raw mode to t=50).  serialize_config writes
a file that parses back to an identical configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass
class ExperimentConfig:
    # model section
    punctures: int = 1
    angles: list = field(default_factory=lambda: [0.5])
    resolution: int = 96
    rho_max: float = 0.0            # 0 means the per-end default 12/alpha
    perturbation_amp: float = 0.0
    perturbation_order: float = 1.0
    punctures_xy: list = field(default_factory=list)  # flat x0,y0,x1,y1,...
    # flow section
    mode: str = "raw"
    dt_initial: float = 1e-3
    dt_max: float = 0.5
    safety_factor: float = 0.5
    newton_tol: float = 1e-9
    newton_max_iter: int = 10
    t_end: float = 50.0
    tau_end: float = 8.0
    boundary_mode: str = "dirichlet-one"
    gauge: bool = False
    track_potential: bool = False
    max_steps: int = 0              # 0 means unlimited
    checkpoint_every: int = 25
    # diagnostics section
    checks: list = field(default_factory=lambda: ["all"])
    harnack_pairs: int = 64
    seed: int = 0
    core_rho: float = 4.0
    e_tol: float = 0.02
    c_tol: float = 0.05
    conservation_tol: float = 0.01
    inject_fault: bool = False
    # output section
    directory: str = "out"
    snapshot_dt: float = 0.0        # 0 means the built-in default schedule
    snapshot_times: list = field(default_factory=list)
    csv_cadence: int = 1


_SCHEMA = {
    "model": {
        "punctures": int, "angles": list, "resolution": int, "rho_max": float,
        "perturbation_amp": float, "perturbation_order": float,
        "punctures_xy": list,
    },
    "flow": {
        "mode": str, "dt_initial": float, "dt_max": float,
        "safety_factor": float, "newton_tol": float, "newton_max_iter": int,
        "t_end": float, "tau_end": float, "boundary_mode": str,
        "gauge": bool, "track_potential": bool, "max_steps": int,
        "checkpoint_every": int,
    },
    "diagnostics": {
        "checks": list, "harnack_pairs": int, "seed": int, "core_rho": float,
        "e_tol": float, "c_tol": float, "conservation_tol": float,
        "inject_fault": bool,
    },
    "output": {
        "directory": str, "snapshot_dt": float, "snapshot_times": list,
        "csv_cadence": int,
    },
}

KNOWN_CHECKS = ("bounds", "aronson_benilan", "conservation", "monotonicity",
                "harnack", "convergence", "decay", "potential_identity",
                "end_flux")


def _parse_scalar(tok, lineno):
    tok = tok.strip()
    if tok in ("true", "false"):
        return tok == "true"
    if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
        return tok[1:-1]
    try:
        if any(c in tok for c in ".eE") and not tok.lstrip("+-").isdigit():
            return float(tok)
        return int(tok)
    except ValueError:
        raise ConfigError(f"cannot parse value {tok!r}", lineno) from None


def _parse_value(text, lineno):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError("unterminated list", lineno)
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(t, lineno) for t in inner.split(",")]
    if not text:
        raise ConfigError("missing value", lineno)
    return _parse_scalar(text, lineno)


def _strip_comment(line):
    out = []
    in_str = False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def _coerce(key, value, want, lineno):
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is list and not isinstance(value, list):
        raise ConfigError(f"{key} expects a list", lineno)
    if want is not list and isinstance(value, list):
        raise ConfigError(f"{key} expects a scalar, got a list", lineno)
    if want is bool and not isinstance(value, bool):
        raise ConfigError(f"{key} expects true or false", lineno)
    if want is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key} expects an integer", lineno)
    if want is str and not isinstance(value, str):
        raise ConfigError(f"{key} expects a quoted string", lineno)
    if want is float and not isinstance(value, float):
        raise ConfigError(f"{key} expects a number", lineno)
    return value


def _validate(cfg, lines_of):
    def err(key, msg):
        raise ConfigError(f"{key}: {msg}", lines_of.get(key))

    if cfg.punctures < 1:
        err("punctures", "need at least one puncture (chi = -k < 0)")
    if len(cfg.angles) != cfg.punctures:
        err("angles", f"need exactly {cfg.punctures} entries")
    for a in cfg.angles:
        if not isinstance(a, (int, float)) or a <= 0:
            err("angles", "every cone angle parameter must be positive")
    if cfg.resolution < 16:
        err("resolution", "minimum is 16 per direction")
    if cfg.rho_max < 0:
        err("rho_max", "must be positive (or 0 for the default)")
    if cfg.punctures_xy and len(cfg.punctures_xy) != 2 * cfg.punctures:
        err("punctures_xy", "need a flat list of 2*k coordinates")
    if cfg.mode not in ("raw", "rescaled"):
        err("mode", 'must be "raw" or "rescaled"')
    if cfg.gauge and cfg.mode == "rescaled":
        err("gauge", "the nonpositive-curvature gauge applies to raw runs only")
    if cfg.boundary_mode not in ("dirichlet-one", "asymptotic-decay"):
        err("boundary_mode", 'must be "dirichlet-one" or "asymptotic-decay"')
    for key in ("dt_initial", "dt_max", "newton_tol", "t_end", "tau_end"):
        if getattr(cfg, key) <= 0:
            err(key, "must be positive")
    if not (0 < cfg.safety_factor < 1):
        err("safety_factor", "must lie strictly between 0 and 1")
    if cfg.newton_max_iter < 1:
        err("newton_max_iter", "must be at least 1")
    if cfg.max_steps < 0:
        err("max_steps", "must be nonnegative (0 = unlimited)")
    if cfg.checkpoint_every < 1:
        err("checkpoint_every", "must be positive")
    for c in cfg.checks:
        if c not in KNOWN_CHECKS + ("all", "none"):
            err("checks", f"unknown check {c!r}; known: "
                          f"{', '.join(KNOWN_CHECKS)}, all, none")
    if cfg.harnack_pairs < 1:
        err("harnack_pairs", "must be positive")
    if cfg.core_rho <= 0:
        err("core_rho", "must be positive")
    for key in ("e_tol", "c_tol", "conservation_tol"):
        if getattr(cfg, key) <= 0:
            err(key, "must be positive")
    if cfg.snapshot_dt < 0:
        err("snapshot_dt", "must be nonnegative")
    if cfg.csv_cadence < 1:
        err("csv_cadence", "must be positive")
    return cfg


def parse_config(text) -> ExperimentConfig:
    """Parse and validate a configuration; deterministic, errors carry lines."""
    cfg = ExperimentConfig()
    section = None
    lines_of = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("unterminated section header", lineno)
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError("expected key = value", lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, _, rhs = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        value = _coerce(key, _parse_value(rhs, lineno),
                        _SCHEMA[section][key], lineno)
        setattr(cfg, key, value)
        lines_of[key] = lineno
    return _validate(cfg, lines_of)


def parse_config_file(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Write the configuration in the documented format (round-trips)."""
    out = []
    for section, keys in _SCHEMA.items():
        out.append(f"[{section}]")
        for key in keys:
            out.append(f"{key} = {_fmt(getattr(cfg, key))}")
        out.append("")
    return "\n".join(out)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply `section.key=value` strings (the resume override mechanism)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, _, rhs = item.partition("=")
        path = path.strip()
        if "." in path:
            section, key = path.split(".", 1)
            if section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigError(f"unknown override target {path!r}")
        else:
            key = path
            hits = [s for s, keys in _SCHEMA.items() if key in keys]
            if not hits:
                raise ConfigError(f"unknown override target {path!r}")
            section = hits[0]
        value = _coerce(key, _parse_value(rhs, None),
                        _SCHEMA[section][key], None)
        setattr(cfg, key, value)
    lines_of = {}
    return _validate(cfg, lines_of)


def active_checks(cfg: ExperimentConfig):
    names = list(cfg.checks)
    if "none" in names:
        return ()
    if "all" in names:
        return KNOWN_CHECKS
    return tuple(dict.fromkeys(names))


def config_equal(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    return asdict(a) == asdict(b)
