"""Plain-text run configuration: INI sections named after subcommands.

Example::

    [simulate]
    lmax = 16
    T = 40
    b = 1
    random_lmax = 4
    epsilon = 1e-3
    modes = 2 0 1e-3 normal; 3 1 5e-4 tangent

Lists are comma separated; mode lists are ``l m amplitude [channel]``
entries separated by semicolons.  ``none`` and ``auto`` are accepted where
a value is optional.  Unknown keys are rejected.
"""

import configparser

from .errors import ConfigError
from .geometry import KAPPA

COMMANDS = (
    "simulate",
    "linear",
    "split",
    "breather",
    "spectrum",
    "smoothing-axioms",
    "nash-moser",
    "lifespan-scan",
)


# ---------------------------------------------------------------- parsers


def _float(s):
    return float(s)


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s):
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _optional(parse):
    def p(s):
        if str(s).strip().lower() in ("none", "auto", ""):
            return None
        return parse(s)

    return p


def _floats(s):
    s = str(s).strip()
    return tuple(float(x) for x in s.split(",") if x.strip()) if s else ()


def _ints(s):
    return tuple(_int(x) for x in _floats(s))


def _pairs(s):
    out = []
    for item in str(s).split(";"):
        if item.strip():
            a, b = item.split()
            out.append((float(a), float(b)))
    return tuple(out)


def _modes(s):
    out = []
    for item in str(s).split(";"):
        parts = item.split()
        if not parts:
            continue
        if len(parts) not in (3, 4):
            raise ValueError(f"mode entry {item.strip()!r} needs 'l m amplitude [channel]'")
        channel = parts[3] if len(parts) == 4 else "normal"
        out.append((_int(parts[0]), _int(parts[1]), float(parts[2]), channel))
    return tuple(out)


# ---------------------------------------------------------------- schemas

_RUN = {
    "lmax": (_int, 16),
    "dt": (_optional(_float), None),
    "T": (_float, 10.0),
    "b": (_float, 0.0),
    "kappa": (_float, KAPPA),
    "r0": (_float, 1.0),
    "rdot0": (_float, 0.0),
    "modes": (_modes, ()),
    "velocity_modes": (_modes, ()),
    "epsilon": (_float, 0.0),
    "epsilon_index": (_float, 0.0),
    "random_lmax": (_int, 0),
    "seed": (_int, 0),
    "sample_every": (_int, 10),
    "norm_index": (_float, 4.0),
    "norms": (_floats, (2.0, 4.0)),
    "threshold": (_optional(_float), None),
    "filter": (_bool, True),
    "grid_factor": (_float, 1.5),
}

SCHEMAS = {
    "simulate": dict(_RUN, checkpoint_every=(_int, 0)),
    "linear": {
        "lmax": (_int, 16),
        "b": (_float, 1.0),
        "T": (_float, 40.0),
        "samples": (_int, 801),
        "modes": (_modes, ((2, 0, 1.0, "normal"),)),
        "velocity_modes": (_modes, ()),
        "epsilon": (_float, 0.0),
        "random_lmax": (_int, 0),
        "seed": (_int, 0),
        "window": (_floats, (0.5, 1.0)),
    },
    "split": {
        "lmax": (_int, 8),
        "b": (_float, 1.0),
        "T": (_float, 40.0),
        "samples": (_int, 801),
        "modes": (_modes, ((2, 0, 1e-3, "normal"), (1, 0, 1e-3, "normal"))),
        "velocity_modes": (_modes, ()),
        "window": (_floats, (0.5, 1.0)),
    },
    "breather": {
        "r0": (_float, 1.05),
        "rdot0": (_float, 0.0),
        "dt": (_float, 1e-3),
        "T": (_float, 10.0),
    },
    "spectrum": {
        "lmax": (_int, 16),
        "lanczos_tol": (_float, 1e-10),
    },
    "smoothing-axioms": {
        "lmax": (_int, 16),
        "samples": (_int, 200),
        "pairs": (_pairs, ((0.0, 2.0),)),
        "seed": (_int, 0),
        "decay": (_float, 1.0),
    },
    "nash-moser": {
        "lmax": (_int, 8),
        "b": (_float, 1.0),
        "T": (_float, 5.0),
        "dt": (_float, 0.01),
        "modes": (_modes, ((2, 0, 1e-4, "normal"),)),
        "velocity_modes": (_modes, ()),
        "schedule": (_optional(_ints), None),
        "max_iter": (_int, 12),
        "tol": (_optional(_float), None),
        "kappa": (_float, KAPPA),
        "indices": (_floats, (0.0, 2.0, 4.0)),
    },
    "lifespan-scan": {
        "lmax": (_int, 16),
        "b": (_float, 0.0),
        "epsilons": (_floats, (1e-2, 3e-3, 1e-3)),
        "threshold": (_float, 0.3),
        "horizon": (_float, 30.0),
        "random_lmax": (_int, 4),
        "epsilon_index": (_float, 4.0),
        "norm_index": (_float, 4.0),
        "seed": (_int, 0),
        "dt": (_optional(_float), None),
        "sample_every": (_int, 50),
    },
}

# (key, predicate, message) range checks applied after parsing
_POSITIVE = ("T", "dt", "kappa", "r0", "horizon", "threshold", "lanczos_tol")
_AT_LEAST_ONE = ("samples", "sample_every", "max_iter")
_NONNEG = ("b", "epsilon", "epsilon_index", "norm_index", "random_lmax", "checkpoint_every", "seed", "decay")


def _range_check(command, cfg):
    for k in _POSITIVE:
        if k in cfg and cfg[k] is not None and not cfg[k] > 0:
            raise ConfigError(f"[{command}] {k} must be positive, got {cfg[k]}")
    for k in _AT_LEAST_ONE:
        if k in cfg and cfg[k] < 1:
            raise ConfigError(f"[{command}] {k} must be >= 1, got {cfg[k]}")
    for k in _NONNEG:
        if k in cfg and not cfg[k] >= 0:
            raise ConfigError(f"[{command}] {k} must be non-negative, got {cfg[k]}")
    if "lmax" in cfg and not cfg["lmax"] >= (8 if command == "smoothing-axioms" else 2):
        raise ConfigError(f"[{command}] lmax too small: {cfg['lmax']}")
    for k in ("norms", "indices", "epsilons"):
        if k in cfg and (len(cfg[k]) == 0 or any(not v >= 0 for v in cfg[k])):
            raise ConfigError(f"[{command}] {k} must be a non-empty list of non-negative numbers")
    if "epsilons" in cfg and any(not v > 0 for v in cfg["epsilons"]):
        raise ConfigError(f"[{command}] epsilons must be positive")
    if "window" in cfg:
        w = cfg["window"]
        if len(w) != 2 or not 0 <= w[0] < w[1] <= 1:
            raise ConfigError(f"[{command}] window must be two fractions lo < hi in [0, 1]")
    if "pairs" in cfg and any(not a < b for a, b in cfg["pairs"]):
        raise ConfigError(f"[{command}] pairs must satisfy a < b")
    if command == "nash-moser" and cfg.get("schedule") is not None:
        s = cfg["schedule"]
        if any(j < 0 for j in s) or list(s) != sorted(s):
            raise ConfigError("[nash-moser] schedule must be nondecreasing non-negative integers")
    for k in ("modes", "velocity_modes"):
        for l, m, _, ch in cfg.get(k, ()):
            if not (l >= 0 and -l <= m <= l):
                raise ConfigError(f"[{command}] invalid mode ({l}, {m})")
            if ch not in ("normal", "tangent"):
                raise ConfigError(f"[{command}] unknown channel {ch!r}")
            if "lmax" in cfg and l > cfg["lmax"]:
                raise ConfigError(f"[{command}] mode degree {l} exceeds lmax {cfg['lmax']}")


def defaults(command):
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    return {k: v for k, (_, v) in SCHEMAS[command].items()}


def _apply(command, cfg, key, raw, origin):
    schema = SCHEMAS[command]
    # INI keys are case-insensitive; match against the schema spelling
    match = {k.lower(): k for k in schema}.get(key.strip().lower())
    if match is None:
        raise ConfigError(f"{origin}: unknown key {key!r} for [{command}]")
    try:
        cfg[match] = schema[match][0](raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{origin}: bad value for {match}: {raw!r} ({err})") from err


def load_config(command, path=None, overrides=(), seed=None):
    """Parse defaults, then the file section ``[command]``, then overrides.

    Raises
    ------
    ConfigError
        On unknown sections or keys, unparsable values or out-of-range values.
    """
    cfg = defaults(command)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        for section in parser.sections():
            if section not in SCHEMAS:
                raise ConfigError(f"{path}: unknown section [{section}]")
        if parser.has_section(command):
            for key, raw in parser.items(command):
                _apply(command, cfg, key, raw, str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _apply(command, cfg, key, raw, "--set")
    if seed is not None:
        if "seed" not in cfg:
            raise ConfigError(f"[{command}] takes no seed")
        cfg["seed"] = int(seed)
    _range_check(command, cfg)
    return cfg
