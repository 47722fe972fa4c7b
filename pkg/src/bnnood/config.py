"""``key = value`` experiment files.

Blank lines and ``#`` comments are ignored. Every key must be known and its
value must parse as the declared type, otherwise :class:`ConfigError` is
raised with the offending line number.
"""

from dataclasses import dataclass, field, fields

from .errors import ConfigurationError


class ConfigError(ConfigurationError):
    def __init__(self, message, line=None, path=None):
        where = f"{path or '<config>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "default") else float(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


@dataclass
class ExperimentConfig:
    data: str = ""
    val: str = ""
    val_split: int = 0
    method: str = "map"
    likelihood: str = "cat"
    ood: str = "none"
    ood_n: int = 0
    ood_low: float = None
    ood_high: float = None
    ood_seed: int = 1
    seed: int = 0
    hidden: list = field(default_factory=lambda: [32, 32])
    activation: str = "relu"
    epochs: int = 100
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine_decay: bool = True
    gamma: float = None
    gamma_out: float = None
    label_smoothing: float = 0.01
    ood_weight: float = None
    untempered: bool = False
    la_grid: list = None
    la_include_ood: bool = True
    la_scope: str = "full"
    la_samples: int = 20
    vb_tau: float = 0.1
    vb_prior_precision: float = 5e-4
    vb_elbo_samples: int = 5
    vb_samples: int = 200
    vb_init_log_std: float = -3.0
    vb_epochs: int = 0
    vb_lr: float = 1e-3
    trace: str = ""


_PARSERS = {
    "data": str, "val": str, "val_split": int,
    "method": _choice("map", "la", "vb"),
    "likelihood": _choice("cat", "nc", "sl", "ml", "oe"),
    "ood": str, "ood_n": int, "ood_low": float, "ood_high": float, "ood_seed": int,
    "seed": int, "hidden": _ints, "activation": _choice("relu", "tanh"),
    "epochs": int, "batch_size": int, "optimizer": _choice("adam", "sgd"), "lr": float,
    "momentum": float, "weight_decay": float, "cosine_decay": _bool,
    "gamma": _opt_float, "gamma_out": _opt_float, "label_smoothing": float,
    "ood_weight": _opt_float, "untempered": _bool,
    "la_grid": _floats, "la_include_ood": _bool,
    "la_scope": _choice("full", "last-layer"), "la_samples": int,
    "vb_tau": float, "vb_prior_precision": float, "vb_elbo_samples": int,
    "vb_samples": int, "vb_init_log_std": float, "vb_epochs": int, "vb_lr": float,
    "trace": str,
}
assert set(_PARSERS) == {f.name for f in fields(ExperimentConfig)}


def parse_value(key, text):
    if key not in _PARSERS:
        raise ConfigError(f"unknown key {key!r}")
    try:
        return _PARSERS[key](text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config(text, path=None):
    cfg = ExperimentConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        seen.add(key)
        try:
            setattr(cfg, key, parse_value(key, value))
        except ConfigError as exc:
            raise ConfigError(str(exc), lineno, path) from None
    return cfg


def load_config(path):
    with open(path) as f:
        return parse_config(f.read(), path)
