"""Run configuration: dotted-key text files plus command-line overrides.

The format is deliberately plain: one `section.key = value` per line,
blank lines and `#` comments ignored. Every key has a default; unknown
keys are rejected with the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    # data
    t_in: int = 12
    t_out: int = 12
    adjacency: str = "binary"
    # model
    blocks: int = 2
    heads: int = 8
    head_dim: int = 16
    k_r: int = 32
    beta_mode: str = "fixed"
    decomposition: str = "st"
    # dyn_graph
    embed_dim: int = 16
    hops: int = 2
    # embedding
    alpha_mode: str = "fixed"
    # train
    lr: float = 0.001
    batch: int = 64
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    timing: str = "wall"

    def validate(self) -> None:
        positive = ("t_in", "t_out", "blocks", "heads", "head_dim", "k_r",
                    "embed_dim", "batch", "patience", "max_epochs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{_SECTION_OF[name]}.{name} must be >= 1")
        if self.hops < 0:
            raise ConfigError("dyn_graph.hops must be >= 0")
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.seed < 0:
            raise ConfigError("train.seed must be >= 0")
        choices = {
            "adjacency": ("binary", "gaussian_kernel"),
            "beta_mode": ("fixed", "trainable"),
            "decomposition": ("st", "identity"),
            "alpha_mode": ("fixed", "trainable"),
            "timing": ("wall", "none"),
        }
        for name, allowed in choices.items():
            value = getattr(self, name)
            if value not in allowed:
                raise ConfigError(
                    f"{_SECTION_OF[name]}.{name} must be one of "
                    f"{', '.join(allowed)}; got {value!r}")


_SECTION_OF = {
    "t_in": "data", "t_out": "data", "adjacency": "data",
    "blocks": "model", "heads": "model", "head_dim": "model",
    "k_r": "model", "beta_mode": "model", "decomposition": "model",
    "embed_dim": "dyn_graph", "hops": "dyn_graph",
    "alpha_mode": "embedding",
    "lr": "train", "batch": "train", "patience": "train",
    "max_epochs": "train", "seed": "train", "timing": "train",
}

KEYS = {f"{section}.{name}": name for name, section in _SECTION_OF.items()}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str, where: str):
    attr = KEYS[key]
    kind = _TYPES[attr]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind} for {key}") from None


def _assign(cfg: RunConfig, key: str, raw: str, where: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    setattr(cfg, KEYS[key], _convert(key, raw.strip(), where))


def parse_config(text: str) -> RunConfig:
    """Parse a config document; later lines win over earlier ones."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', "
                              f"got {body!r}")
        key, raw = body.split("=", 1)
        _assign(cfg, key.strip(), raw, f"line {lineno}")
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply `section.key=value` strings from the command line."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        _assign(cfg, key.strip(), raw, f"override {item!r}")
    return cfg
