"""Flat ``key=value`` run configuration with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError
from .svd import RsvdConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    # paths and data handling
    interactions: str = ""
    format: str = "tsv"
    workdir: str = "run"
    test_ratio: float = 0.2
    val_ratio: float = 0.05
    split_seed: int = 0
    # model and training
    dim: int = 32
    n_layers: int = 2
    batch_size: int = 256
    q: int = 5
    lambda1: float = 1e-7
    lambda2: float = 1e-5
    tau: float = 0.5
    dropout: float = 0.25
    sampler: str = "per_interaction"
    samples_per_user: int = 1
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    patience: int = 10
    cl_skip_layer0: bool = False
    dtype: str = "float32"
    # randomized SVD; oversample 0 is allowed, "auto" means same as q
    oversample: str = "auto"
    power_iters: int = 2
    svd_seed: int = 0
    # evaluation
    ns: str = "20,40"
    groups: str = ""
    mad_sample: int = 2000

    def __post_init__(self):
        if not 0.0 < self.test_ratio < 1.0:
            raise ConfigError(f"test_ratio must lie in (0, 1), got {self.test_ratio}")
        if not 0.0 <= self.val_ratio < 1.0:
            raise ConfigError(f"val_ratio must lie in [0, 1), got {self.val_ratio}")
        self.train_config()
        self.rsvd_config()
        self.eval_ns()
        self.group_boundaries()

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def rsvd_config(self) -> RsvdConfig:
        if self.oversample == "auto":
            over = None
        else:
            try:
                over = int(self.oversample)
            except ValueError:
                raise ConfigError(f"oversample must be an integer or 'auto', got {self.oversample!r}") from None
        return RsvdConfig(q=self.q, oversample=over, power_iters=self.power_iters, seed=self.svd_seed)

    def eval_ns(self):
        ns = _int_list(self.ns, "ns")
        if not ns or min(ns) < 1:
            raise ConfigError(f"ns must list positive integers, got {self.ns!r}")
        return tuple(ns)

    def group_boundaries(self):
        b = _int_list(self.groups, "groups")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ConfigError(f"groups must be strictly ascending, got {self.groups!r}")
        return tuple(b) if b else None

    def to_text(self):
        lines = ["# effective configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _int_list(text, name):
    text = str(text).strip()
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated integer list, got {text!r}") from None


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None
    return raw


def parse_assignments(lines, source="<overrides>"):
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_assignments(fh.read().splitlines(), str(path)))
    values.update(parse_assignments(list(overrides)))
    return RunConfig(**values)
