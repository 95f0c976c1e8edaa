"""Experiment configuration: domain descriptions, training knobs, and a
flat `key = value` text format for both."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..losses import GAN_VARIANTS, ObjectiveWeights

__all__ = ["DomainSpec", "TrainConfig", "load_config", "write_config"]

DOMAIN_KINDS = ("stripes", "checker", "blobs")


@dataclass
class DomainSpec:
    """Procedural texture family for one image domain."""

    kind: str = "stripes"
    period: int = 8
    contrast: float = 1.0
    noise: float = 0.05
    channels: int = 1
    height: int = 16
    width: int = 16

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise ValueError(f"DomainSpec: kind must be one of {DOMAIN_KINDS}")
        if self.noise < 0:
            raise ValueError("DomainSpec: noise must be >= 0")
        if min(self.height, self.width, self.channels, self.period) < 1:
            raise ValueError("DomainSpec: extents and period must be >= 1")


@dataclass
class TrainConfig:
    """Everything one training run depends on, seeds included.

    The learning rate stays constant for the first half of the epochs and
    then decays linearly; k counts selected negatives per query and theta
    is the pruning threshold (see ObjectiveWeights).
    """

    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    epochs: int = 200
    batch: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed_data: int = 0
    seed_init: int = 1
    seed_sample: int = 2
    n_train: int = 32
    n_eval: int = 16
    s_per_layer: int = 16
    tap_layers: tuple = (1, 2)
    normalize_features: bool = True
    aggregation: str = "mean"
    gan_variant: str = "non-saturating"
    on_empty_rows: str = "all-candidates"
    domain_x: DomainSpec = field(default_factory=lambda: DomainSpec(kind="stripes"))
    domain_y: DomainSpec = field(default_factory=lambda: DomainSpec(kind="checker"))

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("TrainConfig: epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("TrainConfig: batch must be >= 1")
        if min(self.lr, self.beta1, self.beta2, self.adam_eps) <= 0:
            raise ValueError("TrainConfig: rates must be > 0")
        if self.gan_variant not in GAN_VARIANTS:
            raise ValueError(f"TrainConfig: gan_variant must be one of {GAN_VARIANTS}")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError("TrainConfig: aggregation must be 'mean' or 'sum'")
        if self.on_empty_rows not in ("error", "all-candidates"):
            raise ValueError("TrainConfig: on_empty_rows must be 'error' or 'all-candidates'")
        if self.s_per_layer < 2:
            raise ValueError("TrainConfig: s_per_layer must be >= 2 (need negatives)")
        self.tap_layers = tuple(int(t) for t in self.tap_layers)


_WEIGHT_KEYS = {f.name for f in fields(ObjectiveWeights)}
_DOMAIN_KEYS = {f.name for f in fields(DomainSpec)}


def _parse_value(raw):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in raw:
        return tuple(_parse_value(part) for part in raw.split(","))
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def load_config(path):
    """Parse a flat `key = value` file into a TrainConfig.

    Domain keys are prefixed (`x_kind = stripes`, `y_noise = 0.1`); weight
    keys (tau, k, theta, lambda_*) and train keys are bare. '#' starts a
    comment, blank lines are skipped.
    """
    weight_kwargs = {}
    x_kwargs = {}
    y_kwargs = {}
    train_kwargs = {}
    train_keys = {f.name for f in fields(TrainConfig)} - {"weights", "domain_x", "domain_y"}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            key = key.strip()
            value = _parse_value(raw)
            if key in _WEIGHT_KEYS:
                weight_kwargs[key] = value
            elif key.startswith("x_") and key[2:] in _DOMAIN_KEYS:
                x_kwargs[key[2:]] = value
            elif key.startswith("y_") and key[2:] in _DOMAIN_KEYS:
                y_kwargs[key[2:]] = value
            elif key in train_keys:
                train_kwargs[key] = value
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    if "tap_layers" in train_kwargs and isinstance(train_kwargs["tap_layers"], int):
        train_kwargs["tap_layers"] = (train_kwargs["tap_layers"],)
    return TrainConfig(
        weights=ObjectiveWeights(**weight_kwargs),
        domain_x=DomainSpec(**x_kwargs),
        domain_y=DomainSpec(**y_kwargs),
        **train_kwargs,
    )


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(config, path):
    """Write a TrainConfig back out as the flat key-value format."""
    lines = []
    for key, value in asdict(config.weights).items():
        lines.append(f"{key} = {_format_value(value)}")
    for f in fields(TrainConfig):
        if f.name in ("weights", "domain_x", "domain_y"):
            continue
        lines.append(f"{f.name} = {_format_value(getattr(config, f.name))}")
    for prefix, spec in (("x", config.domain_x), ("y", config.domain_y)):
        for key, value in asdict(spec).items():
            lines.append(f"{prefix}_{key} = {_format_value(value)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
