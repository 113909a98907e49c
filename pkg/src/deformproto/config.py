"""Run configuration as line-based ``key = value`` text.

Every tunable lives in :class:`RunConfig`. The canonical text form written by
:meth:`RunConfig.to_text` is what checkpoints echo, and parsing it back gives
an identical config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .deform import PartGrid
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple
    strides: tuple
    kernel: int = 3

    @property
    def feature_dim(self):
        return self.channels[-1]

    def latent_size(self, image_size):
        size = image_size
        pad = self.kernel // 2
        for s in self.strides:
            size = (size + 2 * pad - self.kernel) // s + 1
        return size


@dataclass(frozen=True)
class TrainSchedule:
    warmup1_epochs: int
    warmup2_epochs: int
    joint_epochs: int
    lr_backbone: float
    lr_prototypes: float
    lr_offsets: float
    lr_last: float
    lr_decay: float
    lr_decay_period: int
    projection_epochs: tuple
    last_layer_epochs: int
    momentum: float
    batch_size: int

    @property
    def total_epochs(self):
        return self.warmup1_epochs + self.warmup2_epochs + self.joint_epochs

    def stage(self, epoch):
        """Stage name of 1-based ``epoch``."""
        if epoch <= self.warmup1_epochs:
            return "warmup1"
        if epoch <= self.warmup1_epochs + self.warmup2_epochs:
            return "warmup2"
        return "joint"

    def learning_rates(self, epoch):
        """Per-group learning rates; step decay counts joint epochs only."""
        stage = self.stage(epoch)
        if stage == "warmup1":
            return {"prototypes": self.lr_prototypes}
        if stage == "warmup2":
            return {"prototypes": self.lr_prototypes, "backbone": self.lr_backbone}
        k = (epoch - self.warmup1_epochs - self.warmup2_epochs - 1) // self.lr_decay_period
        f = self.lr_decay ** k
        return {
            "prototypes": self.lr_prototypes * f,
            "backbone": self.lr_backbone * f,
            "offsets": self.lr_offsets * f,
        }


@dataclass
class RunConfig:
    # model
    num_classes: int = 3
    protos_per_class: int = 2
    proto_shape: str = "2x2"
    image_size: int = 64
    backbone_channels: tuple = (16, 32, 16)
    backbone_strides: tuple = (2, 2, 2)
    backbone_kernel: int = 3
    offset_hidden: int = 32
    epsilon: float = 1e-5
    interior_only: bool = False
    nd: bool = False
    pixel_mean: tuple = (0.5, 0.5, 0.5)
    pixel_std: tuple = (0.25, 0.25, 0.25)
    # losses
    phi: float = 0.1
    lambda_sep: float = 0.01
    lambda_clst: float = 0.1
    lambda_ortho: float = 0.1
    lambda_l1_last: float = 1e-3
    # schedule
    warmup1_epochs: int = 5
    warmup2_epochs: int = 5
    joint_epochs: int = 20
    lr_backbone: float = 0.05
    lr_prototypes: float = 0.05
    lr_offsets: float = 0.02
    lr_last: float = 0.1
    lr_decay: float = 0.5
    lr_decay_period: int = 10
    projection_epochs: tuple = (20, 30)
    last_layer_epochs: int = 20
    momentum: float = 0.9
    batch_size: int = 10
    # reproducibility
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        errors = []
        if self.num_classes < 2:
            errors.append("num_classes must be >= 2")
        if self.protos_per_class < 1:
            errors.append("protos_per_class must be >= 1")
        try:
            grid = PartGrid.from_shape(self.proto_shape)
            if grid.rows < 1 or grid.cols < 1:
                raise ValueError
        except ValueError:
            errors.append(f"proto_shape must look like '3x3', got {self.proto_shape!r}")
        if len(self.backbone_channels) != len(self.backbone_strides) or not self.backbone_channels:
            errors.append("backbone_channels and backbone_strides need the same non-zero length")
        if self.backbone_kernel % 2 == 0:
            errors.append("backbone_kernel must be odd")
        if self.epsilon <= 0:
            errors.append("epsilon must be > 0")
        for name in ("warmup1_epochs", "warmup2_epochs", "joint_epochs", "last_layer_epochs"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        for name in ("lr_backbone", "lr_prototypes", "lr_offsets", "lr_last"):
            if getattr(self, name) <= 0:
                errors.append(f"{name} must be > 0")
        for name in ("phi", "lambda_sep", "lambda_clst", "lambda_ortho", "lambda_l1_last"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if self.lr_decay_period < 1 or self.batch_size < 1 or self.jobs < 1:
            errors.append("lr_decay_period, batch_size and jobs must be >= 1")
        if len(self.pixel_mean) != 3 or len(self.pixel_std) != 3 or min(self.pixel_std) <= 0:
            errors.append("pixel_mean/pixel_std need three entries, std > 0")
        if not errors and self.image_size % self.latent_size:
            errors.append(
                f"image_size {self.image_size} is not a multiple of latent size {self.latent_size}"
            )
        if errors:
            raise ConfigError("; ".join(errors))

    # typed views
    @property
    def grid(self):
        return PartGrid.from_shape(self.proto_shape)

    @property
    def backbone(self):
        return BackboneConfig(tuple(self.backbone_channels), tuple(self.backbone_strides),
                              self.backbone_kernel)

    @property
    def latent_size(self):
        return self.backbone.latent_size(self.image_size)

    @property
    def gamma(self):
        return self.image_size // self.latent_size

    @property
    def num_prototypes(self):
        return self.num_classes * self.protos_per_class

    def loss_weights(self):
        return LossWeights(self.lambda_sep, self.lambda_clst, self.lambda_ortho, self.phi,
                           self.lambda_l1_last)

    def schedule(self):
        return TrainSchedule(
            self.warmup1_epochs, self.warmup2_epochs, self.joint_epochs, self.lr_backbone,
            self.lr_prototypes, self.lr_offsets, self.lr_last, self.lr_decay,
            self.lr_decay_period, tuple(self.projection_epochs), self.last_layer_epochs,
            self.momentum, self.batch_size,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # text form
    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, source="<config>"):
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = _parse(value, known[key].default)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        try:
            return cls(**values)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), source=str(path))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else int
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(kind(p) for p in parts)
    return text
