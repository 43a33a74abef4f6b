"""Training configuration and its ``key=value`` text form."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .sampling import SamplingMode

DIVERSIFICATION = ("none", "sampling_only", "sampling_plus_ips")

# Short spellings accepted in config files and on the command line.
SAMPLING_ALIASES = {"class": "class_balanced", "group": "group_balanced", "fixed": "fixed_full"}
DIVERSIFICATION_ALIASES = {"sampling": "sampling_only", "sampling+ips": "sampling_plus_ips"}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of ensemble training.

    The diversification arm constrains the rest: ``none`` trains every member
    on the full store with no similarity penalty, ``sampling_only`` keeps the
    balanced subsets but drops the penalty.  Those constraints are applied on
    construction rather than rejected, so a config always describes what
    actually runs.
    """

    n_members: int = 15
    inv_temperature: float = 30.0
    ips_weight: float = 1e5
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    sampling: SamplingMode = field(default_factory=SamplingMode)
    seed: int = 0
    diversification: str = "sampling_plus_ips"

    def __post_init__(self):
        div = DIVERSIFICATION_ALIASES.get(self.diversification, self.diversification)
        if div not in DIVERSIFICATION:
            raise ValueError(f"unknown diversification {self.diversification!r}")
        object.__setattr__(self, "diversification", div)
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")
        if not self.inv_temperature > 0:
            raise ValueError("inv_temperature must be positive")
        if not self.ips_weight >= 0:
            raise ValueError("ips_weight must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if div == "none":
            object.__setattr__(self, "sampling", SamplingMode("fixed_full"))
        if div != "sampling_plus_ips":
            object.__setattr__(self, "ips_weight", 0.0)

    @property
    def temperature(self) -> float:
        return 1.0 / self.inv_temperature

    def with_arm(self, diversification: str) -> TrainConfig:
        """Copy of a ``sampling_plus_ips`` config switched to another arm."""
        if self.diversification != "sampling_plus_ips":
            raise ValueError("derive arms from a sampling_plus_ips config; other arms discard settings")
        return replace(self, diversification=diversification)

    def to_kv(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "sampling":
                lines.append(f"sampling={value.kind}")
                lines.append(f"per_cell_size={'' if value.per_cell_size is None else value.per_cell_size}")
            else:
                lines.append(f"{f.name}={value!r}" if isinstance(value, float) else f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_kv().encode()).hexdigest()


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


_INT_KEYS = {"n_members", "epochs", "batch_size", "seed"}
_FLOAT_KEYS = {"inv_temperature", "ips_weight", "learning_rate"}


def config_from_mapping(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Overlay string values onto ``base`` (defaults when omitted)."""
    base = base or TrainConfig()
    kw = {}
    kind = base.sampling.kind
    cell = base.sampling.per_cell_size
    for key, raw in values.items():
        if key in _INT_KEYS:
            kw[key] = int(raw, 0)
        elif key in _FLOAT_KEYS:
            kw[key] = float(raw)
        elif key == "sampling":
            kind = SAMPLING_ALIASES.get(raw, raw)
        elif key == "per_cell_size":
            cell = int(raw) if raw else None
        elif key == "diversification":
            kw[key] = raw
        else:
            raise ValueError(f"unknown config key {key!r}")
    kw["sampling"] = SamplingMode(kind, cell)
    # Arm constraints zeroed these on the base; do not carry them forward.
    if base.diversification != "sampling_plus_ips" and "ips_weight" not in kw:
        kw["ips_weight"] = TrainConfig.ips_weight
    return replace(base, **kw)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return config_from_mapping(parse_kv(path.read_text(), str(path)))
