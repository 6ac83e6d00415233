"""Flat ``key = value`` run configuration shared by every CLI command."""

import dataclasses
import datetime as dt
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .data import EventSchema, SynthConfig
from .errors import ConfigError
from .graph import GridSpec
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    # grid and ingestion
    grid_rows: int = 8
    grid_cols: int = 8
    cell_km: float = 3.0
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    start_date: str = ""  # empty: first event day
    days: int = 0  # 0: through the last event day
    categories: str = ""  # comma list; empty: discovered from the events
    timestamp_col: str = "date"
    lat_col: str = "latitude"
    lon_col: str = "longitude"
    category_col: str = "category"
    strict: bool = True
    delimiter: str = ","
    # graph
    adjacency: str = "queen8"
    self_loops: bool = True
    # model
    window: int = 30
    horizon: int = 1
    head: str = "zinb"
    dgcn_hidden: str = "64"
    mtcn_widths: str = "8"
    gate: bool = True
    dgcn_bias: bool = True
    clamp_eps: float = 1e-6
    # training
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    patience: int = 10
    clip_norm: float = 5.0
    optimizer: str = "adam"
    reduction: str = "mean"
    val_days: int = 30
    # baseline
    hv_mode: str = "last"
    # synthetic data (uses grid_rows / grid_cols / cell_km)
    synth_days: int = 1000
    synth_categories: int = 2
    synth_start: str = "2020-01-01"
    synth_pi_center: float = 0.3
    synth_pi_edge: float = 0.8
    synth_p_center: float = 0.6
    synth_p_edge: float = 0.4
    synth_r_center: float = 2.0
    synth_r_edge: float = 1.0
    # paths (command-line arguments take precedence)
    events: str = ""
    tensor: str = ""
    weights: str = ""

    # -- parsing -----------------------------------------------------------

    @classmethod
    def from_text(cls, text, source="<config>"):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            if key not in fields:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, type(fields[key].default), source, lineno)
        return cls(**values)

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, str(path))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def echo(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def content_hash(self):
        return hashlib.sha256(self.echo().encode()).hexdigest()

    def echo_with_hash(self):
        return f"# sha256 {self.content_hash()}\n" + self.echo()

    # -- views for the modules ---------------------------------------------

    def grid(self):
        return GridSpec(self.grid_rows, self.grid_cols, self.cell_km, (self.origin_lat, self.origin_lon))

    def category_list(self):
        return tuple(c.strip() for c in self.categories.split(",") if c.strip()) or None

    def event_schema(self):
        return EventSchema(
            self.timestamp_col, self.lat_col, self.lon_col, self.category_col,
            self.category_list(), self.strict, self.delimiter,
        )

    def model_config(self, n_regions, categories):
        return ModelConfig(
            n_regions=n_regions,
            window=self.window,
            horizon=self.horizon,
            categories=categories,
            head=self.head,
            dgcn_hidden=_int_list(self.dgcn_hidden, "dgcn_hidden"),
            mtcn_widths=_int_list(self.mtcn_widths, "mtcn_widths"),
            gate=self.gate,
            dgcn_bias=self.dgcn_bias,
            seed=self.seed,
            clamp_eps=self.clamp_eps,
        )

    def train_config(self):
        return TrainConfig(
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, patience=self.patience,
            clip_norm=self.clip_norm, optimizer=self.optimizer, reduction=self.reduction, seed=self.seed,
        )

    def synth_config(self):
        try:
            return SynthConfig(
                rows=self.grid_rows, cols=self.grid_cols, days=self.synth_days,
                categories=self.synth_categories, start=dt.date.fromisoformat(self.synth_start),
                cell_km=self.cell_km,
                pi_center=self.synth_pi_center, pi_edge=self.synth_pi_edge,
                p_center=self.synth_p_center, p_edge=self.synth_p_edge,
                r_center=self.synth_r_center, r_edge=self.synth_r_edge,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _int_list(text, key):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers") from None


def _coerce(key, value, kind, source, lineno):
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"{source}:{lineno}: bad value {value!r} for {key}") from None
