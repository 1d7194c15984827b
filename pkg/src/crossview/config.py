"""Run configuration: flat dotted keys, file/flag overrides, seed derivation.

Precedence, lowest to highest: built-in defaults, then the ``--config`` file,
then ``--seed``/``--set`` command-line overrides. The fully resolved mapping
is archived next to every run's outputs in the same ``key = value`` format,
so re-running from the archive reproduces the run bit-identically.

All randomness flows from the single ``seed`` key through named sub-streams
(data, split, init, batching, gallery-selection), so one component can be
re-seeded without disturbing the others.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

from . import __version__
from .data import BatchSpec, SplitSpec
from .errors import ConfigError
from .losses import LossConfig
from .trainer import TrainConfig

_INT, _FLOAT, _BOOL, _STR, _INTS, _FLOATS, _OPT_INT = range(7)

SCHEMA: dict[str, tuple[int, object]] = {
    "seed": (_INT, 0),
    "data.num_identities": (_INT, 200),
    "data.samples_per_view": (_INT, 4),
    "data.latent_dim": (_INT, 16),
    "data.feature_dim": (_INT, 32),
    "data.view_shift_strength": (_FLOAT, 1.0),
    "data.noise_sigma": (_FLOAT, 0.1),
    "split.train": (_INT, 100),
    "split.valid": (_INT, 50),
    "split.test": (_INT, 50),
    "batch.identities_per_batch": (_INT, 32),
    "batch.samples_per_identity": (_INT, 2),
    "batch.symmetric_anchors": (_BOOL, False),
    "train.learning_rate": (_FLOAT, 0.001),
    "train.sim_epochs": (_INT, 12),
    "train.adv_rounds": (_INT, 50),
    "train.dd_steps_per_round": (_OPT_INT, None),
    "train.map_steps_per_round": (_OPT_INT, None),
    "train.patience": (_INT, 5),
    "train.refresh_sim_every": (_INT, 0),
    "train.combined_map_update": (_BOOL, False),
    "train.use_adaptive_weights": (_BOOL, False),
    "train.symmetric_nets": (_BOOL, False),
    "train.embed_dim": (_INT, 32),
    "train.source_hidden": (_INTS, (64, 48)),
    "train.target_hidden": (_INTS, (80, 48)),
    "train.view_disc_hidden": (_INT, 64),
    "train.sim_hidden": (_INTS, (1024, 2048)),
    "loss.margin": (_FLOAT, 2.0),
    "loss.gamma": (_FLOAT, 2.5),
    "loss.weight_inside_hinge": (_BOOL, False),
    "loss.full_bce_sim": (_BOOL, False),
    "sweep.gammas": (_FLOATS, (0.0, 0.5, 2.5, 10.0)),
}

VERSION_KEY = "artifact.version"


def derive_seed(base_seed: int, stream: str) -> int:
    """Stable 63-bit sub-stream seed from the global seed and a stream name."""
    digest = hashlib.sha256(f"{base_seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF


def _parse_value(key: str, raw: str):
    kind, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            return float(raw)
        if kind == _BOOL:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == _OPT_INT:
            return None if raw == "" else int(raw)
        if kind == _INTS:
            return tuple(int(v) for v in raw.split(",") if v.strip() != "")
        if kind == _FLOATS:
            return tuple(float(v) for v in raw.split(",") if v.strip() != "")
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def _format_value(key: str, value) -> str:
    kind, _ = SCHEMA.get(key, (_STR, None))
    if value is None:
        return ""
    if kind in (_INTS, _FLOATS):
        return ",".join(repr(v) if kind == _FLOATS else str(v) for v in value)
    if kind == _BOOL:
        return "true" if value else "false"
    if kind == _FLOAT:
        return repr(float(value))
    return str(value)


class RunConfig:
    """Resolved key/value configuration for one command invocation."""

    def __init__(self, values: Optional[dict] = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def set_raw(self, key: str, raw: str) -> None:
        if key == VERSION_KEY:
            return  # archives carry the version; accept and ignore on load
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse_value(key, raw)

    def update_from_file(self, path) -> None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path} line {lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            try:
                self.set_raw(key, raw)
            except ConfigError as e:
                raise ConfigError(f"{path} line {lineno}: {e}") from None

    def update_from_pairs(self, pairs) -> None:
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            key, raw = (part.strip() for part in pair.split("=", 1))
            self.set_raw(key, raw)

    def validate(self) -> None:
        if self["data.noise_sigma"] < 0:
            raise ConfigError(f"data.noise_sigma must be >= 0, got {self['data.noise_sigma']}")
        for key in ("data.num_identities", "data.samples_per_view", "data.latent_dim", "data.feature_dim"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {self[key]}")
        if self["loss.margin"] <= 0:
            raise ConfigError(f"loss.margin must be > 0, got {self['loss.margin']}")
        if self["loss.gamma"] < 0:
            raise ConfigError(f"loss.gamma must be >= 0, got {self['loss.gamma']}")
        if self["train.learning_rate"] <= 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self['train.learning_rate']}")
        if min(self["split.train"], self["split.valid"], self["split.test"]) < 1:
            raise ConfigError("split counts must all be >= 1")
        need = self["split.train"] + self["split.valid"] + self["split.test"]
        if need > self["data.num_identities"]:
            raise ConfigError(
                f"split needs {need} identities, dataset only has {self['data.num_identities']}"
            )
        if self["batch.identities_per_batch"] > self["split.train"]:
            raise ConfigError(
                f"batch.identities_per_batch {self['batch.identities_per_batch']} exceeds "
                f"split.train {self['split.train']}"
            )

    # ------------------------------------------------------------------
    # derived objects

    @property
    def seed(self) -> int:
        return self["seed"]

    def stream_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def generator_kwargs(self) -> dict:
        return {
            "num_identities": self["data.num_identities"],
            "samples_per_view": self["data.samples_per_view"],
            "latent_dim": self["data.latent_dim"],
            "feature_dim": self["data.feature_dim"],
            "view_shift_strength": self["data.view_shift_strength"],
            "noise_sigma": self["data.noise_sigma"],
            "seed": self.stream_seed("data"),
        }

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            train=self["split.train"],
            valid=self["split.valid"],
            test=self["split.test"],
            seed=self.stream_seed("split"),
        )

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(
            identities_per_batch=self["batch.identities_per_batch"],
            samples_per_identity=self["batch.samples_per_identity"],
            seed=self.stream_seed("batching"),
            symmetric_anchors=self["batch.symmetric_anchors"],
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            margin=self["loss.margin"],
            gamma=self["loss.gamma"],
            weight_inside_hinge=self["loss.weight_inside_hinge"],
            full_bce_sim=self["loss.full_bce_sim"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["train.learning_rate"],
            sim_epochs=self["train.sim_epochs"],
            adv_rounds=self["train.adv_rounds"],
            dd_steps_per_round=self["train.dd_steps_per_round"],
            map_steps_per_round=self["train.map_steps_per_round"],
            patience=self["train.patience"],
            refresh_sim_every=self["train.refresh_sim_every"],
            combined_map_update=self["train.combined_map_update"],
            use_adaptive_weights=self["train.use_adaptive_weights"],
            symmetric_nets=self["train.symmetric_nets"],
            embed_dim=self["train.embed_dim"],
            source_hidden=self["train.source_hidden"],
            target_hidden=self["train.target_hidden"],
            view_disc_hidden=self["train.view_disc_hidden"],
            sim_hidden=self["train.sim_hidden"],
            batch=self.batch_spec(),
            loss_cfg=self.loss_config(),
            seed=self.stream_seed("init"),
        )

    @property
    def gallery_seed(self) -> int:
        return self.stream_seed("gallery-selection")

    def config_hash(self) -> str:
        return hashlib.sha256(self.archive_text().encode()).hexdigest()[:16]

    # ------------------------------------------------------------------
    # archiving

    def archive_text(self) -> str:
        lines = [f"{VERSION_KEY} = {__version__}"]
        for key in sorted(SCHEMA):
            lines.append(f"{key} = {_format_value(key, self.values[key])}")
        return "\n".join(lines) + "\n"

    def save_archive(self, path) -> None:
        Path(path).write_text(self.archive_text())

    @classmethod
    def from_sources(cls, config_path=None, seed: Optional[int] = None, overrides=()) -> "RunConfig":
        cfg = cls()
        if config_path is not None:
            cfg.update_from_file(config_path)
        if seed is not None:
            cfg.set("seed", int(seed))
        cfg.update_from_pairs(overrides)
        return cfg
