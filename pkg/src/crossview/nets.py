"""The four trainable networks: per-view mappings, view discriminator,
similarity discriminator, plus checkpoint I/O.

The two view mappings deliberately share no parameter storage and may use
different hidden widths; keeping them structurally independent is what lets
each one absorb its own view's quirks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError

DEFAULT_EMBED_DIM = 32
DEFAULT_SOURCE_HIDDEN = (64, 48)
DEFAULT_TARGET_HIDDEN = (80, 48)
DEFAULT_VIEW_DISC_HIDDEN = 64
DEFAULT_SIM_HIDDEN = (1024, 2048)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one fully-connected network (hidden layers are ReLU)."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    output_activation: str = "identity"  # "identity" | "logistic"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.output_dim) + self.hidden_dims
        if any(d < 1 for d in dims):
            raise ContractError(f"all layer dims must be >= 1, got {dims}")
        if self.output_activation not in ("identity", "logistic"):
            raise ContractError(f"unknown output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(sizes[:-1], sizes[1:]))


class Mlp:
    """Fully-connected net with fan-in-scaled uniform init and zero biases.

    ``trainable`` controls whether a forward pass exposes the weights to the
    active tape; a frozen net still transforms tracked inputs but its own
    parameters can never receive gradient.
    """

    def __init__(self, spec: MlpSpec, seed: Optional[int] = None):
        self.spec = spec
        self.trainable = True
        rng = np.random.default_rng(spec.init_seed if seed is None else seed)
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for fan_in, fan_out in spec.layer_dims:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(ad.Tensor(w, requires_grad=True))
            self.biases.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        squeeze = x.data.ndim == 1
        if squeeze:
            x = ad.reshape(x, (1, x.data.shape[0]))
        if x.data.ndim != 2 or x.data.shape[1] != self.spec.input_dim:
            raise DimensionError(
                f"input of shape {x.data.shape} does not match input_dim {self.spec.input_dim}"
            )
        ws = self.weights if self.trainable else [w.detach() for w in self.weights]
        bs = self.biases if self.trainable else [b.detach() for b in self.biases]
        h = x
        last = len(ws) - 1
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = ad.add_bias(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
            elif self.spec.output_activation == "logistic":
                h = ad.logistic(h)
        if squeeze:
            h = ad.reshape(h, (h.data.shape[1],))
        return h

    def named_parameters(self, prefix: str = "") -> list[tuple[str, ad.Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}w{i}", w))
            out.append((f"{prefix}b{i}", b))
        return out

    def parameters(self) -> list[ad.Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))


class MappingNet(Mlp):
    """Per-view feature transformation into the shared embedding space."""

    def __init__(self, spec: MlpSpec, view_tag: str, seed: Optional[int] = None):
        if view_tag not in ("source", "target"):
            raise ContractError(f"view_tag must be 'source' or 'target', got {view_tag!r}")
        if spec.output_activation != "identity":
            raise ContractError("mapping networks use an identity output")
        super().__init__(spec, seed)
        self.view_tag = view_tag

    @property
    def embed_dim(self) -> int:
        return self.spec.output_dim


class ViewDiscriminator(Mlp):
    """Two affine layers scoring the probability an embedding came from the
    source view; output is strictly inside (0, 1)."""

    def __init__(self, embed_dim: int, hidden_dim: int = DEFAULT_VIEW_DISC_HIDDEN, seed: int = 0):
        super().__init__(
            MlpSpec(embed_dim, (hidden_dim,), 1, output_activation="logistic", init_seed=seed)
        )

    def forward(self, e: ad.Tensor) -> ad.Tensor:
        out = super().forward(e)
        if out.data.ndim == 1:  # single embedding: (1,) -> scalar
            return ad.reshape(out, ())
        return ad.reshape(out, (out.data.shape[0],))


class SimilarityDiscriminator(Mlp):
    """Scores an ordered (source-embedding, target-embedding) pair in (0, 1).

    The pair is concatenated source-first before the affine stack, so the
    network is free to treat the two slots asymmetrically.
    """

    def __init__(
        self,
        embed_dim: int,
        hidden_dims: tuple[int, ...] = DEFAULT_SIM_HIDDEN,
        seed: int = 0,
    ):
        super().__init__(
            MlpSpec(2 * embed_dim, tuple(hidden_dims), 1, output_activation="logistic", init_seed=seed)
        )
        self.embed_dim = embed_dim

    def forward_pair(self, e_s: ad.Tensor, e_t: ad.Tensor) -> ad.Tensor:
        if e_s.data.shape != e_t.data.shape:
            raise DimensionError(
                f"pair embeddings disagree: {e_s.data.shape} vs {e_t.data.shape}"
            )
        width = e_s.data.shape[-1]
        if width != self.embed_dim:
            raise DimensionError(
                f"embedding width {width} does not match discriminator width {self.embed_dim}"
            )
        joint = ad.concat([e_s, e_t], axis=-1)
        out = super().forward(joint)
        if out.data.ndim == 1:
            return ad.reshape(out, ())
        return ad.reshape(out, (out.data.shape[0],))


@dataclass
class Model:
    """The four networks trained together."""

    source_map: MappingNet
    target_map: MappingNet
    view_disc: ViewDiscriminator
    sim_disc: SimilarityDiscriminator

    def named_parameters(self) -> list[tuple[str, ad.Tensor]]:
        out = []
        out += self.source_map.named_parameters("source_map/")
        out += self.target_map.named_parameters("target_map/")
        out += self.view_disc.named_parameters("view_disc/")
        out += self.sim_disc.named_parameters("sim_disc/")
        return out

    @property
    def embed_dim(self) -> int:
        return self.source_map.embed_dim

    @property
    def feature_dim(self) -> int:
        return self.source_map.spec.input_dim

    def set_trainable(self, *, source_map=None, target_map=None, view_disc=None, sim_disc=None):
        if source_map is not None:
            self.source_map.trainable = source_map
        if target_map is not None:
            self.target_map.trainable = target_map
        if view_disc is not None:
            self.view_disc.trainable = view_disc
        if sim_disc is not None:
            self.sim_disc.trainable = sim_disc

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            np.copyto(p.data, snap[name])


def _spec_dict(spec: MlpSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
        "output_activation": spec.output_activation,
        "init_seed": spec.init_seed,
    }


def _spec_from_dict(d: dict) -> MlpSpec:
    return MlpSpec(
        input_dim=int(d["input_dim"]),
        hidden_dims=tuple(int(h) for h in d["hidden_dims"]),
        output_dim=int(d["output_dim"]),
        output_activation=str(d["output_activation"]),
        init_seed=int(d["init_seed"]),
    )


CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_PARAMS = "params.npz"


def save_checkpoint(model: Model, path, train_config_hash: Optional[str] = None) -> None:
    """Write ``manifest.json`` + ``params.npz`` under ``path``; float64 arrays
    are stored raw, so a round trip is bit-exact."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    manifest = {
        "format": "crossview-checkpoint",
        "format_version": 1,
        "train_config_hash": train_config_hash,
        "nets": {
            "source_map": _spec_dict(model.source_map.spec),
            "target_map": _spec_dict(model.target_map.spec),
            "view_disc": _spec_dict(model.view_disc.spec),
            "sim_disc": _spec_dict(model.sim_disc.spec),
        },
        "param_names": [name for name, _ in named],
    }
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    np.savez(path / CHECKPOINT_PARAMS, **{name: p.data for name, p in named})


def load_checkpoint(path) -> Model:
    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise FormatError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "crossview-checkpoint":
        raise FormatError(f"{manifest_path} is not a checkpoint manifest")
    nets = manifest["nets"]
    sm_spec = _spec_from_dict(nets["source_map"])
    tm_spec = _spec_from_dict(nets["target_map"])
    vd_spec = _spec_from_dict(nets["view_disc"])
    sd_spec = _spec_from_dict(nets["sim_disc"])
    model = Model(
        source_map=MappingNet(sm_spec, "source"),
        target_map=MappingNet(tm_spec, "target"),
        view_disc=ViewDiscriminator(vd_spec.input_dim, vd_spec.hidden_dims[0], seed=vd_spec.init_seed),
        sim_disc=SimilarityDiscriminator(
            sd_spec.input_dim // 2, sd_spec.hidden_dims, seed=sd_spec.init_seed
        ),
    )
    with np.load(path / CHECKPOINT_PARAMS) as arrays:
        for name, p in model.named_parameters():
            if name not in arrays:
                raise FormatError(f"checkpoint {path} is missing parameter {name}")
            stored = arrays[name]
            if stored.shape != p.data.shape:
                raise FormatError(
                    f"checkpoint parameter {name} has shape {stored.shape}, expected {p.data.shape}"
                )
            np.copyto(p.data, stored)
    return model


def params_fingerprint(named_params) -> str:
    """Order-sensitive sha256 over raw parameter bytes; equal iff bit-identical."""
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()
