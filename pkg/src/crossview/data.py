"""Synthetic cross-view datasets, file I/O, identity-disjoint splits, and
batch sampling with in-batch positive/negative pair enumeration.

A dataset holds identity-labelled feature vectors from two camera-like views
("s" = source/probe, "t" = target/gallery). The synthetic generator draws one
latent vector per identity and renders each view through its own affine map;
the maps coincide at shift 0 and drift apart linearly with the shift
strength, so matching raw features across views degrades as the shift grows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, FormatError, ParseError

VIEW_SOURCE = "s"
VIEW_TARGET = "t"

MANIFEST_NAME = "manifest"
SAMPLES_NAME = "samples.csv"


@dataclass(frozen=True)
class Sample:
    identity_id: int
    view: str
    features: np.ndarray


class Dataset:
    """Immutable collection of view-labelled feature vectors.

    Invariants: identity ids are dense 0..K-1 and every identity has at least
    one sample in each view, so cross-view pairing is always possible.
    """

    def __init__(
        self,
        features: np.ndarray,
        identity_ids: np.ndarray,
        views: np.ndarray,
        meta: Optional[dict] = None,
    ):
        self.features = np.asarray(features, dtype=np.float64)
        self.identity_ids = np.asarray(identity_ids, dtype=np.int64)
        self.views = np.asarray(views, dtype="U1")
        self.meta = dict(meta) if meta else {}
        if self.features.ndim != 2:
            raise ContractError(f"features must be [samples, dims], got {self.features.shape}")
        n = self.features.shape[0]
        if self.identity_ids.shape != (n,) or self.views.shape != (n,):
            raise ContractError("features, identity_ids, and views must have one row per sample")
        if n == 0:
            raise ContractError("dataset needs at least one sample")
        bad = set(np.unique(self.views)) - {VIEW_SOURCE, VIEW_TARGET}
        if bad:
            raise ContractError(f"unknown view labels {sorted(bad)}")
        ids = np.unique(self.identity_ids)
        k = len(ids)
        if ids[0] != 0 or ids[-1] != k - 1:
            raise ContractError("identity ids must be dense 0..K-1")
        self.num_identities = k
        self.feature_dim = self.features.shape[1]
        self._rows_by_id_view: dict[tuple[int, str], np.ndarray] = {}
        for view in (VIEW_SOURCE, VIEW_TARGET):
            in_view = self.views == view
            for i in range(k):
                rows = np.nonzero(in_view & (self.identity_ids == i))[0]
                if rows.size == 0:
                    raise ContractError(f"identity {i} has no samples in view {view!r}")
                self._rows_by_id_view[(i, view)] = rows

    def __len__(self) -> int:
        return self.features.shape[0]

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(int(self.identity_ids[i]), str(self.views[i]), self.features[i])

    def view_rows(self, view: str) -> np.ndarray:
        return np.nonzero(self.views == view)[0]

    def rows_of(self, identity: int, view: str) -> np.ndarray:
        return self._rows_by_id_view[(identity, view)]

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.identity_ids, other.identity_ids)
            and np.array_equal(self.views, other.views)
        )


def gen_synthetic(
    num_identities: int,
    samples_per_view: int,
    latent_dim: int,
    feature_dim: int,
    view_shift_strength: float,
    noise_sigma: float,
    seed: int,
) -> Dataset:
    """Latent-factor generator: identity i gets z_i ~ N(0, I); view v renders
    A_v z_i + b_v + eps with eps ~ N(0, noise_sigma^2 I). The target map is
    the source map plus a random perturbation scaled by the shift strength,
    so shift 0 makes the two views identical.

    The source map has scaled orthonormal columns (an isometry of the latent
    space up to the global scale). The target map sees the same latent space
    rotated plane-by-plane through angles proportional to the shift strength
    and translated by a bias offset, so the cross-view displacement grows
    with the shift while the problem stays perfectly conditioned: undoing the
    view discrepancy amounts to one global rotation, the same for every
    identity. Shifts are monotone in displacement up to roughly 2.
    """
    if min(num_identities, samples_per_view, latent_dim, feature_dim) < 1:
        raise ContractError("all generator counts must be >= 1")
    if feature_dim < latent_dim:
        raise ContractError(
            f"feature_dim {feature_dim} must be >= latent_dim {latent_dim}"
        )
    if noise_sigma < 0:
        raise ContractError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    scale = 0.6
    q, _ = np.linalg.qr(rng.normal(size=(feature_dim, latent_dim)))
    base_map = scale * q
    rotation = np.eye(latent_dim)
    plane_angles = rng.uniform(0.55, 1.0, size=latent_dim // 2) * view_shift_strength
    for k, angle in enumerate(plane_angles):
        i, j = 2 * k, 2 * k + 1
        c, s = np.cos(angle), np.sin(angle)
        rotation[i, i] = c
        rotation[i, j] = -s
        rotation[j, i] = s
        rotation[j, j] = c
    base_bias = rng.normal(0.0, 0.25 * scale, size=feature_dim)
    delta_bias = rng.normal(0.0, 0.4 * scale, size=feature_dim)
    latents = rng.normal(size=(num_identities, latent_dim))
    maps = {
        VIEW_SOURCE: (base_map, base_bias),
        VIEW_TARGET: (base_map @ rotation,
                      base_bias + view_shift_strength * delta_bias),
    }
    rows, ids, views = [], [], []
    for i in range(num_identities):
        for view in (VIEW_SOURCE, VIEW_TARGET):
            a, b = maps[view]
            clean = a @ latents[i] + b
            noise = rng.normal(0.0, 1.0, size=(samples_per_view, feature_dim))
            for s in range(samples_per_view):
                rows.append(clean + noise_sigma * noise[s])
                ids.append(i)
                views.append(view)
    meta = {
        "generator": {
            "num_identities": num_identities,
            "samples_per_view": samples_per_view,
            "latent_dim": latent_dim,
            "feature_dim": feature_dim,
            "view_shift_strength": view_shift_strength,
            "noise_sigma": noise_sigma,
            "seed": seed,
        }
    }
    return Dataset(np.array(rows), np.array(ids), np.array(views), meta=meta)


def save_dataset(ds: Dataset, path) -> None:
    """Write ``manifest`` (JSON) and ``samples.csv`` under ``path``. Floats
    are serialised with shortest round-trip repr, so load is value-exact."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_identities": ds.num_identities,
        "feature_dim": ds.feature_dim,
        "num_samples": len(ds),
    }
    manifest.update(ds.meta)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    header = "identity,view," + ",".join(f"f{j}" for j in range(ds.feature_dim))
    lines = [header]
    for i in range(len(ds)):
        feats = ",".join(repr(float(v)) for v in ds.features[i])
        lines.append(f"{int(ds.identity_ids[i])},{ds.views[i]},{feats}")
    (path / SAMPLES_NAME).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    csv_path = path / SAMPLES_NAME
    if not csv_path.exists():
        raise FormatError(f"no {SAMPLES_NAME} under {path}")
    text = csv_path.read_text()
    lines = [ln for ln in text.split("\n") if ln != ""]
    if not lines:
        raise FormatError(f"{csv_path} is empty")
    header = lines[0].split(",")
    if len(header) < 3 or header[:2] != ["identity", "view"]:
        raise ParseError(f"{csv_path} line 1: bad header {lines[0]!r}")
    ncols = len(header)
    feats, ids, views = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != ncols:
            raise ParseError(f"{csv_path} line {lineno}: expected {ncols} columns, got {len(parts)}")
        try:
            ids.append(int(parts[0]))
            feats.append([float(v) for v in parts[2:]])
        except ValueError as e:
            raise ParseError(f"{csv_path} line {lineno}: {e}") from None
        if parts[1] not in (VIEW_SOURCE, VIEW_TARGET):
            raise ParseError(f"{csv_path} line {lineno}: bad view {parts[1]!r}")
        views.append(parts[1])
    if not feats:
        raise FormatError(f"{csv_path} has a header but no samples")
    meta = {}
    manifest_path = path / MANIFEST_NAME
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("feature_dim") not in (None, ncols - 2):
            raise FormatError(
                f"{manifest_path}: feature_dim {manifest.get('feature_dim')} "
                f"disagrees with {ncols - 2} feature columns"
            )
        if "generator" in manifest:
            meta["generator"] = manifest["generator"]
    try:
        return Dataset(np.array(feats), np.array(ids), np.array(views), meta=meta)
    except ContractError as e:
        raise FormatError(f"{csv_path}: {e}") from None


@dataclass(frozen=True)
class SplitSpec:
    """Identity counts of the train/valid/test partition."""

    train: int
    valid: int
    test: int
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.valid, self.test) < 1:
            raise ContractError("split counts must all be >= 1")


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Identity-disjoint partition; each part's ids are re-densified to
    0..k-1 (sorted by original id) so Dataset invariants keep holding."""
    need = spec.train + spec.valid + spec.test
    if need > ds.num_identities:
        raise ContractError(
            f"split needs {need} identities but the dataset has {ds.num_identities}"
        )
    order = np.random.default_rng(spec.seed).permutation(ds.num_identities)
    groups = (
        order[: spec.train],
        order[spec.train : spec.train + spec.valid],
        order[spec.train + spec.valid : need],
    )
    parts = []
    for chosen in groups:
        chosen = np.sort(chosen)
        remap = {int(old): new for new, old in enumerate(chosen)}
        mask = np.isin(ds.identity_ids, chosen)
        new_ids = np.array([remap[int(i)] for i in ds.identity_ids[mask]], dtype=np.int64)
        parts.append(Dataset(ds.features[mask], new_ids, ds.views[mask], meta=ds.meta))
    return tuple(parts)


@dataclass(frozen=True)
class BatchSpec:
    """P identities per batch, S samples per identity per view.

    ``symmetric_anchors`` additionally enumerates target-view anchors paired
    against source-view samples (off by default: anchors come from the
    source view only).
    """

    identities_per_batch: int = 32
    samples_per_identity: int = 2
    seed: int = 0
    symmetric_anchors: bool = False

    def __post_init__(self):
        if self.identities_per_batch < 2:
            raise ContractError("need at least 2 identities per batch so negatives exist")
        if self.samples_per_identity < 1:
            raise ContractError("need at least 1 sample per identity per view")


@dataclass
class PairBatch:
    """One training batch with its anchor-major pair enumeration.

    ``pos_src``/``pos_tgt`` (and the ``neg_`` twins) index into the feature
    matrices row-wise; every anchor contributes the same number of positives
    and negatives, in order, so weights can be computed on a regular grid.
    """

    source_features: np.ndarray
    source_ids: np.ndarray
    target_features: np.ndarray
    target_ids: np.ndarray
    pos_src: np.ndarray
    pos_tgt: np.ndarray
    neg_src: np.ndarray
    neg_tgt: np.ndarray
    num_anchors: int
    pos_per_anchor: int
    neg_per_anchor: int
    cursor_identity: int

    @property
    def num_pairs(self) -> int:
        return self.pos_src.size + self.neg_src.size


def _pick_rows(rows: np.ndarray, count: int, rng) -> np.ndarray:
    if rows.size >= count:
        return rng.choice(rows, size=count, replace=False)
    return rng.choice(rows, size=count, replace=True)


def sample_sp_batch(
    ds: Dataset,
    spec: BatchSpec,
    epoch_cursor: int,
    rng: Optional[np.random.Generator] = None,
) -> PairBatch:
    """Draw the batch anchored at identity ``epoch_cursor``: that identity is
    always included, P-1 others are drawn uniformly without replacement, and
    S samples per identity per view (with replacement only under scarcity)."""
    p, s = spec.identities_per_batch, spec.samples_per_identity
    if ds.num_identities < p:
        raise ContractError(
            f"batch needs {p} identities but the dataset has {ds.num_identities}"
        )
    if not 0 <= epoch_cursor < ds.num_identities:
        raise ContractError(
            f"epoch_cursor {epoch_cursor} outside identity range 0..{ds.num_identities - 1}"
        )
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    others = np.delete(np.arange(ds.num_identities), epoch_cursor)
    chosen = np.concatenate([[epoch_cursor], rng.choice(others, size=p - 1, replace=False)])
    src_rows, tgt_rows, batch_ids = [], [], []
    for ident in chosen:
        src_rows.append(_pick_rows(ds.rows_of(int(ident), VIEW_SOURCE), s, rng))
        tgt_rows.append(_pick_rows(ds.rows_of(int(ident), VIEW_TARGET), s, rng))
        batch_ids.extend([int(ident)] * s)
    src_rows = np.concatenate(src_rows)
    tgt_rows = np.concatenate(tgt_rows)
    ids = np.array(batch_ids, dtype=np.int64)

    same = ids[:, None] == ids[None, :]  # [anchors, candidates]
    pos_a, pos_c = np.nonzero(same)
    neg_a, neg_c = np.nonzero(~same)
    posn, negn = s, (p - 1) * s
    pos_src, pos_tgt = [pos_a], [pos_c]
    neg_src, neg_tgt = [neg_a], [neg_c]
    num_anchors = ids.size
    if spec.symmetric_anchors:
        # target-view anchors paired against source-view samples; the pair
        # stays ordered (source row, target row)
        pos_src.append(pos_c)
        pos_tgt.append(pos_a)
        neg_src.append(neg_c)
        neg_tgt.append(neg_a)
        num_anchors *= 2
    return PairBatch(
        source_features=ds.features[src_rows],
        source_ids=ids,
        target_features=ds.features[tgt_rows],
        target_ids=ids.copy(),
        pos_src=np.concatenate(pos_src),
        pos_tgt=np.concatenate(pos_tgt),
        neg_src=np.concatenate(neg_src),
        neg_tgt=np.concatenate(neg_tgt),
        num_anchors=num_anchors,
        pos_per_anchor=posn,
        neg_per_anchor=negn,
        cursor_identity=epoch_cursor,
    )
