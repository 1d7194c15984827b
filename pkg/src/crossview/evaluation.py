"""Retrieval evaluation: embed every sample with its view's mapping, rank
galleries per probe by Euclidean distance, and report the single-shot match
curve, rank-R reads, mean average precision, and the view-discriminator
confusion diagnostic.

Distance ties are broken by ascending gallery index; with few identities the
curve is tie-sensitive, so the rule is fixed and documented rather than left
to sort internals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import VIEW_SOURCE, VIEW_TARGET, Dataset
from .errors import ContractError
from .nets import Model

RANK_READS = (1, 5, 20)


@dataclass
class EvalReport:
    cmc: np.ndarray  # cmc[r-1] = fraction of probes matched within top r
    rank_values: dict[int, float]
    map_score: float
    dd_confusion_accuracy: float
    num_probes: int
    num_gallery: int
    probes_without_matches: int = 0
    gallery_seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "cmc": [float(v) for v in self.cmc],
            "rank_values": {str(r): float(v) for r, v in self.rank_values.items()},
            "map_score": float(self.map_score),
            "dd_confusion_accuracy": float(self.dd_confusion_accuracy),
            "num_probes": self.num_probes,
            "num_gallery": self.num_gallery,
            "probes_without_matches": self.probes_without_matches,
            "gallery_seed": self.gallery_seed,
        }

    def save(self, report_path, cmc_csv_path=None) -> None:
        Path(report_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if cmc_csv_path is not None:
            lines = ["rank,accuracy"]
            lines += [f"{r + 1},{repr(float(v))}" for r, v in enumerate(self.cmc)]
            Path(cmc_csv_path).write_text("\n".join(lines) + "\n")


def embed_all(model: Model, ds: Dataset) -> np.ndarray:
    """Embedding table aligned with the dataset rows: source rows go through
    the source mapping, target rows through the target mapping. No tape is
    recorded."""
    out = np.empty((len(ds), model.embed_dim))
    src = ds.view_rows(VIEW_SOURCE)
    tgt = ds.view_rows(VIEW_TARGET)
    out[src] = model.source_map.forward(ad.Tensor(ds.features[src])).data
    out[tgt] = model.target_map.forward(ad.Tensor(ds.features[tgt])).data
    return out


def rank_gallery(probe_embedding: np.ndarray, gallery_embeddings: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending distance to the probe; equidistant
    entries keep ascending index order."""
    if gallery_embeddings.ndim != 2 or gallery_embeddings.shape[0] == 0:
        raise ContractError("rank_gallery needs a nonempty gallery")
    diff = gallery_embeddings - probe_embedding
    dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return np.argsort(dists, kind="stable")


def single_shot_gallery(ds: Dataset, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Probe rows (all source-view samples) and a gallery with exactly one
    seeded target-view sample per identity."""
    rng = np.random.default_rng(seed)
    gallery = []
    for ident in range(ds.num_identities):
        rows = ds.rows_of(ident, VIEW_TARGET)
        gallery.append(int(rng.choice(rows)))
    return ds.view_rows(VIEW_SOURCE), np.array(gallery, dtype=np.intp)


def cmc_from_embeddings(
    probe_embs: np.ndarray,
    probe_ids: np.ndarray,
    gallery_embs: np.ndarray,
    gallery_ids: np.ndarray,
) -> np.ndarray:
    """Match curve over ranks 1..gallery size; every probe identity must
    occur in the gallery."""
    missing = set(np.unique(probe_ids)) - set(np.unique(gallery_ids))
    if missing:
        raise ContractError(f"probe identities {sorted(missing)} absent from the gallery")
    n_gallery = gallery_embs.shape[0]
    hits = np.zeros(n_gallery)
    for emb, pid in zip(probe_embs, probe_ids):
        order = rank_gallery(emb, gallery_embs)
        first = int(np.nonzero(gallery_ids[order] == pid)[0][0])
        hits[first:] += 1.0
    return hits / probe_embs.shape[0]


def cmc_single_shot(model: Model, ds: Dataset, gallery_seed: int = 0) -> np.ndarray:
    probe_rows, gallery_rows = single_shot_gallery(ds, gallery_seed)
    embs = embed_all(model, ds)
    return cmc_from_embeddings(
        embs[probe_rows], ds.identity_ids[probe_rows], embs[gallery_rows], ds.identity_ids[gallery_rows]
    )


def average_precision(order_ids: np.ndarray, probe_id: int) -> Optional[float]:
    """Average precision of one ranked id list; None when no true match."""
    rel = order_ids == probe_id
    total = int(rel.sum())
    if total == 0:
        return None
    found = np.cumsum(rel)
    precisions = found[rel] / (np.nonzero(rel)[0] + 1.0)
    return float(precisions.sum() / total)


def mean_average_precision(model: Model, ds: Dataset) -> tuple[float, int]:
    """mAP over all source-view probes against the full multi-shot
    target-view gallery; probes without any true match are excluded and
    counted."""
    embs = embed_all(model, ds)
    probe_rows = ds.view_rows(VIEW_SOURCE)
    gallery_rows = ds.view_rows(VIEW_TARGET)
    gal_embs = embs[gallery_rows]
    gal_ids = ds.identity_ids[gallery_rows]
    ap_values = []
    excluded = 0
    for row in probe_rows:
        order = rank_gallery(embs[row], gal_embs)
        ap = average_precision(gal_ids[order], int(ds.identity_ids[row]))
        if ap is None:
            excluded += 1
        else:
            ap_values.append(ap)
    if not ap_values:
        raise ContractError("no probe has any gallery match")
    return float(np.mean(ap_values)), excluded


def view_confusion_accuracy(model: Model, ds: Dataset, rows: Optional[np.ndarray] = None) -> float:
    """View-classification accuracy of the discriminator on held-out samples,
    thresholding at 1/2 (exactly 1/2 predicts target). Near 0.5 means the
    embeddings no longer carry view information."""
    if rows is None:
        rows = np.arange(len(ds))
    views = ds.views[rows]
    if len(set(views.tolist())) < 2:
        raise ContractError("view confusion accuracy needs samples from both views")
    embs = embed_all(model, ds)[rows]
    probs = model.view_disc.forward(ad.Tensor(embs)).data
    predicted_source = probs > 0.5
    actual_source = views == VIEW_SOURCE
    return float(np.mean(predicted_source == actual_source))


def evaluate(model: Model, ds: Dataset, gallery_seed: int = 0) -> EvalReport:
    """Full retrieval report on one dataset split."""
    cmc = cmc_single_shot(model, ds, gallery_seed)
    rank_values = {r: float(cmc[min(r, len(cmc)) - 1]) for r in RANK_READS}
    map_score, excluded = mean_average_precision(model, ds)
    dd_acc = view_confusion_accuracy(model, ds)
    return EvalReport(
        cmc=cmc,
        rank_values=rank_values,
        map_score=map_score,
        dd_confusion_accuracy=dd_acc,
        num_probes=int(ds.view_rows(VIEW_SOURCE).size),
        num_gallery=ds.num_identities,
        probes_without_matches=excluded,
        gallery_seed=gallery_seed,
    )
