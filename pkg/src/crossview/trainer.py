"""Staged training: similarity learning first, then alternating adversarial
rounds that pit the view discriminator against the mappings.

Stage (a) initialises the four networks. Stage (b) jointly trains the two
mappings and the similarity discriminator on identity-balanced pair batches;
the view discriminator is never even evaluated here. Stage (c) alternates one
discriminator pass (mappings frozen) with one mapping confusion pass
(discriminator frozen) per round, early-stopping on a validation loss that
combines the similarity objective with the confusion term, and returns the
best-validation snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import losses as L
from .data import BatchSpec, Dataset, PairBatch, VIEW_SOURCE, VIEW_TARGET, sample_sp_batch
from .errors import ContractError, TrainingError
from .losses import LossConfig
from .nets import (
    DEFAULT_EMBED_DIM,
    DEFAULT_SIM_HIDDEN,
    DEFAULT_SOURCE_HIDDEN,
    DEFAULT_TARGET_HIDDEN,
    DEFAULT_VIEW_DISC_HIDDEN,
    MappingNet,
    MlpSpec,
    Model,
    SimilarityDiscriminator,
    ViewDiscriminator,
)

BASE_LEARNING_RATE = 0.001
LR_DECAY_EVERY = 10  # epochs; the rate is divided by 10 at each boundary
MOMENTUM = 0.9


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = BASE_LEARNING_RATE
    sim_epochs: int = 12
    adv_rounds: int = 50
    dd_steps_per_round: Optional[int] = None  # None = one full epoch of batches
    map_steps_per_round: Optional[int] = None
    patience: int = 5
    refresh_sim_every: int = 0  # 0 = similarity stage is never revisited
    combined_map_update: bool = False  # also feed the similarity loss to mapping updates
    use_adaptive_weights: bool = False
    symmetric_nets: bool = False  # ablation: give both mappings the source architecture
    embed_dim: int = DEFAULT_EMBED_DIM
    source_hidden: tuple[int, ...] = DEFAULT_SOURCE_HIDDEN
    target_hidden: tuple[int, ...] = DEFAULT_TARGET_HIDDEN
    view_disc_hidden: int = DEFAULT_VIEW_DISC_HIDDEN
    sim_hidden: tuple[int, ...] = DEFAULT_SIM_HIDDEN
    batch: BatchSpec = field(default_factory=BatchSpec)
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")
        if self.sim_epochs < 0 or self.adv_rounds < 0:
            raise ContractError("epoch/round counts must be >= 0")


@dataclass
class HistoryRecord:
    """One completed stage-(b) epoch or stage-(c) round.

    Fields that a stage does not measure stay None: the view-discriminator
    terms are never evaluated during the similarity stage.
    """

    epoch: int
    view_disc_loss: Optional[float]
    sim_loss: Optional[float]
    confusion_loss: Optional[float]
    valid_loss: Optional[float]
    dd_accuracy: Optional[float]
    lr: float


HISTORY_HEADER = "epoch,loss_eq1,loss_sim,loss_eq3,valid_loss,dd_accuracy,lr"


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        def cell(v):
            return "" if v is None else repr(float(v))

        lines = [HISTORY_HEADER]
        for r in self.records:
            lines.append(
                ",".join(
                    [
                        str(r.epoch),
                        cell(r.view_disc_loss),
                        cell(r.sim_loss),
                        cell(r.confusion_loss),
                        cell(r.valid_loss),
                        cell(r.dd_accuracy),
                        repr(float(r.lr)),
                    ]
                )
            )
        from pathlib import Path

        Path(path).write_text("\n".join(lines) + "\n")


def schedule_lr(base_lr: float, epoch: int) -> float:
    """base / 10^floor(epoch/10): starts at the base rate, one decade down
    every ten epochs."""
    return base_lr / (10.0 ** (epoch // LR_DECAY_EVERY))


class MomentumSgd:
    """Plain momentum SGD (velocity 0.9) over a fixed named parameter list,
    with the step-decay learning-rate schedule."""

    def __init__(self, named_params, base_lr: float, momentum: float = MOMENTUM):
        self.named_params = list(named_params)
        self.base_lr = base_lr
        self.momentum = momentum
        self.epoch = 0
        self.velocities = [np.zeros_like(p.data) for _, p in self.named_params]

    @property
    def lr(self) -> float:
        return schedule_lr(self.base_lr, self.epoch)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = int(epoch)

    def step(self) -> None:
        lr = self.lr
        for (name, p), v in zip(self.named_params, self.velocities):
            g = p.grad
            if g is None:
                raise TrainingError(f"parameter {name} has no gradient; backward not run?")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient on parameter {name}")
            v *= self.momentum
            v += g
            p.data -= lr * v


def init_models(cfg: TrainConfig, feature_dim: int) -> Model:
    """Stage (a): fresh networks, asymmetric mapping widths unless the
    symmetric ablation is requested (then both use the source widths but
    keep independent parameters)."""
    target_hidden = cfg.source_hidden if cfg.symmetric_nets else cfg.target_hidden
    seed = cfg.seed
    return Model(
        source_map=MappingNet(
            MlpSpec(feature_dim, cfg.source_hidden, cfg.embed_dim, init_seed=seed), "source"
        ),
        target_map=MappingNet(
            MlpSpec(feature_dim, target_hidden, cfg.embed_dim, init_seed=seed + 1), "target"
        ),
        view_disc=ViewDiscriminator(cfg.embed_dim, cfg.view_disc_hidden, seed=seed + 2),
        sim_disc=SimilarityDiscriminator(cfg.embed_dim, cfg.sim_hidden, seed=seed + 3),
    )


def _check_finite_loss(loss: ad.Tensor, stage: str, epoch: int, cursor: int) -> None:
    val = loss.item()
    if not math.isfinite(val):
        raise TrainingError(
            f"non-finite {stage} loss {val!r} at epoch {epoch}, cursor identity {cursor}"
        )


def similarity_batch_loss(model: Model, batch: PairBatch, cfg: TrainConfig) -> ad.Tensor:
    """Loss of one pair batch: embeddings, all-pair distances, similarity
    scores on the pairs that need them, then the configured objective."""
    lc = cfg.loss_cfg
    es = model.source_map.forward(ad.Tensor(batch.source_features))
    et = model.target_map.forward(ad.Tensor(batch.target_features))
    pos_d = ad.pair_distances(ad.take(es, batch.pos_src), ad.take(et, batch.pos_tgt))
    neg_d = ad.pair_distances(ad.take(es, batch.neg_src), ad.take(et, batch.neg_tgt))
    pos_p = model.sim_disc.forward_pair(ad.take(es, batch.pos_src), ad.take(et, batch.pos_tgt))
    if cfg.use_adaptive_weights:
        w_p, w_n = L.adaptive_weights_batch(
            pos_d.data.reshape(batch.num_anchors, batch.pos_per_anchor),
            neg_d.data.reshape(batch.num_anchors, batch.neg_per_anchor),
        )
        return L.weighted_sim_loss(
            pos_p, pos_d, neg_d, w_p.reshape(-1), w_n.reshape(-1), batch.num_anchors, lc
        )
    neg_p = None
    if lc.full_bce_sim:
        neg_p = model.sim_disc.forward_pair(
            ad.take(es, batch.neg_src), ad.take(et, batch.neg_tgt)
        )
    return L.contrastive_sim_loss(pos_p, pos_d, neg_d, lc, neg_probs=neg_p)


def _epoch_batches(ds: Dataset, cfg: TrainConfig, rng) -> list[PairBatch]:
    order = rng.permutation(ds.num_identities)
    return [sample_sp_batch(ds, cfg.batch, int(cursor), rng) for cursor in order]


def validation_sim_loss(model: Model, valid: Dataset, cfg: TrainConfig) -> float:
    """Deterministic similarity loss over every cross-view pair of the
    validation split (anchors = all source samples)."""
    src_rows = valid.view_rows(VIEW_SOURCE)
    tgt_rows = valid.view_rows(VIEW_TARGET)
    src_ids = valid.identity_ids[src_rows]
    tgt_ids = valid.identity_ids[tgt_rows]
    same = src_ids[:, None] == tgt_ids[None, :]
    pos_a, pos_c = np.nonzero(same)
    neg_a, neg_c = np.nonzero(~same)
    es = model.source_map.forward(ad.Tensor(valid.features[src_rows]))
    et = model.target_map.forward(ad.Tensor(valid.features[tgt_rows]))
    pos_d = ad.pair_distances(ad.take(es, pos_a), ad.take(et, pos_c))
    neg_d = ad.pair_distances(ad.take(es, neg_a), ad.take(et, neg_c))
    pos_p = model.sim_disc.forward_pair(ad.take(es, pos_a), ad.take(et, pos_c))
    lc = cfg.loss_cfg
    if cfg.use_adaptive_weights:
        per_anchor_pos = pos_a.size // src_ids.size
        per_anchor_neg = neg_a.size // src_ids.size
        w_p, w_n = L.adaptive_weights_batch(
            pos_d.data.reshape(src_ids.size, per_anchor_pos),
            neg_d.data.reshape(src_ids.size, per_anchor_neg),
        )
        loss = L.weighted_sim_loss(
            pos_p, pos_d, neg_d, w_p.reshape(-1), w_n.reshape(-1), src_ids.size, lc
        )
    else:
        neg_p = None
        if lc.full_bce_sim:
            neg_p = model.sim_disc.forward_pair(ad.take(es, neg_a), ad.take(et, neg_c))
        loss = L.contrastive_sim_loss(pos_p, pos_d, neg_d, lc, neg_probs=neg_p)
    return loss.item()


def validation_confusion_loss(model: Model, valid: Dataset) -> float:
    embs = ad.Tensor(np.concatenate([
        model.source_map.forward(ad.Tensor(valid.features[valid.view_rows(VIEW_SOURCE)])).data,
        model.target_map.forward(ad.Tensor(valid.features[valid.view_rows(VIEW_TARGET)])).data,
    ]))
    probs = model.view_disc.forward(embs)
    return L.view_confusion_loss(probs).item()


def _dd_validation_accuracy(model: Model, valid: Dataset) -> float:
    from .evaluation import view_confusion_accuracy

    return view_confusion_accuracy(model, valid)


def train_similarity_stage(
    model: Model,
    train_data: Dataset,
    cfg: TrainConfig,
    valid_data: Optional[Dataset] = None,
    history: Optional[TrainHistory] = None,
    optimizer: Optional[MomentumSgd] = None,
    epochs: Optional[int] = None,
    epoch_offset: int = 0,
    rng: Optional[np.random.Generator] = None,
    epoch_callback: Optional[Callable[[int, Model], None]] = None,
) -> tuple[TrainHistory, MomentumSgd]:
    """Stage (b): minimise the similarity objective jointly over the two
    mappings and the similarity discriminator. The view discriminator is
    untouched (and never evaluated)."""
    history = history if history is not None else TrainHistory()
    rng = rng if rng is not None else np.random.default_rng(cfg.batch.seed)
    names = (
        model.source_map.named_parameters("source_map/")
        + model.target_map.named_parameters("target_map/")
        + model.sim_disc.named_parameters("sim_disc/")
    )
    opt = optimizer if optimizer is not None else MomentumSgd(names, cfg.learning_rate)
    model.set_trainable(source_map=True, target_map=True, sim_disc=True)
    n_epochs = cfg.sim_epochs if epochs is None else epochs
    for e in range(n_epochs):
        epoch = epoch_offset + e
        opt.set_epoch(epoch)
        total, count = 0.0, 0
        for batch in _epoch_batches(train_data, cfg, rng):
            with ad.Tape() as tape:
                loss = similarity_batch_loss(model, batch, cfg)
                _check_finite_loss(loss, "similarity", epoch, batch.cursor_identity)
                tape.backward(loss)
            opt.step()
            total += loss.item()
            count += 1
        valid_loss = None
        if valid_data is not None:
            valid_loss = validation_sim_loss(model, valid_data, cfg)
        history.records.append(
            HistoryRecord(
                epoch=epoch,
                view_disc_loss=None,
                sim_loss=total / max(count, 1),
                confusion_loss=None,
                valid_loss=valid_loss,
                dd_accuracy=None,
                lr=opt.lr,
            )
        )
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return history, opt


@dataclass
class RoundRecord:
    view_disc_loss: float
    confusion_loss: float


def adversarial_round(
    model: Model,
    train_data: Dataset,
    cfg: TrainConfig,
    dd_opt: MomentumSgd,
    map_opt: MomentumSgd,
    round_idx: int,
    rng: np.random.Generator,
) -> RoundRecord:
    """One stage-(c) round: discriminator steps with mappings frozen, then
    mapping confusion steps with the discriminator frozen. The similarity
    discriminator is untouched throughout."""
    dd_opt.set_epoch(round_idx)
    map_opt.set_epoch(round_idx)

    # discriminator phase: embeddings are computed off-tape, so mapping
    # parameters are structurally unreachable
    model.set_trainable(view_disc=True, sim_disc=False)
    dd_total, dd_count = 0.0, 0
    batches = _epoch_batches(train_data, cfg, rng)
    if cfg.dd_steps_per_round is not None:
        batches = batches[: cfg.dd_steps_per_round]
    for batch in batches:
        es = model.source_map.forward(ad.Tensor(batch.source_features)).data
        et = model.target_map.forward(ad.Tensor(batch.target_features)).data
        with ad.Tape() as tape:
            ps = model.view_disc.forward(ad.Tensor(es))
            pt = model.view_disc.forward(ad.Tensor(et))
            loss = L.view_disc_loss(ps, pt)
            _check_finite_loss(loss, "view-discriminator", round_idx, batch.cursor_identity)
            tape.backward(loss)
        dd_opt.step()
        dd_total += loss.item()
        dd_count += 1

    # mapping phase: the discriminator forwards with frozen weights
    model.set_trainable(source_map=True, target_map=True, view_disc=False)
    map_total, map_count = 0.0, 0
    batches = _epoch_batches(train_data, cfg, rng)
    if cfg.map_steps_per_round is not None:
        batches = batches[: cfg.map_steps_per_round]
    for batch in batches:
        with ad.Tape() as tape:
            es = model.source_map.forward(ad.Tensor(batch.source_features))
            et = model.target_map.forward(ad.Tensor(batch.target_features))
            probs = ad.concat(
                [model.view_disc.forward(es), model.view_disc.forward(et)], axis=0
            )
            loss = L.view_confusion_loss(probs)
            if cfg.combined_map_update:
                loss = ad.add(loss, similarity_batch_loss(model, batch, cfg))
            _check_finite_loss(loss, "view-confusion", round_idx, batch.cursor_identity)
            tape.backward(loss)
        map_opt.step()
        map_total += loss.item()
        map_count += 1

    model.set_trainable(view_disc=True, sim_disc=True)
    return RoundRecord(
        view_disc_loss=dd_total / max(dd_count, 1),
        confusion_loss=map_total / max(map_count, 1),
    )


def train_view_discriminator(
    model: Model,
    train_data: Dataset,
    cfg: TrainConfig,
    epochs: int,
    rng: Optional[np.random.Generator] = None,
) -> None:
    """Train only the view discriminator against the current (frozen)
    mappings; used both inside adversarial rounds and as the pre-adaptation
    baseline probe."""
    rng = rng if rng is not None else np.random.default_rng(cfg.batch.seed + 1)
    dd_opt = MomentumSgd(model.view_disc.named_parameters("view_disc/"), cfg.learning_rate)
    model.set_trainable(view_disc=True)
    for e in range(epochs):
        dd_opt.set_epoch(e)
        for batch in _epoch_batches(train_data, cfg, rng):
            es = model.source_map.forward(ad.Tensor(batch.source_features)).data
            et = model.target_map.forward(ad.Tensor(batch.target_features)).data
            with ad.Tape() as tape:
                loss = L.view_disc_loss(
                    model.view_disc.forward(ad.Tensor(es)),
                    model.view_disc.forward(ad.Tensor(et)),
                )
                tape.backward(loss)
            dd_opt.step()


def fit(
    train_data: Dataset,
    valid_data: Dataset,
    cfg: TrainConfig,
    epoch_callback: Optional[Callable[[int, Model], None]] = None,
) -> tuple[Model, TrainHistory]:
    """Full staged procedure. Stops the adversarial loop when the validation
    loss (similarity + confusion) has not improved for ``patience``
    consecutive rounds or at the round cap, and returns the best-validation
    snapshot."""
    if valid_data is None or len(valid_data) == 0:
        raise ContractError("fit requires a nonempty validation split")
    model = init_models(cfg, train_data.feature_dim)
    rng = np.random.default_rng(cfg.batch.seed)
    history, sim_opt = train_similarity_stage(
        model,
        train_data,
        cfg,
        valid_data=valid_data,
        rng=rng,
        epoch_callback=epoch_callback,
    )

    dd_opt = MomentumSgd(model.view_disc.named_parameters("view_disc/"), cfg.learning_rate)
    map_opt = MomentumSgd(
        model.source_map.named_parameters("source_map/")
        + model.target_map.named_parameters("target_map/"),
        cfg.learning_rate,
    )
    best_loss = math.inf
    best_snap = model.snapshot()
    stall = 0
    for round_idx in range(cfg.adv_rounds):
        record = adversarial_round(model, train_data, cfg, dd_opt, map_opt, round_idx, rng)
        if cfg.refresh_sim_every and (round_idx + 1) % cfg.refresh_sim_every == 0:
            train_similarity_stage(
                model,
                train_data,
                cfg,
                optimizer=sim_opt,
                epochs=1,
                epoch_offset=cfg.sim_epochs + round_idx,
                rng=rng,
            )
        valid_total = validation_sim_loss(model, valid_data, cfg) + validation_confusion_loss(
            model, valid_data
        )
        epoch = cfg.sim_epochs + round_idx
        history.records.append(
            HistoryRecord(
                epoch=epoch,
                view_disc_loss=record.view_disc_loss,
                sim_loss=None,
                confusion_loss=record.confusion_loss,
                valid_loss=valid_total,
                dd_accuracy=_dd_validation_accuracy(model, valid_data),
                lr=map_opt.lr,
            )
        )
        if epoch_callback is not None:
            epoch_callback(epoch, model)
        if valid_total < best_loss:
            best_loss = valid_total
            best_snap = model.snapshot()
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    model.restore(best_snap)
    return model, history
