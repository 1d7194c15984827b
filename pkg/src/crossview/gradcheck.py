"""Randomized finite-difference verification of every tensor operation and
every loss, used by the ``gradcheck`` CLI command and the acceptance suite.

Central differences at step 1e-6 are only a valid oracle on smooth,
resolvable instances, so draws are screened before checking:

* away from non-smooth points (relu kinks, the hinge boundary, zero
  distances, clamp edges), since a difference across a kink measures nothing;
* discriminator outputs away from saturation, because evaluating log(1 - p)
  with p near 1 cancels catastrophically and poisons the difference quotient;
* moderate loss values and no faint-but-alive gradient entries below
  1e-3 * max(1, |loss|), since float64 roundoff in the difference quotient
  scales with the loss value and swamps the relative comparison on faint
  gradients. Exactly-zero gradients are fine: a structurally dead path stays
  dead under a 1e-6 perturbation, so the numeric difference is exactly zero
  too.

Rejected draws are resampled deterministically from the same stream.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import nets
from .errors import ContractError

DEFAULT_TOLERANCE = 1e-5
DEFAULT_STEP = 1e-6
DEFAULT_TRIALS = 20
GRAD_RESOLUTION_FLOOR = 1e-3  # scaled by max(1, |loss|) per instance
PROB_SATURATION_GAP = 1e-4
MAX_PAIR_DISTANCE = 3.0
MAX_INSTANCE_ATTEMPTS = 500


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _t(rng, shape, scale=1.0):
    return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, gap):
    vals = rng.normal(size=shape)
    vals = np.where(np.abs(vals) < gap, np.sign(vals + 1e-9) * (gap + np.abs(vals)), vals)
    return ad.Tensor(vals, requires_grad=True)


# Each instance maker returns (f, params): a scalar-loss closure over fresh
# randomized parameters.


def _inst_matmul(rng):
    a, b = _t(rng, (3, 4)), _t(rng, (4, 2))
    return lambda: ad.sum(ad.matmul(a, b)), [a, b]


def _inst_add(rng):
    a, b = _t(rng, (2, 3)), _t(rng, (2, 3))
    return lambda: ad.sum(ad.square(ad.add(a, b))), [a, b]


def _inst_sub(rng):
    a, b = _t(rng, 5), _t(rng, 5)
    return lambda: ad.sum(ad.square(ad.sub(a, b))), [a, b]


def _inst_mul(rng):
    a, b = _t(rng, 6), _t(rng, 6)
    return lambda: ad.sum(ad.mul(a, b)), [a, b]


def _inst_scalar_mul(rng):
    x = _t(rng, 4)
    c = float(rng.normal()) + 2.0
    return lambda: ad.sum(ad.square(ad.scalar_mul(c, x))), [x]


def _inst_add_bias(rng):
    m, b = _t(rng, (3, 4)), _t(rng, 4)
    return lambda: ad.sum(ad.square(ad.add_bias(m, b))), [m, b]


def _inst_take(rng):
    x = _t(rng, (5, 3))
    idx = rng.integers(0, 5, size=7)
    return lambda: ad.sum(ad.square(ad.take(x, idx))), [x]


def _inst_reshape(rng):
    x = _t(rng, 12)
    return lambda: ad.sum(ad.square(ad.reshape(x, (3, 4)))), [x]


def _inst_concat(rng):
    a, b = _t(rng, (2, 3)), _t(rng, (2, 2))
    return lambda: ad.sum(ad.square(ad.concat([a, b], axis=1))), [a, b]


def _inst_sum(rng):
    x = _t(rng, (3, 3))
    return lambda: ad.sum(ad.square(x)), [x]


def _inst_mean(rng):
    x = _t(rng, 9)
    return lambda: ad.mean(ad.square(x)), [x]


def _inst_log(rng):
    x = ad.Tensor(rng.uniform(0.3, 5.0, size=6), requires_grad=True)
    return lambda: ad.sum(ad.log(x)), [x]


def _inst_square(rng):
    x = _t(rng, 7)
    return lambda: ad.sum(ad.square(x)), [x]


def _inst_sqrt(rng):
    x = ad.Tensor(rng.uniform(0.3, 4.0, size=6), requires_grad=True)
    return lambda: ad.sum(ad.sqrt(x)), [x]


def _inst_relu(rng):
    x = _away_from_zero(rng, 8, gap=0.01)
    return lambda: ad.sum(ad.relu(x)), [x]


def _inst_logistic(rng):
    x = _t(rng, 8, scale=2.0)
    return lambda: ad.sum(ad.logistic(x)), [x]


def _inst_clip(rng):
    vals = rng.uniform(-2.0, 2.0, size=10)
    vals = vals[np.minimum(np.abs(vals - 0.8), np.abs(vals + 0.8)) > 0.05]
    if vals.size == 0:
        vals = np.array([0.0])
    x = ad.Tensor(vals, requires_grad=True)
    return lambda: ad.sum(ad.square(ad.clip(x, -0.8, 0.8))), [x]


def _inst_euclidean(rng):
    u = _t(rng, 5)
    v = ad.Tensor(rng.normal(size=5) + 3.0, requires_grad=True)
    return lambda: ad.euclidean_distance(u, v), [u, v]


def _inst_pair_distances(rng):
    a = _t(rng, (4, 3))
    b = ad.Tensor(rng.normal(size=(4, 3)) + 2.5, requires_grad=True)
    return lambda: ad.sum(ad.pair_distances(a, b)), [a, b]


# ---------------------------------------------------------------------------
# loss instances over small networks


def _loss_model(seed):
    return nets.Model(
        source_map=nets.MappingNet(nets.MlpSpec(4, (5,), 3, init_seed=seed), "source"),
        target_map=nets.MappingNet(nets.MlpSpec(4, (6,), 3, init_seed=seed + 1), "target"),
        view_disc=nets.ViewDiscriminator(3, hidden_dim=5, seed=seed + 2),
        sim_disc=nets.SimilarityDiscriminator(3, hidden_dims=(6, 6), seed=seed + 3),
    )


def _min_relu_margin(mlp: nets.Mlp, x: np.ndarray) -> float:
    h = np.atleast_2d(x)
    worst = np.inf
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        pre = h @ w.data + b.data
        if i < last:
            worst = min(worst, float(np.min(np.abs(pre))))
            h = np.maximum(pre, 0.0)
        else:
            h = pre
    return worst


def _draw_pair_setup(rng, margin):
    """Model + batch with relu margins and pair distances away from kinks."""
    for _ in range(MAX_INSTANCE_ATTEMPTS):
        seed = int(rng.integers(0, 2**31 - 1))
        model = _loss_model(seed)
        inst_rng = np.random.default_rng(seed + 17)
        xs = inst_rng.normal(size=(2, 4))
        xt = inst_rng.normal(size=(4, 4))
        es = model.source_map.forward(ad.Tensor(xs)).data
        et = model.target_map.forward(ad.Tensor(xt)).data
        pos = (np.array([0, 1]), np.array([0, 1]))
        neg = (np.array([0, 1]), np.array([2, 3]))
        d_pos = np.linalg.norm(es[pos[0]] - et[pos[1]], axis=1)
        d_neg = np.linalg.norm(es[neg[0]] - et[neg[1]], axis=1)
        dists = np.concatenate([d_pos, d_neg])
        margins = [
            _min_relu_margin(model.source_map, xs),
            _min_relu_margin(model.target_map, xt),
            _min_relu_margin(model.sim_disc, np.concatenate([es[pos[0]], et[pos[1]]], axis=1)),
            _min_relu_margin(model.view_disc, np.concatenate([es, et])),
        ]
        dd_probs = model.view_disc.forward(ad.Tensor(np.concatenate([es, et]))).data
        sim_probs = model.sim_disc.forward_pair(
            ad.Tensor(es[pos[0]]), ad.Tensor(et[pos[1]])
        ).data
        probs = np.concatenate([dd_probs, sim_probs])
        if (
            np.all(np.abs(dists - margin) > 0.05)
            and np.all(dists > 0.05)
            and np.all(dists <= MAX_PAIR_DISTANCE)
            and min(margins) > 1e-3
            and np.all(probs >= PROB_SATURATION_GAP)
            and np.all(probs <= 1.0 - PROB_SATURATION_GAP)
        ):
            return model, xs, xt, pos, neg, (d_pos, d_neg)
    raise ContractError("could not draw a clean loss instance")


def _inst_view_disc_loss(rng):
    model, xs, xt, _, _, _ = _draw_pair_setup(rng, margin=2.0)
    model.set_trainable(source_map=False, target_map=False)
    params = [p for _, p in model.view_disc.named_parameters()]

    def f():
        ps = model.view_disc.forward(model.source_map.forward(ad.Tensor(xs)))
        pt = model.view_disc.forward(model.target_map.forward(ad.Tensor(xt)))
        return L.view_disc_loss(ps, pt)

    return f, params


def _inst_view_confusion_loss(rng):
    model, xs, xt, _, _, _ = _draw_pair_setup(rng, margin=2.0)
    model.set_trainable(view_disc=False)
    params = [
        p
        for _, p in model.source_map.named_parameters() + model.target_map.named_parameters()
    ]

    def f():
        es = model.source_map.forward(ad.Tensor(xs))
        et = model.target_map.forward(ad.Tensor(xt))
        probs = ad.concat([model.view_disc.forward(es), model.view_disc.forward(et)], axis=0)
        return L.view_confusion_loss(probs)

    return f, params


def _sim_loss_params(model):
    return [
        p
        for _, p in model.source_map.named_parameters()
        + model.target_map.named_parameters()
        + model.sim_disc.named_parameters()
    ]


def _inst_contrastive_sim_loss(rng):
    cfg = L.LossConfig(margin=2.0, gamma=2.5)
    model, xs, xt, (ps_i, pt_i), (ns_i, nt_i), _ = _draw_pair_setup(rng, cfg.margin)
    params = _sim_loss_params(model)

    def f():
        es = model.source_map.forward(ad.Tensor(xs))
        et = model.target_map.forward(ad.Tensor(xt))
        pos_d = ad.pair_distances(ad.take(es, ps_i), ad.take(et, pt_i))
        neg_d = ad.pair_distances(ad.take(es, ns_i), ad.take(et, nt_i))
        pos_p = model.sim_disc.forward_pair(ad.take(es, ps_i), ad.take(et, pt_i))
        return L.contrastive_sim_loss(pos_p, pos_d, neg_d, cfg)

    return f, params


def _inst_weighted_sim_loss(rng):
    cfg = L.LossConfig(margin=2.0, gamma=2.5)
    model, xs, xt, (ps_i, pt_i), (ns_i, nt_i), (d_pos, d_neg) = _draw_pair_setup(rng, cfg.margin)
    params = _sim_loss_params(model)
    # weights enter the objective as constants, so they are fixed up front
    w_p, w_n = L.adaptive_weights(d_pos, d_neg)

    def f():
        es = model.source_map.forward(ad.Tensor(xs))
        et = model.target_map.forward(ad.Tensor(xt))
        pos_d = ad.pair_distances(ad.take(es, ps_i), ad.take(et, pt_i))
        neg_d = ad.pair_distances(ad.take(es, ns_i), ad.take(et, nt_i))
        pos_p = model.sim_disc.forward_pair(ad.take(es, ps_i), ad.take(et, pt_i))
        return L.weighted_sim_loss(pos_p, pos_d, neg_d, w_p, w_n, 2, cfg)

    return f, params


OP_CHECKS = [
    ("matmul", _inst_matmul),
    ("add", _inst_add),
    ("sub", _inst_sub),
    ("mul", _inst_mul),
    ("scalar_mul", _inst_scalar_mul),
    ("add_bias", _inst_add_bias),
    ("take", _inst_take),
    ("reshape", _inst_reshape),
    ("concat", _inst_concat),
    ("sum", _inst_sum),
    ("mean", _inst_mean),
    ("log", _inst_log),
    ("square", _inst_square),
    ("sqrt", _inst_sqrt),
    ("relu", _inst_relu),
    ("logistic", _inst_logistic),
    ("clip", _inst_clip),
    ("euclidean_distance", _inst_euclidean),
    ("pair_distances", _inst_pair_distances),
]

LOSS_CHECKS = [
    ("view_disc_loss", _inst_view_disc_loss),
    ("view_confusion_loss", _inst_view_confusion_loss),
    ("contrastive_sim_loss", _inst_contrastive_sim_loss),
    ("weighted_sim_loss", _inst_weighted_sim_loss),
]

ALL_CHECKS = OP_CHECKS + LOSS_CHECKS


def _resolvable(params, loss_value: float) -> bool:
    """True when no parameter carries a faint nonzero gradient that central
    differences at the pinned step cannot resolve against roundoff of the
    loss evaluation."""
    floor = GRAD_RESOLUTION_FLOOR * max(1.0, abs(loss_value))
    mags = np.concatenate([np.abs(p.grad).reshape(-1) for p in params])
    alive = mags[mags > 0.0]
    return alive.size == 0 or float(alive.min()) >= floor


def _checked_trial(make_instance, rng, step) -> float:
    for _ in range(MAX_INSTANCE_ATTEMPTS):
        f, params = make_instance(rng)
        with ad.Tape() as tape:
            loss = f()
            tape.backward(loss)
        if _resolvable(params, loss.item()):
            return ad.finite_diff_check(f, params, step)
    raise ContractError("could not draw a resolvable instance")


def run_all_checks(
    seed: int = 0,
    trials: int = DEFAULT_TRIALS,
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
) -> list[CheckResult]:
    """Run every op and loss check on ``trials`` screened random instances;
    the result rows carry the worst relative error seen per target."""
    results = []
    for name, make_instance in ALL_CHECKS:
        rng = np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(name.encode()))))
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, _checked_trial(make_instance, rng, step))
        results.append(CheckResult(name=name, max_error=worst, tolerance=tolerance, trials=trials))
    return results
