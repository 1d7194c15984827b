import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview import autodiff as ad
from crossview import losses, nets
from crossview.errors import ContractError, DomainError

CFG = losses.LossConfig()


def t(values):
    return ad.Tensor(np.asarray(values, dtype=np.float64))


class TestViewDiscLoss:
    def test_all_half_gives_two_log_two(self):
        loss = losses.view_disc_loss(t([0.5, 0.5, 0.5]), t([0.5, 0.5]))
        np.testing.assert_allclose(loss.item(), 2.0 * np.log(2.0), rtol=1e-15)

    def test_perfect_discriminator_drives_loss_to_zero(self):
        loss = losses.view_disc_loss(t([1.0 - 1e-9]), t([1e-9]))
        assert loss.item() < 1e-8

    def test_strictly_decreases_as_source_probs_rise(self):
        dt = t([0.3, 0.4])
        vals = [losses.view_disc_loss(t([p, p]), dt).item() for p in (0.5, 0.7, 0.9, 0.99)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_rejects_probabilities_outside_unit_interval(self):
        with pytest.raises(DomainError):
            losses.view_disc_loss(t([1.5]), t([0.5]))
        with pytest.raises(DomainError):
            losses.view_disc_loss(t([0.5]), t([0.0]))


class TestViewConfusionLoss:
    def test_half_everywhere_is_global_minimum_log_two(self):
        loss = losses.view_confusion_loss(t([0.5, 0.5, 0.5, 0.5]))
        np.testing.assert_allclose(loss.item(), np.log(2.0), rtol=1e-15)
        # any deviation from 1/2 increases the loss
        for p in (0.3, 0.6, 0.9):
            assert losses.view_confusion_loss(t([p])).item() > np.log(2.0)

    def test_point_nine_value(self):
        loss = losses.view_confusion_loss(t([0.9]))
        expected = -0.5 * (np.log(0.9) + np.log(0.1))
        np.testing.assert_allclose(loss.item(), expected, rtol=1e-15)
        np.testing.assert_allclose(loss.item(), 1.2039728043259361, rtol=1e-12)

    def test_symmetric_in_p_and_one_minus_p(self):
        for p in (0.1, 0.25, 0.4999, 0.73):
            a = losses.view_confusion_loss(t([p])).item()
            b = losses.view_confusion_loss(t([1.0 - p])).item()
            np.testing.assert_allclose(a, b, rtol=1e-12)


class TestContrastiveSimLoss:
    def test_perfect_positive_goes_to_zero(self):
        loss = losses.contrastive_sim_loss(t([1.0 - 1e-12]), t([0.0]), None, CFG)
        assert loss.item() < 1e-11

    def test_negative_beyond_margin_contributes_nothing(self):
        loss = losses.contrastive_sim_loss(None, None, t([3.0]), CFG)
        assert loss.item() == 0.0

    def test_negative_inside_margin_frozen_value(self):
        # margin 2, distance 0.5 -> hinge 1.5^2 = 2.25, times gamma 2.5 -> 5.625
        loss = losses.contrastive_sim_loss(None, None, t([0.5]), CFG)
        np.testing.assert_allclose(loss.item(), 5.625, rtol=1e-15)

    def test_mean_over_all_pairs(self):
        # one positive (prob ~1, d=1) and one negative (d=0.5):
        # (2.5*1 + 2.5*2.25)/2 up to the clamped log term
        loss = losses.contrastive_sim_loss(t([1.0 - 1e-12]), t([1.0]), t([0.5]), CFG)
        np.testing.assert_allclose(loss.item(), (2.5 + 5.625) / 2.0, rtol=1e-9)

    def test_contrastive_part_zero_iff_positives_at_zero_and_negatives_past_margin(self):
        tight = losses.contrastive_sim_loss(t([1.0 - 1e-12]), t([0.0]), t([2.0]), CFG)
        assert tight.item() < 1e-11
        slack_pos = losses.contrastive_sim_loss(t([1.0 - 1e-12]), t([0.2]), t([2.0]), CFG)
        slack_neg = losses.contrastive_sim_loss(t([1.0 - 1e-12]), t([0.0]), t([1.8]), CFG)
        assert slack_pos.item() > 1e-3 and slack_neg.item() > 1e-3

    def test_full_bce_adds_negative_log_term(self):
        cfg = losses.LossConfig(full_bce_sim=True)
        base = losses.contrastive_sim_loss(None, None, t([3.0]), CFG)
        with pytest.raises(ContractError):
            losses.contrastive_sim_loss(None, None, t([3.0]), cfg)
        full = losses.contrastive_sim_loss(None, None, t([3.0]), cfg, neg_probs=t([0.25]))
        np.testing.assert_allclose(full.item() - base.item(), -np.log(0.75), rtol=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            losses.contrastive_sim_loss(None, None, None, CFG)

    def test_saturated_probabilities_stay_finite(self):
        loss = losses.contrastive_sim_loss(t([1e-12]), t([0.1]), None, CFG)
        assert np.isfinite(loss.item())

    def test_config_validation(self):
        with pytest.raises(ContractError):
            losses.LossConfig(margin=0.0)
        with pytest.raises(ContractError):
            losses.LossConfig(gamma=-1.0)


class TestAdaptiveWeights:
    def test_single_positive_gets_weight_one(self):
        w_p, w_n = losses.adaptive_weights([1.7], [0.4])
        np.testing.assert_array_equal(w_p, [1.0])
        np.testing.assert_array_equal(w_n, [1.0])

    def test_softmax_oracle_values(self):
        w_p, _ = losses.adaptive_weights([1.0, 2.0], [1.0])
        e1, e2 = np.exp(1.0), np.exp(2.0)
        np.testing.assert_allclose(w_p, [e1 / (e1 + e2), e2 / (e1 + e2)], rtol=1e-15)
        np.testing.assert_allclose(w_p, [0.2689414213699951, 0.7310585786300049], rtol=1e-12)

    def test_equal_distances_give_uniform_weights(self):
        w_p, w_n = losses.adaptive_weights([0.8] * 5, [1.3] * 4)
        np.testing.assert_allclose(w_p, np.full(5, 0.2), rtol=1e-15)
        np.testing.assert_allclose(w_n, np.full(4, 0.25), rtol=1e-15)

    def test_hard_negative_dominates_the_mass(self):
        dists = [0.1, 6.0, 6.0]
        _, w_n = losses.adaptive_weights([1.0], dists)
        e = np.exp([-d for d in dists])
        oracle = e / e.sum()
        np.testing.assert_allclose(w_n, oracle, rtol=1e-15)
        assert w_n[0] > 0.99

    def test_far_positive_gets_larger_weight(self):
        w_p, _ = losses.adaptive_weights([0.5, 1.5, 3.0], [1.0])
        assert w_p[0] < w_p[1] < w_p[2]

    def test_increasing_a_distance_strictly_increases_its_weight(self):
        base, _ = losses.adaptive_weights([1.0, 2.0, 0.5], [1.0])
        moved, _ = losses.adaptive_weights([1.4, 2.0, 0.5], [1.0])
        assert moved[0] > base[0]

    def test_empty_list_rejected(self):
        with pytest.raises(ContractError):
            losses.adaptive_weights([], [1.0])
        with pytest.raises(ContractError):
            losses.adaptive_weights([1.0], [])

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            losses.adaptive_weights([np.inf], [1.0])

    @given(
        st.lists(st.floats(min_value=0.0, max_value=30.0), min_size=1, max_size=10),
        st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_sum_to_one_and_permutation_equivariant(self, dists, seed):
        rng = np.random.default_rng(seed)
        w_p, w_n = losses.adaptive_weights(dists, dists)
        assert abs(w_p.sum() - 1.0) <= 1e-12
        assert abs(w_n.sum() - 1.0) <= 1e-12
        perm = rng.permutation(len(dists))
        wp2, wn2 = losses.adaptive_weights(np.asarray(dists)[perm], np.asarray(dists)[perm])
        np.testing.assert_allclose(wp2, w_p[perm], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(wn2, w_n[perm], rtol=1e-12, atol=1e-15)

    def test_batched_rows_match_single_anchor_calls(self):
        rng = np.random.default_rng(8)
        pos = rng.uniform(0, 4, size=(5, 3))
        neg = rng.uniform(0, 4, size=(5, 7))
        wp, wn = losses.adaptive_weights_batch(pos, neg)
        for i in range(5):
            wp1, wn1 = losses.adaptive_weights(pos[i], neg[i])
            np.testing.assert_allclose(wp[i], wp1, rtol=1e-15)
            np.testing.assert_allclose(wn[i], wn1, rtol=1e-15)


class TestWeightedSimLoss:
    def test_uniform_weights_recover_plain_terms(self):
        # one anchor, 2 positives, 4 negatives, uniform weights
        pos_p = t([0.8, 0.9])
        pos_d = t([0.5, 1.0])
        neg_d = t([0.4, 1.0, 1.5, 3.0])
        w_p = np.full(2, 0.5)
        w_n = np.full(4, 0.25)
        loss = losses.weighted_sim_loss(pos_p, pos_d, neg_d, w_p, w_n, 1, CFG)
        hinge = np.maximum(0.0, 2.0 - neg_d.data) ** 2
        expected = (
            -np.log(pos_p.data).sum()
            + 2.5 * (pos_d.data**2 * 0.5).sum()
            + 2.5 * (hinge * 0.25).sum()
        )
        np.testing.assert_allclose(loss.item(), expected, rtol=1e-12)

    def test_hard_negative_receives_most_of_the_negative_mass(self):
        neg_d = np.array([0.1, 6.0, 6.0, 6.0])
        _, w_n = losses.adaptive_weights([1.0], neg_d)
        assert w_n[0] > 0.98 and w_n[0] == w_n.max()

    def test_literal_hinge_weights_inside_argument(self):
        cfg = losses.LossConfig(weight_inside_hinge=True)
        pos_p, pos_d = t([0.9]), t([0.0])
        neg_d = t([1.5])
        w_n = np.array([0.4])
        loss = losses.weighted_sim_loss(pos_p, pos_d, neg_d, np.array([1.0]), w_n, 1, cfg)
        expected = -np.log(0.9) + 2.5 * max(0.0, 2.0 - 0.4 * 1.5) ** 2
        np.testing.assert_allclose(loss.item(), expected, rtol=1e-12)

    def test_weights_are_constants_during_backprop(self):
        # gradient w.r.t. a positive distance must be gamma*w*2d, with no
        # softmax-jacobian contribution
        d_vals = np.array([0.5, 1.5])
        w_p, w_n = losses.adaptive_weights(d_vals, [1.0])
        pos_d = ad.Tensor(d_vals, requires_grad=True)
        with ad.Tape() as tape:
            loss = losses.weighted_sim_loss(
                t([0.9, 0.9]), pos_d, t([1.0]), w_p, w_n, 1, CFG
            )
            tape.backward(loss)
        np.testing.assert_allclose(pos_d.grad, 2.5 * w_p * 2.0 * d_vals, rtol=1e-12)

    def test_requires_positives_and_negatives(self):
        with pytest.raises(ContractError):
            losses.weighted_sim_loss(t([]), t([]), t([1.0]), np.array([]), np.array([1.0]), 1, CFG)

    def test_misaligned_weights_rejected(self):
        with pytest.raises(ContractError):
            losses.weighted_sim_loss(
                t([0.9]), t([1.0]), t([1.0]), np.array([0.5, 0.5]), np.array([1.0]), 1, CFG
            )


def tiny_model(seed=0):
    return nets.Model(
        source_map=nets.MappingNet(nets.MlpSpec(5, (6,), 4, init_seed=seed), "source"),
        target_map=nets.MappingNet(nets.MlpSpec(5, (7,), 4, init_seed=seed + 1), "target"),
        view_disc=nets.ViewDiscriminator(4, hidden_dim=6, seed=seed + 2),
        sim_disc=nets.SimilarityDiscriminator(4, hidden_dims=(8, 8), seed=seed + 3),
    )


class TestGradientFlowFreezing:
    def test_view_disc_loss_with_frozen_mappings(self):
        m = tiny_model()
        m.set_trainable(source_map=False, target_map=False)
        rng = np.random.default_rng(0)
        xs, xt = ad.Tensor(rng.normal(size=(3, 5))), ad.Tensor(rng.normal(size=(3, 5)))
        with ad.Tape() as tape:
            ps = m.view_disc.forward(m.source_map.forward(xs))
            pt = m.view_disc.forward(m.target_map.forward(xt))
            loss = losses.view_disc_loss(ps, pt)
            tape.backward(loss)
        for p in m.source_map.parameters() + m.target_map.parameters():
            assert p.grad is None
        assert any(np.any(p.grad != 0) for p in m.view_disc.parameters())

    def test_view_confusion_loss_with_frozen_discriminator(self):
        m = tiny_model()
        m.set_trainable(view_disc=False)
        rng = np.random.default_rng(1)
        xs, xt = ad.Tensor(rng.normal(size=(3, 5))), ad.Tensor(rng.normal(size=(3, 5)))
        with ad.Tape() as tape:
            es = m.source_map.forward(xs)
            et = m.target_map.forward(xt)
            probs = ad.concat([m.view_disc.forward(es), m.view_disc.forward(et)], axis=0)
            loss = losses.view_confusion_loss(probs)
            tape.backward(loss)
        for p in m.view_disc.parameters():
            assert p.grad is None
        assert any(np.any(p.grad != 0) for p in m.source_map.parameters())
        assert any(np.any(p.grad != 0) for p in m.target_map.parameters())


def _clean_instance(seed):
    """A 4-pair batch whose distances sit away from the hinge boundary and
    whose relu preactivations sit away from zero, so finite differences at
    step 1e-6 are trustworthy."""
    m = tiny_model(seed)
    rng = np.random.default_rng(seed + 100)
    xs = rng.normal(size=(2, 5))
    xt = rng.normal(size=(4, 5))
    es = m.source_map.forward(ad.Tensor(xs)).data
    et = m.target_map.forward(ad.Tensor(xt)).data
    pos_src, pos_tgt = np.array([0, 1]), np.array([0, 1])
    neg_src, neg_tgt = np.array([0, 1]), np.array([2, 3])
    d_pos = np.linalg.norm(es[pos_src] - et[pos_tgt], axis=1)
    d_neg = np.linalg.norm(es[neg_src] - et[neg_tgt], axis=1)
    cfg = losses.LossConfig(margin=2.0, gamma=2.5)
    dists = np.concatenate([d_pos, d_neg])
    if np.any(np.abs(dists - cfg.margin) < 0.05) or np.any(dists < 0.05):
        return None
    return m, xs, xt, (pos_src, pos_tgt, neg_src, neg_tgt), cfg


def _first_clean_instance(start_seed):
    for seed in range(start_seed, start_seed + 50):
        inst = _clean_instance(seed)
        if inst is not None:
            return inst
    raise AssertionError("no clean instance found")


class TestLossGradientsAgainstFiniteDifferences:
    def test_full_similarity_loss_on_four_pair_batch(self):
        m, xs, xt, (ps_i, pt_i, ns_i, nt_i), cfg = _first_clean_instance(42)
        params = [p for _, p in m.source_map.named_parameters() + m.target_map.named_parameters() + m.sim_disc.named_parameters()]

        def f():
            es = m.source_map.forward(ad.Tensor(xs))
            et = m.target_map.forward(ad.Tensor(xt))
            pos_d = ad.pair_distances(ad.take(es, ps_i), ad.take(et, pt_i))
            neg_d = ad.pair_distances(ad.take(es, ns_i), ad.take(et, nt_i))
            pos_p = m.sim_disc.forward_pair(ad.take(es, ps_i), ad.take(et, pt_i))
            return losses.contrastive_sim_loss(pos_p, pos_d, neg_d, cfg)

        assert ad.finite_diff_check(f, params, step=1e-6) < 1e-5

    def test_view_disc_loss_gradient(self):
        m, xs, xt, _, _ = _first_clean_instance(7)
        m.set_trainable(source_map=False, target_map=False)
        params = [p for _, p in m.view_disc.named_parameters()]

        def f():
            ps = m.view_disc.forward(m.source_map.forward(ad.Tensor(xs)))
            pt = m.view_disc.forward(m.target_map.forward(ad.Tensor(xt)))
            return losses.view_disc_loss(ps, pt)

        assert ad.finite_diff_check(f, params, step=1e-6) < 1e-5

    def test_view_confusion_loss_gradient(self):
        m, xs, xt, _, _ = _first_clean_instance(19)
        m.set_trainable(view_disc=False)
        params = [p for _, p in m.source_map.named_parameters() + m.target_map.named_parameters()]

        def f():
            es = m.source_map.forward(ad.Tensor(xs))
            et = m.target_map.forward(ad.Tensor(xt))
            probs = ad.concat([m.view_disc.forward(es), m.view_disc.forward(et)], axis=0)
            return losses.view_confusion_loss(probs)

        assert ad.finite_diff_check(f, params, step=1e-6) < 1e-5

    def test_weighted_loss_gradient_with_fixed_weights(self):
        m, xs, xt, (ps_i, pt_i, ns_i, nt_i), cfg = _first_clean_instance(64)
        params = [p for _, p in m.source_map.named_parameters() + m.target_map.named_parameters() + m.sim_disc.named_parameters()]
        es0 = m.source_map.forward(ad.Tensor(xs)).data
        et0 = m.target_map.forward(ad.Tensor(xt)).data
        d_pos0 = np.linalg.norm(es0[ps_i] - et0[pt_i], axis=1)
        d_neg0 = np.linalg.norm(es0[ns_i] - et0[nt_i], axis=1)
        # the weights are constants: compute them once, outside the closure
        w_p, w_n = losses.adaptive_weights(d_pos0, d_neg0)

        def f():
            es = m.source_map.forward(ad.Tensor(xs))
            et = m.target_map.forward(ad.Tensor(xt))
            pos_d = ad.pair_distances(ad.take(es, ps_i), ad.take(et, pt_i))
            neg_d = ad.pair_distances(ad.take(es, ns_i), ad.take(et, nt_i))
            pos_p = m.sim_disc.forward_pair(ad.take(es, ps_i), ad.take(et, pt_i))
            return losses.weighted_sim_loss(pos_p, pos_d, neg_d, w_p, w_n, 2, cfg)

        assert ad.finite_diff_check(f, params, step=1e-6) < 1e-5
