"""Objectives against independent oracles, closed forms, and finite
differences."""

import numpy as np
import pytest

from conftest import random_distributions, random_unit_cols
from crossproto.losses import (LossConfig, cross_stream_loss, infonce,
                               single_stream_loss)
from crossproto.model import PrototypeBank, init_prototypes
from crossproto.numerics import make_rng


def oracle_cross_entropy(z, q, c, tau):
    """Direct exp/sum evaluation of one prediction term, scalar loops."""
    total = 0.0
    b = z.shape[1]
    for col in range(b):
        scores = [float(c[:, k] @ z[:, col]) for k in range(c.shape[1])]
        exps = [np.exp(s / tau) for s in scores]
        denom = sum(exps)
        for k in range(c.shape[1]):
            total -= q[k, col] * np.log(exps[k] / denom)
    return total / b


def oracle_infonce(z_i, z_j, tau):
    """Brute-force per-pair evaluation, both anchor directions."""
    b = z_i.shape[1]
    total = 0.0
    for anchor in range(b):
        pos = np.exp(float(z_i[:, anchor] @ z_j[:, anchor]) / tau)
        denom = sum(np.exp(float(z_i[:, anchor] @ z_j[:, k]) / tau)
                    for k in range(b))
        total -= np.log(pos / denom)
        pos = np.exp(float(z_j[:, anchor] @ z_i[:, anchor]) / tau)
        denom = sum(np.exp(float(z_j[:, anchor] @ z_i[:, k]) / tau)
                    for k in range(b))
        total -= np.log(pos / denom)
    return total / (2 * b)


def fd_grad(fn, arr, h=1e-5):
    out = np.zeros_like(arr)
    flat, g = arr.ravel(), out.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = fn()
        flat[idx] = orig - h
        down = fn()
        flat[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return out


def assert_close_grads(analytic, numeric, tol=1e-4):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    assert (np.abs(analytic - numeric) / denom).max() <= tol


class TestInfoNCE:
    def test_two_identical_orthogonal_columns(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = infonce(z, z.copy(), tau=1.0)
        expected = -np.log(np.e / (np.e + 1.0))  # softplus(-1)
        assert abs(out.value - expected) < 1e-12
        assert abs(expected - 0.3132616875) < 1e-9

    def test_perfect_separation_limit(self):
        # antipodal pair: positives at +1 and negatives at -1 exactly
        z = np.array([[1.0, -1.0], [0.0, 0.0]])
        out = infonce(z, z.copy(), tau=0.05)
        assert out.value < 1e-12  # log(1 + e^(-2/tau)) underflows to 0

    def test_matches_bruteforce_oracle(self):
        rng = make_rng(20)
        z_i = random_unit_cols(rng, 6, 5)
        z_j = random_unit_cols(rng, 6, 5)
        out = infonce(z_i, z_j, tau=0.25)
        assert abs(out.value - oracle_infonce(z_i, z_j, 0.25)) < 1e-10

    def test_needs_two_columns(self):
        z = random_unit_cols(make_rng(21), 4, 1)
        with pytest.raises(ValueError, match="2 columns"):
            infonce(z, z, tau=0.1)

    def test_gradients_match_finite_differences(self):
        rng = make_rng(22)
        z_i = random_unit_cols(rng, 5, 4)
        z_j = random_unit_cols(rng, 5, 4)
        out = infonce(z_i, z_j, tau=0.2)
        assert_close_grads(out.grad_z["i"],
                           fd_grad(lambda: infonce(z_i, z_j, 0.2).value, z_i))
        assert_close_grads(out.grad_z["j"],
                           fd_grad(lambda: infonce(z_i, z_j, 0.2).value, z_j))


class TestSingleStream:
    def test_perfect_prediction_limit(self):
        rng = make_rng(23)
        bank = init_prototypes(6, 5, rng)
        kstar = 2
        z = bank.c[:, [kstar]]  # one sample, aligned with its prototype
        q = np.zeros((5, 1))
        q[kstar] = 1.0
        out = single_stream_loss(z, z, bank, q, q, LossConfig(temperature=0.01))
        assert out.value < 1e-8

    def test_uniform_targets_uniform_scores_give_log_k(self):
        k, b, d = 7, 4, 6
        bank = PrototypeBank(c=np.zeros((d, k)))
        bank.c[0, :] = 1.0  # all prototypes identical: scores constant per column
        z = random_unit_cols(make_rng(24), d, b)
        q = np.full((k, b), 1.0 / k)
        out = single_stream_loss(z, z, bank, q, q, LossConfig(temperature=0.1))
        assert abs(out.value - np.log(k)) < 1e-12

    def test_matches_scalar_oracle(self):
        rng = make_rng(25)
        bank = init_prototypes(5, 6, rng)
        z_i = random_unit_cols(rng, 5, 4)
        z_j = random_unit_cols(rng, 5, 4)
        q_i = random_distributions(rng, 6, 4)
        q_j = random_distributions(rng, 6, 4)
        out = single_stream_loss(z_i, z_j, bank, q_i, q_j,
                                 LossConfig(temperature=0.1))
        expected = 0.5 * (oracle_cross_entropy(z_j, q_i, bank.c, 0.1)
                          + oracle_cross_entropy(z_i, q_j, bank.c, 0.1))
        assert abs(out.value - expected) < 1e-10
        assert out.term_count == 2

    def test_rejects_unnormalized_targets(self):
        rng = make_rng(26)
        bank = init_prototypes(4, 3, rng)
        z = random_unit_cols(rng, 4, 2)
        q_bad = np.full((3, 2), 0.5)
        with pytest.raises(ValueError, match="sums to"):
            single_stream_loss(z, z, bank, q_bad, q_bad, LossConfig())

    def test_gradients_match_finite_differences(self):
        rng = make_rng(27)
        bank = init_prototypes(5, 6, rng)
        z_i = random_unit_cols(rng, 5, 3)
        z_j = random_unit_cols(rng, 5, 3)
        q_i = random_distributions(rng, 6, 3)
        q_j = random_distributions(rng, 6, 3)
        cfg = LossConfig(temperature=0.1)

        def value():
            return single_stream_loss(z_i, z_j, bank, q_i, q_j, cfg).value

        out = single_stream_loss(z_i, z_j, bank, q_i, q_j, cfg)
        assert_close_grads(out.grad_z["i"], fd_grad(value, z_i))
        assert_close_grads(out.grad_z["j"], fd_grad(value, z_j))
        assert_close_grads(out.grad_c, fd_grad(value, bank.c))


def make_cross_inputs(seed, d=5, k=6, b=4):
    rng = make_rng(seed)
    bank = init_prototypes(d, k, rng)
    z = {name: random_unit_cols(rng, d, b) for name in ("s_i", "s_j", "t_i", "t_j")}
    q = {name: random_distributions(rng, k, b) for name in ("s_i", "s_j", "t_i", "t_j")}
    return bank, z, q


def oracle_cross_stream(z, q, c, tau, targets, predictors_of):
    value = 0.0
    count = 0
    for t in targets:
        for v in predictors_of[t]:
            value += oracle_cross_entropy(z[v], q[t], c, tau)
            count += 1
    return value / count, count


FULL_PREDICTORS = {
    "s_i": ["s_j", "t_i", "t_j"],
    "s_j": ["s_i", "t_i", "t_j"],
    "t_i": ["s_i", "s_j", "t_j"],
    "t_j": ["s_i", "s_j", "t_i"],
}


class TestCrossStream:
    def run(self, bank, z, q, **cfg_kwargs):
        cfg = LossConfig(temperature=0.1, mode="cross_stream", **cfg_kwargs)
        return cross_stream_loss(z["s_i"], z["s_j"], z["t_i"], z["t_j"], bank,
                                 q["s_i"], q["s_j"], q["t_i"], q["t_j"], cfg)

    def test_degenerate_equality_reduces_to_single_term(self):
        rng = make_rng(28)
        bank = init_prototypes(5, 6, rng)
        z0 = random_unit_cols(rng, 5, 4)
        q0 = random_distributions(rng, 6, 4)
        z = {name: z0 for name in FULL_PREDICTORS}
        q = {name: q0 for name in FULL_PREDICTORS}
        out = self.run(bank, z, q)
        assert abs(out.value - oracle_cross_entropy(z0, q0, bank.c, 0.1)) < 1e-10

    def test_uniform_everything_gives_log_k(self):
        k, d, b = 6, 5, 3
        bank = PrototypeBank(c=np.zeros((d, k)))
        bank.c[0, :] = 1.0
        rng = make_rng(29)
        z = {name: random_unit_cols(rng, d, b) for name in FULL_PREDICTORS}
        q = {name: np.full((k, b), 1.0 / k) for name in FULL_PREDICTORS}
        out = self.run(bank, z, q)
        assert abs(out.value - np.log(k)) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_twelve_term_enumeration_oracle(self, seed):
        bank, z, q = make_cross_inputs(seed + 30)
        out = self.run(bank, z, q)
        expected, count = oracle_cross_stream(
            z, q, bank.c, 0.1, list(FULL_PREDICTORS), FULL_PREDICTORS)
        assert count == 12
        assert out.term_count == 12
        assert abs(out.value - expected) < 1e-10

    def test_prediction_views_ablation_has_eight_terms(self):
        bank, z, q = make_cross_inputs(40)
        out = self.run(bank, z, q, prediction_views="other_stream_only")
        predictors = {"s_i": ["t_i", "t_j"], "s_j": ["t_i", "t_j"],
                      "t_i": ["s_i", "s_j"], "t_j": ["s_i", "s_j"]}
        expected, count = oracle_cross_stream(
            z, q, bank.c, 0.1, list(predictors), predictors)
        assert count == 8
        assert out.term_count == 8
        assert abs(out.value - expected) < 1e-10

    def test_assignment_views_ablation_has_six_terms(self):
        bank, z, q = make_cross_inputs(41)
        out = self.run(bank, z, q, assignment_views="other_stream_only")
        expected, count = oracle_cross_stream(
            z, q, bank.c, 0.1, ["t_i", "t_j"], FULL_PREDICTORS)
        assert count == 6
        assert out.term_count == 6
        assert abs(out.value - expected) < 1e-10

    def test_both_ablations_give_four_terms(self):
        bank, z, q = make_cross_inputs(42)
        out = self.run(bank, z, q, prediction_views="other_stream_only",
                       assignment_views="other_stream_only")
        assert out.term_count == 4

    def test_frozen_stream_gets_zero_gradient(self):
        bank, z, q = make_cross_inputs(43)
        out = self.run(bank, z, q)
        assert not out.grad_z["t_i"].any()
        assert not out.grad_z["t_j"].any()

    def test_optimized_stream_gradients_match_finite_differences(self):
        bank, z, q = make_cross_inputs(44)

        def value():
            return self.run(bank, z, q).value

        out = self.run(bank, z, q)
        assert_close_grads(out.grad_z["s_i"], fd_grad(value, z["s_i"]))
        assert_close_grads(out.grad_z["s_j"], fd_grad(value, z["s_j"]))
        assert_close_grads(out.grad_c, fd_grad(value, bank.c))

    def test_stop_gradient_targets_shift_value_not_gradients(self):
        bank, z, q = make_cross_inputs(45)
        out = self.run(bank, z, q)
        bumped = {k: v.copy() for k, v in q.items()}
        eps = 1e-3
        bumped["t_i"] = (bumped["t_i"] + eps) / (1.0 + eps * bumped["t_i"].shape[0])
        out2 = self.run(bank, z, bumped)
        assert out2.value != out.value
        # gradients computed with the bumped constants still match FD
        def value():
            return self.run(bank, z, bumped).value
        assert_close_grads(out2.grad_z["s_i"], fd_grad(value, z["s_i"]))

    def test_value_at_least_target_entropy(self):
        # Gibbs: each term >= entropy of its target, and every target
        # carries 1/4 of the total weight, so the mean entropy is a floor
        for seed in range(4):
            bank, z, q = make_cross_inputs(seed + 50)
            out = self.run(bank, z, q)
            floors = []
            for name in FULL_PREDICTORS:
                cols = q[name]
                floors.append(float(-(cols * np.log(cols)).sum() / cols.shape[1]))
            assert out.value >= np.mean(floors) - 1e-12
