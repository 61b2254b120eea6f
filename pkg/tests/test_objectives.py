import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from scda.encoder import EncoderConfig, build_encoder, params_of
from scda.errors import ContractError
from scda.objectives import (
    ConsistencyBatch,
    average_parameters,
    bce_loss,
    feature_consistency,
    logit_consistency,
    mutual_consistency,
)


def _hand_batch():
    feats = [[[1.0, 0.0]], [[0.0, 1.0]], [[0.0, 0.0]]]
    logits = [[1.0], [0.0], [0.0]]
    return ConsistencyBatch.from_branches(feats, logits)


def _brute_ordered(x):
    """Explicit double loop over ordered branch pairs, averaged over subjects."""
    n_t, m = x.shape[:2]
    total = 0.0
    for n in range(n_t):
        for i in range(m):
            for j in range(m):
                if i != j:
                    total += float(((x[n, i] - x[n, j]) ** 2).sum())
    return total / n_t


class TestBce:
    def test_values(self):
        assert bce_loss([0.0], [1.0]).item() == pytest.approx(math.log(2), abs=1e-12)
        assert bce_loss([50.0], [1.0]).item() < 1e-20
        assert bce_loss([math.log(3)], [0.0]).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_mismatch(self):
        with pytest.raises(ContractError):
            bce_loss([0.0, 1.0], [1.0])
        with pytest.raises(ContractError):
            bce_loss([], [])

    def test_extreme_logits_finite(self):
        assert math.isfinite(bce_loss([-1000.0, 1000.0], [1.0, 0.0]).item())

    @settings(max_examples=200, deadline=None)
    @given(a=st.floats(-30, 30), b=st.floats(-30, 30), y=st.sampled_from([0.0, 1.0]))
    def test_midpoint_convexity(self, a, b, y):
        mid = bce_loss([(a + b) / 2], [y]).item()
        assert mid <= (bce_loss([a], [y]).item() + bce_loss([b], [y]).item()) / 2 + 1e-12


class TestConsistency:
    def test_hand_values(self):
        batch = _hand_batch()
        assert feature_consistency(batch).item() == 8.0
        assert logit_consistency(batch).item() == 4.0
        assert mutual_consistency(batch).item() == 12.0

    def test_unordered_halves(self):
        batch = _hand_batch()
        assert mutual_consistency(batch, ordered=False).item() == 6.0

    def test_identical_branches_zero(self, rng):
        f = rng.normal(size=(4, 5))
        o = rng.normal(size=4)
        assert mutual_consistency(ConsistencyBatch.from_branches([f] * 3, [o] * 3)).item() == 0.0

    def test_subject_average(self):
        v = ConsistencyBatch(torch.zeros(1, 3, 1, dtype=torch.float64), torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64))
        w = ConsistencyBatch(torch.zeros(1, 3, 1, dtype=torch.float64), torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64))
        both = ConsistencyBatch(torch.zeros(2, 3, 1, dtype=torch.float64),
                                torch.tensor([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], dtype=torch.float64))
        expected = (logit_consistency(v) + logit_consistency(w)) / 2
        assert logit_consistency(both).item() == pytest.approx(expected.item(), abs=1e-12)

    def test_needs_two_branches(self):
        with pytest.raises(ContractError):
            ConsistencyBatch(torch.zeros(2, 1, 3), torch.zeros(2, 1))
        with pytest.raises(ContractError):
            ConsistencyBatch(torch.zeros(2, 3, 3), torch.zeros(2, 2))

    def test_matches_brute_force(self, rng):
        x = rng.normal(size=(5, 3, 7))
        o = rng.normal(size=(5, 3))
        batch = ConsistencyBatch(torch.from_numpy(x), torch.from_numpy(o))
        assert feature_consistency(batch).item() == pytest.approx(_brute_ordered(x), rel=1e-12)
        assert logit_consistency(batch).item() == pytest.approx(_brute_ordered(o[..., None]), rel=1e-12)

    def test_permutation_symmetry(self, rng):
        x = torch.from_numpy(rng.normal(size=(6, 3, 8)))
        o = torch.from_numpy(rng.normal(size=(6, 3)))
        base = mutual_consistency(ConsistencyBatch(x, o)).item()
        for perm in itertools.permutations(range(3)):
            p = list(perm)
            assert abs(mutual_consistency(ConsistencyBatch(x[:, p], o[:, p])).item() - base) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), c=st.floats(0.1, 10))
    def test_homogeneity(self, seed, c):
        x = torch.from_numpy(np.random.default_rng(seed).normal(size=(3, 3, 4)))
        o = torch.zeros(3, 3, dtype=torch.float64)
        base = feature_consistency(ConsistencyBatch(x, o)).item()
        assert feature_consistency(ConsistencyBatch(c * x, o)).item() == pytest.approx(c * c * base, rel=1e-10)

    def test_zero_iff_equal(self, rng):
        x = torch.from_numpy(np.repeat(rng.normal(size=(2, 1, 4)), 3, axis=1))
        o = torch.zeros(2, 3, dtype=torch.float64)
        assert mutual_consistency(ConsistencyBatch(x, o)).item() == 0.0
        x[1, 2, 0] += 1e-3
        assert mutual_consistency(ConsistencyBatch(x, o)).item() > 0.0

    def test_feature_gradient_formula(self, rng):
        n_t, m, d = 4, 3, 5
        x = torch.from_numpy(rng.normal(size=(n_t, m, d))).requires_grad_(True)
        o = torch.from_numpy(rng.normal(size=(n_t, m)))
        (grad,) = torch.autograd.grad(mutual_consistency(ConsistencyBatch(x, o)), x)
        xd = x.detach()
        formula = torch.stack([(4.0 / n_t) * sum(xd[:, i] - xd[:, j] for j in range(m) if j != i)
                               for i in range(m)], dim=1)
        torch.testing.assert_close(grad, formula, rtol=1e-12, atol=1e-12)
        h = 1e-6
        flat = xd.reshape(-1)
        numeric = torch.empty_like(flat)
        for k in range(flat.numel()):
            e = torch.zeros_like(flat)
            e[k] = h
            plus = mutual_consistency(ConsistencyBatch((flat + e).reshape(n_t, m, d), o)).item()
            minus = mutual_consistency(ConsistencyBatch((flat - e).reshape(n_t, m, d), o)).item()
            numeric[k] = (plus - minus) / (2 * h)
        rel = (numeric - formula.reshape(-1)).abs() / formula.reshape(-1).abs().clamp(min=1e-8)
        assert rel.max().item() < 1e-6


class TestAverageParameters:
    def test_identical_exact(self):
        p = params_of(build_encoder(EncoderConfig(6, 8, 2), seed=1))
        avg = average_parameters([p, p, p])
        for k in p:
            assert torch.equal(avg[k], p[k])

    def test_two_branches(self, rng):
        a = {"w": torch.from_numpy(rng.normal(size=(3, 2)))}
        b = {"w": torch.from_numpy(rng.normal(size=(3, 2)))}
        torch.testing.assert_close(average_parameters([a, b])["w"], (a["w"] + b["w"]) / 2, rtol=0, atol=1e-15)

    def test_eps_mean(self):
        branches = [{"gin.0.eps": torch.tensor(v, dtype=torch.float64)} for v in (0.0, 0.3, 0.6)]
        assert average_parameters(branches)["gin.0.eps"].item() == pytest.approx(0.3, abs=1e-15)

    def test_norm_stats_and_counters(self):
        models = [params_of(build_encoder(EncoderConfig(6, 8, 2), seed=s)) for s in range(3)]
        for i, p in enumerate(models):
            p["se.norm.running_mean"] += i
            p["se.norm.num_batches_tracked"] += 3 * i + 1
        avg = average_parameters(models)
        torch.testing.assert_close(avg["se.norm.running_mean"], models[0]["se.norm.running_mean"] + 1.0)
        assert avg["se.norm.num_batches_tracked"].item() == 4

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            average_parameters([{"w": torch.zeros(2)}, {"w": torch.zeros(3)}])
        with pytest.raises(ContractError):
            average_parameters([{"w": torch.zeros(2)}, {"v": torch.zeros(2)}])
        with pytest.raises(ContractError):
            average_parameters([])
