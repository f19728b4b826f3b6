import math

import numpy as np
import pytest
import torch

from attrobust.losses import attr_loss_terms, attr_triplet_loss, flat_cosine, select_negative_class
from attrobust.models import SOFTPLUS


def _vectors_with_cosine(x, target_cos, rng):
    """Construct g with an exact given cosine against x."""
    x = x / np.linalg.norm(x)
    r = rng.normal(size=x.shape)
    r -= (r @ x) * x
    r /= np.linalg.norm(r)
    return target_cos * x + math.sqrt(max(0.0, 1 - target_cos ** 2)) * r


class TestSelectNegativeClass:
    def test_default_strongest_wrong(self):
        assert select_negative_class([5.0, 3.0, 1.0], 0) == 1
        assert select_negative_class([5.0, 3.0, 1.0], 1) == 0

    def test_argmin_variant(self):
        assert select_negative_class([5.0, 3.0, 1.0], 1, variant="argmin") == 2

    def test_tie_lowest_index(self):
        assert select_negative_class([2.0, 2.0, 2.0], 0) == 1

    def test_batched(self):
        logits = np.array([[5.0, 3.0, 1.0], [1.0, 2.0, 9.0]])
        out = select_negative_class(logits, np.array([0, 2]))
        assert list(out) == [1, 1]

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            select_negative_class([1.0], 0)


class TestTripletLoss:
    def test_equal_distances_give_ln2(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=12)
        g_pos = _vectors_with_cosine(x, 0.4, rng)
        g_neg = _vectors_with_cosine(x, 0.4, rng)
        loss = attr_triplet_loss(torch.tensor(x).reshape(1, -1).float(),
                                 torch.tensor(g_pos).reshape(1, -1).float(),
                                 torch.tensor(g_neg).reshape(1, -1).float())
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-6)

    def test_equal_distances_give_ln2_float64(self):
        # d_pos == d_neg == anything: the margin cancels exactly
        rng = np.random.default_rng(1)
        x = rng.normal(size=30)
        g = _vectors_with_cosine(x, -0.3, rng)
        loss = attr_triplet_loss(torch.tensor(x).reshape(1, -1),
                                 torch.tensor(g).reshape(1, -1),
                                 torch.tensor(g).reshape(1, -1))
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_parallel_orthogonal_case(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=24)
        g_pos = 2.0 * x                                   # cosine 1 -> d_pos = 0
        g_neg = _vectors_with_cosine(x, 0.0, rng)         # cosine 0 -> d_neg = 1
        loss = attr_triplet_loss(torch.tensor(x).reshape(1, -1),
                                 torch.tensor(g_pos).reshape(1, -1),
                                 torch.tensor(g_neg).reshape(1, -1))
        assert float(loss) == pytest.approx(math.log(1 + math.exp(-1.0)), abs=1e-9)

    def test_monotone_in_margin(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=16)
        losses = []
        for d_neg_cos in (0.8, 0.4, 0.0, -0.4, -0.8):
            g_pos = _vectors_with_cosine(x, 0.5, rng)
            g_neg = _vectors_with_cosine(x, d_neg_cos, rng)
            losses.append(float(attr_triplet_loss(torch.tensor(x).reshape(1, -1),
                                                  torch.tensor(g_pos).reshape(1, -1),
                                                  torch.tensor(g_neg).reshape(1, -1))))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_nonnegative_and_terms(self):
        rng = np.random.default_rng(4)
        x = torch.tensor(rng.normal(size=(5, 8)))
        gp = torch.tensor(rng.normal(size=(5, 8)))
        gn = torch.tensor(rng.normal(size=(5, 8)))
        loss, terms = attr_triplet_loss(x, gp, gn, return_terms=True)
        assert float(loss) >= 0.0
        assert np.all(terms.d_pos >= 0) and np.all(terms.d_pos <= 2)
        assert np.all(terms.d_neg >= 0) and np.all(terms.d_neg <= 2)

    def test_degenerate_gradient_handled(self, caplog):
        x = torch.ones(1, 6)
        gp = torch.zeros(1, 6)
        gn = torch.ones(1, 6)
        import logging

        with caplog.at_level(logging.WARNING, logger="attrobust.losses"):
            loss, terms = attr_triplet_loss(x, gp, gn, return_terms=True)
        assert terms.degenerate[0]
        assert "degenerate" in caplog.text
        # cosine substituted with 0 -> d_pos = 1, d_neg = 0 -> softplus(1)
        assert float(loss) == pytest.approx(math.log(1 + math.exp(1.0)), abs=1e-6)

    def test_cosine_only_is_large_dneg_limit(self):
        # with the negative distance frozen at +inf the triplet loss collapses
        # to zero, approaching it monotonically in d_pos
        rng = np.random.default_rng(5)
        x = rng.normal(size=10)
        for d_pos_cos in (0.9, 0.0, -0.9):
            g_pos = _vectors_with_cosine(x, d_pos_cos, rng)
            d_pos = 1 - d_pos_cos
            big = 1e4
            # closed form with d_neg -> big: log(1 + exp(-(big - d_pos))) ~ exp(d_pos - big)
            val = math.log1p(math.exp(-(big - d_pos)))
            assert val == pytest.approx(0.0, abs=1e-12)
        # ordering matches d_pos ordering at a large fixed d_neg
        d_neg = 30.0
        vals = [math.log1p(math.exp(-(d_neg - dp))) for dp in (0.1, 1.0, 1.9)]
        assert vals[0] < vals[1] < vals[2]


class TestAttrLossVariants:
    def test_eq2_direct_zero_at_clean_input(self, cnn_bundle, batch):
        x, y = batch
        x = x[:4]
        y = y[:4]
        with cnn_bundle.activation(SOFTPLUS):
            from attrobust.models import input_gradient

            ref = input_gradient(cnn_bundle, x, y, create_graph=False).detach()
            loss, _ = attr_loss_terms(cnn_bundle, x, y, variant="eq2_direct",
                                      reference_grad=ref, create_graph=False)
        assert float(loss.detach()) == pytest.approx(0.0, abs=1e-6)

    def test_triplet_variant_reports_i_star(self, cnn_bundle, batch):
        x, y = batch
        with cnn_bundle.activation(SOFTPLUS):
            loss, info = attr_loss_terms(cnn_bundle, x[:4], y[:4], create_graph=False)
        terms = info["terms"]
        assert float(loss.detach()) >= 0
        assert np.all(terms.i_star != y[:4].numpy())

    def test_unknown_variant(self, cnn_bundle, batch):
        x, y = batch
        with pytest.raises(ValueError):
            attr_loss_terms(cnn_bundle, x[:2], y[:2], variant="bogus")

    def test_flat_cosine_channel_mean(self):
        rng = np.random.default_rng(6)
        a = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
        b = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
        cos, ok = flat_cosine(a, b, channel_mean=True)
        am = a.mean(dim=1).flatten(1)
        bm = b.mean(dim=1).flatten(1)
        expected = (am * bm).sum(1) / (am.norm(dim=1) * bm.norm(dim=1))
        assert torch.allclose(cos, expected, atol=1e-12)
        assert ok.all()
