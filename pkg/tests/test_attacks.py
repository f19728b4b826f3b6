import numpy as np
import pytest
import torch

from attrobust.attacks import (AttackResult, PerturbationBudget, art_inner_maximization,
                               assert_within_budget, ifia_topk_attack, pgd_classification_attack,
                               project, spsa_attack, spsa_gradient_estimate,
                               targeted_attribution_attack, transfer_attack_eval)
from attrobust.attribution import attribution_scores
from attrobust.models import EXACT_RELU, SOFTPLUS
from attrobust.metrics import topk_intersection, kendall_tau
from attrobust.utils import torch_generator


def small_budget(**kw):
    defaults = dict(epsilon=8 / 255, step_size=2 / 255, steps=5, random_init=True)
    defaults.update(kw)
    return PerturbationBudget(**defaults)


class TestProjection:
    def test_linf_projection(self):
        x0 = torch.rand(4, 3, 8, 8)
        x = x0 + torch.randn_like(x0) * 0.2
        out = project(x, x0, small_budget())
        assert_within_budget(out, x0, small_budget())

    def test_l2_projection(self):
        budget = small_budget(norm="l2", epsilon=1.0)
        x0 = torch.rand(4, 3, 8, 8)
        x = x0 + torch.randn_like(x0)
        out = project(x, x0, budget)
        assert_within_budget(out, x0, budget)

    def test_inside_ball_untouched(self):
        x0 = torch.full((2, 3, 4, 4), 0.5)
        x = x0 + 0.01
        out = project(x, x0, small_budget())
        assert torch.allclose(out, x)

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            PerturbationBudget(norm="l7")
        with pytest.raises(ValueError):
            PerturbationBudget(epsilon=0.0)


class TestPGD:
    def test_zero_steps_no_init_is_identity(self, cnn_bundle, batch):
        x, y = batch
        res = pgd_classification_attack(cnn_bundle, x, y,
                                        small_budget(steps=0, random_init=False))
        assert torch.equal(res.perturbed, x)

    def test_budget_invariant(self, cnn_bundle, batch):
        x, y = batch
        budget = small_budget(steps=4)
        res = pgd_classification_attack(cnn_bundle, x, y, budget, seed=1)
        assert_within_budget(res.perturbed, x, budget)
        assert float(res.perturbed.min()) >= 0.0 and float(res.perturbed.max()) <= 1.0

    def test_l2_variant_budget(self, cnn_bundle, batch):
        x, y = batch
        budget = small_budget(norm="l2", epsilon=0.5, steps=4)
        res = pgd_classification_attack(cnn_bundle, x, y, budget, seed=1)
        assert_within_budget(res.perturbed, x, budget)

    def test_deterministic_given_seed(self, cnn_bundle, batch):
        x, y = batch
        budget = small_budget(steps=3)
        r1 = pgd_classification_attack(cnn_bundle, x, y, budget, seed=7)
        r2 = pgd_classification_attack(cnn_bundle, x, y, budget, seed=7)
        assert torch.equal(r1.perturbed, r2.perturbed)
        assert r1.objective_trace == r2.objective_trace

    def test_single_sample_shape(self, cnn_bundle, batch):
        x, y = batch
        res = pgd_classification_attack(cnn_bundle, x[0], int(y[0]), small_budget(steps=2))
        assert res.perturbed.shape == x[0].shape
        assert isinstance(res.prediction_preserved, bool)


class TestSPSA:
    def test_zero_steps_identity(self, cnn_bundle, batch):
        x, y = batch
        res = spsa_attack(cnn_bundle, x[:4], y[:4], small_budget(steps=0, random_init=False))
        assert torch.equal(res.perturbed, x[:4])

    def test_gradient_estimate_aligns_on_linear_model(self):
        # rademacher estimate cosine ~ sqrt(n / (n + d - 1)): with d = 48
        # dimensions, 256 probes puts it above 0.9
        from attrobust.models import build_model

        bundle = build_model("linear", input_shape=(3, 4, 4), num_classes=3, seed=3,
                             mean=(0.0,), std=(1.0,))
        w = bundle.net.head.weight.detach()
        x = torch.rand((1,) + bundle.input_shape)
        true_grad = (w[1] - w[0]).reshape(bundle.input_shape)

        def objective(batch):
            logits = bundle.logits(batch).detach()
            return logits[:, 1] - logits[:, 0]

        cosines = []
        for n in (16, 256):
            est = spsa_gradient_estimate(objective, x, n, 0.01, torch_generator(3))
            c = torch.nn.functional.cosine_similarity(est.flatten(), true_grad.flatten(), dim=0)
            cosines.append(float(c))
        assert cosines[-1] >= 0.9
        assert cosines[-1] >= cosines[0]

    def test_budget_and_determinism(self, cnn_bundle, batch):
        x, y = batch
        budget = small_budget(steps=2)
        r1 = spsa_attack(cnn_bundle, x[:4], y[:4], budget, batch_perturbations=8, seed=5)
        r2 = spsa_attack(cnn_bundle, x[:4], y[:4], budget, batch_perturbations=8, seed=5)
        assert torch.equal(r1.perturbed, r2.perturbed)
        assert_within_budget(r1.perturbed, x[:4], budget)


class TestIFIA:
    def test_zero_steps_keeps_map(self, cnn_bundle, batch):
        x, y = batch
        pred = cnn_bundle.predict(x)
        budget = small_budget(steps=0, random_init=False)
        res = ifia_topk_attack(cnn_bundle, x, pred, attribution_method="gradient",
                               budget=budget, k=50)
        assert torch.equal(res.perturbed, x)
        with cnn_bundle.activation(SOFTPLUS):
            a = attribution_scores(cnn_bundle, x[0], int(pred[0]), method="gradient")
        flat = a.detach().abs().numpy().ravel()
        assert topk_intersection(flat, flat, 50) == 1.0
        assert kendall_tau(flat, flat) == pytest.approx(1.0)

    def test_skipped_samples_flagged_and_unperturbed(self, cnn_bundle, batch):
        x, y = batch
        pred = cnn_bundle.predict(x)
        wrong_y = (pred + 1) % cnn_bundle.num_classes
        res = ifia_topk_attack(cnn_bundle, x[:4], wrong_y[:4], attribution_method="gradient",
                               budget=small_budget(steps=1, random_init=False), k=20)
        assert res.skipped.all()
        assert torch.equal(res.perturbed, x[:4])

    def test_prediction_preserved_and_budget(self, cnn_bundle, batch):
        x, y = batch
        pred = cnn_bundle.predict(x)
        budget = small_budget(steps=4, random_init=False, step_size=1 / 255)
        res = ifia_topk_attack(cnn_bundle, x, pred, attribution_method="gradient",
                               budget=budget, k=100, seed=0)
        assert_within_budget(res.perturbed, x, budget)
        assert np.all(res.prediction_preserved)
        assert not res.skipped.any()

    def test_k_out_of_range(self, cnn_bundle, batch):
        x, _ = batch
        pred = cnn_bundle.predict(x[:2])
        with pytest.raises(ValueError):
            ifia_topk_attack(cnn_bundle, x[:2], pred, attribution_method="gradient",
                             budget=small_budget(steps=1), k=5000)

    def test_deterministic(self, cnn_bundle, batch):
        x, y = batch
        pred = cnn_bundle.predict(x[:6])
        budget = small_budget(steps=2, random_init=False)
        r1 = ifia_topk_attack(cnn_bundle, x[:6], pred, attribution_method="gradient",
                              budget=budget, k=50, seed=3)
        r2 = ifia_topk_attack(cnn_bundle, x[:6], pred, attribution_method="gradient",
                              budget=budget, k=50, seed=3)
        assert torch.equal(r1.perturbed, r2.perturbed)


class TestTargetedAttack:
    def test_own_map_target_never_degrades(self, cnn_bundle, batch):
        # target = own attribution: best-iterate tracking means the returned
        # input scores at least the clean overlap on the attack's objective
        x, y = batch
        pred = cnn_bundle.predict(x[:4])
        with cnn_bundle.activation(SOFTPLUS):
            own = attribution_scores(cnn_bundle, x[:4], pred, method="gradient").detach()
        budget = small_budget(steps=3, random_init=False, step_size=1 / 255)
        res = targeted_attribution_attack(cnn_bundle, x[:4], pred, own,
                                          attribution_method="gradient", budget=budget, k=50)
        assert len(res.objective_trace) == 3

        def overlap(inputs):
            with cnn_bundle.activation(SOFTPLUS):
                flat = attribution_scores(cnn_bundle, inputs, pred,
                                          method="gradient").detach().abs().flatten(1)
            mask = torch.zeros_like(flat)
            top = own.abs().flatten(1).argsort(dim=1, descending=True, stable=True)[:, :50]
            mask.scatter_(1, top, 1.0)
            return (flat * mask).sum(1) / flat.sum(1)

        before = overlap(x[:4])
        final = overlap(res.perturbed)
        assert bool((final >= before - 1e-7).all())

    def test_shape_mismatch_rejected(self, cnn_bundle, batch):
        x, y = batch
        pred = cnn_bundle.predict(x[:2])
        with pytest.raises(ValueError):
            targeted_attribution_attack(cnn_bundle, x[:2], pred, np.zeros((3, 8, 8)),
                                        budget=small_budget(steps=1), k=10)

    def test_budget_and_preservation(self, cnn_bundle, batch):
        x, y = batch
        pred = cnn_bundle.predict(x)
        target = np.roll(x.numpy(), 1, axis=0)
        budget = small_budget(steps=3, random_init=False, step_size=1 / 255)
        res = targeted_attribution_attack(cnn_bundle, x, pred, target,
                                          attribution_method="gradient", budget=budget, k=50)
        assert_within_budget(res.perturbed, x, budget)
        assert np.all(res.prediction_preserved)


class TestInnerMaximization:
    def test_zero_steps_init_only_within_budget(self, cnn_bundle, batch):
        x, y = batch
        budget = PerturbationBudget(epsilon=8 / 255, step_size=1.5 / 255, steps=0,
                                    random_init=True)
        out = art_inner_maximization(cnn_bundle, x, y, budget=budget, seed=4)
        assert_within_budget(out, x, budget)
        assert not torch.equal(out, x)  # the uniform init moved it

    def test_defaults_and_trace(self, cnn_bundle, batch):
        x, y = batch
        out, trace = art_inner_maximization(cnn_bundle, x[:8], y[:8], seed=1,
                                            return_trace=True)
        # default budget: 3 steps -> trace has init + per-step + final values
        assert len(trace) == 4
        assert_within_budget(out, x[:8],
                             PerturbationBudget(epsilon=8 / 255, step_size=1.5 / 255, steps=3))

    def test_ascent_tends_to_increase_loss(self, cnn_bundle, batch):
        x, y = batch
        ups = 0
        for s in range(5):
            _, trace = art_inner_maximization(cnn_bundle, x, y, seed=s, return_trace=True)
            ups += trace[-1] >= trace[0]
        assert ups >= 4

    def test_plus_ce_variant_runs(self, cnn_bundle, batch):
        x, y = batch
        out = art_inner_maximization(cnn_bundle, x[:4], y[:4], loss="l_attr_plus_ce", seed=0)
        assert out.shape == x[:4].shape
        with pytest.raises(ValueError):
            art_inner_maximization(cnn_bundle, x[:4], y[:4], loss="bogus")


class TestTransfer:
    def test_source_equals_target_matches_whitebox(self, cnn_bundle, batch):
        x, y = batch
        budget = small_budget(steps=3)
        acc_transfer = transfer_attack_eval(cnn_bundle, cnn_bundle, x, y, budget, seed=2)
        res = pgd_classification_attack(cnn_bundle, x, y, budget, seed=2)
        acc_white = float((cnn_bundle.predict(res.perturbed) == y).float().mean())
        assert acc_transfer == pytest.approx(acc_white)
