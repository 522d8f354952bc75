import numpy as np
import pytest
import torch

from aucis.cis import ConfounderDictionary, rebuild_dictionary, MemoryBanks
from aucis.datamodel import ModelConfig
from aucis.errors import DataValidationError, ModuleNotInitializedError
from aucis.model import (
    AUModel,
    binarize,
    build_model,
    forward_logits,
    predict_probabilities,
)

OBS_DIM = 14
CFG = ModelConfig(d_in=16, d_m=8, d_out=12, num_aus=6, backbone_shape=(24,), classifier_hidden=10)


def built_dictionary(model, n_subjects=3, seed=0):
    rng = np.random.default_rng(seed)
    banks = MemoryBanks(range(n_subjects), model.config.d_in)
    sids = np.repeat(np.arange(n_subjects), 4)
    feats = torch.from_numpy(rng.normal(size=(len(sids), model.config.d_in)))
    banks.update_batch(sids, feats)
    return rebuild_dictionary(banks, epoch=1)


class TestForward:
    def test_zero_parameters_zero_logits(self):
        model = build_model("baseline", CFG, OBS_DIM, seed=0)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        obs = np.random.default_rng(0).normal(size=OBS_DIM)
        logits = forward_logits(model, obs)
        assert torch.allclose(logits, torch.zeros(CFG.num_aus, dtype=torch.float64))

    def test_parameter_count_difference(self):
        base = build_model("baseline", CFG, OBS_DIM, seed=1)
        cis = build_model("cisnet", CFG, OBS_DIM, seed=1)
        cis_params = 2 * CFG.d_m * CFG.d_in + 2 * CFG.d_out * CFG.d_in
        # classifier first layer widens from d_in to 2*d_out inputs
        clf_delta = CFG.classifier_hidden * (2 * CFG.d_out - CFG.d_in)
        assert cis.parameter_count() - base.parameter_count() == cis_params + clf_delta

    def test_variant_parameter_names_differ_only_by_cis(self):
        base = dict(build_model("baseline", CFG, OBS_DIM, seed=2).named_parameters())
        cis = dict(build_model("cisnet", CFG, OBS_DIM, seed=2).named_parameters())
        extra = set(cis) - set(base)
        assert extra == {"cis.W_Q", "cis.W_K", "cis.W_X", "cis.W_S"}
        assert set(base) - set(cis) == set()
        for name in base:
            if name.startswith("backbone."):
                assert torch.equal(base[name], cis[name])

    def test_cisnet_requires_dictionary(self):
        model = build_model("cisnet", CFG, OBS_DIM, seed=3)
        with pytest.raises(ModuleNotInitializedError):
            forward_logits(model, np.zeros(OBS_DIM))

    def test_cisnet_forward_shapes(self):
        model = build_model("cisnet", CFG, OBS_DIM, seed=4)
        model.dictionary = built_dictionary(model)
        single = forward_logits(model, np.zeros(OBS_DIM))
        assert single.shape == (CFG.num_aus,)
        batch = forward_logits(model, np.zeros((7, OBS_DIM)))
        assert batch.shape == (7, CFG.num_aus)

    def test_eval_mode_determinism(self):
        model = build_model("cisnet", CFG, OBS_DIM, seed=5)
        model.dictionary = built_dictionary(model, seed=5)
        obs = np.random.default_rng(6).normal(size=(4, OBS_DIM))
        a = predict_probabilities(model, obs)
        b = predict_probabilities(model, obs)
        assert np.array_equal(a, b)

    def test_finite_difference_backbone_gradients(self):
        model = build_model("baseline", CFG, OBS_DIM, seed=7)
        rng = np.random.default_rng(8)
        obs = rng.normal(size=OBS_DIM)
        probe = torch.from_numpy(rng.normal(size=CFG.num_aus))

        logits = forward_logits(model, obs)
        (logits @ probe).backward()

        step = 1e-5
        checked = 0
        for name, p in model.named_parameters():
            if not name.startswith("backbone."):
                continue
            flat = p.data.view(-1)
            idxs = rng.choice(p.numel(), min(20, p.numel()), replace=False)
            for idx in idxs:
                orig = float(flat[idx])
                with torch.no_grad():
                    flat[idx] = orig + step
                    up = float(forward_logits(model, obs) @ probe)
                    flat[idx] = orig - step
                    down = float(forward_logits(model, obs) @ probe)
                    flat[idx] = orig
                numeric = (up - down) / (2 * step)
                analytic = float(p.grad.view(-1)[idx])
                if abs(numeric) < 1e-10 and abs(analytic) < 1e-10:
                    continue
                rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
                assert rel < 1e-4, (name, idx, numeric, analytic)
                checked += 1
        assert checked > 0

    def test_smallconv_backbone(self):
        cfg = ModelConfig(
            d_in=16, d_m=8, d_out=12, num_aus=6,
            backbone_kind="smallconv", backbone_shape=(4, 8), classifier_hidden=10,
        )
        model = build_model("baseline", cfg, OBS_DIM, seed=9)
        out = forward_logits(model, np.random.default_rng(10).normal(size=(3, OBS_DIM)))
        assert out.shape == (3, 6)
        # differentiable end to end
        out.sum().backward()
        grads = [p.grad for p in model.backbone.parameters()]
        assert all(g is not None and torch.isfinite(g).all() for g in grads)


class TestPredictProbabilities:
    def test_zero_logits_half(self):
        model = build_model("baseline", CFG, OBS_DIM, seed=11)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        probs = predict_probabilities(model, np.ones(OBS_DIM))
        assert np.allclose(probs, 0.5)

    def test_logit_cap_saturation(self):
        # force enormous logits through the final bias; the cap keeps sigmoid at 1
        model = build_model("baseline", CFG, OBS_DIM, seed=12)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            model.classifier.net[2].bias.fill_(1e6)
        probs = predict_probabilities(model, np.zeros(OBS_DIM))
        assert np.all(probs <= 1.0)
        assert np.allclose(probs, 1.0, atol=1e-9)

    def test_matches_scalar_logistic(self):
        model = build_model("baseline", CFG, OBS_DIM, seed=13)
        obs = np.random.default_rng(14).normal(size=OBS_DIM)
        logits = forward_logits(model, obs).detach().numpy()
        probs = predict_probabilities(model, obs)
        for j in range(CFG.num_aus):
            z = min(max(logits[j], -50.0), 50.0)
            assert abs(probs[j] - 1.0 / (1.0 + np.exp(-z))) < 1e-9


class TestBinarize:
    def test_boundary_inclusive(self):
        assert binarize(np.array([0.5]), 0.5).tolist() == [1]

    def test_all_below(self):
        assert binarize(np.array([0.1, 0.49, 0.3]), 0.5).tolist() == [0, 0, 0]

    def test_matches_elementwise_loop(self):
        rng = np.random.default_rng(15)
        probs = rng.uniform(size=(20, 6))
        tau = 0.37
        out = binarize(probs, tau)
        for i in range(20):
            for j in range(6):
                assert out[i, j] == (1 if probs[i, j] >= tau else 0)

    def test_tau_out_of_range(self):
        with pytest.raises(DataValidationError):
            binarize(np.array([0.5]), 1.0)


class TestBuildDeterminism:
    def test_same_seed_same_weights(self):
        a = build_model("cisnet", CFG, OBS_DIM, seed=21)
        b = build_model("cisnet", CFG, OBS_DIM, seed=21)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seed_different_weights(self):
        a = build_model("baseline", CFG, OBS_DIM, seed=1)
        b = build_model("baseline", CFG, OBS_DIM, seed=2)
        assert any(
            not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_double_precision_everywhere(self):
        model = build_model("cisnet", CFG, OBS_DIM, seed=3)
        assert all(p.dtype == torch.float64 for p in model.parameters())
