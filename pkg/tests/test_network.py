import numpy as np
import pytest

from dual_lora.adapters import GrlConfig, TaskIndicator
from dual_lora.gradcheck import TINY_MODEL, tiny_model
from dual_lora.network import (
    Discriminator,
    DualLoraModel,
    ModelConfig,
    adversarial_flow,
    anchor_flow,
    forward_pass,
    pretrain_backbone,
    random_backbone_weights,
)
from dual_lora.tensor import DimensionError, Tensor, softmax_cross_entropy, zero_grads

SPK, LANG = TaskIndicator.SPK, TaskIndicator.LANG


@pytest.fixture
def fresh(rng):
    return DualLoraModel(TINY_MODEL, random_backbone_weights(TINY_MODEL, rng), rng)


def _x(rng, n=3, T=4):
    return rng.normal(size=(n, T, TINY_MODEL.feat_dim))


class TestBackbone:
    def test_global_injection_and_frozen(self, fresh):
        for L in fresh.backbone.layers:
            assert set(L.A) == {SPK, LANG} and set(L.B) == {SPK, LANG}
            assert not L.W0.requires_grad and not L.b0.requires_grad

    def test_shapes(self, fresh, rng):
        x = rng.normal(size=(2, 3, TINY_MODEL.feat_dim))
        assert fresh.embed(x, SPK).shape == (2, TINY_MODEL.d_emb)
        assert fresh.embed(x, LANG).shape == (2, TINY_MODEL.d_emb_lang)

    def test_fresh_branches_share_activations(self, fresh, rng):
        x = _x(rng)
        np.testing.assert_array_equal(fresh.backbone(x, SPK).data, fresh.backbone(x, LANG).data)

    def test_matches_numpy_oracle(self, rng):
        model = tiny_model(rng)
        x = _x(rng)
        h = x.reshape(-1, TINY_MODEL.feat_dim)
        layers = model.backbone.layers
        for i, L in enumerate(layers):
            W = L.W0.data + L.delta(SPK)
            h = h @ W.T + L.b0.data
            if i < len(layers) - 1:
                h = np.maximum(h, 0.0)
        pooled = h.reshape(3, 4, -1).mean(axis=1)
        e = pooled @ model.heads.spk.W.data.T + model.heads.spk.b.data
        np.testing.assert_allclose(forward_pass(model.backbone, model.heads, x, SPK).data, e, rtol=1e-12, atol=1e-13)

    def test_wrong_feature_width(self, fresh):
        with pytest.raises(DimensionError):
            fresh.embed(np.zeros((2, 3, TINY_MODEL.feat_dim + 1)), SPK)

    def test_bad_backbone_weights(self, rng):
        w = random_backbone_weights(TINY_MODEL, rng)
        w[0] = (w[0][0][:, :-1], w[0][1])
        with pytest.raises(DimensionError):
            DualLoraModel(TINY_MODEL, w, rng)

    def test_speaker_step_leaves_language_branch(self, rng):
        model = tiny_model(rng)
        x = _x(rng, n=4)
        before = model.embed(x, LANG).data.copy()
        params = model.trainable_parameters()
        zero_grads(params)
        softmax_cross_entropy(model.embed(x, SPK), [0, 1, 2, 3]).backward()
        for p in params:
            if p.grad is not None:
                p.data -= 0.1 * p.grad
        np.testing.assert_array_equal(model.embed(x, LANG).data, before)
        assert not np.array_equal(model.embed(x, SPK).data, before)

    def test_deterministic(self, rng):
        model = tiny_model(rng)
        x = _x(rng)
        assert model.embed(x, SPK).data.tobytes() == model.embed(x, SPK).data.tobytes()


class TestDiscriminator:
    def test_shapes(self, fresh, rng):
        assert anchor_flow(fresh.disc, Tensor(rng.normal(size=(5, TINY_MODEL.d_emb_lang)))).shape == (5, 3)
        assert adversarial_flow(fresh.disc, Tensor(rng.normal(size=(5, TINY_MODEL.d_emb))), GrlConfig()).shape == (5, 3)

    def test_width_mismatch(self, fresh):
        with pytest.raises(DimensionError):
            anchor_flow(fresh.disc, Tensor(np.ones((2, TINY_MODEL.d_emb))))

    def test_zero_weights_give_constant_logits(self, rng):
        D = Discriminator(4, 3, 3, rng, proj=4, hidden=5)
        for p in D.parameters():
            p.data[...] = 0.0
        D.fc2.b.data[...] = [0.5, -1.0, 2.0]
        for e in (rng.normal(size=(2, 3)), rng.normal(size=(2, 3)) * 10):
            np.testing.assert_array_equal(anchor_flow(D, Tensor(e)).data, [[0.5, -1.0, 2.0]] * 2)

    def test_adversarial_forward_equals_plain(self, fresh, rng):
        e = Tensor(rng.normal(size=(4, TINY_MODEL.d_emb)))
        np.testing.assert_array_equal(adversarial_flow(fresh.disc, e, GrlConfig(0.7)).data, fresh.disc(e, SPK).data)

    def test_one_parameter_set_serves_both_flows(self, rng):
        # equal-width branches with identical projections: the two flows are the same function
        cfg = ModelConfig(feat_dim=5, width=6, depth=2, d_emb=4, d_emb_lang=4, r_spk=3, r_lang=2,
                          disc_proj=4, disc_hidden=5, n_languages=3)
        model = DualLoraModel(cfg, random_backbone_weights(cfg, rng), rng)
        D = model.disc
        D.proj[LANG].W.data[...] = D.proj[SPK].W.data
        D.proj[LANG].b.data[...] = D.proj[SPK].b.data
        e = Tensor(rng.normal(size=(6, 4)))
        np.testing.assert_array_equal(anchor_flow(D, e).data, adversarial_flow(D, e, GrlConfig()).data)
        # an update to the shared layers moves both flows identically
        D.fc1.W.data += 0.3
        np.testing.assert_array_equal(anchor_flow(D, e).data, adversarial_flow(D, e, GrlConfig()).data)
        assert {id(p) for p in D.parameters(SPK)} & {id(p) for p in D.parameters(LANG)} == {
            id(p) for p in D.fc1.parameters() + D.fc2.parameters()}

    def test_eta_zero_blocks_upstream(self, rng):
        model = tiny_model(rng)
        e = model.embed(_x(rng), SPK)
        softmax_cross_entropy(adversarial_flow(model.disc, e, GrlConfig(0.0)), [0, 1, 2]).backward()
        for p in model.branch_parameters(SPK):
            assert p.grad is None or not p.grad.any()
        assert any(p.grad is not None and p.grad.any() for p in model.disc.parameters(SPK))

    def test_disc_gradient_unaffected_by_grl(self, rng):
        model = tiny_model(rng)
        x = _x(rng)

        def run(eta):
            zero_grads(model.trainable_parameters())
            logits = adversarial_flow(model.disc, model.embed(x, SPK), GrlConfig(eta)) if eta is not None \
                else model.disc(model.embed(x, SPK), SPK)
            softmax_cross_entropy(logits, [0, 2, 1]).backward()
            return [p.grad.copy() for p in model.disc.parameters(SPK)], [p.grad.copy() for p in model.backbone.adapter_parameters(SPK)]

        (d_grl, up_grl), (d_plain, up_plain) = run(0.5), run(None)
        for a, b in zip(d_grl, d_plain):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(up_grl, up_plain):
            np.testing.assert_allclose(a, -0.5 * b, rtol=0, atol=1e-12)


class TestWarmupAndMerge:
    def test_pretrain_reduces_loss(self, rng):
        cfg = TINY_MODEL
        spk = np.repeat(np.arange(4), 6)
        centers = rng.normal(size=(4, cfg.feat_dim)) * 2
        feats = centers[spk][:, None, :] + 0.1 * rng.normal(size=(24, 3, cfg.feat_dim))
        trained = pretrain_backbone(feats, spk, cfg, np.random.default_rng(0), epochs=30, lr=0.05, batch_size=8)
        assert [w.shape for w, _ in trained] == cfg.layer_dims()

        def sep(weights):
            h = feats.reshape(-1, cfg.feat_dim)
            for i, (W, b) in enumerate(weights):
                h = h @ W.T + b
                if i < len(weights) - 1:
                    h = np.maximum(h, 0)
            e = h.reshape(24, 3, -1).mean(axis=1)
            e /= np.linalg.norm(e, axis=1, keepdims=True)
            sim = e @ e.T
            same = spk[:, None] == spk[None, :]
            return sim[same].mean() - sim[~same].mean()

        assert sep(trained) > 0.2

    def test_merged_model_matches_adapted(self, rng):
        model = tiny_model(rng)
        x = _x(rng, n=10)
        np.testing.assert_allclose(model.merge().embed(x).data, model.embed(x, SPK).data, rtol=0, atol=1e-9)

    def test_merged_names_have_no_adapters(self, rng):
        names = tiny_model(rng).merge().named_parameters()
        assert not [n for n in names if ".A." in n or ".B." in n]
        assert "heads.spk.W" in names and "backbone.0.W" in names
