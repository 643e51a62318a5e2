import hashlib
import warnings

import numpy as np
import pytest

from conftest import SMALL_MODEL, small_train_config
from dual_lora.adapters import GrlConfig, TaskIndicator
from dual_lora.checkpoint import model_entries
from dual_lora.losses import LossWeights, TrainingAbort, language_loss, subcenter_arcmargin
from dual_lora.network import adversarial_flow, anchor_flow, random_backbone_weights
from dual_lora.training import (
    METRICS_HEADER,
    DEFAULT_PHASES,
    SGD,
    Batch,
    CurriculumSchedule,
    Phase,
    TrainMode,
    build_model,
    compute_losses,
    lambda_at,
    run_training,
    train_step,
)
from dual_lora.tensor import Tensor, zero_grads

SPK, LANG = TaskIndicator.SPK, TaskIndicator.LANG


def _model(seed=0, n_speakers=6):
    rng = np.random.default_rng(seed)
    model = build_model(small_train_config(seed), random_backbone_weights(SMALL_MODEL, rng), n_speakers)
    # non-zero B so that every branch carries signal
    for L in model.backbone.layers:
        for t in (SPK, LANG):
            L.B[t].data[...] = rng.normal(0, 0.1, size=L.B[t].shape)
    return model


def _batch(seed=0, n=8):
    rng = np.random.default_rng(seed + 100)
    return Batch(rng.normal(size=(n, 5, SMALL_MODEL.feat_dim)), rng.integers(0, 6, size=n), rng.integers(0, 3, size=n))


def _grads(model):
    return {id(p): (None if p.grad is None else p.grad.copy()) for p in model.trainable_parameters()}


def _w0_digest(model):
    h = hashlib.sha256()
    for L in model.backbone.layers:
        h.update(L.W0.data.tobytes())
        h.update(L.b0.data.tobytes())
    return h.hexdigest()


class TestSchedule:
    def test_default_lambdas(self):
        s = CurriculumSchedule()
        assert s.total_epochs == 3
        assert [(lambda_at(s, e).lambda1, lambda_at(s, e).lambda2) for e in range(3)] == [(1.0, 0.0), (0.2, 0.2), (0.2, 0.5)]

    def test_scaled_spans_partition(self):
        s = CurriculumSchedule.scaled(4)
        assert s.total_epochs == 12
        assert [s.phase_index(e) for e in range(12)] == [0] * 4 + [1] * 4 + [2] * 4

    @pytest.mark.parametrize("epoch", [-1, 3])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            lambda_at(CurriculumSchedule(), epoch)

    def test_invalid_phases(self):
        with pytest.raises(ValueError):
            CurriculumSchedule(())
        with pytest.raises(ValueError):
            CurriculumSchedule((Phase(0, 1.0, 0.0),))
        with pytest.raises(ValueError):
            CurriculumSchedule((Phase(1, -1.0, 0.0),))


class TestOptimizer:
    def test_lr_decays_monotonically_to_end(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = SGD([p], 1e-2, 1e-4, total_steps=50)
        lrs = []
        for _ in range(50):
            p.grad = np.ones(2)
            lrs.append(opt.step())
        assert lrs[0] == 1e-2 and lrs[-1] == pytest.approx(1e-4, rel=1e-12)
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_momentum_update(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], 0.1, 0.1, total_steps=2, momentum=0.9)
        p.grad = np.array([1.0])
        opt.step()
        opt.step()
        # v1 = -0.1, v2 = 0.9 * -0.1 - 0.1
        np.testing.assert_allclose(p.data, [1.0 - 0.1 - 0.19], atol=1e-15)

    def test_invalid_rates(self):
        with pytest.raises(ValueError):
            SGD([], 1e-3, 1e-2, 10)
        with pytest.raises(ValueError):
            SGD([], 0.0, 0.0, 10)


class TestTrainStep:
    def test_zero_lambdas_match_pure_identity_step(self):
        batch = _batch()
        a, b = _model(), _model()
        zero_grads(a.trainable_parameters())
        total, *_ = compute_losses(a, batch, TrainMode.DUAL_LORA, LossWeights(0.0, 0.0), GrlConfig())
        total.backward()
        zero_grads(b.trainable_parameters())
        subcenter_arcmargin(b.embed(Tensor(batch.features), SPK), batch.speakers, b.arcmargin).backward()
        for pa, pb in zip(a.trainable_parameters(), b.trainable_parameters()):
            ga = None if pa.grad is None or not pa.grad.any() else pa.grad
            gb = None if pb.grad is None or not pb.grad.any() else pb.grad
            assert (ga is None) == (gb is None), pa.name
            if ga is not None:
                np.testing.assert_allclose(ga, gb, rtol=0, atol=1e-12)

    def test_no_adv_speaker_branch_free_of_language_gradient(self):
        model = _model()
        batch = _batch()
        zero_grads(model.trainable_parameters())
        e_lang = model.embed(Tensor(batch.features), LANG)
        language_loss(anchor_flow(model.disc, e_lang), batch.languages).backward()
        for p in model.branch_parameters(SPK):
            assert p.grad is None or not p.grad.any()
        # the full NoAdv objective sends no discriminator gradient through the speaker branch either
        zero_grads(model.trainable_parameters())
        total, _, _, l_adv, eff = compute_losses(model, batch, TrainMode.NO_ADV, LossWeights(0.2, 0.5), GrlConfig())
        assert eff.lambda2 == 0.0 and isinstance(l_adv, float)
        total.backward()
        assert model.disc.proj[SPK].W.grad is None or not model.disc.proj[SPK].W.grad.any()

    def test_dual_vs_std_discriminator_gradients(self):
        batch = _batch()
        w = LossWeights(0.2, 0.5)
        out = {}
        for mode in (TrainMode.DUAL_LORA, TrainMode.STD_ADV):
            model = _model()
            zero_grads(model.trainable_parameters())
            compute_losses(model, batch, mode, w, GrlConfig())[0].backward()
            out[mode] = [p.grad.copy() for p in model.disc.fc1.parameters()]
        diff = sum(np.abs(a - b).sum() for a, b in zip(out[TrainMode.DUAL_LORA], out[TrainMode.STD_ADV]))
        assert diff > 1e-6

    def test_dual_equals_std_on_disc_without_anchor(self):
        batch = _batch()
        w = LossWeights(0.0, 0.5)
        out = {}
        for mode in (TrainMode.DUAL_LORA, TrainMode.STD_ADV):
            model = _model()
            zero_grads(model.trainable_parameters())
            compute_losses(model, batch, mode, w, GrlConfig())[0].backward()
            out[mode] = [p.grad.copy() for p in model.disc.fc1.parameters()]
        for a, b in zip(out[TrainMode.DUAL_LORA], out[TrainMode.STD_ADV]):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_gradient_accumulation_is_pass_sum(self):
        batch = _batch()
        w = LossWeights(0.2, 0.5)
        cfg = GrlConfig(0.8)
        model = _model()
        x = Tensor(batch.features)

        zero_grads(model.trainable_parameters())
        compute_losses(model, batch, TrainMode.DUAL_LORA, w, cfg)[0].backward()
        joint = _grads(model)

        zero_grads(model.trainable_parameters())
        (language_loss(anchor_flow(model.disc, model.embed(x, LANG)), batch.languages) * w.lambda1).backward()
        pass1 = _grads(model)

        zero_grads(model.trainable_parameters())
        e_spk = model.embed(x, SPK)
        l2 = subcenter_arcmargin(e_spk, batch.speakers, model.arcmargin) + \
            language_loss(adversarial_flow(model.disc, e_spk, cfg), batch.languages) * w.lambda2
        l2.backward()
        pass2 = _grads(model)

        for key, g in joint.items():
            parts = [p[key] for p in (pass1, pass2) if p[key] is not None]
            expected = sum(parts) if parts else None
            if g is None:
                assert expected is None or not expected.any()
            else:
                np.testing.assert_allclose(g, expected, rtol=0, atol=1e-10)

    def test_step_report_and_frozen_backbone(self):
        model = _model()
        digest = _w0_digest(model)
        opt = SGD(model.trainable_parameters(), 1e-2, 1e-4, 10)
        rep = train_step(model, _batch(), TrainMode.DUAL_LORA, LossWeights(0.2, 0.5), GrlConfig(), opt)
        assert (rep.lambda1, rep.lambda2) == (0.2, 0.5)
        assert rep.total == pytest.approx(rep.l_id + 0.2 * rep.l_lang + 0.5 * rep.l_adv, rel=1e-12)
        assert set(rep.grad_norms) == {"spk", "lang", "disc"}
        assert _w0_digest(model) == digest

    def test_nan_aborts(self):
        model = _model()
        batch = _batch()
        batch.features[0, 0, 0] = np.nan
        opt = SGD(model.trainable_parameters(), 1e-2, 1e-4, 10)
        with pytest.raises(TrainingAbort, match="L_"):
            train_step(model, batch, TrainMode.DUAL_LORA, LossWeights(0.2, 0.5), GrlConfig(), opt)


class TestRunTraining:
    def test_metrics_and_schedule(self, small_bundle):
        res = run_training(small_train_config(), small_bundle, TrainMode.DUAL_LORA)
        assert [(m.lambda1, m.lambda2) for m in res.metrics] == [(p.lambda1, p.lambda2) for p in DEFAULT_PHASES]
        assert [m.phase for m in res.metrics] == [0, 1, 2]
        for step in res.steps:
            assert step.total == pytest.approx(step.l_id + step.lambda1 * step.l_lang + step.lambda2 * step.l_adv, rel=1e-9)
        lrs = [s.lr for s in res.steps]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        lines = res.metrics_tsv().splitlines()
        assert lines[0] == METRICS_HEADER and len(lines) == 4
        assert all(len(line.split("\t")) == 8 for line in lines)

    def test_deterministic(self, small_bundle):
        cfg = small_train_config(seed=3)
        a = run_training(cfg, small_bundle, TrainMode.DUAL_LORA)
        b = run_training(cfg, small_bundle, TrainMode.DUAL_LORA)
        ea, eb = model_entries(a.model), model_entries(b.model)
        assert list(ea) == list(eb)
        assert all(ea[k].tobytes() == eb[k].tobytes() for k in ea)
        assert a.metrics_tsv() == b.metrics_tsv()

    def test_frozen_w0_across_run(self, small_bundle):
        weights = random_backbone_weights(SMALL_MODEL, np.random.default_rng(0))
        before = hashlib.sha256(b"".join(w.tobytes() + b.tobytes() for w, b in weights)).hexdigest()
        res = run_training(small_train_config(), small_bundle, TrainMode.DUAL_LORA, backbone_weights=weights)
        assert _w0_digest(res.model) == before

    def test_std_adv_without_adversary_warns(self, small_bundle):
        sched = CurriculumSchedule((Phase(1, 1.0, 0.0),))
        with pytest.warns(UserWarning, match="lambda2"):
            run_training(small_train_config(schedule=sched), small_bundle, TrainMode.STD_ADV)

    def test_modes_accept_strings(self, small_bundle):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = run_training(small_train_config(), small_bundle, "no-adv")
        assert all(m.lambda2 == 0.0 or m.phase > 0 for m in res.metrics)
        with pytest.raises(ValueError):
            run_training(small_train_config(), small_bundle, "gan")
