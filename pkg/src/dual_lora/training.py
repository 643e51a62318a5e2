"""Two-pass curriculum trainer and the three comparison modes."""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .adapters import GrlConfig, TaskIndicator
from .evaluation import score_trials, scenario_eer
from .losses import (
    LossWeights,
    SubcenterArcMarginParams,
    TrainingAbort,
    adversarial_loss,
    language_loss,
    subcenter_arcmargin,
    total_loss,
)
from .network import DualLoraModel, ModelConfig, adversarial_flow, anchor_flow, pretrain_backbone
from .synthdata import Corpus, CorpusBundle
from .tensor import Tensor, softmax_cross_entropy, zero_grads

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainMode(str, enum.Enum):
    NO_ADV = "no-adv"
    STD_ADV = "std-adv"
    DUAL_LORA = "dual-lora"


@dataclass(frozen=True)
class Phase:
    epochs: int
    lambda1: float
    lambda2: float


DEFAULT_PHASES = (Phase(1, 1.0, 0.0), Phase(1, 0.2, 0.2), Phase(1, 0.2, 0.5))


@dataclass(frozen=True)
class CurriculumSchedule:
    phases: tuple[Phase, ...] = DEFAULT_PHASES

    def __post_init__(self):
        if not self.phases:
            raise ValueError("curriculum needs at least one phase")
        for p in self.phases:
            if p.epochs < 1:
                raise ValueError("every phase must span at least one epoch")
            LossWeights(p.lambda1, p.lambda2)

    @classmethod
    def scaled(cls, epochs_per_phase: int, phases=DEFAULT_PHASES) -> "CurriculumSchedule":
        return cls(tuple(Phase(epochs_per_phase, p.lambda1, p.lambda2) for p in phases))

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def phase_index(self, epoch: int) -> int:
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        end = 0
        for i, p in enumerate(self.phases):
            end += p.epochs
            if epoch < end:
                return i
        raise AssertionError("unreachable")


def lambda_at(schedule: CurriculumSchedule, epoch: int) -> LossWeights:
    p = schedule.phases[schedule.phase_index(epoch)]
    return LossWeights(p.lambda1, p.lambda2)


class SGD:
    """SGD with momentum and an exponential learning-rate decay from
    ``lr_start`` to ``lr_end`` over ``total_steps`` updates."""

    def __init__(self, params: list[Tensor], lr_start: float, lr_end: float, total_steps: int, momentum: float = 0.9):
        if not (lr_start > 0 and lr_end > 0):
            raise ValueError("learning rates must be positive")
        if lr_end > lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        self.params = params
        self.lr_start, self.lr_end = lr_start, lr_end
        self.total_steps = max(1, total_steps)
        self.momentum = momentum
        self.velocity = {id(p): np.zeros_like(p.data) for p in params}
        self.steps = 0

    @property
    def lr(self) -> float:
        frac = min(self.steps / max(1, self.total_steps - 1), 1.0)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac

    def step(self) -> float:
        lr = self.lr
        for p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[id(p)]
            v *= self.momentum
            v -= lr * p.grad
            p.data += v
        self.steps += 1
        return lr


@dataclass
class Batch:
    features: np.ndarray  # (n, T, D)
    speakers: np.ndarray
    languages: np.ndarray


@dataclass
class StepReport:
    l_id: float
    l_lang: float
    l_adv: float
    total: float
    lambda1: float
    lambda2: float
    lr: float
    grad_norms: dict[str, float] = field(default_factory=dict)


def compute_losses(model: DualLoraModel, batch: Batch, mode: TrainMode, w: LossWeights, cfg: GrlConfig):
    """Build this step's graph. Returns ``(total, l_id, l_lang, l_adv, effective_weights)``.

    ``l_lang``/``l_adv`` are plain floats when a mode does not train them.
    """
    mode = TrainMode(mode)
    x = Tensor(batch.features)
    zero = Tensor(0.0)
    if mode is TrainMode.STD_ADV:
        e_spk = model.embed(x, TaskIndicator.SPK)
        l_id = subcenter_arcmargin(e_spk, batch.speakers, model.arcmargin)
        l_adv = adversarial_loss(adversarial_flow(model.disc, e_spk, cfg), batch.languages)
        eff = LossWeights(0.0, w.lambda2)
        return total_loss(l_id, zero, l_adv, eff), l_id, 0.0, l_adv, eff

    # pass 1: language anchor flow
    e_lang = model.embed(x, TaskIndicator.LANG)
    l_lang = language_loss(anchor_flow(model.disc, e_lang), batch.languages)
    # pass 2: speaker branch
    e_spk = model.embed(x, TaskIndicator.SPK)
    l_id = subcenter_arcmargin(e_spk, batch.speakers, model.arcmargin)
    if mode is TrainMode.NO_ADV:
        # monitoring only: how well D reads language off the speaker embedding
        probe = softmax_cross_entropy(model.disc(e_spk.detach(), TaskIndicator.SPK).detach(), batch.languages)
        eff = LossWeights(w.lambda1, 0.0)
        return total_loss(l_id, l_lang, zero, eff), l_id, l_lang, probe.item(), eff
    l_adv = adversarial_loss(adversarial_flow(model.disc, e_spk, cfg), batch.languages)
    return total_loss(l_id, l_lang, l_adv, w), l_id, l_lang, l_adv, w


def _value(t) -> float:
    return t.item() if isinstance(t, Tensor) else float(t)


def _group_norm(params: list[Tensor]) -> float:
    return math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))


def train_step(model: DualLoraModel, batch: Batch, mode: TrainMode, w: LossWeights, cfg: GrlConfig, opt: SGD) -> StepReport:
    zero_grads(model.trainable_parameters())
    total, l_id, l_lang, l_adv, eff = compute_losses(model, batch, mode, w, cfg)
    if total.item() > DIVERGENCE_LIMIT:
        raise TrainingAbort(f"total loss diverged ({total.item():.3g})")
    total.backward()
    norms = {
        "spk": _group_norm(model.branch_parameters(TaskIndicator.SPK)),
        "lang": _group_norm(model.branch_parameters(TaskIndicator.LANG)),
        "disc": _group_norm(model.disc.parameters()),
    }
    lr = opt.step()
    return StepReport(_value(l_id), _value(l_lang), _value(l_adv), total.item(), eff.lambda1, eff.lambda2, lr, norms)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    schedule: CurriculumSchedule = CurriculumSchedule()
    eta: float = 1.0
    subcenters: int = 3
    margin: float = 0.2
    scale: float = 32.0
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    warmup_epochs: int = 10
    warmup_lr: float = 0.05
    seed: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    phase: int
    lambda1: float
    lambda2: float
    l_id: float
    l_lang: float
    l_adv: float
    dev_eer: float

    def tsv(self) -> str:
        return (f"{self.epoch}\t{self.phase + 1}\t{self.lambda1:g}\t{self.lambda2:g}\t{self.l_id:.6f}\t"
                f"{self.l_lang:.6f}\t{self.l_adv:.6f}\t{self.dev_eer:.4f}")


METRICS_HEADER = "#epoch\tphase\tlambda1\tlambda2\tL_id\tL_lang\tL_adv\tdev_EER"


@dataclass
class TrainResult:
    model: DualLoraModel
    metrics: list[EpochMetrics]
    steps: list[StepReport]
    speaker_index: dict[int, int]

    def metrics_tsv(self) -> str:
        return "\n".join([METRICS_HEADER] + [m.tsv() for m in self.metrics]) + "\n"


def warm_up_backbone(config: TrainConfig, source: Corpus):
    """Pre-train the weights that become the frozen backbone."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBB]))
    spk_ids = {s: i for i, s in enumerate(sorted(set(source.speakers.tolist())))}
    labels = np.array([spk_ids[s] for s in source.speakers.tolist()])
    return pretrain_backbone(source.features(), labels, config.model, rng,
                             epochs=config.warmup_epochs, lr=config.warmup_lr)


def build_model(config: TrainConfig, backbone_weights, n_speakers: int) -> DualLoraModel:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xAD]))
    model = DualLoraModel(config.model, backbone_weights, rng)
    model.arcmargin = SubcenterArcMarginParams.init(n_speakers, config.subcenters, config.model.d_emb, rng,
                                                    config.margin, config.scale)
    return model


def run_training(config: TrainConfig, corpus: CorpusBundle, mode: TrainMode, backbone_weights=None) -> TrainResult:
    """Warm up (unless weights are supplied), then run the curriculum.

    Fully deterministic given ``config.seed``.
    """
    mode = TrainMode(mode)
    sched = config.schedule
    if mode is TrainMode.STD_ADV:
        if any(p.lambda1 > 0 for p in sched.phases):
            log.warning("std-adv mode ignores lambda1 (no language branch)")
        if all(p.lambda2 == 0 for p in sched.phases):
            warnings.warn("std-adv with lambda2 = 0 in every phase never trains the adversary", stacklevel=2)
    if backbone_weights is None:
        backbone_weights = warm_up_backbone(config, corpus.source)
    train = corpus.train
    spk_index = {s: i for i, s in enumerate(sorted(set(train.speakers.tolist())))}
    model = build_model(config, backbone_weights, len(spk_index))
    if model.arcmargin.dim != model.heads.spk.W.shape[0]:
        raise ValueError("speaker head width does not match the identity-loss class weights")

    feats = train.features()
    speakers = np.array([spk_index[s] for s in train.speakers.tolist()])
    languages = train.languages
    n = len(train)
    bs = config.batch_size
    steps_per_epoch = math.ceil(n / bs)
    grl_cfg = GrlConfig(config.eta)
    opt = SGD(model.trainable_parameters(), config.lr_start, config.lr_end,
              steps_per_epoch * sched.total_epochs, config.momentum)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5F]))

    metrics, steps = [], []
    for epoch in range(sched.total_epochs):
        w = lambda_at(sched, epoch)
        order = shuffle_rng.permutation(n)
        epoch_steps = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch = Batch(feats[idx], speakers[idx], languages[idx])
            epoch_steps.append(train_step(model, batch, mode, w, grl_cfg, opt))
        steps.extend(epoch_steps)
        dev_eer = scenario_eer(score_trials(model, corpus.dev_trials, corpus.dev)).overall_eer
        m = EpochMetrics(epoch, sched.phase_index(epoch), epoch_steps[0].lambda1, epoch_steps[0].lambda2,
                         float(np.mean([s.l_id for s in epoch_steps])),
                         float(np.mean([s.l_lang for s in epoch_steps])),
                         float(np.mean([s.l_adv for s in epoch_steps])), dev_eer)
        log.info("%s epoch %d: %s", mode.value, epoch, m.tsv())
        metrics.append(m)
    return TrainResult(model, metrics, steps, spk_index)
