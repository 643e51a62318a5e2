"""Frozen backbone with globally injected dual adapters, embedding heads and
the shared language discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import GrlConfig, LoraLinear, TaskIndicator, grl_forward, lora_forward, merge_speaker_weights
from .tensor import DimensionError, Tensor, l2_normalize, linear, mean, relu, reshape, softmax_cross_entropy, zero_grads


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 24
    width: int = 64
    depth: int = 4
    d_emb: int = 32
    d_emb_lang: int = 16
    r_spk: int = 16
    r_lang: int = 4
    alpha: float = 8.0
    disc_proj: int = 16
    disc_hidden: int = 32
    n_languages: int = 4

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"backbone depth must be >= 2, got {self.depth}")
        for key in ("feat_dim", "width", "d_emb", "d_emb_lang", "disc_proj", "disc_hidden"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.n_languages < 2:
            raise ValueError("need at least two language classes")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.feat_dim] + [self.width] * self.depth
        return [(dims[i + 1], dims[i]) for i in range(self.depth)]


class Dense:
    """Plain trainable affine map."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str, gain: float = 1.0):
        self.W = Tensor(rng.normal(0.0, np.sqrt(gain / d_in), size=(d_out, d_in)), True, f"{name}.W")
        self.b = Tensor(np.zeros(d_out), True, f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pool_frames(x: Tensor, layers, feat_dim: int) -> Tensor:
    """Run per-frame layers over ``(n, T, d)`` input and mean-pool over frames."""
    if x.ndim != 3 or x.shape[2] != feat_dim:
        raise DimensionError(f"backbone expects (n, T, {feat_dim}) features, got {x.shape}")
    n, T, _ = x.shape
    h = reshape(x, (n * T, feat_dim))
    for i, layer in enumerate(layers):
        h = layer(h)
        if i < len(layers) - 1:
            h = relu(h)
    return mean(reshape(h, (n, T, h.shape[1])), axis=1)


class Backbone:
    def __init__(self, layers: list[LoraLinear]):
        if len(layers) < 2:
            raise ValueError("backbone needs at least two layers")
        self.layers = layers

    @property
    def feat_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].d_out

    def __call__(self, x, t: TaskIndicator) -> Tensor:
        t = TaskIndicator(t)
        return _pool_frames(_as_input(x), [lambda h, L=L: lora_forward(L, h, t) for L in self.layers], self.feat_dim)

    def frozen_parameters(self) -> list[Tensor]:
        out = []
        for L in self.layers:
            out.append(L.W0)
            if L.b0 is not None:
                out.append(L.b0)
        return out

    def adapter_parameters(self, t: TaskIndicator | None = None) -> list[Tensor]:
        return [p for L in self.layers for p in L.adapter_parameters(t)]


class EmbeddingHeads:
    def __init__(self, d_in: int, d_emb: int, d_emb_lang: int, rng: np.random.Generator):
        self.spk = Dense(d_in, d_emb, rng, "heads.spk")
        self.lang = Dense(d_in, d_emb_lang, rng, "heads.lang")

    def __getitem__(self, t: TaskIndicator) -> Dense:
        return self.spk if TaskIndicator(t) is TaskIndicator.SPK else self.lang


class Discriminator:
    """Language classifier shared by the anchor and adversarial flows.

    Inputs are L2-normalized (scoring only ever sees embedding directions,
    and an unnormalized input lets the reversed gradient inflate the norm
    without bound). Each branch then enters through its own projection to a
    common width; the MLP after the projection (``fc1 -> relu -> fc2``) is one
    parameter set.
    """

    def __init__(self, d_emb: int, d_emb_lang: int, n_languages: int, rng: np.random.Generator,
                 proj: int = 16, hidden: int = 32):
        self.n_languages = n_languages
        self.proj = {
            TaskIndicator.SPK: Dense(d_emb, proj, rng, "disc.proj_spk"),
            TaskIndicator.LANG: Dense(d_emb_lang, proj, rng, "disc.proj_lang"),
        }
        self.fc1 = Dense(proj, hidden, rng, "disc.fc1", gain=2.0)
        self.fc2 = Dense(hidden, n_languages, rng, "disc.fc2")

    def __call__(self, e: Tensor, branch: TaskIndicator) -> Tensor:
        proj = self.proj[TaskIndicator(branch)]
        if e.ndim != 2 or e.shape[1] != proj.W.shape[1]:
            raise DimensionError(f"discriminator ({TaskIndicator(branch).value} branch) expects width "
                                 f"{proj.W.shape[1]}, got {e.shape}")
        return self.fc2(relu(self.fc1(proj(l2_normalize(e)))))

    def parameters(self, branch: TaskIndicator | None = None) -> list[Tensor]:
        shared = self.fc1.parameters() + self.fc2.parameters()
        if branch is None:
            return self.proj[TaskIndicator.SPK].parameters() + self.proj[TaskIndicator.LANG].parameters() + shared
        return self.proj[TaskIndicator(branch)].parameters() + shared


def forward_pass(backbone: Backbone, heads: EmbeddingHeads, x, t: TaskIndicator) -> Tensor:
    """Embed utterances ``(n, T, d_feat)`` with task ``t``'s adapters and head."""
    return heads[t](backbone(x, t))


def anchor_flow(D: Discriminator, e_lang: Tensor) -> Tensor:
    return D(e_lang, TaskIndicator.LANG)


def adversarial_flow(D: Discriminator, e_spk: Tensor, cfg: GrlConfig) -> Tensor:
    """``D(GRL(e_spk))``: same logits as the plain flow, reversed gradient upstream of D."""
    return D(grl_forward(e_spk, cfg), TaskIndicator.SPK)


# -- backbone pre-training ------------------------------------------------------


def pretrain_backbone(
    features: np.ndarray,
    speakers: np.ndarray,
    cfg: ModelConfig,
    rng: np.random.Generator,
    epochs: int = 10,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 32,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Short speaker-classification warm-up producing the weights to freeze.

    Returns one ``(W, b)`` pair per backbone layer.
    """
    n_classes = int(speakers.max()) + 1
    layers = [Dense(d_in, d_out, rng, f"warmup.{i}", gain=2.0) for i, (d_out, d_in) in enumerate(cfg.layer_dims())]
    clf = Dense(cfg.width, n_classes, rng, "warmup.clf")
    params = [p for L in layers for p in L.parameters()] + clf.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            zero_grads(params)
            pooled = _pool_frames(Tensor(features[idx]), layers, cfg.feat_dim)
            loss = softmax_cross_entropy(clf(relu(pooled)), speakers[idx])
            loss.backward()
            for p, v in zip(params, velocity):
                v *= momentum
                v -= lr * p.grad
                p.data += v
    return [(L.W.data.copy(), L.b.data.copy()) for L in layers]


def random_backbone_weights(cfg: ModelConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in)), np.zeros(d_out)) for d_out, d_in in cfg.layer_dims()]


class DualLoraModel:
    """Everything trainable in one place: backbone adapters, heads and D.

    The speaker-loss class weights live with the identity loss and are
    attached as ``self.arcmargin`` by the trainer.
    """

    def __init__(self, cfg: ModelConfig, backbone_weights: list[tuple[np.ndarray, np.ndarray]], rng: np.random.Generator):
        if [w.shape for w, _ in backbone_weights] != cfg.layer_dims():
            raise DimensionError("backbone weights do not match the configured layer sizes")
        ranks = {TaskIndicator.SPK: cfg.r_spk, TaskIndicator.LANG: cfg.r_lang}
        self.cfg = cfg
        self.backbone = Backbone([
            LoraLinear(W, b, ranks=ranks, alpha=cfg.alpha, rng=rng, name=f"backbone.{i}")
            for i, (W, b) in enumerate(backbone_weights)
        ])
        self.heads = EmbeddingHeads(cfg.width, cfg.d_emb, cfg.d_emb_lang, rng)
        self.disc = Discriminator(cfg.d_emb, cfg.d_emb_lang, cfg.n_languages, rng, cfg.disc_proj, cfg.disc_hidden)
        self.arcmargin = None

    def embed(self, x, t: TaskIndicator) -> Tensor:
        return forward_pass(self.backbone, self.heads, x, t)

    def branch_parameters(self, t: TaskIndicator) -> list[Tensor]:
        params = self.backbone.adapter_parameters(t) + self.heads[t].parameters()
        if TaskIndicator(t) is TaskIndicator.SPK and self.arcmargin is not None:
            params.append(self.arcmargin.class_weights)
        return params

    def trainable_parameters(self) -> list[Tensor]:
        return self.branch_parameters(TaskIndicator.SPK) + self.branch_parameters(TaskIndicator.LANG) + self.disc.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for p in self.backbone.frozen_parameters() + self.trainable_parameters():
            out[p.name] = p
        return out

    def merge(self) -> "MergedModel":
        layers = [(merge_speaker_weights(L), None if L.b0 is None else L.b0.data.copy()) for L in self.backbone.layers]
        return MergedModel(layers, self.heads.spk.W.data.copy(), self.heads.spk.b.data.copy())


class MergedModel:
    """Inference-only speaker embedder with adapters folded into the weights."""

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray | None]], head_W: np.ndarray, head_b: np.ndarray):
        self.layers = [(Tensor(W, name=f"backbone.{i}.W"), None if b is None else Tensor(b, name=f"backbone.{i}.b"))
                       for i, (W, b) in enumerate(layers)]
        self.head_W = Tensor(head_W, name="heads.spk.W")
        self.head_b = Tensor(head_b, name="heads.spk.b")

    @property
    def d_emb(self) -> int:
        return self.head_W.shape[0]

    def embed(self, x) -> Tensor:
        feat_dim = self.layers[0][0].shape[1]
        pooled = _pool_frames(_as_input(x), [lambda h, W=W, b=b: linear(h, W, b) for W, b in self.layers], feat_dim)
        return linear(pooled, self.head_W, self.head_b)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for W, b in self.layers:
            out[W.name] = W
            if b is not None:
                out[b.name] = b
        out[self.head_W.name] = self.head_W
        out[self.head_b.name] = self.head_b
        return out
